use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use proptest::prelude::*;
use tempfile::TempDir;
use tensorvault::bitdist::{bit_distance, model_bit_distance, AlignedFloatPair, ModelFiles, ZeroPolicy};
use tensorvault::lineage::{self, AssignMethod};
use tensorvault::store::{IngestOptions, ModelManifest, Store, TensorStorage};
use tensorvault::synth::{self, SynthModel, TensorSpec};
use tensorvault::{bitx, par, DType, Error};

struct Fixture {
    tmp: TempDir,
    store: Store,
}

impl Fixture {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let store = Store::open(tmp.path().join("store")).unwrap();
        Fixture { tmp, store }
    }

    fn write(&self, name: &str, model: &SynthModel) -> PathBuf {
        let dir = self.tmp.path().join("models").join(name);
        model.write_dir(&dir).unwrap();
        dir
    }

    fn ingest(&self, name: &str, model: &SynthModel, opts: IngestOptions) -> ModelManifest {
        let dir = self.write(name, model);
        self.store
            .ingest(&dir, &IngestOptions { model_id: Some(name.into()), ..opts })
            .unwrap()
    }

    fn assert_round_trip(&self, name: &str) {
        let out = self.tmp.path().join("out").join(name);
        let _ = fs::remove_dir_all(&out);
        self.store.retrieve(name, &out).unwrap();
        let original = fs::read(self.tmp.path().join("models").join(name).join("model.safetensors")).unwrap();
        let restored = fs::read(out.join("model.safetensors")).unwrap();
        assert!(original == restored, "{name} differs after retrieval");
    }
}

fn base_flag() -> IngestOptions {
    IngestOptions { is_base: true, ..Default::default() }
}

fn layout() -> Vec<TensorSpec> {
    synth::transformer_layout(2, 128, 512, DType::BF16)
}

fn pool_files(root: &Path) -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = walkdir::WalkDir::new(root.join("pool"))
        .into_iter()
        .map(Result::unwrap)
        .filter(|e| e.file_type().is_file())
        .map(|e| e.into_path())
        .collect();
    out.sort();
    out
}

#[test]
fn duplicate_model_costs_only_its_manifest() {
    let fx = Fixture::new();
    let m = synth::gaussian_model(&layout(), 0.03, 1).unwrap();
    fx.ingest("a", &m, base_flag());
    let before = fx.store.stats().unwrap();
    let dup = fx.ingest("b", &m, IngestOptions::default());
    let after = fx.store.stats().unwrap();
    assert_eq!(after.pool_bytes, before.pool_bytes);
    assert_eq!(dup.stored_total_bytes, 0);
    assert_eq!(
        after.stored_bytes - before.stored_bytes,
        after.manifest_bytes - before.manifest_bytes
    );
    fx.assert_round_trip("b");
}

#[test]
fn fine_tune_is_stored_as_deltas() {
    let fx = Fixture::new();
    let fam = synth::family(&layout(), 0.03, 0.001, 1, 11).unwrap();
    fx.ingest("base", &fam[0], base_flag());
    let before = fx.store.stats().unwrap().pool_bytes;
    let ft = fx.ingest("ft", &fam[1], IngestOptions::default());
    let growth = fx.store.stats().unwrap().pool_bytes - before;

    assert_eq!(ft.family.method, AssignMethod::BitDistance);
    assert_eq!(ft.family.base_id.as_deref(), Some("base"));
    let c = ft.storage_counts();
    assert_eq!(c.standalone, 0, "{c:?}");
    assert!(c.bitx as usize >= fam[1].tensors.len() - 1, "{c:?}");

    let alone = Fixture::new();
    let oracle = alone.ingest("ft", &fam[1], IngestOptions::default());
    assert_eq!(oracle.storage_counts().bitx, 0);
    let standalone = alone.store.stats().unwrap().pool_bytes;
    assert!(
        (growth as f64) < 0.7 * standalone as f64,
        "delta growth {growth} vs standalone {standalone}"
    );
    assert_eq!(ft.stored_total_bytes, growth);
    fx.assert_round_trip("ft");
}

#[test]
fn unrelated_model_is_stored_standalone() {
    let fx = Fixture::new();
    fx.ingest("base", &synth::gaussian_model(&layout(), 0.03, 1).unwrap(), base_flag());
    let other = fx.ingest("other", &synth::gaussian_model(&layout(), 0.03, 2).unwrap(), IngestOptions::default());
    assert_eq!(other.family.method, AssignMethod::None);
    assert!(other.family.distance.unwrap() >= lineage::DEFAULT_THRESHOLD);
    let c = other.storage_counts();
    assert_eq!((c.bitx, c.standalone as usize), (0, layout().len()));
    fx.assert_round_trip("other");
}

#[test]
fn rebase_onto_sibling_unrelated_and_current_base() {
    let fx = Fixture::new();
    let fam = synth::family(&layout(), 0.03, 0.001, 2, 21).unwrap();
    fx.ingest("base", &fam[0], base_flag());
    let f1 = fx.ingest("f1", &fam[1], IngestOptions::default());
    let f2 = fx.ingest("f2", &fam[2], IngestOptions::default());
    assert_eq!(f2.bitx_base.as_deref(), Some("base"));

    let same = fx.store.rebase("f2", "base", 3).unwrap();
    assert_eq!(same, f2);

    let moved = fx.store.rebase("f2", "f1", 3).unwrap();
    assert_eq!(moved.bitx_base.as_deref(), Some("f1"));
    assert_eq!(moved.rebased_from.as_deref(), Some("base"));
    assert!(moved.storage_counts().bitx > 0);
    assert!(
        moved.stored_total_bytes <= 2 * f2.stored_total_bytes,
        "{} vs {}",
        moved.stored_total_bytes,
        f2.stored_total_bytes
    );
    fx.store.gc().unwrap();
    fx.assert_round_trip("f2");
    fx.assert_round_trip("f1");

    // f2 now depends on f1, so f1 cannot take f2 as its base
    let cyclic = fx.store.rebase("f1", "f2", 3).unwrap();
    assert_eq!(cyclic.storage_counts().bitx, 0);
    assert_eq!(cyclic.storage_counts().standalone, f1.storage_counts().bitx);
    fx.store.gc().unwrap();
    fx.assert_round_trip("f1");
    fx.assert_round_trip("f2");

    fx.ingest("stranger", &synth::gaussian_model(&layout(), 0.03, 99).unwrap(), base_flag());
    let far = fx.store.rebase("f2", "stranger", 3).unwrap();
    assert_eq!(far.storage_counts().bitx, 0);
    fx.store.gc().unwrap();
    fx.assert_round_trip("f2");

    assert!(matches!(fx.store.rebase("f2", "f2", 3), Err(Error::IncompatibleSurrogate(_))));
    assert!(matches!(fx.store.rebase("f2", "ghost", 3), Err(Error::ModelNotFound(_))));
}

#[test]
fn reduction_ratio_and_accounting() {
    let fx = Fixture::new();
    let fam = synth::family(&layout(), 0.03, 0.0001, 1, 31).unwrap();
    let a = fx.ingest("base", &fam[0], base_flag());
    let b = fx.ingest("ft", &fam[1], IngestOptions::default());
    assert_eq!(b.storage_counts().standalone, 0);
    let s = fx.store.stats().unwrap();
    assert!(s.reduction_ratio > 0.4, "{s:?}");
    assert_eq!(a.stored_total_bytes + b.stored_total_bytes, s.pool_bytes);

    // frame sizes rebuilt straight from the codec
    let (mut standalone, mut delta) = (0, 0);
    for (t, base) in fam[1].tensors.iter().zip(&fam[0].tensors) {
        standalone += bitx::standalone_encode(&base.data, 3).unwrap().frame_len() as u64;
        delta += bitx::bitx_encode(&t.data, &base.data, 3).unwrap().frame_len() as u64;
    }
    let bd = s.breakdown;
    assert_eq!(bd.standalone.stored, standalone);
    assert_eq!(bd.bitx.stored, delta);
    assert_eq!(
        bd.file_dedup.logical + bd.tensor_dedup.logical + bd.bitx.logical + bd.standalone.logical + bd.metadata.logical,
        s.original_bytes
    );
    assert_eq!(
        bd.tensor_dedup.stored + bd.bitx.stored + bd.standalone.stored + bd.metadata.stored,
        s.stored_bytes
    );
    let expected = 1.0 - s.stored_bytes as f64 / s.original_bytes as f64;
    assert_eq!(s.reduction_ratio, expected);

    let unrelated = Fixture::new();
    let mut sum = 0;
    for seed in 0..3 {
        let m = unrelated.ingest(&format!("u{seed}"), &synth::gaussian_model(&layout(), 0.03, 100 + seed).unwrap(), base_flag());
        sum += m.stored_total_bytes;
    }
    let u = unrelated.store.stats().unwrap();
    assert_eq!(sum, u.pool_bytes);
    assert_eq!(u.breakdown.bitx.logical, 0);
    // only zstd on near-incompressible gaussian bytes
    assert!(u.reduction_ratio < 0.3, "{u:?}");
}

#[test]
fn failed_ingest_leaves_no_trace() {
    let fx = Fixture::new();
    let fam = synth::family(&layout(), 0.03, 0.001, 1, 41).unwrap();
    let base = fx.ingest("base", &fam[0], base_flag());
    let root = fx.store.root().to_path_buf();

    let victim = base
        .tensor_entries()
        .find_map(|e| match e.storage {
            TensorStorage::Standalone { blob_id } => Some(blob_id),
            _ => None,
        })
        .unwrap();
    let hex = victim.to_hex();
    let blob = root.join("pool").join(&hex[0..2]).join(&hex[2..4]).join(&hex);
    let mut bytes = fs::read(&blob).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    fs::write(&blob, &bytes).unwrap();

    let index_before = fs::read_to_string(root.join("index")).unwrap();
    let files_before = pool_files(&root);
    let dir = fx.write("ft", &fam[1]);
    let err = fx
        .store
        .ingest(&dir, &IngestOptions { model_id: Some("ft".into()), declared_base: Some("base".into()), ..Default::default() })
        .unwrap_err();
    assert!(matches!(err, Error::PartialIngestRollback { .. }), "{err:?}");
    assert!(!root.join("manifests").join("ft.json").exists());
    assert!(matches!(fx.store.manifest("ft"), Err(Error::ModelNotFound(_))));

    fx.store.gc().unwrap();
    assert_eq!(fs::read_to_string(root.join("index")).unwrap(), index_before);
    assert_eq!(pool_files(&root), files_before);
}

#[test]
fn concurrent_ingests_share_one_store() {
    let fx = Fixture::new();
    let fam = synth::family(&layout(), 0.03, 0.001, 4, 51).unwrap();
    fx.ingest("base", &fam[0], base_flag());
    let dirs: Vec<PathBuf> = (1..fam.len()).map(|i| fx.write(&format!("f{i}"), &fam[i])).collect();
    let root = fx.store.root().to_path_buf();
    std::thread::scope(|s| {
        for dir in &dirs {
            let root = root.clone();
            s.spawn(move || {
                let store = Store::open(root).unwrap();
                store.ingest(dir, &IngestOptions::default()).unwrap();
            });
        }
    });
    let s = fx.store.stats().unwrap();
    assert_eq!(s.models, 5);
    let sum: u64 = fx.store.models().unwrap().iter().map(|m| m.stored_total_bytes).sum();
    assert_eq!(sum, s.pool_bytes);
    let gc = fx.store.gc().unwrap();
    assert_eq!(fx.store.stats().unwrap().pool_bytes, s.pool_bytes, "{gc:?}");
    for i in 1..fam.len() {
        fx.assert_round_trip(&format!("f{i}"));
    }
}

#[test]
fn lineage_prefers_true_base_over_impostor() {
    let fx = Fixture::new();
    let fam = synth::family(&layout(), 0.03, 0.002, 1, 61).unwrap();
    fx.ingest("impostor", &synth::gaussian_model(&layout(), 0.03, 62).unwrap(), base_flag());
    fx.ingest("true-base", &fam[0], base_flag());
    let ft = fx.ingest("ft", &fam[1], IngestOptions::default());

    assert_eq!(ft.family.base_id.as_deref(), Some("true-base"));
    assert_eq!(ft.family.method, AssignMethod::BitDistance);
    let dist: BTreeMap<&str, f64> = ft
        .family
        .candidates
        .iter()
        .map(|c| (c.model_id.as_str(), c.distance))
        .collect();
    let (truth, impostor) = (dist["true-base"], dist["impostor"]);
    assert!(truth < lineage::DEFAULT_THRESHOLD, "{dist:?}");
    assert!(impostor > 4.0 && impostor > truth, "{dist:?}");

    // the recorded distance equals a fresh computation
    let opts = lineage::lineage_distance_options(Default::default());
    let recomputed = model_bit_distance(
        &ModelFiles(vec![fam[1].parsed()]),
        &ModelFiles(vec![fam[0].parsed()]),
        &opts,
    )
    .unwrap();
    assert_eq!(recomputed.distance, truth);
    assert_eq!(ft.family.distance, Some(truth));
}

#[test]
fn declared_base_wins_without_distance() {
    let fx = Fixture::new();
    let fam = synth::family(&layout(), 0.03, 0.001, 1, 71).unwrap();
    fx.ingest("org/base", &fam[0], IngestOptions::default());
    let dir = fx.write("ft", &fam[1]);
    fs::write(dir.join("README.md"), "---\nbase_model: org/base\n---\n# ft\n").unwrap();
    let ft = fx.store.ingest(&dir, &IngestOptions::default()).unwrap();
    assert_eq!(ft.model_id, "ft");
    assert_eq!(ft.family.method, AssignMethod::Declared);
    assert_eq!(ft.family.base_id.as_deref(), Some("org/base"));
    assert!(ft.family.candidates.is_empty());
    assert!(ft.storage_counts().bitx > 0);
    fx.assert_round_trip("ft");
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let fam = synth::family(&layout(), 0.03, 0.002, 2, 81).unwrap();
    let run = |threads: usize| {
        par::with_threads(threads, || {
            let fx = Fixture::new();
            fx.ingest("base", &fam[0], base_flag());
            let a = fx.ingest("f1", &fam[1], IngestOptions::default());
            let b = fx.ingest("f2", &fam[2], IngestOptions::default());
            (a.family, b.family, a.pins, b.pins, fx.store.stats().unwrap().pool_bytes)
        })
    };
    assert_eq!(run(1), run(4));
}

fn float_buffer(dtype: DType) -> impl Strategy<Value = (DType, Vec<u8>, Vec<u8>)> {
    let width = if dtype == DType::F32 { 4 } else { 2 };
    (0usize..300).prop_flat_map(move |n| {
        let dt = dtype.clone();
        (
            proptest::collection::vec(any::<u8>(), n * width),
            proptest::collection::vec(any::<u8>(), n * width),
        )
            .prop_map(move |(a, b)| (dt.clone(), a, b))
    })
}

proptest! {
    #[test]
    fn distance_is_xor_popcount_per_element(
        (dtype, a, b) in prop_oneof![float_buffer(DType::BF16), float_buffer(DType::F16), float_buffer(DType::F32)]
    ) {
        let pair = AlignedFloatPair::new(&dtype, &a, &b).unwrap();
        let r = bit_distance(&pair, ZeroPolicy::IncludeAll);
        let pop: u64 = a.iter().zip(&b).map(|(x, y)| (x ^ y).count_ones() as u64).sum();
        prop_assert_eq!(r.n_used as usize, pair.len());
        prop_assert_eq!(r.bit_counts.iter().sum::<u64>(), pop);
        if r.n_used > 0 {
            prop_assert!((r.distance * r.n_used as f64 - pop as f64).abs() < 1e-6);
        } else {
            prop_assert_eq!(r.distance, 0.0);
        }
    }
}
