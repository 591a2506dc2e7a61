use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;
use tensorvault::synth::{self, SynthModel};
use tensorvault::DType;

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

impl Run {
    fn json(&self) -> Value {
        serde_json::from_str(self.stdout.trim()).unwrap_or_else(|e| {
            panic!("bad JSON ({e}): {}\nstderr: {}", self.stdout, self.stderr)
        })
    }
}

fn tv(args: &[&str], store: Option<&Path>) -> Run {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_tensorvault"));
    cmd.args(args).env_remove("TENSORVAULT_STORE");
    if let Some(s) = store {
        cmd.env("TENSORVAULT_STORE", s);
    }
    let out = cmd.output().unwrap();
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

fn ok(run: Run) -> Run {
    assert_eq!(run.code, 0, "stdout: {}\nstderr: {}", run.stdout, run.stderr);
    run
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_family(seed: u64, n_fine: usize) -> Vec<SynthModel> {
    let layout = synth::transformer_layout(2, 64, 256, DType::BF16);
    synth::family(&layout, 0.03, 0.001, n_fine, seed).unwrap()
}

fn write(models: &[SynthModel], root: &Path, prefix: &str) -> Vec<PathBuf> {
    models
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let d = root.join(format!("{prefix}{i}"));
            m.write_dir(&d).unwrap();
            d
        })
        .collect()
}

fn same_tree(a: &Path, b: &Path) -> bool {
    let mut names: Vec<_> = fs::read_dir(a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    names
        .iter()
        .all(|n| fs::read(a.join(n)).unwrap() == fs::read(b.join(n)).unwrap_or_default())
}

#[test]
fn ingest_retrieve_round_trip_and_duplicates() {
    let tmp = tempfile::tempdir().unwrap();
    let store = tmp.path().join("store");
    let dirs = write(&small_family(1, 1), tmp.path(), "m");
    fs::write(dirs[0].join("config.json"), br#"{"architectures":["X"]}"#).unwrap();

    let r = ok(tv(&["--json", "ingest", "--base", s(&dirs[0])], Some(&store))).json();
    assert_eq!(r["schema_version"], 1);
    assert_eq!(r["model_id"], "m0");
    assert_eq!(r["dedup"], "tensor");
    assert_eq!(r["family"]["method"], "none");

    let f = ok(tv(&["--json", "ingest", s(&dirs[1])], Some(&store))).json();
    assert_eq!(f["family"]["method"], "bit_distance");
    assert_eq!(f["family"]["base_id"], "m0");
    assert!(f["family"]["distance"].as_f64().unwrap() < 4.0);
    assert_eq!(f["tensors"]["standalone"], 0);

    // same model under a new id: whole-file dedup
    let d = ok(tv(&["--json", "ingest", "--id", "again", s(&dirs[0])], Some(&store))).json();
    assert_eq!(d["dedup"], "file");
    // same id, same content: returns the existing manifest
    ok(tv(&["--json", "ingest", s(&dirs[0])], Some(&store)));

    for (id, dir) in [("m0", &dirs[0]), ("m1", &dirs[1]), ("again", &dirs[0])] {
        let out = tmp.path().join(format!("out-{id}"));
        let r = ok(tv(&["--json", "retrieve", id, "--out", s(&out)], Some(&store))).json();
        assert_eq!(r["model_id"], id);
        assert!(same_tree(dir, &out), "{id}");
    }

    let st = ok(tv(&["--json", "stats"], Some(&store))).json();
    assert_eq!(st["models"], 3);
    assert!(st["reduction_ratio"].as_f64().unwrap() > 0.4, "{st}");

    let gc = ok(tv(&["--json", "gc"], Some(&store))).json();
    assert_eq!(gc["removed_entries"], 0);
}

#[test]
fn error_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let store = tmp.path().join("store");
    let missing = tmp.path().join("no-such-model");

    let r = tv(&["ingest", s(&missing)], Some(&store));
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains(s(&missing)), "{}", r.stderr);

    let r = tv(&["retrieve", "ghost", "--out", s(&tmp.path().join("o"))], Some(&store));
    assert_eq!(r.code, 3);

    let r = tv(&["--json", "stats"], None);
    assert_eq!(r.code, 2);
    assert_eq!(r.json()["error"]["kind"], "Usage");

    let r = tv(&["bogus-command"], Some(&store));
    assert_eq!(r.code, 2);
}

#[test]
fn corrupted_pool_is_an_integrity_error() {
    let tmp = tempfile::tempdir().unwrap();
    let store = tmp.path().join("store");
    let dirs = write(&small_family(2, 0), tmp.path(), "m");
    ok(tv(&["ingest", s(&dirs[0])], Some(&store)));
    // damage the largest blob
    let blob = walkdir(&store.join("pool"))
        .into_iter()
        .max_by_key(|p| fs::metadata(p).unwrap().len())
        .unwrap();
    let mut bytes = fs::read(&blob).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x55;
    fs::write(&blob, bytes).unwrap();

    let out = tmp.path().join("out");
    let r = tv(&["--json", "retrieve", "m0", "--out", s(&out)], Some(&store));
    assert_eq!(r.code, 4, "{}", r.stderr);
    assert_eq!(r.json()["error"]["kind"], "ReconstructionMismatch");
    assert!(!out.join("model.safetensors").exists());
}

fn walkdir(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out
}

#[test]
fn bitdist_command() {
    let tmp = tempfile::tempdir().unwrap();
    let dirs = write(&small_family(3, 1), tmp.path(), "m");
    let same = ok(tv(&["--json", "bitdist", s(&dirs[0]), s(&dirs[0])], None)).json();
    assert_eq!(same["distance"], 0.0);
    let fam = ok(tv(&["--json", "bitdist", s(&dirs[0]), s(&dirs[1])], None)).json();
    let d = fam["distance"].as_f64().unwrap();
    assert!(d > 0.0 && d < 4.0, "{d}");
    assert_eq!(fam["bit_counts"].as_array().unwrap().len(), 16);

    let csv = ok(tv(&["bitdist", "--csv", s(&dirs[0]), s(&dirs[1])], None)).stdout;
    assert!(csv.starts_with("bit,group,count,fraction\n0,mantissa,"));
    assert_eq!(csv.lines().count(), 17);

    let other = tmp.path().join("other");
    let odd = synth::gaussian_model(&synth::transformer_layout(1, 32, 64, DType::BF16), 0.03, 9).unwrap();
    odd.write_dir(&other).unwrap();
    let r = tv(&["--json", "bitdist", s(&dirs[0]), s(&other)], None);
    assert_eq!(r.code, 2);
    assert_eq!(r.json()["error"]["kind"], "NoComparableTensors");

    let r = tv(&["bitdist", "--zero-policy", "sometimes", s(&dirs[0]), s(&dirs[0])], None);
    assert_eq!(r.code, 2);
}

#[test]
fn mc_command() {
    let zero = ok(tv(&["mc", "--sigma-w", "0.03", "--sigma-delta", "0", "--samples", "20000"], None)).stdout;
    let row = zero.lines().nth(1).unwrap();
    assert!(row.contains(",0.000000,"), "{row}");

    let args = ["--json", "mc", "--sigma-w", "0.03", "--sigma-delta", "0.01", "--seed", "7"];
    let r = ok(tv(&args, None)).json();
    let e = r["cells"][0]["expected_distance"].as_f64().unwrap();
    assert!((3.5..=6.0).contains(&e), "{e}");

    let grid = ["mc", "--sigma-w", "0.015,0.03", "--sigma-delta", "0.005,0.01", "--samples", "10000", "--seed", "3"];
    let a = ok(tv(&grid, None)).stdout;
    let b = ok(tv(&grid, None)).stdout;
    assert_eq!(a, b);
    assert_eq!(a.lines().count(), 5);
    let threaded = ok(tv(&[&["--threads", "1"][..], &grid[..]].concat(), None)).stdout;
    assert_eq!(a, threaded);

    assert_eq!(tv(&["mc", "--sigma-w", "-1", "--sigma-delta", "0.1"], None).code, 2);
}

#[test]
fn dedup_report_command() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    let m = &small_family(4, 0)[0];
    write(&[m.clone(), m.clone()], &corpus, "m");
    let r = ok(tv(&["--json", "dedup-report", "--chunk-avg", "4096", s(&corpus)], None)).json();
    let reports = r["reports"].as_array().unwrap();
    assert_eq!(reports.len(), 4);
    for rep in reports {
        assert_eq!(rep["reduction_ratio"], 0.5, "{rep}");
    }
    let one = ok(tv(&["--json", "dedup-report", "--granularity", "tensor", s(&corpus)], None)).json();
    assert_eq!(one["reports"].as_array().unwrap().len(), 1);
    assert_eq!(tv(&["dedup-report", "--granularity", "atom", s(&corpus)], None).code, 2);
    assert_eq!(tv(&["dedup-report", "--chunk-avg", "1000", s(&corpus)], None).code, 2);
}

#[test]
fn cluster_command() {
    let tmp = tempfile::tempdir().unwrap();
    let store = tmp.path().join("store");
    let a = write(&small_family(5, 1), tmp.path(), "a");
    let b = write(&small_family(6, 1), tmp.path(), "b");

    ok(tv(&["ingest", "--base", s(&a[0])], Some(&store)));
    let single = ok(tv(&["--json", "cluster"], Some(&store))).json();
    assert!(single["edges"].as_array().unwrap().is_empty());

    for d in [&a[1], &b[0], &b[1]] {
        ok(tv(&["ingest", s(d)], Some(&store)));
    }
    let edges_path = tmp.path().join("edges.tsv");
    let r = ok(tv(&["--json", "cluster", "--edges-out", s(&edges_path)], Some(&store))).json();
    let comps = r["components"].as_array().unwrap();
    assert_eq!(comps.len(), 2, "{r}");
    let tsv = fs::read_to_string(&edges_path).unwrap();
    assert_eq!(tsv.lines().count(), 2);
    assert!(tsv.lines().all(|l| l.split('\t').count() == 3));

    let zero = ok(tv(&["--json", "cluster", "--threshold", "0"], Some(&store))).json();
    assert!(zero["edges"].as_array().unwrap().is_empty());
    ok(tv(&["ingest", "--id", "a0-copy", s(&a[0])], Some(&store)));
    let dup = ok(tv(&["--json", "cluster", "--threshold", "0"], Some(&store))).json();
    let edges = dup["edges"].as_array().unwrap();
    assert_eq!(edges.len(), 1);
    assert_eq!(edges[0]["distance"], 0.0);
}

#[test]
fn rebase_and_ordering_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let store = tmp.path().join("store");
    let dirs = write(&small_family(7, 2), tmp.path(), "m");
    ok(tv(&["ingest", "--base", s(&dirs[0])], Some(&store)));
    ok(tv(&["ingest", s(&dirs[1])], Some(&store)));
    ok(tv(&["ingest", s(&dirs[2])], Some(&store)));

    let r = ok(tv(&["--json", "rebase", "m2", "--onto", "m1"], Some(&store))).json();
    assert_eq!(r["bitx_base"], "m1");
    assert_eq!(r["rebased_from"], "m0");
    let out = tmp.path().join("out");
    ok(tv(&["retrieve", "m2", "--out", s(&out)], Some(&store)));
    assert!(same_tree(&dirs[2], &out));
    assert_eq!(tv(&["rebase", "m2", "--onto", "nobody"], Some(&store)).code, 3);

    let ord = ok(tv(&["--json", "ordering", "--chunk-avg", "4096", s(&dirs[0]), s(&dirs[1]), s(&dirs[2])], None)).json();
    assert_eq!(ord["models"], 3);
    assert!(
        ord["dedup_then_compress"]["reduction_ratio"].as_f64() > ord["compress_then_dedup"]["reduction_ratio"].as_f64()
    );
}
