//! The storage pipeline: ingest, retrieve, rebase, stats and gc over one
//! store directory.
//!
//! Store layout:
//!
//! ```text
//! <root>/pool/ab/cd/<hex>        blobs (headers, gaps, frames, opaque files)
//! <root>/index                   pool index with refcounts
//! <root>/manifests/<id>.json     one manifest per model
//! <root>/lock                    advisory lock file
//! ```
//!
//! Every tensor is identified by the SHA-256 of its raw bytes. The stored form
//! of a tensor (a BitX delta against a base tensor, or a standalone zstd
//! frame) is recorded in the manifest of the model that first contributed
//! it; later models point at it with a dedup entry. The tensor map is rebuilt
//! from manifests on every operation, so manifests are the only source of
//! truth besides the pool itself.
//!
//! Each manifest lists `pins`: every blob needed to rebuild the model,
//! including the frames of base tensors its deltas depend on. The pool
//! refcount of a blob is the number of manifests pinning it.
//!
//! Mutating operations hold an exclusive lock on `<root>/lock`; reads hold a
//! shared one. The pool index is flushed before the manifest is written, so
//! a crash in between leaves an extra reference that `gc` repairs by
//! recounting pins.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use bytes::Bytes;
use serde::{Deserialize, Serialize};

use crate::bitdist::{Sampling, TensorSource};
use crate::bitx::{self, BitxDelta, StandaloneBlob};
use crate::error::{Error, Result};
use crate::lineage::{
    self, assign_family, BaseDeclaration, Edge, FamilyAssignment, GraphNode, ModelRecord,
    ModelSource, RegistryEntry,
};
use crate::par;
use crate::pool::{BlobKind, ContentId, GcReport, Pool};
use crate::safetensors::{parse_model_file, ParsedModelFile, TensorDescriptor};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// Longest base chain followed while rebuilding a tensor.
const MAX_CHAIN_DEPTH: usize = 64;

/// Metadata files larger than this are not scanned for a declared base.
const MAX_METADATA_SCAN: u64 = 4 << 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TensorStorage {
    /// Identical bytes are already stored under this tensor id.
    Dedup { tensor_id: ContentId },
    /// XOR delta against `base_tensor_id`, stored as frame `delta_id`.
    Bitx {
        delta_id: ContentId,
        base_tensor_id: ContentId,
    },
    Standalone { blob_id: ContentId },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub descriptor: TensorDescriptor,
    /// Hash of the raw tensor bytes.
    pub tensor_id: ContentId,
    pub storage: TensorStorage,
}

/// Payload bytes not covered by any tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GapEntry {
    /// Offset from the start of the payload.
    pub offset: u64,
    pub length: u64,
    pub blob_id: ContentId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileKind {
    Safetensors,
    /// Any other file, stored whole.
    Opaque,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Path relative to the model directory, `/`-separated.
    pub path: String,
    pub file_id: ContentId,
    pub size: u64,
    pub kind: FileKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub header_blob_id: Option<ContentId>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tensor_entries: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gaps: Vec<GapEntry>,
    /// Set when the whole file was already stored by this model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reused_from: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DedupLevel {
    /// Every file was an exact duplicate of a stored file.
    File,
    Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub schema_version: u32,
    pub model_id: String,
    /// Registration order within the store.
    pub seq: u64,
    pub is_base: bool,
    pub record: ModelRecord,
    pub family: FamilyAssignment,
    /// Model whose tensors the BitX entries are currently encoded against.
    pub bitx_base: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rebased_from: Option<String>,
    pub dedup: DedupLevel,
    pub level: i32,
    pub file_entries: Vec<FileEntry>,
    pub original_total_bytes: u64,
    /// Pool bytes first written on behalf of this model.
    pub stored_total_bytes: u64,
    pub pins: Vec<ContentId>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorageCounts {
    pub dedup: u64,
    pub bitx: u64,
    pub standalone: u64,
}

impl ModelManifest {
    pub fn tensor_entries(&self) -> impl Iterator<Item = &TensorEntry> {
        self.file_entries.iter().flat_map(|f| f.tensor_entries.iter())
    }

    pub fn storage_counts(&self) -> StorageCounts {
        let mut c = StorageCounts::default();
        for e in self.tensor_entries() {
            match e.storage {
                TensorStorage::Dedup { .. } => c.dedup += 1,
                TensorStorage::Bitx { .. } => c.bitx += 1,
                TensorStorage::Standalone { .. } => c.standalone += 1,
            }
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestOptions {
    /// Defaults to the directory name.
    pub model_id: Option<String>,
    /// Overrides whatever the metadata files declare.
    pub declared_base: Option<String>,
    pub threshold: f64,
    pub level: i32,
    pub is_base: bool,
    pub sampling: Sampling,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            model_id: None,
            declared_base: None,
            threshold: lineage::DEFAULT_THRESHOLD,
            level: bitx::DEFAULT_LEVEL,
            is_base: false,
            sampling: Sampling::Full,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MechanismBytes {
    /// Original bytes handled by this mechanism.
    pub logical: u64,
    /// Pool bytes it occupies, each blob counted once.
    pub stored: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Breakdown {
    pub file_dedup: MechanismBytes,
    pub tensor_dedup: MechanismBytes,
    pub bitx: MechanismBytes,
    pub standalone: MechanismBytes,
    /// Headers, gaps, opaque files and manifests.
    pub metadata: MechanismBytes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreStats {
    pub models: u64,
    pub original_bytes: u64,
    /// Live pool bytes plus manifest bytes.
    pub stored_bytes: u64,
    pub pool_bytes: u64,
    pub manifest_bytes: u64,
    pub reduction_ratio: f64,
    pub breakdown: Breakdown,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrieveReport {
    pub model_id: String,
    pub files: Vec<String>,
    pub bytes: u64,
}

/// Handle on a store directory.
#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

impl Store {
    /// Opens a store, creating the directory layout if needed.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        for dir in [root.join("pool"), root.join("manifests")] {
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        let store = Store { root };
        let _guard = store.lock(false)?;
        State::load(&store.root)?;
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn lock(&self, exclusive: bool) -> Result<File> {
        let path = self.root.join("lock");
        let file = File::options()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let locked = if exclusive { file.lock() } else { file.lock_shared() };
        locked.map_err(|e| Error::io(&path, e))?;
        Ok(file)
    }

    pub fn manifest(&self, model_id: &str) -> Result<ModelManifest> {
        let _guard = self.lock(false)?;
        let st = State::load(&self.root)?;
        st.manifests
            .get(model_id)
            .cloned()
            .ok_or_else(|| Error::ModelNotFound(model_id.to_string()))
    }

    /// All manifests in registration order.
    pub fn models(&self) -> Result<Vec<ModelManifest>> {
        let _guard = self.lock(false)?;
        Ok(State::load(&self.root)?.by_seq().into_iter().cloned().collect())
    }

    /// Ingests the model at `model_dir` (a directory or a single
    /// `.safetensors` file).
    pub fn ingest(&self, model_dir: &Path, opts: &IngestOptions) -> Result<ModelManifest> {
        if opts.threshold.is_nan() || opts.threshold <= 0.0 {
            return Err(Error::InvalidParams(format!(
                "threshold must be > 0, got {}",
                opts.threshold
            )));
        }
        bitx::check_level(opts.level)?;
        let (default_id, files) = scan_model_dir(model_dir)?;
        let model_id = opts.model_id.clone().unwrap_or(default_id);
        validate_model_id(&model_id)?;
        let loaded = par::try_map(&files, |(rel, path)| LoadedFile::load(rel, path))?;

        let _guard = self.lock(true)?;
        let mut st = State::load(&self.root)?;
        if let Some(existing) = st.manifests.get(&model_id) {
            let same = existing.file_entries.len() == loaded.len()
                && existing
                    .file_entries
                    .iter()
                    .zip(&loaded)
                    .all(|(e, f)| e.path == f.rel && e.file_id == f.id);
            return if same {
                Ok(existing.clone())
            } else {
                Err(Error::ModelExists(model_id))
            };
        }

        let mut tx = Acquired::default();
        match ingest_locked(&self.root, &mut st, &mut tx, &model_id, &loaded, opts) {
            Ok(m) => Ok(m),
            Err(e) => {
                tx.rollback(&st.pool);
                Err(Error::PartialIngestRollback(Box::new(e)))
            }
        }
    }

    /// Rebuilds every file of `model_id` under `out_dir`. Each file is
    /// checked against its recorded hash before it is written.
    pub fn retrieve(&self, model_id: &str, out_dir: &Path) -> Result<RetrieveReport> {
        let _guard = self.lock(false)?;
        let st = State::load(&self.root)?;
        let m = st
            .manifests
            .get(model_id)
            .ok_or_else(|| Error::ModelNotFound(model_id.to_string()))?;
        let mut report = RetrieveReport {
            model_id: model_id.to_string(),
            files: Vec::new(),
            bytes: 0,
        };
        for fe in &m.file_entries {
            let bytes = st.rebuild_file(fe).map_err(|e| integrity(&fe.path, e))?;
            let dest = out_dir.join(&fe.path);
            write_atomic(&dest, &bytes)?;
            report.files.push(fe.path.clone());
            report.bytes += bytes.len() as u64;
        }
        Ok(report)
    }

    /// Re-encodes the BitX entries of `model_id` against `new_base_id`,
    /// keeping whichever of delta or standalone frame is smaller per tensor.
    pub fn rebase(&self, model_id: &str, new_base_id: &str, level: i32) -> Result<ModelManifest> {
        bitx::check_level(level)?;
        let _guard = self.lock(true)?;
        let st = State::load(&self.root)?;
        let m = st
            .manifests
            .get(model_id)
            .cloned()
            .ok_or_else(|| Error::ModelNotFound(model_id.to_string()))?;
        let surrogate = st
            .manifests
            .get(new_base_id)
            .ok_or_else(|| Error::ModelNotFound(new_base_id.to_string()))?;
        if m.bitx_base.as_deref() == Some(new_base_id) {
            return Ok(m);
        }
        if new_base_id == model_id {
            return Err(Error::IncompatibleSurrogate(new_base_id.to_string()));
        }

        let surrogate_tensors: HashMap<&str, (ContentId, u64)> = surrogate
            .tensor_entries()
            .map(|e| (e.name.as_str(), (e.tensor_id, e.descriptor.byte_len())))
            .collect();
        let matching = |e: &TensorEntry| {
            surrogate_tensors
                .get(e.name.as_str())
                .filter(|(_, len)| *len == e.descriptor.byte_len())
                .map(|(id, _)| *id)
        };
        if !m.tensor_entries().any(|e| matching(e).is_some()) {
            return Err(Error::IncompatibleSurrogate(new_base_id.to_string()));
        }

        let own: HashSet<ContentId> = m.tensor_entries().map(|e| e.tensor_id).collect();
        let jobs: Vec<(usize, usize)> = m
            .file_entries
            .iter()
            .enumerate()
            .flat_map(|(fi, f)| {
                f.tensor_entries
                    .iter()
                    .enumerate()
                    .filter(|(_, e)| matches!(e.storage, TensorStorage::Bitx { .. }))
                    .map(move |(ti, _)| (fi, ti))
            })
            .collect();
        let st_ref = &st;
        let encoded = par::try_map(&jobs, |&(fi, ti)| {
            let e = &m.file_entries[fi].tensor_entries[ti];
            let fine = st_ref.resolve(&e.tensor_id, 0)?;
            let standalone = bitx::standalone_encode(&fine, level)?.to_frame();
            if let Some(base_id) = matching(e) {
                if base_id != e.tensor_id && !st_ref.depends_on(&base_id, &own) {
                    let base = st_ref.resolve(&base_id, 0)?;
                    let delta = bitx::bitx_encode(&fine, &base, level)?.to_frame();
                    if delta.len() <= standalone.len() {
                        return Ok(Frame::Delta {
                            frame: delta,
                            base_tensor_id: base_id,
                            raw_len: fine.len() as u64,
                        });
                    }
                }
            }
            Ok(Frame::Standalone {
                frame: standalone,
                raw_len: fine.len() as u64,
            })
        })?;

        let mut tx = Acquired::default();
        let mut released = Vec::new();
        let result = (|| {
            let mut next = m.clone();
            let mut pending = HashMap::new();
            for (&(fi, ti), frame) in jobs.iter().zip(encoded) {
                let storage = tx.put_frame(&st.pool, frame)?;
                let entry = &mut next.file_entries[fi].tensor_entries[ti];
                entry.storage = storage.clone();
                pending.insert(entry.tensor_id, storage);
            }
            let pins = st.pins_for(&next.file_entries, &pending)?;
            tx.retain_missing(&st.pool, &pins)?;
            let mut freed = 0u64;
            for id in &m.pins {
                let left = st.pool.release(id)?;
                released.push(*id);
                if left == 0 {
                    freed += st.pool.entry(id).map_or(0, |e| e.stored_size);
                }
            }
            next.pins = pins.into_iter().collect();
            next.stored_total_bytes = (m.stored_total_bytes + tx.new_bytes).saturating_sub(freed);
            next.rebased_from = m.bitx_base.clone();
            next.bitx_base = Some(new_base_id.to_string());
            st.pool.flush()?;
            write_manifest(&self.root, &next)?;
            Ok(next)
        })();
        if result.is_err() {
            for id in &released {
                let _ = st.pool.retain_any(id);
            }
            tx.rollback(&st.pool);
        }
        result
    }

    /// Recounts refcounts from manifest pins, then deletes unreferenced
    /// blobs and stray files.
    pub fn gc(&self) -> Result<GcReport> {
        let _guard = self.lock(true)?;
        let st = State::load(&self.root)?;
        let mut counts: HashMap<ContentId, u64> = HashMap::new();
        for m in st.manifests.values() {
            for id in &m.pins {
                *counts.entry(*id).or_insert(0) += 1;
            }
        }
        st.pool.reset_refcounts(&counts);
        st.pool.gc()
    }

    pub fn stats(&self) -> Result<StoreStats> {
        let _guard = self.lock(false)?;
        let st = State::load(&self.root)?;
        let size_of = |id: &ContentId| st.pool.entry(id).map_or(0, |e| e.stored_size);
        let mut seen = HashSet::new();
        let mut b = Breakdown::default();
        let mut original = 0;
        for m in st.by_seq() {
            original += m.original_total_bytes;
            for f in &m.file_entries {
                if f.reused_from.is_some() {
                    b.file_dedup.logical += f.size;
                    continue;
                }
                let mut meta = |id: &ContentId, logical: u64, b: &mut Breakdown| {
                    b.metadata.logical += logical;
                    if seen.insert(*id) {
                        b.metadata.stored += size_of(id);
                    }
                };
                match f.kind {
                    FileKind::Opaque => meta(&f.file_id, f.size, &mut b),
                    FileKind::Safetensors => {
                        if let Some(h) = &f.header_blob_id {
                            meta(h, 8 + size_of(h), &mut b);
                        }
                        for g in &f.gaps {
                            meta(&g.blob_id, g.length, &mut b);
                        }
                    }
                }
                for e in &f.tensor_entries {
                    let len = e.descriptor.byte_len();
                    match &e.storage {
                        TensorStorage::Dedup { .. } => b.tensor_dedup.logical += len,
                        TensorStorage::Bitx { delta_id, .. } => {
                            b.bitx.logical += len;
                            if seen.insert(*delta_id) {
                                b.bitx.stored += size_of(delta_id);
                            }
                        }
                        TensorStorage::Standalone { blob_id } => {
                            b.standalone.logical += len;
                            if seen.insert(*blob_id) {
                                b.standalone.stored += size_of(blob_id);
                            }
                        }
                    }
                }
            }
        }
        let manifest_bytes = st.manifest_bytes;
        b.metadata.stored += manifest_bytes;
        let pool_bytes: u64 = st
            .pool
            .entries()
            .iter()
            .filter(|e| e.refcount > 0)
            .map(|e| e.stored_size)
            .sum();
        let stored = pool_bytes + manifest_bytes;
        Ok(StoreStats {
            models: st.manifests.len() as u64,
            original_bytes: original,
            stored_bytes: stored,
            pool_bytes,
            manifest_bytes,
            reduction_ratio: if original == 0 {
                0.0
            } else {
                1.0 - stored as f64 / original as f64
            },
            breakdown: b,
        })
    }

    /// Similarity edges between stored models, in registration order.
    pub fn similarity_graph(
        &self,
        threshold: f64,
        opts: &crate::bitdist::DistanceOptions,
    ) -> Result<(Vec<String>, Vec<Edge>)> {
        let _guard = self.lock(false)?;
        let st = State::load(&self.root)?;
        let models = st.by_seq();
        let materialized = par::try_map(&models, |m| st.materialize(m))?;
        let nodes: Vec<GraphNode<'_>> = models
            .iter()
            .zip(&materialized)
            .map(|(m, src)| GraphNode {
                model_id: m.model_id.clone(),
                shapes_digest: m.record.tensor_shapes_digest,
                source: src,
            })
            .collect();
        let edges = lineage::build_similarity_graph(&nodes, threshold, opts)?;
        Ok((models.iter().map(|m| m.model_id.clone()).collect(), edges))
    }
}

fn integrity(path: &str, e: Error) -> Error {
    match e {
        Error::CorruptBlob { .. }
        | Error::CorruptFrame(_)
        | Error::BaseMismatch { .. }
        | Error::LengthMismatch { .. } => Error::ReconstructionMismatch {
            path: path.to_string(),
            detail: e.to_string(),
        },
        other => other,
    }
}

enum Frame {
    Delta {
        frame: Vec<u8>,
        base_tensor_id: ContentId,
        raw_len: u64,
    },
    Standalone {
        frame: Vec<u8>,
        raw_len: u64,
    },
}

/// References taken during one mutation, for rollback.
#[derive(Default)]
struct Acquired {
    ids: Vec<ContentId>,
    set: HashSet<ContentId>,
    new_bytes: u64,
}

impl Acquired {
    fn put(&mut self, pool: &Pool, bytes: &[u8], kind: BlobKind, logical: u64) -> Result<ContentId> {
        let id = ContentId::of(bytes);
        if self.set.contains(&id) {
            return Ok(id);
        }
        let (id, was_new) = pool.put(bytes, kind, logical)?;
        if was_new {
            self.new_bytes += bytes.len() as u64;
        }
        self.set.insert(id);
        self.ids.push(id);
        Ok(id)
    }

    fn put_frame(&mut self, pool: &Pool, frame: Frame) -> Result<TensorStorage> {
        Ok(match frame {
            Frame::Delta {
                frame,
                base_tensor_id,
                raw_len,
            } => TensorStorage::Bitx {
                delta_id: self.put(pool, &frame, BlobKind::CompressedDelta, raw_len)?,
                base_tensor_id,
            },
            Frame::Standalone { frame, raw_len } => TensorStorage::Standalone {
                blob_id: self.put(pool, &frame, BlobKind::CompressedStandalone, raw_len)?,
            },
        })
    }

    /// Takes a reference on every pin not already acquired.
    fn retain_missing(&mut self, pool: &Pool, pins: &BTreeSet<ContentId>) -> Result<()> {
        for id in pins {
            if self.set.insert(*id) {
                pool.retain(id)?;
                self.ids.push(*id);
            }
        }
        if let Some(extra) = self.ids.iter().find(|id| !pins.contains(id)) {
            return Err(Error::StoreCorruption(format!(
                "blob {extra} was written but is not reachable from the manifest"
            )));
        }
        Ok(())
    }

    fn rollback(&self, pool: &Pool) {
        for id in &self.ids {
            let _ = pool.release(id);
        }
        // Restores the on-disk counts in case the index was already flushed.
        let _ = pool.flush();
    }
}

struct LoadedFile {
    rel: String,
    id: ContentId,
    size: u64,
    content: Content,
}

enum Content {
    Safetensors(ParsedModelFile),
    Opaque(Bytes),
}

impl LoadedFile {
    fn load(rel: &str, path: &Path) -> Result<Self> {
        if is_safetensors(rel) {
            let parsed = parse_model_file(path)?;
            Ok(LoadedFile {
                rel: rel.to_string(),
                id: parsed.content_id(),
                size: parsed.file_len(),
                content: Content::Safetensors(parsed),
            })
        } else {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            Ok(LoadedFile {
                rel: rel.to_string(),
                id: ContentId::of(&bytes),
                size: bytes.len() as u64,
                content: Content::Opaque(Bytes::from(bytes)),
            })
        }
    }
}

fn is_safetensors(name: &str) -> bool {
    name.to_ascii_lowercase().ends_with(".safetensors")
}

/// Default model id and `(relative path, absolute path)` pairs in sorted order.
fn scan_model_dir(dir: &Path) -> Result<(String, Vec<(String, PathBuf)>)> {
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    if dir.is_file() && is_safetensors(&name) {
        let stem = name[..name.len() - ".safetensors".len()].to_string();
        return Ok((stem, vec![(name, dir.to_path_buf())]));
    }
    if !dir.is_dir() {
        return Err(Error::NoModelFiles(dir.to_path_buf()));
    }
    let mut files = Vec::new();
    for item in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let item = item.map_err(|e| Error::io(dir, std::io::Error::other(e.to_string())))?;
        if !item.file_type().is_file() {
            continue;
        }
        let rel = item
            .path()
            .strip_prefix(dir)
            .expect("walkdir yields paths under its root")
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        files.push((rel, item.path().to_path_buf()));
    }
    if !files.iter().any(|(rel, _)| is_safetensors(rel)) {
        return Err(Error::NoModelFiles(dir.to_path_buf()));
    }
    Ok((name, files))
}

fn validate_model_id(id: &str) -> Result<()> {
    static ID: std::sync::LazyLock<regex::Regex> = std::sync::LazyLock::new(|| {
        regex::Regex::new(r"^[A-Za-z0-9][A-Za-z0-9._+\-]*(/[A-Za-z0-9][A-Za-z0-9._+\-]*)?$").unwrap()
    });
    if ID.is_match(id) {
        Ok(())
    } else {
        Err(Error::InvalidParams(format!(
            "model id {id:?} must look like `name` or `org/name` using letters, digits, `.`, `_`, `+`, `-`"
        )))
    }
}

fn manifest_path(root: &Path, model_id: &str) -> PathBuf {
    root.join("manifests")
        .join(format!("{}.json", model_id.replace('/', "~")))
}

fn write_manifest(root: &Path, m: &ModelManifest) -> Result<()> {
    let json = serde_json::to_vec_pretty(m)
        .map_err(|e| Error::StoreCorruption(format!("cannot encode manifest: {e}")))?;
    write_atomic(&manifest_path(root, &m.model_id), &json)
}

fn write_atomic(dest: &Path, bytes: &[u8]) -> Result<()> {
    let dir = dest.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::Builder::new()
        .prefix(".tmp-")
        .tempfile_in(dir)
        .map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes)
        .and_then(|_| tmp.as_file().sync_all())
        .map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(dest).map_err(|e| Error::io(dest, e.error))?;
    Ok(())
}

fn ingest_locked(
    root: &Path,
    st: &mut State,
    tx: &mut Acquired,
    model_id: &str,
    loaded: &[LoadedFile],
    opts: &IngestOptions,
) -> Result<ModelManifest> {
    let seq = st.manifests.values().map(|m| m.seq + 1).max().unwrap_or(0);
    let original_total_bytes = loaded.iter().map(|f| f.size).sum();
    let parsed: Vec<&ParsedModelFile> = loaded
        .iter()
        .filter_map(|f| match &f.content {
            Content::Safetensors(p) => Some(p),
            Content::Opaque(_) => None,
        })
        .collect();
    let descriptors: Vec<TensorDescriptor> =
        parsed.iter().flat_map(|p| p.tensors().iter().cloned()).collect();

    let reused: Vec<Option<FileEntry>> = loaded
        .iter()
        .map(|f| {
            st.files.get(&f.id).map(|(owner, idx)| {
                let mut e = st.manifests[owner].file_entries[*idx].clone();
                e.path = f.rel.clone();
                e.reused_from = Some(owner.clone());
                e
            })
        })
        .collect();
    let all_reused = reused.iter().all(Option::is_some);
    let tensors_reused = loaded
        .iter()
        .zip(&reused)
        .filter(|(f, _)| matches!(f.content, Content::Safetensors(_)))
        .all(|(_, r)| r.is_some());

    let declared = declared_base(st, loaded, opts);
    let record = ModelRecord::from_descriptors(model_id, &descriptors, declared);

    let (family, bitx_base) = if tensors_reused {
        // Same tensor files as an existing model: inherit its family.
        let owner = loaded
            .iter()
            .zip(&reused)
            .find(|(f, _)| matches!(f.content, Content::Safetensors(_)))
            .and_then(|(_, r)| r.as_ref()?.reused_from.clone())
            .expect("at least one safetensors file");
        let src = &st.manifests[&owner];
        let mut family = src.family.clone();
        family.model_id = model_id.to_string();
        (family, src.bitx_base.clone())
    } else {
        let registry = st.registry();
        let source = crate::bitdist::ModelFiles(parsed.iter().map(|p| (*p).clone()).collect());
        let family = assign_family(
            &record,
            &source,
            &registry,
            &*st,
            opts.threshold,
            &lineage::lineage_distance_options(opts.sampling),
        )?;
        let base = family.base_id.clone();
        (family, base)
    };

    let base_tensors: HashMap<&str, (ContentId, u64)> = bitx_base
        .as_ref()
        .and_then(|b| st.manifests.get(b))
        .map(|m| {
            m.tensor_entries()
                .map(|e| (e.name.as_str(), (e.tensor_id, e.descriptor.byte_len())))
                .collect()
        })
        .unwrap_or_default();

    // Hash every tensor of every new file.
    let fresh: Vec<(usize, &ParsedModelFile)> = loaded
        .iter()
        .enumerate()
        .filter(|(i, _)| reused[*i].is_none())
        .filter_map(|(i, f)| match &f.content {
            Content::Safetensors(p) => Some((i, p)),
            Content::Opaque(_) => None,
        })
        .collect();
    let slots: Vec<(usize, &ParsedModelFile, &TensorDescriptor)> = fresh
        .iter()
        .flat_map(|&(i, p)| p.tensors().iter().map(move |d| (i, p, d)))
        .collect();
    let ids = par::map(&slots, |(_, p, d)| ContentId::of(&p.bytes_of(d)));

    // Decide storage: dedup against the store and earlier tensors in this
    // model, BitX when the base has a same-name tensor of equal size.
    let mut first_seen = HashSet::new();
    let mut jobs = Vec::new();
    for (k, (_, _, d)) in slots.iter().enumerate() {
        let id = ids[k];
        if st.defs.contains_key(&id) || !first_seen.insert(id) {
            continue;
        }
        let base = base_tensors
            .get(d.name.as_str())
            .filter(|(bid, len)| *len == d.byte_len() && *bid != id)
            .map(|(bid, _)| *bid);
        jobs.push((k, base));
    }
    let st_ref = &*st;
    let frames = par::try_map(&jobs, |&(k, base)| {
        let (_, p, d) = slots[k];
        let bytes = p.bytes_of(d);
        Ok::<_, Error>(match base {
            Some(base_id) => {
                let base = st_ref.resolve(&base_id, 0)?;
                Frame::Delta {
                    frame: bitx::bitx_encode(&bytes, &base, opts.level)?.to_frame(),
                    base_tensor_id: base_id,
                    raw_len: bytes.len() as u64,
                }
            }
            None => Frame::Standalone {
                frame: bitx::standalone_encode(&bytes, opts.level)?.to_frame(),
                raw_len: bytes.len() as u64,
            },
        })
    })?;
    let mut pending: HashMap<ContentId, TensorStorage> = HashMap::new();
    let mut produced: HashSet<usize> = HashSet::new();
    for (&(k, _), frame) in jobs.iter().zip(frames) {
        let storage = tx.put_frame(&st.pool, frame)?;
        pending.insert(ids[k], storage);
        produced.insert(k);
    }

    let mut file_entries = Vec::with_capacity(loaded.len());
    let mut k = 0;
    for (i, f) in loaded.iter().enumerate() {
        if let Some(entry) = &reused[i] {
            file_entries.push(entry.clone());
            continue;
        }
        let mut entry = FileEntry {
            path: f.rel.clone(),
            file_id: f.id,
            size: f.size,
            kind: FileKind::Opaque,
            header_blob_id: None,
            tensor_entries: Vec::new(),
            gaps: Vec::new(),
            reused_from: None,
        };
        match &f.content {
            Content::Opaque(bytes) => {
                let id = tx.put(&st.pool, bytes, BlobKind::RawFile, f.size)?;
                debug_assert_eq!(id, f.id);
            }
            Content::Safetensors(p) => {
                entry.kind = FileKind::Safetensors;
                entry.header_blob_id =
                    Some(tx.put(&st.pool, p.header_bytes(), BlobKind::HeaderBlob, p.header_len())?);
                for gap in p.gaps() {
                    let bytes = &p.payload()[gap.start as usize..gap.end as usize];
                    entry.gaps.push(GapEntry {
                        offset: gap.start,
                        length: gap.end - gap.start,
                        blob_id: tx.put(&st.pool, bytes, BlobKind::HeaderBlob, bytes.len() as u64)?,
                    });
                }
                for d in p.tensors() {
                    let id = ids[k];
                    let storage = if produced.contains(&k) {
                        pending[&id].clone()
                    } else {
                        TensorStorage::Dedup { tensor_id: id }
                    };
                    entry.tensor_entries.push(TensorEntry {
                        name: d.name.clone(),
                        descriptor: d.clone(),
                        tensor_id: id,
                        storage,
                    });
                    k += 1;
                }
            }
        }
        file_entries.push(entry);
    }

    let pins = st.pins_for(&file_entries, &pending)?;
    tx.retain_missing(&st.pool, &pins)?;
    let manifest = ModelManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        model_id: model_id.to_string(),
        seq,
        is_base: opts.is_base,
        record,
        family,
        bitx_base,
        rebased_from: None,
        dedup: if all_reused { DedupLevel::File } else { DedupLevel::Tensor },
        level: opts.level,
        file_entries,
        original_total_bytes,
        stored_total_bytes: tx.new_bytes,
        pins: pins.into_iter().collect(),
    };
    st.pool.flush()?;
    write_manifest(root, &manifest)?;
    Ok(manifest)
}

/// The declared base to record: the explicit override, else a concrete id
/// from the metadata files, else a bare name only if it is a registered
/// model id.
fn declared_base(st: &State, loaded: &[LoadedFile], opts: &IngestOptions) -> Option<String> {
    if let Some(d) = &opts.declared_base {
        return Some(d.clone());
    }
    let meta: Vec<(String, Vec<u8>)> = loaded
        .iter()
        .filter_map(|f| match &f.content {
            Content::Opaque(b) if (b.len() as u64) <= MAX_METADATA_SCAN => {
                Some((f.rel.clone(), b.to_vec()))
            }
            _ => None,
        })
        .collect();
    match lineage::extract_declared_base(&meta) {
        BaseDeclaration::Concrete(s) => Some(s),
        BaseDeclaration::Ambiguous(s) if st.manifests.contains_key(&s) => Some(s),
        BaseDeclaration::Ambiguous(s) => {
            log::info!("declared base {s:?} is only a family name; ignoring it");
            None
        }
        BaseDeclaration::Absent => None,
    }
}

/// A consistent view of the store, loaded from disk.
struct State {
    pool: Pool,
    manifests: BTreeMap<String, ModelManifest>,
    /// Stored forms of each tensor id, in registration order.
    defs: HashMap<ContentId, Vec<TensorStorage>>,
    /// Whole-file hash to `(model id, file index)` of its first occurrence.
    files: HashMap<ContentId, (String, usize)>,
    manifest_bytes: u64,
}

impl State {
    fn load(root: &Path) -> Result<Self> {
        let pool = Pool::open(root)?;
        let dir = root.join("manifests");
        let mut manifests = BTreeMap::new();
        let mut manifest_bytes = 0;
        let listing = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        for item in listing {
            let item = item.map_err(|e| Error::io(&dir, e))?;
            let path = item.path();
            if path.extension().is_none_or(|x| x != "json") {
                continue;
            }
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let m: ModelManifest = serde_json::from_slice(&bytes).map_err(|e| {
                Error::StoreCorruption(format!("manifest {}: {e}", path.display()))
            })?;
            if m.schema_version != MANIFEST_SCHEMA_VERSION {
                return Err(Error::StoreCorruption(format!(
                    "manifest {} has schema version {}",
                    path.display(),
                    m.schema_version
                )));
            }
            manifest_bytes += bytes.len() as u64;
            manifests.insert(m.model_id.clone(), m);
        }
        let mut st = State {
            pool,
            manifests,
            defs: HashMap::new(),
            files: HashMap::new(),
            manifest_bytes,
        };
        let order: Vec<String> = st.by_seq().iter().map(|m| m.model_id.clone()).collect();
        for id in order {
            let m = &st.manifests[&id];
            for (i, f) in m.file_entries.iter().enumerate() {
                st.files.entry(f.file_id).or_insert((id.clone(), i));
                for e in &f.tensor_entries {
                    if !matches!(e.storage, TensorStorage::Dedup { .. }) {
                        st.defs.entry(e.tensor_id).or_default().push(e.storage.clone());
                    }
                }
            }
        }
        Ok(st)
    }

    fn by_seq(&self) -> Vec<&ModelManifest> {
        let mut v: Vec<&ModelManifest> = self.manifests.values().collect();
        v.sort_by_key(|m| m.seq);
        v
    }

    fn registry(&self) -> Vec<RegistryEntry> {
        self.by_seq()
            .into_iter()
            .map(|m| RegistryEntry {
                record: m.record.clone(),
                is_base: m.is_base,
                seq: m.seq,
            })
            .collect()
    }

    /// Raw bytes of a tensor, verified against its id.
    fn resolve(&self, id: &ContentId, depth: usize) -> Result<Vec<u8>> {
        if depth > MAX_CHAIN_DEPTH {
            return Err(Error::StoreCorruption(format!("delta chain through {id} is too deep")));
        }
        let defs = self
            .defs
            .get(id)
            .ok_or_else(|| Error::StoreCorruption(format!("no stored form for tensor {id}")))?;
        let mut last = None;
        for def in defs {
            match self.decode(def, depth) {
                Ok(bytes) => {
                    let actual = ContentId::of(&bytes);
                    if actual == *id {
                        return Ok(bytes);
                    }
                    last = Some(Error::CorruptBlob { id: *id, actual });
                }
                Err(e) => last = Some(e),
            }
        }
        Err(last.expect("defs are never empty"))
    }

    fn decode(&self, def: &TensorStorage, depth: usize) -> Result<Vec<u8>> {
        match def {
            TensorStorage::Standalone { blob_id } => {
                bitx::standalone_decode(&StandaloneBlob::from_frame(&self.pool.get_blob(blob_id)?)?)
            }
            TensorStorage::Bitx {
                delta_id,
                base_tensor_id,
            } => {
                let delta = BitxDelta::from_frame(&self.pool.get_blob(delta_id)?)?;
                let base = self.resolve(base_tensor_id, depth + 1)?;
                bitx::bitx_decode(&delta, &base)
            }
            TensorStorage::Dedup { tensor_id } => self.resolve(tensor_id, depth + 1),
        }
    }

    /// Whether rebuilding `id` can touch any tensor in `targets`.
    fn depends_on(&self, id: &ContentId, targets: &HashSet<ContentId>) -> bool {
        let mut stack = vec![*id];
        let mut visited = HashSet::new();
        while let Some(t) = stack.pop() {
            if targets.contains(&t) {
                return true;
            }
            if !visited.insert(t) {
                continue;
            }
            for def in self.defs.get(&t).into_iter().flatten() {
                if let TensorStorage::Bitx { base_tensor_id, .. } = def {
                    stack.push(*base_tensor_id);
                }
            }
        }
        false
    }

    /// Every blob needed to rebuild `files`, following delta chains.
    /// `pending` holds stored forms not yet committed and takes precedence.
    fn pins_for(
        &self,
        files: &[FileEntry],
        pending: &HashMap<ContentId, TensorStorage>,
    ) -> Result<BTreeSet<ContentId>> {
        let mut pins = BTreeSet::new();
        let mut visited = HashSet::new();
        for f in files {
            match f.kind {
                FileKind::Opaque => {
                    pins.insert(f.file_id);
                }
                FileKind::Safetensors => {
                    pins.extend(f.header_blob_id);
                    pins.extend(f.gaps.iter().map(|g| g.blob_id));
                }
            }
            for e in &f.tensor_entries {
                let mut cur = e.tensor_id;
                let mut depth = 0;
                while visited.insert(cur) {
                    let def = pending
                        .get(&cur)
                        .or_else(|| self.defs.get(&cur).and_then(|d| d.first()))
                        .ok_or_else(|| {
                            Error::StoreCorruption(format!("no stored form for tensor {cur}"))
                        })?;
                    match def {
                        TensorStorage::Standalone { blob_id } => {
                            pins.insert(*blob_id);
                            break;
                        }
                        TensorStorage::Bitx {
                            delta_id,
                            base_tensor_id,
                        } => {
                            pins.insert(*delta_id);
                            cur = *base_tensor_id;
                        }
                        TensorStorage::Dedup { tensor_id } => cur = *tensor_id,
                    }
                    depth += 1;
                    if depth > MAX_CHAIN_DEPTH {
                        return Err(Error::StoreCorruption(format!(
                            "delta chain through {} is too deep",
                            e.tensor_id
                        )));
                    }
                }
            }
        }
        Ok(pins)
    }

    fn rebuild_file(&self, f: &FileEntry) -> Result<Vec<u8>> {
        if f.kind == FileKind::Opaque {
            return self.pool.get_blob(&f.file_id);
        }
        let header_id = f
            .header_blob_id
            .ok_or_else(|| Error::StoreCorruption(format!("{} has no header blob", f.path)))?;
        let header = self.pool.get_blob(&header_id)?;
        let start = 8 + header.len();
        if (start as u64) > f.size {
            return Err(Error::StoreCorruption(format!(
                "{}: header longer than the recorded file size",
                f.path
            )));
        }
        let mut out = vec![0u8; f.size as usize];
        out[..8].copy_from_slice(&(header.len() as u64).to_le_bytes());
        out[8..start].copy_from_slice(&header);
        let payload = &mut out[start..];
        let tensors = par::try_map(&f.tensor_entries, |e| self.resolve(&e.tensor_id, 0))?;
        for (e, bytes) in f.tensor_entries.iter().zip(tensors) {
            place(payload, e.descriptor.data_begin, &bytes, &f.path)?;
        }
        for g in &f.gaps {
            let bytes = self.pool.get_blob(&g.blob_id)?;
            if bytes.len() as u64 != g.length {
                return Err(Error::StoreCorruption(format!("{}: gap length mismatch", f.path)));
            }
            place(payload, g.offset, &bytes, &f.path)?;
        }
        let actual = ContentId::of(&out);
        if actual != f.file_id {
            return Err(Error::ReconstructionMismatch {
                path: f.path.clone(),
                detail: format!("rebuilt file hashes to {actual}, expected {}", f.file_id),
            });
        }
        Ok(out)
    }

    /// Fully decoded copy of a stored model's tensors.
    fn materialize(&self, m: &ModelManifest) -> Result<MaterializedModel> {
        let entries: Vec<&TensorEntry> = m.tensor_entries().collect();
        let data = par::try_map(&entries, |e| self.resolve(&e.tensor_id, 0).map(Bytes::from))?;
        Ok(MaterializedModel {
            descriptors: entries.iter().map(|e| e.descriptor.clone()).collect(),
            data: entries.iter().map(|e| e.name.clone()).zip(data).collect(),
        })
    }
}

fn place(payload: &mut [u8], offset: u64, bytes: &[u8], path: &str) -> Result<()> {
    let end = offset as usize + bytes.len();
    if end > payload.len() {
        return Err(Error::StoreCorruption(format!("{path}: range past end of payload")));
    }
    payload[offset as usize..end].copy_from_slice(bytes);
    Ok(())
}

struct MaterializedModel {
    descriptors: Vec<TensorDescriptor>,
    data: HashMap<String, Bytes>,
}

impl TensorSource for MaterializedModel {
    fn descriptors(&self) -> Vec<TensorDescriptor> {
        self.descriptors.clone()
    }

    fn tensor_data(&self, name: &str) -> Result<Bytes> {
        self.data
            .get(name)
            .cloned()
            .ok_or_else(|| Error::UnknownTensor(name.to_string()))
    }
}

/// Lazily decoded view of a stored model.
struct StoredModel<'s> {
    state: &'s State,
    entries: Vec<(TensorDescriptor, ContentId)>,
}

impl TensorSource for StoredModel<'_> {
    fn descriptors(&self) -> Vec<TensorDescriptor> {
        self.entries.iter().map(|(d, _)| d.clone()).collect()
    }

    fn tensor_data(&self, name: &str) -> Result<Bytes> {
        let (_, id) = self
            .entries
            .iter()
            .find(|(d, _)| d.name == name)
            .ok_or_else(|| Error::UnknownTensor(name.to_string()))?;
        self.state.resolve(id, 0).map(Bytes::from)
    }
}

impl ModelSource for State {
    fn open<'a>(&'a self, model_id: &str) -> Result<Box<dyn TensorSource + 'a>> {
        let m = self
            .manifests
            .get(model_id)
            .ok_or_else(|| Error::ModelNotFound(model_id.to_string()))?;
        Ok(Box::new(StoredModel {
            state: self,
            entries: m
                .tensor_entries()
                .map(|e| (e.descriptor.clone(), e.tensor_id))
                .collect(),
        }))
    }
}
