//! Content-addressed blob pool with reference counts, plus dedup accounting at
//! file, layer, tensor and chunk granularity.
//!
//! On-disk layout under the pool root:
//!
//! ```text
//! pool/ab/cd/abcd…ef    one file per blob, named by its SHA-256
//! index                 one line per blob: hex kind stored_size logical_size refcount
//! ```
//!
//! Blobs are written to a temporary file and renamed into place, so a reader
//! never observes a partial blob. The index is rewritten the same way by
//! [`Pool::flush`].

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Mutex, MutexGuard};

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::par;
use crate::safetensors::{ParsedModelFile, TensorDescriptor};

const INDEX_HEADER: &str = "# tensorvault pool index v1";

/// Metadata bytes charged per index entry when estimating index size.
pub const METADATA_BYTES_PER_ENTRY: u64 = 64;

/// SHA-256 digest identifying a blob.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ContentId([u8; 32]);

impl ContentId {
    pub fn of(bytes: &[u8]) -> Self {
        ContentId(Sha256::digest(bytes).into())
    }

    /// Digest of the concatenation of `parts`.
    pub fn of_parts(parts: &[&[u8]]) -> Self {
        let mut h = Sha256::new();
        for p in parts {
            h.update(p);
        }
        ContentId(h.finalize().into())
    }

    pub fn from_digest(digest: [u8; 32]) -> Self {
        ContentId(digest)
    }

    pub fn digest(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Display for ContentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for ContentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ContentId({})", &self.to_hex()[..16])
    }
}

impl FromStr for ContentId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.len() != 64 || s.bytes().any(|b| b.is_ascii_uppercase()) {
            return Err(Error::InvalidParams(format!("not a lowercase sha256 hex id: {s:?}")));
        }
        let mut digest = [0u8; 32];
        hex::decode_to_slice(s, &mut digest)
            .map_err(|e| Error::InvalidParams(format!("bad hex id {s:?}: {e}")))?;
        Ok(ContentId(digest))
    }
}

impl Serialize for ContentId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for ContentId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlobKind {
    RawTensor,
    CompressedDelta,
    CompressedStandalone,
    HeaderBlob,
    /// Non-tensor files (configs, tokenizers), stored whole.
    RawFile,
}

impl BlobKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BlobKind::RawTensor => "raw_tensor",
            BlobKind::CompressedDelta => "compressed_delta",
            BlobKind::CompressedStandalone => "compressed_standalone",
            BlobKind::HeaderBlob => "header_blob",
            BlobKind::RawFile => "raw_file",
        }
    }
}

impl FromStr for BlobKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "raw_tensor" => BlobKind::RawTensor,
            "compressed_delta" => BlobKind::CompressedDelta,
            "compressed_standalone" => BlobKind::CompressedStandalone,
            "header_blob" => BlobKind::HeaderBlob,
            "raw_file" => BlobKind::RawFile,
            other => return Err(Error::StoreCorruption(format!("unknown blob kind {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub id: ContentId,
    pub kind: BlobKind,
    pub stored_size: u64,
    /// Size of the data the blob represents once decoded.
    pub logical_size: u64,
    pub refcount: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct GcReport {
    pub removed_entries: u64,
    pub removed_bytes: u64,
    pub orphan_files: u64,
}

/// Blob store rooted at a directory.
#[derive(Debug)]
pub struct Pool {
    root: PathBuf,
    index: Mutex<BTreeMap<ContentId, PoolEntry>>,
}

impl Pool {
    /// Opens or creates a pool at `root`.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let blobs = root.join("pool");
        fs::create_dir_all(&blobs).map_err(|e| Error::io(&blobs, e))?;
        let index_path = root.join("index");
        let index = match fs::read_to_string(&index_path) {
            Ok(text) => parse_index(&text)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => BTreeMap::new(),
            Err(e) => return Err(Error::io(&index_path, e)),
        };
        Ok(Pool {
            root,
            index: Mutex::new(index),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn lock(&self) -> MutexGuard<'_, BTreeMap<ContentId, PoolEntry>> {
        self.index.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn blob_path(&self, id: &ContentId) -> PathBuf {
        let hex = id.to_hex();
        self.root
            .join("pool")
            .join(&hex[0..2])
            .join(&hex[2..4])
            .join(hex)
    }

    /// Stores `bytes`, or bumps the refcount when an identical blob exists.
    pub fn put_blob(&self, bytes: &[u8], kind: BlobKind) -> Result<(ContentId, bool)> {
        self.put(bytes, kind, bytes.len() as u64)
    }

    /// Like [`put_blob`](Self::put_blob) with an explicit decoded size.
    pub fn put(&self, bytes: &[u8], kind: BlobKind, logical_size: u64) -> Result<(ContentId, bool)> {
        let id = ContentId::of(bytes);
        if self.bump_existing(&id, bytes)? {
            return Ok((id, false));
        }
        self.write_blob(&id, bytes)?;
        let mut index = self.lock();
        if let Some(entry) = index.get_mut(&id) {
            // another writer got there first
            check_size(entry, bytes)?;
            entry.refcount += 1;
            return Ok((id, false));
        }
        index.insert(
            id,
            PoolEntry {
                id,
                kind,
                stored_size: bytes.len() as u64,
                logical_size,
                refcount: 1,
            },
        );
        Ok((id, true))
    }

    fn bump_existing(&self, id: &ContentId, bytes: &[u8]) -> Result<bool> {
        let mut index = self.lock();
        let Some(entry) = index.get_mut(id) else {
            return Ok(false);
        };
        check_size(entry, bytes)?;
        if entry.refcount == 0 {
            // Released but not collected: only revive it if the bytes on disk
            // are still intact.
            let path = self.blob_path(id);
            let intact = fs::read(&path).map(|b| ContentId::of(&b) == *id).unwrap_or(false);
            if !intact {
                self.write_blob(id, bytes)?;
            }
        }
        entry.refcount += 1;
        Ok(true)
    }

    fn write_blob(&self, id: &ContentId, bytes: &[u8]) -> Result<()> {
        let path = self.blob_path(id);
        let dir = path.parent().unwrap();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut tmp = tempfile::Builder::new()
            .prefix(".tmp-")
            .tempfile_in(dir)
            .map_err(|e| Error::io(dir, e))?;
        tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
        tmp.persist(&path).map_err(|e| Error::io(&path, e.error))?;
        Ok(())
    }

    /// Reads a blob and checks it still hashes to `id`.
    pub fn get_blob(&self, id: &ContentId) -> Result<Vec<u8>> {
        if !self.lock().contains_key(id) {
            return Err(Error::MissingBlob(*id));
        }
        let path = self.blob_path(id);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::MissingBlob(*id))
            }
            Err(e) => return Err(Error::io(&path, e)),
        };
        let actual = ContentId::of(&bytes);
        if actual != *id {
            return Err(Error::CorruptBlob { id: *id, actual });
        }
        Ok(bytes)
    }

    pub fn contains(&self, id: &ContentId) -> bool {
        self.lock().get(id).is_some_and(|e| e.refcount > 0)
    }

    pub fn entry(&self, id: &ContentId) -> Option<PoolEntry> {
        self.lock().get(id).cloned()
    }

    pub fn entries(&self) -> Vec<PoolEntry> {
        self.lock().values().cloned().collect()
    }

    /// Sum of stored sizes over every indexed blob.
    pub fn physical_bytes(&self) -> u64 {
        self.lock().values().map(|e| e.stored_size).sum()
    }

    /// Adds a reference to a live blob.
    pub fn retain(&self, id: &ContentId) -> Result<u64> {
        let mut index = self.lock();
        match index.get_mut(id) {
            Some(e) if e.refcount > 0 => {
                e.refcount += 1;
                Ok(e.refcount)
            }
            _ => Err(Error::MissingBlob(*id)),
        }
    }

    /// Drops a reference. The bytes stay on disk until [`gc`](Self::gc).
    pub fn release(&self, id: &ContentId) -> Result<u64> {
        let mut index = self.lock();
        let entry = index.get_mut(id).ok_or(Error::MissingBlob(*id))?;
        if entry.refcount == 0 {
            return Err(Error::RefcountUnderflow(*id));
        }
        entry.refcount -= 1;
        Ok(entry.refcount)
    }

    /// Adds a reference even when the count is zero, undoing a release.
    pub(crate) fn retain_any(&self, id: &ContentId) -> Result<u64> {
        let mut index = self.lock();
        let entry = index.get_mut(id).ok_or(Error::MissingBlob(*id))?;
        entry.refcount += 1;
        Ok(entry.refcount)
    }

    /// Overwrites refcounts wholesale; ids not in `counts` drop to zero.
    pub(crate) fn reset_refcounts(&self, counts: &HashMap<ContentId, u64>) {
        for entry in self.lock().values_mut() {
            entry.refcount = counts.get(&entry.id).copied().unwrap_or(0);
        }
    }

    /// Deletes unreferenced blobs and any stray files in the blob directory,
    /// then persists the index.
    pub fn gc(&self) -> Result<GcReport> {
        let mut report = GcReport::default();
        {
            let mut index = self.lock();
            let dead: Vec<ContentId> = index
                .values()
                .filter(|e| e.refcount == 0)
                .map(|e| e.id)
                .collect();
            for id in dead {
                let entry = index.remove(&id).unwrap();
                let path = self.blob_path(&id);
                match fs::remove_file(&path) {
                    Ok(()) => {}
                    Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                    Err(e) => return Err(Error::io(&path, e)),
                }
                report.removed_entries += 1;
                report.removed_bytes += entry.stored_size;
            }
            let blobs = self.root.join("pool");
            for item in walkdir::WalkDir::new(&blobs).min_depth(3) {
                let item = item.map_err(|e| {
                    Error::io(&blobs, std::io::Error::other(e.to_string()))
                })?;
                if !item.file_type().is_file() {
                    continue;
                }
                let known = item
                    .file_name()
                    .to_str()
                    .and_then(|n| n.parse::<ContentId>().ok())
                    .is_some_and(|id| index.contains_key(&id));
                if !known {
                    fs::remove_file(item.path()).map_err(|e| Error::io(item.path(), e))?;
                    report.orphan_files += 1;
                }
            }
        }
        self.flush()?;
        Ok(report)
    }

    /// Atomically rewrites the index file.
    pub fn flush(&self) -> Result<()> {
        let text = {
            let index = self.lock();
            let mut text = String::with_capacity(64 + index.len() * 110);
            text.push_str(INDEX_HEADER);
            text.push('\n');
            for e in index.values() {
                text.push_str(&format!(
                    "{} {} {} {} {}\n",
                    e.id,
                    e.kind.as_str(),
                    e.stored_size,
                    e.logical_size,
                    e.refcount
                ));
            }
            text
        };
        let path = self.root.join("index");
        let mut tmp = tempfile::Builder::new()
            .prefix(".index-")
            .tempfile_in(&self.root)
            .map_err(|e| Error::io(&self.root, e))?;
        tmp.write_all(text.as_bytes())
            .and_then(|_| tmp.as_file().sync_all())
            .map_err(|e| Error::io(tmp.path(), e))?;
        tmp.persist(&path).map_err(|e| Error::io(&path, e.error))?;
        Ok(())
    }
}

fn check_size(entry: &PoolEntry, bytes: &[u8]) -> Result<()> {
    if entry.stored_size != bytes.len() as u64 {
        return Err(Error::HashCollisionDetected {
            id: entry.id,
            stored: entry.stored_size,
            offered: bytes.len() as u64,
        });
    }
    Ok(())
}

fn parse_index(text: &str) -> Result<BTreeMap<ContentId, PoolEntry>> {
    let mut out = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = || Error::StoreCorruption(format!("index line {}: {line:?}", lineno + 1));
        let fields: Vec<&str> = line.split_ascii_whitespace().collect();
        let [id, kind, stored, logical, refs] = fields.as_slice() else {
            return Err(bad());
        };
        let entry = PoolEntry {
            id: id.parse().map_err(|_| bad())?,
            kind: kind.parse()?,
            stored_size: stored.parse().map_err(|_| bad())?,
            logical_size: logical.parse().map_err(|_| bad())?,
            refcount: refs.parse().map_err(|_| bad())?,
        };
        out.insert(entry.id, entry);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    File,
    Layer,
    Tensor,
    Chunk,
}

impl FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "file" => Ok(Granularity::File),
            "layer" => Ok(Granularity::Layer),
            "tensor" => Ok(Granularity::Tensor),
            "chunk" => Ok(Granularity::Chunk),
            other => Err(Error::InvalidParams(format!("unknown granularity {other:?}"))),
        }
    }
}

/// Redundancy found at one granularity over a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DedupReport {
    pub granularity: Granularity,
    pub total_units: u64,
    pub unique_units: u64,
    pub total_bytes: u64,
    /// Bytes in units that were already present.
    pub deduped_bytes: u64,
    pub reduction_ratio: f64,
    pub index_entries: u64,
    pub estimated_metadata_bytes: u64,
    /// Mean size of a unique unit.
    pub avg_unit_bytes: f64,
    pub max_unit_bytes: u64,
}

/// Running count of units seen at one granularity.
#[derive(Debug, Clone)]
pub struct Tally {
    granularity: Granularity,
    seen: HashMap<ContentId, u64>,
    total_units: u64,
    total_bytes: u64,
    deduped_bytes: u64,
    unique_bytes: u64,
    max_unit: u64,
}

impl Tally {
    pub fn new(granularity: Granularity) -> Self {
        Tally {
            granularity,
            seen: HashMap::new(),
            total_units: 0,
            total_bytes: 0,
            deduped_bytes: 0,
            unique_bytes: 0,
            max_unit: 0,
        }
    }

    /// Records one unit; returns true the first time `id` is seen.
    pub fn observe(&mut self, id: ContentId, size: u64) -> bool {
        self.total_units += 1;
        self.total_bytes += size;
        if self.seen.insert(id, size).is_some() {
            self.deduped_bytes += size;
            false
        } else {
            self.unique_bytes += size;
            self.max_unit = self.max_unit.max(size);
            true
        }
    }

    pub fn report(&self) -> DedupReport {
        let unique = self.seen.len() as u64;
        DedupReport {
            granularity: self.granularity,
            total_units: self.total_units,
            unique_units: unique,
            total_bytes: self.total_bytes,
            deduped_bytes: self.deduped_bytes,
            reduction_ratio: if self.total_bytes > 0 {
                self.deduped_bytes as f64 / self.total_bytes as f64
            } else {
                0.0
            },
            index_entries: unique,
            estimated_metadata_bytes: unique * METADATA_BYTES_PER_ENTRY,
            avg_unit_bytes: if unique > 0 {
                self.unique_bytes as f64 / unique as f64
            } else {
                0.0
            },
            max_unit_bytes: self.max_unit,
        }
    }
}

/// Maps tensor names to layer keys.
///
/// The default groups `<root>.layers.<N>.*` under `<root>.layers.<N>`; any name
/// that does not match is its own layer.
#[derive(Debug, Clone)]
pub struct LayerRule(Regex);

impl LayerRule {
    /// `pattern` must contain one capture group, which becomes the layer key.
    pub fn new(pattern: &str) -> Result<Self> {
        let re = Regex::new(pattern).map_err(|e| Error::InvalidParams(e.to_string()))?;
        if re.captures_len() < 2 {
            return Err(Error::InvalidParams(format!(
                "layer pattern {pattern:?} has no capture group"
            )));
        }
        Ok(LayerRule(re))
    }

    pub fn key<'a>(&self, name: &'a str) -> &'a str {
        self.0
            .captures(name)
            .and_then(|c| c.get(1))
            .map_or(name, |m| m.as_str())
    }
}

impl Default for LayerRule {
    fn default() -> Self {
        LayerRule(Regex::new(r"^(.*\.layers\.\d+)\.").unwrap())
    }
}

/// Counts the length-prefixed header and each payload gap as units of their
/// own, so every granularity covers the same bytes as whole-file dedup.
fn observe_framing(tally: &mut Tally, parsed: &ParsedModelFile) {
    let header = parsed.header_bytes();
    let prefix = parsed.header_len().to_le_bytes();
    tally.observe(ContentId::of_parts(&[&prefix, header]), 8 + parsed.header_len());
    for gap in parsed.gaps() {
        let bytes = parsed.payload().slice(gap.start as usize..gap.end as usize);
        tally.observe(ContentId::of(&bytes), gap.end - gap.start);
    }
}

/// Per-tensor result of [`DedupSession::dedup_tensors`].
#[derive(Debug, Clone)]
pub struct TensorDedup {
    pub descriptor: TensorDescriptor,
    pub id: ContentId,
    pub was_new: bool,
}

/// Dedup analysis over a sequence of files, optionally storing unique units in
/// a pool. Reports accumulate over every file seen by the session.
#[derive(Debug)]
pub struct DedupSession<'p> {
    pool: Option<&'p Pool>,
    files: Tally,
    layers: Tally,
    tensors: Tally,
}

impl Default for DedupSession<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> DedupSession<'p> {
    pub fn new() -> Self {
        DedupSession {
            pool: None,
            files: Tally::new(Granularity::File),
            layers: Tally::new(Granularity::Layer),
            tensors: Tally::new(Granularity::Tensor),
        }
    }

    pub fn with_pool(pool: &'p Pool) -> Self {
        DedupSession {
            pool: Some(pool),
            ..Self::new()
        }
    }

    pub fn dedup_file(&mut self, parsed: &ParsedModelFile) -> Result<(ContentId, DedupReport)> {
        let bytes;
        let id = match self.pool {
            Some(pool) => {
                bytes = parsed.to_bytes()?;
                pool.put_blob(&bytes, BlobKind::RawFile)?.0
            }
            None => parsed.content_id(),
        };
        self.files.observe(id, parsed.file_len());
        Ok((id, self.files.report()))
    }

    pub fn dedup_tensors(
        &mut self,
        parsed: &ParsedModelFile,
    ) -> Result<(Vec<TensorDedup>, DedupReport)> {
        let ids = par::map(parsed.tensors(), |t| ContentId::of(&parsed.bytes_of(t)));
        let mut out = Vec::with_capacity(ids.len());
        for (desc, id) in parsed.tensors().iter().zip(ids) {
            let first_in_session = self.tensors.observe(id, desc.byte_len());
            let was_new = match self.pool {
                Some(pool) => pool.put_blob(&parsed.bytes_of(desc), BlobKind::RawTensor)?.1,
                None => first_in_session,
            };
            out.push(TensorDedup {
                descriptor: desc.clone(),
                id,
                was_new,
            });
        }
        observe_framing(&mut self.tensors, parsed);
        Ok((out, self.tensors.report()))
    }

    pub fn dedup_layers(&mut self, parsed: &ParsedModelFile, rule: &LayerRule) -> Result<DedupReport> {
        let mut order: Vec<&str> = Vec::new();
        let mut groups: HashMap<&str, Vec<&TensorDescriptor>> = HashMap::new();
        for t in parsed.tensors() {
            let key = rule.key(&t.name);
            groups
                .entry(key)
                .or_insert_with(|| {
                    order.push(key);
                    Vec::new()
                })
                .push(t);
        }
        let layers: Vec<Vec<&TensorDescriptor>> =
            order.iter().map(|k| groups.remove(k).unwrap()).collect();
        let hashed = par::map(&layers, |members| {
            let slices: Vec<_> = members.iter().map(|t| parsed.bytes_of(t)).collect();
            let parts: Vec<&[u8]> = slices.iter().map(|b| b.as_ref()).collect();
            let size: u64 = members.iter().map(|t| t.byte_len()).sum();
            (ContentId::of_parts(&parts), size)
        });
        for (id, size) in hashed {
            self.layers.observe(id, size);
        }
        observe_framing(&mut self.layers, parsed);
        Ok(self.layers.report())
    }

    pub fn file_report(&self) -> DedupReport {
        self.files.report()
    }

    pub fn layer_report(&self) -> DedupReport {
        self.layers.report()
    }

    pub fn tensor_report(&self) -> DedupReport {
        self.tensors.report()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::safetensors::{DType, SafetensorsWriter};

    const EMPTY_SHA256: &str = "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855";

    fn pool() -> (tempfile::TempDir, Pool) {
        let dir = tempfile::tempdir().unwrap();
        let pool = Pool::open(dir.path()).unwrap();
        (dir, pool)
    }

    fn parse(w: SafetensorsWriter) -> ParsedModelFile {
        ParsedModelFile::parse(w.to_bytes().into()).unwrap()
    }

    #[test]
    fn content_id_hex_round_trip() {
        let id = ContentId::of(b"abc");
        let hex = id.to_hex();
        assert_eq!(hex.len(), 64);
        assert_eq!(hex.parse::<ContentId>().unwrap(), id);
        assert!("ABC".parse::<ContentId>().is_err());
        assert!(hex.to_uppercase().parse::<ContentId>().is_err());
        assert_eq!(
            ContentId::of_parts(&[b"a", b"bc"]),
            ContentId::of(b"abc")
        );
    }

    #[test]
    fn empty_blob_has_known_digest() {
        let (_d, pool) = pool();
        let (id, was_new) = pool.put_blob(&[], BlobKind::RawTensor).unwrap();
        assert!(was_new);
        assert_eq!(id.to_hex(), EMPTY_SHA256);
        assert!(pool.get_blob(&id).unwrap().is_empty());
    }

    #[test]
    fn put_twice_dedups() {
        let (_d, pool) = pool();
        let (a, new_a) = pool.put_blob(b"hello", BlobKind::RawTensor).unwrap();
        let (b, new_b) = pool.put_blob(b"hello", BlobKind::RawTensor).unwrap();
        assert_eq!(a, b);
        assert!(new_a && !new_b);
        assert_eq!(pool.entry(&a).unwrap().refcount, 2);
        let (c, _) = pool.put_blob(b"world", BlobKind::RawTensor).unwrap();
        assert_ne!(a, c);
        assert_eq!(pool.get_blob(&a).unwrap(), b"hello");
    }

    #[test]
    fn release_and_gc_lifecycle() {
        let (_d, pool) = pool();
        let (id, _) = pool.put_blob(b"x", BlobKind::RawTensor).unwrap();
        pool.put_blob(b"x", BlobKind::RawTensor).unwrap();
        assert_eq!(pool.release(&id).unwrap(), 1);
        assert_eq!(pool.release(&id).unwrap(), 0);
        // bytes untouched until gc
        assert_eq!(pool.get_blob(&id).unwrap(), b"x");
        assert!(matches!(pool.release(&id), Err(Error::RefcountUnderflow(_))));
        assert!(matches!(pool.retain(&id), Err(Error::MissingBlob(_))));
        let report = pool.gc().unwrap();
        assert_eq!(report.removed_entries, 1);
        assert_eq!(report.removed_bytes, 1);
        assert!(matches!(pool.get_blob(&id), Err(Error::MissingBlob(_))));
        let unknown = ContentId::of(b"nope");
        assert!(matches!(pool.release(&unknown), Err(Error::MissingBlob(_))));
        assert!(matches!(pool.get_blob(&unknown), Err(Error::MissingBlob(_))));
    }

    #[test]
    fn released_blob_revives_on_put() {
        let (_d, pool) = pool();
        let (id, _) = pool.put_blob(b"abc", BlobKind::RawTensor).unwrap();
        pool.release(&id).unwrap();
        std::fs::write(pool.blob_path(&id), b"xyz").unwrap();
        let (_, was_new) = pool.put_blob(b"abc", BlobKind::RawTensor).unwrap();
        assert!(!was_new);
        assert_eq!(pool.get_blob(&id).unwrap(), b"abc");
    }

    #[test]
    fn size_mismatch_is_a_collision() {
        let (_d, pool) = pool();
        let (id, _) = pool.put_blob(b"abc", BlobKind::RawTensor).unwrap();
        // forge an index entry with the wrong size to simulate a collision
        pool.lock().get_mut(&id).unwrap().stored_size = 99;
        assert!(matches!(
            pool.put_blob(b"abc", BlobKind::RawTensor),
            Err(Error::HashCollisionDetected { .. })
        ));
    }

    #[test]
    fn corrupt_blob_detected() {
        let (_d, pool) = pool();
        let (id, _) = pool.put_blob(b"abcdef", BlobKind::RawTensor).unwrap();
        std::fs::write(pool.blob_path(&id), b"abcdeX").unwrap();
        assert!(matches!(pool.get_blob(&id), Err(Error::CorruptBlob { .. })));
    }

    #[test]
    fn index_persists_and_gc_removes_orphans() {
        let dir = tempfile::tempdir().unwrap();
        let id = {
            let pool = Pool::open(dir.path()).unwrap();
            let (id, _) = pool.put(b"persist me", BlobKind::CompressedDelta, 100).unwrap();
            pool.put_blob(b"never flushed? no, flushed", BlobKind::HeaderBlob).unwrap();
            pool.flush().unwrap();
            // blob written but never indexed
            let stray = ContentId::of(b"stray");
            pool.write_blob(&stray, b"stray").unwrap();
            id
        };
        let pool = Pool::open(dir.path()).unwrap();
        let e = pool.entry(&id).unwrap();
        assert_eq!(e.kind, BlobKind::CompressedDelta);
        assert_eq!(e.logical_size, 100);
        assert_eq!(e.refcount, 1);
        let report = pool.gc().unwrap();
        assert_eq!(report.orphan_files, 1);
        assert_eq!(report.removed_entries, 0);
        assert_eq!(pool.entries().len(), 2);
    }

    #[test]
    fn concurrent_puts_agree() {
        let (_d, pool) = pool();
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| {
                    for i in 0..20u8 {
                        pool.put_blob(&[i; 300], BlobKind::RawTensor).unwrap();
                    }
                });
            }
        });
        let entries = pool.entries();
        assert_eq!(entries.len(), 20);
        assert!(entries.iter().all(|e| e.refcount == 8));
    }

    #[test]
    fn file_dedup_report() {
        let mut s = DedupSession::new();
        let a = parse(SafetensorsWriter::new().tensor("w", DType::U8, &[4], vec![1u8; 4]));
        let b = parse(SafetensorsWriter::new().tensor("w", DType::U8, &[4], vec![2u8; 4]));
        s.dedup_file(&a).unwrap();
        let (_, r) = s.dedup_file(&a).unwrap();
        assert_eq!((r.total_units, r.unique_units), (2, 1));
        assert_eq!(r.reduction_ratio, 0.5);
        let mut s2 = DedupSession::new();
        s2.dedup_file(&a).unwrap();
        let (_, r2) = s2.dedup_file(&b).unwrap();
        assert_eq!(r2.reduction_ratio, 0.0);
    }

    #[test]
    fn tensor_dedup_across_headers_and_within_file() {
        let (_d, pool) = pool();
        let mut s = DedupSession::with_pool(&pool);
        let a = parse(SafetensorsWriter::new().tensor("x", DType::U8, &[8], vec![5u8; 8]));
        let b = parse(
            SafetensorsWriter::new()
                .metadata("k", "v")
                .tensor("y", DType::U8, &[8], vec![5u8; 8]),
        );
        s.dedup_file(&a).unwrap();
        let (_, fr) = s.dedup_file(&b).unwrap();
        assert_eq!(fr.unique_units, 2);
        let (ra, _) = s.dedup_tensors(&a).unwrap();
        let (rb, report) = s.dedup_tensors(&b).unwrap();
        assert!(ra[0].was_new && !rb[0].was_new);
        // one shared tensor plus the two distinct headers
        assert_eq!(report.unique_units, 3);
        assert_eq!(report.total_bytes, a.file_len() + b.file_len());
        assert_eq!(pool.entry(&ra[0].id).unwrap().refcount, 2);

        let tied = parse(
            SafetensorsWriter::new()
                .tensor("embed", DType::U8, &[4], vec![1u8; 4])
                .tensor("mid", DType::U8, &[4], vec![2u8; 4])
                .tensor("lm_head", DType::U8, &[4], vec![1u8; 4]),
        );
        let mut s = DedupSession::new();
        let (_, r) = s.dedup_tensors(&tied).unwrap();
        assert_eq!(r.unique_units, r.total_units - 1);
        assert_eq!(r.index_entries, r.unique_units);
        assert_eq!(r.estimated_metadata_bytes, 64 * r.unique_units);
    }

    #[test]
    fn layer_rule_keys() {
        let rule = LayerRule::default();
        assert_eq!(rule.key("model.layers.3.mlp.up_proj.weight"), "model.layers.3");
        assert_eq!(
            rule.key("model.vision.layers.1.blocks.layers.12.attn.weight"),
            "model.vision.layers.1.blocks.layers.12"
        );
        assert_eq!(rule.key("model.embed_tokens.weight"), "model.embed_tokens.weight");
        assert!(LayerRule::new("no_group").is_err());
    }

    #[test]
    fn one_changed_tensor_breaks_its_layer() {
        let build = |v: u8| {
            parse(
                SafetensorsWriter::new()
                    .tensor("m.layers.0.a", DType::U8, &[4], vec![1u8; 4])
                    .tensor("m.layers.0.b", DType::U8, &[4], vec![2u8; 4])
                    .tensor("m.layers.1.a", DType::U8, &[4], vec![3u8; 4])
                    .tensor("m.layers.1.b", DType::U8, &[4], vec![v; 4]),
            )
        };
        let rule = LayerRule::default();
        let mut s = DedupSession::new();
        s.dedup_layers(&build(4), &rule).unwrap();
        let r = s.dedup_layers(&build(9), &rule).unwrap();
        let framing = 8 + build(4).header_len();
        assert_eq!(r.total_units, 6);
        assert_eq!(r.unique_units, 4);
        assert_eq!(r.deduped_bytes, 8 + framing);
        s.dedup_tensors(&build(4)).unwrap();
        let t = s.dedup_tensors(&build(9)).unwrap().1;
        assert_eq!(t.deduped_bytes, 12 + framing);
        assert!(t.reduction_ratio >= r.reduction_ratio);
    }

    #[test]
    fn identical_models_halve_at_every_granularity() {
        let m = parse(
            SafetensorsWriter::new()
                .tensor("m.layers.0.a", DType::U8, &[4], vec![1u8; 4])
                .tensor("m.layers.1.a", DType::U8, &[4], vec![3u8; 4]),
        );
        let rule = LayerRule::default();
        let mut s = DedupSession::new();
        for _ in 0..2 {
            s.dedup_layers(&m, &rule).unwrap();
            s.dedup_tensors(&m).unwrap();
        }
        assert_eq!(s.layer_report().reduction_ratio, 0.5);
        assert_eq!(s.tensor_report().reduction_ratio, 0.5);
    }

    #[test]
    fn empty_report_ratio_is_zero() {
        let r = Tally::new(Granularity::Chunk).report();
        assert_eq!(r.reduction_ratio, 0.0);
        assert_eq!(r.unique_units, 0);
    }
}
