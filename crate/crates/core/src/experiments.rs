//! Corpus-level measurements: dedup granularity reports and the ordering
//! experiment that pits the storage pipeline against compressing whole files
//! first and chunk-deduplicating the compressed streams.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bitdist::ModelFiles;
use crate::bitx;
use crate::cdc::{dedup_chunks, ChunkParams};
use crate::error::{Error, Result};
use crate::par;
use crate::pool::{DedupReport, DedupSession, Granularity, LayerRule};
use crate::safetensors::parse_model_file;
use crate::store::{IngestOptions, Store};

/// Every `.safetensors` file under `root`, sorted by path.
pub fn corpus_files(root: &Path) -> Result<Vec<PathBuf>> {
    if root.is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    if !root.is_dir() {
        return Err(Error::NoModelFiles(root.to_path_buf()));
    }
    let mut out = Vec::new();
    for item in walkdir::WalkDir::new(root).sort_by_file_name() {
        let item = item.map_err(|e| Error::io(root, std::io::Error::other(e.to_string())))?;
        let is_st = item
            .file_name()
            .to_str()
            .is_some_and(|n| n.to_ascii_lowercase().ends_with(".safetensors"));
        if item.file_type().is_file() && is_st {
            out.push(item.into_path());
        }
    }
    if out.is_empty() {
        return Err(Error::NoModelFiles(root.to_path_buf()));
    }
    Ok(out)
}

/// Every safetensors file of one model (a directory or a single file).
pub fn load_model(path: &Path) -> Result<ModelFiles> {
    let files = corpus_files(path)?;
    Ok(ModelFiles(par::try_map(&files, |p| parse_model_file(p))?))
}

/// Dedup statistics for `files` at one granularity.
pub fn dedup_report(
    files: &[PathBuf],
    granularity: Granularity,
    chunk: &ChunkParams,
    layers: &LayerRule,
) -> Result<DedupReport> {
    if granularity == Granularity::Chunk {
        let blobs = par::try_map(files, |p| fs::read(p).map_err(|e| Error::io(p, e)))?;
        return dedup_chunks(&blobs, chunk);
    }
    let mut session = DedupSession::new();
    for path in files {
        let parsed = parse_model_file(path)?;
        match granularity {
            Granularity::File => {
                session.dedup_file(&parsed)?;
            }
            Granularity::Layer => {
                session.dedup_layers(&parsed, layers)?;
            }
            Granularity::Tensor => {
                session.dedup_tensors(&parsed)?;
            }
            Granularity::Chunk => unreachable!(),
        }
    }
    Ok(match granularity {
        Granularity::File => session.file_report(),
        Granularity::Layer => session.layer_report(),
        _ => session.tensor_report(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub stored_bytes: u64,
    pub reduction_ratio: f64,
}

impl ArmResult {
    fn new(original: u64, stored: u64) -> Self {
        ArmResult {
            stored_bytes: stored,
            reduction_ratio: if original == 0 {
                0.0
            } else {
                1.0 - stored as f64 / original as f64
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingReport {
    pub models: usize,
    pub original_bytes: u64,
    /// The storage pipeline: file and tensor dedup, family assignment, BitX.
    pub dedup_then_compress: ArmResult,
    /// zstd over each whole file, then FastCDC dedup of the compressed bytes.
    pub compress_then_dedup: ArmResult,
    pub level: i32,
    pub chunk: ChunkParams,
}

/// Runs both orderings over the models in `model_dirs`.
///
/// The pipeline arm ingests every model, in order, into a scratch store with
/// the base flag set, so each model may be delta-encoded against any earlier
/// one. Both arms count pool or chunk bytes only; manifest and chunk-index
/// overheads are left out of both.
pub fn ordering_experiment(
    model_dirs: &[PathBuf],
    level: i32,
    chunk: &ChunkParams,
) -> Result<OrderingReport> {
    chunk.validate()?;
    bitx::check_level(level)?;
    let scratch = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
    let store = Store::open(scratch.path().join("store"))?;
    let mut original = 0;
    let mut compressed = Vec::new();
    for (i, dir) in model_dirs.iter().enumerate() {
        let opts = IngestOptions {
            model_id: Some(format!("m{i}")),
            is_base: true,
            level,
            ..IngestOptions::default()
        };
        let m = store.ingest(dir, &opts)?;
        original += m.original_total_bytes;
        let paths: Vec<PathBuf> = m
            .file_entries
            .iter()
            .map(|f| model_path(dir, &f.path))
            .collect();
        let frames = par::try_map(&paths, |p| {
            let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
            Ok::<_, Error>(bitx::standalone_encode(&bytes, level)?.compressed)
        })?;
        compressed.extend(frames);
    }
    let pipeline = store.stats()?.pool_bytes;
    let chunked = dedup_chunks(&compressed, chunk)?;
    Ok(OrderingReport {
        models: model_dirs.len(),
        original_bytes: original,
        dedup_then_compress: ArmResult::new(original, pipeline),
        compress_then_dedup: ArmResult::new(original, chunked.total_bytes - chunked.deduped_bytes),
        level,
        chunk: *chunk,
    })
}

fn model_path(dir: &Path, rel: &str) -> PathBuf {
    if dir.is_file() {
        dir.to_path_buf()
    } else {
        rel.split('/').fold(dir.to_path_buf(), |p, c| p.join(c))
    }
}
