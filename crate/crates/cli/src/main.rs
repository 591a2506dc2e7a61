use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use tensorvault::bitdist::{self, DistanceOptions, Sampling, ZeroPolicy};
use tensorvault::cdc::ChunkParams;
use tensorvault::experiments;
use tensorvault::lineage;
use tensorvault::pool::{Granularity, LayerRule};
use tensorvault::store::{IngestOptions, ModelManifest, Store};
use tensorvault::{par, DType, Error};

const SCHEMA_VERSION: u32 = 1;

#[derive(Parser, Debug)]
#[command(name = "tensorvault", version, about = "Deduplicating, delta-compressing store for model checkpoints")]
struct Cli {
    /// Store directory.
    #[arg(long, global = true, env = "TENSORVAULT_STORE")]
    store: Option<PathBuf>,

    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..))]
    threads: Option<u64>,

    /// Machine-readable output.
    #[arg(long, global = true)]
    json: bool,

    /// More log output on stderr (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Store a model directory (or a single .safetensors file).
    Ingest(IngestArgs),
    /// Rebuild a stored model byte for byte.
    Retrieve {
        model_id: String,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-encode a model's deltas against another stored model.
    Rebase {
        model_id: String,
        /// The new base model.
        #[arg(long)]
        onto: String,
        #[arg(long, default_value_t = tensorvault::bitx::DEFAULT_LEVEL, allow_hyphen_values = true)]
        level: i32,
    },
    /// Recount references and delete unreferenced blobs.
    Gc,
    /// Byte accounting for the whole store.
    Stats,
    /// Bit distance between two models.
    Bitdist(BitdistArgs),
    /// Monte Carlo estimate of the expected bit distance.
    Mc(McArgs),
    /// Redundancy at file, layer, tensor or chunk granularity over a corpus.
    DedupReport(DedupArgs),
    /// Similarity graph over the stored models.
    Cluster(ClusterArgs),
    /// Compare the storage pipeline with compress-then-chunk-dedup.
    Ordering(OrderingArgs),
}

#[derive(Args, Debug)]
struct IngestArgs {
    model_dir: PathBuf,
    /// Model id; defaults to the directory name.
    #[arg(long)]
    id: Option<String>,
    /// Register the model as a candidate base.
    #[arg(long)]
    base: bool,
    /// Declared base model id, overriding the metadata files.
    #[arg(long)]
    declared_base: Option<String>,
    #[arg(long, default_value_t = lineage::DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long, default_value_t = tensorvault::bitx::DEFAULT_LEVEL, allow_hyphen_values = true)]
    level: i32,
    /// Compare every k-th element when scoring candidate bases.
    #[arg(long, default_value_t = 1)]
    sample_stride: u64,
}

#[derive(Args, Debug)]
struct BitdistArgs {
    a: PathBuf,
    b: PathBuf,
    #[arg(long, default_value = "exclude_both_zero")]
    zero_policy: String,
    #[arg(long, default_value_t = 1)]
    sample_stride: u64,
    /// Compare FP32 tensors on their upper 16 bits.
    #[arg(long)]
    fp32_top16: bool,
    /// Print the per-bit breakdown as CSV instead of the summary.
    #[arg(long)]
    csv: bool,
}

#[derive(Args, Debug)]
struct McArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    sigma_w: Vec<f64>,
    #[arg(long, value_delimiter = ',', required = true)]
    sigma_delta: Vec<f64>,
    #[arg(long, default_value_t = 100_000)]
    samples: u64,
    #[arg(long, default_value = "bf16")]
    dtype: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DedupArgs {
    corpus: PathBuf,
    /// file, layer, tensor, chunk, or all.
    #[arg(long, default_value = "all")]
    granularity: String,
    #[arg(long, default_value_t = 64 * 1024)]
    chunk_avg: usize,
    #[arg(long, default_value_t = 0)]
    gear_seed: u64,
    /// Regex whose first group names a tensor's layer.
    #[arg(long)]
    layer_pattern: Option<String>,
}

#[derive(Args, Debug)]
struct ClusterArgs {
    #[arg(long, default_value_t = lineage::DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Write the edge list (tab-separated) here.
    #[arg(long)]
    edges_out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    sample_stride: u64,
}

#[derive(Args, Debug)]
struct OrderingArgs {
    /// Model directories, or one directory whose subdirectories are models.
    #[arg(required = true)]
    models: Vec<PathBuf>,
    #[arg(long, default_value_t = tensorvault::bitx::DEFAULT_LEVEL, allow_hyphen_values = true)]
    level: i32,
    #[arg(long, default_value_t = 64 * 1024)]
    chunk_avg: usize,
}

/// Bad flags or inputs not caught by clap.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 2;
    }
    let Some(e) = err.downcast_ref::<Error>() else {
        return 5;
    };
    match e.root() {
        Error::ModelNotFound(_) => 3,
        Error::ReconstructionMismatch { .. }
        | Error::CorruptBlob { .. }
        | Error::MissingBlob(_)
        | Error::CorruptFrame(_)
        | Error::BaseMismatch { .. }
        | Error::HashCollisionDetected { .. }
        | Error::StoreCorruption(_) => 4,
        Error::Io { .. } | Error::RefcountUnderflow(_) | Error::PartialIngestRollback(_) => 5,
        _ => 2,
    }
}

fn error_kind(err: &anyhow::Error) -> String {
    match err.downcast_ref::<Error>() {
        Some(e) => {
            let dbg = format!("{:?}", e.root());
            dbg.split(|c: char| !c.is_alphanumeric()).next().unwrap_or("Error").to_string()
        }
        None if err.downcast_ref::<Usage>().is_some() => "Usage".into(),
        None => "Internal".into(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let json_mode = cli.json;
    let threads = cli.threads.map(|t| t as usize).unwrap_or_else(par::current_threads);
    let result = par::with_threads(threads, || run(&cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = exit_code(&err);
            if json_mode {
                let body = json!({
                    "schema_version": SCHEMA_VERSION,
                    "error": {
                        "kind": error_kind(&err),
                        "message": format!("{err:#}"),
                        "exit_code": code,
                    }
                });
                println!("{body}");
            }
            eprintln!("error: {err:#}");
            ExitCode::from(code)
        }
    }
}

fn store(cli: &Cli) -> anyhow::Result<Store> {
    let path = cli
        .store
        .as_ref()
        .ok_or_else(|| Usage("no store given: pass --store or set TENSORVAULT_STORE".into()))?;
    Ok(Store::open(path)?)
}

fn emit(cli: &Cli, value: Value, human: impl FnOnce() -> String) {
    if cli.json {
        println!("{value}");
    } else {
        print!("{}", human());
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Ingest(a) => cmd_ingest(cli, a),
        Command::Retrieve { model_id, out } => cmd_retrieve(cli, model_id, out),
        Command::Rebase { model_id, onto, level } => cmd_rebase(cli, model_id, onto, *level),
        Command::Gc => cmd_gc(cli),
        Command::Stats => cmd_stats(cli),
        Command::Bitdist(a) => cmd_bitdist(cli, a),
        Command::Mc(a) => cmd_mc(cli, a),
        Command::DedupReport(a) => cmd_dedup_report(cli, a),
        Command::Cluster(a) => cmd_cluster(cli, a),
        Command::Ordering(a) => cmd_ordering(cli, a),
    }
}

fn manifest_summary(command: &str, m: &ModelManifest) -> Value {
    let counts = m.storage_counts();
    let gaps: Vec<_> = m.file_entries.iter().flat_map(|f| &f.gaps).collect();
    json!({
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "model_id": m.model_id,
        "dedup": m.dedup,
        "family": {
            "base_id": m.family.base_id,
            "method": m.family.method,
            "distance": m.family.distance,
            "threshold": m.family.threshold,
            "ties": m.family.ties,
        },
        "bitx_base": m.bitx_base,
        "rebased_from": m.rebased_from,
        "files": m.file_entries.len(),
        "tensors": counts,
        "gaps": {"count": gaps.len(), "bytes": gaps.iter().map(|g| g.length).sum::<u64>()},
        "original_bytes": m.original_total_bytes,
        "stored_bytes": m.stored_total_bytes,
    })
}

fn human_manifest(m: &ModelManifest) -> String {
    let c = m.storage_counts();
    let family = match (&m.family.base_id, m.family.distance) {
        (Some(b), Some(d)) => format!("{b} ({:?}, distance {d:.3})", m.family.method),
        (Some(b), None) => format!("{b} ({:?})", m.family.method),
        (None, Some(d)) => format!("none (closest candidate at {d:.3})"),
        (None, None) => "none".into(),
    };
    let mut s = String::new();
    let _ = writeln!(s, "model     {}", m.model_id);
    let _ = writeln!(s, "dedup     {:?}", m.dedup);
    let _ = writeln!(s, "family    {family}");
    if let Some(b) = &m.bitx_base {
        let _ = writeln!(s, "bitx base {b}");
    }
    let _ = writeln!(s, "tensors   {} dedup, {} bitx, {} standalone", c.dedup, c.bitx, c.standalone);
    let gap_bytes: u64 = m.file_entries.iter().flat_map(|f| &f.gaps).map(|g| g.length).sum();
    if gap_bytes > 0 {
        let _ = writeln!(s, "gaps      {gap_bytes} payload bytes outside any tensor, kept verbatim");
    }
    let _ = writeln!(
        s,
        "bytes     {} original, {} newly stored",
        m.original_total_bytes, m.stored_total_bytes
    );
    s
}

fn cmd_ingest(cli: &Cli, a: &IngestArgs) -> anyhow::Result<()> {
    let store = store(cli)?;
    let opts = IngestOptions {
        model_id: a.id.clone(),
        declared_base: a.declared_base.clone(),
        threshold: a.threshold,
        level: a.level,
        is_base: a.base,
        sampling: Sampling::from_stride(a.sample_stride),
    };
    let m = store
        .ingest(&a.model_dir, &opts)
        .with_context(|| format!("ingesting {}", a.model_dir.display()))?;
    emit(cli, manifest_summary("ingest", &m), || human_manifest(&m));
    Ok(())
}

fn cmd_retrieve(cli: &Cli, model_id: &str, out: &Path) -> anyhow::Result<()> {
    let store = store(cli)?;
    let r = store.retrieve(model_id, out)?;
    emit(
        cli,
        json!({
            "schema_version": SCHEMA_VERSION,
            "command": "retrieve",
            "model_id": r.model_id,
            "out": out,
            "files": r.files,
            "bytes": r.bytes,
        }),
        || format!("wrote {} files ({} bytes) to {}\n", r.files.len(), r.bytes, out.display()),
    );
    Ok(())
}

fn cmd_rebase(cli: &Cli, model_id: &str, onto: &str, level: i32) -> anyhow::Result<()> {
    let store = store(cli)?;
    let m = store.rebase(model_id, onto, level)?;
    emit(cli, manifest_summary("rebase", &m), || human_manifest(&m));
    Ok(())
}

fn cmd_gc(cli: &Cli) -> anyhow::Result<()> {
    let r = store(cli)?.gc()?;
    emit(
        cli,
        json!({
            "schema_version": SCHEMA_VERSION,
            "command": "gc",
            "removed_entries": r.removed_entries,
            "removed_bytes": r.removed_bytes,
            "orphan_files": r.orphan_files,
        }),
        || {
            format!(
                "removed {} blobs ({} bytes) and {} stray files\n",
                r.removed_entries, r.removed_bytes, r.orphan_files
            )
        },
    );
    Ok(())
}

fn cmd_stats(cli: &Cli) -> anyhow::Result<()> {
    let s = store(cli)?.stats()?;
    let mut v = serde_json::to_value(&s)?;
    v["schema_version"] = json!(SCHEMA_VERSION);
    v["command"] = json!("stats");
    emit(cli, v, || {
        let b = &s.breakdown;
        let mut out = String::new();
        let _ = writeln!(out, "models          {}", s.models);
        let _ = writeln!(out, "original bytes  {}", s.original_bytes);
        let _ = writeln!(out, "stored bytes    {}", s.stored_bytes);
        let _ = writeln!(out, "reduction       {:.2}%", 100.0 * s.reduction_ratio);
        for (name, m) in [
            ("file dedup", b.file_dedup),
            ("tensor dedup", b.tensor_dedup),
            ("bitx", b.bitx),
            ("standalone", b.standalone),
            ("metadata", b.metadata),
        ] {
            let _ = writeln!(out, "  {name:<13} {:>14} -> {:>14}", m.logical, m.stored);
        }
        out
    });
    Ok(())
}

fn usage<T>(r: tensorvault::Result<T>) -> anyhow::Result<T> {
    r.map_err(|e| anyhow!(Usage(e.to_string())))
}

fn cmd_bitdist(cli: &Cli, a: &BitdistArgs) -> anyhow::Result<()> {
    let zero_policy: ZeroPolicy = usage(a.zero_policy.parse())?;
    let left = experiments::load_model(&a.a)?;
    let right = experiments::load_model(&a.b)?;
    let opts = DistanceOptions {
        sampling: Sampling::from_stride(a.sample_stride),
        zero_policy,
        fp32_top16: a.fp32_top16,
    };
    let r = bitdist::model_bit_distance(&left, &right, &opts)?;
    let groups: Vec<&str> = match &r.dtype {
        Some(dt) => (0..r.bit_counts.len()).map(|i| bitdist::bit_group(dt, i)).collect(),
        None => vec!["mixed"; r.bit_counts.len()],
    };
    if cli.json {
        let mut v = serde_json::to_value(&r)?;
        v["schema_version"] = json!(SCHEMA_VERSION);
        v["command"] = json!("bitdist");
        v["bit_groups"] = json!(groups);
        println!("{v}");
    } else if a.csv {
        let mut out = String::from("bit,group,count,fraction\n");
        for (i, (c, f)) in r.bit_counts.iter().zip(&r.bit_fractions).enumerate() {
            let _ = writeln!(out, "{i},{},{c},{f:.6}", groups[i]);
        }
        print!("{out}");
    } else {
        println!("distance  {:.4}", r.distance);
        println!("elements  {} compared of {}", r.n_used, r.n_total);
        println!("coverage  {:.4}", r.coverage);
    }
    Ok(())
}

fn cmd_mc(cli: &Cli, a: &McArgs) -> anyhow::Result<()> {
    let dtype = DType::from_label(&a.dtype.to_ascii_uppercase());
    let grid = bitdist::mc_sweep(&a.sigma_w, &a.sigma_delta, a.samples, &dtype, a.seed)?;
    let csv = grid.to_csv();
    if let Some(path) = &a.out {
        std::fs::write(path, &csv).with_context(|| format!("writing {}", path.display()))?;
    }
    if cli.json {
        println!(
            "{}",
            json!({
                "schema_version": SCHEMA_VERSION,
                "command": "mc",
                "sigma_w": grid.sigma_w,
                "sigma_delta": grid.sigma_delta,
                "cells": grid.iter().collect::<Vec<_>>(),
            })
        );
    } else if a.out.is_none() {
        print!("{csv}");
    }
    Ok(())
}

fn cmd_dedup_report(cli: &Cli, a: &DedupArgs) -> anyhow::Result<()> {
    let grans: Vec<Granularity> = if a.granularity == "all" {
        vec![Granularity::File, Granularity::Layer, Granularity::Tensor, Granularity::Chunk]
    } else {
        vec![usage(a.granularity.parse())?]
    };
    let chunk = ChunkParams {
        gear_seed: a.gear_seed,
        ..ChunkParams::with_avg(a.chunk_avg)
    };
    usage(chunk.validate())?;
    let layers = match &a.layer_pattern {
        Some(p) => usage(LayerRule::new(p))?,
        None => LayerRule::default(),
    };
    let files = experiments::corpus_files(&a.corpus)?;
    let reports = grans
        .iter()
        .map(|g| experiments::dedup_report(&files, *g, &chunk, &layers))
        .collect::<tensorvault::Result<Vec<_>>>()?;
    emit(
        cli,
        json!({
            "schema_version": SCHEMA_VERSION,
            "command": "dedup-report",
            "files": files.len(),
            "reports": reports,
        }),
        || {
            let mut out = format!(
                "{:<8} {:>10} {:>10} {:>14} {:>12} {:>10} {:>12}\n",
                "unit", "total", "unique", "avg_bytes", "max_bytes", "reduction", "meta_bytes"
            );
            for r in &reports {
                let _ = writeln!(
                    out,
                    "{:<8} {:>10} {:>10} {:>14.1} {:>12} {:>9.2}% {:>12}",
                    format!("{:?}", r.granularity).to_lowercase(),
                    r.total_units,
                    r.unique_units,
                    r.avg_unit_bytes,
                    r.max_unit_bytes,
                    100.0 * r.reduction_ratio,
                    r.estimated_metadata_bytes
                );
            }
            out
        },
    );
    Ok(())
}

fn cmd_cluster(cli: &Cli, a: &ClusterArgs) -> anyhow::Result<()> {
    if a.threshold.is_nan() || a.threshold < 0.0 {
        return Err(Usage(format!("threshold must be >= 0, got {}", a.threshold)).into());
    }
    let store = store(cli)?;
    let opts = lineage::lineage_distance_options(Sampling::from_stride(a.sample_stride));
    let (ids, edges) = store.similarity_graph(a.threshold, &opts)?;
    let tsv = lineage::edges_to_tsv(&edges);
    if let Some(path) = &a.edges_out {
        std::fs::write(path, &tsv).with_context(|| format!("writing {}", path.display()))?;
    }
    let components = lineage::components(&ids, &edges);
    emit(
        cli,
        json!({
            "schema_version": SCHEMA_VERSION,
            "command": "cluster",
            "threshold": a.threshold,
            "models": ids,
            "edges": edges,
            "components": components,
        }),
        || {
            let mut out = String::new();
            if a.edges_out.is_none() {
                out.push_str(&tsv);
            }
            for c in &components {
                let _ = writeln!(out, "component: {}", c.join(" "));
            }
            out
        },
    );
    Ok(())
}

fn cmd_ordering(cli: &Cli, a: &OrderingArgs) -> anyhow::Result<()> {
    let dirs = if a.models.len() == 1 && a.models[0].is_dir() && !has_direct_model(&a.models[0]) {
        let mut subdirs: Vec<PathBuf> = std::fs::read_dir(&a.models[0])
            .with_context(|| format!("listing {}", a.models[0].display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        subdirs.sort();
        subdirs
    } else {
        a.models.clone()
    };
    let chunk = ChunkParams::with_avg(a.chunk_avg);
    usage(chunk.validate())?;
    let r = experiments::ordering_experiment(&dirs, a.level, &chunk)?;
    let mut v = serde_json::to_value(&r)?;
    v["schema_version"] = json!(SCHEMA_VERSION);
    v["command"] = json!("ordering");
    emit(cli, v, || {
        format!(
            "models                 {}\noriginal bytes         {}\ndedup then compress    {} bytes, {:.2}% reduction\ncompress then dedup    {} bytes, {:.2}% reduction\n",
            r.models,
            r.original_bytes,
            r.dedup_then_compress.stored_bytes,
            100.0 * r.dedup_then_compress.reduction_ratio,
            r.compress_then_dedup.stored_bytes,
            100.0 * r.compress_then_dedup.reduction_ratio
        )
    });
    Ok(())
}

fn has_direct_model(dir: &Path) -> bool {
    std::fs::read_dir(dir)
        .map(|it| {
            it.filter_map(|e| e.ok())
                .any(|e| e.path().extension().is_some_and(|x| x == "safetensors"))
        })
        .unwrap_or(false)
}
