//! Lossless storage reduction for model checkpoint files.
//!
//! Model files are split at tensor boundaries and stored in a content-addressed
//! pool. Fine-tuned models are grouped with the base model they were derived
//! from using a bitwise Hamming metric, and each fine-tuned tensor is stored as
//! the zstd-compressed XOR against its base tensor. Retrieval reassembles the
//! original file byte-for-byte and checks it against the whole-file digest.
//!
//! Module map:
//!
//! - [`safetensors`]: container parsing and serialization with verbatim headers.
//! - [`pool`]: content-addressed blob store, refcounts, and dedup accounting.
//! - [`cdc`]: FastCDC chunking, used as a dedup baseline.
//! - [`bitdist`]: bit distance, per-bit breakdown, delta histograms, and the
//!   Monte Carlo estimator used to pick the family threshold.
//! - [`bitx`]: the XOR-then-compress delta codec and its frame format.
//! - [`lineage`]: declared-base extraction and bit-distance family assignment.
//! - [`store`]: the ingest / retrieve / rebase pipeline and manifests.
//! - [`synth`]: seeded synthetic model generators for tests and benchmarks.
//!
//! With the default `parallel` feature, data-parallel loops run on rayon.
//! Without it the same code runs sequentially; results are identical either
//! way because every reduction is over integers in a fixed order.

pub mod bitdist;
pub mod bitx;
pub mod cdc;
pub mod error;
pub mod experiments;
pub mod lineage;
pub mod par;
pub mod pool;
pub mod safetensors;
pub mod store;
pub mod synth;

pub use error::{Error, Result};
pub use pool::ContentId;
pub use safetensors::{DType, ParsedModelFile, TensorDescriptor};
