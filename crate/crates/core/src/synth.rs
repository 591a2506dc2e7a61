//! Seeded synthetic models for tests, benchmarks and experiments.
//!
//! Weights are Gaussian with a chosen standard deviation; fine-tunes add
//! independent Gaussian noise to every float element of a base. Each tensor
//! draws from its own ChaCha8 stream derived from the model seed and tensor
//! index, split into fixed blocks, so output does not depend on the thread
//! count.

use std::path::Path;

use bytes::Bytes;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::bitdist::{decode_element, encode_bits};
use crate::error::{Error, Result};
use crate::par;
use crate::safetensors::{DType, ParsedModelFile, SafetensorsWriter};

const BLOCK: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<u64>,
}

impl TensorSpec {
    pub fn new(name: impl Into<String>, dtype: DType, shape: &[u64]) -> Self {
        TensorSpec {
            name: name.into(),
            dtype,
            shape: shape.to_vec(),
        }
    }

    pub fn num_elements(&self) -> usize {
        self.shape.iter().product::<u64>() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthTensor {
    pub spec: TensorSpec,
    pub data: Bytes,
}

/// An in-memory model: ordered tensors plus optional header metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SynthModel {
    pub tensors: Vec<SynthTensor>,
    pub metadata: Vec<(String, String)>,
    /// Tensor start alignment in bytes; values above 1 leave payload gaps.
    pub alignment: u64,
}

impl SynthModel {
    pub fn writer(&self) -> SafetensorsWriter {
        let mut w = SafetensorsWriter::new().align(self.alignment);
        for (k, v) in &self.metadata {
            w = w.metadata(k, v);
        }
        for t in &self.tensors {
            w.push(&t.spec.name, t.spec.dtype.clone(), &t.spec.shape, t.data.clone());
        }
        w
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.writer().to_bytes()
    }

    pub fn parsed(&self) -> ParsedModelFile {
        ParsedModelFile::parse(Bytes::from(self.to_bytes())).expect("generated files are well formed")
    }

    /// Writes `<dir>/model.safetensors`, creating `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.writer().write(dir.join("model.safetensors"))
    }

    pub fn payload_bytes(&self) -> u64 {
        self.tensors.iter().map(|t| t.data.len() as u64).sum()
    }

    pub fn tensor(&self, name: &str) -> Option<&SynthTensor> {
        self.tensors.iter().find(|t| t.spec.name == name)
    }
}

/// Decoder-style layout: embedding, `layers` blocks of attention and MLP
/// projections with a norm, final norm and output head.
pub fn transformer_layout(layers: usize, hidden: u64, vocab: u64, dtype: DType) -> Vec<TensorSpec> {
    let mut out = vec![TensorSpec::new("model.embed_tokens.weight", dtype.clone(), &[vocab, hidden])];
    for i in 0..layers {
        let p = format!("model.layers.{i}");
        for proj in ["q_proj", "k_proj", "v_proj", "o_proj"] {
            out.push(TensorSpec::new(
                format!("{p}.self_attn.{proj}.weight"),
                dtype.clone(),
                &[hidden, hidden],
            ));
        }
        out.push(TensorSpec::new(format!("{p}.mlp.up_proj.weight"), dtype.clone(), &[2 * hidden, hidden]));
        out.push(TensorSpec::new(format!("{p}.mlp.down_proj.weight"), dtype.clone(), &[hidden, 2 * hidden]));
        out.push(TensorSpec::new(format!("{p}.input_layernorm.weight"), dtype.clone(), &[hidden]));
    }
    out.push(TensorSpec::new("model.norm.weight", dtype.clone(), &[hidden]));
    out.push(TensorSpec::new("lm_head.weight", dtype, &[vocab, hidden]));
    out
}

fn stream_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn block_rng(seed: u64, block: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(block as u64);
    rng
}

fn put(dtype: &DType, out: &mut [u8], i: usize, x: f64) {
    let bits = encode_bits(dtype, x);
    match dtype.width() {
        Some(2) => out[2 * i..2 * i + 2].copy_from_slice(&(bits as u16).to_le_bytes()),
        Some(4) => out[4 * i..4 * i + 4].copy_from_slice(&bits.to_le_bytes()),
        _ => unreachable!("only 16- and 32-bit floats are generated"),
    }
}

fn check_float(dtype: &DType) -> Result<usize> {
    match dtype {
        DType::BF16 | DType::F16 | DType::F32 => Ok(dtype.width().unwrap()),
        other => Err(Error::UnsupportedDType(other.to_string())),
    }
}

/// `n` elements drawn from N(0, sigma²) and rounded to `dtype`.
pub fn gaussian_bytes(dtype: &DType, n: usize, sigma: f64, seed: u64) -> Result<Vec<u8>> {
    let width = check_float(dtype)?;
    let blocks = n.div_ceil(BLOCK);
    let parts = par::map_range(blocks, |b| {
        let len = BLOCK.min(n - b * BLOCK);
        let mut rng = block_rng(seed, b);
        let mut out = vec![0u8; len * width];
        for i in 0..len {
            let z: f64 = rng.sample(StandardNormal);
            put(dtype, &mut out, i, sigma * z);
        }
        out
    });
    Ok(parts.concat())
}

/// `base` plus N(0, sigma²) noise on every element, re-rounded to `dtype`.
/// Non-finite base values are kept as they are.
pub fn perturb_bytes(dtype: &DType, base: &[u8], sigma: f64, seed: u64) -> Result<Vec<u8>> {
    let width = check_float(dtype)?;
    let n = base.len() / width;
    let blocks = n.div_ceil(BLOCK);
    let parts = par::map_range(blocks, |b| {
        let start = b * BLOCK;
        let len = BLOCK.min(n - start);
        let mut rng = block_rng(seed, b);
        let src = &base[start * width..(start + len) * width];
        let mut out = src.to_vec();
        for i in 0..len {
            let z: f64 = rng.sample(StandardNormal);
            let x = decode_element(dtype, src, i);
            if x.is_finite() {
                put(dtype, &mut out, i, x + sigma * z);
            }
        }
        out
    });
    Ok(parts.concat())
}

/// Gaussian weights for every tensor in `layout`.
pub fn gaussian_model(layout: &[TensorSpec], sigma_w: f64, seed: u64) -> Result<SynthModel> {
    let tensors = layout
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let data = gaussian_bytes(&spec.dtype, spec.num_elements(), sigma_w, stream_seed(seed, i as u64))?;
            Ok(SynthTensor {
                spec: spec.clone(),
                data: Bytes::from(data),
            })
        })
        .collect::<Result<_>>()?;
    Ok(SynthModel {
        tensors,
        ..SynthModel::default()
    })
}

/// A fine-tune of `base`: every float tensor gets N(0, sigma_delta²) noise.
pub fn fine_tune(base: &SynthModel, sigma_delta: f64, seed: u64) -> Result<SynthModel> {
    let tensors = base
        .tensors
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let data = if t.spec.dtype.is_float() && sigma_delta > 0.0 {
                Bytes::from(perturb_bytes(&t.spec.dtype, &t.data, sigma_delta, stream_seed(seed, i as u64))?)
            } else {
                t.data.clone()
            };
            Ok(SynthTensor {
                spec: t.spec.clone(),
                data,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SynthModel {
        tensors,
        ..base.clone()
    })
}

/// A base model followed by `n_fine` independent fine-tunes of it.
pub fn family(
    layout: &[TensorSpec],
    sigma_w: f64,
    sigma_delta: f64,
    n_fine: usize,
    seed: u64,
) -> Result<Vec<SynthModel>> {
    let base = gaussian_model(layout, sigma_w, seed)?;
    let mut out = Vec::with_capacity(n_fine + 1);
    for k in 0..n_fine {
        out.push(fine_tune(&base, sigma_delta, stream_seed(seed, 1_000_003 + k as u64))?);
    }
    out.insert(0, base);
    Ok(out)
}

/// Bit patterns written by [`inject_specials`]: NaN, ±Inf, ±0 and denormals.
pub fn special_values(dtype: &DType) -> Vec<u32> {
    match dtype {
        DType::BF16 => vec![0x7FC0, 0xFFC1, 0x7F80, 0xFF80, 0x8000, 0x0000, 0x0001, 0x807F, 0x7F81],
        DType::F16 => vec![0x7E00, 0xFE01, 0x7C00, 0xFC00, 0x8000, 0x0000, 0x0001, 0x83FF, 0x7C01],
        DType::F32 => vec![
            0x7FC0_0000,
            0xFFC0_0001,
            0x7F80_0000,
            0xFF80_0000,
            0x8000_0000,
            0x0000_0000,
            0x0000_0001,
            0x807F_FFFF,
            0x7F80_0001,
        ],
        _ => Vec::new(),
    }
}

/// Overwrites `count` random elements with special values.
pub fn inject_specials(dtype: &DType, data: &mut [u8], count: usize, rng: &mut impl Rng) {
    let specials = special_values(dtype);
    let Some(width) = dtype.width() else { return };
    let n = data.len() / width;
    if n == 0 || specials.is_empty() {
        return;
    }
    for _ in 0..count {
        let i = rng.random_range(0..n);
        let bits = specials[rng.random_range(0..specials.len())];
        let bytes = bits.to_le_bytes();
        data[i * width..(i + 1) * width].copy_from_slice(&bytes[..width]);
    }
}

/// Bounds for [`random_model`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomModelParams {
    pub min_bytes: u64,
    pub max_bytes: u64,
    pub max_tensors: usize,
}

impl Default for RandomModelParams {
    fn default() -> Self {
        RandomModelParams {
            min_bytes: 1 << 10,
            max_bytes: 64 << 20,
            max_tensors: 200,
        }
    }
}

/// A model with random structure: 1 to `max_tensors` tensors of mixed
/// BF16/F16/F32, total payload log-uniform in `[min_bytes, max_bytes]`,
/// sprinkled with NaN, infinities, signed zeros and denormals. Some models
/// repeat a tensor, carry header metadata, or use aligned offsets that leave
/// gaps in the payload.
pub fn random_model(seed: u64, params: &RandomModelParams) -> Result<SynthModel> {
    if params.min_bytes == 0 || params.min_bytes > params.max_bytes || params.max_tensors == 0 {
        return Err(Error::InvalidParams(format!("bad random model bounds {params:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = ((params.min_bytes as f64).ln(), (params.max_bytes as f64).ln());
    let total = rng.random_range(lo..=hi).exp() as u64;
    let n_tensors = rng.random_range(1..=params.max_tensors).min((total / 4).max(1) as usize);
    let weights: Vec<f64> = (0..n_tensors).map(|_| rng.random_range(0.05..1.0)).collect();
    let wsum: f64 = weights.iter().sum();
    let dtypes = [DType::BF16, DType::F16, DType::F32];

    let mut tensors: Vec<SynthTensor> = Vec::with_capacity(n_tensors);
    for (i, w) in weights.iter().enumerate() {
        if i > 0 && rng.random_bool(0.05) {
            let j = rng.random_range(0..tensors.len());
            let mut copy = tensors[j].clone();
            copy.spec.name = format!("tensors.{i}.copy");
            tensors.push(copy);
            continue;
        }
        let dtype = dtypes[rng.random_range(0..dtypes.len())].clone();
        let width = dtype.width().unwrap() as u64;
        let n = if rng.random_bool(0.02) {
            0
        } else {
            ((total as f64 * w / wsum) as u64 / width).max(1)
        };
        let shape = if n > 1 && n % 4 == 0 && rng.random_bool(0.5) {
            vec![4, n / 4]
        } else {
            vec![n]
        };
        let sigma = rng.random_range(0.005..2.0);
        let mut data = gaussian_bytes(&dtype, n as usize, sigma, rng.random())?;
        let specials = (n as usize / 100).clamp(1, 64);
        inject_specials(&dtype, &mut data, specials, &mut rng);
        tensors.push(SynthTensor {
            spec: TensorSpec::new(format!("tensors.{i}.weight"), dtype, &shape),
            data: Bytes::from(data),
        });
    }
    let mut model = SynthModel {
        tensors,
        metadata: Vec::new(),
        alignment: if rng.random_bool(0.3) { 64 } else { 1 },
    };
    if rng.random_bool(0.5) {
        model.metadata.push(("format".into(), "pt".into()));
        model.metadata.push(("seed".into(), seed.to_string()));
    }
    Ok(model)
}
