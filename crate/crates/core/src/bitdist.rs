//! Bitwise similarity between aligned float buffers.
//!
//! The bit distance of two aligned buffers is the mean, over compared
//! elements, of the popcount of the XOR of their raw encodings. Bit positions
//! are numbered from the least significant bit, so for BF16 position 15 is the
//! sign, 7..=14 the exponent and 0..=6 the mantissa.
//!
//! The Monte Carlo estimator draws `w ~ N(0, σ_w²)` and `δ ~ N(0, σ_Δ²)`,
//! encodes `w` and `w + δ` in the target dtype and averages the popcount of
//! the XOR. Samples are drawn in fixed blocks of [`MC_BLOCK`]; block `i` uses
//! a ChaCha8 generator seeded with `seed` on stream `i`, so estimates are
//! identical regardless of thread count.

use std::str::FromStr;

use bytes::Bytes;
use half::{bf16, f16};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::safetensors::{DType, ParsedModelFile, TensorDescriptor};

/// Samples per independently seeded Monte Carlo block.
pub const MC_BLOCK: usize = 4096;

/// Elements per parallel work item when scanning one buffer.
const SCAN_BLOCK: usize = 1 << 16;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroPolicy {
    /// Skip elements where both operands are (signed) zero.
    #[default]
    ExcludeBothZero,
    /// Skip elements where either operand is zero.
    ExcludeEitherZero,
    IncludeAll,
}

impl FromStr for ZeroPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "exclude_both_zero" | "both" => Ok(ZeroPolicy::ExcludeBothZero),
            "exclude_either_zero" | "either" => Ok(ZeroPolicy::ExcludeEitherZero),
            "include_all" | "none" => Ok(ZeroPolicy::IncludeAll),
            other => Err(Error::InvalidParams(format!("unknown zero policy {other:?}"))),
        }
    }
}

/// Which elements of each tensor are compared.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    #[default]
    Full,
    /// Every `k`-th element of each tensor, starting at element 0.
    Stride(u64),
}

impl Sampling {
    pub fn stride(self) -> u64 {
        match self {
            Sampling::Full => 1,
            Sampling::Stride(k) => k.max(1),
        }
    }

    pub fn from_stride(k: u64) -> Self {
        if k <= 1 {
            Sampling::Full
        } else {
            Sampling::Stride(k)
        }
    }
}

/// Two equal-length buffers of one float dtype.
#[derive(Debug, Clone, Copy)]
pub struct AlignedFloatPair<'a> {
    dtype: &'a DType,
    width: usize,
    a: &'a [u8],
    b: &'a [u8],
}

impl<'a> AlignedFloatPair<'a> {
    pub fn new(dtype: &'a DType, a: &'a [u8], b: &'a [u8]) -> Result<Self> {
        let width = match dtype {
            DType::BF16 | DType::F16 => 2,
            DType::F32 => 4,
            other => return Err(Error::UnsupportedDType(other.to_string())),
        };
        if a.len() != b.len() || !a.len().is_multiple_of(width) {
            return Err(Error::LengthMismatch {
                left: a.len(),
                right: b.len(),
            });
        }
        Ok(AlignedFloatPair { dtype, width, a, b })
    }

    pub fn len(&self) -> usize {
        self.a.len() / self.width
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    pub fn dtype(&self) -> &DType {
        self.dtype
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BitDistanceReport {
    /// Mean differing bits per compared element.
    pub distance: f64,
    /// Elements visited (after sampling, before the zero filter).
    pub n_total: u64,
    /// Elements that passed the zero filter.
    pub n_used: u64,
    /// Set XOR bits per position, least significant first.
    pub bit_counts: Vec<u64>,
    pub bit_fractions: Vec<f64>,
    /// Fraction of the first model's elements that had a comparable partner.
    pub coverage: f64,
    pub sample_stride: u64,
    /// Dtype whose bit layout `bit_counts` follows; `None` when mixed.
    pub dtype: Option<DType>,
}

/// Integer accumulator behind a [`BitDistanceReport`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct BitTally {
    n_total: u64,
    n_used: u64,
    bit_counts: Vec<u64>,
}

impl BitTally {
    fn new(bits: usize) -> Self {
        BitTally {
            n_total: 0,
            n_used: 0,
            bit_counts: vec![0; bits],
        }
    }

    fn merge(&mut self, other: &BitTally) {
        self.n_total += other.n_total;
        self.n_used += other.n_used;
        if self.bit_counts.len() < other.bit_counts.len() {
            self.bit_counts.resize(other.bit_counts.len(), 0);
        }
        for (a, b) in self.bit_counts.iter_mut().zip(&other.bit_counts) {
            *a += b;
        }
    }

    fn into_report(self, coverage: f64, stride: u64, dtype: Option<DType>) -> BitDistanceReport {
        let set: u64 = self.bit_counts.iter().sum();
        let bit_fractions = self
            .bit_counts
            .iter()
            .map(|&c| if set > 0 { c as f64 / set as f64 } else { 0.0 })
            .collect();
        BitDistanceReport {
            distance: if self.n_used > 0 {
                set as f64 / self.n_used as f64
            } else {
                0.0
            },
            n_total: self.n_total,
            n_used: self.n_used,
            bit_counts: self.bit_counts,
            bit_fractions,
            coverage,
            sample_stride: stride,
            dtype,
        }
    }
}

/// How raw element words are compared.
#[derive(Debug, Clone, Copy)]
enum View {
    Bits16,
    Bits32,
    /// FP32 compared on its upper 16 bits (sign, exponent, 7 mantissa bits).
    Fp32Top16,
}

impl View {
    fn bits(self) -> usize {
        match self {
            View::Bits16 | View::Fp32Top16 => 16,
            View::Bits32 => 32,
        }
    }
}

fn scan(a: &[u8], b: &[u8], view: View, policy: ZeroPolicy, stride: u64) -> BitTally {
    let width = match view {
        View::Bits16 => 2,
        View::Bits32 | View::Fp32Top16 => 4,
    };
    let n = a.len() / width;
    let stride = stride.max(1) as usize;
    let blocks = n.div_ceil(SCAN_BLOCK);
    let partial = par::map_range(blocks, |blk| {
        let mut t = BitTally::new(view.bits());
        let start = blk * SCAN_BLOCK;
        let end = (start + SCAN_BLOCK).min(n);
        let first = start.div_ceil(stride) * stride;
        let mut i = first;
        while i < end {
            let (x, y, magnitude) = match view {
                View::Bits16 => {
                    let x = u16::from_le_bytes([a[2 * i], a[2 * i + 1]]) as u32;
                    let y = u16::from_le_bytes([b[2 * i], b[2 * i + 1]]) as u32;
                    (x, y, 0x7fff)
                }
                View::Bits32 | View::Fp32Top16 => {
                    let x = u32::from_le_bytes(a[4 * i..4 * i + 4].try_into().unwrap());
                    let y = u32::from_le_bytes(b[4 * i..4 * i + 4].try_into().unwrap());
                    (x, y, 0x7fff_ffff)
                }
            };
            t.n_total += 1;
            let (x_zero, y_zero) = (x & magnitude == 0, y & magnitude == 0);
            let skip = match policy {
                ZeroPolicy::ExcludeBothZero => x_zero && y_zero,
                ZeroPolicy::ExcludeEitherZero => x_zero || y_zero,
                ZeroPolicy::IncludeAll => false,
            };
            if !skip {
                t.n_used += 1;
                let mut diff = x ^ y;
                if let View::Fp32Top16 = view {
                    diff >>= 16;
                }
                while diff != 0 {
                    t.bit_counts[diff.trailing_zeros() as usize] += 1;
                    diff &= diff - 1;
                }
            }
            i += stride;
        }
        t
    });
    let mut total = BitTally::new(view.bits());
    for t in &partial {
        total.merge(t);
    }
    total
}

/// Bit distance between two aligned buffers.
pub fn bit_distance(pair: &AlignedFloatPair<'_>, policy: ZeroPolicy) -> BitDistanceReport {
    let view = if pair.width == 2 { View::Bits16 } else { View::Bits32 };
    scan(pair.a, pair.b, view, policy, 1).into_report(1.0, 1, Some(pair.dtype.clone()))
}

/// Sign / exponent / mantissa label for a bit position of a float dtype.
pub fn bit_group(dtype: &DType, position: usize) -> &'static str {
    let (bits, mantissa) = match dtype {
        DType::BF16 => (16, 7),
        DType::F16 => (16, 10),
        DType::F32 => (32, 23),
        DType::F64 => (64, 52),
        _ => return "unknown",
    };
    if position + 1 == bits {
        "sign"
    } else if position >= mantissa {
        "exponent"
    } else {
        "mantissa"
    }
}

/// Read access to a model's tensors, wherever they live.
pub trait TensorSource: Sync {
    fn descriptors(&self) -> Vec<TensorDescriptor>;
    fn tensor_data(&self, name: &str) -> Result<Bytes>;
}

impl TensorSource for ParsedModelFile {
    fn descriptors(&self) -> Vec<TensorDescriptor> {
        self.tensors().to_vec()
    }

    fn tensor_data(&self, name: &str) -> Result<Bytes> {
        self.tensor_bytes(name)
    }
}

/// A model split over several safetensors files.
#[derive(Debug, Clone, Default)]
pub struct ModelFiles(pub Vec<ParsedModelFile>);

impl TensorSource for ModelFiles {
    fn descriptors(&self) -> Vec<TensorDescriptor> {
        self.0.iter().flat_map(|f| f.tensors().iter().cloned()).collect()
    }

    fn tensor_data(&self, name: &str) -> Result<Bytes> {
        self.0
            .iter()
            .find_map(|f| f.tensor(name).map(|d| f.bytes_of(d)))
            .ok_or_else(|| Error::UnknownTensor(name.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistanceOptions {
    pub sampling: Sampling,
    pub zero_policy: ZeroPolicy,
    /// Compare FP32 tensors on their upper 16 bits so one threshold serves
    /// BF16 and FP32 models alike.
    pub fp32_top16: bool,
}

impl Default for DistanceOptions {
    fn default() -> Self {
        DistanceOptions {
            sampling: Sampling::Full,
            zero_policy: ZeroPolicy::ExcludeBothZero,
            fp32_top16: false,
        }
    }
}

fn comparable_view(dtype: &DType, top16: bool) -> Option<View> {
    match dtype {
        DType::BF16 | DType::F16 => Some(View::Bits16),
        DType::F32 if top16 => Some(View::Fp32Top16),
        DType::F32 => Some(View::Bits32),
        _ => None,
    }
}

/// Bit distance between two models, pairing tensors by name. Only pairs with
/// identical dtype and shape contribute; the rest lower `coverage`.
pub fn model_bit_distance(
    a: &dyn TensorSource,
    b: &dyn TensorSource,
    opts: &DistanceOptions,
) -> Result<BitDistanceReport> {
    let a_desc = a.descriptors();
    let b_desc = b.descriptors();
    let total_elems: u64 = a_desc.iter().filter_map(|t| t.num_elements()).sum();

    let mut pairs = Vec::new();
    let mut covered = 0u64;
    for t in &a_desc {
        let Some(view) = comparable_view(&t.dtype, opts.fp32_top16) else {
            continue;
        };
        let partner = b_desc
            .iter()
            .any(|u| u.name == t.name && u.dtype == t.dtype && u.shape == t.shape);
        if partner {
            covered += t.num_elements().unwrap_or(0);
            pairs.push((t, view));
        }
    }
    if covered == 0 {
        return Err(Error::NoComparableTensors);
    }

    let stride = opts.sampling.stride();
    let tallies = par::try_map(&pairs, |(t, view)| {
        let x = a.tensor_data(&t.name)?;
        let y = b.tensor_data(&t.name)?;
        if x.len() != y.len() {
            return Err(Error::LengthMismatch {
                left: x.len(),
                right: y.len(),
            });
        }
        Ok(scan(&x, &y, *view, opts.zero_policy, stride))
    })?;

    let bits = pairs.iter().map(|(_, v)| v.bits()).max().unwrap_or(16);
    let mut total = BitTally::new(bits);
    for t in &tallies {
        total.merge(t);
    }
    let first = &pairs[0].0.dtype;
    let dtype = if pairs.iter().all(|(t, _)| &t.dtype == first) {
        Some(if opts.fp32_top16 && *first == DType::F32 {
            DType::BF16
        } else {
            first.clone()
        })
    } else {
        None
    };
    Ok(total.into_report(covered as f64 / total_elems as f64, stride, dtype))
}

/// Decodes one element of a float buffer to `f64`.
pub fn decode_element(dtype: &DType, bytes: &[u8], index: usize) -> f64 {
    match dtype {
        DType::BF16 => bf16::from_bits(u16::from_le_bytes([bytes[2 * index], bytes[2 * index + 1]])).to_f64(),
        DType::F16 => f16::from_bits(u16::from_le_bytes([bytes[2 * index], bytes[2 * index + 1]])).to_f64(),
        DType::F32 => f32::from_le_bytes(bytes[4 * index..4 * index + 4].try_into().unwrap()) as f64,
        DType::F64 => f64::from_le_bytes(bytes[8 * index..8 * index + 8].try_into().unwrap()),
        _ => f64::NAN,
    }
}

/// Encodes `x` in a float dtype, returning the raw bits (round to nearest even).
pub fn encode_bits(dtype: &DType, x: f64) -> u32 {
    match dtype {
        DType::BF16 => bf16::from_f64(x).to_bits() as u32,
        DType::F16 => f16::from_f64(x).to_bits() as u32,
        DType::F32 => (x as f32).to_bits(),
        _ => 0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaHistogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub mean: f64,
    pub std: f64,
    /// Elements whose delta was NaN or infinite; they are not binned.
    pub n_nonfinite: u64,
}

/// Histogram of `a[i] - b[i]` over `[min, max]` of the deltas.
pub fn delta_histogram(pair: &AlignedFloatPair<'_>, bins: usize) -> Result<DeltaHistogram> {
    if bins == 0 {
        return Err(Error::InvalidParams("histogram needs at least one bin".into()));
    }
    let n = pair.len();
    let deltas: Vec<f64> = (0..n)
        .map(|i| decode_element(pair.dtype, pair.a, i) - decode_element(pair.dtype, pair.b, i))
        .collect();
    let finite: Vec<f64> = deltas.iter().copied().filter(|d| d.is_finite()).collect();
    let n_nonfinite = (n - finite.len()) as u64;
    if finite.is_empty() {
        return Ok(DeltaHistogram {
            bin_edges: vec![0.0; bins + 1],
            counts: vec![0; bins],
            mean: 0.0,
            std: 0.0,
            n_nonfinite,
        });
    }
    let count = finite.len() as f64;
    let mean = finite.iter().sum::<f64>() / count;
    let std = (finite.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / count).sqrt();
    let mut lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        lo -= 0.5;
        hi += 0.5;
    }
    let width = (hi - lo) / bins as f64;
    let bin_edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0u64; bins];
    for d in &finite {
        let idx = (((d - lo) / width) as usize).min(bins - 1);
        counts[idx] += 1;
    }
    Ok(DeltaHistogram {
        bin_edges,
        counts,
        mean,
        std,
        n_nonfinite,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloEstimate {
    pub sigma_w: f64,
    pub sigma_delta: f64,
    pub n_samples: u64,
    pub dtype: DType,
    pub seed: u64,
    pub expected_distance: f64,
    pub std_error: f64,
}

fn float_bits(dtype: &DType) -> Result<u32> {
    match dtype {
        DType::BF16 | DType::F16 => Ok(16),
        DType::F32 => Ok(32),
        other => Err(Error::UnsupportedDType(other.to_string())),
    }
}

fn check_sigma(sigma_w: f64, sigma_delta: f64) -> Result<()> {
    if !(sigma_w.is_finite() && sigma_w > 0.0) {
        return Err(Error::InvalidSigma(format!("sigma_w must be > 0, got {sigma_w}")));
    }
    if !(sigma_delta.is_finite() && sigma_delta >= 0.0) {
        return Err(Error::InvalidSigma(format!(
            "sigma_delta must be >= 0, got {sigma_delta}"
        )));
    }
    Ok(())
}

/// Monte Carlo estimate of the expected bit distance between `w` and `w + δ`.
pub fn mc_expected_distance(
    sigma_w: f64,
    sigma_delta: f64,
    n_samples: u64,
    dtype: &DType,
    seed: u64,
) -> Result<MonteCarloEstimate> {
    check_sigma(sigma_w, sigma_delta)?;
    float_bits(dtype)?;
    if n_samples == 0 {
        return Err(Error::InvalidParams("n_samples must be at least 1".into()));
    }
    let blocks = (n_samples as usize).div_ceil(MC_BLOCK);
    let sums = par::map_range(blocks, |blk| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(blk as u64);
        let count = MC_BLOCK.min(n_samples as usize - blk * MC_BLOCK);
        let (mut sum, mut sum_sq) = (0u64, 0u64);
        for _ in 0..count {
            let zw: f64 = StandardNormal.sample(&mut rng);
            let zd: f64 = StandardNormal.sample(&mut rng);
            let w = sigma_w * zw;
            let bits = (encode_bits(dtype, w) ^ encode_bits(dtype, w + sigma_delta * zd)).count_ones() as u64;
            sum += bits;
            sum_sq += bits * bits;
        }
        (sum, sum_sq)
    });
    let (sum, sum_sq) = sums
        .iter()
        .fold((0u64, 0u64), |(s, q), (a, b)| (s + a, q + b));
    let n = n_samples as f64;
    let mean = sum as f64 / n;
    let std_error = if n_samples > 1 {
        let var = ((sum_sq as f64 - sum as f64 * mean) / (n - 1.0)).max(0.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    Ok(MonteCarloEstimate {
        sigma_w,
        sigma_delta,
        n_samples,
        dtype: dtype.clone(),
        seed,
        expected_distance: mean,
        std_error,
    })
}

/// Full Cartesian grid of estimates, `cells[i][j]` for `sigma_w[i]`,
/// `sigma_delta[j]`. Every cell uses the same seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McGrid {
    pub sigma_w: Vec<f64>,
    pub sigma_delta: Vec<f64>,
    pub cells: Vec<Vec<MonteCarloEstimate>>,
}

impl McGrid {
    pub fn iter(&self) -> impl Iterator<Item = &MonteCarloEstimate> {
        self.cells.iter().flatten()
    }

    /// CSV with one row per cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sigma_w,sigma_delta,n_samples,dtype,seed,expected_distance,std_error\n");
        for e in self.iter() {
            out.push_str(&format!(
                "{},{},{},{},{},{:.6},{:.6}\n",
                e.sigma_w, e.sigma_delta, e.n_samples, e.dtype, e.seed, e.expected_distance, e.std_error
            ));
        }
        out
    }
}

pub fn mc_sweep(
    sigma_w: &[f64],
    sigma_delta: &[f64],
    n_samples: u64,
    dtype: &DType,
    seed: u64,
) -> Result<McGrid> {
    if sigma_w.is_empty() || sigma_delta.is_empty() {
        return Err(Error::InvalidParams("sweep grids must be non-empty".into()));
    }
    for &w in sigma_w {
        for &d in sigma_delta {
            check_sigma(w, d)?;
        }
    }
    let cols = sigma_delta.len();
    let flat = par::map_range(sigma_w.len() * cols, |k| {
        mc_expected_distance(sigma_w[k / cols], sigma_delta[k % cols], n_samples, dtype, seed)
    });
    let mut flat = flat.into_iter().collect::<Result<Vec<_>>>()?.into_iter();
    let cells = (0..sigma_w.len())
        .map(|_| flat.by_ref().take(cols).collect())
        .collect();
    Ok(McGrid {
        sigma_w: sigma_w.to_vec(),
        sigma_delta: sigma_delta.to_vec(),
        cells,
    })
}
