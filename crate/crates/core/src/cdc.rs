//! FastCDC content-defined chunking with normalized chunking (level 2).
//!
//! The Gear hash is `h = (h << 1) + GEAR[byte]`, so bit `k` of `h` depends on
//! the last `k + 1` bytes. Cut masks therefore take their bits from the top
//! of the word, where the window is widest. Below the average size the mask
//! has two extra bits (harder to cut), above it two fewer (easier to cut).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::pool::{ContentId, DedupReport, Granularity, Tally};

/// Normalization level: bits added to / removed from the average mask.
const NORMALIZATION: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkParams {
    pub min_size: usize,
    pub avg_size: usize,
    pub max_size: usize,
    pub gear_seed: u64,
}

impl Default for ChunkParams {
    fn default() -> Self {
        ChunkParams::with_avg(64 * 1024)
    }
}

impl ChunkParams {
    /// `avg / 4`, `avg`, `avg * 4`, with the default seed.
    pub fn with_avg(avg_size: usize) -> Self {
        ChunkParams {
            min_size: avg_size / 4,
            avg_size,
            max_size: avg_size * 4,
            gear_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ChunkParams {
            min_size,
            avg_size,
            max_size,
            ..
        } = *self;
        if min_size == 0 || !(min_size <= avg_size && avg_size <= max_size) {
            return Err(Error::InvalidParams(format!(
                "chunk sizes must satisfy 0 < min <= avg <= max, got {min_size}/{avg_size}/{max_size}"
            )));
        }
        if !avg_size.is_power_of_two() || avg_size < 64 {
            return Err(Error::InvalidParams(format!(
                "average chunk size must be a power of two >= 64, got {avg_size}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkRecord {
    pub id: ContentId,
    pub offset: u64,
    pub length: u64,
}

/// Boundary finder for one parameter set.
#[derive(Debug, Clone)]
pub struct Chunker {
    params: ChunkParams,
    gear: [u64; 256],
    mask_small: u64,
    mask_large: u64,
}

fn top_mask(bits: u32) -> u64 {
    if bits == 0 {
        0
    } else {
        u64::MAX << (64 - bits.min(64))
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Gear table derived from `seed` with SplitMix64.
pub fn gear_table(seed: u64) -> [u64; 256] {
    let mut state = seed;
    let mut table = [0u64; 256];
    for slot in &mut table {
        *slot = splitmix64(&mut state);
    }
    table
}

impl Chunker {
    pub fn new(params: ChunkParams) -> Result<Self> {
        params.validate()?;
        let bits = params.avg_size.trailing_zeros();
        Ok(Chunker {
            params,
            gear: gear_table(params.gear_seed),
            mask_small: top_mask(bits + NORMALIZATION),
            mask_large: top_mask(bits.saturating_sub(NORMALIZATION)),
        })
    }

    pub fn params(&self) -> &ChunkParams {
        &self.params
    }

    /// Length of the first chunk of `data`.
    pub fn cut(&self, data: &[u8]) -> usize {
        let p = &self.params;
        let mut n = data.len();
        if n <= p.min_size {
            return n;
        }
        n = n.min(p.max_size);
        let normal = p.avg_size.min(n);
        let mut hash = 0u64;
        let mut i = p.min_size;
        while i < normal {
            hash = (hash << 1).wrapping_add(self.gear[data[i] as usize]);
            if hash & self.mask_small == 0 {
                return i + 1;
            }
            i += 1;
        }
        while i < n {
            hash = (hash << 1).wrapping_add(self.gear[data[i] as usize]);
            if hash & self.mask_large == 0 {
                return i + 1;
            }
            i += 1;
        }
        n
    }

    /// Chunk boundaries as `(offset, length)` pairs.
    pub fn boundaries(&self, data: &[u8]) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(data.len() / self.params.avg_size + 1);
        let mut offset = 0;
        while offset < data.len() {
            let len = self.cut(&data[offset..]);
            out.push((offset, len));
            offset += len;
        }
        out
    }
}

/// Splits `data` into content-defined chunks and hashes each one.
pub fn chunk_stream(data: &[u8], params: &ChunkParams) -> Result<Vec<ChunkRecord>> {
    let chunker = Chunker::new(*params)?;
    let bounds = chunker.boundaries(data);
    Ok(par::map(&bounds, |&(offset, len)| ChunkRecord {
        id: ContentId::of(&data[offset..offset + len]),
        offset: offset as u64,
        length: len as u64,
    }))
}

/// Chunk-level dedup over a corpus. Streams are chunked in parallel; the
/// tally runs in corpus order so the report is deterministic.
pub fn dedup_chunks<S: AsRef<[u8]> + Sync>(corpus: &[S], params: &ChunkParams) -> Result<DedupReport> {
    params.validate()?;
    let per_stream = par::try_map(corpus, |s| chunk_stream(s.as_ref(), params))?;
    let mut tally = Tally::new(Granularity::Chunk);
    for chunks in per_stream {
        for c in chunks {
            tally.observe(c.id, c.length);
        }
    }
    Ok(tally.report())
}
