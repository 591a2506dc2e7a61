//! XOR delta codec for fine-tuned tensors.
//!
//! A fine-tuned tensor is XORed byte-for-byte against its base tensor and the
//! result is zstd-compressed. Related weights share sign, exponent and high
//! mantissa bits, so the XOR stream is mostly zero bytes. Decoding reverses the
//! two steps. The codec never interprets the bytes as floats, so NaN payloads,
//! infinities, negative zero and denormals round-trip exactly.
//!
//! Frame layouts (integers little-endian):
//!
//! ```text
//! delta:      "BX01" codec:u8 level:i8 raw_len:u64 base_id:[u8;32] payload
//! standalone: "BS01" codec:u8 level:i8 raw_len:u64 payload
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pool::ContentId;

pub const DELTA_MAGIC: &[u8; 4] = b"BX01";
pub const STANDALONE_MAGIC: &[u8; 4] = b"BS01";
pub const DEFAULT_LEVEL: i32 = 3;

const PREFIX_LEN: usize = 4 + 1 + 1 + 8;
const DELTA_HEADER_LEN: usize = PREFIX_LEN + 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Codec {
    ZstdFrame,
}

impl Codec {
    fn tag(self) -> u8 {
        match self {
            Codec::ZstdFrame => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            1 => Ok(Codec::ZstdFrame),
            other => Err(Error::CorruptFrame(format!("unknown codec tag {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitxDelta {
    /// Digest of the base tensor the delta was taken against.
    pub base_id: ContentId,
    pub compressed: Vec<u8>,
    pub raw_len: u64,
    pub codec: Codec,
    pub codec_level: i32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StandaloneBlob {
    pub compressed: Vec<u8>,
    pub raw_len: u64,
    pub codec: Codec,
    pub codec_level: i32,
}

/// Rejects levels zstd does not accept or the frame cannot record.
pub fn check_level(level: i32) -> Result<()> {
    let range = zstd::compression_level_range();
    if !range.contains(&level) || i8::try_from(level).is_err() {
        return Err(Error::InvalidParams(format!(
            "compression level {level} outside {range:?}"
        )));
    }
    Ok(())
}

fn compress(data: &[u8], level: i32) -> Result<Vec<u8>> {
    zstd::bulk::compress(data, level).map_err(|e| Error::InvalidParams(format!("zstd: {e}")))
}

fn decompress(data: &[u8], raw_len: u64) -> Result<Vec<u8>> {
    let capacity = usize::try_from(raw_len)
        .map_err(|_| Error::CorruptFrame(format!("raw_len {raw_len} too large")))?;
    let out = zstd::bulk::decompress(data, capacity)
        .map_err(|e| Error::CorruptFrame(format!("zstd: {e}")))?;
    if out.len() != capacity {
        return Err(Error::CorruptFrame(format!(
            "decoded {} bytes, frame says {raw_len}",
            out.len()
        )));
    }
    Ok(out)
}

/// `a ^ b`; the slices must have equal length.
pub fn xor_bytes(a: &[u8], b: &[u8]) -> Vec<u8> {
    debug_assert_eq!(a.len(), b.len());
    let mut out = a.to_vec();
    xor_in_place(&mut out, b);
    out
}

fn xor_in_place(dst: &mut [u8], src: &[u8]) {
    let mut d = dst.chunks_exact_mut(8);
    let mut s = src.chunks_exact(8);
    for (x, y) in (&mut d).zip(&mut s) {
        let v = u64::from_ne_bytes(x.try_into().unwrap()) ^ u64::from_ne_bytes(y.try_into().unwrap());
        x.copy_from_slice(&v.to_ne_bytes());
    }
    for (x, y) in d.into_remainder().iter_mut().zip(s.remainder()) {
        *x ^= y;
    }
}

/// Encodes `fine` as a delta against `base`.
pub fn bitx_encode(fine: &[u8], base: &[u8], level: i32) -> Result<BitxDelta> {
    if fine.len() != base.len() {
        return Err(Error::LengthMismatch {
            left: fine.len(),
            right: base.len(),
        });
    }
    check_level(level)?;
    let xored = xor_bytes(fine, base);
    Ok(BitxDelta {
        base_id: ContentId::of(base),
        compressed: compress(&xored, level)?,
        raw_len: fine.len() as u64,
        codec: Codec::ZstdFrame,
        codec_level: level,
    })
}

/// Restores the fine tensor. The base is verified against the recorded digest
/// before any decoding happens.
pub fn bitx_decode(delta: &BitxDelta, base: &[u8]) -> Result<Vec<u8>> {
    let actual = ContentId::of(base);
    if base.len() as u64 != delta.raw_len || actual != delta.base_id {
        return Err(Error::BaseMismatch {
            expected: delta.base_id,
            actual,
        });
    }
    let mut out = decompress(&delta.compressed, delta.raw_len)?;
    xor_in_place(&mut out, base);
    Ok(out)
}

pub fn standalone_encode(bytes: &[u8], level: i32) -> Result<StandaloneBlob> {
    check_level(level)?;
    Ok(StandaloneBlob {
        compressed: compress(bytes, level)?,
        raw_len: bytes.len() as u64,
        codec: Codec::ZstdFrame,
        codec_level: level,
    })
}

pub fn standalone_decode(blob: &StandaloneBlob) -> Result<Vec<u8>> {
    decompress(&blob.compressed, blob.raw_len)
}

fn write_prefix(out: &mut Vec<u8>, magic: &[u8; 4], codec: Codec, level: i32, raw_len: u64) {
    out.extend_from_slice(magic);
    out.push(codec.tag());
    out.push(level as i8 as u8);
    out.extend_from_slice(&raw_len.to_le_bytes());
}

fn read_prefix(frame: &[u8], magic: &[u8; 4]) -> Result<(Codec, i32, u64)> {
    if frame.len() < PREFIX_LEN {
        return Err(Error::CorruptFrame(format!("frame is only {} bytes", frame.len())));
    }
    if &frame[..4] != magic {
        return Err(Error::CorruptFrame(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&frame[..4]),
            String::from_utf8_lossy(magic)
        )));
    }
    let codec = Codec::from_tag(frame[4])?;
    let level = frame[5] as i8 as i32;
    let raw_len = u64::from_le_bytes(frame[6..14].try_into().unwrap());
    Ok((codec, level, raw_len))
}

impl BitxDelta {
    pub fn to_frame(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(DELTA_HEADER_LEN + self.compressed.len());
        write_prefix(&mut out, DELTA_MAGIC, self.codec, self.codec_level, self.raw_len);
        out.extend_from_slice(self.base_id.digest());
        out.extend_from_slice(&self.compressed);
        out
    }

    pub fn from_frame(frame: &[u8]) -> Result<Self> {
        let (codec, codec_level, raw_len) = read_prefix(frame, DELTA_MAGIC)?;
        if frame.len() < DELTA_HEADER_LEN {
            return Err(Error::CorruptFrame("delta frame ends inside base id".into()));
        }
        let digest: [u8; 32] = frame[PREFIX_LEN..DELTA_HEADER_LEN].try_into().unwrap();
        Ok(BitxDelta {
            base_id: ContentId::from_digest(digest),
            compressed: frame[DELTA_HEADER_LEN..].to_vec(),
            raw_len,
            codec,
            codec_level,
        })
    }

    pub fn frame_len(&self) -> usize {
        DELTA_HEADER_LEN + self.compressed.len()
    }
}

impl StandaloneBlob {
    pub fn to_frame(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(PREFIX_LEN + self.compressed.len());
        write_prefix(&mut out, STANDALONE_MAGIC, self.codec, self.codec_level, self.raw_len);
        out.extend_from_slice(&self.compressed);
        out
    }

    pub fn from_frame(frame: &[u8]) -> Result<Self> {
        let (codec, codec_level, raw_len) = read_prefix(frame, STANDALONE_MAGIC)?;
        Ok(StandaloneBlob {
            compressed: frame[PREFIX_LEN..].to_vec(),
            raw_len,
            codec,
            codec_level,
        })
    }

    pub fn frame_len(&self) -> usize {
        PREFIX_LEN + self.compressed.len()
    }
}
