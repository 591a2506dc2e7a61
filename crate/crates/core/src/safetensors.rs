//! Reading and writing the safetensors container.
//!
//! Layout: an 8-byte little-endian header length `N`, then `N` bytes of UTF-8
//! JSON mapping tensor names to `{"dtype", "shape", "data_offsets"}`, then the
//! raw tensor payload. Offsets are relative to the start of the payload.
//!
//! The header bytes are kept exactly as read. Nothing downstream re-emits JSON,
//! so key order and whitespace survive a round trip.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use bytes::Bytes;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::pool::ContentId;

const METADATA_KEY: &str = "__metadata__";

/// Element type of a tensor.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum DType {
    BF16,
    F16,
    F32,
    F64,
    I8,
    U8,
    I32,
    I64,
    /// Any label this crate does not interpret, such as `BOOL` or `F8_E4M3`.
    Other(String),
}

impl DType {
    pub fn from_label(label: &str) -> Self {
        match label {
            "BF16" => DType::BF16,
            "F16" => DType::F16,
            "F32" => DType::F32,
            "F64" => DType::F64,
            "I8" => DType::I8,
            "U8" => DType::U8,
            "I32" => DType::I32,
            "I64" => DType::I64,
            other => DType::Other(other.to_string()),
        }
    }

    pub fn label(&self) -> &str {
        match self {
            DType::BF16 => "BF16",
            DType::F16 => "F16",
            DType::F32 => "F32",
            DType::F64 => "F64",
            DType::I8 => "I8",
            DType::U8 => "U8",
            DType::I32 => "I32",
            DType::I64 => "I64",
            DType::Other(label) => label,
        }
    }

    /// Element width in bytes, `None` for labels we do not know.
    pub fn width(&self) -> Option<usize> {
        match self {
            DType::I8 | DType::U8 => Some(1),
            DType::BF16 | DType::F16 => Some(2),
            DType::F32 | DType::I32 => Some(4),
            DType::F64 | DType::I64 => Some(8),
            DType::Other(_) => None,
        }
    }

    pub fn is_float(&self) -> bool {
        matches!(self, DType::BF16 | DType::F16 | DType::F32 | DType::F64)
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl From<String> for DType {
    fn from(s: String) -> Self {
        DType::from_label(&s)
    }
}

impl From<DType> for String {
    fn from(d: DType) -> Self {
        d.label().to_string()
    }
}

/// Location and type of one tensor inside a model file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorDescriptor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<u64>,
    /// Start of the tensor, relative to the end of the header.
    pub data_begin: u64,
    /// Exclusive end of the tensor.
    pub data_end: u64,
}

impl TensorDescriptor {
    pub fn byte_len(&self) -> u64 {
        self.data_end - self.data_begin
    }

    pub fn num_elements(&self) -> Option<u64> {
        self.shape.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d))
    }

    /// Element width: fixed for known dtypes, otherwise inferred from the
    /// byte range and shape when they divide evenly.
    pub fn element_width(&self) -> Option<usize> {
        if let Some(w) = self.dtype.width() {
            return Some(w);
        }
        let n = self.num_elements()?;
        if n == 0 || !self.byte_len().is_multiple_of(n) {
            return None;
        }
        usize::try_from(self.byte_len() / n).ok()
    }

    pub fn range(&self) -> Range<usize> {
        self.data_begin as usize..self.data_end as usize
    }
}

/// A parsed safetensors file.
///
/// The header and payload are cheap reference-counted views; for files opened
/// from disk they point into a read-only memory map.
#[derive(Debug, Clone)]
pub struct ParsedModelFile {
    header: Bytes,
    payload: Bytes,
    tensors: Vec<TensorDescriptor>,
    metadata: Option<BTreeMap<String, String>>,
}

/// Parses the safetensors file at `path`.
pub fn parse_model_file(path: impl AsRef<Path>) -> Result<ParsedModelFile> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let len = file.metadata().map_err(|e| Error::io(path, e))?.len();
    if len < 8 {
        return Err(Error::TruncatedFile(format!(
            "{} is {len} bytes, shorter than the length prefix",
            path.display()
        )));
    }
    // SAFETY: the map is read-only and the store never writes into files it
    // has handed out; concurrent external truncation is outside the contract.
    let map = unsafe { memmap2::Mmap::map(&file) }.map_err(|e| Error::io(path, e))?;
    ParsedModelFile::parse(Bytes::from_owner(map))
}

/// Writes `parsed` to `out`.
pub fn serialize_model_file(parsed: &ParsedModelFile, out: impl AsRef<Path>) -> Result<()> {
    let out = out.as_ref();
    parsed.validate_payload()?;
    let mut f = File::create(out).map_err(|e| Error::io(out, e))?;
    parsed.write_to(&mut f).map_err(|e| Error::io(out, e))?;
    f.sync_all().map_err(|e| Error::io(out, e))
}

impl ParsedModelFile {
    pub fn parse(bytes: Bytes) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::TruncatedFile(format!(
                "{} bytes, shorter than the length prefix",
                bytes.len()
            )));
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        let header_end = 8u64
            .checked_add(n)
            .filter(|&end| end <= bytes.len() as u64)
            .ok_or_else(|| {
                Error::TruncatedFile(format!(
                    "header claims {n} bytes but only {} follow the prefix",
                    bytes.len() - 8
                ))
            })? as usize;
        let header = bytes.slice(8..header_end);
        let payload = bytes.slice(header_end..);
        let (tensors, metadata) = parse_header(&header, payload.len() as u64)?;
        Ok(ParsedModelFile {
            header,
            payload,
            tensors,
            metadata,
        })
    }

    pub fn header_len(&self) -> u64 {
        self.header.len() as u64
    }

    /// The header JSON exactly as it appeared in the file.
    pub fn header_bytes(&self) -> &Bytes {
        &self.header
    }

    pub fn payload(&self) -> &Bytes {
        &self.payload
    }

    /// Descriptors in ascending `data_begin` order.
    pub fn tensors(&self) -> &[TensorDescriptor] {
        &self.tensors
    }

    pub fn metadata(&self) -> Option<&BTreeMap<String, String>> {
        self.metadata.as_ref()
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorDescriptor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn tensor_bytes(&self, name: &str) -> Result<Bytes> {
        let desc = self
            .tensor(name)
            .ok_or_else(|| Error::UnknownTensor(name.to_string()))?;
        Ok(self.bytes_of(desc))
    }

    /// Payload slice for a descriptor belonging to this file.
    pub fn bytes_of(&self, desc: &TensorDescriptor) -> Bytes {
        self.payload.slice(desc.range())
    }

    /// Total size of the serialized file.
    pub fn file_len(&self) -> u64 {
        8 + self.header.len() as u64 + self.payload.len() as u64
    }

    /// SHA-256 of the serialized file.
    pub fn content_id(&self) -> ContentId {
        ContentId::of_parts(&[
            &self.header_len().to_le_bytes(),
            &self.header,
            &self.payload,
        ])
    }

    /// Payload ranges not covered by any tensor (padding, trailing bytes).
    pub fn gaps(&self) -> Vec<Range<u64>> {
        payload_gaps(&self.tensors, self.payload.len() as u64)
    }

    /// Same file with a different payload. The payload is not checked here;
    /// serialization rejects payloads that do not cover every descriptor.
    pub fn with_payload(&self, payload: Bytes) -> Self {
        ParsedModelFile {
            payload,
            ..self.clone()
        }
    }

    /// Returns a copy with one tensor's bytes replaced by an equal-length buffer.
    pub fn with_tensor_bytes(&self, name: &str, data: &[u8]) -> Result<Self> {
        let desc = self
            .tensor(name)
            .ok_or_else(|| Error::UnknownTensor(name.to_string()))?;
        if data.len() as u64 != desc.byte_len() {
            return Err(Error::LengthMismatch {
                left: desc.byte_len() as usize,
                right: data.len(),
            });
        }
        let mut payload = self.payload.to_vec();
        payload[desc.range()].copy_from_slice(data);
        Ok(self.with_payload(payload.into()))
    }

    fn validate_payload(&self) -> Result<()> {
        let required = self.tensors.iter().map(|t| t.data_end).max().unwrap_or(0);
        if required > self.payload.len() as u64 {
            return Err(Error::PayloadMismatch {
                required,
                actual: self.payload.len() as u64,
            });
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&self.header_len().to_le_bytes())?;
        w.write_all(&self.header)?;
        w.write_all(&self.payload)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate_payload()?;
        let mut out = Vec::with_capacity(self.file_len() as usize);
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        Ok(out)
    }
}

pub(crate) fn payload_gaps(tensors: &[TensorDescriptor], payload_len: u64) -> Vec<Range<u64>> {
    let mut gaps = Vec::new();
    let mut cursor = 0;
    let mut sorted: Vec<_> = tensors.iter().map(|t| (t.data_begin, t.data_end)).collect();
    sorted.sort_unstable();
    for (begin, end) in sorted {
        if begin > cursor {
            gaps.push(cursor..begin);
        }
        cursor = cursor.max(end);
    }
    if payload_len > cursor {
        gaps.push(cursor..payload_len);
    }
    gaps
}

type HeaderParts = (Vec<TensorDescriptor>, Option<BTreeMap<String, String>>);

fn parse_header(header: &[u8], payload_len: u64) -> Result<HeaderParts> {
    let text = std::str::from_utf8(header)
        .map_err(|e| Error::MalformedHeader(format!("header is not UTF-8: {e}")))?;
    let root: serde_json::Map<String, Value> = serde_json::from_str(text)
        .map_err(|e| Error::MalformedHeader(format!("header is not a JSON object: {e}")))?;

    let mut metadata = None;
    let mut tensors = Vec::with_capacity(root.len());
    for (name, value) in root {
        if name == METADATA_KEY {
            metadata = Some(parse_metadata(value)?);
            continue;
        }
        let desc = parse_descriptor(name, &value)?;
        if desc.data_end > payload_len {
            return Err(Error::TruncatedFile(format!(
                "tensor {:?} ends at {} but the payload is {payload_len} bytes",
                desc.name, desc.data_end
            )));
        }
        tensors.push(desc);
    }

    tensors.sort_by(|a, b| {
        (a.data_begin, a.data_end, &a.name).cmp(&(b.data_begin, b.data_end, &b.name))
    });
    for pair in tensors.windows(2) {
        if pair[1].data_begin < pair[0].data_end {
            return Err(Error::OverlappingTensors {
                first: pair[0].name.clone(),
                second: pair[1].name.clone(),
            });
        }
    }
    Ok((tensors, metadata))
}

fn parse_metadata(value: Value) -> Result<BTreeMap<String, String>> {
    let Value::Object(map) = value else {
        return Err(Error::MalformedHeader(
            "__metadata__ is not an object".into(),
        ));
    };
    map.into_iter()
        .map(|(k, v)| match v {
            Value::String(s) => Ok((k, s)),
            other => Err(Error::MalformedHeader(format!(
                "__metadata__ value for {k:?} is not a string: {other}"
            ))),
        })
        .collect()
}

fn parse_descriptor(name: String, value: &Value) -> Result<TensorDescriptor> {
    let malformed = |what: &str| Error::MalformedHeader(format!("tensor {name:?}: {what}"));
    let obj = value.as_object().ok_or_else(|| malformed("entry is not an object"))?;
    let dtype = obj
        .get("dtype")
        .and_then(Value::as_str)
        .map(DType::from_label)
        .ok_or_else(|| malformed("missing or non-string dtype"))?;
    let shape = obj
        .get("shape")
        .and_then(Value::as_array)
        .ok_or_else(|| malformed("missing shape"))?
        .iter()
        .map(|d| d.as_u64().ok_or_else(|| malformed("shape entries must be non-negative integers")))
        .collect::<Result<Vec<u64>>>()?;
    let offsets = obj
        .get("data_offsets")
        .and_then(Value::as_array)
        .ok_or_else(|| malformed("missing data_offsets"))?;
    let [begin, end] = offsets.as_slice() else {
        return Err(malformed("data_offsets must have two entries"));
    };
    let (Some(begin), Some(end)) = (begin.as_u64(), end.as_u64()) else {
        return Err(malformed("data_offsets must be non-negative integers"));
    };
    if begin > end {
        return Err(malformed("data_offsets begin after end"));
    }
    let desc = TensorDescriptor {
        name: name.clone(),
        dtype,
        shape,
        data_begin: begin,
        data_end: end,
    };
    if let Some(width) = desc.dtype.width() {
        let expected = desc
            .num_elements()
            .and_then(|n| n.checked_mul(width as u64))
            .ok_or_else(|| malformed("shape overflows"))?;
        if expected != desc.byte_len() {
            return Err(malformed(&format!(
                "{} bytes in range but shape and dtype need {expected}",
                desc.byte_len()
            )));
        }
    }
    Ok(desc)
}

/// Builds safetensors files in memory.
///
/// Tensors are laid out contiguously in insertion order and the header is
/// padded with spaces to an 8-byte boundary, as the reference writer does.
#[derive(Debug, Default)]
pub struct SafetensorsWriter {
    metadata: Option<BTreeMap<String, String>>,
    tensors: Vec<(String, DType, Vec<u64>, Bytes)>,
    alignment: u64,
}

impl SafetensorsWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn metadata(mut self, key: &str, value: &str) -> Self {
        self.metadata
            .get_or_insert_with(BTreeMap::new)
            .insert(key.to_string(), value.to_string());
        self
    }

    /// Starts every tensor at a multiple of `bytes`, zero-filling the gaps.
    pub fn align(mut self, bytes: u64) -> Self {
        self.alignment = bytes;
        self
    }

    pub fn tensor(
        mut self,
        name: &str,
        dtype: DType,
        shape: &[u64],
        data: impl Into<Bytes>,
    ) -> Self {
        self.push(name, dtype, shape, data);
        self
    }

    pub fn push(&mut self, name: &str, dtype: DType, shape: &[u64], data: impl Into<Bytes>) {
        self.tensors
            .push((name.to_string(), dtype, shape.to_vec(), data.into()));
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::from("{");
        let mut first = true;
        let mut sep = |h: &mut String| {
            if !first {
                h.push(',');
            }
            first = false;
        };
        if let Some(meta) = &self.metadata {
            sep(&mut header);
            header.push_str(&format!(
                "{}:{}",
                Value::from(METADATA_KEY),
                serde_json::to_string(meta).unwrap()
            ));
        }
        let align = self.alignment.max(1);
        let mut offset = 0u64;
        let mut starts = Vec::with_capacity(self.tensors.len());
        for (name, dtype, shape, data) in &self.tensors {
            sep(&mut header);
            offset = offset.div_ceil(align) * align;
            starts.push(offset);
            let end = offset + data.len() as u64;
            header.push_str(&format!(
                "{}:{{\"dtype\":{},\"shape\":{},\"data_offsets\":[{offset},{end}]}}",
                Value::from(name.as_str()),
                Value::from(dtype.label()),
                serde_json::to_string(shape).unwrap()
            ));
            offset = end;
        }
        header.push('}');
        while header.len() % 8 != 0 {
            header.push(' ');
        }

        let mut out = Vec::with_capacity(8 + header.len() + offset as usize);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        let base = out.len();
        for ((_, _, _, data), start) in self.tensors.iter().zip(starts) {
            out.resize(base + start as usize, 0);
            out.extend_from_slice(data);
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn raw_file(header: &str, payload: &[u8]) -> Vec<u8> {
        let mut out = (header.len() as u64).to_le_bytes().to_vec();
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(payload);
        out
    }

    #[test]
    fn smallest_file_parses() {
        let bytes = raw_file(
            r#"{"a":{"dtype":"BF16","shape":[2,2],"data_offsets":[0,8]}}"#,
            &[1, 2, 3, 4, 5, 6, 7, 8],
        );
        let parsed = ParsedModelFile::parse(bytes.clone().into()).unwrap();
        assert_eq!(parsed.tensors().len(), 1);
        let a = &parsed.tensors()[0];
        assert_eq!(a.name, "a");
        assert_eq!(a.dtype, DType::BF16);
        assert_eq!(a.num_elements(), Some(4));
        assert_eq!(a.element_width(), Some(2));
        assert_eq!(&parsed.tensor_bytes("a").unwrap()[..], &[1, 2, 3, 4, 5, 6, 7, 8]);
        assert_eq!(parsed.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn short_payload_is_truncated() {
        let bytes = raw_file(
            r#"{"a":{"dtype":"BF16","shape":[2,2],"data_offsets":[0,8]}}"#,
            &[0; 7],
        );
        let err = ParsedModelFile::parse(bytes.into()).unwrap_err();
        assert!(matches!(err, Error::TruncatedFile(_)), "{err}");
    }

    #[test]
    fn short_header_is_truncated() {
        let mut bytes = raw_file(r#"{"a":1}"#, &[]);
        bytes.truncate(10);
        assert!(matches!(
            ParsedModelFile::parse(bytes.into()),
            Err(Error::TruncatedFile(_))
        ));
        assert!(matches!(
            ParsedModelFile::parse(Bytes::from_static(&[1, 2, 3])),
            Err(Error::TruncatedFile(_))
        ));
    }

    #[test]
    fn malformed_headers() {
        for header in [
            "not json",
            "[1,2]",
            r#"{"a":{"shape":[1],"data_offsets":[0,2]}}"#,
            r#"{"a":{"dtype":"BF16","data_offsets":[0,2]}}"#,
            r#"{"a":{"dtype":"BF16","shape":[1]}}"#,
            r#"{"a":{"dtype":"BF16","shape":[-1],"data_offsets":[0,2]}}"#,
            r#"{"a":{"dtype":"BF16","shape":[1],"data_offsets":[2,0]}}"#,
            r#"{"a":{"dtype":"BF16","shape":[3],"data_offsets":[0,4]}}"#,
            r#"{"__metadata__":{"k":1}}"#,
        ] {
            let bytes = raw_file(header, &[0; 8]);
            let err = ParsedModelFile::parse(bytes.into()).unwrap_err();
            assert!(matches!(err, Error::MalformedHeader(_)), "{header}: {err}");
        }
        let mut bad_utf8 = raw_file("{\"a\":1}", &[]);
        bad_utf8[9] = 0xff;
        assert!(matches!(
            ParsedModelFile::parse(bad_utf8.into()),
            Err(Error::MalformedHeader(_))
        ));
    }

    #[test]
    fn overlapping_tensors_rejected() {
        let header = r#"{"a":{"dtype":"U8","shape":[4],"data_offsets":[0,4]},"b":{"dtype":"U8","shape":[4],"data_offsets":[2,6]}}"#;
        let err = ParsedModelFile::parse(raw_file(header, &[0; 6]).into()).unwrap_err();
        assert!(matches!(err, Error::OverlappingTensors { .. }));
    }

    #[test]
    fn unknown_dtype_is_opaque_not_an_error() {
        let header = r#"{"m":{"dtype":"BOOL","shape":[3],"data_offsets":[0,3]},"q":{"dtype":"F8_E4M3","shape":[],"data_offsets":[3,5]}}"#;
        let parsed = ParsedModelFile::parse(raw_file(header, &[0; 5]).into()).unwrap();
        let m = parsed.tensor("m").unwrap();
        assert_eq!(m.dtype, DType::Other("BOOL".into()));
        assert_eq!(m.element_width(), Some(1));
        // two bytes for one scalar element: width inferred as 2
        assert_eq!(parsed.tensor("q").unwrap().element_width(), Some(2));
    }

    #[test]
    fn tensors_sorted_by_offset_not_name() {
        let header = r#"{"z":{"dtype":"U8","shape":[1],"data_offsets":[0,1]},"a":{"dtype":"U8","shape":[1],"data_offsets":[1,2]}}"#;
        let parsed = ParsedModelFile::parse(raw_file(header, &[7, 9]).into()).unwrap();
        let names: Vec<_> = parsed.tensors().iter().map(|t| t.name.as_str()).collect();
        assert_eq!(names, ["z", "a"]);
    }

    #[test]
    fn unknown_tensor_and_empty_tensor() {
        let header = r#"{"e":{"dtype":"F32","shape":[0,3],"data_offsets":[0,0]},"a":{"dtype":"U8","shape":[1],"data_offsets":[0,1]}}"#;
        let parsed = ParsedModelFile::parse(raw_file(header, &[1]).into()).unwrap();
        assert!(parsed.tensor_bytes("e").unwrap().is_empty());
        assert!(matches!(
            parsed.tensor_bytes("nope"),
            Err(Error::UnknownTensor(_))
        ));
    }

    #[test]
    fn gaps_survive_round_trip() {
        let header = r#"{"a":{"dtype":"U8","shape":[2],"data_offsets":[0,2]},"b":{"dtype":"U8","shape":[2],"data_offsets":[4,6]}}"#;
        let bytes = raw_file(header, &[1, 2, 0xaa, 0xbb, 3, 4, 0xcc]);
        let parsed = ParsedModelFile::parse(bytes.clone().into()).unwrap();
        assert_eq!(parsed.gaps(), vec![2..4, 6..7]);
        assert_eq!(parsed.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn metadata_is_exposed() {
        let bytes = SafetensorsWriter::new()
            .metadata("format", "pt")
            .tensor("w", DType::F32, &[1], vec![0u8; 4])
            .to_bytes();
        let parsed = ParsedModelFile::parse(bytes.into()).unwrap();
        assert_eq!(parsed.metadata().unwrap()["format"], "pt");
        assert_eq!(parsed.header_len() % 8, 0);
    }

    #[test]
    fn edit_is_local_to_tensor_range() {
        let bytes = SafetensorsWriter::new()
            .tensor("a", DType::U8, &[4], vec![1u8; 4])
            .tensor("b", DType::U8, &[4], vec![2u8; 4])
            .tensor("c", DType::U8, &[4], vec![3u8; 4])
            .to_bytes();
        let parsed = ParsedModelFile::parse(bytes.clone().into()).unwrap();
        let edited = parsed.with_tensor_bytes("b", &[9, 9, 9, 9]).unwrap().to_bytes().unwrap();
        let start = 8 + parsed.header_len() as usize + 4;
        for (i, (x, y)) in bytes.iter().zip(&edited).enumerate() {
            if (start..start + 4).contains(&i) {
                assert_eq!(*y, 9);
            } else {
                assert_eq!(x, y, "byte {i} changed");
            }
        }
        assert!(parsed.with_tensor_bytes("b", &[1]).is_err());
    }

    #[test]
    fn serialize_rejects_short_payload() {
        let bytes = SafetensorsWriter::new()
            .tensor("a", DType::U8, &[4], vec![1u8; 4])
            .to_bytes();
        let parsed = ParsedModelFile::parse(bytes.into()).unwrap();
        let broken = parsed.with_payload(Bytes::from_static(&[1, 2]));
        assert!(matches!(
            broken.to_bytes(),
            Err(Error::PayloadMismatch { required: 4, actual: 2 })
        ));
        let dir = tempfile::tempdir().unwrap();
        assert!(serialize_model_file(&broken, dir.path().join("x")).is_err());
    }

    #[test]
    fn file_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        SafetensorsWriter::new()
            .tensor("w", DType::BF16, &[3, 2], (0u8..12).collect::<Vec<_>>())
            .tensor("b", DType::F32, &[2], vec![0u8; 8])
            .write(&path)
            .unwrap();
        let original = std::fs::read(&path).unwrap();
        let parsed = parse_model_file(&path).unwrap();
        assert_eq!(parsed.content_id(), ContentId::of(&original));
        let out = dir.path().join("copy.safetensors");
        serialize_model_file(&parsed, &out).unwrap();
        assert_eq!(std::fs::read(out).unwrap(), original);
    }

    #[test]
    fn tiny_file_on_disk_is_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t");
        std::fs::write(&path, [1, 2]).unwrap();
        assert!(matches!(parse_model_file(&path), Err(Error::TruncatedFile(_))));
        assert!(matches!(
            parse_model_file(dir.path().join("missing")),
            Err(Error::Io { .. })
        ));
    }

    proptest! {
        #[test]
        fn round_trip_identity(
            tensors in prop::collection::vec(
                (prop::sample::select(vec![DType::BF16, DType::F32, DType::U8, DType::I64]),
                 prop::collection::vec(0u64..5, 0..3)),
                0..8),
            seed in any::<u8>(),
        ) {
            let mut w = SafetensorsWriter::new();
            for (i, (dtype, shape)) in tensors.iter().enumerate() {
                let n: u64 = shape.iter().product();
                let len = n as usize * dtype.width().unwrap();
                let data: Vec<u8> = (0..len).map(|j| (j as u8).wrapping_mul(seed).wrapping_add(i as u8)).collect();
                w.push(&format!("t{i}"), dtype.clone(), shape, data);
            }
            let bytes = w.to_bytes();
            let parsed = ParsedModelFile::parse(bytes.clone().into()).unwrap();
            prop_assert_eq!(parsed.tensors().len(), tensors.len());
            let used: u64 = parsed.tensors().iter().map(|t| t.byte_len()).sum();
            prop_assert_eq!(used, parsed.payload().len() as u64);
            prop_assert!(parsed.gaps().is_empty());
            prop_assert_eq!(parsed.to_bytes().unwrap(), bytes);
        }
    }
}
