//! Named tensor archives in the single-file safetensors layout.
//!
//! On disk: an 8-byte little-endian header length `N`, `N` bytes of UTF-8
//! JSON mapping tensor names to `{dtype, shape, data_offsets}`, then the raw
//! little-endian payload. An optional `__metadata__` object of string pairs
//! is carried through unchanged.

use std::fs;
use std::path::Path;

use half::{bf16, f16};
use indexmap::IndexMap;
use nalgebra::DMatrix;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const METADATA_KEY: &str = "__metadata__";
/// Refuse headers larger than this; real checkpoints stay far below it.
const MAX_HEADER_LEN: u64 = 100 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F16,
    BF16,
    F32,
}

impl DType {
    pub fn bits(self) -> usize {
        match self {
            DType::F16 | DType::BF16 => 16,
            DType::F32 => 32,
        }
    }

    pub fn size_bytes(self) -> usize {
        self.bits() / 8
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DType::F16 => "F16",
            DType::BF16 => "BF16",
            DType::F32 => "F32",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "F16" => Some(DType::F16),
            "BF16" => Some(DType::BF16),
            "F32" => Some(DType::F32),
            _ => None,
        }
    }

    /// Decode little-endian values of this dtype into f32.
    pub fn decode(self, bytes: &[u8]) -> Vec<f32> {
        match self {
            DType::F16 => bytes
                .chunks_exact(2)
                .map(|b| f16::from_le_bytes([b[0], b[1]]).to_f32())
                .collect(),
            DType::BF16 => bytes
                .chunks_exact(2)
                .map(|b| bf16::from_le_bytes([b[0], b[1]]).to_f32())
                .collect(),
            DType::F32 => bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect(),
        }
    }

    /// Encode f32 values into this dtype (round-to-nearest-even for half types).
    pub fn encode(self, values: &[f32]) -> Vec<u8> {
        let mut out = Vec::with_capacity(values.len() * self.size_bytes());
        match self {
            DType::F16 => values
                .iter()
                .for_each(|v| out.extend_from_slice(&f16::from_f32(*v).to_le_bytes())),
            DType::BF16 => values
                .iter()
                .for_each(|v| out.extend_from_slice(&bf16::from_f32(*v).to_le_bytes())),
            DType::F32 => values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
        out
    }
}

impl std::fmt::Display for DType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    shape: Vec<usize>,
    dtype: DType,
    data: Vec<u8>,
}

/// Float32 working view of a tensor.
#[derive(Debug, Clone, PartialEq)]
pub enum WorkingView {
    Vector(Vec<f32>),
    /// Rank-2 tensor, or a higher-rank tensor folded to `(dim0, rest)` when
    /// `reshaped` is set.
    Matrix {
        values: DMatrix<f32>,
        reshaped: bool,
    },
}

impl WorkingView {
    pub fn len(&self) -> usize {
        match self {
            WorkingView::Vector(v) => v.len(),
            WorkingView::Matrix { values, .. } => values.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Values in row-major order.
    pub fn to_row_major(&self) -> Vec<f32> {
        match self {
            WorkingView::Vector(v) => v.clone(),
            WorkingView::Matrix { values, .. } => values.transpose().as_slice().to_vec(),
        }
    }
}

fn validate_shape(name: &str, shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::CorruptTensor {
            name: name.to_string(),
            reason: "scalar (rank-0) tensors are not supported".into(),
        });
    }
    if shape.contains(&0) {
        return Err(Error::CorruptTensor {
            name: name.to_string(),
            reason: format!("shape {shape:?} has a zero dimension"),
        });
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::CorruptTensor {
            name: name.to_string(),
            reason: format!("shape {shape:?} overflows"),
        })
}

impl TensorRecord {
    pub fn new(shape: Vec<usize>, dtype: DType, data: Vec<u8>) -> Result<Self> {
        let numel = validate_shape("<record>", &shape)?;
        if data.len() != numel * dtype.size_bytes() {
            return Err(Error::CorruptTensor {
                name: "<record>".into(),
                reason: format!(
                    "{} bytes given for shape {shape:?} of {dtype} (expected {})",
                    data.len(),
                    numel * dtype.size_bytes()
                ),
            });
        }
        Ok(TensorRecord { shape, dtype, data })
    }

    /// Build a record from row-major f32 values, rounding to `dtype`.
    pub fn from_f32(shape: Vec<usize>, dtype: DType, values: &[f32]) -> Result<Self> {
        TensorRecord::new(shape, dtype, dtype.encode(values))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        self.dtype.decode(&self.data)
    }

    pub fn has_non_finite(&self) -> bool {
        self.to_f32_vec().iter().any(|v| !v.is_finite())
    }

    /// Rank 1 becomes a vector; rank ≥ 2 becomes a `(dim0, product(rest))` matrix.
    pub fn as_matrix(&self) -> WorkingView {
        let values = self.to_f32_vec();
        if self.shape.len() == 1 {
            return WorkingView::Vector(values);
        }
        let rows = self.shape[0];
        let cols = values.len() / rows;
        WorkingView::Matrix {
            values: DMatrix::from_row_slice(rows, cols, &values),
            reshaped: self.shape.len() > 2,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Reject archives holding NaN or infinite values.
    pub validate_finite: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorArchive {
    entries: IndexMap<String, TensorRecord>,
    metadata: IndexMap<String, String>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert or replace a tensor, keeping the original position on replace.
    pub fn insert(&mut self, name: impl Into<String>, record: TensorRecord) -> Option<TensorRecord> {
        self.entries.insert(name.into(), record)
    }

    pub fn get(&self, name: &str) -> Option<&TensorRecord> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &TensorRecord)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn metadata(&self) -> &IndexMap<String, String> {
        &self.metadata
    }

    pub fn set_metadata(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    pub fn num_params(&self) -> usize {
        self.entries.values().map(TensorRecord::numel).sum()
    }

    /// Bits per stored weight: 32 when every tensor is float32, else 16.
    pub fn source_precision_bits(&self) -> u32 {
        if !self.entries.is_empty() && self.entries.values().all(|r| r.dtype == DType::F32) {
            32
        } else {
            16
        }
    }

    fn header_bytes(&self) -> Vec<u8> {
        let mut header = Map::new();
        if !self.metadata.is_empty() {
            let meta: Map<String, Value> = self
                .metadata
                .iter()
                .map(|(k, v)| (k.clone(), Value::String(v.clone())))
                .collect();
            header.insert(METADATA_KEY.to_string(), Value::Object(meta));
        }
        let mut offset = 0usize;
        for (name, record) in &self.entries {
            let end = offset + record.data.len();
            header.insert(
                name.clone(),
                json!({
                    "dtype": record.dtype.as_str(),
                    "shape": record.shape,
                    "data_offsets": [offset, end],
                }),
            );
            offset = end;
        }
        let mut bytes = serde_json::to_vec(&Value::Object(header)).expect("header is valid JSON");
        // Pad with spaces so the payload starts 8-byte aligned.
        while !bytes.len().is_multiple_of(8) {
            bytes.push(b' ');
        }
        bytes
    }

    /// Hex SHA-256 of the canonical header (names, dtypes, shapes, layout).
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.header_bytes()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = self.header_bytes();
        let payload_len: usize = self.entries.values().map(|r| r.data.len()).sum();
        let mut out = Vec::with_capacity(8 + header.len() + payload_len);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for record in self.entries.values() {
            out.extend_from_slice(&record.data);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], options: LoadOptions) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Format(format!(
                "file is {} bytes, shorter than the 8-byte header length",
                bytes.len()
            )));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        if header_len > MAX_HEADER_LEN || header_len > (bytes.len() - 8) as u64 {
            return Err(Error::Format(format!(
                "header length {header_len} exceeds file size {}",
                bytes.len()
            )));
        }
        let header_end = 8 + header_len as usize;
        let header: Value = serde_json::from_slice(&bytes[8..header_end])
            .map_err(|e| Error::Format(format!("header is not valid JSON: {e}")))?;
        let Value::Object(header) = header else {
            return Err(Error::Format("header is not a JSON object".into()));
        };
        let payload = &bytes[header_end..];

        let mut archive = TensorArchive::new();
        let mut ranges: Vec<(usize, usize, String)> = Vec::with_capacity(header.len());
        for (name, info) in header {
            if name == METADATA_KEY {
                let Value::Object(meta) = info else {
                    return Err(Error::Format("__metadata__ is not an object".into()));
                };
                for (k, v) in meta {
                    let Value::String(v) = v else {
                        return Err(Error::Format(format!("metadata value for `{k}` is not a string")));
                    };
                    archive.metadata.insert(k, v);
                }
                continue;
            }
            let (record, start, end) = parse_entry(&name, &info, payload)?;
            if options.validate_finite && record.has_non_finite() {
                return Err(Error::Numeric(format!("tensor `{name}`")));
            }
            ranges.push((start, end, name.clone()));
            archive.entries.insert(name, record);
        }

        ranges.sort();
        for pair in ranges.windows(2) {
            if pair[1].0 < pair[0].1 {
                return Err(Error::CorruptTensor {
                    name: pair[1].2.clone(),
                    reason: format!("data range overlaps tensor `{}`", pair[0].2),
                });
            }
        }
        Ok(archive)
    }
}

fn parse_entry(name: &str, info: &Value, payload: &[u8]) -> Result<(TensorRecord, usize, usize)> {
    let malformed = |what: &str| Error::Format(format!("tensor `{name}`: {what}"));
    let info = info.as_object().ok_or_else(|| malformed("entry is not an object"))?;
    let dtype_name = info
        .get("dtype")
        .and_then(Value::as_str)
        .ok_or_else(|| malformed("missing dtype"))?;
    let dtype = DType::parse(dtype_name).ok_or_else(|| Error::UnsupportedDtype {
        name: name.to_string(),
        dtype: dtype_name.to_string(),
    })?;
    let shape = info
        .get("shape")
        .and_then(Value::as_array)
        .ok_or_else(|| malformed("missing shape"))?
        .iter()
        .map(|d| d.as_u64().map(|d| d as usize))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| malformed("shape has a non-integer dimension"))?;
    let offsets = info
        .get("data_offsets")
        .and_then(Value::as_array)
        .filter(|o| o.len() == 2)
        .and_then(|o| Some((o[0].as_u64()? as usize, o[1].as_u64()? as usize)))
        .ok_or_else(|| malformed("data_offsets must be two integers"))?;
    let numel = validate_shape(name, &shape)?;
    let (start, end) = offsets;
    let corrupt = |reason: String| Error::CorruptTensor {
        name: name.to_string(),
        reason,
    };
    if start > end || end > payload.len() {
        return Err(corrupt(format!(
            "data range {start}..{end} lies outside the {}-byte payload",
            payload.len()
        )));
    }
    let expected = numel * dtype.size_bytes();
    if end - start != expected {
        return Err(corrupt(format!(
            "shape {shape:?} of {dtype} needs {expected} bytes but the range holds {}",
            end - start
        )));
    }
    let record = TensorRecord {
        shape,
        dtype,
        data: payload[start..end].to_vec(),
    };
    Ok((record, start, end))
}

pub fn load_archive(path: impl AsRef<Path>) -> Result<TensorArchive> {
    load_archive_with(path, LoadOptions::default())
}

pub fn load_archive_with(path: impl AsRef<Path>, options: LoadOptions) -> Result<TensorArchive> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    TensorArchive::from_bytes(&bytes, options)
}

pub fn save_archive(archive: &TensorArchive, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, archive.to_bytes()).map_err(|e| Error::io(path, e))
}
