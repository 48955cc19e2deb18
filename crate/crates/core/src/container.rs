//! The `.dqr` compressed-delta container.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic "DQR1" | u32 format version | u64 manifest length N | N bytes JSON manifest | payload
//! ```
//!
//! Each manifest entry names a `[start, end)` range of the payload holding
//! that tensor's blob, with a CRC32 of the blob. See `FORMAT.md` for the
//! per-kind blob layouts.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use half::f16;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::archive::{DType, TensorRecord};
use crate::compress::{
    CompressedEntry, CompressionConfig, EntryKind, EntryPayload, FactorPrecision, Method, PassthroughSource,
    QuantizedDelta, SignMatrix, SparseDelta, StoredFactors,
};
use crate::error::{Error, Result};
use crate::linalg::LowRankFactors;

pub const MAGIC: &[u8; 4] = b"DQR1";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE_LEN: usize = 4 + 4 + 8;

/// Row-major, eight signs per byte, most significant bit first; the final
/// byte is zero-padded.
pub fn pack_signs(signs: &SignMatrix) -> Vec<u8> {
    let mut out = vec![0u8; signs.len().div_ceil(8)];
    for (i, &positive) in signs.as_slice().iter().enumerate() {
        if positive {
            out[i / 8] |= 0x80 >> (i % 8);
        }
    }
    out
}

pub fn unpack_signs(bytes: &[u8], rows: usize, cols: usize) -> Result<SignMatrix> {
    let len = rows * cols;
    if bytes.len() != len.div_ceil(8) {
        return Err(Error::corrupt_entry(
            "<signs>",
            format!("{} bytes cannot hold exactly {len} signs", bytes.len()),
        ));
    }
    if !len.is_multiple_of(8) {
        let used = (len % 8) as u32;
        if bytes[bytes.len() - 1] & (0xFFu8 >> used) != 0 {
            return Err(Error::corrupt_entry("<signs>", "padding bits are not zero"));
        }
    }
    let positive = (0..len).map(|i| bytes[i / 8] & (0x80 >> (i % 8)) != 0).collect();
    SignMatrix::new(rows, cols, positive)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: EntryKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    /// Factor precision for low-rank kinds, storage dtype for passthroughs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dtype: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nnz: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<PassthroughSource>,
    pub offsets: [u64; 2],
    pub crc32: u32,
    pub stored_bits: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_sq_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub tool_version: String,
    pub method: Method,
    pub config: CompressionConfig,
    pub base_fingerprint: String,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn model_params(&self) -> u64 {
        self.entries
            .iter()
            .map(|e| e.shape.iter().product::<usize>() as u64)
            .sum()
    }

    pub fn stored_bits(&self) -> u64 {
        self.entries.iter().map(|e| e.stored_bits).sum()
    }
}

#[derive(Debug, Clone)]
pub struct ContainerMeta {
    pub tool_version: String,
    pub config: CompressionConfig,
    pub base_fingerprint: String,
}

impl ContainerMeta {
    pub fn new(config: CompressionConfig, base_fingerprint: impl Into<String>) -> Self {
        ContainerMeta {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            base_fingerprint: base_fingerprint.into(),
        }
    }
}

fn matrix_dims(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [len] => (1, *len),
        [rows, rest @ ..] => (*rows, rest.iter().product()),
    }
}

fn factor_bytes(n: usize, m: usize, rank: usize, precision: FactorPrecision) -> usize {
    (n * rank + rank + rank * m) * (precision.bits() as usize / 8)
}

/// Serialized blob size in bytes.
pub fn payload_len(payload: &EntryPayload) -> usize {
    let sign_bytes = |q: &QuantizedDelta| q.signs.len().div_ceil(8);
    let factors = |f: &StoredFactors| factor_bytes(f.factors.rows(), f.factors.cols(), f.factors.rank(), f.precision);
    match payload {
        EntryPayload::Dqrelo { quant, factors: f } => 4 + sign_bytes(quant) + factors(f),
        EntryPayload::LowRank(f) => factors(f),
        EntryPayload::OneBit(quant) => 4 + sign_bytes(quant),
        EntryPayload::Sparse(s) => s.nnz() * 6,
        EntryPayload::Passthrough { record, .. } => record.data().len(),
    }
}

fn precision_name(p: FactorPrecision) -> &'static str {
    match p {
        FactorPrecision::F16 => "F16",
        FactorPrecision::F32 => "F32",
    }
}

fn parse_precision(name: &str, s: Option<&str>) -> Result<FactorPrecision> {
    match s {
        Some("F16") => Ok(FactorPrecision::F16),
        Some("F32") => Ok(FactorPrecision::F32),
        other => Err(Error::corrupt_entry(name, format!("unknown factor dtype {other:?}"))),
    }
}

fn put_values(out: &mut Vec<u8>, values: impl Iterator<Item = f32>, precision: FactorPrecision) {
    match precision {
        FactorPrecision::F16 => values.for_each(|v| out.extend_from_slice(&f16::from_f32(v).to_le_bytes())),
        FactorPrecision::F32 => values.for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
}

fn encode_factors(out: &mut Vec<u8>, f: &StoredFactors) {
    let fac = &f.factors;
    let u_rows = (0..fac.u.nrows()).flat_map(|i| fac.u.row(i).iter().copied().collect::<Vec<_>>());
    put_values(out, u_rows, f.precision);
    put_values(out, fac.sigma.iter().copied(), f.precision);
    let vt_rows = (0..fac.vt.nrows()).flat_map(|i| fac.vt.row(i).iter().copied().collect::<Vec<_>>());
    put_values(out, vt_rows, f.precision);
}

pub fn encode_payload(payload: &EntryPayload) -> Vec<u8> {
    let mut out = Vec::with_capacity(payload_len(payload));
    match payload {
        EntryPayload::Dqrelo { quant, factors } => {
            out.extend_from_slice(&quant.alpha.to_le_bytes());
            out.extend_from_slice(&pack_signs(&quant.signs));
            encode_factors(&mut out, factors);
        }
        EntryPayload::LowRank(factors) => encode_factors(&mut out, factors),
        EntryPayload::OneBit(quant) => {
            out.extend_from_slice(&quant.alpha.to_le_bytes());
            out.extend_from_slice(&pack_signs(&quant.signs));
        }
        EntryPayload::Sparse(s) => {
            for (i, v) in &s.entries {
                out.extend_from_slice(&i.to_le_bytes());
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        EntryPayload::Passthrough { record, .. } => out.extend_from_slice(record.data()),
    }
    out
}

fn manifest_entry(entry: &CompressedEntry, offsets: [u64; 2], crc32: u32) -> ManifestEntry {
    let p = &entry.payload;
    let (dtype, source) = match p {
        EntryPayload::Passthrough { record, source } => (Some(record.dtype().as_str().to_string()), Some(*source)),
        _ => (p.factors().map(|f| precision_name(f.precision).to_string()), None),
    };
    ManifestEntry {
        name: entry.name.clone(),
        shape: entry.shape.clone(),
        kind: entry.kind(),
        alpha: p.quant().map(|q| q.alpha),
        rank: p.factors().map(|f| f.factors.rank()),
        dtype,
        nnz: match p {
            EntryPayload::Sparse(s) => Some(s.nnz()),
            _ => None,
        },
        source,
        offsets,
        crc32,
        stored_bits: entry.stored_bits,
        predicted_sq_error: entry.predicted_sq_error,
    }
}

pub fn container_to_bytes(meta: &ContainerMeta, entries: &[CompressedEntry]) -> Vec<u8> {
    let mut payload = Vec::new();
    let mut records = Vec::with_capacity(entries.len());
    for entry in entries {
        let blob = encode_payload(&entry.payload);
        let start = payload.len() as u64;
        payload.extend_from_slice(&blob);
        records.push(manifest_entry(
            entry,
            [start, payload.len() as u64],
            crc32fast::hash(&blob),
        ));
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        tool_version: meta.tool_version.clone(),
        method: meta.config.method,
        config: meta.config.clone(),
        base_fingerprint: meta.base_fingerprint.clone(),
        entries: records,
    };
    let manifest = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(PREAMBLE_LEN + manifest.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&payload);
    out
}

pub fn write_container(path: impl AsRef<Path>, meta: &ContainerMeta, entries: &[CompressedEntry]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, container_to_bytes(meta, entries)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct Container {
    pub manifest: Manifest,
    header_len: usize,
    payload: Vec<u8>,
}

/// Blob size implied by the manifest record alone.
fn expected_len(e: &ManifestEntry) -> Result<usize> {
    let (n, m) = matrix_dims(&e.shape);
    let missing = |field: &str| Error::corrupt_entry(&e.name, format!("{} entry lacks `{field}`", e.kind.as_str()));
    let signs = 4 + (n * m).div_ceil(8);
    Ok(match e.kind {
        EntryKind::Dqrelo | EntryKind::LowRank => {
            let rank = e.rank.ok_or_else(|| missing("rank"))?;
            let precision = parse_precision(&e.name, e.dtype.as_deref())?;
            let factors = factor_bytes(n, m, rank, precision);
            if e.kind == EntryKind::Dqrelo {
                signs + factors
            } else {
                factors
            }
        }
        EntryKind::OneBit => signs,
        EntryKind::SparseVector => e.nnz.ok_or_else(|| missing("nnz"))? * 6,
        EntryKind::RawPassthrough => {
            let name = e.dtype.as_deref().ok_or_else(|| missing("dtype"))?;
            let dtype = DType::parse(name).ok_or_else(|| Error::corrupt_entry(&e.name, format!("dtype {name}")))?;
            e.shape.iter().product::<usize>() * dtype.size_bytes()
        }
    })
}

impl Container {
    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        if bytes.len() < PREAMBLE_LEN {
            return Err(Error::Format(format!("container is only {} bytes", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format(format!("bad magic {:?}, expected \"DQR1\"", &bytes[..4])));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        if manifest_len > (bytes.len() - PREAMBLE_LEN) as u64 {
            return Err(Error::Format("manifest runs past the end of the file".into()));
        }
        let header_len = PREAMBLE_LEN + manifest_len as usize;
        let manifest: Manifest = serde_json::from_slice(&bytes[PREAMBLE_LEN..header_len])
            .map_err(|e| Error::Format(format!("manifest is not valid: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "manifest declares version {}",
                manifest.format_version
            )));
        }
        let payload_len = (bytes.len() - header_len) as u64;

        let mut seen = HashSet::new();
        let mut ranges = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            if !seen.insert(e.name.as_str()) {
                return Err(Error::corrupt_entry(&e.name, "duplicate entry name"));
            }
            let [start, end] = e.offsets;
            if start > end || end > payload_len {
                return Err(Error::corrupt_entry(
                    &e.name,
                    format!("blob {start}..{end} lies outside the {payload_len}-byte payload"),
                ));
            }
            if (end - start) as usize != expected_len(e)? {
                return Err(Error::corrupt_entry(
                    &e.name,
                    "blob size disagrees with its manifest record",
                ));
            }
            if e.stored_bits != 8 * (end - start) {
                return Err(Error::corrupt_entry(&e.name, "stored_bits disagrees with blob size"));
            }
            let blob = &bytes[header_len + start as usize..header_len + end as usize];
            if crc32fast::hash(blob) != e.crc32 {
                return Err(Error::corrupt_entry(&e.name, "checksum mismatch"));
            }
            ranges.push((start, end, e.name.as_str()));
        }
        ranges.sort();
        for w in ranges.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(Error::corrupt_entry(w[1].2, format!("blob overlaps `{}`", w[0].2)));
            }
        }
        let used = ranges.iter().map(|r| r.1).max().unwrap_or(0);
        if used != payload_len {
            return Err(Error::Format(format!(
                "{} trailing bytes after the last blob",
                payload_len - used
            )));
        }
        let mut payload = bytes;
        payload.drain(..header_len);
        Ok(Container {
            manifest,
            header_len,
            payload,
        })
    }

    pub fn header_len(&self) -> usize {
        self.header_len
    }

    pub fn payload_len(&self) -> usize {
        self.payload.len()
    }

    pub fn file_len(&self) -> usize {
        self.header_len + self.payload.len()
    }

    pub fn len(&self) -> usize {
        self.manifest.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = Result<CompressedEntry>> + '_ {
        self.manifest.entries.iter().map(|e| self.decode(e))
    }

    pub fn entry(&self, name: &str) -> Option<Result<CompressedEntry>> {
        self.manifest
            .entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| self.decode(e))
    }

    fn decode(&self, e: &ManifestEntry) -> Result<CompressedEntry> {
        let blob = &self.payload[e.offsets[0] as usize..e.offsets[1] as usize];
        let payload = decode_payload(e, blob)?;
        let entry = CompressedEntry::new(e.name.clone(), e.shape.clone(), payload, e.predicted_sq_error);
        debug_assert_eq!(entry.stored_bits, e.stored_bits);
        Ok(entry)
    }
}

fn read_values(bytes: &[u8], precision: FactorPrecision) -> Vec<f32> {
    match precision {
        FactorPrecision::F16 => DType::F16.decode(bytes),
        FactorPrecision::F32 => DType::F32.decode(bytes),
    }
}

fn decode_factors(e: &ManifestEntry, bytes: &[u8], n: usize, m: usize) -> Result<StoredFactors> {
    let rank = e.rank.unwrap_or(0);
    let precision = parse_precision(&e.name, e.dtype.as_deref())?;
    let width = precision.bits() as usize / 8;
    let (u_bytes, rest) = bytes.split_at(n * rank * width);
    let (s_bytes, vt_bytes) = rest.split_at(rank * width);
    Ok(StoredFactors {
        precision,
        factors: LowRankFactors {
            u: DMatrix::from_row_slice(n, rank, &read_values(u_bytes, precision)),
            sigma: read_values(s_bytes, precision),
            vt: DMatrix::from_row_slice(rank, m, &read_values(vt_bytes, precision)),
        },
    })
}

fn decode_quant(e: &ManifestEntry, bytes: &[u8], n: usize, m: usize) -> Result<QuantizedDelta> {
    let alpha = f32::from_le_bytes(bytes[..4].try_into().unwrap());
    if e.alpha.map(f32::to_bits) != Some(alpha.to_bits()) {
        return Err(Error::corrupt_entry(&e.name, "alpha in blob disagrees with manifest"));
    }
    let signs = unpack_signs(&bytes[4..], n, m).map_err(|err| match err {
        Error::CorruptEntry { reason, .. } => Error::corrupt_entry(&e.name, reason),
        other => other,
    })?;
    Ok(QuantizedDelta { signs, alpha })
}

fn decode_payload(e: &ManifestEntry, blob: &[u8]) -> Result<EntryPayload> {
    let (n, m) = matrix_dims(&e.shape);
    let sign_len = 4 + (n * m).div_ceil(8);
    Ok(match e.kind {
        EntryKind::Dqrelo => EntryPayload::Dqrelo {
            quant: decode_quant(e, &blob[..sign_len], n, m)?,
            factors: decode_factors(e, &blob[sign_len..], n, m)?,
        },
        EntryKind::LowRank => EntryPayload::LowRank(decode_factors(e, blob, n, m)?),
        EntryKind::OneBit => EntryPayload::OneBit(decode_quant(e, blob, n, m)?),
        EntryKind::SparseVector => {
            let numel: usize = e.shape.iter().product();
            let mut entries = Vec::with_capacity(blob.len() / 6);
            for chunk in blob.chunks_exact(6) {
                let idx = u32::from_le_bytes(chunk[..4].try_into().unwrap());
                if idx as usize >= numel || entries.last().is_some_and(|(prev, _)| *prev >= idx) {
                    return Err(Error::corrupt_entry(
                        &e.name,
                        format!("sparse index {idx} is out of order or range"),
                    ));
                }
                entries.push((idx, f16::from_le_bytes([chunk[4], chunk[5]])));
            }
            EntryPayload::Sparse(SparseDelta { len: numel, entries })
        }
        EntryKind::RawPassthrough => {
            let dtype = DType::parse(e.dtype.as_deref().unwrap_or_default()).expect("validated on read");
            let source = e
                .source
                .ok_or_else(|| Error::corrupt_entry(&e.name, "passthrough entry lacks `source`"))?;
            EntryPayload::Passthrough {
                source,
                record: TensorRecord::new(e.shape.clone(), dtype, blob.to_vec())
                    .map_err(|err| Error::corrupt_entry(&e.name, err.to_string()))?,
            }
        }
    })
}

pub fn read_container(path: impl AsRef<Path>) -> Result<Container> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Container::from_bytes(bytes)
}
