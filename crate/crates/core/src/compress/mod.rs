//! Delta compression: sign quantization plus residual low-rank factors, the
//! baselines it is compared against, and whole-archive orchestration.

pub mod config;
pub mod quant;
pub mod select;
pub mod sparse;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::archive::{DType, TensorArchive, TensorRecord, WorkingView};
use crate::container;
use crate::error::{Error, Result};
use crate::fraction::Fraction;
use crate::linalg::{self, LowRankFactors, Matrix};
use crate::stats::delta_of;

pub use config::{CompressionConfig, FactorPrecision, LayerRange, Method};
pub use quant::{rank_for_budget, residual, sign_quantize, BudgetWarning, QuantizedDelta, RankChoice, SignMatrix};
pub use select::{count_layers, layer_index_of, select_targets, Selection};
pub use sparse::SparseDelta;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EntryKind {
    #[serde(rename = "dqrelo")]
    Dqrelo,
    #[serde(rename = "lowrank")]
    LowRank,
    #[serde(rename = "onebit")]
    OneBit,
    #[serde(rename = "sparse_vector")]
    SparseVector,
    #[serde(rename = "raw_passthrough")]
    RawPassthrough,
}

impl EntryKind {
    pub const ALL: [EntryKind; 5] = [
        EntryKind::Dqrelo,
        EntryKind::LowRank,
        EntryKind::OneBit,
        EntryKind::SparseVector,
        EntryKind::RawPassthrough,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EntryKind::Dqrelo => "dqrelo",
            EntryKind::LowRank => "lowrank",
            EntryKind::OneBit => "onebit",
            EntryKind::SparseVector => "sparse_vector",
            EntryKind::RawPassthrough => "raw_passthrough",
        }
    }
}

/// Low-rank factors whose values are already rounded to `precision`.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredFactors {
    pub precision: FactorPrecision,
    pub factors: LowRankFactors,
}

impl StoredFactors {
    pub fn new(factors: &LowRankFactors, precision: FactorPrecision) -> Result<Self> {
        let rounded = factors.map_values(|v| precision.round(v));
        if rounded
            .u
            .iter()
            .chain(&rounded.sigma)
            .chain(rounded.vt.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::Numeric("low-rank factor overflows its storage precision".into()));
        }
        Ok(StoredFactors {
            precision,
            factors: rounded,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PassthroughSource {
    /// Float16 copy of `finetuned − base`.
    Delta,
    /// The fine-tuned tensor itself (no usable base counterpart).
    Absolute,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EntryPayload {
    Dqrelo {
        quant: QuantizedDelta,
        factors: StoredFactors,
    },
    LowRank(StoredFactors),
    OneBit(QuantizedDelta),
    Sparse(SparseDelta),
    Passthrough {
        source: PassthroughSource,
        record: TensorRecord,
    },
}

impl EntryPayload {
    pub fn kind(&self) -> EntryKind {
        match self {
            EntryPayload::Dqrelo { .. } => EntryKind::Dqrelo,
            EntryPayload::LowRank(_) => EntryKind::LowRank,
            EntryPayload::OneBit(_) => EntryKind::OneBit,
            EntryPayload::Sparse(_) => EntryKind::SparseVector,
            EntryPayload::Passthrough { .. } => EntryKind::RawPassthrough,
        }
    }

    pub fn quant(&self) -> Option<&QuantizedDelta> {
        match self {
            EntryPayload::Dqrelo { quant, .. } | EntryPayload::OneBit(quant) => Some(quant),
            _ => None,
        }
    }

    pub fn factors(&self) -> Option<&StoredFactors> {
        match self {
            EntryPayload::Dqrelo { factors, .. } | EntryPayload::LowRank(factors) => Some(factors),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedEntry {
    pub name: String,
    /// Original tensor shape.
    pub shape: Vec<usize>,
    pub payload: EntryPayload,
    /// Serialized payload size in bits.
    pub stored_bits: u64,
    /// Expected ‖Δ − Δ̂‖²_F before storage rounding, when known.
    pub predicted_sq_error: Option<f64>,
}

impl CompressedEntry {
    pub fn new(
        name: impl Into<String>,
        shape: Vec<usize>,
        payload: EntryPayload,
        predicted_sq_error: Option<f64>,
    ) -> Self {
        let stored_bits = 8 * container::payload_len(&payload) as u64;
        CompressedEntry {
            name: name.into(),
            shape,
            payload,
            stored_bits,
            predicted_sq_error,
        }
    }

    pub fn kind(&self) -> EntryKind {
        self.payload.kind()
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Result of compressing one tensor's delta.
#[derive(Debug, Clone)]
pub struct Compressed {
    pub payload: EntryPayload,
    pub predicted_sq_error: f64,
    pub warning: Option<BudgetWarning>,
}

fn tensor_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let salt = crc32fast::hash(name.as_bytes()) as u64;
    ChaCha8Rng::seed_from_u64(seed ^ salt.rotate_left(32) ^ salt)
}

fn low_rank(target: &Matrix, rank: usize, precision: FactorPrecision) -> Result<(StoredFactors, f64)> {
    let factors = linalg::truncated_svd(target, rank)?;
    let captured: f64 = factors.sigma.iter().map(|&s| (s as f64) * (s as f64)).sum();
    let tail = (linalg::frobenius_norm_sq(target)? - captured).max(0.0);
    Ok((StoredFactors::new(&factors, precision)?, tail))
}

fn row_major(m: &Matrix) -> Vec<f32> {
    m.transpose().as_slice().to_vec()
}

/// Compress a 2-D delta according to `cfg.method`. `name` only salts the
/// random stream used by `random_prune`.
pub fn compress_matrix(delta: &Matrix, cfg: &CompressionConfig, name: &str) -> Result<Compressed> {
    cfg.validate()?;
    let (n, m) = delta.shape();
    let total = cfg.total_rho()?;
    let mut warning = None;
    let (payload, predicted_sq_error) = match cfg.method {
        Method::Dqrelo => {
            let quant = sign_quantize(delta)?;
            let resid = residual(delta, &quant)?;
            let choice = rank_for_budget(n, m, cfg.rho1);
            warning = choice.warning;
            let (factors, tail) = low_rank(&resid, choice.rank, cfg.factor_precision)?;
            (EntryPayload::Dqrelo { quant, factors }, tail)
        }
        Method::SvdOnly => {
            let choice = rank_for_budget(n, m, total);
            warning = choice.warning;
            let (factors, tail) = low_rank(delta, choice.rank, cfg.factor_precision)?;
            (EntryPayload::LowRank(factors), tail)
        }
        Method::OnebitOnly => {
            let quant = sign_quantize(delta)?;
            let err = linalg::frobenius_norm_sq(&residual(delta, &quant)?)?;
            (EntryPayload::OneBit(quant), err)
        }
        Method::MagnitudePrune => {
            let k = total.ceil_mul((n * m) as u64) as usize;
            let (sparse, dropped) = sparse::top_k_by_magnitude(&row_major(delta), k)?;
            (EntryPayload::Sparse(sparse), dropped)
        }
        Method::RandomPrune => {
            let k = total.ceil_mul((n * m) as u64) as usize;
            let mut rng = tensor_rng(cfg.seed, name);
            let (sparse, dropped) = sparse::random_k(&row_major(delta), k, &mut rng)?;
            (EntryPayload::Sparse(sparse), dropped)
        }
    };
    Ok(Compressed {
        payload,
        predicted_sq_error,
        warning,
    })
}

/// Keep the top `ceil(ρ·len)` entries by magnitude as a sparse delta.
pub fn compress_vector(delta: &[f32], rho: Fraction) -> Result<Compressed> {
    if delta.is_empty() {
        return Err(Error::EmptyInput("vector delta has no elements".into()));
    }
    let k = rho.ceil_mul(delta.len() as u64) as usize;
    let (sparse, dropped) = sparse::top_k_by_magnitude(delta, k)?;
    Ok(Compressed {
        payload: EntryPayload::Sparse(sparse),
        predicted_sq_error: dropped,
        warning: None,
    })
}

fn matrix_dims(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [len] => (1, *len),
        [rows, rest @ ..] => (*rows, rest.iter().product()),
    }
}

fn check_factor_shape(entry: &CompressedEntry, factors: &StoredFactors, n: usize, m: usize) -> Result<()> {
    let f = &factors.factors;
    if f.rows() != n || f.cols() != m || f.u.ncols() != f.rank() || f.vt.nrows() != f.rank() {
        return Err(Error::corrupt_entry(
            &entry.name,
            format!(
                "factors U {:?} / Vt {:?} do not fit a {n}x{m} tensor",
                f.u.shape(),
                f.vt.shape()
            ),
        ));
    }
    Ok(())
}

fn check_signs(entry: &CompressedEntry, quant: &QuantizedDelta, n: usize, m: usize) -> Result<()> {
    if quant.signs.rows() != n || quant.signs.cols() != m {
        return Err(Error::corrupt_entry(
            &entry.name,
            format!("{} signs for a {n}x{m} tensor", quant.signs.len()),
        ));
    }
    Ok(())
}

/// Dense reconstruction in row-major order: Δ̂ for delta kinds, the raw
/// tensor for absolute passthroughs.
pub fn decompress_entry(entry: &CompressedEntry) -> Result<Vec<f32>> {
    let (n, m) = matrix_dims(&entry.shape);
    let numel = entry.numel();
    let values = match &entry.payload {
        EntryPayload::Dqrelo { quant, factors } => {
            check_signs(entry, quant, n, m)?;
            check_factor_shape(entry, factors, n, m)?;
            let dense = quant.dequantize() + linalg::assemble(&factors.factors)?;
            row_major(&dense)
        }
        EntryPayload::LowRank(factors) => {
            check_factor_shape(entry, factors, n, m)?;
            row_major(&linalg::assemble(&factors.factors)?)
        }
        EntryPayload::OneBit(quant) => {
            check_signs(entry, quant, n, m)?;
            row_major(&quant.dequantize())
        }
        EntryPayload::Sparse(sparse) => {
            if sparse.len != numel || sparse.entries.iter().any(|(i, _)| *i as usize >= numel) {
                return Err(Error::corrupt_entry(&entry.name, "sparse indices exceed the tensor"));
            }
            sparse.densify()
        }
        EntryPayload::Passthrough { record, source } => {
            if *source == PassthroughSource::Delta && record.shape() != entry.shape.as_slice() {
                return Err(Error::corrupt_entry(
                    &entry.name,
                    "passthrough shape disagrees with entry",
                ));
            }
            record.to_f32_vec()
        }
    };
    if values.len() != numel && !matches!(entry.payload, EntryPayload::Passthrough { .. }) {
        return Err(Error::corrupt_entry(&entry.name, "decoded size disagrees with shape"));
    }
    Ok(values)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StorageReport {
    /// Stored bits over the bits of an uncompressed delta.
    pub achieved_rho: f64,
    /// `(1 + ρK)·M`, in parameter equivalents.
    pub projected_total: f64,
}

pub fn storage_accounting(
    entries: &[CompressedEntry],
    model_params: u64,
    bits: u32,
    num_finetuned: u64,
) -> StorageReport {
    let stored: u64 = entries.iter().map(|e| e.stored_bits).sum();
    let denom = model_params as f64 * bits as f64;
    let achieved_rho = if denom > 0.0 { stored as f64 / denom } else { 0.0 };
    StorageReport {
        achieved_rho,
        projected_total: (1.0 + achieved_rho * num_finetuned as f64) * model_params as f64,
    }
}

#[derive(Debug, Clone, Default)]
pub struct CompressionOutput {
    /// Sorted by tensor name.
    pub entries: Vec<CompressedEntry>,
    pub warnings: Vec<String>,
    /// Fine-tuned tensors with no same-shaped base tensor (stored verbatim).
    pub unmatched: Vec<String>,
    /// Base tensors absent from the fine-tuned archive (left to the base).
    pub base_only: Vec<String>,
}

impl CompressionOutput {
    pub fn model_params(&self) -> u64 {
        self.entries.iter().map(|e| e.numel() as u64).sum()
    }

    pub fn count(&self, kind: EntryKind) -> usize {
        self.entries.iter().filter(|e| e.kind() == kind).count()
    }
}

enum Work<'a> {
    Verbatim(&'a TensorRecord),
    Delta {
        base: &'a TensorRecord,
        ft: &'a TensorRecord,
        compress: bool,
    },
}

fn delta_passthrough(values: &[f32], shape: &[usize], name: &str) -> Result<EntryPayload> {
    for v in values {
        sparse::to_f16(*v, &format!("passthrough delta `{name}`"))?;
    }
    Ok(EntryPayload::Passthrough {
        source: PassthroughSource::Delta,
        record: TensorRecord::from_f32(shape.to_vec(), DType::F16, values)?,
    })
}

fn compress_one(name: &str, work: Work<'_>, cfg: &CompressionConfig) -> Result<(CompressedEntry, Option<String>)> {
    match work {
        Work::Verbatim(record) => {
            let payload = EntryPayload::Passthrough {
                source: PassthroughSource::Absolute,
                record: record.clone(),
            };
            Ok((CompressedEntry::new(name, record.shape().to_vec(), payload, None), None))
        }
        Work::Delta { base, ft, compress } => {
            let delta = delta_of(name, base, ft);
            let shape = delta.shape.clone();
            if !compress {
                let values = delta.values.to_row_major();
                let payload = delta_passthrough(&values, &shape, name)?;
                return Ok((CompressedEntry::new(name, shape, payload, Some(0.0)), None));
            }
            let out = match &delta.values {
                WorkingView::Vector(v) => compress_vector(v, cfg.vector_ratio()?)?,
                WorkingView::Matrix { values, .. } => compress_matrix(values, cfg, name)?,
            };
            let warning = out.warning.map(|w| format!("{name}: {w}"));
            Ok((
                CompressedEntry::new(name, shape, out.payload, Some(out.predicted_sq_error)),
                warning,
            ))
        }
    }
}

/// Compress every fine-tuned tensor against `base`.
///
/// Shared, same-shaped tensors selected by `cfg` are compressed; unselected
/// ones become float16 delta passthroughs; fine-tuned tensors without a
/// matching base tensor are stored verbatim.
pub fn compress_archives(
    base: &TensorArchive,
    finetuned: &TensorArchive,
    cfg: &CompressionConfig,
) -> Result<CompressionOutput> {
    cfg.validate()?;
    let num_layers = count_layers(finetuned.names());
    let selection = select_targets(finetuned.names(), cfg, layer_index_of, num_layers)?;
    let selected: std::collections::HashSet<&str> = selection.compress.iter().map(String::as_str).collect();

    let mut unmatched = Vec::new();
    let work: Vec<(&str, Work<'_>)> = finetuned
        .iter()
        .map(|(name, ft)| match base.get(name) {
            Some(b) if b.shape() == ft.shape() => (
                name,
                Work::Delta {
                    base: b,
                    ft,
                    compress: selected.contains(name),
                },
            ),
            _ => {
                unmatched.push(name.to_string());
                (name, Work::Verbatim(ft))
            }
        })
        .collect();

    let results: Vec<(CompressedEntry, Option<String>)> = work
        .into_par_iter()
        .map(|(name, w)| compress_one(name, w, cfg))
        .collect::<Result<_>>()?;

    let mut entries = Vec::with_capacity(results.len());
    let mut warnings = Vec::new();
    for (entry, warning) in results {
        entries.push(entry);
        warnings.extend(warning);
    }
    entries.sort_by(|a, b| a.name.cmp(&b.name));
    warnings.sort();
    let base_only = base
        .names()
        .filter(|n| !finetuned.contains(n))
        .map(str::to_string)
        .collect();
    Ok(CompressionOutput {
        entries,
        warnings,
        unmatched,
        base_only,
    })
}
