//! Delta extraction and delta diagnostics (magnitude, spectrum, entropy),
//! plus the performance retention / drop metrics.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::archive::{DType, TensorArchive, WorkingView};
use crate::error::{Error, Result};
use crate::linalg;

pub const DEFAULT_ENTROPY_BINS: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeClass {
    Matrix,
    Vector,
    ReshapedMatrix,
}

impl ShapeClass {
    pub fn as_str(self) -> &'static str {
        match self {
            ShapeClass::Matrix => "matrix",
            ShapeClass::Vector => "vector",
            ShapeClass::ReshapedMatrix => "reshaped-matrix",
        }
    }
}

/// `finetuned − base` for one tensor, in f32.
#[derive(Debug, Clone)]
pub struct DeltaTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: WorkingView,
    pub original_dtype: DType,
}

impl DeltaTensor {
    pub fn shape_class(&self) -> ShapeClass {
        match &self.values {
            WorkingView::Vector(_) => ShapeClass::Vector,
            WorkingView::Matrix { reshaped: false, .. } => ShapeClass::Matrix,
            WorkingView::Matrix { reshaped: true, .. } => ShapeClass::ReshapedMatrix,
        }
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    fn scalars(&self) -> &[f32] {
        match &self.values {
            WorkingView::Vector(v) => v,
            WorkingView::Matrix { values, .. } => values.as_slice(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Alignment {
    /// Any name or shape disagreement is an error.
    Strict,
    /// Disagreeing tensors are skipped and listed.
    Relaxed,
}

#[derive(Debug, Clone)]
pub struct Extraction {
    pub deltas: Vec<DeltaTensor>,
    /// Names present in only one archive, or with differing shapes.
    pub mismatched: Vec<String>,
}

pub fn delta_of(name: &str, base: &crate::archive::TensorRecord, ft: &crate::archive::TensorRecord) -> DeltaTensor {
    let values = match (base.as_matrix(), ft.as_matrix()) {
        (WorkingView::Vector(b), WorkingView::Vector(f)) => {
            WorkingView::Vector(f.iter().zip(&b).map(|(f, b)| f - b).collect())
        }
        (WorkingView::Matrix { values: b, reshaped }, WorkingView::Matrix { values: f, .. }) => WorkingView::Matrix {
            values: f - b,
            reshaped,
        },
        _ => unreachable!("shapes were checked equal"),
    };
    DeltaTensor {
        name: name.to_string(),
        shape: ft.shape().to_vec(),
        values,
        original_dtype: ft.dtype(),
    }
}

/// One delta per tensor shared by both archives, in fine-tuned archive order.
pub fn extract_deltas(base: &TensorArchive, finetuned: &TensorArchive, mode: Alignment) -> Result<Extraction> {
    let mut mismatched: Vec<String> = Vec::new();
    let mut pairs = Vec::new();
    for (name, ft) in finetuned.iter() {
        match base.get(name) {
            Some(b) if b.shape() == ft.shape() => pairs.push((name, b, ft)),
            _ => mismatched.push(name.to_string()),
        }
    }
    mismatched.extend(base.names().filter(|n| !finetuned.contains(n)).map(str::to_string));
    if mode == Alignment::Strict && !mismatched.is_empty() {
        return Err(Error::ArchitectureMismatch { names: mismatched });
    }
    let deltas = pairs.into_par_iter().map(|(name, b, f)| delta_of(name, b, f)).collect();
    Ok(Extraction { deltas, mismatched })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorStats {
    pub mean_abs: f64,
    /// Only defined for 2-D (or folded) deltas.
    pub mean_singular_value: Option<f64>,
    pub entropy_bits: f64,
    pub numel: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaStats {
    /// Mean of |Δ| pooled over every scalar of every tensor.
    pub mean_abs: f64,
    /// Per-matrix mean singular value, averaged over matrices.
    pub mean_singular_value: Option<f64>,
    /// Per-tensor histogram entropy, averaged over tensors.
    pub entropy_bits: f64,
    pub num_bins: usize,
    pub per_tensor: BTreeMap<String, TensorStats>,
}

/// Shannon entropy (bits) of a `bins`-bin equal-width histogram over [min, max].
pub fn histogram_entropy(values: &[f32], bins: usize) -> f64 {
    if values.is_empty() || bins == 0 {
        return 0.0;
    }
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v as f64), hi.max(v as f64))
    });
    let width = hi - lo;
    if width <= 0.0 {
        return 0.0;
    }
    let mut counts = vec![0u64; bins];
    for &v in values {
        let pos = ((v as f64 - lo) / width * bins as f64).floor() as usize;
        counts[pos.min(bins - 1)] += 1;
    }
    let total = values.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.log2()
        })
        .sum()
}

fn tensor_stats(delta: &DeltaTensor, bins: usize) -> Result<TensorStats> {
    let scalars = delta.scalars();
    if scalars.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("delta `{}`", delta.name)));
    }
    let sum_abs: f64 = scalars.iter().map(|v| v.abs() as f64).sum();
    let mean_singular_value = match &delta.values {
        WorkingView::Matrix { values, .. } => {
            let sv = linalg::singular_values(values)?;
            Some(sv.iter().sum::<f64>() / sv.len() as f64)
        }
        WorkingView::Vector(_) => None,
    };
    Ok(TensorStats {
        mean_abs: sum_abs / scalars.len() as f64,
        mean_singular_value,
        entropy_bits: histogram_entropy(scalars, bins),
        numel: scalars.len(),
    })
}

pub fn compute_stats(deltas: &[DeltaTensor], num_bins: usize) -> Result<DeltaStats> {
    if deltas.is_empty() {
        return Err(Error::EmptyInput("no delta tensors to summarize".into()));
    }
    if num_bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    let computed: Vec<(String, TensorStats)> = deltas
        .par_iter()
        .map(|d| tensor_stats(d, num_bins).map(|s| (d.name.clone(), s)))
        .collect::<Result<_>>()?;
    let per_tensor: BTreeMap<String, TensorStats> = computed.into_iter().collect();

    // Reductions run in name order so results do not depend on scheduling.
    let total: usize = per_tensor.values().map(|s| s.numel).sum();
    let mean_abs = per_tensor.values().map(|s| s.mean_abs * s.numel as f64).sum::<f64>() / total as f64;
    let svs: Vec<f64> = per_tensor.values().filter_map(|s| s.mean_singular_value).collect();
    let mean_singular_value = (!svs.is_empty()).then(|| svs.iter().sum::<f64>() / svs.len() as f64);
    let entropy_bits = per_tensor.values().map(|s| s.entropy_bits).sum::<f64>() / per_tensor.len() as f64;
    Ok(DeltaStats {
        mean_abs,
        mean_singular_value,
        entropy_bits,
        num_bins,
        per_tensor,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Retention {
    pub retention: f64,
    pub drop: f64,
}

/// Fraction of the base→fine-tuned improvement kept by the compressed model.
pub fn performance_retention(base_score: f64, sft_score: f64, compressed_score: f64) -> Result<Retention> {
    if sft_score == base_score {
        return Err(Error::DegenerateBaseline(base_score));
    }
    let retention = (compressed_score - base_score) / (sft_score - base_score);
    Ok(Retention {
        retention,
        drop: 1.0 - retention,
    })
}
