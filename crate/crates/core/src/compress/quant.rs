//! One-bit sign quantization with a single Frobenius-optimal scale.

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Row-major sign pattern; `true` is +1, `false` is −1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignMatrix {
    rows: usize,
    cols: usize,
    positive: Vec<bool>,
}

impl SignMatrix {
    pub fn new(rows: usize, cols: usize, positive: Vec<bool>) -> Result<Self> {
        if positive.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} signs for a {rows}x{cols} matrix",
                positive.len()
            )));
        }
        Ok(SignMatrix { rows, cols, positive })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.positive.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positive.is_empty()
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.positive[row * self.cols + col]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.positive
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedDelta {
    pub signs: SignMatrix,
    pub alpha: f32,
}

impl QuantizedDelta {
    /// `alpha · Sign`, as a dense matrix.
    pub fn dequantize(&self) -> Matrix {
        let (n, m) = (self.signs.rows, self.signs.cols);
        Matrix::from_fn(n, m, |i, j| if self.signs.get(i, j) { self.alpha } else { -self.alpha })
    }
}

/// Sign(Δ) with zero mapped to −1, and α = mean |Δ|.
pub fn sign_quantize(delta: &Matrix) -> Result<QuantizedDelta> {
    if delta.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("delta passed to sign_quantize".into()));
    }
    let (n, m) = delta.shape();
    let mut positive = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            positive.push(delta[(i, j)] > 0.0);
        }
    }
    let sum_abs: f64 = delta.iter().map(|v| v.abs() as f64).sum();
    let alpha = if delta.is_empty() {
        0.0
    } else {
        (sum_abs / delta.len() as f64) as f32
    };
    Ok(QuantizedDelta {
        signs: SignMatrix::new(n, m, positive)?,
        alpha,
    })
}

/// `Δ − α · Sign(Δ)`.
pub fn residual(delta: &Matrix, quant: &QuantizedDelta) -> Result<Matrix> {
    if delta.shape() != (quant.signs.rows, quant.signs.cols) {
        return Err(Error::Shape(format!(
            "delta {:?} vs signs {}x{}",
            delta.shape(),
            quant.signs.rows,
            quant.signs.cols
        )));
    }
    Ok(Matrix::from_fn(delta.nrows(), delta.ncols(), |i, j| {
        let q = if quant.signs.get(i, j) {
            quant.alpha
        } else {
            -quant.alpha
        };
        delta[(i, j)] - q
    }))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BudgetWarning {
    pub requested: u64,
    pub clamped: usize,
}

impl std::fmt::Display for BudgetWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "rank budget {} clamped to {}", self.requested, self.clamped)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankChoice {
    pub rank: usize,
    pub warning: Option<BudgetWarning>,
}

/// `ceil(n·m·ρ / (n + m))`, clamped to `[1, min(n, m)]`.
pub fn rank_for_budget(n: usize, m: usize, rho: crate::fraction::Fraction) -> RankChoice {
    let num = n as u128 * m as u128 * rho.numer() as u128;
    let den = (n as u128 + m as u128) * rho.denom() as u128;
    let requested = num.div_ceil(den.max(1)) as u64;
    let rank = (requested as usize).clamp(1, n.min(m).max(1));
    let warning = (rank as u64 != requested).then_some(BudgetWarning {
        requested,
        clamped: rank,
    });
    RankChoice { rank, warning }
}
