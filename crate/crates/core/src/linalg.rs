//! Dense kernels: Frobenius norms, full and truncated SVD, factor assembly.
//!
//! Inputs and outputs are `f32`; decompositions run in `f64`. Matrices whose
//! smaller side is at most [`FULL_SVD_MAX_DIM`] (or whose requested rank is
//! a large fraction of it) use a full Golub–Kahan SVD. Larger ones use
//! randomized subspace iteration, stopped once the top-`r` spectrum settles.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f32>;

/// Largest `min(n, m)` handled by the full decomposition.
pub const FULL_SVD_MAX_DIM: usize = 512;

#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Matrix,
    /// Non-negative, non-increasing.
    pub singular_values: Vec<f32>,
    pub vt: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LowRankFactors {
    pub u: Matrix,
    pub sigma: Vec<f32>,
    pub vt: Matrix,
}

impl LowRankFactors {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    pub fn rows(&self) -> usize {
        self.u.nrows()
    }

    pub fn cols(&self) -> usize {
        self.vt.ncols()
    }

    /// Apply `f` to every stored value (used for storage-precision rounding).
    pub fn map_values(&self, f: impl Fn(f32) -> f32) -> LowRankFactors {
        LowRankFactors {
            u: self.u.map(&f),
            sigma: self.sigma.iter().map(|v| f(*v)).collect(),
            vt: self.vt.map(&f),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TruncationOptions {
    pub full_svd_max_dim: usize,
    /// Stop when `||σ_t − σ_{t−1}|| ≤ tol · ||σ_t||` over the top-r values.
    pub tolerance: f64,
    pub max_iterations: usize,
    pub seed: u64,
}

impl Default for TruncationOptions {
    fn default() -> Self {
        TruncationOptions {
            full_svd_max_dim: FULL_SVD_MAX_DIM,
            tolerance: 1e-6,
            max_iterations: 1000,
            seed: 0x0005_eed0_f5bd,
        }
    }
}

fn check_finite(m: &Matrix, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(what.to_string()))
    }
}

fn to_f64(m: &Matrix) -> DMatrix<f64> {
    m.map(|v| v as f64)
}

fn to_f32(m: &DMatrix<f64>) -> Matrix {
    m.map(|v| v as f32)
}

pub fn frobenius_norm_sq(m: &Matrix) -> Result<f64> {
    check_finite(m, "matrix passed to frobenius_norm_sq")?;
    Ok(m.iter().map(|&v| (v as f64) * (v as f64)).sum())
}

/// Squared Frobenius norm of `a − b`, accumulated in f64.
pub fn frobenius_distance_sq(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum())
}

fn max_sweeps(n: usize, m: usize) -> usize {
    100 * n.min(m) + 1000
}

fn full_svd_f64(a: DMatrix<f64>) -> Result<nalgebra::SVD<f64, nalgebra::Dyn, nalgebra::Dyn>> {
    let (n, m) = a.shape();
    let limit = max_sweeps(n, m);
    a.try_svd(true, true, f64::EPSILON, limit)
        .ok_or(Error::Convergence { iterations: limit })
}

/// Thin SVD: `u` is n×k, `vt` is k×m with k = min(n, m).
pub fn svd(m: &Matrix) -> Result<SvdResult> {
    check_finite(m, "matrix passed to svd")?;
    let svd = full_svd_f64(to_f64(m))?;
    Ok(SvdResult {
        u: to_f32(svd.u.as_ref().expect("u requested")),
        singular_values: svd.singular_values.iter().map(|&s| s as f32).collect(),
        vt: to_f32(svd.v_t.as_ref().expect("v_t requested")),
    })
}

/// All singular values in f64, descending.
pub fn singular_values(m: &Matrix) -> Result<Vec<f64>> {
    check_finite(m, "matrix passed to singular_values")?;
    let (n, c) = m.shape();
    let limit = max_sweeps(n, c);
    let svd = to_f64(m)
        .try_svd(false, false, f64::EPSILON, limit)
        .ok_or(Error::Convergence { iterations: limit })?;
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(sv)
}

pub fn truncated_svd(m: &Matrix, rank: usize) -> Result<LowRankFactors> {
    truncated_svd_with(m, rank, &TruncationOptions::default())
}

pub fn truncated_svd_with(m: &Matrix, rank: usize, opts: &TruncationOptions) -> Result<LowRankFactors> {
    let (n, c) = m.shape();
    let max = n.min(c);
    if rank == 0 || rank > max {
        return Err(Error::Rank { rank, max });
    }
    check_finite(m, "matrix passed to truncated_svd")?;
    let a = to_f64(m);
    let sketch = sketch_width(rank, max);
    if max <= opts.full_svd_max_dim || 2 * sketch >= max {
        let svd = full_svd_f64(a)?;
        let u = svd.u.as_ref().expect("u requested");
        let vt = svd.v_t.as_ref().expect("v_t requested");
        return Ok(LowRankFactors {
            u: to_f32(&u.columns(0, rank).into_owned()),
            sigma: svd.singular_values.iter().take(rank).map(|&s| s as f32).collect(),
            vt: to_f32(&vt.rows(0, rank).into_owned()),
        });
    }
    randomized_truncation(&a, rank, sketch, opts)
}

fn sketch_width(rank: usize, max: usize) -> usize {
    (rank + (rank / 2).max(10)).min(max)
}

fn orthonormal_basis(y: DMatrix<f64>) -> DMatrix<f64> {
    y.qr().q()
}

fn randomized_truncation(
    a: &DMatrix<f64>,
    rank: usize,
    sketch: usize,
    opts: &TruncationOptions,
) -> Result<LowRankFactors> {
    let (_, m) = a.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let omega = DMatrix::<f64>::from_fn(m, sketch, |_, _| rng.sample(StandardNormal));
    let mut q = orthonormal_basis(a * omega);
    let mut previous: Option<Vec<f64>> = None;
    let mut converged = false;

    for iteration in 0..opts.max_iterations {
        // Aᵀ Q computed as (Qᵀ A)ᵀ so the large product stays a plain gemm.
        let z = (q.transpose() * a).transpose();
        let qz = orthonormal_basis(z);
        let qr = (a * qz).qr();
        let estimate: Vec<f64> = {
            let mut sv: Vec<f64> = qr.r().singular_values().iter().copied().collect();
            sv.sort_by(|x, y| y.total_cmp(x));
            sv.truncate(rank);
            sv
        };
        q = qr.q();
        let norm = estimate.iter().map(|s| s * s).sum::<f64>().sqrt();
        if let Some(prev) = &previous {
            let change = estimate
                .iter()
                .zip(prev)
                .map(|(s, p)| (s - p) * (s - p))
                .sum::<f64>()
                .sqrt();
            if change <= opts.tolerance * norm {
                log::debug!(
                    "subspace iteration converged after {} rounds (rank {rank})",
                    iteration + 1
                );
                converged = true;
                break;
            }
        }
        if norm == 0.0 {
            converged = true;
            break;
        }
        previous = Some(estimate);
    }
    if !converged {
        return Err(Error::Convergence {
            iterations: opts.max_iterations,
        });
    }

    let b = q.transpose() * a;
    let svd = full_svd_f64(b)?;
    let ub = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let u = &q * ub.columns(0, rank);
    Ok(LowRankFactors {
        u: to_f32(&u),
        sigma: svd.singular_values.iter().take(rank).map(|&s| s as f32).collect(),
        vt: to_f32(&vt.rows(0, rank).into_owned()),
    })
}

/// `U · diag(σ) · Vᵀ`.
pub fn assemble(factors: &LowRankFactors) -> Result<Matrix> {
    let r = factors.sigma.len();
    if factors.u.ncols() != r || factors.vt.nrows() != r {
        return Err(Error::Shape(format!(
            "factors U {:?}, sigma {}, Vt {:?} disagree on rank",
            factors.u.shape(),
            r,
            factors.vt.shape()
        )));
    }
    let mut scaled = factors.u.clone();
    for (j, s) in factors.sigma.iter().enumerate() {
        scaled.column_mut(j).scale_mut(*s);
    }
    Ok(scaled * &factors.vt)
}
