//! Reference implementations used as oracles. None of these call into the
//! library's numeric code.

#![allow(dead_code)]

use std::collections::BTreeMap;

use dqrelo_core::linalg::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{StandardNormal, StudentT};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Matrix {
    Matrix::from_fn(n, m, |_, _| rng.sample::<f32, _>(StandardNormal))
}

/// Student-t with 3 degrees of freedom.
pub fn heavy_tailed(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Matrix {
    let t = StudentT::new(3.0f32).unwrap();
    Matrix::from_fn(n, m, |_, _| rng.sample(t))
}

/// Row-major f64 copy.
pub fn rows_f64(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)] as f64).collect())
        .collect()
}

/// One-sided Jacobi: orthogonalise columns until every pair is orthogonal
/// to machine precision, then read singular values off the column norms.
/// Returned in descending order.
pub fn jacobi_singular_values(a: &[Vec<f64>]) -> Vec<f64> {
    let n = a.len();
    let m = a.first().map_or(0, Vec::len);
    // Work on the orientation with more rows than columns.
    let mut cols: Vec<Vec<f64>> = if n >= m {
        (0..m).map(|j| (0..n).map(|i| a[i][j]).collect()).collect()
    } else {
        a.to_vec()
    };
    let k = cols.len();
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..k {
            for q in p + 1..k {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for (x, y) in cols[p].iter().zip(&cols[q]) {
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (left, right) = cols.split_at_mut(q);
                for (x, y) in left[p].iter_mut().zip(right[0].iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    sv
}

pub fn tail_energy(sv: &[f64], r: usize) -> f64 {
    sv.iter().skip(r).map(|s| s * s).sum()
}

pub fn frob_sq(a: &[Vec<f64>]) -> f64 {
    a.iter().flatten().map(|v| v * v).sum()
}

/// Sign quantization written out directly: α = mean|Δ|, Sign(0) = −1.
pub fn oracle_residual(delta: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>) {
    let count = delta.iter().map(Vec::len).sum::<usize>() as f64;
    let alpha = delta.iter().flatten().map(|v| v.abs()).sum::<f64>() / count;
    let resid = delta
        .iter()
        .map(|row| {
            row.iter()
                .map(|&v| v - alpha * if v > 0.0 { 1.0 } else { -1.0 })
                .collect()
        })
        .collect();
    (alpha, resid)
}

/// Smallest r with r(n+m) ≥ ρ·n·m, clamped to [1, min(n, m)], by search.
pub fn oracle_rank(n: usize, m: usize, num: u64, den: u64) -> usize {
    let target = num as u128 * n as u128 * m as u128;
    let mut r = 0usize;
    while ((r as u128) * (n + m) as u128 * den as u128) < target {
        r += 1;
    }
    r.clamp(1, n.min(m))
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

/// A tensor as decoded by [`read_archive_bytes`].
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

/// Minimal standalone reader for the tensor archive layout.
pub fn read_archive_bytes(bytes: &[u8]) -> BTreeMap<String, RawTensor> {
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + header_len]).unwrap();
    let data = &bytes[8 + header_len..];
    let mut out = BTreeMap::new();
    for (name, info) in header.as_object().unwrap() {
        if name == "__metadata__" {
            continue;
        }
        let dtype = info["dtype"].as_str().unwrap().to_string();
        let shape: Vec<usize> = info["shape"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_u64().unwrap() as usize)
            .collect();
        let off: Vec<usize> = info["data_offsets"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_u64().unwrap() as usize)
            .collect();
        let raw = &data[off[0]..off[1]];
        let values = match dtype.as_str() {
            "F32" => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            "F16" => raw
                .chunks_exact(2)
                .map(|c| half::f16::from_bits(u16::from_le_bytes([c[0], c[1]])).to_f32())
                .collect(),
            "BF16" => raw
                .chunks_exact(2)
                .map(|c| half::bf16::from_bits(u16::from_le_bytes([c[0], c[1]])).to_f32())
                .collect(),
            other => panic!("unexpected dtype {other}"),
        };
        out.insert(name.clone(), RawTensor { dtype, shape, values });
    }
    out
}
