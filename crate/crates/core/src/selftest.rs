//! Invariant checks on built-in synthetic matrices, for `dqrelo selftest`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::compress::{self, CompressedEntry, CompressionConfig, FactorPrecision, Method};
use crate::container::{pack_signs, unpack_signs};
use crate::error::Result;
use crate::fraction::Fraction;
use crate::linalg::{self, Matrix};
use crate::stats;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Matrix {
    Matrix::from_fn(n, m, |_, _| rng.sample::<f32, _>(StandardNormal))
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

fn alpha_optimality(rng: &mut ChaCha8Rng) -> Result<Check> {
    let d = gaussian(rng, 48, 40);
    let q = compress::sign_quantize(&d)?;
    let err_at = |alpha: f32| -> Result<f64> {
        let probe = compress::QuantizedDelta {
            signs: q.signs.clone(),
            alpha,
        };
        linalg::frobenius_norm_sq(&compress::residual(&d, &probe)?)
    };
    let best = err_at(q.alpha)?;
    let mut worst_gap = f64::INFINITY;
    for i in 0..=40 {
        let alpha = q.alpha * (0.8 + 0.4 * i as f32 / 40.0);
        worst_gap = worst_gap.min(err_at(alpha)? - best);
    }
    Ok(Check {
        name: "alpha_optimality",
        passed: worst_gap >= -1e-7 * best,
        detail: format!("min(err(a') - err(a)) = {worst_gap:.3e}"),
    })
}

fn eckart_young(rng: &mut ChaCha8Rng) -> Result<Check> {
    let m = gaussian(rng, 40, 30);
    let sv = linalg::singular_values(&m)?;
    let mut worst = 0.0f64;
    for r in [1, 4, 15] {
        let approx = linalg::assemble(&linalg::truncated_svd(&m, r)?)?;
        let err = linalg::frobenius_distance_sq(&m, &approx)?;
        let tail: f64 = sv[r..].iter().map(|s| s * s).sum();
        worst = worst.max(rel(err, tail));
    }
    Ok(Check {
        name: "eckart_young",
        passed: worst <= 1e-4,
        detail: format!("max relative deviation {worst:.3e}"),
    })
}

fn scaling_law(rng: &mut ChaCha8Rng) -> Result<Check> {
    let m = gaussian(rng, 32, 24);
    let base = linalg::frobenius_distance_sq(&m, &linalg::assemble(&linalg::truncated_svd(&m, 4)?)?)?;
    let mut worst = 0.0f64;
    for c in [2.0f32, 5.0, 10.0] {
        let scaled = &m * c;
        let err = linalg::frobenius_distance_sq(&scaled, &linalg::assemble(&linalg::truncated_svd(&scaled, 4)?)?)?;
        worst = worst.max(rel(err, (c as f64).powi(2) * base));
    }
    Ok(Check {
        name: "scaling_law",
        passed: worst <= 1e-4,
        detail: format!("max relative deviation {worst:.3e}"),
    })
}

fn rank_formula() -> Result<Check> {
    let sixteenth = Fraction::new(1, 16)?;
    let a = compress::rank_for_budget(4096, 4096, sixteenth).rank;
    let b = compress::rank_for_budget(1024, 4096, sixteenth).rank;
    Ok(Check {
        name: "rank_formula",
        passed: a == 128 && b == 52,
        detail: format!("4096x4096 -> {a}, 1024x4096 -> {b}"),
    })
}

fn error_decomposition(rng: &mut ChaCha8Rng) -> Result<Check> {
    let d = gaussian(rng, 64, 64);
    let mut cfg = CompressionConfig {
        factor_precision: FactorPrecision::F32,
        ..Default::default()
    };
    let measure = |cfg: &CompressionConfig| -> Result<f64> {
        let out = compress::compress_matrix(&d, cfg, "selftest")?;
        let entry = CompressedEntry::new("selftest", vec![64, 64], out.payload, None);
        let approx = Matrix::from_row_slice(64, 64, &compress::decompress_entry(&entry)?);
        linalg::frobenius_distance_sq(&d, &approx)
    };
    let dqrelo = measure(&cfg)?;
    cfg.method = Method::OnebitOnly;
    let onebit = measure(&cfg)?;
    let q = compress::sign_quantize(&d)?;
    let resid = compress::residual(&d, &q)?;
    let r = compress::rank_for_budget(64, 64, cfg.rho1).rank;
    let captured: f64 = linalg::singular_values(&resid)?[..r].iter().map(|s| s * s).sum();
    let deviation = rel(dqrelo, onebit - captured);
    Ok(Check {
        name: "error_decomposition",
        passed: deviation <= 1e-3 && dqrelo < onebit,
        detail: format!("dqrelo {dqrelo:.4} onebit {onebit:.4} deviation {deviation:.3e}"),
    })
}

fn sign_round_trip(rng: &mut ChaCha8Rng) -> Result<Check> {
    let mut ok = true;
    for len in [1usize, 7, 8, 9, 33, 100] {
        let bits: Vec<bool> = (0..len).map(|_| rng.random()).collect();
        let signs = compress::SignMatrix::new(1, len, bits)?;
        ok &= unpack_signs(&pack_signs(&signs), 1, len)? == signs;
    }
    Ok(Check {
        name: "sign_round_trip",
        passed: ok,
        detail: "lengths 1, 7, 8, 9, 33, 100".into(),
    })
}

fn retention_arithmetic() -> Result<Check> {
    let r = stats::performance_retention(5.45, 88.93, 84.84)?;
    Ok(Check {
        name: "retention_arithmetic",
        passed: (r.retention - 0.95101).abs() < 5e-5 && r.retention + r.drop == 1.0,
        detail: format!("retention {:.5} drop {:.5}", r.retention, r.drop),
    })
}

/// Run every check; numeric failures inside a check surface as `Err`.
pub fn run() -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    Ok(vec![
        alpha_optimality(&mut rng)?,
        eckart_young(&mut rng)?,
        scaling_law(&mut rng)?,
        rank_formula()?,
        error_decomposition(&mut rng)?,
        sign_round_trip(&mut rng)?,
        retention_arithmetic()?,
    ])
}
