//! Sparse deltas: magnitude top-k and seeded random selection.

use half::f16;
use rand::Rng;

use crate::error::{Error, Result};

/// Kept `(index, value)` pairs sorted by index; everything else is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseDelta {
    pub len: usize,
    pub entries: Vec<(u32, f16)>,
}

impl SparseDelta {
    pub fn densify(&self) -> Vec<f32> {
        let mut out = vec![0.0f32; self.len];
        for &(i, v) in &self.entries {
            out[i as usize] = v.to_f32();
        }
        out
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }
}

pub(crate) fn to_f16(v: f32, what: &str) -> Result<f16> {
    let h = f16::from_f32(v);
    if v.is_finite() && !h.is_finite() {
        return Err(Error::Numeric(format!("{what}: {v} overflows float16 storage")));
    }
    Ok(h)
}

fn check_index_space(len: usize) -> Result<()> {
    if len > u32::MAX as usize {
        return Err(Error::Config(format!("{len} elements exceed the uint32 index space")));
    }
    Ok(())
}

fn build(values: &[f32], mut keep: Vec<usize>) -> Result<(SparseDelta, f64)> {
    keep.sort_unstable();
    let mut kept = vec![false; values.len()];
    let mut entries = Vec::with_capacity(keep.len());
    for i in keep {
        kept[i] = true;
        entries.push((i as u32, to_f16(values[i], "sparse delta value")?));
    }
    let dropped_sq: f64 = values
        .iter()
        .zip(&kept)
        .filter(|(_, k)| !**k)
        .map(|(v, _)| (*v as f64) * (*v as f64))
        .sum();
    Ok((
        SparseDelta {
            len: values.len(),
            entries,
        },
        dropped_sq,
    ))
}

/// Keep the `k` largest-|value| entries, ties going to the lower index.
/// Also returns the squared norm of what was dropped.
pub fn top_k_by_magnitude(values: &[f32], k: usize) -> Result<(SparseDelta, f64)> {
    check_index_space(values.len())?;
    let k = k.min(values.len());
    let mut order: Vec<usize> = (0..values.len()).collect();
    let rank = |a: &usize, b: &usize| values[*b].abs().total_cmp(&values[*a].abs()).then_with(|| a.cmp(b));
    if k < order.len() && k > 0 {
        order.select_nth_unstable_by(k - 1, rank);
    }
    order.truncate(k);
    build(values, order)
}

/// Keep `k` uniformly chosen entries.
pub fn random_k<R: Rng + ?Sized>(values: &[f32], k: usize, rng: &mut R) -> Result<(SparseDelta, f64)> {
    check_index_space(values.len())?;
    let k = k.min(values.len());
    let keep = rand::seq::index::sample(rng, values.len(), k).into_vec();
    build(values, keep)
}
