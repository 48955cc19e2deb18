use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fraction::Fraction;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Sign quantization plus truncated SVD of the quantization residual.
    Dqrelo,
    SvdOnly,
    /// Data-free one-bit baseline (mean-|Δ| scale, no distillation).
    OnebitOnly,
    MagnitudePrune,
    RandomPrune,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Dqrelo,
        Method::SvdOnly,
        Method::OnebitOnly,
        Method::MagnitudePrune,
        Method::RandomPrune,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Dqrelo => "dqrelo",
            Method::SvdOnly => "svd_only",
            Method::OnebitOnly => "onebit_only",
            Method::MagnitudePrune => "magnitude_prune",
            Method::RandomPrune => "random_prune",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| {
            let names: Vec<_> = Method::ALL.iter().map(|m| m.as_str()).collect();
            Error::Config(format!("unknown method `{s}` (expected one of {})", names.join(", ")))
        })
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Storage precision of low-rank factors. `F32` exists for exact error
/// accounting in tests; `F16` is what the bit budget assumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FactorPrecision {
    #[default]
    F16,
    F32,
}

impl FactorPrecision {
    pub fn bits(self) -> u64 {
        match self {
            FactorPrecision::F16 => 16,
            FactorPrecision::F32 => 32,
        }
    }

    pub fn round(self, v: f32) -> f32 {
        match self {
            FactorPrecision::F16 => half::f16::from_f32(v).to_f32(),
            FactorPrecision::F32 => v,
        }
    }
}

/// Half-open fraction of model depth, `[lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerRange {
    pub lo: Fraction,
    pub hi: Fraction,
}

impl LayerRange {
    pub fn contains(&self, layer: usize, num_layers: usize) -> bool {
        if num_layers == 0 {
            return false;
        }
        // layer / num_layers compared exactly.
        let pos = Fraction::new(layer as u64, num_layers as u64).expect("non-zero denominator");
        self.lo <= pos && pos < self.hi
    }
}

impl std::str::FromStr for LayerRange {
    type Err = Error;

    /// `LO:HI`, each a fraction or decimal.
    fn from_str(s: &str) -> Result<Self> {
        let (lo, hi) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("layer range `{s}` must look like LO:HI")))?;
        Ok(LayerRange {
            lo: lo.parse()?,
            hi: hi.parse()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionConfig {
    pub method: Method,
    /// Low-rank share of the budget.
    pub rho1: Fraction,
    /// Bits per full-precision weight.
    pub bits: u32,
    /// Kept fraction for 1-D tensors; defaults to the total ratio.
    pub vector_rho: Option<Fraction>,
    pub layer_range: Option<LayerRange>,
    pub include: Vec<String>,
    pub exclude: Vec<String>,
    pub seed: u64,
    pub factor_precision: FactorPrecision,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        CompressionConfig {
            method: Method::Dqrelo,
            rho1: Fraction::new(1, 16).unwrap(),
            bits: 16,
            vector_rho: None,
            layer_range: None,
            include: Vec::new(),
            exclude: Vec::new(),
            seed: 0,
            factor_precision: FactorPrecision::F16,
        }
    }
}

impl CompressionConfig {
    /// `rho1 + 1/bits`.
    pub fn total_rho(&self) -> Result<Fraction> {
        if self.bits == 0 {
            return Err(Error::Config("bits must be positive".into()));
        }
        self.rho1
            .checked_add(&Fraction::new(1, self.bits as u64)?)
            .ok_or_else(|| Error::Config("compression ratio overflows".into()))
    }

    pub fn vector_ratio(&self) -> Result<Fraction> {
        match self.vector_rho {
            Some(r) => Ok(r),
            None => self.total_rho(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rho1 <= Fraction::ZERO {
            return Err(Error::Config("rho1 must be positive".into()));
        }
        let total = self.total_rho()?;
        if total >= Fraction::ONE {
            return Err(Error::Config(format!(
                "total ratio rho1 + 1/bits = {total} leaves no compression (must be < 1)"
            )));
        }
        if let Some(v) = self.vector_rho {
            if v <= Fraction::ZERO || v > Fraction::ONE {
                return Err(Error::Config(format!("vector ratio {v} must lie in (0, 1]")));
            }
        }
        if let Some(range) = &self.layer_range {
            if range.hi > Fraction::ONE || range.lo >= range.hi {
                return Err(Error::Config(format!(
                    "layer range {}:{} must satisfy 0 <= lo < hi <= 1",
                    range.lo, range.hi
                )));
            }
        }
        super::select::compile_patterns(&self.include)?;
        super::select::compile_patterns(&self.exclude)?;
        Ok(())
    }
}
