//! Config file loading and CLI-over-file precedence.

use std::path::Path;

use dqrelo_core::compress::{CompressionConfig, FactorPrecision, LayerRange, Method};
use dqrelo_core::fraction::Fraction;
use dqrelo_core::{Error, Result};
use serde::Deserialize;

/// Every key is optional; absent keys fall back to the built-in defaults.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub method: Option<String>,
    pub rho1: Option<String>,
    pub bits: Option<u32>,
    pub vector_rho: Option<String>,
    pub layer_range: Option<String>,
    pub include: Option<Vec<String>>,
    pub exclude: Option<Vec<String>>,
    pub seed: Option<u64>,
    pub factor_precision: Option<String>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Values given on the command line; `None` or empty means "not given".
#[derive(Debug, Default)]
pub struct Overrides {
    pub method: Option<String>,
    pub rho1: Option<String>,
    pub bits: Option<u32>,
    pub vector_rho: Option<String>,
    pub layer_range: Option<String>,
    pub include: Vec<String>,
    pub exclude: Vec<String>,
    pub seed: Option<u64>,
    pub factor_precision: Option<String>,
}

fn fraction(key: &str, s: &str) -> Result<Fraction> {
    s.parse().map_err(|e| Error::Config(format!("{key}: {e}")))
}

fn precision(s: &str) -> Result<FactorPrecision> {
    match s {
        "f16" | "float16" => Ok(FactorPrecision::F16),
        "f32" | "float32" => Ok(FactorPrecision::F32),
        other => Err(Error::Config(format!(
            "factor_precision: unknown precision `{other}` (expected f16 or f32)"
        ))),
    }
}

/// Merge defaults, then the file, then the command line.
pub fn resolve(file: FileConfig, cli: Overrides) -> Result<CompressionConfig> {
    let mut cfg = CompressionConfig::default();
    let method = cli.method.or(file.method);
    if let Some(m) = method {
        cfg.method = m.parse::<Method>()?;
    }
    if let Some(r) = cli.rho1.or(file.rho1) {
        cfg.rho1 = fraction("rho1", &r)?;
    }
    if let Some(b) = cli.bits.or(file.bits) {
        cfg.bits = b;
    }
    if let Some(v) = cli.vector_rho.or(file.vector_rho) {
        cfg.vector_rho = Some(fraction("vector_rho", &v)?);
    }
    if let Some(r) = cli.layer_range.or(file.layer_range) {
        cfg.layer_range = Some(
            r.parse::<LayerRange>()
                .map_err(|e| Error::Config(format!("layer_range: {e}")))?,
        );
    }
    cfg.include = if cli.include.is_empty() {
        file.include.unwrap_or_default()
    } else {
        cli.include
    };
    cfg.exclude = if cli.exclude.is_empty() {
        file.exclude.unwrap_or_default()
    } else {
        cli.exclude
    };
    if let Some(s) = cli.seed.or(file.seed) {
        cfg.seed = s;
    }
    if let Some(p) = cli.factor_precision.or(file.factor_precision) {
        cfg.factor_precision = precision(&p)?;
    }
    cfg.validate()?;
    Ok(cfg)
}
