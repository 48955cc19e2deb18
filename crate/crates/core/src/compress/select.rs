//! Choosing which tensors get compressed: name globs and layer-depth ranges.
//!
//! Layer indices are parsed from the usual checkpoint naming schemes:
//! `model.layers.12.mlp.up_proj.weight`, `transformer.h.3.attn.c_attn.weight`,
//! `encoder.layer.5.output.dense.weight`, `blocks.7.norm1.weight`.

use std::sync::OnceLock;

use glob::Pattern;
use regex::Regex;

use super::config::CompressionConfig;
use crate::error::{Error, Result};

fn layer_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?:^|\.)(?:layers|layer|h|blocks|block)\.(\d+)(?:\.|$)").unwrap())
}

pub fn layer_index_of(name: &str) -> Option<usize> {
    layer_regex()
        .captures(name)
        .and_then(|c| c.get(1))
        .and_then(|m| m.as_str().parse().ok())
}

/// One more than the largest layer index found, or 0.
pub fn count_layers<'a>(names: impl IntoIterator<Item = &'a str>) -> usize {
    names.into_iter().filter_map(layer_index_of).max().map_or(0, |l| l + 1)
}

pub(crate) fn compile_patterns(patterns: &[String]) -> Result<Vec<Pattern>> {
    patterns
        .iter()
        .map(|p| Pattern::new(p).map_err(|e| Error::Config(format!("bad pattern `{p}`: {e}"))))
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Selection {
    pub compress: Vec<String>,
    pub passthrough: Vec<String>,
}

impl Selection {
    pub fn is_compressed(&self, name: &str) -> bool {
        self.compress.iter().any(|n| n == name)
    }
}

/// A tensor is compressed iff it matches an include glob (or none are given),
/// matches no exclude glob, and, when a layer range is set, has a layer
/// index whose depth fraction falls inside it. Tensors without a layer index
/// fall outside every layer range.
pub fn select_targets<'a>(
    names: impl IntoIterator<Item = &'a str>,
    cfg: &CompressionConfig,
    layer_index: impl Fn(&str) -> Option<usize>,
    num_layers: usize,
) -> Result<Selection> {
    let include = compile_patterns(&cfg.include)?;
    let exclude = compile_patterns(&cfg.exclude)?;
    let mut selection = Selection::default();
    for name in names {
        let included = include.is_empty() || include.iter().any(|p| p.matches(name));
        let excluded = exclude.iter().any(|p| p.matches(name));
        let in_range = match &cfg.layer_range {
            None => true,
            Some(range) => layer_index(name).is_some_and(|l| range.contains(l, num_layers)),
        };
        if included && !excluded && in_range {
            selection.compress.push(name.to_string());
        } else {
            selection.passthrough.push(name.to_string());
        }
    }
    Ok(selection)
}
