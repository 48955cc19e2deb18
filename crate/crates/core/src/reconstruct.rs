//! Rebuilding `base + Δ̂` and measuring how far it lands from the fine-tuned model.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;

use crate::archive::{TensorArchive, TensorRecord};
use crate::compress::{decompress_entry, CompressedEntry, EntryKind, EntryPayload, PassthroughSource};
use crate::container::Container;
use crate::error::{Error, Result};

const EPS: f64 = 1e-12;

/// Rebuild an approximate fine-tuned archive. Output tensors keep the base
/// dtype; base tensors without an entry are copied unchanged and verbatim
/// entries for tensors the base lacks are appended in container order.
pub fn reconstruct(base: &TensorArchive, container: &Container, force: bool) -> Result<TensorArchive> {
    let actual = base.fingerprint();
    if !force && actual != container.manifest.base_fingerprint {
        return Err(Error::BaseMismatch {
            expected: container.manifest.base_fingerprint.clone(),
            actual,
        });
    }
    let entries: Vec<CompressedEntry> = container.entries().collect::<Result<_>>()?;
    reconstruct_from_entries(base, &entries)
}

pub fn reconstruct_from_entries(base: &TensorArchive, entries: &[CompressedEntry]) -> Result<TensorArchive> {
    let by_name: HashMap<&str, &CompressedEntry> = entries.iter().map(|e| (e.name.as_str(), e)).collect();
    for e in entries {
        let verbatim = matches!(
            e.payload,
            EntryPayload::Passthrough {
                source: PassthroughSource::Absolute,
                ..
            }
        );
        if !verbatim && !base.contains(&e.name) {
            return Err(Error::Shape(format!("delta entry `{}` has no base tensor", e.name)));
        }
    }

    let rebuilt: Vec<(String, TensorRecord)> = base
        .iter()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(name, record)| {
            let Some(entry) = by_name.get(name) else {
                return Ok((name.to_string(), record.clone()));
            };
            if let EntryPayload::Passthrough {
                source: PassthroughSource::Absolute,
                record: raw,
            } = &entry.payload
            {
                return Ok((name.to_string(), raw.clone()));
            }
            if entry.shape.as_slice() != record.shape() {
                return Err(Error::Shape(format!(
                    "`{name}`: entry shape {:?} vs base shape {:?}",
                    entry.shape,
                    record.shape()
                )));
            }
            let delta = decompress_entry(entry)?;
            let values: Vec<f32> = record.to_f32_vec().iter().zip(&delta).map(|(b, d)| b + d).collect();
            Ok((
                name.to_string(),
                TensorRecord::from_f32(record.shape().to_vec(), record.dtype(), &values)?,
            ))
        })
        .collect::<Result<_>>()?;

    let mut out = TensorArchive::new();
    for (k, v) in base.metadata() {
        out.set_metadata(k.clone(), v.clone());
    }
    for (name, record) in rebuilt {
        out.insert(name, record);
    }
    for e in entries {
        if let EntryPayload::Passthrough {
            source: PassthroughSource::Absolute,
            record,
        } = &e.payload
        {
            if !base.contains(&e.name) {
                out.insert(e.name.clone(), record.clone());
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorError {
    /// ‖Δ − Δ̂‖_F.
    pub frobenius_error: f64,
    /// ‖Δ‖_F.
    pub delta_norm: f64,
    pub relative_error: f64,
    pub kind: Option<EntryKind>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionReport {
    pub per_tensor: BTreeMap<String, TensorError>,
    /// `sqrt(Σ err² / Σ ‖Δ‖²)`.
    pub global_relative_error: f64,
    /// Fine-tuned tensors with no same-shaped base tensor (Δ undefined).
    pub skipped: Vec<String>,
}

impl ReconstructionReport {
    /// Attach entry kinds from the container that produced the reconstruction.
    pub fn with_kinds(mut self, container: &Container) -> Self {
        for e in &container.manifest.entries {
            if let Some(t) = self.per_tensor.get_mut(&e.name) {
                t.kind = Some(e.kind);
            }
        }
        self
    }

    pub fn total_sq_error(&self) -> f64 {
        self.per_tensor
            .values()
            .map(|t| t.frobenius_error * t.frobenius_error)
            .sum()
    }
}

pub fn error_report(
    base: &TensorArchive,
    finetuned: &TensorArchive,
    reconstructed: &TensorArchive,
) -> Result<ReconstructionReport> {
    let mut skipped = Vec::new();
    let mut misaligned = Vec::new();
    let mut pairs = Vec::new();
    for (name, ft) in finetuned.iter() {
        match base.get(name) {
            Some(b) if b.shape() == ft.shape() => match reconstructed.get(name) {
                Some(r) if r.shape() == ft.shape() => pairs.push((name, b, ft, r)),
                _ => misaligned.push(name.to_string()),
            },
            _ => skipped.push(name.to_string()),
        }
    }
    if !misaligned.is_empty() {
        return Err(Error::ArchitectureMismatch { names: misaligned });
    }

    let per_tensor: BTreeMap<String, TensorError> = pairs
        .into_par_iter()
        .map(|(name, b, f, r)| {
            let (b, f, r) = (b.to_f32_vec(), f.to_f32_vec(), r.to_f32_vec());
            let mut err_sq = 0.0f64;
            let mut delta_sq = 0.0f64;
            for i in 0..b.len() {
                let delta = f[i] as f64 - b[i] as f64;
                let approx = r[i] as f64 - b[i] as f64;
                err_sq += (delta - approx) * (delta - approx);
                delta_sq += delta * delta;
            }
            let (err, norm) = (err_sq.sqrt(), delta_sq.sqrt());
            (
                name.to_string(),
                TensorError {
                    frobenius_error: err,
                    delta_norm: norm,
                    relative_error: err / norm.max(EPS),
                    kind: None,
                },
            )
        })
        .collect();

    let total_err: f64 = per_tensor.values().map(|t| t.frobenius_error.powi(2)).sum();
    let total_delta: f64 = per_tensor.values().map(|t| t.delta_norm.powi(2)).sum();
    Ok(ReconstructionReport {
        per_tensor,
        global_relative_error: total_err.sqrt() / total_delta.sqrt().max(EPS),
        skipped,
    })
}
