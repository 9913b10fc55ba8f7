//! Compression, sparsity, and divergence accounting.
//!
//! The compression rate counts quantized weights at the storage bit-width,
//! un-quantized (skip-list) parameters at 32 bits, and optionally the
//! per-layer codebook cost of `2^b` 32-bit values. Weights assigned to the
//! zero component are free: only non-zero assignments pay for index storage.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::gm::{hard_assign, LayerGm};
use crate::model::{Model, QuantPolicy};

/// Per-layer parameter accounting.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCensus {
    pub name: String,
    /// Parameter count of this entry.
    pub params: usize,
    /// Whether the entry is weight-quantized.
    pub quantized: bool,
    /// Parameters not assigned to the zero component. Equal to `params`
    /// for unquantized entries.
    pub nonzero: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelCensus {
    pub layers: Vec<LayerCensus>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodebookAccounting {
    Included,
    Excluded,
}

impl ModelCensus {
    pub fn total_params(&self) -> usize {
        self.layers.iter().map(|l| l.params).sum()
    }

    pub fn quantized_params(&self) -> usize {
        self.layers.iter().filter(|l| l.quantized).map(|l| l.params).sum()
    }

    pub fn unquantized_params(&self) -> usize {
        self.layers.iter().filter(|l| !l.quantized).map(|l| l.params).sum()
    }

    pub fn quantized_layer_count(&self) -> usize {
        self.layers.iter().filter(|l| l.quantized).count()
    }
}

/// Build the census for a model: each quantized weight tensor (with its
/// hard assignments under the mixture), plus one unquantized entry covering
/// everything else (skip-list weights, biases, batchnorm affine).
pub fn census_from_model(
    model: &Model,
    gms: &BTreeMap<String, LayerGm>,
    policy: &QuantPolicy,
) -> Result<ModelCensus> {
    let mut layers = Vec::new();
    let mut other = 0usize;
    for p in &model.params {
        let layer_name = p.name.strip_suffix(".w");
        match layer_name {
            Some(name) if policy.is_quantized(name) => {
                let gm = gms.get(name).ok_or_else(|| {
                    Error::Config(format!("metrics: no mixture state for quantized layer {name}"))
                })?;
                let assign = hard_assign(p.tensor.data(), gm);
                let nonzero = assign.iter().filter(|&&k| k != 0).count();
                layers.push(LayerCensus {
                    name: name.to_string(),
                    params: p.tensor.len(),
                    quantized: true,
                    nonzero,
                });
            }
            _ => other += p.tensor.len(),
        }
    }
    if other > 0 {
        layers.push(LayerCensus {
            name: "unquantized".to_string(),
            params: other,
            quantized: false,
            nonzero: other,
        });
    }
    Ok(ModelCensus { layers })
}

/// Count of parameters that survive hard quantization: non-zero-assigned
/// quantized weights plus all unquantized parameters.
pub fn nonzero_params(census: &ModelCensus) -> usize {
    census.layers.iter().map(|l| l.nonzero).sum()
}

/// Compression rate:
/// `32*N_total / (b*N_nonzero + codebook_bits + 32*N_unquantized)` with
/// `codebook_bits = n_quantized_layers * 2^b * 32` when included.
pub fn compression_rate(census: &ModelCensus, bits: u8, codebook: CodebookAccounting) -> f64 {
    let n_total = census.total_params() as f64;
    if n_total == 0.0 {
        return 1.0;
    }
    let nonzero_q: usize = census
        .layers
        .iter()
        .filter(|l| l.quantized)
        .map(|l| l.nonzero)
        .sum();
    let codebook_bits = match codebook {
        CodebookAccounting::Included => {
            census.quantized_layer_count() as f64 * (1u64 << bits) as f64 * 32.0
        }
        CodebookAccounting::Excluded => 0.0,
    };
    let denom = bits as f64 * nonzero_q as f64
        + codebook_bits
        + 32.0 * census.unquantized_params() as f64;
    if denom == 0.0 {
        return f64::INFINITY;
    }
    32.0 * n_total / denom
}

/// Mean squared deviation between a weight tensor and its quantized form.
pub fn quantization_mse(w: &[f64], q: &[f64]) -> Result<f64> {
    if w.len() != q.len() {
        return Err(Error::Config(format!(
            "quantization_mse: length mismatch {} vs {}",
            w.len(),
            q.len()
        )));
    }
    if w.is_empty() {
        return Ok(0.0);
    }
    let ss: f64 = w.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(ss / w.len() as f64)
}

/// Aggregate MSE over several (weights, quantized) pairs, weighted by
/// element count.
pub fn quantization_mse_layers(pairs: &[(&[f64], &[f64])]) -> Result<f64> {
    let mut ss = 0.0;
    let mut n = 0usize;
    for (w, q) in pairs {
        if w.len() != q.len() {
            return Err(Error::Config("quantization_mse: length mismatch".into()));
        }
        ss += w.iter().zip(q.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        n += w.len();
    }
    Ok(if n == 0 { 0.0 } else { ss / n as f64 })
}

/// Codebook overhead ratio: total codebook bits over total quantized
/// payload bits, `sum(2^b*32) / sum(params*b)` across quantized layers.
pub fn codebook_overhead(census: &ModelCensus, bits: u8) -> f64 {
    let layers = census.quantized_layer_count() as f64;
    let payload_bits: f64 = census
        .layers
        .iter()
        .filter(|l| l.quantized)
        .map(|l| l.params as f64 * bits as f64)
        .sum();
    if payload_bits == 0.0 {
        return 0.0;
    }
    layers * (1u64 << bits) as f64 * 32.0 / payload_bits
}
