//! Per-layer and per-model quality metrics.
//!
//! Four quantities are tracked per matrix: the log Frobenius norm
//! log Σλ, the log spectral norm log λ_max, the weighted-alpha term
//! α·log λ_max, and the log alpha-norm log Σλ^α (summed over the whole
//! retained spectrum, bulk and tail). Model-level metrics are arithmetic
//! means over the included matrices; embedding-like matrices are
//! excluded from averages by default, and matrices whose power-law fit
//! failed drop out of the alpha-dependent averages only.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{AuditConfig, LogBase, SliceWeighting};
use crate::extract::LayerKind;
use crate::powerlaw::{FitFlag, PlFit};
use crate::spectral::Esd;

/// Metrics for one layer matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerMetrics {
    pub log_frobenius: f64,
    pub log_spectral: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weighted_alpha_term: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log_alpha_norm: Option<f64>,
    pub flags: Vec<FitFlag>,
}

/// Everything the pipeline knows about one analyzed matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerAnalysis {
    pub layer_id: usize,
    pub layer_name: String,
    pub kind: LayerKind,
    pub slice_index: usize,
    pub n_rows: usize,
    pub n_cols: usize,
    pub aspect_ratio: f64,
    pub rescale_factor: f64,
    /// Retained eigenvalue count.
    pub n_eigenvalues: usize,
    pub n_dropped: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit: Option<PlFit>,
    /// Why the fit is absent, when it is.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit_error: Option<String>,
    pub metrics: LayerMetrics,
}

/// Model-level aggregates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelMetrics {
    /// Matrices included in the norm averages.
    pub n_layers: usize,
    /// Matrices included in the alpha-dependent averages.
    pub n_alpha_layers: usize,
    pub avg_log_frobenius: f64,
    pub avg_log_spectral: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weighted_alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub avg_log_alpha_norm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_bar: Option<f64>,
    /// Embedding-like + failed-fit + skipped tensors.
    pub n_excluded: usize,
    pub excluded_embedding_like: usize,
    pub excluded_failed_fit: usize,
    pub skipped_tensors: usize,
}

/// One layer flagged by collapse detection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CollapseFlag {
    pub layer_name: String,
    pub slice_index: usize,
    /// log_spectral in single mode; its delta in paired mode.
    pub value: f64,
    /// Distance past the reference (median or median shift).
    pub deviation: f64,
}

/// Outcome of scale-collapse detection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScaleCollapseReport {
    pub mode: String,
    pub threshold: f64,
    pub n_layers: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub median_log_spectral: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub median_shift: Option<f64>,
    pub flagged: Vec<CollapseFlag>,
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no layers left after exclusions")]
    NoIncludedLayers,
    #[error("scale-collapse detection needs at least {required} layers, found {found}")]
    InsufficientLayers { required: usize, found: usize },
}

/// Metrics for a layer with a successful power-law fit.
pub fn layer_metrics(esd: &Esd, fit: &PlFit, base: LogBase) -> LayerMetrics {
    let log_spectral = base.log(esd.lambda_max);
    LayerMetrics {
        log_frobenius: base.log(esd.sum_prefilter),
        log_spectral,
        alpha: Some(fit.alpha),
        weighted_alpha_term: Some(fit.alpha * log_spectral),
        log_alpha_norm: Some(log_alpha_norm(esd, fit.alpha, base)),
        flags: fit.flags.clone(),
    }
}

/// Norm metrics alone, for layers whose fit failed.
pub fn norm_only_metrics(esd: &Esd, base: LogBase) -> LayerMetrics {
    LayerMetrics {
        log_frobenius: base.log(esd.sum_prefilter),
        log_spectral: base.log(esd.lambda_max),
        alpha: None,
        weighted_alpha_term: None,
        log_alpha_norm: None,
        flags: Vec::new(),
    }
}

/// log Σ λ_i^α over the retained spectrum, factored through λ_max so the
/// powers cannot overflow.
fn log_alpha_norm(esd: &Esd, alpha: f64, base: LogBase) -> f64 {
    let reduced: f64 = esd
        .eigenvalues
        .iter()
        .map(|&v| (v / esd.lambda_max).powf(alpha))
        .sum();
    alpha * base.log(esd.lambda_max) + base.log(reduced)
}

fn included(layer: &LayerAnalysis, config: &AuditConfig) -> bool {
    !(config.skip_embeddings && layer.kind == LayerKind::EmbeddingLike)
}

// One averaging term: a single matrix, or a named layer's slices
// pre-averaged under `SliceWeighting::Layer`.
struct Unit {
    log_frobenius: f64,
    log_spectral: f64,
    alpha: Option<f64>,
    weighted_alpha_term: Option<f64>,
    log_alpha_norm: Option<f64>,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn unit_of(group: &[&LayerAnalysis]) -> Unit {
    let with_alpha: Vec<&&LayerAnalysis> =
        group.iter().filter(|l| l.metrics.alpha.is_some()).collect();
    let alpha_mean = |pick: fn(&LayerMetrics) -> Option<f64>| -> Option<f64> {
        if with_alpha.is_empty() {
            None
        } else {
            Some(mean(
                &with_alpha
                    .iter()
                    .map(|l| pick(&l.metrics).expect("alpha present"))
                    .collect::<Vec<_>>(),
            ))
        }
    };
    Unit {
        log_frobenius: mean(
            &group
                .iter()
                .map(|l| l.metrics.log_frobenius)
                .collect::<Vec<_>>(),
        ),
        log_spectral: mean(
            &group
                .iter()
                .map(|l| l.metrics.log_spectral)
                .collect::<Vec<_>>(),
        ),
        alpha: alpha_mean(|m| m.alpha),
        weighted_alpha_term: alpha_mean(|m| m.weighted_alpha_term),
        log_alpha_norm: alpha_mean(|m| m.log_alpha_norm),
    }
}

/// Aggregate per-layer metrics into model-level averages.
pub fn model_summary(
    layers: &[LayerAnalysis],
    skipped_tensors: usize,
    config: &AuditConfig,
) -> Result<ModelMetrics, MetricsError> {
    let norm_layers: Vec<&LayerAnalysis> = layers.iter().filter(|l| included(l, config)).collect();
    if norm_layers.is_empty() {
        return Err(MetricsError::NoIncludedLayers);
    }

    let units: Vec<Unit> = match config.conv_slice_weighting {
        SliceWeighting::Matrix => norm_layers.iter().map(|l| unit_of(&[l])).collect(),
        SliceWeighting::Layer => {
            let mut groups: std::collections::BTreeMap<usize, Vec<&LayerAnalysis>> =
                std::collections::BTreeMap::new();
            for layer in &norm_layers {
                groups.entry(layer.layer_id).or_default().push(layer);
            }
            groups.values().map(|g| unit_of(g)).collect()
        }
    };
    let alpha_units: Vec<&Unit> = units.iter().filter(|u| u.alpha.is_some()).collect();

    let avg_log_frobenius = mean(&units.iter().map(|u| u.log_frobenius).collect::<Vec<_>>());
    let avg_log_spectral = mean(&units.iter().map(|u| u.log_spectral).collect::<Vec<_>>());
    let (weighted_alpha, avg_log_alpha_norm, alpha_bar) = if alpha_units.is_empty() {
        (None, None, None)
    } else {
        let over = |pick: fn(&Unit) -> Option<f64>| {
            Some(mean(
                &alpha_units
                    .iter()
                    .map(|u| pick(u).expect("alpha unit"))
                    .collect::<Vec<_>>(),
            ))
        };
        (
            over(|u| u.weighted_alpha_term),
            over(|u| u.log_alpha_norm),
            over(|u| u.alpha),
        )
    };

    let excluded_embedding_like = layers.len() - norm_layers.len();
    let excluded_failed_fit = norm_layers
        .iter()
        .filter(|l| l.metrics.alpha.is_none())
        .count();
    Ok(ModelMetrics {
        n_layers: units.len(),
        n_alpha_layers: alpha_units.len(),
        avg_log_frobenius,
        avg_log_spectral,
        weighted_alpha,
        avg_log_alpha_norm,
        alpha_bar,
        n_excluded: excluded_embedding_like + excluded_failed_fit + skipped_tensors,
        excluded_embedding_like,
        excluded_failed_fit,
        skipped_tensors,
    })
}

const COLLAPSE_MIN_LAYERS: usize = 5;

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Single-model collapse scan: flag layers whose spectral log-norm sits
/// far below the model median.
pub fn detect_scale_collapse(
    layers: &[LayerAnalysis],
    config: &AuditConfig,
) -> Result<ScaleCollapseReport, MetricsError> {
    if layers.len() < COLLAPSE_MIN_LAYERS {
        return Err(MetricsError::InsufficientLayers {
            required: COLLAPSE_MIN_LAYERS,
            found: layers.len(),
        });
    }
    let med = median(layers.iter().map(|l| l.metrics.log_spectral).collect());
    let threshold = config.collapse_single_threshold;
    let flagged = layers
        .iter()
        .filter(|l| med - l.metrics.log_spectral > threshold)
        .map(|l| CollapseFlag {
            layer_name: l.layer_name.clone(),
            slice_index: l.slice_index,
            value: l.metrics.log_spectral,
            deviation: med - l.metrics.log_spectral,
        })
        .collect();
    Ok(ScaleCollapseReport {
        mode: "single".to_string(),
        threshold,
        n_layers: layers.len(),
        median_log_spectral: Some(med),
        median_shift: None,
        flagged,
    })
}

/// Paired collapse scan between a baseline and a variant of the same
/// model. Layers are matched by name and slice; a layer is flagged when
/// its spectral log-norm drops hard while the model as a whole barely
/// moves.
pub fn detect_scale_collapse_paired(
    baseline: &[LayerAnalysis],
    variant: &[LayerAnalysis],
    config: &AuditConfig,
) -> Result<ScaleCollapseReport, MetricsError> {
    let mut deltas: Vec<(&LayerAnalysis, f64)> = Vec::new();
    for b in baseline {
        if let Some(v) = variant
            .iter()
            .find(|v| v.layer_name == b.layer_name && v.slice_index == b.slice_index)
        {
            deltas.push((b, v.metrics.log_spectral - b.metrics.log_spectral));
        }
    }
    if deltas.len() < COLLAPSE_MIN_LAYERS {
        return Err(MetricsError::InsufficientLayers {
            required: COLLAPSE_MIN_LAYERS,
            found: deltas.len(),
        });
    }
    let med_shift = median(deltas.iter().map(|(_, d)| *d).collect());
    let threshold = config.collapse_pair_threshold;
    let flagged = if med_shift.abs() < config.collapse_pair_median_gate {
        deltas
            .iter()
            .filter(|(_, d)| *d < -threshold)
            .map(|(l, d)| CollapseFlag {
                layer_name: l.layer_name.clone(),
                slice_index: l.slice_index,
                value: *d,
                deviation: med_shift - *d,
            })
            .collect()
    } else {
        // The whole model moved; per-layer drops are not anomalies.
        Vec::new()
    };
    Ok(ScaleCollapseReport {
        mode: "paired".to_string(),
        threshold,
        n_layers: deltas.len(),
        median_log_spectral: None,
        median_shift: Some(med_shift),
        flagged,
    })
}
