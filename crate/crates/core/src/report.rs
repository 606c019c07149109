//! Full analysis pipeline and report assembly.
//!
//! `analyze_store` drives container → extraction → spectra → fits →
//! metrics and produces an [`AnalysisReport`] that carries the complete
//! config echo: re-running with the echoed settings on the same file
//! reproduces the artifacts byte for byte. Matrices are processed in
//! parallel; every reduction preserves the deterministic traversal
//! order, so worker count never changes an output.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::AuditConfig;
use crate::extract::{self, ExtractError, LayerMatrix, SkipRecord};
use crate::metrics::{self, LayerAnalysis, MetricsError, ModelMetrics, ScaleCollapseReport};
use crate::powerlaw::{self, PlFit};
use crate::spectral::{self, Esd};
use crate::tensor_io::{self, ParseError, TensorStore};

pub const TOOL_NAME: &str = "swa";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Complete result of analyzing one weight file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub tool: String,
    pub version: String,
    pub model_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input_path: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input_sha256: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub order_file: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timestamp_unix: Option<u64>,
    pub config: AuditConfig,
    pub summary: ModelMetrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scale_collapse: Option<ScaleCollapseReport>,
    pub skipped: Vec<SkipRecord>,
    pub layers: Vec<LayerAnalysis>,
}

/// Comparison of a baseline model against a variant, matched by layer
/// name and slice.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareReport {
    pub tool: String,
    pub version: String,
    pub baseline_model: String,
    pub variant_model: String,
    pub config: AuditConfig,
    pub n_matched: usize,
    pub unmatched_baseline: Vec<String>,
    pub unmatched_variant: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline_alpha_bar: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant_alpha_bar: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_alpha_bar: Option<f64>,
    pub scale_collapse: ScaleCollapseReport,
    pub layers: Vec<CompareRow>,
}

/// Per-layer deltas between variant and baseline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareRow {
    pub layer_name: String,
    pub slice_index: usize,
    pub baseline_log_spectral: f64,
    pub variant_log_spectral: f64,
    pub delta_log_spectral: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline_alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant_alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_alpha: Option<f64>,
    pub flagged: bool,
}

#[derive(Debug, Error)]
pub enum AnalyzeError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Extract(#[from] ExtractError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("unknown layer {layer:?} (slice {slice}): not present or not analyzable")]
    UnknownLayer { layer: String, slice: usize },
    #[error("only {matched} layers matched between baseline and variant, {required} required")]
    NoMatchedLayers { matched: usize, required: usize },
}

/// Analyze an in-memory store.
pub fn analyze_store(
    store: &TensorStore,
    model_id: &str,
    config: &AuditConfig,
    explicit_order: Option<&[String]>,
) -> Result<AnalysisReport, AnalyzeError> {
    let extraction = extract::extract_layer_matrices(store, model_id, config, explicit_order)?;
    let mut skipped = extraction.skipped;

    // One SVD + fit per matrix, in parallel; collect preserves input order.
    let outcomes: Vec<Result<LayerAnalysis, SkipRecord>> = extraction
        .matrices
        .par_iter()
        .map(|matrix| analyze_matrix(matrix, config))
        .collect();

    let mut layers = Vec::with_capacity(outcomes.len());
    for outcome in outcomes {
        match outcome {
            Ok(layer) => layers.push(layer),
            Err(skip) => skipped.push(skip),
        }
    }
    if layers.is_empty() {
        return Err(ExtractError::NoAnalyzableLayers { skipped }.into());
    }

    let summary = metrics::model_summary(&layers, skipped.len(), config)?;
    let included: Vec<LayerAnalysis> = layers
        .iter()
        .filter(|l| !(config.skip_embeddings && l.kind == crate::extract::LayerKind::EmbeddingLike))
        .cloned()
        .collect();
    let scale_collapse = metrics::detect_scale_collapse(&included, config).ok();

    Ok(AnalysisReport {
        tool: TOOL_NAME.to_string(),
        version: TOOL_VERSION.to_string(),
        model_id: model_id.to_string(),
        input_path: None,
        input_sha256: None,
        order_file: None,
        timestamp_unix: None,
        config: config.clone(),
        summary,
        scale_collapse,
        skipped,
        layers,
    })
}

fn analyze_matrix(matrix: &LayerMatrix, config: &AuditConfig) -> Result<LayerAnalysis, SkipRecord> {
    let esd = match spectral::compute_esd(matrix, config) {
        Ok(esd) => esd,
        Err(e) => {
            let reason = match e {
                spectral::SpectralError::AllZeroMatrix { .. } => "all-zero-matrix",
                spectral::SpectralError::SvdFailure { .. } => "svd-failure",
                spectral::SpectralError::EmptySpectrum => "empty-spectrum",
            };
            return Err(SkipRecord {
                tensor: matrix_label(matrix),
                reason: reason.to_string(),
            });
        }
    };

    let (fit, fit_error) = match powerlaw::fit_power_law(&esd, config) {
        Ok(fit) => (Some(fit), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let layer_metrics = match &fit {
        Some(fit) => metrics::layer_metrics(&esd, fit, config.log_base),
        None => metrics::norm_only_metrics(&esd, config.log_base),
    };

    Ok(LayerAnalysis {
        layer_id: matrix.layer_id,
        layer_name: matrix.layer_name.clone(),
        kind: matrix.kind,
        slice_index: matrix.slice_index,
        n_rows: matrix.n_rows(),
        n_cols: matrix.n_cols(),
        aspect_ratio: matrix.aspect_ratio(),
        rescale_factor: matrix.rescale_factor,
        n_eigenvalues: esd.len(),
        n_dropped: esd.n_dropped,
        fit,
        fit_error,
        metrics: layer_metrics,
    })
}

fn matrix_label(matrix: &LayerMatrix) -> String {
    if matrix.slice_index > 0 || matrix.kind == crate::extract::LayerKind::Conv2DSlice {
        format!("{}[{}]", matrix.layer_name, matrix.slice_index)
    } else {
        matrix.layer_name.clone()
    }
}

/// Analyze raw file bytes, recording provenance.
pub fn analyze_bytes(
    bytes: &[u8],
    model_id: &str,
    config: &AuditConfig,
    explicit_order: Option<&[String]>,
) -> Result<AnalysisReport, AnalyzeError> {
    let store = tensor_io::parse_container(bytes)?;
    let mut report = analyze_store(&store, model_id, config, explicit_order)?;
    report.input_sha256 = Some(hex_digest(bytes));
    Ok(report)
}

pub fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// ESD and fit for one named layer matrix, for the histogram command.
pub fn esd_for_layer(
    store: &TensorStore,
    model_id: &str,
    config: &AuditConfig,
    layer: &str,
    slice: usize,
) -> Result<(Esd, Option<PlFit>), AnalyzeError> {
    let extraction = extract::extract_layer_matrices(store, model_id, config, None)?;
    let matrix = extraction
        .matrices
        .iter()
        .find(|m| m.layer_name == layer && m.slice_index == slice)
        .ok_or_else(|| AnalyzeError::UnknownLayer {
            layer: layer.to_string(),
            slice,
        })?;
    let esd = spectral::compute_esd(matrix, config).map_err(|_| AnalyzeError::UnknownLayer {
        layer: layer.to_string(),
        slice,
    })?;
    let fit = powerlaw::fit_power_law(&esd, config).ok();
    Ok((esd, fit))
}

const COMPARE_MIN_MATCHED: usize = 5;

/// Pair two analyses of the same architecture and compute per-layer
/// deltas plus the paired scale-collapse scan.
pub fn compare_reports(
    baseline: &AnalysisReport,
    variant: &AnalysisReport,
    config: &AuditConfig,
) -> Result<CompareReport, AnalyzeError> {
    let key = |l: &LayerAnalysis| (l.layer_name.clone(), l.slice_index);
    let matched: Vec<(&LayerAnalysis, &LayerAnalysis)> = baseline
        .layers
        .iter()
        .filter_map(|b| {
            variant
                .layers
                .iter()
                .find(|v| key(v) == key(b))
                .map(|v| (b, v))
        })
        .collect();
    if matched.len() < COMPARE_MIN_MATCHED {
        return Err(AnalyzeError::NoMatchedLayers {
            matched: matched.len(),
            required: COMPARE_MIN_MATCHED,
        });
    }

    let matched_base: Vec<LayerAnalysis> = matched.iter().map(|(b, _)| (*b).clone()).collect();
    let matched_var: Vec<LayerAnalysis> = matched.iter().map(|(_, v)| (*v).clone()).collect();
    let scale_collapse = metrics::detect_scale_collapse_paired(&matched_base, &matched_var, config)
        .map_err(|e| match e {
            MetricsError::InsufficientLayers { required, .. } => AnalyzeError::NoMatchedLayers {
                matched: matched.len(),
                required,
            },
            other => AnalyzeError::Metrics(other),
        })?;

    let flagged_keys: Vec<(String, usize)> = scale_collapse
        .flagged
        .iter()
        .map(|f| (f.layer_name.clone(), f.slice_index))
        .collect();

    let layers: Vec<CompareRow> = matched
        .iter()
        .map(|(b, v)| CompareRow {
            layer_name: b.layer_name.clone(),
            slice_index: b.slice_index,
            baseline_log_spectral: b.metrics.log_spectral,
            variant_log_spectral: v.metrics.log_spectral,
            delta_log_spectral: v.metrics.log_spectral - b.metrics.log_spectral,
            baseline_alpha: b.metrics.alpha,
            variant_alpha: v.metrics.alpha,
            delta_alpha: match (b.metrics.alpha, v.metrics.alpha) {
                (Some(a), Some(c)) => Some(c - a),
                _ => None,
            },
            flagged: flagged_keys.contains(&(b.layer_name.clone(), b.slice_index)),
        })
        .collect();

    let in_variant = |b: &LayerAnalysis| {
        variant
            .layers
            .iter()
            .any(|v| v.layer_name == b.layer_name && v.slice_index == b.slice_index)
    };
    let in_baseline = |v: &LayerAnalysis| {
        baseline
            .layers
            .iter()
            .any(|b| b.layer_name == v.layer_name && b.slice_index == v.slice_index)
    };
    let label = |l: &LayerAnalysis| {
        if l.slice_index > 0 {
            format!("{}[{}]", l.layer_name, l.slice_index)
        } else {
            l.layer_name.clone()
        }
    };
    let unmatched_baseline: Vec<String> = baseline
        .layers
        .iter()
        .filter(|b| !in_variant(b))
        .map(&label)
        .collect();
    let unmatched_variant: Vec<String> = variant
        .layers
        .iter()
        .filter(|v| !in_baseline(v))
        .map(label)
        .collect();

    Ok(CompareReport {
        tool: TOOL_NAME.to_string(),
        version: TOOL_VERSION.to_string(),
        baseline_model: baseline.model_id.clone(),
        variant_model: variant.model_id.clone(),
        config: config.clone(),
        n_matched: matched.len(),
        unmatched_baseline,
        unmatched_variant,
        baseline_alpha_bar: baseline.summary.alpha_bar,
        variant_alpha_bar: variant.summary.alpha_bar,
        delta_alpha_bar: match (baseline.summary.alpha_bar, variant.summary.alpha_bar) {
            (Some(b), Some(v)) => Some(v - b),
            _ => None,
        },
        scale_collapse,
        layers,
    })
}

/// Format a float with shortest round-trip representation; empty for None.
fn opt_num(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub const LAYER_CSV_HEADER: &str = "layer_id,name,kind,slice,N,M,Q,alpha,lambda_min,lambda_max,ks_distance,log_frobenius,log_spectral,weighted_alpha_term,log_alpha_norm,flags";

/// Render the per-layer table as CSV, one row per analyzed matrix.
pub fn layers_csv(report: &AnalysisReport) -> String {
    let mut out = String::from(LAYER_CSV_HEADER);
    out.push('\n');
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    for layer in &report.layers {
        let flags = match &layer.fit {
            Some(fit) => fit.flags_string(),
            None => "NO_FIT".to_string(),
        };
        writer
            .write_record([
                layer.layer_id.to_string(),
                layer.layer_name.clone(),
                layer.kind.as_str().to_string(),
                layer.slice_index.to_string(),
                layer.n_rows.to_string(),
                layer.n_cols.to_string(),
                layer.aspect_ratio.to_string(),
                opt_num(layer.metrics.alpha),
                opt_num(layer.fit.as_ref().map(|f| f.lambda_min)),
                opt_num(layer.fit.as_ref().map(|f| f.lambda_max)),
                opt_num(layer.fit.as_ref().map(|f| f.ks_distance)),
                layer.metrics.log_frobenius.to_string(),
                layer.metrics.log_spectral.to_string(),
                opt_num(layer.metrics.weighted_alpha_term),
                opt_num(layer.metrics.log_alpha_norm),
                flags,
            ])
            .expect("writing to a Vec cannot fail");
    }
    out.push_str(&String::from_utf8(writer.into_inner().expect("vec writer")).expect("utf-8"));
    out
}

/// Render per-layer comparison deltas as CSV.
pub fn compare_csv(report: &CompareReport) -> String {
    let mut out = String::from(
        "name,slice,baseline_log_spectral,variant_log_spectral,delta_log_spectral,baseline_alpha,variant_alpha,delta_alpha,flagged\n",
    );
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    for row in &report.layers {
        writer
            .write_record([
                row.layer_name.clone(),
                row.slice_index.to_string(),
                row.baseline_log_spectral.to_string(),
                row.variant_log_spectral.to_string(),
                row.delta_log_spectral.to_string(),
                opt_num(row.baseline_alpha),
                opt_num(row.variant_alpha),
                opt_num(row.delta_alpha),
                row.flagged.to_string(),
            ])
            .expect("writing to a Vec cannot fail");
    }
    out.push_str(&String::from_utf8(writer.into_inner().expect("vec writer")).expect("utf-8"));
    out
}
