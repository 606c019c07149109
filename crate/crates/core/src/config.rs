//! Tunables shared across the analysis pipeline.
//!
//! Every knob that influences a report lives here so the report's config
//! echo can reproduce a run exactly.

use serde::{Deserialize, Serialize};

/// Axis convention for rank-4 convolution tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvLayout {
    /// `(out, in, kh, kw)`, the common export layout.
    Oikk,
    /// `(kh, kw, in, out)`.
    Kkio,
}

/// How convolution slices enter model averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SliceWeighting {
    /// Every 2D matrix counts once, so a k×k convolution contributes
    /// k² terms (default).
    Matrix,
    /// Slices of one convolution tensor are averaged first, so every
    /// named layer contributes one term.
    Layer,
}

/// Logarithm base used for every norm/weighted metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LogBase {
    #[serde(rename = "10")]
    Ten,
    #[serde(rename = "e")]
    E,
}

impl LogBase {
    pub fn log(self, x: f64) -> f64 {
        match self {
            LogBase::Ten => x.log10(),
            LogBase::E => x.ln(),
        }
    }
}

/// Full configuration for one analysis run.
///
/// Serialized verbatim into every report; re-running with the echoed
/// values on the same input reproduces the output byte for byte.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditConfig {
    /// Matrices with fewer than this many columns (after orientation) are skipped.
    pub min_matrix_dim: usize,
    /// If non-empty, only tensors matching one of these regexes are analyzed.
    pub include_patterns: Vec<String>,
    /// Tensors matching any of these regexes are skipped.
    pub exclude_patterns: Vec<String>,
    /// Exclude embedding-like matrices from model averages.
    pub skip_embeddings: bool,
    /// Aspect-ratio threshold for embedding-like detection (Q must exceed this).
    pub embedding_q_threshold: f64,
    /// Name substrings that mark a tensor as embedding-like.
    pub embedding_name_patterns: Vec<String>,
    pub conv_layout: ConvLayout,
    pub conv_slice_weighting: SliceWeighting,
    /// Minimum number of tail points a power-law fit may use.
    pub min_tail: usize,
    /// Fits whose winning tail is shorter than this are flagged SHORT_TAIL.
    pub short_tail_threshold: usize,
    pub log_base: LogBase,
    /// Divide eigenvalues by N (rows). Off by default so that the trace of
    /// X equals the squared Frobenius norm exactly.
    pub normalize_esd_by_n: bool,
    /// Eigenvalues below `lambda_max * zero_filter_rel_eps` are dropped.
    pub zero_filter_rel_eps: f64,
    /// Single-model collapse: flag layers this far (log units) below the median spectral log-norm.
    pub collapse_single_threshold: f64,
    /// Paired collapse: flag layers whose spectral log-norm drops by more than this.
    pub collapse_pair_threshold: f64,
    /// Paired collapse: suppress flags when the median shift exceeds this.
    pub collapse_pair_median_gate: f64,
    /// Worker threads; `None` uses available parallelism. Not part of
    /// the config echo: thread count never changes a result.
    #[serde(skip)]
    pub jobs: Option<usize>,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            min_matrix_dim: 50,
            include_patterns: Vec::new(),
            exclude_patterns: Vec::new(),
            skip_embeddings: true,
            embedding_q_threshold: 8.0,
            embedding_name_patterns: vec![
                "embed".to_string(),
                "emb.".to_string(),
                "wte".to_string(),
                "wpe".to_string(),
                "vocab".to_string(),
            ],
            conv_layout: ConvLayout::Oikk,
            conv_slice_weighting: SliceWeighting::Matrix,
            min_tail: 5,
            short_tail_threshold: 20,
            log_base: LogBase::Ten,
            normalize_esd_by_n: false,
            zero_filter_rel_eps: 1e-10,
            collapse_single_threshold: 2.0,
            collapse_pair_threshold: 1.0,
            collapse_pair_median_gate: 0.25,
            jobs: None,
        }
    }
}
