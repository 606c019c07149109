//! Conversion of named tensors into analyzable 2D layer matrices.
//!
//! Rank-2 tensors pass through as single matrices; rank-4 convolution
//! tensors are cut into one matrix per kernel position and rescaled by
//! k/sqrt(2) so they sit on the same scale as dense layers. Every matrix
//! is oriented so that rows >= columns, which leaves its singular values
//! unchanged.

use nalgebra::DMatrix;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{AuditConfig, ConvLayout};
use crate::tensor_io::{TensorEntry, TensorStore};

/// Structural classification of a layer matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Dense,
    Conv1D,
    #[serde(rename = "Conv2D-slice")]
    Conv2DSlice,
    Attention,
    #[serde(rename = "Embedding-like")]
    EmbeddingLike,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Dense => "Dense",
            LayerKind::Conv1D => "Conv1D",
            LayerKind::Conv2DSlice => "Conv2D-slice",
            LayerKind::Attention => "Attention",
            LayerKind::EmbeddingLike => "Embedding-like",
        }
    }
}

/// One oriented, rescaled 2D weight matrix with provenance.
#[derive(Debug, Clone)]
pub struct LayerMatrix {
    pub model_id: String,
    pub layer_name: String,
    /// Ordinal in the deterministic traversal (shared by slices of one tensor).
    pub layer_id: usize,
    pub kind: LayerKind,
    /// Kernel position in row-major order; 0 for non-convolutional matrices.
    pub slice_index: usize,
    /// Rescale already applied to `values`: k/sqrt(2) for conv slices, 1 otherwise.
    pub rescale_factor: f64,
    pub values: DMatrix<f64>,
}

impl LayerMatrix {
    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.values.ncols()
    }

    /// Aspect ratio Q = N/M >= 1.
    pub fn aspect_ratio(&self) -> f64 {
        self.values.nrows() as f64 / self.values.ncols() as f64
    }
}

/// A tensor that produced no matrices, with the reason it was passed over.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct SkipRecord {
    pub tensor: String,
    pub reason: String,
}

/// Matrices plus the record of everything that was skipped.
#[derive(Debug, Clone)]
pub struct Extraction {
    pub matrices: Vec<LayerMatrix>,
    pub skipped: Vec<SkipRecord>,
}

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error("no analyzable layers: all {} tensors were skipped", skipped.len())]
    NoAnalyzableLayers { skipped: Vec<SkipRecord> },
    #[error("convolution tensor {tensor} has a zero-length axis")]
    DegenerateKernel { tensor: String },
    #[error("invalid filter pattern {pattern:?}: {message}")]
    BadPattern { pattern: String, message: String },
}

/// Cut a rank-4 convolution tensor into `kh * kw` matrices of shape
/// `(out, in)`, in row-major kernel order, each rescaled by k/sqrt(2)
/// with k the geometric mean of the kernel sides.
pub fn slice_conv2d(
    name: &str,
    tensor: &TensorEntry,
    layout: ConvLayout,
) -> Result<Vec<DMatrix<f64>>, ExtractError> {
    assert_eq!(tensor.rank(), 4, "slice_conv2d requires a rank-4 tensor");
    let dims = [
        tensor.shape[0],
        tensor.shape[1],
        tensor.shape[2],
        tensor.shape[3],
    ];
    let (out_c, in_c, kh, kw) = match layout {
        ConvLayout::Oikk => (dims[0], dims[1], dims[2], dims[3]),
        ConvLayout::Kkio => (dims[3], dims[2], dims[0], dims[1]),
    };
    if out_c == 0 || in_c == 0 || kh == 0 || kw == 0 {
        return Err(ExtractError::DegenerateKernel {
            tensor: name.to_string(),
        });
    }
    let rescale = conv_rescale_factor(kh, kw);

    // Row-major strides over the declared shape.
    let s3 = 1;
    let s2 = dims[3];
    let s1 = dims[3] * dims[2];
    let s0 = dims[3] * dims[2] * dims[1];
    let index = |a: usize, b: usize, c: usize, d: usize| a * s0 + b * s1 + c * s2 + d * s3;

    let mut slices = Vec::with_capacity(kh * kw);
    for y in 0..kh {
        for x in 0..kw {
            let slice = DMatrix::from_fn(out_c, in_c, |o, i| {
                let flat = match layout {
                    ConvLayout::Oikk => index(o, i, y, x),
                    ConvLayout::Kkio => index(y, x, i, o),
                };
                tensor.values[flat] * rescale
            });
            slices.push(slice);
        }
    }
    Ok(slices)
}

/// k/sqrt(2) with k = sqrt(kh*kw), so non-square kernels degrade to the
/// square rule smoothly.
pub fn conv_rescale_factor(kh: usize, kw: usize) -> f64 {
    ((kh * kw) as f64).sqrt() / 2f64.sqrt()
}

struct Filters {
    include: Vec<Regex>,
    exclude: Vec<Regex>,
}

fn compile_filters(config: &AuditConfig) -> Result<Filters, ExtractError> {
    let compile = |patterns: &[String]| -> Result<Vec<Regex>, ExtractError> {
        patterns
            .iter()
            .map(|p| {
                Regex::new(p).map_err(|e| ExtractError::BadPattern {
                    pattern: p.clone(),
                    message: e.to_string(),
                })
            })
            .collect()
    };
    Ok(Filters {
        include: compile(&config.include_patterns)?,
        exclude: compile(&config.exclude_patterns)?,
    })
}

fn is_embedding_like(name: &str, n: usize, m: usize, config: &AuditConfig) -> bool {
    let q = n as f64 / m as f64;
    if q <= config.embedding_q_threshold {
        return false;
    }
    let lower = name.to_lowercase();
    config
        .embedding_name_patterns
        .iter()
        .any(|p| lower.contains(&p.to_lowercase()))
}

fn classify_rank2(name: &str, n: usize, m: usize, config: &AuditConfig) -> LayerKind {
    if is_embedding_like(name, n, m, config) {
        return LayerKind::EmbeddingLike;
    }
    let lower = name.to_lowercase();
    const ATTENTION_HINTS: [&str; 8] = [
        "attn",
        "attention",
        "q_proj",
        "k_proj",
        "v_proj",
        "o_proj",
        "query",
        "key",
    ];
    if ATTENTION_HINTS.iter().any(|h| lower.contains(h)) {
        LayerKind::Attention
    } else if lower.contains("conv1d") {
        LayerKind::Conv1D
    } else {
        LayerKind::Dense
    }
}

/// Orient a matrix so rows >= columns. Transposition never changes the
/// singular values.
fn orient(m: DMatrix<f64>) -> DMatrix<f64> {
    if m.nrows() >= m.ncols() {
        m
    } else {
        m.transpose()
    }
}

/// Extract every analyzable 2D matrix from a store.
///
/// Traversal order is the lexicographic tensor-name sort, optionally
/// overridden by `explicit_order` (names listed there come first, in the
/// given order). `layer_id` follows the traversal and is shared by all
/// slices of one convolution tensor. Output is a pure function of the
/// inputs, independent of thread count.
pub fn extract_layer_matrices(
    store: &TensorStore,
    model_id: &str,
    config: &AuditConfig,
    explicit_order: Option<&[String]>,
) -> Result<Extraction, ExtractError> {
    let filters = compile_filters(config)?;
    // Dimension floor of 2: a 1-column matrix has no spectrum to speak
    // of and would trip the SVD preconditions downstream.
    let min_dim = config.min_matrix_dim.max(2);

    let mut names: Vec<&String> = store.tensors.keys().collect();
    if let Some(order) = explicit_order {
        let position = |name: &str| order.iter().position(|o| o == name).unwrap_or(usize::MAX);
        names.sort_by(|a, b| position(a).cmp(&position(b)).then_with(|| a.cmp(b)));
    }

    let mut matrices = Vec::new();
    let mut skipped = Vec::new();
    let skip = |tensor: &str, reason: &str, skipped: &mut Vec<SkipRecord>| {
        skipped.push(SkipRecord {
            tensor: tensor.to_string(),
            reason: reason.to_string(),
        });
    };

    let mut layer_id = 0usize;
    for name in names {
        let entry = &store.tensors[name];

        if !filters.include.is_empty() && !filters.include.iter().any(|r| r.is_match(name)) {
            skip(name, "not-included-by-pattern", &mut skipped);
            continue;
        }
        if filters.exclude.iter().any(|r| r.is_match(name)) {
            skip(name, "excluded-by-pattern", &mut skipped);
            continue;
        }

        match entry.rank() {
            0 => skip(name, "rank-0", &mut skipped),
            1 => skip(name, "rank-1", &mut skipped),
            3 => skip(name, "rank-3-unsupported", &mut skipped),
            2 => {
                let rows = entry.shape[0];
                let cols = entry.shape[1];
                let (n, m) = (rows.max(cols), rows.min(cols));
                if m < min_dim {
                    skip(name, "below-min-dim", &mut skipped);
                    continue;
                }
                let kind = classify_rank2(name, n, m, config);
                let raw = DMatrix::from_row_slice(rows, cols, &entry.values);
                matrices.push(LayerMatrix {
                    model_id: model_id.to_string(),
                    layer_name: name.clone(),
                    layer_id,
                    kind,
                    slice_index: 0,
                    rescale_factor: 1.0,
                    values: orient(raw),
                });
                layer_id += 1;
            }
            4 => {
                let (out_c, in_c) = match config.conv_layout {
                    ConvLayout::Oikk => (entry.shape[0], entry.shape[1]),
                    ConvLayout::Kkio => (entry.shape[3], entry.shape[2]),
                };
                if out_c.min(in_c) < min_dim {
                    // Covers zero axes as well: a degenerate kernel can
                    // never reach the minimum dimension.
                    skip(name, "below-min-dim", &mut skipped);
                    continue;
                }
                match slice_conv2d(name, entry, config.conv_layout) {
                    Ok(slices) => {
                        for (slice_index, slice) in slices.into_iter().enumerate() {
                            let (kh, kw) = match config.conv_layout {
                                ConvLayout::Oikk => (entry.shape[2], entry.shape[3]),
                                ConvLayout::Kkio => (entry.shape[0], entry.shape[1]),
                            };
                            matrices.push(LayerMatrix {
                                model_id: model_id.to_string(),
                                layer_name: name.clone(),
                                layer_id,
                                kind: LayerKind::Conv2DSlice,
                                slice_index,
                                rescale_factor: conv_rescale_factor(kh, kw),
                                values: orient(slice),
                            });
                        }
                        layer_id += 1;
                    }
                    Err(ExtractError::DegenerateKernel { .. }) => {
                        skip(name, "degenerate-kernel", &mut skipped);
                    }
                    Err(e) => return Err(e),
                }
            }
            _ => unreachable!("parser rejects rank > 4"),
        }
    }

    if matrices.is_empty() {
        return Err(ExtractError::NoAnalyzableLayers { skipped });
    }
    Ok(Extraction { matrices, skipped })
}
