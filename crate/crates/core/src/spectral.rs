//! Empirical spectral density of X = WᵀW for a layer matrix.
//!
//! Eigenvalues are squared singular values of W, computed by SVD rather
//! than by forming WᵀW, which is numerically stabler for tall matrices.
//! By default there is no 1/N factor: the eigenvalue sum then equals the
//! squared Frobenius norm exactly and the largest eigenvalue equals the
//! squared spectral norm. The power-law exponent fitted downstream is
//! unaffected either way, being scale-invariant.

use nalgebra::DMatrix;
use serde::Serialize;
use thiserror::Error;

use crate::config::AuditConfig;
use crate::extract::LayerMatrix;

const SVD_MAX_ITER: usize = 10_000;

/// Sorted eigenvalue spectrum of one layer matrix.
#[derive(Debug, Clone)]
pub struct Esd {
    /// Ascending, strictly positive after the near-zero filter.
    pub eigenvalues: Vec<f64>,
    pub lambda_max: f64,
    /// Eigenvalues removed by the near-zero filter.
    pub n_dropped: usize,
    /// Eigenvalue sum before filtering; equals ‖W‖²_F when the 1/N
    /// normalization is off.
    pub sum_prefilter: f64,
    pub source_layer: String,
    pub source_slice: usize,
}

impl Esd {
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }
}

/// Eigenvalue histogram, linear or log10-spaced.
#[derive(Debug, Clone, Serialize)]
pub struct Histogram {
    /// Bin boundaries in the eigenvalue domain (geometric when log-scaled).
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub log_scaled: bool,
}

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("SVD did not converge for layer {layer} (slice {slice})")]
    SvdFailure { layer: String, slice: usize },
    #[error("layer {layer} (slice {slice}) is identically zero")]
    AllZeroMatrix { layer: String, slice: usize },
    #[error("empty spectrum")]
    EmptySpectrum,
}

/// Compute the ESD of a layer matrix.
///
/// Eigenvalues below `lambda_max * zero_filter_rel_eps` are dropped and
/// counted in `n_dropped`; rank-deficient layers would otherwise poison
/// log-domain fits.
pub fn compute_esd(matrix: &LayerMatrix, config: &AuditConfig) -> Result<Esd, SpectralError> {
    compute_esd_values(
        &matrix.values,
        config,
        &matrix.layer_name,
        matrix.slice_index,
    )
}

/// ESD of a bare matrix; used by [`compute_esd`] and directly by tests.
pub fn compute_esd_values(
    values: &DMatrix<f64>,
    config: &AuditConfig,
    layer: &str,
    slice: usize,
) -> Result<Esd, SpectralError> {
    let svd =
        nalgebra::linalg::SVD::try_new(values.clone(), false, false, f64::EPSILON, SVD_MAX_ITER)
            .ok_or_else(|| SpectralError::SvdFailure {
                layer: layer.to_string(),
                slice,
            })?;

    let scale = if config.normalize_esd_by_n {
        1.0 / values.nrows() as f64
    } else {
        1.0
    };
    let mut eigenvalues: Vec<f64> = svd.singular_values.iter().map(|s| s * s * scale).collect();
    eigenvalues.sort_by(|a, b| a.partial_cmp(b).expect("singular values are finite"));

    let lambda_max = *eigenvalues
        .last()
        .expect("matrix has at least one singular value");
    if lambda_max <= 0.0 {
        return Err(SpectralError::AllZeroMatrix {
            layer: layer.to_string(),
            slice,
        });
    }
    let sum_prefilter = eigenvalues.iter().sum();
    let eps = config.zero_filter_rel_eps * lambda_max;
    let cut = eigenvalues.partition_point(|&v| v < eps);
    let kept = eigenvalues.split_off(cut);

    Ok(Esd {
        eigenvalues: kept,
        lambda_max,
        n_dropped: cut,
        sum_prefilter,
        source_layer: layer.to_string(),
        source_slice: slice,
    })
}

/// Equal-width histogram over the observed eigenvalue range.
///
/// Bins are half-open on the right except the last, which includes its
/// right edge, so every eigenvalue lands in exactly one bin.
pub fn esd_histogram(
    esd: &Esd,
    n_bins: usize,
    log_scaled: bool,
) -> Result<Histogram, SpectralError> {
    assert!(n_bins >= 1, "histogram needs at least one bin");
    if esd.is_empty() {
        return Err(SpectralError::EmptySpectrum);
    }

    let transform = |v: f64| if log_scaled { v.log10() } else { v };
    let lo = transform(esd.eigenvalues[0]);
    let hi = transform(esd.lambda_max);
    let span = hi - lo;

    let mut counts = vec![0u64; n_bins];
    for &v in &esd.eigenvalues {
        let idx = if span > 0.0 {
            (((transform(v) - lo) / span * n_bins as f64) as usize).min(n_bins - 1)
        } else {
            n_bins - 1
        };
        counts[idx] += 1;
    }

    let bin_edges = (0..=n_bins)
        .map(|i| {
            let t = lo + span * i as f64 / n_bins as f64;
            if log_scaled {
                10f64.powf(t)
            } else {
                t
            }
        })
        .collect();

    Ok(Histogram {
        bin_edges,
        counts,
        log_scaled,
    })
}
