//! Maximum-likelihood power-law fit of an eigenvalue tail.
//!
//! The tail above a lower cutoff x_min is modeled as a continuous power
//! law p(x) ∝ x^(−α). The exponent comes from the closed-form MLE
//!
//! ```text
//! α̂ = 1 + n / Σ ln(x_i / x_min)
//! ```
//!
//! and x_min is chosen by scanning every observed eigenvalue and keeping
//! the candidate whose fitted CDF is closest to the empirical tail CDF in
//! Kolmogorov-Smirnov distance. The K-S convention used throughout is the
//! one-sided form D = max_i |i/n − P(x_(i))| with P(x) = 1 − (x_min/x)^(α−1).
//! The upper end of the spectrum is recorded but is not a fit parameter.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::AuditConfig;
use crate::spectral::Esd;

/// Fit-quality flags. `Ok` appears alone; warnings may combine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FitFlag {
    #[serde(rename = "OK")]
    Ok,
    #[serde(rename = "ALPHA_BELOW_1_5")]
    AlphaBelow1_5,
    /// Exponents this large usually mean the tail is not power-law-like
    /// and the fitted value is unreliable.
    #[serde(rename = "ALPHA_OVER_6")]
    AlphaOver6,
    #[serde(rename = "SHORT_TAIL")]
    ShortTail,
}

impl FitFlag {
    pub fn as_str(self) -> &'static str {
        match self {
            FitFlag::Ok => "OK",
            FitFlag::AlphaBelow1_5 => "ALPHA_BELOW_1_5",
            FitFlag::AlphaOver6 => "ALPHA_OVER_6",
            FitFlag::ShortTail => "SHORT_TAIL",
        }
    }
}

/// Result of a truncated power-law fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlFit {
    pub alpha: f64,
    /// Selected lower cutoff; always one of the observed eigenvalues.
    pub lambda_min: f64,
    /// Largest observed eigenvalue.
    pub lambda_max: f64,
    pub ks_distance: f64,
    /// Number of eigenvalues at or above `lambda_min`.
    pub n_tail: usize,
    pub flags: Vec<FitFlag>,
}

impl PlFit {
    pub fn flags_string(&self) -> String {
        self.flags
            .iter()
            .map(|f| f.as_str())
            .collect::<Vec<_>>()
            .join(";")
    }
}

#[derive(Debug, Error)]
pub enum FitError {
    #[error("degenerate tail: all points equal the cutoff, the MLE diverges")]
    DegenerateTail,
    #[error("too few eigenvalues: {n} present, {min_tail} required")]
    TooFewEigenvalues { n: usize, min_tail: usize },
}

/// Closed-form continuous-power-law MLE for the exponent.
///
/// Requires every value ≥ `x_min` > 0 and at least one value strictly
/// above it. Scale-invariant: rescaling the tail and the cutoff together
/// leaves the estimate unchanged.
pub fn mle_alpha(tail: &[f64], x_min: f64) -> Result<f64, FitError> {
    debug_assert!(x_min > 0.0);
    debug_assert!(tail.len() >= 2);
    debug_assert!(tail.iter().all(|&x| x >= x_min));
    let log_sum: f64 = tail.iter().map(|&x| (x / x_min).ln()).sum();
    if log_sum <= 0.0 {
        return Err(FitError::DegenerateTail);
    }
    Ok(1.0 + tail.len() as f64 / log_sum)
}

/// One-sided Kolmogorov-Smirnov distance between the empirical tail CDF
/// and the fitted power-law CDF, evaluated at the order statistics.
pub fn ks_distance(sorted_tail: &[f64], x_min: f64, alpha: f64) -> f64 {
    debug_assert!(alpha > 1.0);
    let n = sorted_tail.len() as f64;
    sorted_tail
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let empirical = (i + 1) as f64 / n;
            let fitted = 1.0 - (x_min / x).powf(alpha - 1.0);
            (empirical - fitted).abs()
        })
        .fold(0.0, f64::max)
}

/// Fit a power law to an ESD tail, selecting the cutoff automatically.
///
/// Every distinct eigenvalue that leaves at least `min_tail` points is
/// tried as x_min; the candidate with the smallest K-S distance wins,
/// ties going to the smallest cutoff (largest tail). The scan is
/// sequential and the result is bit-for-bit deterministic.
pub fn fit_power_law(esd: &Esd, config: &AuditConfig) -> Result<PlFit, FitError> {
    let eigenvalues = &esd.eigenvalues;
    let n = eigenvalues.len();
    let min_tail = config.min_tail.max(2);
    if n < min_tail {
        return Err(FitError::TooFewEigenvalues { n, min_tail });
    }

    let mut best: Option<(f64, f64, f64, usize)> = None; // (D, x_min, alpha, n_tail)
    for start in 0..=(n - min_tail) {
        let x_min = eigenvalues[start];
        if start > 0 && x_min == eigenvalues[start - 1] {
            continue; // same candidate as the previous index
        }
        let tail = &eigenvalues[start..];
        let alpha = match mle_alpha(tail, x_min) {
            Ok(a) => a,
            Err(FitError::DegenerateTail) => continue,
            Err(e) => return Err(e),
        };
        let d = ks_distance(tail, x_min, alpha);
        let better = match &best {
            None => true,
            Some((best_d, ..)) => d < *best_d,
        };
        if better {
            best = Some((d, x_min, alpha, tail.len()));
        }
    }

    let (ks, lambda_min, alpha, n_tail) = best.ok_or(FitError::DegenerateTail)?;
    let mut flags = Vec::new();
    if alpha < 1.5 {
        flags.push(FitFlag::AlphaBelow1_5);
    }
    if alpha > 6.0 {
        flags.push(FitFlag::AlphaOver6);
    }
    if n_tail < config.short_tail_threshold {
        flags.push(FitFlag::ShortTail);
    }
    if flags.is_empty() {
        flags.push(FitFlag::Ok);
    }

    Ok(PlFit {
        alpha,
        lambda_min,
        lambda_max: esd.lambda_max,
        ks_distance: ks,
        n_tail,
        flags,
    })
}

/// Deterministic tail sample at the quantiles of a pure power law:
/// x_i = x_min ((i − 1/2)/n)^(−1/(α−1)), ascending. Used by tests and
/// the acceptance suite as an analytic generator.
pub fn powerlaw_quantile_sample(alpha: f64, x_min: f64, n: usize) -> Vec<f64> {
    let exponent = -1.0 / (alpha - 1.0);
    let mut sample: Vec<f64> = (1..=n)
        .map(|i| x_min * (((i as f64) - 0.5) / n as f64).powf(exponent))
        .collect();
    sample.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    sample
}
