//! Regression of model-level quality metrics against reported accuracies.
//!
//! For each (series, metric) pair: ordinary least squares with RMSE and
//! R², plus the tie-corrected Kendall τ-b rank correlation. Reported
//! accuracies arrive as Top-1/Top-5 percentages; error targets are
//! derived as 100 − accuracy. By default the accuracy/error target is
//! the dependent variable and the metric the predictor; a switch flips
//! the axes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

/// Names of the model-level metric columns, in report order.
pub const METRIC_NAMES: [&str; 5] = [
    "log_frobenius",
    "log_spectral",
    "weighted_alpha",
    "log_alpha_norm",
    "alpha_bar",
];

/// The four headline metrics used by `--all-metrics`.
pub const HEADLINE_METRICS: [&str; 4] = [
    "log_frobenius",
    "log_spectral",
    "weighted_alpha",
    "log_alpha_norm",
];

/// One model of an architecture series with its reported accuracy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelRecord {
    pub series: String,
    pub model_id: String,
    /// Reported Top-1 accuracy in percent.
    pub reported_top1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reported_top5: Option<f64>,
    /// Flat metric map keyed by [`METRIC_NAMES`].
    pub metrics: BTreeMap<String, f64>,
}

/// Quantity regressed against the metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Top1Error,
    Top1Acc,
    Top5Error,
}

impl Target {
    pub fn as_str(self) -> &'static str {
        match self {
            Target::Top1Error => "top1_error",
            Target::Top1Acc => "top1_acc",
            Target::Top5Error => "top5_error",
        }
    }

    fn value_for(self, record: &ModelRecord) -> Option<f64> {
        match self {
            Target::Top1Error => Some(100.0 - record.reported_top1),
            Target::Top1Acc => Some(record.reported_top1),
            Target::Top5Error => record.reported_top5.map(|a| 100.0 - a),
        }
    }
}

/// Which variable plays dependent in the OLS fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// y = target, x = metric (default).
    TargetOnMetric,
    /// y = metric, x = target.
    MetricOnTarget,
}

/// OLS summary statistics for one (series, metric, target) triple.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegressionResult {
    pub series: String,
    pub metric_name: String,
    pub target: Target,
    pub direction: Direction,
    pub n: usize,
    pub slope: f64,
    pub intercept: f64,
    pub rmse: f64,
    pub r2: f64,
    pub kendall_tau: f64,
}

/// One plot row: observed point, fitted value, 95% band on the mean response.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlotPoint {
    pub x: f64,
    pub y: f64,
    pub y_hat: f64,
    pub band_lo: f64,
    pub band_hi: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Evaluation {
    pub result: RegressionResult,
    pub plot: Vec<PlotPoint>,
}

#[derive(Debug, Error)]
pub enum RecordCsvError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad CSV in {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: missing required column {column:?}")]
    MissingColumn { path: String, column: String },
    #[error("{path} row {row}: {message}")]
    BadValue {
        path: String,
        row: usize,
        message: String,
    },
}

#[derive(Debug, Error)]
pub enum RegressError {
    #[error("length mismatch: {x} x-values vs {y} y-values")]
    LengthMismatch { x: usize, y: usize },
    #[error("need at least {required} points, found {found}")]
    TooFewPoints { required: usize, found: usize },
    #[error("predictor is constant")]
    ConstantPredictor,
    #[error("target is constant but residuals are nonzero")]
    DegenerateTarget,
    #[error("all pairs tied; rank correlation undefined")]
    AllTied,
    #[error("series {series}: {found} usable models, {required} required")]
    TooFewModels {
        series: String,
        found: usize,
        required: usize,
    },
    #[error("unknown metric {0:?}")]
    MissingMetric(String),
    #[error("records span multiple series: {0:?}; filter to one")]
    MixedSeries(Vec<String>),
}

/// Simple least squares of y on x.
pub fn ols_regression(x: &[f64], y: &[f64]) -> Result<(f64, f64, f64, f64), RegressError> {
    if x.len() != y.len() {
        return Err(RegressError::LengthMismatch {
            x: x.len(),
            y: y.len(),
        });
    }
    let n = x.len();
    if n < 3 {
        return Err(RegressError::TooFewPoints {
            required: 3,
            found: n,
        });
    }
    if x.iter().all(|&v| v == x[0]) {
        return Err(RegressError::ConstantPredictor);
    }

    let nf = n as f64;
    let x_mean = x.iter().sum::<f64>() / nf;
    let y_mean = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|&v| (v - x_mean).powi(2)).sum();
    let sxy: f64 = x
        .iter()
        .zip(y)
        .map(|(&a, &b)| (a - x_mean) * (b - y_mean))
        .sum();
    let slope = sxy / sxx;
    let intercept = y_mean - slope * x_mean;

    let ss_res: f64 = x
        .iter()
        .zip(y)
        .map(|(&a, &b)| (b - (slope * a + intercept)).powi(2))
        .sum();
    let ss_tot: f64 = y.iter().map(|&v| (v - y_mean).powi(2)).sum();
    let rmse = (ss_res / nf).sqrt();
    let r2 = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res <= f64::EPSILON * nf {
        1.0
    } else {
        return Err(RegressError::DegenerateTarget);
    };
    Ok((slope, intercept, rmse, r2))
}

/// Tie-corrected Kendall τ-b over all pairs.
///
/// τ-b = (C − D) / sqrt((C + D + Tx)(C + D + Ty)), where ties in both
/// coordinates count toward neither correction term. Quadratic in n,
/// which is fine at meta-analysis sample sizes.
pub fn kendall_tau(x: &[f64], y: &[f64]) -> Result<f64, RegressError> {
    if x.len() != y.len() {
        return Err(RegressError::LengthMismatch {
            x: x.len(),
            y: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(RegressError::TooFewPoints {
            required: 2,
            found: x.len(),
        });
    }
    let sign = |a: f64, b: f64| -> i8 {
        match a.partial_cmp(&b).expect("finite values") {
            std::cmp::Ordering::Less => -1,
            std::cmp::Ordering::Equal => 0,
            std::cmp::Ordering::Greater => 1,
        }
    };
    let (mut concordant, mut discordant, mut ties_x, mut ties_y) = (0u64, 0u64, 0u64, 0u64);
    for i in 0..x.len() {
        for j in (i + 1)..x.len() {
            let dx = sign(x[i], x[j]);
            let dy = sign(y[i], y[j]);
            if dx == 0 && dy == 0 {
                continue;
            } else if dx == 0 {
                ties_x += 1;
            } else if dy == 0 {
                ties_y += 1;
            } else if dx == dy {
                concordant += 1;
            } else {
                discordant += 1;
            }
        }
    }
    let cd = concordant + discordant;
    let denom = (((cd + ties_x) as f64) * ((cd + ties_y) as f64)).sqrt();
    if denom == 0.0 {
        return Err(RegressError::AllTied);
    }
    Ok((concordant as f64 - discordant as f64) / denom)
}

const MIN_MODELS: usize = 3;

/// Regress one metric against a target over one series of models.
///
/// Records missing the metric or the target are dropped; mixing series is
/// an error so that cross-architecture points can never contaminate a
/// within-series trend silently.
pub fn evaluate_metric(
    records: &[ModelRecord],
    metric_name: &str,
    target: Target,
    direction: Direction,
) -> Result<Evaluation, RegressError> {
    if !METRIC_NAMES.contains(&metric_name) {
        return Err(RegressError::MissingMetric(metric_name.to_string()));
    }
    let mut series_names: Vec<String> = records.iter().map(|r| r.series.clone()).collect();
    series_names.sort();
    series_names.dedup();
    if series_names.len() > 1 {
        return Err(RegressError::MixedSeries(series_names));
    }
    let series = series_names.into_iter().next().unwrap_or_default();

    let mut pairs: Vec<(f64, f64)> = records
        .iter()
        .filter_map(|r| {
            let metric = r.metrics.get(metric_name).copied()?;
            let t = target.value_for(r)?;
            Some(match direction {
                Direction::TargetOnMetric => (metric, t),
                Direction::MetricOnTarget => (t, metric),
            })
        })
        .collect();
    if pairs.len() < MIN_MODELS {
        return Err(RegressError::TooFewModels {
            series,
            found: pairs.len(),
            required: MIN_MODELS,
        });
    }
    pairs.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let x: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let y: Vec<f64> = pairs.iter().map(|p| p.1).collect();

    let (slope, intercept, rmse, r2) = ols_regression(&x, &y)?;
    let tau = kendall_tau(&x, &y)?;
    let plot = confidence_band(&x, &y, slope, intercept);

    Ok(Evaluation {
        result: RegressionResult {
            series,
            metric_name: metric_name.to_string(),
            target,
            direction,
            n: x.len(),
            slope,
            intercept,
            rmse,
            r2,
            kendall_tau: tau,
        },
        plot,
    })
}

/// Pointwise 95% confidence band on the mean response, using the
/// t-distribution with n − 2 degrees of freedom.
fn confidence_band(x: &[f64], y: &[f64], slope: f64, intercept: f64) -> Vec<PlotPoint> {
    let n = x.len() as f64;
    let x_mean = x.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|&v| (v - x_mean).powi(2)).sum();
    let ss_res: f64 = x
        .iter()
        .zip(y)
        .map(|(&a, &b)| (b - (slope * a + intercept)).powi(2))
        .sum();
    let s2 = ss_res / (n - 2.0);
    let t = StudentsT::new(0.0, 1.0, n - 2.0)
        .expect("n >= 3 gives positive degrees of freedom")
        .inverse_cdf(0.975);

    x.iter()
        .zip(y)
        .map(|(&xv, &yv)| {
            let y_hat = slope * xv + intercept;
            let half = t * (s2 * (1.0 / n + (xv - x_mean).powi(2) / sxx)).sqrt();
            PlotPoint {
                x: xv,
                y: yv,
                y_hat,
                band_lo: y_hat - half,
                band_hi: y_hat + half,
            }
        })
        .collect()
}

/// Canonical column order of the model-record CSV.
pub const RECORD_CSV_HEADER: [&str; 9] = [
    "series",
    "model_id",
    "reported_top1",
    "reported_top5",
    "log_frobenius",
    "log_spectral",
    "weighted_alpha",
    "log_alpha_norm",
    "alpha_bar",
];

/// Load model records from a headed CSV.
///
/// `series`, `model_id`, and `reported_top1` are required columns; the
/// metric columns and `reported_top5` may be empty per row. Unknown
/// columns are ignored.
pub fn load_records(path: &std::path::Path) -> Result<Vec<ModelRecord>, RecordCsvError> {
    let path_str = path.display().to_string();
    let io_err = |source| RecordCsvError::Io {
        path: path_str.clone(),
        source,
    };
    let text = std::fs::read_to_string(path).map_err(io_err)?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|source| RecordCsvError::Csv {
            path: path_str.clone(),
            source,
        })?
        .clone();
    let column = |name: &str| headers.iter().position(|h| h == name);
    let required = |name: &str| {
        column(name).ok_or_else(|| RecordCsvError::MissingColumn {
            path: path_str.clone(),
            column: name.to_string(),
        })
    };
    let series_col = required("series")?;
    let model_col = required("model_id")?;
    let top1_col = required("reported_top1")?;
    let top5_col = column("reported_top5");
    let metric_cols: Vec<(String, usize)> = METRIC_NAMES
        .iter()
        .filter_map(|&m| column(m).map(|c| (m.to_string(), c)))
        .collect();

    let mut records = Vec::new();
    for (row_index, row) in reader.records().enumerate() {
        let row = row.map_err(|source| RecordCsvError::Csv {
            path: path_str.clone(),
            source,
        })?;
        let row_number = row_index + 2; // 1-based, after the header
        let cell = |col: usize| row.get(col).unwrap_or("");
        let parse_pct = |col: usize, what: &str| -> Result<Option<f64>, RecordCsvError> {
            let raw = cell(col);
            if raw.is_empty() {
                return Ok(None);
            }
            let v: f64 = raw.parse().map_err(|_| RecordCsvError::BadValue {
                path: path_str.clone(),
                row: row_number,
                message: format!("{what} {raw:?} is not a number"),
            })?;
            if !(0.0..=100.0).contains(&v) {
                return Err(RecordCsvError::BadValue {
                    path: path_str.clone(),
                    row: row_number,
                    message: format!("{what} {v} outside [0, 100]"),
                });
            }
            Ok(Some(v))
        };

        let reported_top1 =
            parse_pct(top1_col, "reported_top1")?.ok_or_else(|| RecordCsvError::BadValue {
                path: path_str.clone(),
                row: row_number,
                message: "reported_top1 is empty".to_string(),
            })?;
        let reported_top5 = match top5_col {
            Some(c) => parse_pct(c, "reported_top5")?,
            None => None,
        };
        let mut metrics = BTreeMap::new();
        for (name, col) in &metric_cols {
            let raw = cell(*col);
            if raw.is_empty() {
                continue;
            }
            let v: f64 = raw.parse().map_err(|_| RecordCsvError::BadValue {
                path: path_str.clone(),
                row: row_number,
                message: format!("metric {name} value {raw:?} is not a number"),
            })?;
            metrics.insert(name.clone(), v);
        }
        records.push(ModelRecord {
            series: cell(series_col).to_string(),
            model_id: cell(model_col).to_string(),
            reported_top1,
            reported_top5,
            metrics,
        });
    }
    Ok(records)
}

/// Render one record as a CSV line in [`RECORD_CSV_HEADER`] order.
pub fn record_csv_line(record: &ModelRecord) -> String {
    let metric = |name: &str| {
        record
            .metrics
            .get(name)
            .map(|v| v.to_string())
            .unwrap_or_default()
    };
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    writer
        .write_record([
            record.series.clone(),
            record.model_id.clone(),
            record.reported_top1.to_string(),
            record
                .reported_top5
                .map(|v| v.to_string())
                .unwrap_or_default(),
            metric("log_frobenius"),
            metric("log_spectral"),
            metric("weighted_alpha"),
            metric("log_alpha_norm"),
            metric("alpha_bar"),
        ])
        .expect("writing to a Vec cannot fail");
    String::from_utf8(writer.into_inner().expect("vec writer")).expect("utf-8")
}

/// Render the plot rows as CSV.
pub fn plot_csv(points: &[PlotPoint]) -> String {
    let mut out = String::from("x,y,y_hat,band_lo,band_hi\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            p.x, p.y, p.y_hat, p.band_lo, p.band_hi
        ));
    }
    out
}
