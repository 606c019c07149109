//! Command-line front end: `analyze`, `esd`, `compare`, `regress`.
//!
//! Exit codes: 0 success, 1 I/O or parse failure, 2 empty-result
//! conditions (nothing analyzable, unknown layer, too few models).
//! Failures print a machine-readable JSON object on stderr. Output
//! files are written atomically (temp file + rename).

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{AuditConfig, ConvLayout, LogBase, SliceWeighting};
use crate::extract::ExtractError;
use crate::metrics::MetricsError;
use crate::regression::{
    self, Direction, ModelRecord, RecordCsvError, RegressError, Target, HEADLINE_METRICS,
    RECORD_CSV_HEADER,
};
use crate::report::{self, AnalysisReport, AnalyzeError};
use crate::spectral;
use crate::tensor_io::{self, ParseError};

#[derive(Parser)]
#[command(
    name = "swa",
    version,
    about = "Spectral weight audit: eigenvalue spectra, power-law tails, and quality metrics from weight files alone"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true, env = "SWA_JOBS")]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Analyze a weight file and emit a model report plus a per-layer table.
    Analyze(AnalyzeArgs),
    /// Emit the eigenvalue histogram and fit overlay for one layer.
    Esd(EsdArgs),
    /// Compare a baseline weight file against a variant, layer by layer.
    Compare(CompareArgs),
    /// Regress model metrics against reported accuracies from a CSV.
    Regress(RegressArgs),
}

#[derive(Args, Clone)]
struct PipelineFlags {
    /// Skip matrices with fewer than this many columns.
    #[arg(long = "min-size", default_value_t = 50)]
    min_size: usize,
    /// Skip tensors matching this regex (repeatable).
    #[arg(long = "exclude")]
    exclude: Vec<String>,
    /// Analyze only tensors matching this regex (repeatable).
    #[arg(long = "include")]
    include: Vec<String>,
    /// Exclude embedding-like layers from model averages (default).
    #[arg(long = "skip-embeddings", conflicts_with = "keep_embeddings")]
    skip_embeddings: bool,
    /// Keep embedding-like layers in model averages.
    #[arg(long = "keep-embeddings")]
    keep_embeddings: bool,
    /// Minimum tail points for the power-law fit.
    #[arg(long = "min-tail", default_value_t = 5)]
    min_tail: usize,
    /// Logarithm base for all metrics.
    #[arg(long = "log-base", default_value = "10", value_parser = parse_log_base)]
    log_base: LogBase,
    /// Convolution tensor axis layout.
    #[arg(long = "conv-layout", value_enum, default_value_t = LayoutArg::Oikk)]
    conv_layout: LayoutArg,
    /// Weight model averages per matrix or per named layer.
    #[arg(long = "slice-weighting", value_enum, default_value_t = WeightingArg::Matrix)]
    slice_weighting: WeightingArg,
    /// Divide eigenvalues by the row count N.
    #[arg(long = "normalize-n")]
    normalize_n: bool,
    /// File listing tensor names in true depth order, one per line.
    #[arg(long = "order-file")]
    order_file: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum LayoutArg {
    Oikk,
    Kkio,
}

#[derive(Clone, Copy, ValueEnum)]
enum WeightingArg {
    Matrix,
    Layer,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    Json,
    Csv,
    Both,
}

impl FormatArg {
    fn json(self) -> bool {
        matches!(self, FormatArg::Json | FormatArg::Both)
    }
    fn csv(self) -> bool {
        matches!(self, FormatArg::Csv | FormatArg::Both)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TargetArg {
    Top1Error,
    Top1Acc,
    Top5Error,
}

impl From<TargetArg> for Target {
    fn from(t: TargetArg) -> Target {
        match t {
            TargetArg::Top1Error => Target::Top1Error,
            TargetArg::Top1Acc => Target::Top1Acc,
            TargetArg::Top5Error => Target::Top5Error,
        }
    }
}

fn parse_log_base(raw: &str) -> Result<LogBase, String> {
    match raw {
        "10" => Ok(LogBase::Ten),
        "e" => Ok(LogBase::E),
        other => Err(format!("log base must be 10 or e, got {other:?}")),
    }
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Weight file to analyze.
    weights: PathBuf,
    #[command(flatten)]
    pipeline: PipelineFlags,
    /// Directory for output files.
    #[arg(long = "out-dir", default_value = ".")]
    out_dir: PathBuf,
    #[arg(long = "format", value_enum, default_value_t = FormatArg::Both)]
    format: FormatArg,
    /// Embed a wall-clock timestamp in the report (off by default so
    /// identical runs stay byte-identical).
    #[arg(long)]
    stamp: bool,
    /// Append this model's metrics as a row to a series CSV.
    #[arg(long = "append-csv", requires = "series", requires = "top1")]
    append_csv: Option<PathBuf>,
    /// Series name for --append-csv.
    #[arg(long)]
    series: Option<String>,
    /// Reported Top-1 accuracy (percent) for --append-csv.
    #[arg(long)]
    top1: Option<f64>,
    /// Reported Top-5 accuracy (percent) for --append-csv.
    #[arg(long)]
    top5: Option<f64>,
}

#[derive(Args)]
struct EsdArgs {
    weights: PathBuf,
    /// Tensor name of the layer to inspect.
    #[arg(long)]
    layer: String,
    /// Kernel-position slice for convolution tensors.
    #[arg(long, default_value_t = 0)]
    slice: usize,
    /// Number of histogram bins.
    #[arg(long, default_value_t = 100)]
    bins: usize,
    /// Bin in log10 space.
    #[arg(long)]
    log: bool,
    #[command(flatten)]
    pipeline: PipelineFlags,
    #[arg(long = "out-dir", default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    baseline: PathBuf,
    variant: PathBuf,
    #[command(flatten)]
    pipeline: PipelineFlags,
    #[arg(long = "out-dir", default_value = ".")]
    out_dir: PathBuf,
    #[arg(long = "format", value_enum, default_value_t = FormatArg::Both)]
    format: FormatArg,
}

#[derive(Args)]
struct RegressArgs {
    /// Model-record CSV (series, model_id, reported_top1, metrics...).
    csv: PathBuf,
    /// Restrict to one architecture series (default: every series in the file).
    #[arg(long)]
    series: Option<String>,
    /// Metric column to regress.
    #[arg(
        long,
        required_unless_present = "all_metrics",
        conflicts_with = "all_metrics"
    )]
    metric: Option<String>,
    /// Run the four headline metrics and print a summary table.
    #[arg(long = "all-metrics")]
    all_metrics: bool,
    #[arg(long, value_enum, default_value_t = TargetArg::Top1Error)]
    target: TargetArg,
    /// Regress the metric on the target instead of the default direction.
    #[arg(long = "swap-axes")]
    swap_axes: bool,
    /// Drop a model id before regressing (repeatable).
    #[arg(long = "exclude-model")]
    exclude_model: Vec<String>,
    #[arg(long = "out-dir", default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot write {path}: {source}")]
    Write {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Analyze(#[from] AnalyzeError),
    #[error(transparent)]
    Records(#[from] RecordCsvError),
    #[error(transparent)]
    Regress(#[from] RegressError),
    #[error(transparent)]
    Spectral(#[from] spectral::SpectralError),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Read { .. } => "read-failure",
            CliError::Write { .. } => "write-failure",
            CliError::Parse(e) => match e {
                ParseError::MalformedHeader(_) => "malformed-header",
                ParseError::OverlappingRanges { .. } => "overlapping-ranges",
                ParseError::UnsupportedDtype { .. } => "unsupported-dtype",
                ParseError::NonFiniteValue { .. } => "non-finite-value",
            },
            CliError::Analyze(e) => match e {
                AnalyzeError::Parse(_) => "malformed-header",
                AnalyzeError::Extract(ExtractError::NoAnalyzableLayers { .. }) => {
                    "no-analyzable-layers"
                }
                AnalyzeError::Extract(ExtractError::BadPattern { .. }) => "bad-pattern",
                AnalyzeError::Extract(ExtractError::DegenerateKernel { .. }) => "degenerate-kernel",
                AnalyzeError::Metrics(MetricsError::NoIncludedLayers) => "no-included-layers",
                AnalyzeError::Metrics(MetricsError::InsufficientLayers { .. }) => {
                    "insufficient-layers"
                }
                AnalyzeError::UnknownLayer { .. } => "unknown-layer",
                AnalyzeError::NoMatchedLayers { .. } => "no-matched-layers",
            },
            CliError::Records(_) => "bad-records-csv",
            CliError::Regress(e) => match e {
                RegressError::TooFewModels { .. } => "too-few-models",
                RegressError::MissingMetric(_) => "missing-metric",
                RegressError::MixedSeries(_) => "mixed-series",
                _ => "regression-failure",
            },
            CliError::Spectral(_) => "spectral-failure",
        }
    }

    fn exit_code(&self) -> i32 {
        match self {
            CliError::Read { .. }
            | CliError::Write { .. }
            | CliError::Parse(_)
            | CliError::Records(_) => 1,
            CliError::Analyze(e) => match e {
                AnalyzeError::Parse(_) => 1,
                AnalyzeError::Extract(ExtractError::BadPattern { .. }) => 1,
                _ => 2,
            },
            CliError::Regress(_) => 2,
            CliError::Spectral(_) => 2,
        }
    }
}

/// Parse arguments, run, and return the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs.unwrap_or(0))
        .build()
    {
        Ok(pool) => pool,
        Err(e) => {
            report_error("thread-pool-failure", &e.to_string());
            return 1;
        }
    };
    let jobs = cli.jobs;
    let outcome = pool.install(|| match cli.command {
        Command::Analyze(args) => cmd_analyze(args, jobs),
        Command::Esd(args) => cmd_esd(args, jobs),
        Command::Compare(args) => cmd_compare(args, jobs),
        Command::Regress(args) => cmd_regress(args),
    });
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            report_error(e.kind(), &e.to_string());
            e.exit_code()
        }
    }
}

fn report_error(kind: &str, message: &str) {
    let payload = serde_json::json!({ "error": kind, "message": message });
    eprintln!("{payload}");
}

fn build_config(flags: &PipelineFlags, jobs: Option<usize>) -> AuditConfig {
    AuditConfig {
        min_matrix_dim: flags.min_size,
        include_patterns: flags.include.clone(),
        exclude_patterns: flags.exclude.clone(),
        skip_embeddings: !flags.keep_embeddings,
        conv_layout: match flags.conv_layout {
            LayoutArg::Oikk => ConvLayout::Oikk,
            LayoutArg::Kkio => ConvLayout::Kkio,
        },
        conv_slice_weighting: match flags.slice_weighting {
            WeightingArg::Matrix => SliceWeighting::Matrix,
            WeightingArg::Layer => SliceWeighting::Layer,
        },
        min_tail: flags.min_tail,
        log_base: flags.log_base,
        normalize_esd_by_n: flags.normalize_n,
        jobs,
        ..AuditConfig::default()
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|source| CliError::Read {
        path: path.display().to_string(),
        source,
    })
}

fn read_order_file(path: &Path) -> Result<Vec<String>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Read {
        path: path.display().to_string(),
        source,
    })?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect())
}

fn model_id_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".to_string())
}

fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    let to_err = |source: std::io::Error| CliError::Write {
        path: path.display().to_string(),
        source,
    };
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir).map_err(to_err)?;
    }
    let dir = dir.unwrap_or_else(|| Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(to_err)?;
    std::io::Write::write_all(&mut tmp, contents).map_err(to_err)?;
    tmp.persist(path).map_err(|e| to_err(e.error))?;
    Ok(())
}

fn json_bytes<T: serde::Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("report types serialize");
    bytes.push(b'\n');
    bytes
}

fn run_analysis(
    weights: &Path,
    flags: &PipelineFlags,
    jobs: Option<usize>,
) -> Result<AnalysisReport, CliError> {
    let bytes = read_file(weights)?;
    let config = build_config(flags, jobs);
    let order = match &flags.order_file {
        Some(path) => Some(read_order_file(path)?),
        None => None,
    };
    let mut report =
        report::analyze_bytes(&bytes, &model_id_of(weights), &config, order.as_deref())?;
    report.input_path = Some(weights.display().to_string());
    report.order_file = flags.order_file.as_ref().map(|p| p.display().to_string());
    Ok(report)
}

fn cmd_analyze(args: AnalyzeArgs, jobs: Option<usize>) -> Result<(), CliError> {
    let mut report = run_analysis(&args.weights, &args.pipeline, jobs)?;
    if args.stamp {
        report.timestamp_unix = Some(
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        );
    }

    if args.format.json() {
        let path = args.out_dir.join(format!("{}.report.json", report.model_id));
        write_atomic(&path, &json_bytes(&report))?;
        println!("wrote {}", path.display());
    }
    if args.format.csv() {
        let path = args.out_dir.join(format!("{}.layers.csv", report.model_id));
        write_atomic(&path, report::layers_csv(&report).as_bytes())?;
        println!("wrote {}", path.display());
    }

    if let Some(csv_path) = &args.append_csv {
        let record = model_record_from(&report, args.series.as_deref(), args.top1, args.top5);
        append_record(csv_path, &record)?;
        println!("appended {} to {}", record.model_id, csv_path.display());
    }

    let s = &report.summary;
    println!(
        "model {}: layers={} alpha_bar={} weighted_alpha={} flagged={}",
        report.model_id,
        s.n_layers,
        s.alpha_bar
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|| "n/a".into()),
        s.weighted_alpha
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|| "n/a".into()),
        report
            .scale_collapse
            .as_ref()
            .map(|r| r.flagged.len())
            .unwrap_or(0),
    );
    Ok(())
}

fn model_record_from(
    report: &AnalysisReport,
    series: Option<&str>,
    top1: Option<f64>,
    top5: Option<f64>,
) -> ModelRecord {
    let mut metrics = std::collections::BTreeMap::new();
    let s = &report.summary;
    metrics.insert("log_frobenius".to_string(), s.avg_log_frobenius);
    metrics.insert("log_spectral".to_string(), s.avg_log_spectral);
    if let Some(v) = s.weighted_alpha {
        metrics.insert("weighted_alpha".to_string(), v);
    }
    if let Some(v) = s.avg_log_alpha_norm {
        metrics.insert("log_alpha_norm".to_string(), v);
    }
    if let Some(v) = s.alpha_bar {
        metrics.insert("alpha_bar".to_string(), v);
    }
    ModelRecord {
        series: series.unwrap_or("default").to_string(),
        model_id: report.model_id.clone(),
        reported_top1: top1.unwrap_or(f64::NAN),
        reported_top5: top5,
        metrics,
    }
}

fn append_record(path: &Path, record: &ModelRecord) -> Result<(), CliError> {
    let to_err = |source: std::io::Error| CliError::Write {
        path: path.display().to_string(),
        source,
    };
    let mut text = if path.exists() {
        std::fs::read_to_string(path).map_err(to_err)?
    } else {
        let mut header = RECORD_CSV_HEADER.join(",");
        header.push('\n');
        header
    };
    if !text.ends_with('\n') {
        text.push('\n');
    }
    text.push_str(&regression::record_csv_line(record));
    write_atomic(path, text.as_bytes())
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_alphanumeric() || matches!(c, '.' | '-' | '_') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn cmd_esd(args: EsdArgs, jobs: Option<usize>) -> Result<(), CliError> {
    let bytes = read_file(&args.weights)?;
    let config = build_config(&args.pipeline, jobs);
    let store = tensor_io::parse_container(&bytes)?;
    let model_id = model_id_of(&args.weights);
    let (esd, fit) = report::esd_for_layer(&store, &model_id, &config, &args.layer, args.slice)?;
    let histogram = spectral::esd_histogram(&esd, args.bins.max(1), args.log)?;

    let stem = if args.slice > 0 {
        format!("{model_id}.{}.slice{}", sanitize(&args.layer), args.slice)
    } else {
        format!("{model_id}.{}", sanitize(&args.layer))
    };
    let csv_path = args.out_dir.join(format!("{stem}.esd.csv"));
    let mut csv_text = String::from("bin_left,bin_right,count\n");
    for (i, count) in histogram.counts.iter().enumerate() {
        csv_text.push_str(&format!(
            "{},{},{}\n",
            histogram.bin_edges[i],
            histogram.bin_edges[i + 1],
            count
        ));
    }
    write_atomic(&csv_path, csv_text.as_bytes())?;
    println!("wrote {}", csv_path.display());

    let sidecar = serde_json::json!({
        "tool": report::TOOL_NAME,
        "version": report::TOOL_VERSION,
        "model_id": model_id,
        "layer": args.layer,
        "slice": args.slice,
        "n_eigenvalues": esd.len(),
        "n_dropped": esd.n_dropped,
        "lambda_max": esd.lambda_max,
        "log_scaled": histogram.log_scaled,
        "fit": fit,
    });
    let json_path = args.out_dir.join(format!("{stem}.esd.json"));
    write_atomic(&json_path, &json_bytes(&sidecar))?;
    println!("wrote {}", json_path.display());
    Ok(())
}

fn cmd_compare(args: CompareArgs, jobs: Option<usize>) -> Result<(), CliError> {
    let baseline = run_analysis(&args.baseline, &args.pipeline, jobs)?;
    let variant = run_analysis(&args.variant, &args.pipeline, jobs)?;
    let config = build_config(&args.pipeline, jobs);
    let comparison = report::compare_reports(&baseline, &variant, &config)?;

    let stem = format!(
        "{}_vs_{}",
        comparison.baseline_model, comparison.variant_model
    );
    if args.format.json() {
        let path = args.out_dir.join(format!("{stem}.compare.json"));
        write_atomic(&path, &json_bytes(&comparison))?;
        println!("wrote {}", path.display());
    }
    if args.format.csv() {
        let path = args.out_dir.join(format!("{stem}.compare.csv"));
        write_atomic(&path, report::compare_csv(&comparison).as_bytes())?;
        println!("wrote {}", path.display());
    }
    println!(
        "matched {} layers; scale-collapse flags: {}; delta_alpha_bar: {}",
        comparison.n_matched,
        comparison.scale_collapse.flagged.len(),
        comparison
            .delta_alpha_bar
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|| "n/a".into()),
    );
    Ok(())
}

fn cmd_regress(args: RegressArgs) -> Result<(), CliError> {
    let mut records = regression::load_records(&args.csv)?;
    records.retain(|r| !args.exclude_model.contains(&r.model_id));

    let mut series_names: Vec<String> = match &args.series {
        Some(s) => vec![s.clone()],
        None => {
            let mut names: Vec<String> = records.iter().map(|r| r.series.clone()).collect();
            names.sort();
            names.dedup();
            names
        }
    };
    series_names.sort();

    let metrics: Vec<String> = if args.all_metrics {
        HEADLINE_METRICS.iter().map(|m| m.to_string()).collect()
    } else {
        vec![args.metric.clone().expect("clap enforces --metric")]
    };
    let target: Target = args.target.into();
    let direction = if args.swap_axes {
        Direction::MetricOnTarget
    } else {
        Direction::TargetOnMetric
    };

    let mut table_rows = Vec::new();
    for series in &series_names {
        let subset: Vec<ModelRecord> = records
            .iter()
            .filter(|r| &r.series == series)
            .cloned()
            .collect();
        for metric in &metrics {
            let eval = regression::evaluate_metric(&subset, metric, target, direction)?;
            let stem = format!("{}.{}", sanitize(series), sanitize(metric));
            let json_path = args.out_dir.join(format!("{stem}.regress.json"));
            write_atomic(&json_path, &json_bytes(&eval.result))?;
            let plot_path = args.out_dir.join(format!("{stem}.plot.csv"));
            write_atomic(&plot_path, regression::plot_csv(&eval.plot).as_bytes())?;
            println!("wrote {} and {}", json_path.display(), plot_path.display());
            table_rows.push(eval.result);
        }
    }

    if args.all_metrics {
        println!(
            "\n{:<12} {:>3}  {:<16} {:>8} {:>8} {:>12}",
            "series", "n", "metric", "rmse", "r2", "kendall_tau"
        );
        for row in &table_rows {
            println!(
                "{:<12} {:>3}  {:<16} {:>8.4} {:>8.4} {:>12.4}",
                row.series, row.n, row.metric_name, row.rmse, row.r2, row.kendall_tau
            );
        }
    }
    Ok(())
}
