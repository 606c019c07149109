//! End-to-end tests of the swa binary.

mod common;

use std::path::Path;
use std::process::{Command, Output};

use swa::tensor_io::{write_container, Dtype, TensorEntry, TensorStore};

fn swa(args: &[&str], dir: &Path) -> Output {
    Command::new(common::swa_bin())
        .args(args)
        .current_dir(dir)
        .env_remove("SWA_JOBS")
        .output()
        .expect("binary runs")
}

fn write_fixture(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("dense3.safetensors");
    std::fs::copy(common::fixture_path("dense3.safetensors"), &path).unwrap();
    path
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn analyze_fixture_smoke() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path());
    let out = swa(&["analyze", "dense3.safetensors"], dir.path());
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );

    let report = read_json(&dir.path().join("dense3.report.json"));
    assert_eq!(report["model_id"], "dense3");
    assert_eq!(report["summary"]["n_layers"], 3);
    assert_eq!(report["layers"].as_array().unwrap().len(), 3);
    for layer in report["layers"].as_array().unwrap() {
        assert!(layer["metrics"]["alpha"].is_number());
        assert!(layer["metrics"]["log_frobenius"].is_number());
        assert!(layer["metrics"]["log_spectral"].is_number());
        assert!(layer["metrics"]["weighted_alpha_term"].is_number());
        assert!(layer["metrics"]["log_alpha_norm"].is_number());
    }
    assert!(report["summary"]["alpha_bar"].is_number());
    assert!(report["input_sha256"].as_str().unwrap().len() == 64);
    assert!(report["config"]["min_matrix_dim"].is_number());

    let csv = std::fs::read_to_string(dir.path().join("dense3.layers.csv")).unwrap();
    assert!(csv.starts_with("layer_id,name,kind,slice,N,M,Q,alpha,"));
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn analyze_exclude_pattern_lands_in_skip_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = TensorStore::default();
    let mut rng = common::Lcg::new(3);
    store.tensors.insert(
        "embed.tokens".to_string(),
        common::f32_tensor(&mut rng, 64, 64),
    );
    store.tensors.insert(
        "head.weight".to_string(),
        common::f32_tensor(&mut rng, 64, 64),
    );
    std::fs::write(
        dir.path().join("m.safetensors"),
        write_container(&store).unwrap(),
    )
    .unwrap();

    let out = swa(
        &["analyze", "m.safetensors", "--exclude", "embed.*"],
        dir.path(),
    );
    assert!(out.status.success());
    let report = read_json(&dir.path().join("m.report.json"));
    let skipped = report["skipped"].as_array().unwrap();
    assert!(skipped
        .iter()
        .any(|s| s["tensor"] == "embed.tokens" && s["reason"] == "excluded-by-pattern"));
}

#[test]
fn analyze_unreadable_file_exits_one_with_error_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = swa(&["analyze", "missing.safetensors"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert_eq!(err["error"], "read-failure");
    assert!(err["message"].is_string());
}

#[test]
fn analyze_garbage_file_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("junk.safetensors"), b"not a container").unwrap();
    let out = swa(&["analyze", "junk.safetensors"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert_eq!(err["error"], "malformed-header");
}

#[test]
fn analyze_nothing_analyzable_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = TensorStore::default();
    store.tensors.insert(
        "bias".to_string(),
        TensorEntry {
            dtype: Dtype::F32,
            shape: vec![8],
            values: vec![0.5; 8],
        },
    );
    std::fs::write(
        dir.path().join("b.safetensors"),
        write_container(&store).unwrap(),
    )
    .unwrap();
    let out = swa(&["analyze", "b.safetensors"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert_eq!(err["error"], "no-analyzable-layers");
}

#[test]
fn analyze_append_csv_builds_a_series_file() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path());
    for (model, top1) in [("a", "71.5"), ("b", "72.5")] {
        let path = dir.path().join(format!("{model}.safetensors"));
        std::fs::copy(common::fixture_path("dense3.safetensors"), &path).unwrap();
        let out = swa(
            &[
                "analyze",
                &format!("{model}.safetensors"),
                "--append-csv",
                "series.csv",
                "--series",
                "demo",
                "--top1",
                top1,
            ],
            dir.path(),
        );
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let rows = swa::regression::load_records(&dir.path().join("series.csv")).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].series, "demo");
    assert_eq!(rows[0].model_id, "a");
    assert!(rows[0].metrics.contains_key("weighted_alpha"));
}

#[test]
fn esd_single_bin_counts_every_eigenvalue() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path());
    let out = swa(
        &[
            "esd",
            "dense3.safetensors",
            "--layer",
            "dense1.weight",
            "--bins",
            "1",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = std::fs::read_to_string(dir.path().join("dense3.dense1.weight.esd.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    let sidecar = read_json(&dir.path().join("dense3.dense1.weight.esd.json"));
    let count: u64 = lines[1].split(',').nth(2).unwrap().parse().unwrap();
    assert_eq!(count, sidecar["n_eigenvalues"].as_u64().unwrap());
}

#[test]
fn esd_log_bins_are_geometric() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path());
    let out = swa(
        &[
            "esd",
            "dense3.safetensors",
            "--layer",
            "dense1.weight",
            "--bins",
            "8",
            "--log",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    let csv = std::fs::read_to_string(dir.path().join("dense3.dense1.weight.esd.csv")).unwrap();
    let edges: Vec<f64> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    let ratio = edges[1] / edges[0];
    for w in edges.windows(2) {
        assert!((w[1] / w[0] - ratio).abs() < 1e-9 * ratio);
    }
}

#[test]
fn esd_overlay_alpha_matches_layers_csv() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path());
    assert!(swa(&["analyze", "dense3.safetensors"], dir.path())
        .status
        .success());
    assert!(swa(
        &["esd", "dense3.safetensors", "--layer", "dense2.weight"],
        dir.path()
    )
    .status
    .success());

    let sidecar = read_json(&dir.path().join("dense3.dense2.weight.esd.json"));
    let overlay_alpha = sidecar["fit"]["alpha"].as_f64().unwrap();

    let csv = std::fs::read_to_string(dir.path().join("dense3.layers.csv")).unwrap();
    let row = csv
        .lines()
        .find(|l| l.contains("dense2.weight"))
        .expect("row present");
    let csv_alpha: f64 = row.split(',').nth(7).unwrap().parse().unwrap();
    assert_eq!(overlay_alpha, csv_alpha);
}

#[test]
fn esd_unknown_layer_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path());
    let out = swa(
        &["esd", "dense3.safetensors", "--layer", "nope.weight"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert_eq!(err["error"], "unknown-layer");
}

#[test]
fn compare_file_with_itself_is_all_zeros() {
    let dir = tempfile::tempdir().unwrap();
    let (baseline, _) = common::collapse_pair_stores();
    std::fs::write(
        dir.path().join("base.safetensors"),
        write_container(&baseline).unwrap(),
    )
    .unwrap();
    let out = swa(
        &["compare", "base.safetensors", "base.safetensors"],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report = read_json(&dir.path().join("base_vs_base.compare.json"));
    assert_eq!(report["n_matched"], 20);
    assert_eq!(
        report["scale_collapse"]["flagged"]
            .as_array()
            .unwrap()
            .len(),
        0
    );
    assert_eq!(report["delta_alpha_bar"], 0.0);
    for row in report["layers"].as_array().unwrap() {
        assert_eq!(row["delta_log_spectral"], 0.0);
    }
}

#[test]
fn compare_reports_intersection_and_unmatched() {
    let dir = tempfile::tempdir().unwrap();
    let (baseline, _) = common::collapse_pair_stores();
    let mut half = baseline.clone();
    let names: Vec<String> = half.tensors.keys().cloned().collect();
    for name in names.iter().skip(10) {
        half.tensors.remove(name);
    }
    std::fs::write(
        dir.path().join("base.safetensors"),
        write_container(&baseline).unwrap(),
    )
    .unwrap();
    std::fs::write(
        dir.path().join("half.safetensors"),
        write_container(&half).unwrap(),
    )
    .unwrap();
    let out = swa(
        &["compare", "base.safetensors", "half.safetensors"],
        dir.path(),
    );
    assert!(out.status.success());
    let report = read_json(&dir.path().join("base_vs_half.compare.json"));
    assert_eq!(report["n_matched"], 10);
    assert_eq!(report["unmatched_baseline"].as_array().unwrap().len(), 10);
    assert_eq!(report["unmatched_variant"].as_array().unwrap().len(), 0);
}

#[test]
fn compare_disjoint_models_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let (baseline, _) = common::collapse_pair_stores();
    let mut renamed = TensorStore::default();
    for (i, (_, entry)) in baseline.tensors.iter().enumerate() {
        renamed
            .tensors
            .insert(format!("other{i:02}.weight"), entry.clone());
    }
    std::fs::write(
        dir.path().join("a.safetensors"),
        write_container(&baseline).unwrap(),
    )
    .unwrap();
    std::fs::write(
        dir.path().join("b.safetensors"),
        write_container(&renamed).unwrap(),
    )
    .unwrap();
    let out = swa(&["compare", "a.safetensors", "b.safetensors"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert_eq!(err["error"], "no-matched-layers");
}

#[test]
fn regress_exact_linear_series() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from("series,model_id,reported_top1,log_spectral\n");
    for i in 0..5 {
        // error = 10 + 2 * metric  ->  top1 = 90 - 2 * metric
        csv.push_str(&format!("lin,m{i},{},{}\n", 90.0 - 2.0 * i as f64, i));
    }
    std::fs::write(dir.path().join("metrics.csv"), csv).unwrap();
    let out = swa(
        &["regress", "metrics.csv", "--metric", "log_spectral"],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let result = read_json(&dir.path().join("lin.log_spectral.regress.json"));
    assert_eq!(result["rmse"], 0.0);
    assert_eq!(result["r2"], 1.0);
    assert_eq!(result["kendall_tau"], 1.0);
    assert_eq!(result["slope"], 2.0);
    assert_eq!(result["n"], 5);

    let plot = std::fs::read_to_string(dir.path().join("lin.log_spectral.plot.csv")).unwrap();
    assert!(plot.starts_with("x,y,y_hat,band_lo,band_hi\n"));
    assert_eq!(plot.lines().count(), 6);
}

#[test]
fn regress_all_metrics_emits_four_rows_per_series() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::copy(
        common::fixture_path("series.csv"),
        dir.path().join("series.csv"),
    )
    .unwrap();
    let out = swa(
        &[
            "regress",
            "series.csv",
            "--all-metrics",
            "--series",
            "synthvgg",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    let table_rows: Vec<&str> = stdout
        .lines()
        .filter(|l| l.starts_with("synthvgg"))
        .collect();
    assert_eq!(table_rows.len(), 4);
    for metric in [
        "log_frobenius",
        "log_spectral",
        "weighted_alpha",
        "log_alpha_norm",
    ] {
        assert!(dir
            .path()
            .join(format!("synthvgg.{metric}.regress.json"))
            .exists());
    }
}

#[test]
fn regress_unknown_metric_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::copy(
        common::fixture_path("series.csv"),
        dir.path().join("series.csv"),
    )
    .unwrap();
    let out = swa(
        &["regress", "series.csv", "--metric", "sparkle"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert_eq!(err["error"], "missing-metric");
}

#[test]
fn regress_too_few_models_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("tiny.csv"),
        "series,model_id,reported_top1,alpha_bar\ns,m1,90,2.0\ns,m2,91,2.5\n",
    )
    .unwrap();
    let out = swa(
        &["regress", "tiny.csv", "--metric", "alpha_bar"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert_eq!(err["error"], "too-few-models");
}

#[test]
fn regress_exclude_model_flag_drops_rows() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::copy(
        common::fixture_path("series.csv"),
        dir.path().join("series.csv"),
    )
    .unwrap();
    let out = swa(
        &[
            "regress",
            "series.csv",
            "--metric",
            "alpha_bar",
            "--exclude-model",
            "sv19c",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    let result = read_json(&dir.path().join("synthvgg.alpha_bar.regress.json"));
    assert_eq!(result["n"], 5);
}

#[test]
fn dotted_model_names_keep_their_full_stem() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::copy(
        common::fixture_path("dense3.safetensors"),
        dir.path().join("my.model.v2.safetensors"),
    )
    .unwrap();
    let out = swa(&["analyze", "my.model.v2.safetensors"], dir.path());
    assert!(out.status.success());
    assert!(dir.path().join("my.model.v2.report.json").exists());
    assert!(dir.path().join("my.model.v2.layers.csv").exists());
}

#[test]
fn jobs_env_var_is_honored() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path());
    let out = Command::new(common::swa_bin())
        .args(["analyze", "dense3.safetensors"])
        .current_dir(dir.path())
        .env("SWA_JOBS", "2")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn order_file_controls_layer_ids() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path());
    std::fs::write(
        dir.path().join("order.txt"),
        "dense3.weight\ndense1.weight\n",
    )
    .unwrap();
    let out = swa(
        &["analyze", "dense3.safetensors", "--order-file", "order.txt"],
        dir.path(),
    );
    assert!(out.status.success());
    let report = read_json(&dir.path().join("dense3.report.json"));
    let ids: Vec<(String, u64)> = report["layers"]
        .as_array()
        .unwrap()
        .iter()
        .map(|l| {
            (
                l["layer_name"].as_str().unwrap().to_string(),
                l["layer_id"].as_u64().unwrap(),
            )
        })
        .collect();
    assert_eq!(
        ids,
        vec![
            ("dense3.weight".to_string(), 0),
            ("dense1.weight".to_string(), 1),
            ("dense2.weight".to_string(), 2),
        ]
    );
}

#[test]
fn log_base_e_rescales_report_metrics() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path());
    assert!(swa(&["analyze", "dense3.safetensors"], dir.path())
        .status
        .success());
    assert!(swa(
        &[
            "analyze",
            "dense3.safetensors",
            "--log-base",
            "e",
            "--out-dir",
            "nat",
        ],
        dir.path()
    )
    .status
    .success());
    let ten = read_json(&dir.path().join("dense3.report.json"));
    let nat = read_json(&dir.path().join("nat/dense3.report.json"));
    let k = std::f64::consts::LN_10;
    let a = ten["summary"]["avg_log_spectral"].as_f64().unwrap();
    let b = nat["summary"]["avg_log_spectral"].as_f64().unwrap();
    assert!((b - k * a).abs() < 1e-9);
}
