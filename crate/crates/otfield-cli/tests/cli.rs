//! End-to-end tests driving the compiled binary: the full
//! reference/train/predict/evaluate/grid-search/export workflow,
//! reproducibility of artifacts, flag-over-config precedence, and the
//! exit-code contract.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nalgebra::DMatrix;
use otfield::dataset::{write_graph, write_signal};
use otfield::graph::AttributedGraph;

fn otfield(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_otfield"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_code(output: &Output, code: i32) {
    assert_eq!(
        output.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
}

fn chain_graph(xs: &[f64]) -> AttributedGraph {
    let features = DMatrix::from_iterator(xs.len(), 1, xs.iter().copied());
    let edges = (0..xs.len() - 1).map(|i| (i, i + 1)).collect();
    AttributedGraph::new(features, edges).unwrap()
}

fn sample_sizes(count: usize) -> Vec<usize> {
    (0..count).map(|k| 7 + k % 3).collect()
}

/// Chains of 7-9 nodes with signal sin(2x + theta) + theta/2, one scalar.
fn write_dataset(dir: &Path, count: usize) -> PathBuf {
    let mut samples = Vec::new();
    for (k, &n) in sample_sizes(count).iter().enumerate() {
        let xs: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        let theta = k as f64 / 5.0;
        write_graph(&dir.join(format!("g{k}.txt")), &chain_graph(&xs)).unwrap();
        let values: Vec<f64> = xs
            .iter()
            .map(|x| (2.0 * x + theta).sin() + 0.5 * theta)
            .collect();
        write_signal(&dir.join(format!("u{k}.txt")), &values).unwrap();
        samples.push(serde_json::json!({
            "graph": format!("g{k}.txt"),
            "signals": {"u": format!("u{k}.txt")},
            "scalars": [theta],
        }));
    }
    let manifest = serde_json::json!({
        "schema_version": 1,
        "dataset_id": "cli-fixture",
        "fields": ["u"],
        "scalar_names": ["theta"],
        "samples": samples,
    });
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap()).unwrap();
    path
}

/// Small embeddings and a short optimizer budget keep runs fast.
fn write_fast_config(dir: &Path, mut extra: serde_json::Value) -> PathBuf {
    let mut config = serde_json::json!({
        "train": {
            "swwl": {"n_projections": 4, "n_quantiles": 6, "seed": 0},
            "gp": {"restarts": 1, "max_opt_iters": 50, "seed": 0},
        }
    });
    merge(&mut config, &mut extra);
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path
}

fn merge(base: &mut serde_json::Value, extra: &mut serde_json::Value) {
    match (base, extra) {
        (serde_json::Value::Object(b), serde_json::Value::Object(e)) => {
            for (k, v) in e {
                merge(b.entry(k.clone()).or_insert(serde_json::Value::Null), v);
            }
        }
        (b, e) => *b = e.take(),
    }
}

#[test]
fn full_workflow_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let manifest = write_dataset(root, 6);
    let config = write_fast_config(root, serde_json::json!({}));
    let manifest = manifest.to_str().unwrap();
    let config = config.to_str().unwrap();
    let reference = root.join("ref.archive");
    let cache = root.join("plans");

    let out = otfield(&[
        "build-reference",
        "--manifest",
        manifest,
        "--config",
        config,
        "--out",
        reference.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    assert!(reference.exists());

    let mut models = Vec::new();
    for name in ["model_a", "model_b"] {
        let model = root.join(name);
        let out = otfield(&[
            "train",
            "--manifest",
            manifest,
            "--config",
            config,
            "--reference",
            reference.to_str().unwrap(),
            "--cache-dir",
            cache.to_str().unwrap(),
            "--out",
            model.to_str().unwrap(),
        ]);
        assert_code(&out, 0);
        let stdout = String::from_utf8_lossy(&out.stdout).to_string();
        assert!(
            stdout.contains("trained field 'u' on 6 samples"),
            "{stdout}"
        );
        models.push(fs::read(&model).unwrap());
    }
    assert_eq!(
        models[0], models[1],
        "same-seed training must reproduce bytes"
    );
    // Samples k and k+3 share a geometry, so 6 samples yield 3 plan keys.
    let cached_plans = fs::read_dir(&cache).unwrap().count();
    assert_eq!(cached_plans, 3, "expected deduplicated cached plans");

    let model = root.join("model_a");
    let pred_path = root.join("pred.json");
    let out = otfield(&[
        "predict",
        "--model",
        model.to_str().unwrap(),
        "--manifest",
        manifest,
        "--cache-dir",
        cache.to_str().unwrap(),
        "--out",
        pred_path.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&pred_path).unwrap()).unwrap();
    assert_eq!(report["field"], "u");
    let samples = report["samples"].as_array().unwrap();
    assert_eq!(samples.len(), 6);
    for (k, (sample, n)) in samples.iter().zip(sample_sizes(6)).enumerate() {
        assert_eq!(sample["index"], k as u64);
        assert_eq!(sample["signal"].as_array().unwrap().len(), n);
        let stds = sample["node_std"].as_array().unwrap();
        assert_eq!(stds.len(), n);
        assert!(stds.iter().all(|s| s.as_f64().unwrap() >= 0.0));
        assert!(sample.get("full_covariance").is_none());
    }

    let out = otfield(&[
        "evaluate",
        "--model",
        model.to_str().unwrap(),
        "--manifest",
        manifest,
        "--cache-dir",
        cache.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let stdout = String::from_utf8_lossy(&out.stdout).to_string();
    for line in [
        "approximation rrmse",
        "transferred-prediction rrmse",
        "total rrmse",
    ] {
        assert!(stdout.contains(line), "{stdout}");
    }

    for (format, extension, marker) in [
        (
            "tabular",
            "tsv",
            "node\tx0\ttruth\tprediction\tabs_error\tstd\n",
        ),
        ("grid-legacy", "vtk", "# vtk DataFile Version 3.0\n"),
    ] {
        let out_dir = root.join(format!("export_{format}"));
        let out = otfield(&[
            "export",
            "--model",
            model.to_str().unwrap(),
            "--manifest",
            manifest,
            "--format",
            format,
            "--cache-dir",
            cache.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert_code(&out, 0);
        for k in 0..6 {
            let file = out_dir.join(format!("sample_{k}.{extension}"));
            let text = fs::read_to_string(&file).unwrap();
            assert!(text.starts_with(marker), "{}: {text}", file.display());
        }
    }
}

#[test]
fn predict_and_export_work_without_labels() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let manifest = write_dataset(root, 4);
    let config = write_fast_config(root, serde_json::json!({}));
    let model = root.join("model");
    let out = otfield(&[
        "train",
        "--manifest",
        manifest.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--out",
        model.to_str().unwrap(),
    ]);
    assert_code(&out, 0);

    // A label-free manifest: same graphs and scalars, no declared fields.
    let mut bare = Vec::new();
    for k in 0..2 {
        bare.push(serde_json::json!({
            "graph": format!("g{k}.txt"),
            "signals": {},
            "scalars": [k as f64 / 5.0],
        }));
    }
    let unlabeled = serde_json::json!({
        "schema_version": 1,
        "dataset_id": "cli-fixture-unlabeled",
        "fields": [],
        "scalar_names": ["theta"],
        "samples": bare,
    });
    let unlabeled_path = root.join("unlabeled.json");
    fs::write(&unlabeled_path, serde_json::to_string(&unlabeled).unwrap()).unwrap();

    let out = otfield(&[
        "predict",
        "--model",
        model.to_str().unwrap(),
        "--manifest",
        unlabeled_path.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let report: serde_json::Value =
        serde_json::from_slice(&out.stdout).expect("predictions print to stdout");
    assert_eq!(report["samples"].as_array().unwrap().len(), 2);

    let export_dir = root.join("export");
    let out = otfield(&[
        "export",
        "--model",
        model.to_str().unwrap(),
        "--manifest",
        unlabeled_path.to_str().unwrap(),
        "--format",
        "tabular",
        "--out",
        export_dir.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let table = fs::read_to_string(export_dir.join("sample_0.tsv")).unwrap();
    assert!(table.starts_with("node\tx0\tprediction\tstd\n"), "{table}");
    assert!(!table.contains("truth"));
}

#[test]
fn flags_override_config_keys() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let manifest = write_dataset(root, 4);
    let config = write_fast_config(root, serde_json::json!({"train": {"lambda": 0.01}}));
    let model = root.join("model");
    let out = otfield(&[
        "train",
        "--manifest",
        manifest.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--lambda",
        "0.001",
        "--out",
        model.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    // The archive's payload is the third line; check the stored lambda.
    let text = fs::read_to_string(&model).unwrap();
    let payload = text.lines().nth(2).unwrap();
    let record: serde_json::Value = serde_json::from_str(payload).unwrap();
    assert_eq!(record["lambda"].as_f64(), Some(0.001));
    assert_eq!(record["lambda0"].as_f64(), Some(0.001));
}

#[test]
fn grid_search_ranks_cells() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let manifest = write_dataset(root, 4);
    let config = write_fast_config(
        root,
        serde_json::json!({
            "grid": {
                "lambdas": [1e-2, 1e-3],
                "wl_iterations": [1],
                "references": [{"strategy": "train-subsample"}],
            }
        }),
    );
    let cells_path = root.join("cells.json");
    let out = otfield(&[
        "grid-search",
        "--manifest",
        manifest.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--out",
        cells_path.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let cells: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&cells_path).unwrap()).unwrap();
    let cells = cells.as_array().unwrap();
    assert_eq!(cells.len(), 2);
    let scores: Vec<f64> = cells
        .iter()
        .map(|c| c["criterion"].as_f64().expect("all cells succeed"))
        .collect();
    assert!(scores[0] <= scores[1], "{scores:?}");
    let stdout = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(stdout.contains("criterion"), "{stdout}");
}

#[test]
fn exit_codes_follow_error_categories() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    // 0: help.
    assert_code(&otfield(&["--help"]), 0);

    // 1: unknown flag (argument parsing).
    let out = otfield(&["train", "--frobnicate"]);
    assert_code(&out, 1);

    // 1: unknown strategy name in the config.
    let manifest = write_dataset(root, 4);
    let bad_strategy = root.join("bad_strategy.json");
    fs::write(&bad_strategy, r#"{"reference": {"strategy": "bogus"}}"#).unwrap();
    let out = otfield(&[
        "build-reference",
        "--manifest",
        manifest.to_str().unwrap(),
        "--config",
        bad_strategy.to_str().unwrap(),
        "--out",
        root.join("ref").to_str().unwrap(),
    ]);
    assert_code(&out, 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));

    // 2: missing input file.
    let out = otfield(&[
        "train",
        "--manifest",
        root.join("missing.json").to_str().unwrap(),
        "--out",
        root.join("model").to_str().unwrap(),
    ]);
    assert_code(&out, 2);

    // 2: malformed config.
    let broken = root.join("broken.json");
    fs::write(&broken, "{ not json").unwrap();
    let out = otfield(&[
        "train",
        "--manifest",
        manifest.to_str().unwrap(),
        "--config",
        broken.to_str().unwrap(),
        "--out",
        root.join("model").to_str().unwrap(),
    ]);
    assert_code(&out, 2);

    // 3: transport solver starved of iterations.
    let starved = write_fast_config(
        root,
        serde_json::json!({"train": {"sinkhorn": {"max_iter": 1}}}),
    );
    let out = otfield(&[
        "train",
        "--manifest",
        manifest.to_str().unwrap(),
        "--config",
        starved.to_str().unwrap(),
        "--out",
        root.join("model").to_str().unwrap(),
    ]);
    assert_code(&out, 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("converge"));
}
