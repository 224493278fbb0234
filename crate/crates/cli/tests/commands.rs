use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;

use nfm_cli::commands::{
    cmd_dump_filter, cmd_eval, cmd_eval_sr, cmd_synth, cmd_train, decimation_for_sr, load_model,
    METRICS_FILE,
};
use nfm_cli::config::SCHEMA;
use nfm_cli::gradcheck::{corrupted_fixture, suite};
use nfm_cli::{DataSource, RunConfig};
use nfm_core::data::{load_cache, SynthSpec};
use nfm_core::tasks::binary_metrics;
use serde_json::Value;

fn toy_classify() -> RunConfig {
    RunConfig::from_json(
        r#"{
        "task": { "kind": "classify", "n_classes": 3 },
        "model": { "c_in": 1, "d": 4, "n_blocks": 1, "h0": 8, "inr_hidden": 8, "proj_width": 4,
                   "mlp_ratio": 2, "head": { "pooled": { "classes": 3 } } },
        "data": { "source": "synth", "spec": { "classes": 3, "class_freqs": 3, "random_freqs": 2,
                  "len": 64, "band": [8, 14], "noise_std": 0.1, "per_class": 10 } },
        "optim": { "epochs": 3, "batch": 4, "lr": 0.003, "patience": 5 },
        "window": 64,
        "seed": 5
    }"#,
    )
    .unwrap()
}

fn toy_forecast() -> RunConfig {
    RunConfig::from_json(
        r#"{
        "task": { "kind": "forecast", "horizon": 8, "norm": "revin" },
        "model": { "c_in": 1, "d": 4, "n_blocks": 1, "h0": 8, "inr_hidden": 8, "proj_width": 4,
                   "mlp_ratio": 2, "dropout": 0.1, "head": { "per_step": { "out": 1 } } },
        "data": { "source": "sinusoid", "len": 400, "components": [[16.0, 1.0], [5.0, 0.3]],
                  "noise_std": 0.05, "stride": 4 },
        "optim": { "epochs": 2, "batch": 8, "lr": 0.003, "lr_min": 0.001, "patience": 2 },
        "window": 32,
        "seed": 1
    }"#,
    )
    .unwrap()
}

fn toy_anomaly() -> RunConfig {
    RunConfig::from_json(
        r#"{
        "task": { "kind": "anomaly", "dr": 2, "anomaly_ratio": 2.0 },
        "model": { "c_in": 1, "d": 4, "n_blocks": 1, "h0": 8, "inr_hidden": 8, "proj_width": 4,
                   "mlp_ratio": 2, "head": { "per_step": { "out": 1 } } },
        "data": { "source": "sinusoid", "len": 1200, "components": [[20.0, 1.0]], "noise_std": 0.05,
                  "spikes": { "ratio": 0.02, "seg_len": [2, 3], "magnitude": 4.0 }, "stride": 8 },
        "optim": { "epochs": 2, "batch": 8, "lr": 0.003, "patience": 2 },
        "window": 40
    }"#,
    )
    .unwrap()
}

fn schema_keys(schema: &Value, def: &str) -> BTreeSet<String> {
    let node = if def.is_empty() { schema } else { &schema["$defs"][def] };
    node["properties"].as_object().unwrap().keys().cloned().collect()
}

fn object_keys(v: &Value) -> BTreeSet<String> {
    v.as_object().unwrap().keys().cloned().collect()
}

#[test]
fn schema_lists_every_serialized_key() {
    let schema: Value = serde_json::from_str(SCHEMA).unwrap();
    for cfg in [toy_classify(), toy_forecast(), toy_anomaly()] {
        let v: Value = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(object_keys(&v), schema_keys(&schema, ""));
        assert_eq!(object_keys(&v["model"]), schema_keys(&schema, "model"));
        assert_eq!(object_keys(&v["optim"]), schema_keys(&schema, "optim"));
        let task = schema_keys(&schema, "task");
        assert!(object_keys(&v["task"]).is_subset(&task), "{:?}", v["task"]);
        let source = v["data"]["source"].as_str().unwrap();
        let variant = schema["$defs"]["data"]["oneOf"]
            .as_array()
            .unwrap()
            .iter()
            .find(|s| s["properties"]["source"]["const"] == source)
            .unwrap();
        assert_eq!(object_keys(&v["data"]), object_keys(&variant["properties"]));
    }
    let spec: Value = serde_json::to_value(SynthSpec::default()).unwrap();
    assert_eq!(object_keys(&spec), schema_keys(&schema, "synth_spec"));
}

#[test]
fn shipped_configs_parse_and_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let mut n = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        n += 1;
    }
    assert!(n >= 4);
}

#[test]
fn gradient_suite_passes_and_is_deterministic() {
    let a = suite(0).unwrap();
    assert!(a.iter().all(|r| r.passed()), "{a:#?}");
    assert!(a.iter().all(|r| r.params < 5_000));
    assert_eq!(a, suite(0).unwrap());
    assert!(!corrupted_fixture(0).unwrap().passed());
}

#[test]
fn fixed_seed_runs_are_identical() {
    let cfg = toy_forecast();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = cmd_train(&cfg, Some(a.path()), None).unwrap();
    let rb = cmd_train(&cfg, Some(b.path()), None).unwrap();
    assert_eq!(ra.log, rb.log);
    for file in [METRICS_FILE, "train_log.jsonl", "checkpoint.json"] {
        let fa = std::fs::read(a.path().join(file)).unwrap();
        assert_eq!(fa, std::fs::read(b.path().join(file)).unwrap(), "{file}");
    }
}

#[test]
fn eval_reproduces_train_metrics_and_sr_one_matches() {
    let cfg = toy_classify();
    let dir = tempfile::tempdir().unwrap();
    let report = cmd_train(&cfg, Some(dir.path()), None).unwrap();
    let ckpt = dir.path().join("checkpoint.json");
    let eval = cmd_eval(&cfg, &ckpt, "test", None).unwrap();
    let acc = |m: &[nfm_cli::commands::MetricRecord], name: &str| {
        m.iter().find(|r| r.metric == name).unwrap().value
    };
    assert_eq!(acc(&eval, "test.accuracy"), acc(&report.metrics, "test.accuracy"));
    let sr1 = cmd_eval_sr(&cfg, &ckpt, "1", None).unwrap();
    assert_eq!(acc(&sr1, "test.sr_1.accuracy"), acc(&eval, "test.accuracy"));
    let half = cmd_eval_sr(&cfg, &ckpt, "1/2", None).unwrap();
    assert!((0.0..=1.0).contains(&acc(&half, "test.sr_1/2.accuracy")));

    let dump = cmd_dump_filter(&cfg, &ckpt, 0, 4, Some(dir.path())).unwrap();
    assert_eq!(dump.bins(), 64 / 2 + 1);
    let csv = std::fs::read_to_string(dir.path().join("filter.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 33);
    assert!(cmd_dump_filter(&cfg, &ckpt, 1, 4, None).is_err());

    let mut other = cfg.clone();
    other.seed += 1;
    let err = cmd_eval(&other, &ckpt, "test", None).unwrap_err().to_string();
    assert!(err.contains("config hash mismatch"), "{err}");
    let model = load_model(&cfg, &ckpt).unwrap();
    assert_eq!(model, report.model);
}

#[test]
fn zero_patience_stops_after_first_bad_epoch() {
    let mut cfg = toy_forecast();
    cfg.optim.patience = 0;
    cfg.optim.epochs = 30;
    cfg.optim.lr = 0.05;
    cfg.optim.lr_min = None;
    let report = cmd_train(&cfg, None, None).unwrap();
    let first_bad = report.log.iter().position(|e| !e.improved);
    match first_bad {
        Some(i) => assert_eq!(report.log.len(), i + 1),
        None => assert_eq!(report.log.len(), 30),
    }
}

#[test]
fn anomaly_run_writes_scores() {
    let cfg = toy_anomaly();
    let dir = tempfile::tempdir().unwrap();
    let report = cmd_train(&cfg, Some(dir.path()), None).unwrap();
    let names: Vec<&str> = report.metrics.iter().map(|m| m.metric.as_str()).collect();
    for m in ["test.threshold", "test.precision", "test.recall", "test.f1", "test.f1_unadjusted"] {
        assert!(names.contains(&m), "{names:?}");
    }
    let csv = std::fs::read_to_string(dir.path().join("anomaly_test.csv")).unwrap();
    assert!(csv.starts_with("index,score,flag\n"));
    // All-negative flags recall nothing.
    let truth = [false, true, true, false];
    assert_eq!(binary_metrics(&[false; 4], &truth).recall, 0.0);
}

#[test]
fn sampling_ratio_parsing() {
    assert_eq!(decimation_for_sr("1").unwrap(), 1);
    assert_eq!(decimation_for_sr("1/2").unwrap(), 2);
    assert_eq!(decimation_for_sr(" 1/4 ").unwrap(), 4);
    assert!(decimation_for_sr("2/3").is_err());
    assert!(decimation_for_sr("3/2").is_err());
    assert!(decimation_for_sr("0").is_err());
    assert!(decimation_for_sr("half").is_err());
}

#[test]
fn synth_cache_roundtrip() {
    let cfg = toy_classify();
    let dir = tempfile::tempdir().unwrap();
    let path = cmd_synth(&cfg, dir.path()).unwrap();
    let (data, meta) = load_cache(&path).unwrap();
    assert_eq!(meta.shape, vec![30, 64, 1]);
    assert_eq!(data.len(), 30 * 64);
    assert_eq!(meta.labels.unwrap().len(), 30);
    let DataSource::Synth { .. } = cfg.data else { unreachable!() };
    assert!(cmd_synth(&toy_forecast(), dir.path()).is_err());
}

#[test]
fn binary_reports_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_nfm");
    let ok = Command::new(bin).args(["gradcheck", "--negative-control"]).output().unwrap();
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stdout));
    let text = String::from_utf8_lossy(&ok.stdout);
    assert!(text.contains("input_projection") && text.contains("tolerance"));

    let missing = Command::new(bin)
        .args(["train", "--config", "/nonexistent/run.json"])
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(2));

    let schema = Command::new(bin).arg("schema").output().unwrap();
    assert_eq!(String::from_utf8_lossy(&schema.stdout), SCHEMA);
}
