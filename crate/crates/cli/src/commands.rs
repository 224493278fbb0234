//! Subcommand implementations, callable without the binary.

use std::fs;
use std::path::{Path, PathBuf};

use nfm_core::checkpoint::Checkpoint;
use nfm_core::data::{save_cache, synth_generate, CacheMeta};
use nfm_core::layers::NfmModel;
use nfm_core::tasks::TaskKind;
use nfm_core::{NfmError, Rational, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{DataSource, RunConfig};
use crate::dataset::{prepare, Prepared, DATA_STREAM};
use crate::eval;
use crate::filter::{dump_filter, FilterDump};
use crate::gradcheck::{self, ComponentReport};
use crate::train::{train, EpochHook, EpochLog};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const LOG_FILE: &str = "train_log.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRecord {
    pub task: String,
    pub seed: u64,
    pub config_hash: String,
    pub metric: String,
    pub value: f64,
}

pub fn task_name(cfg: &RunConfig) -> &'static str {
    match cfg.task.kind {
        TaskKind::Forecast { .. } => "forecast",
        TaskKind::Classify { .. } => "classify",
        TaskKind::Anomaly { .. } => "anomaly",
    }
}

fn records(cfg: &RunConfig, prefix: &str, metrics: Vec<(String, f64)>) -> Vec<MetricRecord> {
    let hash = cfg.hash();
    metrics
        .into_iter()
        .map(|(name, value)| MetricRecord {
            task: task_name(cfg).into(),
            seed: cfg.seed,
            config_hash: hash.clone(),
            metric: format!("{prefix}{name}"),
            value,
        })
        .collect()
}

pub fn to_jsonl<T: Serialize>(rows: &[T]) -> String {
    rows.iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}

fn write_out(out: Option<&Path>, name: &str, text: &str) -> Result<()> {
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(name), text)?;
    }
    Ok(())
}

/// Checkpoint and model, refusing checkpoints produced by another config.
pub fn load_model(cfg: &RunConfig, path: &Path) -> Result<NfmModel> {
    let ck = Checkpoint::load(path)?;
    if ck.config_hash != cfg.hash() {
        return Err(NfmError::Checkpoint(format!(
            "config hash mismatch: checkpoint {} vs config {}",
            ck.config_hash,
            cfg.hash()
        )));
    }
    ck.restore()
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub model: NfmModel,
    pub data: Prepared,
    pub log: Vec<EpochLog>,
    pub metrics: Vec<MetricRecord>,
}

/// Train, evaluate on the test split and write the run artifacts to `out`.
pub fn cmd_train(
    cfg: &RunConfig,
    out: Option<&Path>,
    hook: Option<EpochHook<'_>>,
) -> Result<TrainReport> {
    let data = prepare(cfg)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.json"), cfg.to_json())?;
    }
    let ckpt = out.map(|d| d.join(CHECKPOINT_FILE));
    let outcome = train(cfg, &data, ckpt.as_deref(), hook)?;
    write_out(out, LOG_FILE, &to_jsonl(&outcome.log))?;
    let mut metrics = records(cfg, "test.", eval::metrics(&outcome.model, cfg, &data, &data.test, 1)?);
    metrics.push(MetricRecord {
        task: task_name(cfg).into(),
        seed: cfg.seed,
        config_hash: cfg.hash(),
        metric: "epochs".into(),
        value: outcome.log.len() as f64,
    });
    write_out(out, METRICS_FILE, &to_jsonl(&metrics))?;
    if matches!(cfg.task.kind, TaskKind::Anomaly { .. }) {
        write_out(out, "anomaly_test.csv", &anomaly_csv(&outcome.model, cfg, &data)?)?;
    }
    Ok(TrainReport {
        model: outcome.model,
        data,
        log: outcome.log,
        metrics,
    })
}

/// `index,score,flag` rows over the test split.
pub fn anomaly_csv(model: &NfmModel, cfg: &RunConfig, data: &Prepared) -> Result<String> {
    let r = eval::anomaly_report(model, cfg, data, &data.test, 1)?;
    let mut s = String::from("index,score,flag\n");
    for (i, (score, flag)) in r.scores.iter().zip(&r.adjusted).enumerate() {
        s.push_str(&format!("{i},{score:e},{}\n", u8::from(*flag)));
    }
    Ok(s)
}

pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    split: &str,
    out: Option<&Path>,
) -> Result<Vec<MetricRecord>> {
    let model = load_model(cfg, checkpoint)?;
    let data = prepare(cfg)?;
    let m = records(cfg, &format!("{split}."), eval::metrics(&model, cfg, &data, data.split(split)?, 1)?);
    write_out(out, METRICS_FILE, &to_jsonl(&m))?;
    Ok(m)
}

/// Parse a sampling-rate ratio such as `1/2` and return the decimation factor.
pub fn decimation_for_sr(sr: &str) -> Result<usize> {
    let r: Rational = sr
        .trim()
        .parse()
        .map_err(|_| NfmError::invalid(format!("sampling ratio '{sr}' is not a fraction")))?;
    if *r.numer() == 0 || r > Rational::from_integer(1) {
        return Err(NfmError::invalid(format!("sampling ratio {r} must lie in (0, 1]")));
    }
    let inv = r.recip();
    if !inv.is_integer() {
        return Err(NfmError::invalid(format!(
            "sampling ratio {r} does not correspond to an integer decimation"
        )));
    }
    Ok(inv.to_integer() as usize)
}

pub fn eval_sr(
    model: &NfmModel,
    cfg: &RunConfig,
    data: &Prepared,
    split: &str,
    sr: &str,
) -> Result<Vec<MetricRecord>> {
    let q = decimation_for_sr(sr)?;
    let n_in = cfg.task.input_len(cfg.window);
    if n_in % q != 0 {
        return Err(NfmError::invalid(format!(
            "decimation by {q} does not divide the model input length {n_in}"
        )));
    }
    let m = eval::metrics(model, cfg, data, data.split(split)?, q)?;
    Ok(records(cfg, &format!("{split}.sr_{sr}."), m))
}

pub fn cmd_eval_sr(
    cfg: &RunConfig,
    checkpoint: &Path,
    sr: &str,
    out: Option<&Path>,
) -> Result<Vec<MetricRecord>> {
    let model = load_model(cfg, checkpoint)?;
    let data = prepare(cfg)?;
    let m = eval_sr(&model, cfg, &data, "test", sr)?;
    write_out(out, METRICS_FILE, &to_jsonl(&m))?;
    Ok(m)
}

pub fn cmd_dump_filter(
    cfg: &RunConfig,
    checkpoint: &Path,
    block: usize,
    probes: usize,
    out: Option<&Path>,
) -> Result<FilterDump> {
    let model = load_model(cfg, checkpoint)?;
    let data = prepare(cfg)?;
    let ids: Vec<usize> = (0..probes.min(data.test.count())).collect();
    let dump = dump_filter(&model, cfg, &data.test, &ids, block)?;
    write_out(out, "filter.csv", &dump.to_csv())?;
    Ok(dump)
}

pub fn cmd_gradcheck(seed: u64) -> Result<Vec<ComponentReport>> {
    gradcheck::suite(seed)
}

/// Generate the configured synthetic set into `out/synth.bin` plus sidecar.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let DataSource::Synth { spec, .. } = &cfg.data else {
        return Err(NfmError::invalid("synth needs a config with a synth data source"));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(DATA_STREAM);
    let d = synth_generate(spec, &mut rng)?;
    fs::create_dir_all(out)?;
    let path = out.join("synth.bin");
    let meta = CacheMeta {
        shape: d.signals.shape().to_vec(),
        dtype: "f64le".into(),
        splits: Vec::new(),
        labels: Some(d.labels),
    };
    save_cache(&path, &d.signals.data, &meta)?;
    Ok(path)
}
