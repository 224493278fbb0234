use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use nfm_cli::commands::{self, to_jsonl};
use nfm_cli::config::{RunConfig, SCHEMA};
use nfm_cli::gradcheck::{corrupted_fixture, TOLERANCE};
use nfm_cli::train::EpochLog;
use nfm_core::layers::NfmModel;

#[derive(Parser)]
#[command(name = "nfm", version, about = "Neural Fourier Modelling experiment harness")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)
            .with_context(|| format!("loading {}", self.config.display()))?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }

    fn checkpoint(&self, explicit: &Option<PathBuf>) -> anyhow::Result<PathBuf> {
        explicit
            .clone()
            .or_else(|| self.out.as_ref().map(|d| d.join(commands::CHECKPOINT_FILE)))
            .context("pass --checkpoint or an --out directory holding one")
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train and write checkpoint, epoch log and test metrics.
    Train(Common),
    /// Metrics of a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Test metrics with inputs observed at a lower sampling rate, e.g. `--sr 1/2`.
    EvalSr {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        sr: String,
    },
    /// Write `|R[k]|` of a mixer block's filter as CSV.
    DumpFilter {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        block: usize,
        /// Number of test items averaged into the probe.
        #[arg(long, default_value_t = 16)]
        probes: usize,
    },
    /// Finite-difference check of every layer and loss on a toy model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also run a deliberately broken gradient that must be flagged.
        #[arg(long)]
        negative_control: bool,
    },
    /// Generate the configured synthetic dataset into a binary cache.
    Synth(Common),
    /// Print the JSON schema of run configurations.
    Schema,
}

fn run() -> anyhow::Result<bool> {
    match Cli::parse().cmd {
        Cmd::Train(c) => {
            let cfg = c.load()?;
            let mut progress = |e: &EpochLog, _: &NfmModel| {
                if let Ok(line) = serde_json::to_string(e) {
                    eprintln!("{line}");
                }
            };
            let report = commands::cmd_train(&cfg, c.out.as_deref(), Some(&mut progress))?;
            print!("{}", to_jsonl(&report.metrics));
        }
        Cmd::Eval { common, checkpoint, split } => {
            let cfg = common.load()?;
            let m = commands::cmd_eval(&cfg, &common.checkpoint(&checkpoint)?, &split, common.out.as_deref())?;
            print!("{}", to_jsonl(&m));
        }
        Cmd::EvalSr { common, checkpoint, sr } => {
            let cfg = common.load()?;
            let m = commands::cmd_eval_sr(&cfg, &common.checkpoint(&checkpoint)?, &sr, common.out.as_deref())?;
            print!("{}", to_jsonl(&m));
        }
        Cmd::DumpFilter { common, checkpoint, block, probes } => {
            let cfg = common.load()?;
            let dump = commands::cmd_dump_filter(
                &cfg,
                &common.checkpoint(&checkpoint)?,
                block,
                probes,
                common.out.as_deref(),
            )?;
            if common.out.is_none() {
                print!("{}", dump.to_csv());
            }
        }
        Cmd::Gradcheck { seed, negative_control } => {
            let mut reports = commands::cmd_gradcheck(seed)?;
            let mut ok = reports.iter().all(|r| r.passed());
            if negative_control {
                let bad = corrupted_fixture(seed)?;
                // The control passes when the checker rejects it.
                ok &= !bad.passed();
                reports.push(bad);
            }
            for r in &reports {
                println!(
                    "{:<28} max_rel_err={:.3e} checked={} {}",
                    r.component,
                    r.max_rel_err,
                    r.checked,
                    if r.passed() { "ok" } else { "FAIL" }
                );
            }
            println!("tolerance {TOLERANCE:e}");
            return Ok(ok);
        }
        Cmd::Synth(c) => {
            let cfg = c.load()?;
            let out = c.out.clone().context("synth needs --out")?;
            let path = commands::cmd_synth(&cfg, &out)?;
            println!("{}", path.display());
        }
        Cmd::Schema => print!("{SCHEMA}"),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
