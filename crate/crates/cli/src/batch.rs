//! Batch assembly and per-task losses.

use nfm_core::autodiff::{Graph, Tensor, Var};
use nfm_core::layers::NfmModel;
use nfm_core::manip::decimate;
use nfm_core::tasks::{
    anomaly_loss, forecast_loss, mse_loss, norm_apply, norm_reapply, NormStats, TaskKind,
};
use nfm_core::{ExtensionFactors, Result};

use crate::config::RunConfig;
use crate::dataset::Split;

#[derive(Debug, Clone)]
pub struct Batch {
    /// Normalized model input `[B, n_in, 1]`.
    pub input: Tensor,
    /// Normalized regression target `[B, L, 1]` (series tasks).
    pub target: Option<Tensor>,
    pub labels: Vec<usize>,
    pub stats: NormStats,
    pub factors: ExtensionFactors,
}

/// The part of a sample the model sees, before any extra decimation.
pub fn task_input(cfg: &RunConfig, sample: &[f64]) -> Result<Vec<f64>> {
    match cfg.task.kind {
        TaskKind::Forecast { .. } => Ok(sample[..cfg.window].to_vec()),
        TaskKind::Anomaly { dr, .. } => decimate(sample, dr),
        TaskKind::Classify { .. } => Ok(sample.to_vec()),
    }
}

/// Extension factors for inputs additionally decimated by `q`.
pub fn task_factors(cfg: &RunConfig, q: usize) -> Result<ExtensionFactors> {
    let base = cfg.task.factors(cfg.task.input_len(cfg.window))?;
    Ok(if q == 1 { base } else { base.rescaled_for_decimation(q) })
}

pub fn build(cfg: &RunConfig, split: &Split, ids: &[usize], q: usize) -> Result<Batch> {
    let mut inputs = Vec::new();
    let mut n_in = 0;
    for &i in ids {
        let mut x = task_input(cfg, split.item(i))?;
        if q > 1 {
            x = decimate(&x, q)?;
        }
        n_in = x.len();
        inputs.extend(x);
    }
    let (input, stats) = norm_apply(&Tensor::new(vec![ids.len(), n_in, 1], inputs)?, cfg.task.norm)?;
    let target = match cfg.task.kind {
        TaskKind::Classify { .. } => None,
        _ => {
            let y: Vec<f64> = ids.iter().flat_map(|&i| split.item(i).iter().copied()).collect();
            Some(norm_reapply(&Tensor::new(vec![ids.len(), split.len, 1], y)?, &stats)?)
        }
    };
    let labels = if split.labels.is_empty() {
        Vec::new()
    } else {
        ids.iter().map(|&i| split.labels[i]).collect()
    };
    Ok(Batch {
        input,
        target,
        labels,
        stats,
        factors: task_factors(cfg, q)?,
    })
}

/// Training objective of one batch. `eval` swaps the anomaly objective for
/// plain MSE, since the frequency term only shapes training.
pub fn loss(
    g: &mut Graph,
    model: &NfmModel,
    cfg: &RunConfig,
    batch: &Batch,
    eval: bool,
) -> Result<Var> {
    let x = g.constant(batch.input.clone());
    let out = model.forward(g, x, &batch.factors)?;
    match (cfg.task.kind, &batch.target) {
        (TaskKind::Classify { .. }, _) => g.softmax_cross_entropy(out.output, &batch.labels),
        (TaskKind::Forecast { .. }, Some(y)) => {
            let y = g.constant(y.clone());
            forecast_loss(g, out.output, y, cfg.task.lambda)
        }
        (TaskKind::Anomaly { .. }, Some(y)) => {
            let y = g.constant(y.clone());
            if eval {
                mse_loss(g, out.output, y)
            } else {
                anomaly_loss(g, out.output, y, cfg.task.lambda)
            }
        }
        _ => unreachable!("series tasks always carry targets"),
    }
}
