//! Training loop with cosine schedule, early stopping and divergence abort.

use std::path::Path;
use std::time::Instant;

use nfm_core::autodiff::{cosine_lr, Adam, Graph};
use nfm_core::checkpoint::Checkpoint;
use nfm_core::layers::NfmModel;
use nfm_core::tasks::TaskKind;
use nfm_core::{NfmError, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::batch;
use crate::config::RunConfig;
use crate::dataset::Prepared;
use crate::eval;

/// RNG stream for shuffling and dropout masks.
pub const TRAIN_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: u64,
    pub lr: f64,
    pub train_loss: f64,
    /// Validation loss, or accuracy for classification.
    pub val_metric: f64,
    pub improved: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: NfmModel,
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// Called after each epoch with the log entry and the current model.
pub type EpochHook<'a> = &'a mut dyn FnMut(&EpochLog, &NfmModel);

pub fn train(
    cfg: &RunConfig,
    data: &Prepared,
    ckpt_path: Option<&Path>,
    mut hook: Option<EpochHook<'_>>,
) -> Result<TrainOutcome> {
    let hash = cfg.hash();
    let mut model = NfmModel::new(cfg.model.clone(), cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(TRAIN_STREAM);
    let o = &cfg.optim;
    let mut opt = Adam::new(&model.store, o.lr);
    let count = data.train.count();
    if count == 0 {
        return Err(NfmError::invalid("training split is empty"));
    }
    let per_epoch = count
        .div_ceil(o.batch)
        .min(o.max_steps_per_epoch.unwrap_or(usize::MAX));
    let total = per_epoch * o.epochs;
    let classify = matches!(cfg.task.kind, TaskKind::Classify { .. });
    let better = |new: f64, old: f64| if classify { new > old } else { new < old };

    let mut best = Checkpoint::capture(&model, &rng, 0, &hash);
    let mut best_metric = if classify { f64::NEG_INFINITY } else { f64::INFINITY };
    let mut bad_epochs = 0;
    let mut log = Vec::new();
    let started = Instant::now();
    let mut step = 0usize;

    for epoch in 0..o.epochs {
        let mut order: Vec<usize> = (0..count).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = o.lr;
        for ids in order.chunks(o.batch).take(per_epoch) {
            lr = match o.lr_min {
                Some(min) => cosine_lr(step, total, o.lr, min),
                None => o.lr,
            };
            opt.lr = lr;
            let b = batch::build(cfg, &data.train, ids, 1)?;
            let mut g = Graph::new(true, rng.random());
            let l = batch::loss(&mut g, &model, cfg, &b, false)?;
            let value = g.value(l).item();
            let applied = if value.is_finite() {
                let grads = g.backward(l)?.param_grads(&model.store);
                opt.step(&mut model.store, &grads)
            } else {
                Err(NfmError::Diverged(format!("loss {value} at step {step}")))
            };
            if let Err(e) = applied {
                if let Some(p) = ckpt_path {
                    best.save(p)?;
                }
                return Err(e);
            }
            loss_sum += value * ids.len() as f64;
            step += 1;
        }
        let seen = (per_epoch * o.batch).min(count);
        let val_metric = if classify {
            eval::metrics(&model, cfg, data, &data.val, 1)?[0].1
        } else {
            eval::mean_loss(&model, cfg, &data.val)?
        };
        let improved = better(val_metric, best_metric);
        if improved {
            best_metric = val_metric;
            best = Checkpoint::capture(&model, &rng, step as u64, &hash);
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
        }
        let entry = EpochLog {
            epoch,
            steps: step as u64,
            lr,
            train_loss: loss_sum / seen as f64,
            val_metric,
            improved,
        };
        if let Some(h) = hook.as_mut() {
            h(&entry, &model);
        }
        log.push(entry);
        if bad_epochs > o.patience {
            break;
        }
        if o.time_budget_s.is_some_and(|b| started.elapsed().as_secs_f64() > b) {
            break;
        }
    }
    if let Some(p) = ckpt_path {
        best.save(p)?;
    }
    Ok(TrainOutcome {
        model: best.restore()?,
        checkpoint: best,
        log,
    })
}
