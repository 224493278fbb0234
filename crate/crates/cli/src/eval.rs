//! Inference over whole splits and per-task metrics.

use nfm_core::autodiff::Graph;
use nfm_core::layers::NfmModel;
use nfm_core::tasks::{
    accuracy, anomaly_score, argmax_rows, binary_metrics, mae, mse, norm_invert, point_adjust,
    threshold_by_ratio, TaskKind,
};
use nfm_core::{NfmError, Result};

use crate::batch::{self, Batch};
use crate::config::RunConfig;
use crate::dataset::{Prepared, Split};

const EVAL_BATCH: usize = 32;

/// Worker count from `NFM_THREADS` (default 1).
pub fn worker_count() -> usize {
    std::env::var("NFM_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Map `f` over chunks of `0..count` on a bounded pool; results come back in chunk order.
fn map_chunks<T: Send>(
    count: usize,
    chunk: usize,
    f: impl Fn(&[usize]) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let ids: Vec<usize> = (0..count).collect();
    let chunks: Vec<&[usize]> = ids.chunks(chunk.max(1)).collect();
    let workers = worker_count().min(chunks.len()).max(1);
    if workers == 1 {
        return chunks.into_iter().map(&f).collect();
    }
    let mut slots: Vec<Option<Result<T>>> = (0..chunks.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let per = chunks.len().div_ceil(workers);
        let f = &f;
        let handles: Vec<_> = chunks
            .chunks(per)
            .map(|group| s.spawn(move || group.iter().map(|c| f(c)).collect::<Vec<_>>()))
            .collect();
        let mut at = 0;
        for h in handles {
            for r in h.join().expect("eval worker panicked") {
                slots[at] = Some(r);
                at += 1;
            }
        }
    });
    slots.into_iter().map(|s| s.expect("every chunk evaluated")).collect()
}

/// Model outputs for every item of `split`, inputs decimated by `q`.
/// Regression outputs are mapped back to the data scale, `[count, L]`;
/// classification returns logits `[count, classes]`.
pub fn predict(model: &NfmModel, cfg: &RunConfig, split: &Split, q: usize) -> Result<Vec<f64>> {
    let parts = map_chunks(split.count(), EVAL_BATCH, |ids| {
        let b = batch::build(cfg, split, ids, q)?;
        let out = model.predict(&b.input, &b.factors)?;
        match cfg.task.kind {
            TaskKind::Classify { .. } => Ok(out.into_data()),
            _ => Ok(norm_invert(&out, &b.stats)?.into_data()),
        }
    })?;
    Ok(parts.concat())
}

/// Mean loss over a split (no dropout).
pub fn mean_loss(model: &NfmModel, cfg: &RunConfig, split: &Split) -> Result<f64> {
    let parts = map_chunks(split.count(), EVAL_BATCH, |ids| {
        let b: Batch = batch::build(cfg, split, ids, 1)?;
        let mut g = Graph::new(false, 0);
        let l = batch::loss(&mut g, model, cfg, &b, true)?;
        Ok(g.value(l).item() * ids.len() as f64)
    })?;
    Ok(parts.iter().sum::<f64>() / split.count().max(1) as f64)
}

/// Per-step anomaly scores `[windows * len]` averaged over channels.
pub fn anomaly_scores(model: &NfmModel, cfg: &RunConfig, split: &Split, q: usize) -> Result<Vec<f64>> {
    let recon = predict(model, cfg, split, q)?;
    let (c, len) = (split.channels, split.len);
    let windows = split.count() / c;
    let mut scores = Vec::with_capacity(windows * len);
    for w in 0..windows {
        // Back to [len, c] so errors average over channels per step.
        let mut x = vec![0.0; len * c];
        let mut r = vec![0.0; len * c];
        for ch in 0..c {
            let item = w * c + ch;
            for t in 0..len {
                x[t * c + ch] = split.item(item)[t];
                r[t * c + ch] = recon[item * len + t];
            }
        }
        scores.extend(anomaly_score(&x, &r, c)?);
    }
    Ok(scores)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyReport {
    pub threshold: f64,
    pub scores: Vec<f64>,
    pub flags: Vec<bool>,
    pub adjusted: Vec<bool>,
}

pub fn anomaly_report(
    model: &NfmModel,
    cfg: &RunConfig,
    data: &Prepared,
    split: &Split,
    q: usize,
) -> Result<AnomalyReport> {
    let TaskKind::Anomaly { ratio, .. } = cfg.task.kind else {
        return Err(NfmError::invalid("anomaly report on a non-anomaly task"));
    };
    let pool_split = data
        .train_pool
        .as_ref()
        .ok_or_else(|| NfmError::invalid("no training score pool"))?;
    let pool = anomaly_scores(model, cfg, pool_split, q)?;
    let threshold = threshold_by_ratio(&pool, ratio)?;
    let scores = anomaly_scores(model, cfg, split, q)?;
    let flags: Vec<bool> = scores.iter().map(|&s| s > threshold).collect();
    let adjusted = point_adjust(&flags, &split.truth);
    Ok(AnomalyReport {
        threshold,
        scores,
        flags,
        adjusted,
    })
}

/// Named metrics for `split`, inputs decimated by `q`.
pub fn metrics(
    model: &NfmModel,
    cfg: &RunConfig,
    data: &Prepared,
    split: &Split,
    q: usize,
) -> Result<Vec<(String, f64)>> {
    match cfg.task.kind {
        TaskKind::Classify { n_classes } => {
            let logits = predict(model, cfg, split, q)?;
            let rows = nfm_core::autodiff::Tensor::new(vec![split.count(), n_classes], logits)?;
            let acc = accuracy(&argmax_rows(&rows), &split.labels);
            Ok(vec![("accuracy".into(), acc)])
        }
        TaskKind::Forecast { horizon } => {
            let pred = predict(model, cfg, split, q)?;
            let len = split.len;
            let mut p = Vec::with_capacity(split.count() * horizon);
            let mut y = Vec::with_capacity(p.capacity());
            let mut last = Vec::with_capacity(p.capacity());
            for i in 0..split.count() {
                let item = split.item(i);
                p.extend_from_slice(&pred[i * len + cfg.window..(i + 1) * len]);
                y.extend_from_slice(&item[cfg.window..]);
                last.extend(std::iter::repeat_n(item[cfg.window - 1], horizon));
            }
            let model_mse = mse(&p, &y);
            let base = mse(&last, &y);
            Ok(vec![
                ("mse".into(), model_mse),
                ("mae".into(), mae(&p, &y)),
                ("persistence_mse".into(), base),
                ("mse_ratio_to_persistence".into(), model_mse / base),
            ])
        }
        TaskKind::Anomaly { .. } => {
            let r = anomaly_report(model, cfg, data, split, q)?;
            let m = binary_metrics(&r.adjusted, &split.truth);
            let raw = binary_metrics(&r.flags, &split.truth);
            Ok(vec![
                ("threshold".into(), r.threshold),
                ("precision".into(), m.precision),
                ("recall".into(), m.recall),
                ("f1".into(), m.f1),
                ("f1_unadjusted".into(), raw.f1),
            ])
        }
    }
}
