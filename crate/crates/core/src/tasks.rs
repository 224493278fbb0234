//! Task framings, losses, instance normalization and anomaly scoring.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{NfmError, Result};
use crate::manip::ExtensionFactors;

/// Guard for zero-variance channels.
pub const NORM_STD_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TaskKind {
    Forecast { horizon: usize },
    Classify { n_classes: usize },
    /// `ratio` is the expected anomaly percentage used for thresholding.
    Anomaly { dr: usize, ratio: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    Revin,
    MeanOnly,
    #[default]
    None,
}

/// Task settings. Serialized flat, e.g. `{"kind": "forecast", "horizon": 32}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TaskRepr", into = "TaskRepr")]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Weight of the time-domain MSE in the composite loss.
    pub lambda: f64,
    pub norm: NormMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum KindTag {
    Forecast,
    Classify,
    Anomaly,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskRepr {
    kind: KindTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    horizon: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    n_classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dr: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    anomaly_ratio: Option<f64>,
    #[serde(default = "default_lambda")]
    lambda: f64,
    #[serde(default)]
    norm: NormMode,
}

fn default_lambda() -> f64 {
    0.5
}

impl TryFrom<TaskRepr> for TaskSpec {
    type Error = String;

    fn try_from(r: TaskRepr) -> std::result::Result<Self, String> {
        let stray = |name: &str, present: bool| {
            if present {
                Err(format!("field `{name}` does not apply to task kind {:?}", r.kind))
            } else {
                Ok(())
            }
        };
        let kind = match r.kind {
            KindTag::Forecast => {
                stray("n_classes", r.n_classes.is_some())?;
                stray("dr", r.dr.is_some() || r.anomaly_ratio.is_some())?;
                TaskKind::Forecast {
                    horizon: r.horizon.ok_or("forecast task needs `horizon`")?,
                }
            }
            KindTag::Classify => {
                stray("horizon", r.horizon.is_some())?;
                stray("dr", r.dr.is_some() || r.anomaly_ratio.is_some())?;
                TaskKind::Classify {
                    n_classes: r.n_classes.ok_or("classify task needs `n_classes`")?,
                }
            }
            KindTag::Anomaly => {
                stray("horizon", r.horizon.is_some())?;
                stray("n_classes", r.n_classes.is_some())?;
                TaskKind::Anomaly {
                    dr: r.dr.unwrap_or(2),
                    ratio: r.anomaly_ratio.unwrap_or(1.0),
                }
            }
        };
        Ok(TaskSpec {
            kind,
            lambda: r.lambda,
            norm: r.norm,
        })
    }
}

impl From<TaskSpec> for TaskRepr {
    fn from(t: TaskSpec) -> Self {
        let mut r = TaskRepr {
            kind: KindTag::Forecast,
            horizon: None,
            n_classes: None,
            dr: None,
            anomaly_ratio: None,
            lambda: t.lambda,
            norm: t.norm,
        };
        match t.kind {
            TaskKind::Forecast { horizon } => r.horizon = Some(horizon),
            TaskKind::Classify { n_classes } => {
                r.kind = KindTag::Classify;
                r.n_classes = Some(n_classes);
            }
            TaskKind::Anomaly { dr, ratio } => {
                r.kind = KindTag::Anomaly;
                r.dr = Some(dr);
                r.anomaly_ratio = Some(ratio);
            }
        }
        r
    }
}

impl TaskSpec {
    pub fn new(kind: TaskKind) -> Self {
        Self {
            kind,
            lambda: default_lambda(),
            norm: NormMode::None,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(NfmError::invalid("task.lambda must be in [0, 1]"));
        }
        match self.kind {
            TaskKind::Classify { n_classes: 0 } => {
                Err(NfmError::invalid("task.n_classes must be positive"))
            }
            TaskKind::Anomaly { dr, .. } if dr == 0 || n % dr != 0 => Err(NfmError::invalid(
                format!("anomaly dr={dr} must divide the window length {n}"),
            )),
            _ => {
                let f = self.factors(self.input_len(n))?;
                if !f.is_injective(self.input_len(n)) {
                    return Err(NfmError::IncompatibleFactors(format!(
                        "extension map for {:?} is not injective at N={n}",
                        self.kind
                    )));
                }
                Ok(())
            }
        }
    }

    /// Length of the sequence the model actually sees for a window of `n` samples.
    pub fn input_len(&self, n: usize) -> usize {
        match self.kind {
            TaskKind::Anomaly { dr, .. } => n / dr.max(1),
            _ => n,
        }
    }

    /// Extension factors for a model input of length `n_in`.
    pub fn factors(&self, n_in: usize) -> Result<ExtensionFactors> {
        match self.kind {
            TaskKind::Forecast { horizon } => ExtensionFactors::forecast(n_in, horizon),
            TaskKind::Classify { .. } => Ok(ExtensionFactors::identity()),
            TaskKind::Anomaly { dr, .. } => ExtensionFactors::upsample(dr),
        }
    }
}

/// Mean magnitude of `rfft(pred - target)` over bins, channels and batch.
/// Inputs are `[B, L, c]` (or `[L, c]`), transformed along the time axis.
pub fn focal_freq_loss(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    let rank = g.shape(pred).len();
    if rank < 2 {
        return Err(NfmError::ShapeMismatch {
            op: "focal_freq_loss",
            lhs: g.shape(pred).to_vec(),
            rhs: g.shape(target).to_vec(),
        });
    }
    let diff = g.sub(pred, target)?;
    let spec = g.rfft(diff, rank - 2)?;
    let mag = g.complex_abs(spec)?;
    Ok(g.mean(mag))
}

pub fn mse_loss(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    let diff = g.sub(pred, target)?;
    let sq = g.square(diff);
    Ok(g.mean(sq))
}

/// `lambda * MSE + (1 - lambda) * focal frequency loss`.
pub fn composite_loss(g: &mut Graph, pred: Var, target: Var, lambda: f64) -> Result<Var> {
    if g.shape(pred) != g.shape(target) {
        return Err(NfmError::ShapeMismatch {
            op: "composite_loss",
            lhs: g.shape(pred).to_vec(),
            rhs: g.shape(target).to_vec(),
        });
    }
    let mse = mse_loss(g, pred, target)?;
    let ffl = focal_freq_loss(g, pred, target)?;
    let a = g.scale(mse, lambda);
    let b = g.scale(ffl, 1.0 - lambda);
    g.add(a, b)
}

/// Supervision over the whole extrapolated sequence: lookback followed by horizon.
pub fn forecast_loss(g: &mut Graph, pred: Var, target: Var, lambda: f64) -> Result<Var> {
    composite_loss(g, pred, target, lambda)
}

/// Reconstruction of the full-rate window from its decimated input.
pub fn anomaly_loss(g: &mut Graph, recon: Var, target: Var, lambda: f64) -> Result<Var> {
    composite_loss(g, recon, target, lambda)
}

/// Global average pooling over positions then a linear map: `[B, L, d] -> [B, classes]`.
pub fn classify_head(g: &mut Graph, z: Var, weight: Var, bias: Var) -> Result<Var> {
    let pooled = g.mean_axis(z, 1)?;
    let logits = g.matmul(pooled, weight)?;
    g.add(logits, bias)
}

/// Per-instance, per-channel statistics of a `[B, N, c]` batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mode: NormMode,
    pub channels: usize,
    /// `[B, c]`.
    pub mean: Vec<f64>,
    /// `[B, c]`; all ones unless `mode` is RevIN.
    pub std: Vec<f64>,
}

fn batch_dims(x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [b, n, c] if n > 0 => Ok((b, n, c)),
        _ => Err(NfmError::invalid(format!(
            "expected a non-empty [B, N, c] batch, got {:?}",
            x.shape()
        ))),
    }
}

pub fn norm_apply(x: &Tensor, mode: NormMode) -> Result<(Tensor, NormStats)> {
    let (b, n, c) = batch_dims(x)?;
    let d = x.data();
    let mut mean = vec![0.0; b * c];
    let mut std = vec![1.0; b * c];
    if mode != NormMode::None {
        for bi in 0..b {
            for ch in 0..c {
                let col = (0..n).map(|t| d[(bi * n + t) * c + ch]);
                let mu = col.clone().sum::<f64>() / n as f64;
                mean[bi * c + ch] = mu;
                if mode == NormMode::Revin {
                    let var = col.map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
                    std[bi * c + ch] = (var + NORM_STD_EPS).sqrt();
                }
            }
        }
    }
    let out: Vec<f64> = d
        .iter()
        .enumerate()
        .map(|(j, v)| {
            let s = (j / (n * c)) * c + j % c;
            (v - mean[s]) / std[s]
        })
        .collect();
    let stats = NormStats {
        mode,
        channels: c,
        mean,
        std,
    };
    Ok((Tensor::new(x.shape().to_vec(), out)?, stats))
}

/// Undo [`norm_apply`] on an output batch `[B, L, c]` of any length `L`.
pub fn norm_invert(y: &Tensor, stats: &NormStats) -> Result<Tensor> {
    let (b, l, c) = batch_dims(y)?;
    if c != stats.channels || b * c != stats.mean.len() {
        return Err(NfmError::ShapeMismatch {
            op: "norm_invert",
            lhs: y.shape().to_vec(),
            rhs: vec![stats.mean.len() / stats.channels.max(1), l, stats.channels],
        });
    }
    let out = y
        .data()
        .iter()
        .enumerate()
        .map(|(j, v)| {
            let s = (j / (l * c)) * c + j % c;
            v * stats.std[s] + stats.mean[s]
        })
        .collect();
    Tensor::new(y.shape().to_vec(), out)
}

/// Apply the statistics of [`norm_apply`] to another batch, e.g. a target
/// window of a different length.
pub fn norm_reapply(y: &Tensor, stats: &NormStats) -> Result<Tensor> {
    let (b, l, c) = batch_dims(y)?;
    if c != stats.channels || b * c != stats.mean.len() {
        return Err(NfmError::ShapeMismatch {
            op: "norm_reapply",
            lhs: y.shape().to_vec(),
            rhs: vec![stats.mean.len() / stats.channels.max(1), l, stats.channels],
        });
    }
    let out = y
        .data()
        .iter()
        .enumerate()
        .map(|(j, v)| {
            let s = (j / (l * c)) * c + j % c;
            (v - stats.mean[s]) / stats.std[s]
        })
        .collect();
    Tensor::new(y.shape().to_vec(), out)
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len().max(1) as f64
}

pub fn mae(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len().max(1) as f64
}

/// Row-wise argmax of `[B, C]` logits.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(c.max(1))
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Per-step squared reconstruction error averaged over channels.
/// `x` and `recon` are row-major `[N, c]`.
pub fn anomaly_score(x: &[f64], recon: &[f64], channels: usize) -> Result<Vec<f64>> {
    if x.len() != recon.len() || channels == 0 || x.len() % channels != 0 {
        return Err(NfmError::ShapeMismatch {
            op: "anomaly_score",
            lhs: vec![x.len()],
            rhs: vec![recon.len(), channels],
        });
    }
    Ok(x.chunks(channels)
        .zip(recon.chunks(channels))
        .map(|(a, b)| mse(a, b))
        .collect())
}

/// The `(100 - ratio)`-th percentile of `pool`, interpolating linearly
/// between order statistics.
pub fn threshold_by_ratio(pool: &[f64], ratio_pct: f64) -> Result<f64> {
    if pool.is_empty() {
        return Err(NfmError::invalid("empty score pool"));
    }
    if !(0.0..=100.0).contains(&ratio_pct) {
        return Err(NfmError::invalid(format!("anomaly ratio {ratio_pct} outside [0, 100]")));
    }
    let mut sorted = pool.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = (100.0 - ratio_pct) / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64))
}

/// Flag every ground-truth segment in full if any of its points was flagged.
pub fn point_adjust(pred: &[bool], truth: &[bool]) -> Vec<bool> {
    let mut out = pred.to_vec();
    let mut start = 0;
    while start < truth.len() {
        if !truth[start] {
            start += 1;
            continue;
        }
        let end = truth[start..]
            .iter()
            .position(|&t| !t)
            .map_or(truth.len(), |p| start + p);
        if pred[start..end].iter().any(|&p| p) {
            out[start..end].iter_mut().for_each(|p| *p = true);
        }
        start = end;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision, recall and F1 with `0/0` taken as `0`.
pub fn binary_metrics(pred: &[bool], truth: &[bool]) -> BinaryMetrics {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    BinaryMetrics {
        precision,
        recall,
        f1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn loss_of(pred: &Tensor, target: &Tensor, lambda: Option<f64>) -> f64 {
        let mut g = Graph::new(false, 0);
        let p = g.constant(pred.clone());
        let y = g.constant(target.clone());
        let l = match lambda {
            Some(l) => composite_loss(&mut g, p, y, l).unwrap(),
            None => focal_freq_loss(&mut g, p, y).unwrap(),
        };
        g.value(l).item()
    }

    #[test]
    fn focal_loss_examples() {
        let y = t(&[4, 1], &[0.0; 4]);
        let imp = t(&[4, 1], &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(loss_of(&y, &y, None), 0.0);
        assert!((loss_of(&imp, &y, None) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn focal_loss_joint_shift_invariance() {
        let a = [0.3, -1.2, 2.0, 0.7, 0.1];
        let b = [1.0, 0.5, -0.4, 0.0, 2.2];
        let shift = |v: &[f64]| -> Vec<f64> { (0..5).map(|i| v[(i + 2) % 5]).collect() };
        let l0 = loss_of(&t(&[5, 1], &a), &t(&[5, 1], &b), None);
        let l1 = loss_of(&t(&[5, 1], &shift(&a)), &t(&[5, 1], &shift(&b)), None);
        assert!((l0 - l1).abs() < 1e-12);
    }

    #[test]
    fn composite_endpoints() {
        let p = t(&[1, 6, 2], &[0.1, 0.9, -0.3, 0.0, 1.2, 0.4, -0.8, 0.5, 0.6, -0.2, 0.0, 0.3]);
        let y = t(&[1, 6, 2], &[0.0; 12]);
        let plain = mse(p.data(), y.data());
        assert_eq!(loss_of(&p, &p, Some(0.5)), 0.0);
        assert!((loss_of(&p, &y, Some(1.0)) - plain).abs() < 1e-15);
        assert!((loss_of(&p, &y, Some(0.0)) - loss_of(&p, &y, None)).abs() < 1e-15);
    }

    #[test]
    fn uniform_logits_cross_entropy() {
        let mut g = Graph::new(false, 0);
        let z = g.constant(Tensor::full(&[2, 7, 3], 0.5));
        let w = g.constant(Tensor::zeros(&[3, 10]));
        let b = g.constant(Tensor::zeros(&[10]));
        let logits = classify_head(&mut g, z, w, b).unwrap();
        let ce = g.softmax_cross_entropy(logits, &[3, 9]).unwrap();
        assert!((g.value(ce).item() - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn pooling_constant_and_permutation() {
        let z0: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut perm = z0.clone();
        // swap positions 0 and 3 of the single batch item, d = 3
        for j in 0..3 {
            perm.swap(j, 9 + j);
        }
        let wdat: Vec<f64> = (0..6).map(|i| i as f64 - 2.5).collect();
        let run = |data: &[f64]| {
            let mut g = Graph::new(false, 0);
            let z = g.constant(t(&[1, 4, 3], data));
            let w = g.constant(t(&[3, 2], &wdat));
            let b = g.constant(Tensor::zeros(&[2]));
            let l = classify_head(&mut g, z, w, b).unwrap();
            g.value(l).data().to_vec()
        };
        assert_eq!(run(&z0), run(&perm));
        let c = run(&[2.0, -1.0, 0.5].repeat(4));
        let expect: Vec<f64> = (0..2)
            .map(|k| 2.0 * wdat[k] - wdat[2 + k] + 0.5 * wdat[4 + k])
            .collect();
        assert!(c.iter().zip(&expect).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn normalization_roundtrip_and_shift() {
        let x = t(&[2, 5, 2], &(0..20).map(|i| ((i * 7) % 11) as f64 - 3.0).collect::<Vec<_>>());
        for mode in [NormMode::Revin, NormMode::MeanOnly, NormMode::None] {
            let (xn, stats) = norm_apply(&x, mode).unwrap();
            let back = norm_invert(&xn, &stats).unwrap();
            assert!(back.data().iter().zip(x.data()).all(|(a, b)| (a - b).abs() < 1e-9));
            if mode != NormMode::None {
                let shifted = t(&[2, 5, 2], &x.data().iter().map(|v| v + 4.25).collect::<Vec<_>>());
                let (sn, _) = norm_apply(&shifted, mode).unwrap();
                assert!(sn.data().iter().zip(xn.data()).all(|(a, b)| (a - b).abs() < 1e-12));
            }
        }
        let (c, _) = norm_apply(&Tensor::full(&[1, 4, 1], 3.0), NormMode::MeanOnly).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));
        let (c, s) = norm_apply(&Tensor::full(&[1, 4, 1], 3.0), NormMode::Revin).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0) && s.std[0] > 0.0);
    }

    #[test]
    fn invert_covers_longer_output_grid() {
        let x = t(&[1, 3, 1], &[1.0, 2.0, 3.0]);
        let (_, stats) = norm_apply(&x, NormMode::MeanOnly).unwrap();
        let y = norm_invert(&Tensor::zeros(&[1, 6, 1]), &stats).unwrap();
        assert_eq!(y.data(), &[2.0; 6]);
    }

    #[test]
    fn threshold_percentile() {
        assert_eq!(threshold_by_ratio(&[4.0, 1.0, 3.0, 2.0], 50.0).unwrap(), 2.5);
        assert_eq!(threshold_by_ratio(&[5.0], 1.0).unwrap(), 5.0);
        assert!(threshold_by_ratio(&[], 1.0).is_err());
    }

    #[test]
    fn point_adjust_fills_segment() {
        let truth: Vec<bool> = (0..9).map(|i| (3..=6).contains(&i)).collect();
        let mut pred = vec![false; 9];
        pred[4] = true;
        let adj = point_adjust(&pred, &truth);
        assert_eq!(adj, truth);
        assert_eq!(point_adjust(&[false; 9], &truth), vec![false; 9]);
    }

    #[test]
    fn no_detections_gives_zero_f1() {
        let m = binary_metrics(&[false; 4], &[true, false, false, true]);
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn anomaly_scores_average_channels() {
        let s = anomaly_score(&[1.0, 2.0, 0.0, 0.0], &[0.0, 0.0, 0.0, 2.0], 2).unwrap();
        assert_eq!(s, vec![2.5, 2.0]);
    }

    #[test]
    fn task_factors() {
        let f = TaskSpec::new(TaskKind::Forecast { horizon: 32 });
        assert_eq!(f.factors(128).unwrap().output_len(128).unwrap(), 160);
        f.validate(128).unwrap();
        let a = TaskSpec::new(TaskKind::Anomaly { dr: 2, ratio: 1.0 });
        assert_eq!(a.input_len(100), 50);
        assert_eq!(a.factors(50).unwrap().output_len(50).unwrap(), 100);
        assert!(a.validate(101).is_err());
    }

    #[test]
    fn task_json_is_flat_and_strict() {
        let t: TaskSpec = serde_json::from_str(r#"{"kind": "forecast", "horizon": 32}"#).unwrap();
        assert_eq!(t, TaskSpec::new(TaskKind::Forecast { horizon: 32 }));
        let back: TaskSpec = serde_json::from_value(serde_json::to_value(t).unwrap()).unwrap();
        assert_eq!(back, t);
        for bad in [
            r#"{"kind": "forecast"}"#,
            r#"{"kind": "forecast", "horizon": 3, "n_classes": 2}"#,
            r#"{"kind": "classify", "n_classes": 2, "bogus": 1}"#,
        ] {
            assert!(serde_json::from_str::<TaskSpec>(bad).is_err(), "{bad}");
        }
    }
}
