//! Turning a [`DataSource`] into train/val/test sample sets.

use nfm_core::data::{
    chronological_split, inject_spikes, load_csv, make_windows, sinusoid_series, synth_generate,
    Standardizer,
};
use nfm_core::tasks::TaskKind;
use nfm_core::{NfmError, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{DataSource, RunConfig};

/// RNG stream reserved for data generation and shuffling of the sample set.
pub const DATA_STREAM: u64 = 1;

/// Univariate samples of a fixed length. Series sources are channel
/// independent: item `w * channels + ch` is channel `ch` of window `w`.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    /// `[count, len]`.
    pub data: Vec<f64>,
    pub len: usize,
    /// Source channels interleaved into the item axis.
    pub channels: usize,
    /// Class labels, one per item (classification only).
    pub labels: Vec<usize>,
    /// Per-step anomaly truth `[windows, len]` (anomaly sources only).
    pub truth: Vec<bool>,
}

impl Split {
    pub fn count(&self) -> usize {
        self.data.len() / self.len.max(1)
    }

    pub fn item(&self, i: usize) -> &[f64] {
        &self.data[i * self.len..(i + 1) * self.len]
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub train: Split,
    pub val: Split,
    pub test: Split,
    /// Non-overlapping train windows, the pool for anomaly thresholds.
    pub train_pool: Option<Split>,
}

impl Prepared {
    pub fn split(&self, name: &str) -> Result<&Split> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(NfmError::invalid(format!("unknown split '{other}'"))),
        }
    }
}

/// Window length seen by a task: lookback plus horizon for forecasting.
pub fn sample_len(cfg: &RunConfig) -> usize {
    match cfg.task.kind {
        TaskKind::Forecast { horizon } => cfg.window + horizon,
        _ => cfg.window,
    }
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(DATA_STREAM);
    match &cfg.data {
        DataSource::Synth { spec, split } => {
            let synth = synth_generate(spec, &mut rng)?;
            let n = spec.len;
            let mut order: Vec<usize> = (0..synth.labels.len()).collect();
            order.shuffle(&mut rng);
            let [a, b, _] = chronological_split(order.len(), *split)?;
            let x = &synth.signals.data;
            // One scalar z-score fitted on the training items.
            let train_vals: Vec<f64> = order[a.clone()]
                .iter()
                .flat_map(|&i| x[i * n..(i + 1) * n].iter().copied())
                .collect();
            let st = Standardizer::fit(&train_vals, 1, 0..train_vals.len())?;
            let take = |ids: &[usize]| {
                let mut data: Vec<f64> = ids
                    .iter()
                    .flat_map(|&i| x[i * n..(i + 1) * n].iter().copied())
                    .collect();
                st.apply(&mut data);
                Split {
                    data,
                    len: n,
                    channels: 1,
                    labels: ids.iter().map(|&i| synth.labels[i]).collect(),
                    truth: Vec::new(),
                }
            };
            Ok(Prepared {
                train: take(&order[a.clone()]),
                val: take(&order[a.end..b.end]),
                test: take(&order[b.end..]),
                train_pool: None,
            })
        }
        DataSource::Sinusoid {
            len,
            channels,
            components,
            noise_std,
            spikes,
            spikes_in_train,
            split,
            stride,
        } => {
            let mut series = sinusoid_series(*len, *channels, components, *noise_std, &mut rng)?;
            let bounds = chronological_split(*len, *split)?;
            let mut truth = vec![false; *len];
            if let Some(sp) = spikes {
                let from = if *spikes_in_train { 0 } else { bounds[0].end };
                let labels = inject_spikes(&mut series[from * channels..], *channels, sp, &mut rng)?;
                truth[from..].copy_from_slice(&labels);
            }
            series_splits(cfg, &series, *channels, &truth, bounds, *stride)
        }
        DataSource::Csv {
            path,
            columns,
            split,
            stride,
        } => {
            let csv = load_csv(path, columns.as_deref())?;
            let bounds = chronological_split(csv.len, *split)?;
            let truth = vec![false; csv.len];
            series_splits(cfg, &csv.data, csv.channels(), &truth, bounds, *stride)
        }
    }
}

fn series_splits(
    cfg: &RunConfig,
    series: &[f64],
    channels: usize,
    truth: &[bool],
    bounds: [std::ops::Range<usize>; 3],
    stride: usize,
) -> Result<Prepared> {
    let st = Standardizer::fit(series, channels, bounds[0].clone())?;
    let mut series = series.to_vec();
    st.apply(&mut series);
    let win = sample_len(cfg);
    let horizon = win - cfg.window;
    let anomaly = matches!(cfg.task.kind, TaskKind::Anomaly { .. });
    let cut = |range: &std::ops::Range<usize>, stride: usize| -> Result<Split> {
        let part = &series[range.start * channels..range.end * channels];
        let w = make_windows(part, channels, cfg.window, horizon, stride)?;
        let mut data = Vec::with_capacity(w.data.len());
        for i in 0..w.len() {
            let window = w.window(i);
            for ch in 0..channels {
                data.extend(window.iter().skip(ch).step_by(channels));
            }
        }
        let truth = w
            .starts
            .iter()
            .flat_map(|&s| truth[range.start + s..range.start + s + win].iter().copied())
            .collect();
        Ok(Split {
            data,
            len: win,
            channels,
            labels: Vec::new(),
            truth,
        })
    };
    // Anomaly evaluation scores every step exactly once.
    let eval_stride = if anomaly { cfg.window } else { stride };
    Ok(Prepared {
        train: cut(&bounds[0], stride)?,
        val: cut(&bounds[1], eval_stride)?,
        test: cut(&bounds[2], eval_stride)?,
        train_pool: if anomaly {
            Some(cut(&bounds[0], cfg.window)?)
        } else {
            None
        },
    })
}
