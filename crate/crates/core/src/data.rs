//! Synthetic generators, CSV ingestion, windowing, splits and standardization.

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{NfmError, Result};
use crate::spectral::SeriesBatch;

/// Band-limited class signals built from fixed per-class frequencies plus
/// per-sample random frequencies and Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: usize,
    /// Fixed frequencies per class.
    pub class_freqs: usize,
    /// Random frequencies added to each sample.
    pub random_freqs: usize,
    pub len: usize,
    /// Inclusive class band `[f_a, f_b]` in cycles per unit timespan.
    pub band: (usize, usize),
    pub noise_std: f64,
    pub per_class: usize,
    /// Shared phase of every component.
    #[serde(default)]
    pub phase: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            class_freqs: 20,
            random_freqs: 40,
            len: 2000,
            band: (320, 590),
            noise_std: 0.1,
            per_class: 100,
            phase: 0.0,
        }
    }
}

impl SynthSpec {
    /// Highest representable frequency with `f_x = len`.
    pub fn nyquist(&self) -> usize {
        self.len / 2
    }

    pub fn validate(&self) -> Result<()> {
        let (a, b) = self.band;
        if self.len < 2 || self.classes == 0 || self.per_class == 0 {
            return Err(NfmError::invalid("synth: len >= 2, classes and per_class >= 1"));
        }
        if a == 0 || a > b || b >= self.nyquist() {
            return Err(NfmError::invalid(format!(
                "synth: band [{a}, {b}] must satisfy 1 <= f_a <= f_b < nyquist {}",
                self.nyquist()
            )));
        }
        if self.class_freqs > b - a + 1 {
            return Err(NfmError::invalid(format!(
                "synth: {} class frequencies do not fit in band [{a}, {b}]",
                self.class_freqs
            )));
        }
        if !(self.noise_std >= 0.0) {
            return Err(NfmError::invalid("synth: noise_std must be >= 0"));
        }
        Ok(())
    }
}

/// Labelled synthetic set, samples ordered class by class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthData {
    pub signals: SeriesBatch,
    pub labels: Vec<usize>,
    /// `(frequency, amplitude)` components of each class.
    pub class_components: Vec<Vec<(usize, f64)>>,
}

fn add_sine(out: &mut [f64], freq: f64, amp: f64, phase: f64) {
    let n = out.len() as f64;
    let w = 2.0 * std::f64::consts::PI * freq / n;
    for (t, v) in out.iter_mut().enumerate() {
        *v += amp * (w * t as f64 + phase).sin();
    }
}

pub fn synth_generate<R: Rng>(spec: &SynthSpec, rng: &mut R) -> Result<SynthData> {
    spec.validate()?;
    let (a, b) = spec.band;
    let amp = Uniform::new(0.0, 1.0).expect("unit interval");
    let random_freq = Uniform::new_inclusive(1, spec.nyquist()).expect("nyquist >= 1");
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| NfmError::invalid(e.to_string()))?;

    let class_components: Vec<Vec<(usize, f64)>> = (0..spec.classes)
        .map(|_| {
            let mut freqs: Vec<usize> = sample(rng, b - a + 1, spec.class_freqs)
                .into_iter()
                .map(|i| a + i)
                .collect();
            freqs.sort_unstable();
            freqs.into_iter().map(|f| (f, amp.sample(rng))).collect()
        })
        .collect();

    let total = spec.classes * spec.per_class;
    let mut data = vec![0.0; total * spec.len];
    let mut labels = Vec::with_capacity(total);
    for (k, comps) in class_components.iter().enumerate() {
        for _ in 0..spec.per_class {
            let row = labels.len();
            let x = &mut data[row * spec.len..(row + 1) * spec.len];
            for &(f, a_k) in comps {
                add_sine(x, f as f64, a_k, spec.phase);
            }
            for _ in 0..spec.random_freqs {
                let f = random_freq.sample(rng);
                add_sine(x, f as f64, amp.sample(rng), spec.phase);
            }
            if spec.noise_std > 0.0 {
                x.iter_mut().for_each(|v| *v += noise.sample(rng));
            }
            labels.push(k);
        }
    }
    Ok(SynthData {
        signals: SeriesBatch::new(data, total, spec.len, 1)?,
        labels,
        class_components,
    })
}

/// Sum of sinusoids `sum_i a_i sin(2 pi n / p_i + phi_i)` plus Gaussian noise,
/// one independent draw of phases per channel. Row-major `[len, channels]`.
pub fn sinusoid_series<R: Rng>(
    len: usize,
    channels: usize,
    components: &[(f64, f64)],
    noise_std: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let noise = Normal::new(0.0, noise_std).map_err(|e| NfmError::invalid(e.to_string()))?;
    let phase = Uniform::new(0.0, 2.0 * std::f64::consts::PI).expect("finite range");
    let mut out = vec![0.0; len * channels];
    for ch in 0..channels {
        let phases: Vec<f64> = components.iter().map(|_| phase.sample(rng)).collect();
        for t in 0..len {
            let v: f64 = components
                .iter()
                .zip(&phases)
                .map(|(&(period, amp), &ph)| {
                    amp * (2.0 * std::f64::consts::PI * t as f64 / period + ph).sin()
                })
                .sum();
            out[t * channels + ch] = v + if noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
        }
    }
    Ok(out)
}

/// Spike anomalies injected in place.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpikeSpec {
    /// Target fraction of anomalous time steps.
    pub ratio: f64,
    /// Inclusive segment length range.
    pub seg_len: (usize, usize),
    /// Spike height in units of the per-channel standard deviation.
    pub magnitude: f64,
}

impl Default for SpikeSpec {
    fn default() -> Self {
        Self {
            ratio: 0.01,
            seg_len: (3, 5),
            magnitude: 4.0,
        }
    }
}

/// Add alternating-sign spikes to every channel of `series` (`[len, channels]`)
/// and return per-step labels. Segments never touch each other.
pub fn inject_spikes<R: Rng>(
    series: &mut [f64],
    channels: usize,
    spec: &SpikeSpec,
    rng: &mut R,
) -> Result<Vec<bool>> {
    let (lo, hi) = spec.seg_len;
    if channels == 0 || series.len() % channels != 0 || lo == 0 || lo > hi {
        return Err(NfmError::invalid("spikes: bad channel count or segment range"));
    }
    let len = series.len() / channels;
    let std: Vec<f64> = (0..channels)
        .map(|ch| {
            let col = (0..len).map(|t| series[t * channels + ch]);
            let mu = col.clone().sum::<f64>() / len as f64;
            (col.map(|v| (v - mu) * (v - mu)).sum::<f64>() / len as f64).sqrt()
        })
        .collect();
    let mut labels = vec![false; len];
    let target = (spec.ratio * len as f64).round() as usize;
    let seg = Uniform::new_inclusive(lo, hi).expect("lo <= hi");
    let mut marked = 0;
    let mut attempts = 0;
    while marked < target && attempts < 100 * len {
        attempts += 1;
        let l = seg.sample(rng).min(target - marked).max(1);
        if l + 2 > len {
            break;
        }
        let start = rng.random_range(1..len - l);
        if labels[start - 1..(start + l + 1).min(len)].iter().any(|&b| b) {
            continue;
        }
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        for (i, t) in (start..start + l).enumerate() {
            labels[t] = true;
            let s = if i % 2 == 0 { sign } else { -sign };
            for ch in 0..channels {
                series[t * channels + ch] += s * spec.magnitude * std[ch];
            }
        }
        marked += l;
    }
    Ok(labels)
}

/// A multichannel series read from CSV, row-major `[len, channels]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvSeries {
    pub columns: Vec<String>,
    pub data: Vec<f64>,
    pub len: usize,
}

impl CsvSeries {
    pub fn channels(&self) -> usize {
        self.columns.len()
    }
}

fn is_timestamp_header(name: &str) -> bool {
    matches!(name.trim().to_ascii_lowercase().as_str(), "date" | "time" | "timestamp" | "datetime")
}

/// Read a header-first CSV. A leading timestamp column (recognized by name or
/// by a non-numeric first value) is dropped; `channels` selects columns by name.
pub fn load_csv(path: &Path, channels: Option<&[String]>) -> Result<CsvSeries> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    if header.is_empty() {
        return Err(NfmError::invalid("CSV header is empty"));
    }
    let records: Vec<csv::StringRecord> = reader.records().collect::<std::result::Result<_, _>>()?;
    let first_numeric = records
        .first()
        .and_then(|r| r.get(0))
        .is_some_and(|v| v.trim().parse::<f64>().is_ok());
    let skip = usize::from(is_timestamp_header(&header[0]) || (!records.is_empty() && !first_numeric));
    let selected: Vec<usize> = match channels {
        Some(names) => names
            .iter()
            .map(|n| {
                header
                    .iter()
                    .position(|h| h == n)
                    .ok_or_else(|| NfmError::invalid(format!("CSV has no column '{n}'")))
            })
            .collect::<Result<_>>()?,
        None => (skip..header.len()).collect(),
    };
    if selected.is_empty() {
        return Err(NfmError::invalid("CSV has no channel columns"));
    }
    let mut data = Vec::with_capacity(records.len() * selected.len());
    for (i, rec) in records.iter().enumerate() {
        for &col in &selected {
            let cell = rec.get(col).unwrap_or("");
            let v: f64 = cell.trim().parse().map_err(|_| NfmError::Parse {
                // 1-based, counting the header as row 1
                row: i + 2,
                column: col + 1,
                message: format!("non-numeric value '{cell}' in column '{}'", header[col]),
            })?;
            data.push(v);
        }
    }
    Ok(CsvSeries {
        columns: selected.iter().map(|&c| header[c].clone()).collect(),
        len: records.len(),
        data,
    })
}

/// Sliding windows of `lookback + horizon` steps over a `[len, channels]` series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowDataset {
    pub lookback: usize,
    pub horizon: usize,
    pub channels: usize,
    /// Start index of each window in the source series.
    pub starts: Vec<usize>,
    /// `[count, lookback + horizon, channels]`.
    pub data: Vec<f64>,
}

impl WindowDataset {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn window_len(&self) -> usize {
        self.lookback + self.horizon
    }

    /// Full window `i`, `[lookback + horizon, channels]`.
    pub fn window(&self, i: usize) -> &[f64] {
        let w = self.window_len() * self.channels;
        &self.data[i * w..(i + 1) * w]
    }
}

/// Number of windows `(len - lookback - horizon) / stride + 1`.
pub fn window_count(len: usize, lookback: usize, horizon: usize, stride: usize) -> usize {
    if stride == 0 || lookback + horizon > len {
        0
    } else {
        (len - lookback - horizon) / stride + 1
    }
}

pub fn make_windows(
    series: &[f64],
    channels: usize,
    lookback: usize,
    horizon: usize,
    stride: usize,
) -> Result<WindowDataset> {
    if channels == 0 || series.len() % channels != 0 || stride == 0 || lookback == 0 {
        return Err(NfmError::invalid("windows: channels, stride and lookback must be positive"));
    }
    let len = series.len() / channels;
    if lookback + horizon > len {
        return Err(NfmError::invalid(format!(
            "window of {} steps is longer than the {len}-step split",
            lookback + horizon
        )));
    }
    let count = window_count(len, lookback, horizon, stride);
    let w = (lookback + horizon) * channels;
    let starts: Vec<usize> = (0..count).map(|i| i * stride).collect();
    let mut data = Vec::with_capacity(count * w);
    for &s in &starts {
        data.extend_from_slice(&series[s * channels..s * channels + w]);
    }
    Ok(WindowDataset {
        lookback,
        horizon,
        channels,
        starts,
        data,
    })
}

/// Chronological train/val/test boundaries for `len` steps.
pub fn chronological_split(len: usize, ratios: [f64; 3]) -> Result<[Range<usize>; 3]> {
    let total: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| *r < 0.0) || (total - 1.0).abs() > 1e-9 {
        return Err(NfmError::invalid(format!("split ratios {ratios:?} must be >= 0 and sum to 1")));
    }
    let a = (len as f64 * ratios[0]).round() as usize;
    let b = (len as f64 * (ratios[0] + ratios[1])).round() as usize;
    Ok([0..a, a..b.min(len), b.min(len)..len])
}

/// Per-channel z-score fitted on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Fit on rows `range` of a `[len, channels]` series.
    pub fn fit(series: &[f64], channels: usize, range: Range<usize>) -> Result<Self> {
        if range.is_empty() || range.end * channels > series.len() {
            return Err(NfmError::invalid("standardizer: empty or out-of-bounds fit range"));
        }
        let n = range.len() as f64;
        let mut mean = vec![0.0; channels];
        let mut std = vec![0.0; channels];
        for ch in 0..channels {
            let col = range.clone().map(|t| series[t * channels + ch]);
            let mu = col.clone().sum::<f64>() / n;
            let var = col.map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            mean[ch] = mu;
            std[ch] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, series: &mut [f64]) {
        let c = self.mean.len();
        for (j, v) in series.iter_mut().enumerate() {
            *v = (*v - self.mean[j % c]) / self.std[j % c];
        }
    }

    pub fn invert(&self, series: &mut [f64]) {
        let c = self.mean.len();
        for (j, v) in series.iter_mut().enumerate() {
            *v = *v * self.std[j % c] + self.mean[j % c];
        }
    }
}

/// Sidecar describing a flat little-endian `f64` cache file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheMeta {
    pub shape: Vec<usize>,
    pub dtype: String,
    #[serde(default)]
    pub splits: Vec<(usize, usize)>,
    #[serde(default)]
    pub labels: Option<Vec<usize>>,
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Write `data` to `path` (raw f64 LE) and its metadata to `path` with a `.json` extension.
pub fn save_cache(path: &Path, data: &[f64], meta: &CacheMeta) -> Result<()> {
    if meta.shape.iter().product::<usize>() != data.len() {
        return Err(NfmError::ShapeMismatch {
            op: "save_cache",
            lhs: vec![data.len()],
            rhs: meta.shape.clone(),
        });
    }
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes)?;
    fs::write(sidecar(path), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

pub fn load_cache(path: &Path) -> Result<(Vec<f64>, CacheMeta)> {
    let meta: CacheMeta = serde_json::from_str(&fs::read_to_string(sidecar(path))?)?;
    if meta.dtype != "f64le" {
        return Err(NfmError::invalid(format!("unsupported cache dtype '{}'", meta.dtype)));
    }
    let bytes = fs::read(path)?;
    let expect = meta.shape.iter().product::<usize>() * 8;
    if bytes.len() != expect {
        return Err(NfmError::invalid(format!(
            "cache holds {} bytes, sidecar shape needs {expect}",
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((data, meta))
}
