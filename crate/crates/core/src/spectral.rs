//! Real-input discrete Fourier transforms on half-spectra.
//!
//! Conventions: the forward transform is unnormalized,
//! `X[k] = sum_n x[n] exp(-2 pi i k n / N)`, and the inverse carries the
//! `1/N` factor. A real sequence of length `N` is represented by its first
//! `K = N/2 + 1` coefficients; the remaining bins follow from conjugate
//! symmetry `X[N-k] = conj(X[k])`.
//!
//! The complex transforms are planned once per length and cached per thread.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{NfmError, Result};

pub use num_complex::Complex64 as Complex;

/// Number of half-spectrum bins for a real sequence of length `n`.
#[inline]
pub fn half_len(n: usize) -> usize {
    n / 2 + 1
}

/// Half-spectrum of a real multichannel sequence.
///
/// `data` is row-major `[bins, channels]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    data: Vec<Complex>,
    channels: usize,
    n_time: usize,
}

impl Spectrum {
    pub fn new(data: Vec<Complex>, channels: usize, n_time: usize) -> Result<Self> {
        if n_time == 0 {
            return Err(NfmError::EmptySequence);
        }
        if channels == 0 || data.len() != half_len(n_time) * channels {
            return Err(NfmError::invalid(format!(
                "spectrum of n_time={n_time} with {channels} channel(s) needs {} bins, got {} values",
                half_len(n_time),
                data.len()
            )));
        }
        Ok(Self {
            data,
            channels,
            n_time,
        })
    }

    pub fn zeros(channels: usize, n_time: usize) -> Self {
        Self {
            data: vec![Complex::new(0.0, 0.0); half_len(n_time) * channels],
            channels,
            n_time,
        }
    }

    pub fn n_bins(&self) -> usize {
        half_len(self.n_time)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn n_time(&self) -> usize {
        self.n_time
    }

    pub fn data(&self) -> &[Complex] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Complex> {
        self.data
    }

    #[inline]
    pub fn get(&self, bin: usize, channel: usize) -> Complex {
        self.data[bin * self.channels + channel]
    }

    #[inline]
    pub fn set(&mut self, bin: usize, channel: usize, value: Complex) {
        self.data[bin * self.channels + channel] = value;
    }

    /// Bins whose imaginary part must vanish for the spectrum to come from a
    /// real sequence: DC, and Nyquist when `n_time` is even.
    pub fn real_bins(&self) -> impl Iterator<Item = usize> {
        let nyquist = (self.n_time % 2 == 0 && self.n_time > 1).then_some(self.n_time / 2);
        std::iter::once(0).chain(nyquist)
    }

    /// Largest imaginary residue on the DC/Nyquist bins.
    pub fn realness_residue(&self) -> f64 {
        self.real_bins()
            .flat_map(|k| (0..self.channels).map(move |c| (k, c)))
            .map(|(k, c)| self.get(k, c).im.abs())
            .fold(0.0, f64::max)
    }

    /// Zero the imaginary part of the DC/Nyquist bins.
    pub fn enforce_realness(&mut self) {
        let bins: Vec<usize> = self.real_bins().collect();
        for k in bins {
            for c in 0..self.channels {
                self.data[k * self.channels + c].im = 0.0;
            }
        }
    }
}

/// A batch of real multichannel sequences sharing one length and sampling grid.
///
/// `data` is row-major `[batch, len, channels]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesBatch {
    pub data: Vec<f64>,
    pub batch: usize,
    pub len: usize,
    pub channels: usize,
    /// Samples per unit timespan.
    pub f_x: f64,
    /// Timespan covered by one sequence.
    pub t_x: f64,
}

impl SeriesBatch {
    /// Batch on the default grid: unit timespan, `f_x = len`.
    pub fn new(data: Vec<f64>, batch: usize, len: usize, channels: usize) -> Result<Self> {
        if len == 0 {
            return Err(NfmError::EmptySequence);
        }
        if data.len() != batch * len * channels {
            return Err(NfmError::ShapeMismatch {
                op: "SeriesBatch::new",
                lhs: vec![data.len()],
                rhs: vec![batch, len, channels],
            });
        }
        Ok(Self {
            data,
            batch,
            len,
            channels,
            f_x: len as f64,
            t_x: 1.0,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.batch, self.len, self.channels]
    }

    /// One sequence as a `[len, channels]` slice.
    pub fn item(&self, b: usize) -> &[f64] {
        let stride = self.len * self.channels;
        &self.data[b * stride..(b + 1) * stride]
    }
}

struct Plans {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

thread_local! {
    static PLANNER: RefCell<(FftPlanner<f64>, HashMap<usize, Arc<Plans>>)> =
        RefCell::new((FftPlanner::new(), HashMap::new()));
}

fn plans(n: usize) -> Arc<Plans> {
    PLANNER.with(|cell| {
        let mut guard = cell.borrow_mut();
        let (planner, cache) = &mut *guard;
        if let Some(p) = cache.get(&n) {
            return p.clone();
        }
        let p = Arc::new(Plans {
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        });
        cache.insert(n, p.clone());
        p
    })
}

fn check_finite(x: &[f64]) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(NfmError::NonFinite("input sequence".into()));
    }
    Ok(())
}

/// Half-spectrum of a single real sequence.
pub fn rfft(x: &[f64]) -> Result<Spectrum> {
    if x.is_empty() {
        return Err(NfmError::EmptySequence);
    }
    check_finite(x)?;
    let n = x.len();
    let mut buf: Vec<Complex> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    plans(n).forward.process(&mut buf);
    buf.truncate(half_len(n));
    let mut s = Spectrum {
        data: buf,
        channels: 1,
        n_time: n,
    };
    s.enforce_realness();
    Ok(s)
}

/// Half-spectra of each column of a row-major `[n, channels]` array.
pub fn rfft_channels(x: &[f64], n: usize, channels: usize) -> Result<Spectrum> {
    if n == 0 || channels == 0 {
        return Err(NfmError::EmptySequence);
    }
    if x.len() != n * channels {
        return Err(NfmError::ShapeMismatch {
            op: "rfft_channels",
            lhs: vec![x.len()],
            rhs: vec![n, channels],
        });
    }
    check_finite(x)?;
    let packed = rfft_axis(x, 1, n, channels);
    Ok(Spectrum {
        data: unpack(&packed),
        channels,
        n_time: n,
    })
}

/// Inverse of [`rfft`] for a single-channel spectrum.
pub fn irfft(spec: &Spectrum) -> Result<Vec<f64>> {
    if spec.channels != 1 {
        return Err(NfmError::invalid(format!(
            "irfft expects one channel, got {}",
            spec.channels
        )));
    }
    irfft_channels(spec)
}

/// Inverse transform of every channel; returns row-major `[n_time, channels]`.
pub fn irfft_channels(spec: &Spectrum) -> Result<Vec<f64>> {
    let scale = spec
        .data
        .iter()
        .map(|z| z.norm())
        .fold(1.0_f64, f64::max);
    let residue = spec.realness_residue();
    if residue > 1e-9 * scale {
        return Err(NfmError::NonRealizable(format!(
            "imaginary residue {residue:e} on DC/Nyquist bin"
        )));
    }
    if spec.data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(NfmError::NonFinite("spectrum".into()));
    }
    let packed = pack(&spec.data);
    Ok(irfft_axis(
        &packed,
        1,
        spec.n_bins(),
        spec.channels,
        spec.n_time,
    ))
}

/// Literal `O(N^2)` evaluation of the forward DFT over all `N` bins.
///
/// Reference implementation for testing the fast path.
pub fn naive_dft(x: &[f64]) -> Result<Vec<Complex>> {
    if x.is_empty() {
        return Err(NfmError::EmptySequence);
    }
    let n = x.len();
    Ok((0..n)
        .map(|k| {
            x.iter().enumerate().fold(Complex::new(0.0, 0.0), |acc, (t, &v)| {
                // Reduce k*t mod n first so the angle stays accurate for large n.
                let phase = -2.0 * std::f64::consts::PI * ((k * t) % n) as f64 / n as f64;
                acc + Complex::from_polar(v, phase)
            })
        })
        .collect())
}

fn pack(data: &[Complex]) -> Vec<f64> {
    data.iter().flat_map(|z| [z.re, z.im]).collect()
}

fn unpack(data: &[f64]) -> Vec<Complex> {
    data.chunks_exact(2)
        .map(|p| Complex::new(p[0], p[1]))
        .collect()
}

/// Forward real transform along the middle axis of a row-major
/// `[outer, n, inner]` array.
///
/// Returns an interleaved `[outer, K, inner, 2]` array. Columns are processed
/// two at a time by packing them into the real and imaginary parts of one
/// complex transform.
pub(crate) fn rfft_axis(x: &[f64], outer: usize, n: usize, inner: usize) -> Vec<f64> {
    debug_assert_eq!(x.len(), outer * n * inner);
    let k_len = half_len(n);
    let mut out = vec![0.0; outer * k_len * inner * 2];
    let plan = plans(n);
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    let mut scratch = vec![Complex::new(0.0, 0.0); plan.forward.get_inplace_scratch_len()];
    let columns: Vec<(usize, usize)> = (0..outer)
        .flat_map(|o| (0..inner).map(move |i| (o, i)))
        .collect();
    let in_at = |o: usize, t: usize, i: usize| x[(o * n + t) * inner + i];
    let out_idx = |o: usize, k: usize, i: usize| ((o * k_len + k) * inner + i) * 2;

    for pair in columns.chunks(2) {
        let (oa, ia) = pair[0];
        match pair.get(1) {
            Some(&(ob, ib)) => {
                for t in 0..n {
                    buf[t] = Complex::new(in_at(oa, t, ia), in_at(ob, t, ib));
                }
                plan.forward.process_with_scratch(&mut buf, &mut scratch);
                for k in 0..k_len {
                    let p = buf[k];
                    let q = buf[(n - k) % n].conj();
                    let sum = p + q;
                    let diff = p - q;
                    let ja = out_idx(oa, k, ia);
                    out[ja] = 0.5 * sum.re;
                    out[ja + 1] = 0.5 * sum.im;
                    let jb = out_idx(ob, k, ib);
                    out[jb] = 0.5 * diff.im;
                    out[jb + 1] = -0.5 * diff.re;
                }
            }
            None => {
                for t in 0..n {
                    buf[t] = Complex::new(in_at(oa, t, ia), 0.0);
                }
                plan.forward.process_with_scratch(&mut buf, &mut scratch);
                for (k, z) in buf.iter().take(k_len).enumerate() {
                    let j = out_idx(oa, k, ia);
                    out[j] = z.re;
                    out[j + 1] = z.im;
                }
            }
        }
        // Realness of DC/Nyquist holds analytically; pin it exactly.
        for &(o, i) in pair {
            out[out_idx(o, 0, i) + 1] = 0.0;
            if n % 2 == 0 {
                out[out_idx(o, n / 2, i) + 1] = 0.0;
            }
        }
    }
    out
}

/// Inverse real transform along the bin axis of an interleaved
/// `[outer, K, inner, 2]` array, producing `[outer, n, inner]`.
///
/// Imaginary parts of the DC bin and (for even `n`) the Nyquist bin are
/// ignored, as they cannot be represented by a real sequence.
pub(crate) fn irfft_axis(
    spec: &[f64],
    outer: usize,
    k_len: usize,
    inner: usize,
    n: usize,
) -> Vec<f64> {
    debug_assert_eq!(k_len, half_len(n));
    debug_assert_eq!(spec.len(), outer * k_len * inner * 2);
    let mut out = vec![0.0; outer * n * inner];
    let plan = plans(n);
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    let mut scratch = vec![Complex::new(0.0, 0.0); plan.inverse.get_inplace_scratch_len()];
    let inv_n = 1.0 / n as f64;
    let columns: Vec<(usize, usize)> = (0..outer)
        .flat_map(|o| (0..inner).map(move |i| (o, i)))
        .collect();
    let bin = |o: usize, k: usize, i: usize| -> Complex {
        let j = ((o * k_len + k) * inner + i) * 2;
        let im = if k == 0 || (n % 2 == 0 && k == n / 2) {
            0.0
        } else {
            spec[j + 1]
        };
        Complex::new(spec[j], im)
    };
    // Value of the Hermitian-extended spectrum at full index `k`.
    let full = |o: usize, k: usize, i: usize| -> Complex {
        if k < k_len {
            bin(o, k, i)
        } else {
            bin(o, n - k, i).conj()
        }
    };
    let i_unit = Complex::new(0.0, 1.0);

    for pair in columns.chunks(2) {
        let (oa, ia) = pair[0];
        let second = pair.get(1).copied();
        for (k, slot) in buf.iter_mut().enumerate() {
            let a = full(oa, k, ia);
            *slot = match second {
                Some((ob, ib)) => a + i_unit * full(ob, k, ib),
                None => a,
            };
        }
        plan.inverse.process_with_scratch(&mut buf, &mut scratch);
        for t in 0..n {
            out[(oa * n + t) * inner + ia] = buf[t].re * inv_n;
            if let Some((ob, ib)) = second {
                out[(ob * n + t) * inner + ib] = buf[t].im * inv_n;
            }
        }
    }
    out
}
