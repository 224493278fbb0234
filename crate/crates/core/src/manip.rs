//! Fourier-domain data manipulation: timespan extension, resampling and
//! decimation.
//!
//! Extending a length-`N` sequence to length `L = N * m_tau * m_f` is done by
//! scattering its half-spectrum onto a zeroed length-`L` half-spectrum,
//! `out[floor(m_tau * k)] = m_tau * m_f * X[k]`. With `m_tau = 1` this is
//! zero-padding (ideal sinc interpolation); with integer `m_tau = m` and
//! `m_f = 1` it is zero-interleaving (m-fold periodic repetition).

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{NfmError, Result};
use crate::spectral::{half_len, irfft, rfft, Complex, Spectrum};

pub type Rational = Ratio<u64>;

/// Timespan ratio `m_tau = T_y / T_x` and sampling-rate ratio `m_f = f_y / f_x`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtensionFactors {
    pub m_tau: Rational,
    pub m_f: Rational,
}

impl ExtensionFactors {
    pub fn new(m_tau: Rational, m_f: Rational) -> Result<Self> {
        let one = Rational::from_integer(1);
        if m_tau < one || m_f < one {
            return Err(NfmError::IncompatibleFactors(format!(
                "factors must be >= 1, got m_tau={m_tau}, m_f={m_f}"
            )));
        }
        Ok(Self { m_tau, m_f })
    }

    pub fn identity() -> Self {
        Self {
            m_tau: Rational::from_integer(1),
            m_f: Rational::from_integer(1),
        }
    }

    pub fn integers(m_tau: u64, m_f: u64) -> Result<Self> {
        Self::new(Rational::from_integer(m_tau), Rational::from_integer(m_f))
    }

    /// Forecasting: extend a lookback of `n` by `horizon` on the same grid.
    pub fn forecast(n: usize, horizon: usize) -> Result<Self> {
        if n == 0 {
            return Err(NfmError::EmptySequence);
        }
        Self::new(
            Rational::new((n + horizon) as u64, n as u64),
            Rational::from_integer(1),
        )
    }

    /// Reconstruction from a sequence decimated by `dr`.
    pub fn upsample(dr: usize) -> Result<Self> {
        Self::integers(1, dr as u64)
    }

    /// Output length `L = N * m_tau * m_f`, if integral.
    pub fn output_len(&self, n: usize) -> Result<usize> {
        let l = Rational::from_integer(n as u64) * self.m_tau * self.m_f;
        if !l.is_integer() || l.to_integer() == 0 {
            return Err(NfmError::IncompatibleFactors(format!(
                "N={n} * m_tau={} * m_f={} = {l} is not a positive integer",
                self.m_tau, self.m_f
            )));
        }
        Ok(l.to_integer() as usize)
    }

    /// Amplitude scale `m_tau * m_f` applied to moved coefficients.
    pub fn scale(&self) -> f64 {
        let s = self.m_tau * self.m_f;
        *s.numer() as f64 / *s.denom() as f64
    }

    /// Destination bin of source bin `k`.
    #[inline]
    pub fn target_bin(&self, k: usize) -> usize {
        ((k as u64 * self.m_tau.numer()) / self.m_tau.denom()) as usize
    }

    /// Whether `k -> floor(m_tau * k)` is injective over the `n`-point half-spectrum.
    pub fn is_injective(&self, n: usize) -> bool {
        (1..half_len(n)).all(|k| self.target_bin(k) != self.target_bin(k - 1))
    }

    /// Same output grid after the input was decimated by `dr`: `m_f` grows by `dr`.
    pub fn rescaled_for_decimation(&self, dr: usize) -> Self {
        Self {
            m_tau: self.m_tau,
            m_f: self.m_f * Rational::from_integer(dr as u64),
        }
    }
}

/// Source-to-destination bin map for extending an `n`-point half-spectrum.
///
/// Returns `(L, targets, scale)` where `targets[k]` is the destination of bin `k`.
pub fn extension_map(n: usize, f: &ExtensionFactors) -> Result<(usize, Vec<usize>, f64)> {
    let l = f.output_len(n)?;
    let targets: Vec<usize> = (0..half_len(n)).map(|k| f.target_bin(k)).collect();
    debug_assert!(targets.iter().all(|&t| t < half_len(l)));
    Ok((l, targets, f.scale()))
}

/// Extend a half-spectrum to the grid described by `f`.
///
/// Colliding destinations (only possible for non-integer `m_tau`) resolve as
/// last write wins in ascending `k`.
pub fn extend_spectrum(x: &Spectrum, f: &ExtensionFactors) -> Result<Spectrum> {
    let (l, targets, scale) = extension_map(x.n_time(), f)?;
    let mut out = Spectrum::zeros(x.channels(), l);
    for (k, &t) in targets.iter().enumerate() {
        for c in 0..x.channels() {
            out.set(t, c, x.get(k, c) * scale);
        }
    }
    out.enforce_realness();
    Ok(out)
}

/// Resample `x` to `l` points by zero-padding (`l > N`) or truncating
/// (`l < N`) its spectrum.
pub fn sinc_resample(x: &[f64], l: usize) -> Result<Vec<f64>> {
    let n = x.len();
    if n == 0 {
        return Err(NfmError::EmptySequence);
    }
    if l == 0 {
        return Err(NfmError::invalid("target length must be >= 1"));
    }
    if l == n {
        return Ok(x.to_vec());
    }
    let spec = rfft(x)?;
    if l > n {
        let f = ExtensionFactors::new(
            Rational::from_integer(1),
            Rational::new(l as u64, n as u64),
        )?;
        return irfft(&extend_spectrum(&spec, &f)?);
    }
    let scale = l as f64 / n as f64;
    let data: Vec<Complex> = spec.data()[..half_len(l)]
        .iter()
        .map(|z| z * scale)
        .collect();
    let mut out = Spectrum::new(data, 1, l)?;
    out.enforce_realness();
    irfft(&out)
}

/// Keep every `dr`-th sample.
pub fn decimate(x: &[f64], dr: usize) -> Result<Vec<f64>> {
    if dr == 0 || x.len() % dr != 0 {
        return Err(NfmError::invalid(format!(
            "decimation factor {dr} does not divide length {}",
            x.len()
        )));
    }
    Ok(x.iter().step_by(dr).copied().collect())
}

/// Decimate each sequence of a row-major `[batch, n, channels]` array along time.
pub fn decimate_batch(
    x: &[f64],
    batch: usize,
    n: usize,
    channels: usize,
    dr: usize,
) -> Result<Vec<f64>> {
    if dr == 0 || n % dr != 0 {
        return Err(NfmError::invalid(format!(
            "decimation factor {dr} does not divide length {n}"
        )));
    }
    let mut out = Vec::with_capacity(batch * (n / dr) * channels);
    for b in 0..batch {
        for t in (0..n).step_by(dr) {
            let row = (b * n + t) * channels;
            out.extend_from_slice(&x[row..row + channels]);
        }
    }
    Ok(out)
}
