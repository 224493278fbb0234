//! Implicit neural representation `phi: R -> R^d` with a Fourier-feature
//! encoding followed by sine-activated layers and a linear output layer.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{NfmError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InrConfig {
    /// Width of the Fourier-feature encoding (sin/cos pairs).
    pub h0: usize,
    /// Widths of the sine-activated hidden layers.
    pub hidden: Vec<usize>,
    pub out_dim: usize,
    /// Frequency constant of the sine activations.
    pub w0: f64,
    /// Standard deviation of the Fourier-feature frequencies.
    pub ff_scale: f64,
}

impl InrConfig {
    /// Three layers `h0 -> 32 -> 32 -> out_dim`.
    pub fn standard(h0: usize, out_dim: usize, w0: f64) -> Self {
        Self {
            h0,
            hidden: vec![32, 32],
            out_dim,
            w0,
            ff_scale: 128.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.h0 == 0 || self.h0 % 2 != 0 {
            return Err(NfmError::invalid(format!("h0 must be even and positive, got {}", self.h0)));
        }
        if self.out_dim == 0 || self.hidden.contains(&0) {
            return Err(NfmError::invalid("INR widths must be >= 1"));
        }
        if !(self.w0 > 0.0) {
            return Err(NfmError::invalid("w0 must be positive"));
        }
        Ok(())
    }

    /// Trainable scalars (the Fourier-feature frequencies are frozen).
    pub fn param_count(&self) -> usize {
        let mut widths = vec![self.h0];
        widths.extend(&self.hidden);
        widths.push(self.out_dim);
        widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// Equidistant query locations `tau_n = -1 + 2n/L` on `[-1, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    tau: Vec<f64>,
}

impl TimeGrid {
    pub fn new(len: usize) -> Self {
        let step = 2.0 / len as f64;
        Self {
            tau: (0..len).map(|n| -1.0 + step * n as f64).collect(),
        }
    }

    pub fn from_points(tau: Vec<f64>) -> Self {
        Self { tau }
    }

    pub fn points(&self) -> &[f64] {
        &self.tau
    }

    pub fn len(&self) -> usize {
        self.tau.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tau.is_empty()
    }
}

/// `[sin(2 pi a_i tau), cos(2 pi a_i tau)]_i` for every query, row-major `[L, 2 * a.len()]`.
pub fn fourier_features(tau: &TimeGrid, freqs: &[f64]) -> Tensor {
    let two_pi = 2.0 * std::f64::consts::PI;
    let data: Vec<f64> = tau
        .points()
        .iter()
        .flat_map(|&t| {
            freqs.iter().flat_map(move |&a| {
                let (s, c) = (two_pi * a * t).sin_cos();
                [s, c]
            })
        })
        .collect();
    Tensor::new(vec![tau.len(), 2 * freqs.len()], data).expect("feature shape")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenseIds {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// A Fourier-feature SIREN whose parameters live in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inr {
    pub cfg: InrConfig,
    /// Frozen Fourier-feature frequencies, `h0 / 2` of them.
    pub freqs: Vec<f64>,
    pub layers: Vec<DenseIds>,
}

/// Uniform bound for SIREN weights of a layer with `fan_in` inputs.
pub fn siren_bound(fan_in: usize, w0: f64) -> f64 {
    (6.0 / fan_in as f64).sqrt() / w0
}

impl Inr {
    /// Register parameters and draw the frozen frequencies.
    pub fn init<R: Rng>(
        cfg: InrConfig,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let normal = Normal::new(0.0, cfg.ff_scale)
            .map_err(|e| NfmError::invalid(format!("ff_scale: {e}")))?;
        let freqs: Vec<f64> = (0..cfg.h0 / 2).map(|_| normal.sample(rng)).collect();

        let mut widths = vec![cfg.h0];
        widths.extend(&cfg.hidden);
        widths.push(cfg.out_dim);
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for (i, w) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = siren_bound(fan_in, cfg.w0);
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            let weight: Vec<f64> = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
            let weight = store.add(
                format!("{prefix}.layer{i}.weight"),
                Tensor::new(vec![fan_in, fan_out], weight)?,
            );
            let bias = store.add(format!("{prefix}.layer{i}.bias"), Tensor::zeros(&[fan_out]));
            layers.push(DenseIds { weight, bias });
        }
        Ok(Self { cfg, freqs, layers })
    }

    /// Evaluate `phi` on the grid, returning a `[L, out_dim]` node.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, tau: &TimeGrid) -> Result<Var> {
        let mut z = g.constant(fourier_features(tau, &self.freqs));
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = g.param(store, layer.weight);
            let b = g.param(store, layer.bias);
            let h = g.matmul(z, w)?;
            let h = g.add(h, b)?;
            z = if i < last {
                let scaled = g.scale(h, self.cfg.w0);
                g.sin(scaled)
            } else {
                h
            };
        }
        Ok(z)
    }

    /// Evaluate without recording gradients; row-major `[L, out_dim]`.
    pub fn evaluate(&self, store: &ParamStore, tau: &TimeGrid) -> Result<Vec<f64>> {
        let mut g = Graph::new(false, 0);
        let out = self.forward(&mut g, store, tau)?;
        Ok(g.value(out).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(seed: u64) -> (Inr, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inr = Inr::init(InrConfig::standard(8, 4, 30.0), &mut store, "phi", &mut rng).unwrap();
        (inr, store)
    }

    #[test]
    fn features_at_origin_alternate() {
        let f = fourier_features(&TimeGrid::from_points(vec![0.0]), &[3.0, -7.5, 120.0]);
        assert_eq!(f.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn zero_frequency_is_constant() {
        let f = fourier_features(&TimeGrid::new(5), &[0.0]);
        for row in f.data().chunks(2) {
            assert_eq!(row, &[0.0, 1.0]);
        }
    }

    #[test]
    fn feature_parity() {
        let tau = [0.13, 0.4, 0.77];
        let neg: Vec<f64> = tau.iter().map(|t| -t).collect();
        let a = [1.5, 33.0];
        let pos = fourier_features(&TimeGrid::from_points(tau.to_vec()), &a);
        let neg = fourier_features(&TimeGrid::from_points(neg), &a);
        for (p, n) in pos.data().chunks(2).zip(neg.data().chunks(2)) {
            assert!((p[0] + n[0]).abs() < 1e-12);
            assert!((p[1] - n[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_covers_unit_interval() {
        let g = TimeGrid::new(4);
        assert_eq!(g.points(), &[-1.0, -0.5, 0.0, 0.5]);
    }

    #[test]
    fn zeroed_output_layer_gives_zero() {
        let (inr, mut store) = build(1);
        let last = *inr.layers.last().unwrap();
        store.get_mut(last.weight).data_mut().fill(0.0);
        store.get_mut(last.bias).data_mut().fill(0.0);
        let out = inr.evaluate(&store, &TimeGrid::new(9)).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pointwise_map() {
        let (inr, store) = build(2);
        let grid = TimeGrid::new(6);
        let batched = inr.evaluate(&store, &grid).unwrap();
        for (n, &t) in grid.points().iter().enumerate() {
            let single = inr.evaluate(&store, &TimeGrid::from_points(vec![t])).unwrap();
            assert_eq!(single, batched[n * 4..(n + 1) * 4]);
        }
    }

    #[test]
    fn init_bound_and_determinism() {
        assert!((siren_bound(32, 1.0) - 0.4330127018922193).abs() < 1e-15);
        let (inr, store) = build(3);
        for (i, layer) in inr.layers.iter().enumerate() {
            let w = store.get(layer.weight);
            let bound = siren_bound(w.shape()[0], 30.0);
            assert!(w.data().iter().all(|v| v.abs() <= bound), "layer {i}");
            assert!(store.get(layer.bias).data().iter().all(|&v| v == 0.0));
        }
        let (inr2, store2) = build(3);
        assert_eq!(inr, inr2);
        assert_eq!(store, store2);
    }

    #[test]
    fn param_count_matches_store() {
        let (inr, store) = build(4);
        assert_eq!(inr.cfg.param_count(), store.num_scalars());
    }
}
