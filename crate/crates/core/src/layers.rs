//! The NFM backbone and task heads.
//!
//! Data flow for an input batch `x: [B, N, c]` and extension factors with
//! output length `L`:
//!
//! 1. input projection to `[B, N, d]` (linear plus a sine/cosine branch)
//! 2. learnable frequency tokens: the projected spectrum is extended to `L`
//!    points and added to `V = rfft(InstanceNorm(phi(tau)))`, giving the
//!    initial embedding `z0: [B, L, d]`
//! 3. `n_blocks` mixer blocks, each
//!    `z <- LayerNorm(z + INFF(ChannelMlp(z)))`
//! 4. a final residual channel-mixing block and the task head.
//!
//! The implicit Fourier filter of each block computes
//! `R = W(rfft(InstanceNorm(phi'(tau) + z0)))` with `W` a two-layer complex
//! MLP (split ReLU), and returns `irfft(R * rfft(z))`.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{NfmError, Result};
use crate::inr::{DenseIds, Inr, InrConfig, TimeGrid};
use crate::manip::{extension_map, ExtensionFactors};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum HeadSpec {
    /// Linear map `d -> out` at every output position.
    PerStep { out: usize },
    /// Global average pooling over positions, then `d -> classes`.
    Pooled { classes: usize },
}

impl HeadSpec {
    pub fn out_dim(&self) -> usize {
        match *self {
            HeadSpec::PerStep { out } => out,
            HeadSpec::Pooled { classes } => classes,
        }
    }
}

fn default_w0() -> f64 {
    30.0
}
fn default_ff_scale() -> f64 {
    128.0
}
fn default_proj_width() -> usize {
    32
}
fn default_mlp_ratio() -> usize {
    3
}
fn default_proj_freq() -> f64 {
    1.0
}
fn default_inr_hidden() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Input channels seen by the projection.
    pub c_in: usize,
    /// Hidden size.
    pub d: usize,
    pub n_blocks: usize,
    /// Fourier-feature width of the INRs.
    pub h0: usize,
    #[serde(default = "default_w0")]
    pub w0: f64,
    #[serde(default = "default_ff_scale")]
    pub ff_scale: f64,
    #[serde(default = "default_inr_hidden")]
    pub inr_hidden: usize,
    /// Width of the sine/cosine branch of the input projection.
    #[serde(default = "default_proj_width")]
    pub proj_width: usize,
    /// Frequency scaling inside the input projection's sine branch.
    #[serde(default = "default_proj_freq")]
    pub proj_freq: f64,
    /// Hidden expansion of the channel-mixing MLPs.
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default)]
    pub dropout: f64,
    pub head: HeadSpec,
}

impl ModelConfig {
    /// Long-horizon forecasting: `d = 36`, one block, channel independent.
    pub fn forecasting() -> Self {
        Self {
            c_in: 1,
            d: 36,
            n_blocks: 1,
            h0: 32,
            w0: default_w0(),
            ff_scale: default_ff_scale(),
            inr_hidden: default_inr_hidden(),
            proj_width: default_proj_width(),
            proj_freq: default_proj_freq(),
            mlp_ratio: default_mlp_ratio(),
            dropout: 0.15,
            head: HeadSpec::PerStep { out: 1 },
        }
    }

    /// Reconstruction-based anomaly detection: `d = 8`, `h0 = 16`, one block.
    pub fn anomaly() -> Self {
        Self {
            d: 8,
            h0: 16,
            dropout: 0.0,
            ..Self::forecasting()
        }
    }

    /// Classification: `d = 32`, two blocks, pooled head.
    pub fn classification(classes: usize) -> Self {
        Self {
            d: 32,
            n_blocks: 2,
            h0: 32,
            dropout: 0.05,
            head: HeadSpec::Pooled { classes },
            ..Self::forecasting()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("c_in", self.c_in),
            ("d", self.d),
            ("h0", self.h0),
            ("inr_hidden", self.inr_hidden),
            ("proj_width", self.proj_width),
            ("mlp_ratio", self.mlp_ratio),
            ("head", self.head.out_dim()),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(NfmError::invalid(format!("model.{name} must be positive")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(NfmError::invalid("model.dropout must be in [0, 1)"));
        }
        self.inr().validate()
    }

    pub fn inr(&self) -> InrConfig {
        InrConfig {
            h0: self.h0,
            hidden: vec![self.inr_hidden; 2],
            out_dim: self.d,
            w0: self.w0,
            ff_scale: self.ff_scale,
        }
    }
}

/// Closed-form count of trainable scalars for `cfg`.
///
/// Independent of sequence lengths: nothing in the model is sized by `N` or `L`.
pub fn param_count(cfg: &ModelConfig) -> usize {
    let (c, d, p) = (cfg.c_in, cfg.d, cfg.proj_width);
    let projection = c * d + c * p + p + 2 * p * d;
    let inr = cfg.inr().param_count();
    let complex_linear = 2 * d * d + 2 * d;
    let hidden = cfg.mlp_ratio * d;
    let mlp = d * hidden + hidden + hidden * d + d;
    let block = mlp + (inr + 2 * complex_linear) + 2 * d;
    let head = d * cfg.head.out_dim() + cfg.head.out_dim();
    projection + inr + cfg.n_blocks * block + mlp + head
}

fn uniform<R: Rng>(rng: &mut R, n: usize, bound: f64) -> Vec<f64> {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// Dense layer with PyTorch-style fan-in uniform init.
fn dense<R: Rng>(
    store: &mut ParamStore,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<DenseIds> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let weight = store.add(
        format!("{name}.weight"),
        Tensor::new(vec![fan_in, fan_out], uniform(rng, fan_in * fan_out, bound))?,
    );
    let bias = store.add(
        format!("{name}.bias"),
        Tensor::new(vec![fan_out], uniform(rng, fan_out, bound))?,
    );
    Ok(DenseIds { weight, bias })
}

fn apply_dense(g: &mut Graph, store: &ParamStore, x: Var, layer: DenseIds) -> Result<Var> {
    let w = g.param(store, layer.weight);
    let b = g.param(store, layer.bias);
    let h = g.matmul(x, w)?;
    g.add(h, b)
}

/// `x_bar = W_l x + W_n2 [sin(w (W_n1 x + b)), cos(w (W_n1 x + b))]`, per time step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputProjection {
    pub linear: ParamId,
    pub branch_in: DenseIds,
    pub branch_out: ParamId,
    pub freq: f64,
}

impl InputProjection {
    fn init<R: Rng>(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        let (c, d, p) = (cfg.c_in, cfg.d, cfg.proj_width);
        let linear = store.add(
            "proj.linear",
            Tensor::new(vec![c, d], uniform(rng, c * d, 1.0 / (c as f64).sqrt()))?,
        );
        let siren = (6.0 / c as f64).sqrt() / cfg.proj_freq;
        let weight = store.add(
            "proj.branch_in.weight",
            Tensor::new(vec![c, p], uniform(rng, c * p, siren))?,
        );
        let bias = store.add(
            "proj.branch_in.bias",
            Tensor::new(vec![p], uniform(rng, p, std::f64::consts::PI))?,
        );
        let branch_out = store.add(
            "proj.branch_out",
            Tensor::new(
                vec![2 * p, d],
                uniform(rng, 2 * p * d, 1.0 / ((2 * p) as f64).sqrt()),
            )?,
        );
        Ok(Self {
            linear,
            branch_in: DenseIds { weight, bias },
            branch_out,
            freq: cfg.proj_freq,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let wl = g.param(store, self.linear);
        let lin = g.matmul(x, wl)?;
        let h = apply_dense(g, store, x, self.branch_in)?;
        let h = g.scale(h, self.freq);
        let s = g.sin(h);
        let c = g.cos(h);
        let last = g.shape(s).len() - 1;
        let sc = g.concat(s, c, last)?;
        let w2 = g.param(store, self.branch_out);
        let nl = g.matmul(sc, w2)?;
        g.add(lin, nl)
    }
}

/// Two-layer pointwise MLP over the channel axis with ReLU and dropout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelMlp {
    pub fc1: DenseIds,
    pub fc2: DenseIds,
}

impl ChannelMlp {
    fn init<R: Rng>(
        cfg: &ModelConfig,
        store: &mut ParamStore,
        name: &str,
        rng: &mut R,
    ) -> Result<Self> {
        let hidden = cfg.mlp_ratio * cfg.d;
        Ok(Self {
            fc1: dense(store, &format!("{name}.fc1"), cfg.d, hidden, rng)?,
            fc2: dense(store, &format!("{name}.fc2"), hidden, cfg.d, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, z: Var, dropout: f64) -> Result<Var> {
        let h = apply_dense(g, store, z, self.fc1)?;
        let h = g.relu(h);
        let h = g.dropout(h, dropout)?;
        apply_dense(g, store, h, self.fc2)
    }
}

/// Complex affine map `C^d -> C^d` on interleaved `[.., d, 2]` arrays.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComplexLinear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ComplexLinear {
    fn init<R: Rng>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Result<Self> {
        // Real and imaginary parts each get half the fan-in variance.
        let bound = 1.0 / (2.0 * d as f64).sqrt();
        Ok(Self {
            weight: store.add(
                format!("{name}.weight"),
                Tensor::new(vec![d, d, 2], uniform(rng, 2 * d * d, bound))?,
            ),
            bias: store.add(
                format!("{name}.bias"),
                Tensor::new(vec![d, 2], uniform(rng, 2 * d, bound))?,
            ),
        })
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let h = g.complex_matmul(x, w)?;
        g.add(h, b)
    }
}

/// Output of the frequency-token block.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingState {
    /// Initial time-domain embedding `[B, L, d]`.
    pub z0_time: Var,
    /// Its half-spectrum `[B, K_L, d, 2]`.
    pub z0_freq: Var,
    /// Frequency tokens `V: [K_L, d, 2]`, shared across the batch.
    pub tokens: Var,
    pub factors: ExtensionFactors,
    pub len: usize,
}

/// Learnable frequency tokens: extend the projected spectrum and add
/// `V = rfft(InstanceNorm(phi(tau)))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyTokens {
    pub phi: Inr,
}

impl FrequencyTokens {
    /// `V` on an `l`-point grid, `[K_l, d, 2]`.
    pub fn tokens(&self, g: &mut Graph, store: &ParamStore, l: usize) -> Result<Var> {
        let v = self.phi.forward(g, store, &TimeGrid::new(l))?;
        let v = g.normalize(v, 0, NORM_EPS)?;
        g.rfft(v, 0)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x_bar: Var,
        factors: &ExtensionFactors,
    ) -> Result<EmbeddingState> {
        let n = g.shape(x_bar)[1];
        let (l, targets, scale) = extension_map(n, factors)?;
        let spec = g.rfft(x_bar, 1)?;
        let extended = g.extend_spectrum(spec, 1, &targets, scale, l)?;
        let tokens = self.tokens(g, store, l)?;
        let z0_freq = g.add(extended, tokens)?;
        let z0_time = g.irfft(z0_freq, 1, l)?;
        Ok(EmbeddingState {
            z0_time,
            z0_freq,
            tokens,
            factors: *factors,
            len: l,
        })
    }
}

/// Implicit neural Fourier filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inff {
    pub phi: Inr,
    pub w1: ComplexLinear,
    pub w2: ComplexLinear,
}

impl Inff {
    /// Filter coefficients `R: [B, K_L, d, 2]` conditioned on `z0`.
    pub fn filter(&self, g: &mut Graph, store: &ParamStore, state: &EmbeddingState) -> Result<Var> {
        let p = self.phi.forward(g, store, &TimeGrid::new(state.len))?;
        let u = g.add(state.z0_time, p)?;
        let u = g.normalize(u, 1, NORM_EPS)?;
        let u = g.rfft(u, 1)?;
        let h = self.w1.forward(g, store, u)?;
        let h = g.relu(h);
        self.w2.forward(g, store, h)
    }

    /// `irfft(R * rfft(z))` for `z: [B, L, d]`.
    pub fn apply_filter(g: &mut Graph, z: Var, filter: Var) -> Result<Var> {
        let l = g.shape(z)[1];
        let spec = g.rfft(z, 1)?;
        let filtered = g.complex_mul(spec, filter)?;
        g.irfft(filtered, 1, l)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    fn init(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[d], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let last = g.shape(x).len() - 1;
        let y = g.normalize(x, last, NORM_EPS)?;
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let y = g.mul(y, gamma)?;
        g.add(y, beta)
    }
}

/// `z_next = LayerNorm(z + INFF(ChannelMlp(z)))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixerBlock {
    pub mlp: ChannelMlp,
    pub inff: Inff,
    pub norm: LayerNorm,
}

impl MixerBlock {
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        z: Var,
        state: &EmbeddingState,
        dropout: f64,
    ) -> Result<(Var, Var)> {
        let mixed = self.mlp.forward(g, store, z, dropout)?;
        let filter = self.inff.filter(g, store, state)?;
        let filtered = Inff::apply_filter(g, mixed, filter)?;
        let sum = g.add(z, filtered)?;
        Ok((self.norm.forward(g, store, sum)?, filter))
    }
}

/// Nodes produced by one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// Head output: `[B, L, out]` per step or `[B, classes]` pooled.
    pub output: Var,
    /// Backbone features `[B, L, d]`.
    pub features: Var,
    pub state: EmbeddingState,
    /// Filter coefficients of each mixer block.
    pub filters: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NfmModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub projection: InputProjection,
    pub tokens: FrequencyTokens,
    pub blocks: Vec<MixerBlock>,
    pub final_mlp: ChannelMlp,
    pub head: DenseIds,
}

impl NfmModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let projection = InputProjection::init(&cfg, &mut store, &mut rng)?;
        let tokens = FrequencyTokens {
            phi: Inr::init(cfg.inr(), &mut store, "lft.phi", &mut rng)?,
        };
        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        for i in 0..cfg.n_blocks {
            let name = format!("block{i}");
            let mlp = ChannelMlp::init(&cfg, &mut store, &format!("{name}.mlp"), &mut rng)?;
            let inff = Inff {
                phi: Inr::init(cfg.inr(), &mut store, &format!("{name}.inff.phi"), &mut rng)?,
                w1: ComplexLinear::init(&mut store, &format!("{name}.inff.w1"), cfg.d, &mut rng)?,
                w2: ComplexLinear::init(&mut store, &format!("{name}.inff.w2"), cfg.d, &mut rng)?,
            };
            let norm = LayerNorm::init(&mut store, &format!("{name}.norm"), cfg.d);
            blocks.push(MixerBlock { mlp, inff, norm });
        }
        let final_mlp = ChannelMlp::init(&cfg, &mut store, "final.mlp", &mut rng)?;
        let head = dense(&mut store, "head", cfg.d, cfg.head.out_dim(), &mut rng)?;
        Ok(Self {
            cfg,
            store,
            projection,
            tokens,
            blocks,
            final_mlp,
            head,
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Frozen Fourier-feature frequencies of every INR, tokens first.
    pub fn inr_freqs(&self) -> Vec<Vec<f64>> {
        std::iter::once(&self.tokens.phi)
            .chain(self.blocks.iter().map(|b| &b.inff.phi))
            .map(|inr| inr.freqs.clone())
            .collect()
    }

    pub fn set_inr_freqs(&mut self, freqs: &[Vec<f64>]) -> Result<()> {
        if freqs.len() != 1 + self.blocks.len() {
            return Err(NfmError::Checkpoint(format!(
                "expected {} INR frequency sets, got {}",
                1 + self.blocks.len(),
                freqs.len()
            )));
        }
        let inrs = std::iter::once(&mut self.tokens.phi)
            .chain(self.blocks.iter_mut().map(|b| &mut b.inff.phi));
        for (inr, f) in inrs.zip(freqs) {
            if f.len() != inr.freqs.len() {
                return Err(NfmError::Checkpoint("INR frequency width mismatch".into()));
            }
            inr.freqs.clone_from(f);
        }
        Ok(())
    }

    /// Backbone features `[B, L, d]` for an input `[B, N, c]`, reading
    /// parameters from `store` (normally `self.store`).
    pub fn backbone(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        factors: &ExtensionFactors,
    ) -> Result<(Var, EmbeddingState, Vec<Var>)> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.cfg.c_in {
            return Err(NfmError::ShapeMismatch {
                op: "input_projection",
                lhs: shape,
                rhs: vec![0, 0, self.cfg.c_in],
            });
        }
        let x_bar = self.projection.forward(g, store, x)?;
        let x_bar = g.dropout(x_bar, self.cfg.dropout)?;
        let state = self.tokens.forward(g, store, x_bar, factors)?;
        let mut z = state.z0_time;
        let mut filters = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, filter) = block.forward(g, store, z, &state, self.cfg.dropout)?;
            z = next;
            filters.push(filter);
        }
        let mixed = self.final_mlp.forward(g, store, z, self.cfg.dropout)?;
        let z = g.add(z, mixed)?;
        Ok((z, state, filters))
    }

    pub fn forward(&self, g: &mut Graph, x: Var, factors: &ExtensionFactors) -> Result<Forward> {
        self.forward_with(g, &self.store, x, factors)
    }

    /// [`NfmModel::forward`] with parameters taken from `store`, which must
    /// share this model's layout.
    pub fn forward_with(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        factors: &ExtensionFactors,
    ) -> Result<Forward> {
        let (features, state, filters) = self.backbone(g, store, x, factors)?;
        let output = match self.cfg.head {
            HeadSpec::PerStep { .. } => apply_dense(g, store, features, self.head)?,
            HeadSpec::Pooled { .. } => {
                let w = g.param(store, self.head.weight);
                let b = g.param(store, self.head.bias);
                crate::tasks::classify_head(g, features, w, b)?
            }
        };
        Ok(Forward {
            output,
            features,
            state,
            filters,
        })
    }

    /// Inference-mode forward returning the head output values.
    pub fn predict(&self, x: &Tensor, factors: &ExtensionFactors) -> Result<Tensor> {
        let mut g = Graph::new(false, 0);
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, xv, factors)?;
        Ok(g.value(out.output).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_count_matches_registered_params() {
        for cfg in [
            ModelConfig::forecasting(),
            ModelConfig::anomaly(),
            ModelConfig::classification(10),
            ModelConfig {
                c_in: 3,
                n_blocks: 3,
                mlp_ratio: 2,
                proj_width: 7,
                ..ModelConfig::forecasting()
            },
        ] {
            let model = NfmModel::new(cfg.clone(), 0).unwrap();
            assert_eq!(param_count(&cfg), model.num_params(), "{cfg:?}");
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = ModelConfig::anomaly();
        cfg.h0 = 15;
        assert!(NfmModel::new(cfg, 0).is_err());
        let mut cfg = ModelConfig::anomaly();
        cfg.d = 0;
        assert!(NfmModel::new(cfg, 0).is_err());
        let mut cfg = ModelConfig::anomaly();
        cfg.dropout = 1.0;
        assert!(NfmModel::new(cfg, 0).is_err());
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let mut v = serde_json::to_value(ModelConfig::forecasting()).unwrap();
        v["bogus"] = serde_json::json!(1);
        assert!(serde_json::from_value::<ModelConfig>(v).is_err());
    }
}
