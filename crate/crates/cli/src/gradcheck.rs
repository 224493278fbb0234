//! Finite-difference checks of every layer and loss on a toy model.

use nfm_core::autodiff::{grad_check, Graph, ParamStore, Tensor, Var};
use nfm_core::layers::{HeadSpec, Inff, ModelConfig, NfmModel};
use nfm_core::tasks::{anomaly_loss, forecast_loss, focal_freq_loss};
use nfm_core::{ExtensionFactors, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub const TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;
/// Coordinates probed per parameter tensor.
const PER_PARAM: usize = 24;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentReport {
    pub component: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub params: usize,
}

impl ComponentReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

/// `d = 4`, one block, 16-step inputs.
pub fn toy_config(head: HeadSpec) -> ModelConfig {
    ModelConfig {
        c_in: 1,
        d: 4,
        n_blocks: 1,
        h0: 8,
        w0: 30.0,
        ff_scale: 128.0,
        inr_hidden: 8,
        proj_width: 8,
        proj_freq: 1.0,
        mlp_ratio: 2,
        dropout: 0.1,
        head,
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("shape matches")
}

/// Reduce any output to a scalar with fixed random weights.
fn contract(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(random(g.shape(y), &mut rng));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn run(
    name: &str,
    model: &NfmModel,
    seed: u64,
    build: impl Fn(&mut Graph, &ParamStore) -> Result<Var>,
) -> Result<ComponentReport> {
    let mut store = model.store.clone();
    let r = grad_check(&mut store, STEP, seed, true, PER_PARAM, build)?;
    Ok(ComponentReport {
        component: name.to_owned(),
        max_rel_err: r.max_rel_err,
        checked: r.checked,
        params: model.num_params(),
    })
}

/// Check every component; deterministic for a fixed seed.
pub fn suite(seed: u64) -> Result<Vec<ComponentReport>> {
    let n = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random(&[2, n, 1], &mut rng);
    let target_f = random(&[2, n + 8, 1], &mut rng);
    let target_a = random(&[2, n, 1], &mut rng);
    let reg = NfmModel::new(toy_config(HeadSpec::PerStep { out: 1 }), seed)?;
    let cls = NfmModel::new(toy_config(HeadSpec::Pooled { classes: 3 }), seed)?;
    let fore = ExtensionFactors::forecast(n, 8)?;
    let up = ExtensionFactors::upsample(2)?;
    let ident = ExtensionFactors::identity();
    let block = &reg.blocks[0];
    let mut out = Vec::new();

    out.push(run("input_projection", &reg, seed, |g, s| {
        let xv = g.constant(x.clone());
        let y = reg.projection.forward(g, s, xv)?;
        contract(g, y, 1)
    })?);
    out.push(run("inr", &reg, seed, |g, s| {
        let y = reg.tokens.phi.forward(g, s, &nfm_core::inr::TimeGrid::new(n))?;
        contract(g, y, 2)
    })?);
    out.push(run("frequency_tokens", &reg, seed, |g, s| {
        let xv = g.constant(x.clone());
        let xb = reg.projection.forward(g, s, xv)?;
        let st = reg.tokens.forward(g, s, xb, &fore)?;
        contract(g, st.z0_time, 3)
    })?);
    out.push(run("inff", &reg, seed, |g, s| {
        let xv = g.constant(x.clone());
        let xb = reg.projection.forward(g, s, xv)?;
        let st = reg.tokens.forward(g, s, xb, &ident)?;
        let r = block.inff.filter(g, s, &st)?;
        let z = g.constant(random(&[2, n, 4], &mut ChaCha8Rng::seed_from_u64(4)));
        let y = Inff::apply_filter(g, z, r)?;
        contract(g, y, 5)
    })?);
    out.push(run("channel_mlp", &reg, seed, |g, s| {
        let z = g.constant(random(&[2, n, 4], &mut ChaCha8Rng::seed_from_u64(6)));
        let y = block.mlp.forward(g, s, z, 0.1)?;
        contract(g, y, 7)
    })?);
    out.push(run("layer_norm", &reg, seed, |g, s| {
        let z = g.constant(random(&[2, n, 4], &mut ChaCha8Rng::seed_from_u64(8)));
        let y = block.norm.forward(g, s, z)?;
        contract(g, y, 9)
    })?);
    out.push(run("mixer_block", &reg, seed, |g, s| {
        let xv = g.constant(x.clone());
        let xb = reg.projection.forward(g, s, xv)?;
        let st = reg.tokens.forward(g, s, xb, &ident)?;
        let (y, _) = block.forward(g, s, st.z0_time, &st, 0.1)?;
        contract(g, y, 10)
    })?);
    out.push(run("backbone_regression_head", &reg, seed, |g, s| {
        let xv = g.constant(x.clone());
        let f = reg.forward_with(g, s, xv, &fore)?;
        contract(g, f.output, 11)
    })?);
    out.push(run("classification_head_ce", &cls, seed, |g, s| {
        let xv = g.constant(x.clone());
        let f = cls.forward_with(g, s, xv, &ident)?;
        g.softmax_cross_entropy(f.output, &[2, 0])
    })?);
    out.push(run("focal_frequency_loss", &reg, seed, |g, s| {
        let xv = g.constant(x.clone());
        let f = reg.forward_with(g, s, xv, &fore)?;
        let y = g.constant(target_f.clone());
        focal_freq_loss(g, f.output, y)
    })?);
    out.push(run("forecast_loss", &reg, seed, |g, s| {
        let xv = g.constant(x.clone());
        let f = reg.forward_with(g, s, xv, &fore)?;
        let y = g.constant(target_f.clone());
        forecast_loss(g, f.output, y, 0.5)
    })?);
    let half = Tensor::new(
        vec![2, n / 2, 1],
        x.data().iter().step_by(2).copied().collect(),
    )?;
    out.push(run("anomaly_loss", &reg, seed, |g, s| {
        let xv = g.constant(half.clone());
        let f = reg.forward_with(g, s, xv, &up)?;
        let y = g.constant(target_a.clone());
        anomaly_loss(g, f.output, y, 0.5)
    })?);
    Ok(out)
}

/// A deliberately wrong gradient: half of the objective's dependence on the
/// parameter is routed through a detached constant, so the tape sees only
/// part of it. The checker must flag this.
pub fn corrupted_fixture(seed: u64) -> Result<ComponentReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let id = store.add("theta", random(&[8], &mut rng));
    let r = grad_check(&mut store, STEP, seed, false, PER_PARAM, |g, s| {
        let t = g.param(s, id);
        let detached = g.constant(s.get(id).clone());
        let y = g.mul(t, detached)?;
        Ok(g.sum(y))
    })?;
    Ok(ComponentReport {
        component: "corrupted_fixture".into(),
        max_rel_err: r.max_rel_err,
        checked: r.checked,
        params: 8,
    })
}
