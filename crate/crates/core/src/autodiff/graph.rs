//! Tape of tensor operations with reverse-mode gradients.
//!
//! Nodes are appended in evaluation order, so the tape is topologically
//! sorted by construction; [`Graph::backward`] walks it once in reverse.
//! Complex arrays are real tensors whose last axis has length 2 holding
//! interleaved `(re, im)` pairs.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};
use super::tensor::{split_axis, Tensor};
use crate::error::{NfmError, Result};
use crate::spectral::{half_len, irfft_axis, rfft_axis};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Square(Var),
    Sin(Var),
    Cos(Var),
    Relu(Var),
    MatMul(Var, Var),
    ComplexMatMul(Var, Var),
    ComplexMul(Var, Var),
    ComplexAbs(Var),
    Sum(Var),
    Mean(Var),
    MeanAxis {
        x: Var,
        axis: usize,
    },
    VarianceAxis {
        x: Var,
        axis: usize,
    },
    Normalize {
        x: Var,
        axis: usize,
        inv_std: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Concat {
        a: Var,
        b: Var,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Rfft {
        x: Var,
        axis: usize,
    },
    Irfft {
        x: Var,
        axis: usize,
    },
    Extend {
        x: Var,
        axis: usize,
        targets: Vec<usize>,
        scale: f64,
        n_out: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of a leaf or parameter node, if it received any.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Per-parameter gradients in store order; unused parameters get zeros.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = store
            .ids()
            .map(|id| vec![0.0; store.get(id).numel()])
            .collect();
        for &(id, v) in &self.params {
            if let Some(g) = self.get(v) {
                for (o, gi) in out[id.0].iter_mut().zip(g) {
                    *o += gi;
                }
            }
        }
        out
    }
}

pub struct Graph {
    nodes: Vec<Node>,
    training: bool,
    rng: ChaCha8Rng,
    param_vars: HashMap<ParamId, Var>,
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> NfmError {
    NfmError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// `rhs` may be broadcast over the leading axes of `lhs`.
fn check_broadcast(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<()> {
    if rhs.len() > lhs.len() || lhs[lhs.len() - rhs.len()..] != *rhs {
        return Err(mismatch(op, lhs, rhs));
    }
    Ok(())
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, contribution: Vec<f64>) {
    match &mut grads[v.0] {
        Some(g) => g.iter_mut().zip(&contribution).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(contribution),
    }
}

/// Reduce a gradient over broadcast leading axes down to `len` elements.
fn reduce_broadcast(g: &[f64], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for chunk in g.chunks_exact(len) {
        out.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: (&[f64], usize, isize, isize),
    b: (&[f64], usize, isize, isize),
    beta: f64,
    c: (&mut [f64], usize, isize, isize),
) {
    // Bounds of the strided views are guaranteed by the callers' shape checks.
    debug_assert!(m == 0 || k == 0 || a.1 < a.0.len());
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.0.as_ptr().add(a.1),
            a.2,
            a.3,
            b.0.as_ptr().add(b.1),
            b.2,
            b.3,
            beta,
            c.0.as_mut_ptr().add(c.1),
            c.2,
            c.3,
        );
    }
}

impl Graph {
    /// A fresh tape. `training` enables dropout; `seed` drives dropout masks.
    pub fn new(training: bool, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
            param_vars: HashMap::new(),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Input that may receive a gradient.
    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.input(value, false)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, true);
        self.param_vars.insert(id, v);
        v
    }

    fn binary_broadcast(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, bool)> {
        check_broadcast(name, self.shape(a), self.shape(b))?;
        let bd = self.data(b);
        let r = bd.len();
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(j, &x)| f(x, bd[j % r]))
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok((t, self.needs(a) || self.needs(b)))
    }

    /// `a + b`, with `b` broadcast over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ng) = self.binary_broadcast("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ng) = self.binary_broadcast("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    /// Elementwise product, with `b` broadcast over the leading axes of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ng) = self.binary_broadcast("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let ng = self.needs(x);
        self.push(t, op, ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(x, f64::sin, Op::Sin(x))
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(x, f64::cos, Op::Cos(x))
    }

    /// Elementwise ReLU. On a complex array this is the split ReLU.
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape.to_vec())?;
        let ng = self.needs(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// `x[..., k] @ w[k, n] -> [..., n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.is_empty() || *xs.last().unwrap() != ws[0] {
            return Err(mismatch("matmul", &xs, &ws));
        }
        let (k, n) = (ws[0], ws[1]);
        let m = self.value(x).numel() / k.max(1);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            (self.data(x), 0, k as isize, 1),
            (self.data(w), 0, n as isize, 1),
            0.0,
            (&mut out, 0, n as isize, 1),
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        let ng = self.needs(x) || self.needs(w);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul(x, w), ng))
    }

    /// Complex `x[..., k, 2] @ w[k, n, 2] -> [..., n, 2]`.
    pub fn complex_matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 3
            || ws[2] != 2
            || xs.len() < 2
            || xs[xs.len() - 1] != 2
            || xs[xs.len() - 2] != ws[0]
        {
            return Err(mismatch("complex_matmul", &xs, &ws));
        }
        let (k, n) = (ws[0], ws[1]);
        let m = self.value(x).numel() / (2 * k).max(1);
        let mut out = vec![0.0; m * n * 2];
        let (xd, wd) = (self.data(x), self.data(w));
        let (rx, rw, ro) = ((2 * k) as isize, (2 * n) as isize, (2 * n) as isize);
        // re = xr wr - xi wi
        gemm(m, k, n, 1.0, (xd, 0, rx, 2), (wd, 0, rw, 2), 0.0, (&mut out, 0, ro, 2));
        gemm(m, k, n, -1.0, (xd, 1, rx, 2), (wd, 1, rw, 2), 1.0, (&mut out, 0, ro, 2));
        // im = xr wi + xi wr
        gemm(m, k, n, 1.0, (xd, 0, rx, 2), (wd, 1, rw, 2), 0.0, (&mut out, 1, ro, 2));
        gemm(m, k, n, 1.0, (xd, 1, rx, 2), (wd, 0, rw, 2), 1.0, (&mut out, 1, ro, 2));
        let mut shape = xs;
        let len = shape.len();
        shape[len - 2] = n;
        let ng = self.needs(x) || self.needs(w);
        Ok(self.push(Tensor::new(shape, out)?, Op::ComplexMatMul(x, w), ng))
    }

    /// Elementwise complex product; `b` may broadcast over leading axes of `a`.
    pub fn complex_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (as_, bs) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        check_broadcast("complex_mul", &as_, &bs)?;
        if as_.last() != Some(&2) {
            return Err(mismatch("complex_mul", &as_, &bs));
        }
        let (ad, bd) = (self.data(a), self.data(b));
        let r = bd.len();
        let mut out = vec![0.0; ad.len()];
        for (j, o) in out.chunks_exact_mut(2).enumerate() {
            let (ar, ai) = (ad[2 * j], ad[2 * j + 1]);
            let jb = (2 * j) % r;
            let (br, bi) = (bd[jb], bd[jb + 1]);
            o[0] = ar * br - ai * bi;
            o[1] = ar * bi + ai * br;
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(as_, out)?, Op::ComplexMul(a, b), ng))
    }

    /// Modulus of a complex array `[..., 2] -> [...]`.
    pub fn complex_abs(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.last() != Some(&2) {
            return Err(mismatch("complex_abs", &xs, &[2]));
        }
        let out: Vec<f64> = self
            .data(x)
            .chunks_exact(2)
            .map(|p| p[0].hypot(p[1]))
            .collect();
        let ng = self.needs(x);
        Ok(self.push(
            Tensor::new(xs[..xs.len() - 1].to_vec(), out)?,
            Op::ComplexAbs(x),
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    fn check_axis(&self, name: &'static str, x: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(mismatch(name, self.shape(x), &[axis]));
        }
        Ok(())
    }

    fn removed_axis(shape: &[usize], axis: usize) -> Vec<usize> {
        let mut s = shape.to_vec();
        s.remove(axis);
        s
    }

    /// Mean along `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("mean_axis", x, axis)?;
        let (outer, dim, inner) = split_axis(self.shape(x), axis);
        let d = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for t in 0..dim {
                let row = &d[(o * dim + t) * inner..(o * dim + t + 1) * inner];
                out[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(row)
                    .for_each(|(a, b)| *a += b);
            }
        }
        out.iter_mut().for_each(|v| *v /= dim as f64);
        let shape = Self::removed_axis(self.shape(x), axis);
        let ng = self.needs(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::MeanAxis { x, axis }, ng))
    }

    fn axis_stats(&self, x: Var, axis: usize) -> (Vec<f64>, Vec<f64>) {
        let (outer, dim, inner) = split_axis(self.shape(x), axis);
        let d = self.data(x);
        let mut mean = vec![0.0; outer * inner];
        let mut var = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let col = (0..dim).map(|t| d[(o * dim + t) * inner + i]);
                let mu = col.clone().sum::<f64>() / dim as f64;
                let v = col.map(|v| (v - mu) * (v - mu)).sum::<f64>() / dim as f64;
                mean[o * inner + i] = mu;
                var[o * inner + i] = v;
            }
        }
        (mean, var)
    }

    /// Population variance along `axis`, which is removed from the shape.
    pub fn variance_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("variance_axis", x, axis)?;
        let (_, var) = self.axis_stats(x, axis);
        let shape = Self::removed_axis(self.shape(x), axis);
        let ng = self.needs(x);
        Ok(self.push(Tensor::new(shape, var)?, Op::VarianceAxis { x, axis }, ng))
    }

    /// Standardize along `axis`: `(x - mean) / sqrt(var + eps)`.
    pub fn normalize(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        self.check_axis("normalize", x, axis)?;
        let (mean, var) = self.axis_stats(x, axis);
        let (outer, dim, inner) = split_axis(self.shape(x), axis);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let d = self.data(x);
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for t in 0..dim {
                for i in 0..inner {
                    let j = (o * dim + t) * inner + i;
                    let s = o * inner + i;
                    out[j] = (d[j] - mean[s]) * inv_std[s];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Normalize { x, axis, inv_std },
            ng,
        ))
    }

    /// Mean cross-entropy of `logits[B, C]` against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(mismatch("softmax_cross_entropy", &s, &[labels.len()]));
        }
        let (b, c) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(NfmError::invalid(format!("label {bad} out of range for {c} classes")));
        }
        let d = self.data(logits);
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for i in 0..b {
            let row = &d[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for j in 0..c {
                probs[i * c + j] = (row[j] - max).exp() / z;
            }
            loss += z.ln() + max - row[labels[i]];
        }
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss / b as f64),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Inverted dropout with drop probability `p`; identity outside training.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(NfmError::invalid(format!("dropout rate {p} not in [0, 1)")));
        }
        if !self.training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = self
            .data(x)
            .iter()
            .zip(&mask)
            .map(|(a, m)| a * m)
            .collect();
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Dropout { x, mask }, ng))
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa
                .iter()
                .zip(&sb)
                .enumerate()
                .all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(mismatch("concat", &sa, &sb));
        }
        let (outer, da, inner) = split_axis(&sa, axis);
        let db = sb[axis];
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(ad.len() + bd.len());
        for o in 0..outer {
            out.extend_from_slice(&ad[o * da * inner..(o + 1) * da * inner]);
            out.extend_from_slice(&bd[o * db * inner..(o + 1) * db * inner]);
        }
        let mut shape = sa;
        shape[axis] = da + db;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat { a, b, axis }, ng))
    }

    /// `x[.., start..start + len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(mismatch("slice", &s, &[axis, start, len]));
        }
        let (outer, dim, inner) = split_axis(&s, axis);
        let d = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let ng = self.needs(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice { x, axis, start }, ng))
    }

    /// Half-spectrum along `axis`: `[.., N, ..] -> [.., N/2 + 1, .., 2]`.
    pub fn rfft(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("rfft", x, axis)?;
        let s = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&s, axis);
        let out = rfft_axis(self.data(x), outer, n, inner);
        let mut shape = s;
        shape[axis] = half_len(n);
        shape.push(2);
        let ng = self.needs(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Rfft { x, axis }, ng))
    }

    /// Inverse of [`Graph::rfft`] producing `n` samples along `axis`.
    ///
    /// The imaginary parts of DC and (even `n`) Nyquist bins are ignored.
    pub fn irfft(&mut self, x: Var, axis: usize, n: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || axis >= s.len() - 1 || s[s.len() - 1] != 2 || s[axis] != half_len(n) {
            return Err(mismatch("irfft", &s, &[axis, n]));
        }
        let base = &s[..s.len() - 1];
        let (outer, k, inner) = split_axis(base, axis);
        let out = irfft_axis(self.data(x), outer, k, inner, n);
        let mut shape = base.to_vec();
        shape[axis] = n;
        let ng = self.needs(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Irfft { x, axis }, ng))
    }

    /// Scatter half-spectrum bins along `axis` to `targets[k]` with amplitude
    /// `scale`, producing the half-spectrum of an `n_out`-point sequence.
    ///
    /// Later `k` overwrite earlier ones on collision; DC/Nyquist imaginary
    /// parts of the result are zeroed.
    pub fn extend_spectrum(
        &mut self,
        x: Var,
        axis: usize,
        targets: &[usize],
        scale: f64,
        n_out: usize,
    ) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let k_out = half_len(n_out);
        if s.len() < 2
            || axis >= s.len() - 1
            || s[s.len() - 1] != 2
            || s[axis] != targets.len()
            || targets.iter().any(|&t| t >= k_out)
        {
            return Err(mismatch("extend_spectrum", &s, &[axis, n_out]));
        }
        let (outer, k_in, inner) = split_axis(&s, axis);
        let inner = inner / 2;
        let d = self.data(x);
        let mut out = vec![0.0; outer * k_out * inner * 2];
        for o in 0..outer {
            for (k, &t) in targets.iter().enumerate() {
                let src = (o * k_in + k) * inner * 2;
                let dst = (o * k_out + t) * inner * 2;
                for j in 0..inner * 2 {
                    out[dst + j] = scale * d[src + j];
                }
            }
            for bin in real_bins(n_out) {
                for i in 0..inner {
                    out[((o * k_out + bin) * inner + i) * 2 + 1] = 0.0;
                }
            }
        }
        let mut shape = s;
        shape[axis] = k_out;
        let ng = self.needs(x);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Extend {
                x,
                axis,
                targets: targets.to_vec(),
                scale,
                n_out,
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(mismatch("backward", self.shape(loss), &[]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf | Op::Param) {
                continue;
            }
            if let Some(g) = grads[i].take() {
                self.backprop(i, &g, &mut grads);
            }
        }
        let params = self.param_vars.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Gradients { grads, params })
    }

    fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.needs(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.needs(*b) {
                    let mut gb = reduce_broadcast(g, self.value(*b).numel());
                    if sign < 0.0 {
                        gb.iter_mut().for_each(|v| *v = -*v);
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                let r = bd.len();
                if self.needs(*a) {
                    let ga = g.iter().enumerate().map(|(j, gv)| gv * bd[j % r]).collect();
                    accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let prod: Vec<f64> = g.iter().zip(ad).map(|(gv, av)| gv * av).collect();
                    accumulate(grads, *b, reduce_broadcast(&prod, r));
                }
            }
            Op::Scale(x, s) => accumulate(grads, *x, g.iter().map(|v| v * s).collect()),
            Op::Square(x) => {
                let xd = self.data(*x);
                accumulate(grads, *x, g.iter().zip(xd).map(|(gv, v)| 2.0 * gv * v).collect());
            }
            Op::Sin(x) => {
                let xd = self.data(*x);
                accumulate(grads, *x, g.iter().zip(xd).map(|(gv, v)| gv * v.cos()).collect());
            }
            Op::Cos(x) => {
                let xd = self.data(*x);
                accumulate(grads, *x, g.iter().zip(xd).map(|(gv, v)| -gv * v.sin()).collect());
            }
            Op::Relu(x) => {
                let gx = g
                    .iter()
                    .zip(out)
                    .map(|(gv, o)| if *o > 0.0 { *gv } else { 0.0 })
                    .collect();
                accumulate(grads, *x, gx);
            }
            Op::Reshape(x) => accumulate(grads, *x, g.to_vec()),
            Op::Dropout { x, mask } => {
                accumulate(grads, *x, g.iter().zip(mask).map(|(a, m)| a * m).collect());
            }
            Op::MatMul(x, w) => {
                let (xd, wd) = (self.data(*x), self.data(*w));
                let ws = self.shape(*w);
                let (k, n) = (ws[0], ws[1]);
                let m = xd.len() / k.max(1);
                if self.needs(*x) {
                    let mut gx = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        (g, 0, n as isize, 1),
                        (wd, 0, 1, n as isize),
                        0.0,
                        (&mut gx, 0, k as isize, 1),
                    );
                    accumulate(grads, *x, gx);
                }
                if self.needs(*w) {
                    let mut gw = vec![0.0; k * n];
                    gemm(
                        k,
                        m,
                        n,
                        1.0,
                        (xd, 0, 1, k as isize),
                        (g, 0, n as isize, 1),
                        0.0,
                        (&mut gw, 0, n as isize, 1),
                    );
                    accumulate(grads, *w, gw);
                }
            }
            Op::ComplexMatMul(x, w) => {
                let (xd, wd) = (self.data(*x), self.data(*w));
                let ws = self.shape(*w);
                let (k, n) = (ws[0], ws[1]);
                let m = xd.len() / (2 * k).max(1);
                let (rx, rw, rg) = ((2 * k) as isize, (2 * n) as isize, (2 * n) as isize);
                if self.needs(*x) {
                    let mut gx = vec![0.0; m * k * 2];
                    // dxr = gr wr^T + gi wi^T
                    gemm(m, n, k, 1.0, (g, 0, rg, 2), (wd, 0, 2, rw), 0.0, (&mut gx, 0, rx, 2));
                    gemm(m, n, k, 1.0, (g, 1, rg, 2), (wd, 1, 2, rw), 1.0, (&mut gx, 0, rx, 2));
                    // dxi = -gr wi^T + gi wr^T
                    gemm(m, n, k, -1.0, (g, 0, rg, 2), (wd, 1, 2, rw), 0.0, (&mut gx, 1, rx, 2));
                    gemm(m, n, k, 1.0, (g, 1, rg, 2), (wd, 0, 2, rw), 1.0, (&mut gx, 1, rx, 2));
                    accumulate(grads, *x, gx);
                }
                if self.needs(*w) {
                    let mut gw = vec![0.0; k * n * 2];
                    // dwr = xr^T gr + xi^T gi
                    gemm(k, m, n, 1.0, (xd, 0, 2, rx), (g, 0, rg, 2), 0.0, (&mut gw, 0, rw, 2));
                    gemm(k, m, n, 1.0, (xd, 1, 2, rx), (g, 1, rg, 2), 1.0, (&mut gw, 0, rw, 2));
                    // dwi = -xi^T gr + xr^T gi
                    gemm(k, m, n, -1.0, (xd, 1, 2, rx), (g, 0, rg, 2), 0.0, (&mut gw, 1, rw, 2));
                    gemm(k, m, n, 1.0, (xd, 0, 2, rx), (g, 1, rg, 2), 1.0, (&mut gw, 1, rw, 2));
                    accumulate(grads, *w, gw);
                }
            }
            Op::ComplexMul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                let r = bd.len();
                if self.needs(*a) {
                    let mut ga = vec![0.0; ad.len()];
                    for (j, o) in ga.chunks_exact_mut(2).enumerate() {
                        let jb = (2 * j) % r;
                        let (gr, gi) = (g[2 * j], g[2 * j + 1]);
                        let (br, bi) = (bd[jb], bd[jb + 1]);
                        // g * conj(b)
                        o[0] = gr * br + gi * bi;
                        o[1] = gi * br - gr * bi;
                    }
                    accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; ad.len()];
                    for (j, o) in gb.chunks_exact_mut(2).enumerate() {
                        let (gr, gi) = (g[2 * j], g[2 * j + 1]);
                        let (ar, ai) = (ad[2 * j], ad[2 * j + 1]);
                        o[0] = gr * ar + gi * ai;
                        o[1] = gi * ar - gr * ai;
                    }
                    accumulate(grads, *b, reduce_broadcast(&gb, r));
                }
            }
            Op::ComplexAbs(x) => {
                let xd = self.data(*x);
                let mut gx = vec![0.0; xd.len()];
                for (j, (o, m)) in gx.chunks_exact_mut(2).zip(out).enumerate() {
                    if *m > 0.0 {
                        o[0] = g[j] * xd[2 * j] / m;
                        o[1] = g[j] * xd[2 * j + 1] / m;
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Sum(x) => accumulate(grads, *x, vec![g[0]; self.value(*x).numel()]),
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                accumulate(grads, *x, vec![g[0] / n as f64; n]);
            }
            Op::MeanAxis { x, axis } => {
                let (outer, dim, inner) = split_axis(self.shape(*x), *axis);
                let mut gx = vec![0.0; outer * dim * inner];
                for o in 0..outer {
                    for t in 0..dim {
                        for i in 0..inner {
                            gx[(o * dim + t) * inner + i] = g[o * inner + i] / dim as f64;
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::VarianceAxis { x, axis } => {
                let (mean, _) = self.axis_stats(*x, *axis);
                let (outer, dim, inner) = split_axis(self.shape(*x), *axis);
                let xd = self.data(*x);
                let mut gx = vec![0.0; xd.len()];
                for o in 0..outer {
                    for t in 0..dim {
                        for i in 0..inner {
                            let j = (o * dim + t) * inner + i;
                            let s = o * inner + i;
                            gx[j] = 2.0 * (xd[j] - mean[s]) / dim as f64 * g[s];
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Normalize { x, axis, inv_std } => {
                let (outer, dim, inner) = split_axis(self.shape(*x), *axis);
                let mut gx = vec![0.0; out.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |t: usize| (o * dim + t) * inner + i;
                        let mut mg = 0.0;
                        let mut mgy = 0.0;
                        for t in 0..dim {
                            mg += g[idx(t)];
                            mgy += g[idx(t)] * out[idx(t)];
                        }
                        mg /= dim as f64;
                        mgy /= dim as f64;
                        let s = inv_std[o * inner + i];
                        for t in 0..dim {
                            gx[idx(t)] = s * (g[idx(t)] - mg - out[idx(t)] * mgy);
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let b = labels.len();
                let c = probs.len() / b;
                let mut gl = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    gl[i * c + l] -= 1.0;
                }
                let s = g[0] / b as f64;
                gl.iter_mut().for_each(|v| *v *= s);
                accumulate(grads, *logits, gl);
            }
            Op::Concat { a, b, axis } => {
                let (outer, da, inner) = split_axis(self.shape(*a), *axis);
                let db = self.shape(*b)[*axis];
                let mut ga = Vec::with_capacity(outer * da * inner);
                let mut gb = Vec::with_capacity(outer * db * inner);
                for o in 0..outer {
                    let base = o * (da + db) * inner;
                    ga.extend_from_slice(&g[base..base + da * inner]);
                    gb.extend_from_slice(&g[base + da * inner..base + (da + db) * inner]);
                }
                if self.needs(*a) {
                    accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    accumulate(grads, *b, gb);
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, dim, inner) = split_axis(self.shape(*x), *axis);
                let len = node.value.shape()[*axis];
                let mut gx = vec![0.0; outer * dim * inner];
                for o in 0..outer {
                    let dst = (o * dim + start) * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                accumulate(grads, *x, gx);
            }
            Op::Rfft { x, axis } => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                let k_len = half_len(n);
                // dx = N * irfft(G'), with G' halved on interior bins.
                let mut gs = g.to_vec();
                for o in 0..outer {
                    for k in 0..k_len {
                        let edge = k == 0 || (n % 2 == 0 && k == n / 2);
                        for i in 0..inner {
                            let j = ((o * k_len + k) * inner + i) * 2;
                            if edge {
                                gs[j + 1] = 0.0;
                            } else {
                                gs[j] *= 0.5;
                                gs[j + 1] *= 0.5;
                            }
                        }
                    }
                }
                let mut gx = irfft_axis(&gs, outer, k_len, inner, n);
                gx.iter_mut().for_each(|v| *v *= n as f64);
                accumulate(grads, *x, gx);
            }
            Op::Irfft { x, axis } => {
                let xs = self.shape(*x);
                let (outer, k_len, inner) = split_axis(&xs[..xs.len() - 1], *axis);
                let n = node.value.shape()[*axis];
                // dX = (c_k / N) * rfft(g), c_k = 1 on DC/Nyquist and 2 elsewhere.
                let mut gx = rfft_axis(g, outer, n, inner);
                let inv_n = 1.0 / n as f64;
                for o in 0..outer {
                    for k in 0..k_len {
                        let edge = k == 0 || (n % 2 == 0 && k == n / 2);
                        let c = if edge { inv_n } else { 2.0 * inv_n };
                        for i in 0..inner {
                            let j = ((o * k_len + k) * inner + i) * 2;
                            gx[j] *= c;
                            gx[j + 1] = if edge { 0.0 } else { gx[j + 1] * c };
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Extend {
                x,
                axis,
                targets,
                scale,
                n_out,
            } => {
                let xs = self.shape(*x);
                let (outer, k_in, inner2) = split_axis(xs, *axis);
                let k_out = node.value.shape()[*axis];
                let nyquist = (n_out % 2 == 0 && *n_out > 1).then_some(n_out / 2);
                let mut winner = vec![usize::MAX; k_out];
                for (k, &t) in targets.iter().enumerate() {
                    winner[t] = k;
                }
                let mut gx = vec![0.0; outer * k_in * inner2];
                for o in 0..outer {
                    for (k, &t) in targets.iter().enumerate() {
                        if winner[t] != k {
                            continue;
                        }
                        let src = (o * k_out + t) * inner2;
                        let dst = (o * k_in + k) * inner2;
                        for j in 0..inner2 {
                            let zero_im = j % 2 == 1
                                && (t == 0 || nyquist == Some(t));
                            gx[dst + j] = if zero_im { 0.0 } else { scale * g[src + j] };
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
        }
    }
}

fn real_bins(n: usize) -> impl Iterator<Item = usize> {
    std::iter::once(0).chain((n % 2 == 0 && n > 1).then_some(n / 2))
}
