use std::collections::HashMap;

use rand::Rng;

use super::kernels::{self, Conv3dGeom, Up2Geom};
use super::{Mode, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`]. Handles are invalidated when the
/// tape is cleared by [`Tape::backward`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: usize,
    generation: u64,
}

enum Op<F> {
    Leaf,
    Conv3d { x: usize, w: usize, b: usize, geom: Conv3dGeom },
    ConvTranspose3d { x: usize, w: usize, b: usize, geom: Up2Geom },
    MaxPool3d { x: usize, argmax: Vec<usize> },
    BatchNorm { x: usize, gamma: usize, beta: usize, norm: NormCache<F> },
    Relu { x: usize },
    Sigmoid { x: usize },
    Concat { a: usize, b: usize, ca: usize, cb: usize, n: usize, inner: usize },
    Dropout { x: usize, mask: Vec<F> },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, factor: F },
    OneMinus { x: usize },
    Mse { a: usize, b: usize },
    Sum { x: usize },
}

struct NormCache<F> {
    xhat: Vec<F>,
    inv_std: Vec<F>,
    batch_stats: bool,
    n: usize,
    channels: usize,
    inner: usize,
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Per-channel statistics of one training-mode batch-norm call.
#[derive(Debug, Clone)]
pub struct BatchStats<F> {
    pub mean: Vec<F>,
    pub var_unbiased: Vec<F>,
}

/// Batch-norm running statistics (momentum 0.1, epsilon 1e-5 by default).
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<F> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
    pub momentum: F,
    pub eps: F,
}

impl<F: Real> RunningStats<F> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![F::zero(); channels],
            var: vec![F::one(); channels],
            momentum: F::from_f64_lossy(0.1),
            eps: F::from_f64_lossy(1e-5),
        }
    }

    pub fn update(&mut self, batch: &BatchStats<F>) {
        let m = self.momentum;
        for (r, &b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (F::one() - m) * *r + m * b;
        }
        for (r, &b) in self.var.iter_mut().zip(&batch.var_unbiased) {
            *r = (F::one() - m) * *r + m * b;
        }
    }
}

/// Leaf gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients<F> {
    generation: u64,
    grads: HashMap<usize, Tensor<F>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        if v.generation != self.generation {
            return None;
        }
        self.grads.get(&v.id)
    }

    /// Gradient of `v`, or zeros when `v` was not reachable from the loss.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<F> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

/// Ordered record of differentiable operations. Every node is appended after
/// its parents, so reverse index order is a valid reverse topological order.
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    generation: u64,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), generation: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf; receives a gradient on backward.
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf (data, zero-filled state).
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<F>> {
        let id = self.check(v)?;
        Ok(&self.nodes[id].value)
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.generation != self.generation || v.id >= self.nodes.len() {
            return Err(Error::usage(
                "variable belongs to a cleared tape; rerun the forward pass before backward",
            ));
        }
        Ok(v.id)
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node { value, op, requires_grad });
        Var { id, generation: self.generation }
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Same-padded, stride-1 3D convolution. Weights are `C_out×C_in×k×k×k`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        let (xi, wi, bi) = (self.check(x)?, self.check(w)?, self.check(b)?);
        let [n, c_in, d, h, wd] = self.nodes[xi].value.dims5()?;
        let ws = self.nodes[wi].value.shape().to_vec();
        let (c_out, k) = match ws.as_slice() {
            &[co, ci, k0, k1, k2] if k0 == k1 && k1 == k2 => {
                if ci != c_in {
                    return Err(Error::shape(format!(
                        "conv3d: input has {c_in} channels, weights expect {ci}"
                    )));
                }
                (co, k0)
            }
            s => return Err(Error::shape(format!("conv3d: bad weight shape {s:?}"))),
        };
        if self.nodes[bi].value.len() != c_out {
            return Err(Error::shape(format!(
                "conv3d: bias has {} entries, expected {c_out}",
                self.nodes[bi].value.len()
            )));
        }
        if [d, h, wd].iter().any(|&e| e + 2 * pad < k) {
            return Err(Error::shape("conv3d: kernel larger than padded input"));
        }
        if !self.nodes[xi].value.is_finite() {
            return Err(Error::numeric("conv3d: non-finite input"));
        }
        let geom = Conv3dGeom::new(n, c_in, c_out, [d, h, wd], k, pad);
        let out = kernels::conv3d_forward(
            &geom,
            self.nodes[xi].value.data(),
            self.nodes[wi].value.data(),
            self.nodes[bi].value.data(),
        );
        let [od, oh, ow] = geom.out_dims;
        let value = Tensor::from_vec(&[n, c_out, od, oh, ow], out)?;
        let rg = self.rg(&[xi, wi, bi]);
        Ok(self.push(value, Op::Conv3d { x: xi, w: wi, b: bi, geom }, rg))
    }

    /// 2³ stride-2 transposed convolution. Weights are `C_in×C_out×2×2×2`.
    pub fn conv_transpose3d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xi, wi, bi) = (self.check(x)?, self.check(w)?, self.check(b)?);
        let [n, c_in, d, h, wd] = self.nodes[xi].value.dims5()?;
        let c_out = match self.nodes[wi].value.shape() {
            &[ci, co, 2, 2, 2] => {
                if ci != c_in {
                    return Err(Error::shape(format!(
                        "conv_transpose3d: input has {c_in} channels, weights expect {ci}"
                    )));
                }
                co
            }
            s => return Err(Error::shape(format!("conv_transpose3d: bad weight shape {s:?}"))),
        };
        if self.nodes[bi].value.len() != c_out {
            return Err(Error::shape("conv_transpose3d: bias length mismatch"));
        }
        let geom = Up2Geom { n, c_in, c_out, in_dims: [d, h, wd] };
        let out = kernels::conv_transpose3d_forward(
            &geom,
            self.nodes[xi].value.data(),
            self.nodes[wi].value.data(),
            self.nodes[bi].value.data(),
        );
        let value = Tensor::from_vec(&[n, c_out, 2 * d, 2 * h, 2 * wd], out)?;
        let rg = self.rg(&[xi, wi, bi]);
        Ok(self.push(value, Op::ConvTranspose3d { x: xi, w: wi, b: bi, geom }, rg))
    }

    /// 2³ stride-2 max pooling.
    pub fn maxpool3d(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let [n, c, d, h, w] = self.nodes[xi].value.dims5()?;
        if d % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!("maxpool3d: odd spatial extent in {d}×{h}×{w}")));
        }
        let (out, argmax) = kernels::maxpool3d_forward(self.nodes[xi].value.data(), n * c, [d, h, w]);
        let value = Tensor::from_vec(&[n, c, d / 2, h / 2, w / 2], out)?;
        let rg = self.rg(&[xi]);
        Ok(self.push(value, Op::MaxPool3d { x: xi, argmax }, rg))
    }

    fn bn_check(&self, xi: usize, gi: usize, bi: usize) -> Result<(usize, usize, usize)> {
        let shape = self.nodes[xi].value.shape();
        if shape.len() < 2 {
            return Err(Error::shape("batchnorm3d: input needs a channel axis"));
        }
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        if n * inner == 0 {
            return Err(Error::shape("batchnorm3d: zero-element channel"));
        }
        if self.nodes[gi].value.len() != c || self.nodes[bi].value.len() != c {
            return Err(Error::shape(format!("batchnorm3d: gamma/beta must have {c} entries")));
        }
        Ok((n, c, inner))
    }

    /// Training-mode batch norm: normalizes with the batch statistics over
    /// `N×D×H×W` per channel and returns them for the running update.
    pub fn batchnorm3d_train(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<(Var, BatchStats<F>)> {
        let (xi, gi, bi) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let (n, c, inner) = self.bn_check(xi, gi, bi)?;
        let xv = self.nodes[xi].value.data();
        let count = F::from_usize(n * inner).unwrap();
        let mut mean = vec![F::zero(); c];
        let mut var = vec![F::zero(); c];
        for ch in 0..c {
            let mut acc = F::zero();
            for s in 0..n {
                for &v in &xv[(s * c + ch) * inner..][..inner] {
                    acc += v;
                }
            }
            let mu = acc / count;
            let mut sq = F::zero();
            for s in 0..n {
                for &v in &xv[(s * c + ch) * inner..][..inner] {
                    sq += (v - mu) * (v - mu);
                }
            }
            mean[ch] = mu;
            var[ch] = sq / count;
        }
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let g = self.nodes[gi].value.data();
        let b = self.nodes[bi].value.data();
        let mut xhat = vec![F::zero(); xv.len()];
        let mut out = vec![F::zero(); xv.len()];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * inner;
                for i in off..off + inner {
                    xhat[i] = (xv[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + b[ch];
                }
            }
        }
        let m = n * inner;
        let var_unbiased = if m > 1 {
            let scale = F::from_usize(m).unwrap() / F::from_usize(m - 1).unwrap();
            var.iter().map(|&v| v * scale).collect()
        } else {
            var.clone()
        };
        let value = Tensor::from_vec(self.nodes[xi].value.shape(), out)?;
        let norm = NormCache { xhat, inv_std, batch_stats: true, n, channels: c, inner };
        let rg = self.rg(&[xi, gi, bi]);
        let v = self.push(value, Op::BatchNorm { x: xi, gamma: gi, beta: bi, norm }, rg);
        Ok((v, BatchStats { mean, var_unbiased }))
    }

    /// Eval-mode batch norm using running statistics.
    pub fn batchnorm3d_eval(&mut self, x: Var, gamma: Var, beta: Var, stats: &RunningStats<F>) -> Result<Var> {
        let (xi, gi, bi) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let (n, c, inner) = self.bn_check(xi, gi, bi)?;
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::shape("batchnorm3d: running stats length mismatch"));
        }
        let inv_std: Vec<F> = stats.var.iter().map(|&v| F::one() / (v + stats.eps).sqrt()).collect();
        let xv = self.nodes[xi].value.data();
        let g = self.nodes[gi].value.data();
        let b = self.nodes[bi].value.data();
        let mut xhat = vec![F::zero(); xv.len()];
        let mut out = vec![F::zero(); xv.len()];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * inner;
                for i in off..off + inner {
                    xhat[i] = (xv[i] - stats.mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + b[ch];
                }
            }
        }
        let value = Tensor::from_vec(self.nodes[xi].value.shape(), out)?;
        let norm = NormCache { xhat, inv_std, batch_stats: false, n, channels: c, inner };
        let rg = self.rg(&[xi, gi, bi]);
        Ok(self.push(value, Op::BatchNorm { x: xi, gamma: gi, beta: bi, norm }, rg))
    }

    /// Batch norm that updates `stats` in train mode and reads it in eval mode.
    pub fn batchnorm3d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<F>,
        mode: Mode,
    ) -> Result<Var> {
        match mode {
            Mode::Train => {
                let (v, batch) = self.batchnorm3d_train(x, gamma, beta, stats.eps)?;
                stats.update(&batch);
                Ok(v)
            }
            Mode::Eval => self.batchnorm3d_eval(x, gamma, beta, stats),
        }
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let value = self.nodes[xi].value.map(|v| if v > F::zero() { v } else { F::zero() });
        let rg = self.rg(&[xi]);
        Ok(self.push(value, Op::Relu { x: xi }, rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let value = self.nodes[xi].value.map(|v| F::one() / (F::one() + (-v).exp()));
        let rg = self.rg(&[xi]);
        Ok(self.push(value, Op::Sigmoid { x: xi }, rg))
    }

    /// Channel concatenation; `a`'s channels come first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let sa = self.nodes[ai].value.shape();
        let sb = self.nodes[bi].value.shape();
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::shape(format!("concat_channels: incompatible shapes {sa:?} and {sb:?}")));
        }
        let (n, ca, cb) = (sa[0], sa[1], sb[1]);
        let inner: usize = sa[2..].iter().product();
        let mut shape = sa.to_vec();
        shape[1] = ca + cb;
        let (da, db) = (self.nodes[ai].value.data(), self.nodes[bi].value.data());
        let mut out = Vec::with_capacity(n * (ca + cb) * inner);
        for s in 0..n {
            out.extend_from_slice(&da[s * ca * inner..(s + 1) * ca * inner]);
            out.extend_from_slice(&db[s * cb * inner..(s + 1) * cb * inner]);
        }
        let value = Tensor::from_vec(&shape, out)?;
        let rg = self.rg(&[ai, bi]);
        Ok(self.push(value, Op::Concat { a: ai, b: bi, ca, cb, n, inner }, rg))
    }

    /// Inverted dropout. Identity in eval mode or at rate 0.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        let xi = self.check(x)?;
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = F::from_f64_lossy(1.0 / (1.0 - rate));
        let len = self.nodes[xi].value.len();
        let mask: Vec<F> = (0..len)
            .map(|_| if rng.random::<f64>() < rate { F::zero() } else { keep })
            .collect();
        let data = self.nodes[xi].value.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::from_vec(self.nodes[xi].value.shape(), data)?;
        let rg = self.rg(&[xi]);
        Ok(self.push(value, Op::Dropout { x: xi, mask }, rg))
    }

    fn binary(&mut self, a: Var, b: Var, name: &str) -> Result<(usize, usize)> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        if self.nodes[ai].value.shape() != self.nodes[bi].value.shape() {
            return Err(Error::shape(format!(
                "{name}: shapes {:?} and {:?} differ",
                self.nodes[ai].value.shape(),
                self.nodes[bi].value.shape()
            )));
        }
        Ok((ai, bi))
    }

    fn zip_map(&self, ai: usize, bi: usize, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        let data = self.nodes[ai]
            .value
            .data()
            .iter()
            .zip(self.nodes[bi].value.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_vec(self.nodes[ai].value.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = self.binary(a, b, "add")?;
        let value = self.zip_map(ai, bi, |x, y| x + y)?;
        let rg = self.rg(&[ai, bi]);
        Ok(self.push(value, Op::Add { a: ai, b: bi }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = self.binary(a, b, "sub")?;
        let value = self.zip_map(ai, bi, |x, y| x - y)?;
        let rg = self.rg(&[ai, bi]);
        Ok(self.push(value, Op::Sub { a: ai, b: bi }, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = self.binary(a, b, "mul")?;
        let value = self.zip_map(ai, bi, |x, y| x * y)?;
        let rg = self.rg(&[ai, bi]);
        Ok(self.push(value, Op::Mul { a: ai, b: bi }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: F) -> Result<Var> {
        let xi = self.check(x)?;
        let value = self.nodes[xi].value.map(|v| v * factor);
        let rg = self.rg(&[xi]);
        Ok(self.push(value, Op::Scale { x: xi, factor }, rg))
    }

    /// `1 − x`, elementwise.
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let value = self.nodes[xi].value.map(|v| F::one() - v);
        let rg = self.rg(&[xi]);
        Ok(self.push(value, Op::OneMinus { x: xi }, rg))
    }

    /// Mean squared difference as a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = self.binary(a, b, "mse")?;
        let n = F::from_usize(self.nodes[ai].value.len()).unwrap();
        let mut acc = F::zero();
        for (&x, &y) in self.nodes[ai].value.data().iter().zip(self.nodes[bi].value.data()) {
            acc += (x - y) * (x - y);
        }
        let rg = self.rg(&[ai, bi]);
        Ok(self.push(Tensor::scalar(acc / n), Op::Mse { a: ai, b: bi }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let total = self.nodes[xi].value.data().iter().copied().sum();
        let rg = self.rg(&[xi]);
        Ok(self.push(Tensor::scalar(total), Op::Sum { x: xi }, rg))
    }

    /// Propagates gradients from a scalar `loss` to every leaf, then clears
    /// the tape. Handles from before the call become invalid.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<F>> {
        let li = self.check(loss)?;
        if self.nodes[li].value.len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[li].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[li] = Some(vec![F::one()]);
        let mut leaves = HashMap::new();

        for id in (0..=li).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    leaves.insert(id, Tensor::from_vec(node.value.shape(), g)?);
                }
                Op::Conv3d { x, w, b, geom } => {
                    if self.nodes[*x].requires_grad {
                        let gx = kernels::conv3d_backward_input(geom, &g, self.nodes[*w].value.data());
                        accumulate(&mut grads, *x, gx);
                    }
                    if self.nodes[*w].requires_grad || self.nodes[*b].requires_grad {
                        let (gw, gb) = kernels::conv3d_backward_params(geom, &g, self.nodes[*x].value.data());
                        accumulate(&mut grads, *w, gw);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::ConvTranspose3d { x, w, b, geom } => {
                    if self.nodes[*x].requires_grad {
                        let gx = kernels::conv_transpose3d_backward_input(geom, &g, self.nodes[*w].value.data());
                        accumulate(&mut grads, *x, gx);
                    }
                    if self.nodes[*w].requires_grad || self.nodes[*b].requires_grad {
                        let (gw, gb) =
                            kernels::conv_transpose3d_backward_params(geom, &g, self.nodes[*x].value.data());
                        accumulate(&mut grads, *w, gw);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::MaxPool3d { x, argmax } => {
                    let mut gx = vec![F::zero(); self.nodes[*x].value.len()];
                    for (&src, &gv) in argmax.iter().zip(&g) {
                        gx[src] += gv;
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::BatchNorm { x, gamma, beta, norm } => {
                    let gam = self.nodes[*gamma].value.data();
                    let (n, c, inner) = (norm.n, norm.channels, norm.inner);
                    let mut gg = vec![F::zero(); c];
                    let mut gb = vec![F::zero(); c];
                    for s in 0..n {
                        for ch in 0..c {
                            let off = (s * c + ch) * inner;
                            for i in off..off + inner {
                                gg[ch] += g[i] * norm.xhat[i];
                                gb[ch] += g[i];
                            }
                        }
                    }
                    if self.nodes[*x].requires_grad {
                        let mut gx = vec![F::zero(); g.len()];
                        if norm.batch_stats {
                            let m = F::from_usize(n * inner).unwrap();
                            for ch in 0..c {
                                // Σ dxhat and Σ dxhat·xhat reduce to gamma times the beta/gamma grads.
                                let sum_dxhat = gam[ch] * gb[ch];
                                let sum_dxhat_xhat = gam[ch] * gg[ch];
                                let k = norm.inv_std[ch] / m;
                                for s in 0..n {
                                    let off = (s * c + ch) * inner;
                                    for i in off..off + inner {
                                        let dxhat = g[i] * gam[ch];
                                        gx[i] = k * (m * dxhat - sum_dxhat - norm.xhat[i] * sum_dxhat_xhat);
                                    }
                                }
                            }
                        } else {
                            for s in 0..n {
                                for ch in 0..c {
                                    let off = (s * c + ch) * inner;
                                    let k = gam[ch] * norm.inv_std[ch];
                                    for i in off..off + inner {
                                        gx[i] = g[i] * k;
                                    }
                                }
                            }
                        }
                        accumulate(&mut grads, *x, gx);
                    }
                    accumulate(&mut grads, *gamma, gg);
                    accumulate(&mut grads, *beta, gb);
                }
                Op::Relu { x } => {
                    let xv = self.nodes[*x].value.data();
                    let gx = g.iter().zip(xv).map(|(&gv, &v)| if v > F::zero() { gv } else { F::zero() }).collect();
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sigmoid { x } => {
                    let yv = node.value.data();
                    let gx = g.iter().zip(yv).map(|(&gv, &y)| gv * y * (F::one() - y)).collect();
                    accumulate(&mut grads, *x, gx);
                }
                Op::Concat { a, b, ca, cb, n, inner } => {
                    let mut ga = Vec::with_capacity(n * ca * inner);
                    let mut gb = Vec::with_capacity(n * cb * inner);
                    for s in 0..*n {
                        let base = s * (ca + cb) * inner;
                        ga.extend_from_slice(&g[base..base + ca * inner]);
                        gb.extend_from_slice(&g[base + ca * inner..base + (ca + cb) * inner]);
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Dropout { x, mask } => {
                    let gx = g.iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                    accumulate(&mut grads, *x, gx);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub { a, b } => {
                    accumulate(&mut grads, *b, g.iter().map(|&v| -v).collect());
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul { a, b } => {
                    let (av, bv) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                    let ga = g.iter().zip(bv).map(|(&gv, &y)| gv * y).collect();
                    let gb = g.iter().zip(av).map(|(&gv, &x)| gv * x).collect();
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale { x, factor } => {
                    accumulate(&mut grads, *x, g.iter().map(|&v| v * *factor).collect());
                }
                Op::OneMinus { x } => {
                    accumulate(&mut grads, *x, g.iter().map(|&v| -v).collect());
                }
                Op::Mse { a, b } => {
                    let (av, bv) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                    let k = F::from_f64_lossy(2.0) * g[0] / F::from_usize(av.len()).unwrap();
                    let ga: Vec<F> = av.iter().zip(bv).map(|(&x, &y)| k * (x - y)).collect();
                    let gb = ga.iter().map(|&v| -v).collect();
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Sum { x } => {
                    let len = self.nodes[*x].value.len();
                    accumulate(&mut grads, *x, vec![g[0]; len]);
                }
            }
        }

        let generation = self.generation;
        self.nodes.clear();
        self.generation += 1;
        Ok(Gradients { generation, grads: leaves })
    }
}

fn accumulate<F: Real>(grads: &mut [Option<Vec<F>>], id: usize, g: Vec<F>) {
    match &mut grads[id] {
        Some(existing) => {
            for (e, v) in existing.iter_mut().zip(g) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn conv3d_zero_input_passes_bias() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 3, 4, 5]));
        let w = tape.leaf(Tensor::full(&[3, 2, 3, 3, 3], 0.7));
        let b = tape.leaf(t(&[3], vec![1.0, -2.0, 0.5]));
        let y = tape.conv3d(x, w, b, 1).unwrap();
        let out = tape.value(y).unwrap();
        assert_eq!(out.shape(), &[1, 3, 3, 4, 5]);
        for (c, &bias) in [1.0, -2.0, 0.5].iter().enumerate() {
            assert!(out.data()[c * 60..(c + 1) * 60].iter().all(|&v| v == bias));
        }
    }

    #[test]
    fn conv3d_full_overlap_sums_kernel() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(&[1, 1, 3, 3, 3], 1.0));
        let w = tape.leaf(Tensor::full(&[1, 1, 3, 3, 3], 1.0));
        let b = tape.leaf(Tensor::zeros(&[1]));
        let y = tape.conv3d(x, w, b, 1).unwrap();
        assert_eq!(tape.value(y).unwrap().data()[13], 27.0);
    }

    #[test]
    fn conv3d_channel_mismatch_is_shape_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4, 4]));
        let w = tape.leaf(Tensor::zeros(&[1, 3, 3, 3, 3]));
        let b = tape.leaf(Tensor::zeros(&[1]));
        assert!(matches!(tape.conv3d(x, w, b, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn conv3d_non_finite_input_is_numeric_error() {
        let mut tape = Tape::<f32>::new();
        let mut data = Tensor::zeros(&[1, 1, 2, 2, 2]);
        data.data_mut()[3] = f32::NAN;
        let x = tape.constant(data);
        let w = tape.leaf(Tensor::zeros(&[1, 1, 3, 3, 3]));
        let b = tape.leaf(Tensor::zeros(&[1]));
        assert!(matches!(tape.conv3d(x, w, b, 1), Err(Error::Numeric(_))));
    }

    #[test]
    fn conv_transpose_single_voxel_stamps_block() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 1, 1, 1, 1], vec![2.5]));
        let w = tape.leaf(Tensor::full(&[1, 1, 2, 2, 2], 1.0));
        let b = tape.leaf(Tensor::zeros(&[1]));
        let y = tape.conv_transpose3d(x, w, b).unwrap();
        let out = tape.value(y).unwrap();
        assert_eq!(out.shape(), &[1, 1, 2, 2, 2]);
        assert!(out.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn conv_transpose_zero_input_gives_bias() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[2, 3, 2, 2, 2]));
        let w = tape.leaf(Tensor::full(&[3, 2, 2, 2, 2], 0.3));
        let b = tape.leaf(t(&[2], vec![4.0, -1.0]));
        let y = tape.conv_transpose3d(x, w, b).unwrap();
        let out = tape.value(y).unwrap();
        assert_eq!(out.shape(), &[2, 2, 4, 4, 4]);
        for s in 0..2 {
            assert!(out.data()[(s * 2) * 64..(s * 2 + 1) * 64].iter().all(|&v| v == 4.0));
            assert!(out.data()[(s * 2 + 1) * 64..(s * 2 + 2) * 64].iter().all(|&v| v == -1.0));
        }
        let x = tape.constant(Tensor::zeros(&[1, 2, 2, 2, 2]));
        assert!(tape.conv_transpose3d(x, w, b).is_err());
    }

    #[test]
    fn maxpool_block_and_constant() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 1, 2, 2, 2], (1..=8).map(f64::from).collect()));
        let y = tape.maxpool3d(x).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), &[8.0]);

        let c = tape.constant(Tensor::full(&[1, 2, 4, 4, 4], -3.0));
        let y = tape.maxpool3d(c).unwrap();
        assert!(tape.value(y).unwrap().data().iter().all(|&v| v == -3.0));

        let odd = tape.constant(Tensor::zeros(&[1, 1, 3, 4, 4]));
        assert!(matches!(tape.maxpool3d(odd), Err(Error::Shape(_))));
    }

    #[test]
    fn maxpool_tie_routes_to_first_index() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(&[1, 1, 2, 2, 2], 1.0));
        let y = tape.maxpool3d(x).unwrap();
        let loss = tape.sum(y).unwrap();
        let g = tape.backward(loss).unwrap();
        let gx = g.get(x).unwrap();
        assert_eq!(gx.data()[0], 1.0);
        assert!(gx.data()[1..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batchnorm_train_normalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..2 * 3 * 64).map(|_| rng.random::<f64>() * 5.0 - 1.0).collect();
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 3, 4, 4, 4], data));
        for (gamma, beta) in [(1.0, 0.0), (2.0, 3.0)] {
            let g = tape.leaf(Tensor::full(&[3], gamma));
            let b = tape.leaf(Tensor::full(&[3], beta));
            let mut stats = RunningStats::new(3);
            let y = tape.batchnorm3d(x, g, b, &mut stats, Mode::Train).unwrap();
            let out = tape.value(y).unwrap().data().to_vec();
            for ch in 0..3 {
                let vals: Vec<f64> = (0..2).flat_map(|s| out[(s * 3 + ch) * 64..][..64].to_vec()).collect();
                let mean = vals.iter().sum::<f64>() / 128.0;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 128.0;
                assert!((mean - beta).abs() < 1e-5);
                assert!((var.sqrt() - gamma).abs() < 1e-4, "std {} vs {gamma}", var.sqrt());
            }
            assert!(stats.mean.iter().all(|&m| m != 0.0));
        }
    }

    #[test]
    fn batchnorm_eval_with_unit_stats_is_affine() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 2, 1, 1, 2], vec![1.0, -2.0, 3.0, 0.5]));
        let g = tape.leaf(t(&[2], vec![2.0, -1.0]));
        let b = tape.leaf(t(&[2], vec![0.5, 1.0]));
        let mut stats = RunningStats::new(2);
        stats.eps = 0.0;
        let y = tape.batchnorm3d(x, g, b, &mut stats, Mode::Eval).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), &[2.5, -3.5, -2.0, 0.5]);
        assert_eq!(stats, {
            let mut s = RunningStats::new(2);
            s.eps = 0.0;
            s
        });
    }

    #[test]
    fn activations() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], vec![-1.0, 0.0, 2.0]));
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).unwrap().data(), &[0.0, 0.0, 2.0]);
        let z = tape.leaf(t(&[1], vec![0.0]));
        let s = tape.sigmoid(z).unwrap();
        assert_eq!(tape.value(s).unwrap().data(), &[0.5]);
        let g = tape.backward(s).unwrap();
        assert!((g.get(z).unwrap().data()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_stays_in_open_interval() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[4], vec![-30.0, -1.0, 1.0, 30.0]));
        let s = tape.sigmoid(x).unwrap();
        assert!(tape.value(s).unwrap().data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn concat_shape_and_split_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a: Tensor<f64> = Tensor::from_vec(&[2, 2, 4, 4, 4], (0..256).map(|_| rng.random()).collect()).unwrap();
        let b: Tensor<f64> = Tensor::from_vec(&[2, 3, 4, 4, 4], (0..384).map(|_| rng.random()).collect()).unwrap();
        let mut tape = Tape::new();
        let (va, vb) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
        let c = tape.concat_channels(va, vb).unwrap();
        let cat = tape.value(c).unwrap().clone();
        assert_eq!(cat.shape(), &[2, 5, 4, 4, 4]);
        let (ra, rb) = cat.split_channels(2).unwrap();
        assert_eq!(ra, a);
        assert_eq!(rb, b);

        let s = tape.sum(c).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(va).unwrap().data().iter().all(|&v| v == 1.0));
        assert!(g.get(vb).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn concat_spatial_mismatch_is_shape_error() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[1, 2, 4, 4, 4]));
        let b = tape.constant(Tensor::zeros(&[1, 2, 4, 4, 2]));
        assert!(matches!(tape.concat_channels(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(&[100], 2.0));
        assert_eq!(tape.dropout(x, 0.0, Mode::Train, &mut rng).unwrap(), x);
        assert_eq!(tape.dropout(x, 0.5, Mode::Eval, &mut rng).unwrap(), x);
        assert!(matches!(tape.dropout(x, 1.0, Mode::Train, &mut rng), Err(Error::Config(_))));
        let d = tape.dropout(x, 0.5, Mode::Train, &mut rng).unwrap();
        assert!(tape.value(d).unwrap().data().iter().all(|&v| v == 0.0 || v == 4.0));
    }

    #[test]
    fn mse_values() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[4], vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(t(&[4], vec![0.0, 1.0, 2.0, 3.0]));
        let m = tape.mse(a, a).unwrap();
        assert_eq!(tape.value(m).unwrap().data(), &[0.0]);
        let m = tape.mse(a, b).unwrap();
        assert_eq!(tape.value(m).unwrap().data(), &[1.0]);
        let c = tape.leaf(t(&[3], vec![0.0; 3]));
        assert!(matches!(tape.mse(a, c), Err(Error::Shape(_))));
    }

    #[test]
    fn sum_gradient_is_ones_and_tape_clears() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
        assert!(tape.is_empty());
        assert!(matches!(tape.backward(s), Err(Error::Usage(_))));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[3]));
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn unreachable_leaf_gets_zero_grad() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(&[2], 1.0));
        let y = tape.leaf(Tensor::full(&[2], 1.0));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(y).is_none());
        assert_eq!(g.get_or_zeros(y, &[2]).data(), &[0.0, 0.0]);
    }
}
