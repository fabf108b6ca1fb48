use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::NetworkConfig;
use crate::dipole::Volume;
use crate::error::{Error, Result};
use crate::tensor::{BatchStats, Mode, Parameter, Real, RunningStats, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvIdx {
    pub w: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct BnIdx {
    pub gamma: usize,
    pub beta: usize,
    pub stats: usize,
}

/// Two conv3³ → BN → ReLU stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Block {
    pub conv1: ConvIdx,
    pub bn1: BnIdx,
    pub conv2: ConvIdx,
    pub bn2: BnIdx,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct RecurrentIdx {
    pub conv_a: ConvIdx,
    pub conv_x: ConvIdx,
    pub bn_x: BnIdx,
    pub conv_h: ConvIdx,
    pub bn_h: BnIdx,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Middle {
    Recurrent(RecurrentIdx),
    Plain(Block),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct IterationLayout {
    pub enc: [Block; 3],
    pub middle: Middle,
    /// Upsamplers feeding decoder levels 3, 2, 1.
    pub up: [ConvIdx; 3],
    pub dec: [Block; 3],
    pub head: ConvIdx,
}

/// What kind of tensor a parameter is, for initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    ConvBias,
    BnGamma,
    BnBeta,
}

/// The cascaded network: T U-net replicas with their own parameters plus a
/// shared 1³ fusion convolution over the T latent outputs.
#[derive(Debug, Clone)]
pub struct Network<F> {
    cfg: NetworkConfig,
    params: Vec<Parameter<F>>,
    param_names: Vec<String>,
    param_kinds: Vec<ParamKind>,
    stats: Vec<RunningStats<F>>,
    stat_names: Vec<String>,
    iterations: Vec<IterationLayout>,
    fusion: ConvIdx,
}

struct Builder<F> {
    params: Vec<Parameter<F>>,
    names: Vec<String>,
    kinds: Vec<ParamKind>,
    stats: Vec<RunningStats<F>>,
    stat_names: Vec<String>,
}

impl<F: Real> Builder<F> {
    fn param(&mut self, name: String, shape: &[usize], kind: ParamKind) -> usize {
        let fill = if kind == ParamKind::BnGamma { F::one() } else { F::zero() };
        self.params.push(Parameter::new(Tensor::full(shape, fill)));
        self.names.push(name);
        self.kinds.push(kind);
        self.params.len() - 1
    }

    fn conv(&mut self, prefix: &str, c_in: usize, c_out: usize, k: usize) -> ConvIdx {
        ConvIdx {
            w: self.param(format!("{prefix}/weight"), &[c_out, c_in, k, k, k], ParamKind::ConvWeight),
            b: self.param(format!("{prefix}/bias"), &[c_out], ParamKind::ConvBias),
        }
    }

    fn up(&mut self, prefix: &str, c_in: usize, c_out: usize) -> ConvIdx {
        ConvIdx {
            w: self.param(format!("{prefix}/weight"), &[c_in, c_out, 2, 2, 2], ParamKind::ConvWeight),
            b: self.param(format!("{prefix}/bias"), &[c_out], ParamKind::ConvBias),
        }
    }

    fn bn(&mut self, prefix: &str, c: usize) -> BnIdx {
        let gamma = self.param(format!("{prefix}/gamma"), &[c], ParamKind::BnGamma);
        let beta = self.param(format!("{prefix}/beta"), &[c], ParamKind::BnBeta);
        self.stats.push(RunningStats::new(c));
        self.stat_names.push(prefix.to_string());
        BnIdx { gamma, beta, stats: self.stats.len() - 1 }
    }

    fn block(&mut self, prefix: &str, c_in: usize, c_out: usize) -> Block {
        Block {
            conv1: self.conv(&format!("{prefix}/conv1"), c_in, c_out, 3),
            bn1: self.bn(&format!("{prefix}/bn1"), c_out),
            conv2: self.conv(&format!("{prefix}/conv2"), c_out, c_out, 3),
            bn2: self.bn(&format!("{prefix}/bn2"), c_out),
        }
    }
}

impl<F: Real> Network<F> {
    /// Allocates every parameter (convolutions zero, BN γ = 1, β = 0) without
    /// random initialization.
    pub fn zeros(cfg: &NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder { params: vec![], names: vec![], kinds: vec![], stats: vec![], stat_names: vec![] };
        let c = |l| cfg.channels(l);
        let rc = |l| if cfg.reverse_concat { c(l) } else { 0 };
        let mut iterations = Vec::with_capacity(cfg.iterations);
        for t in 1..=cfg.iterations {
            let p = format!("iter{t}");
            let enc = [
                b.block(&format!("{p}/enc1"), 1 + rc(0), c(0)),
                b.block(&format!("{p}/enc2"), c(0) + rc(1), c(1)),
                b.block(&format!("{p}/enc3"), c(1) + rc(2), c(2)),
            ];
            let middle = if cfg.recurrent_module {
                Middle::Recurrent(RecurrentIdx {
                    conv_a: b.conv(&format!("{p}/rm/conv_a"), c(2), c(2), 3),
                    conv_x: b.conv(&format!("{p}/rm/conv_x"), c(2), c(2), 3),
                    bn_x: b.bn(&format!("{p}/rm/bn_x"), c(2)),
                    conv_h: b.conv(&format!("{p}/rm/conv_h"), c(2), c(2), 3),
                    bn_h: b.bn(&format!("{p}/rm/bn_h"), c(2)),
                })
            } else {
                Middle::Plain(b.block(&format!("{p}/mid"), c(2), c(2)))
            };
            let up3 = b.up(&format!("{p}/up3"), c(2), c(2));
            let dec3 = b.block(&format!("{p}/dec3"), 2 * c(2), c(2));
            let up2 = b.up(&format!("{p}/up2"), c(2), c(1));
            let dec2 = b.block(&format!("{p}/dec2"), 2 * c(1), c(1));
            let up1 = b.up(&format!("{p}/up1"), c(1), c(0));
            let dec1 = b.block(&format!("{p}/dec1"), 2 * c(0), c(0));
            let head = b.conv(&format!("{p}/head"), c(0), 1, 1);
            iterations.push(IterationLayout { enc, middle, up: [up3, up2, up1], dec: [dec3, dec2, dec1], head });
        }
        let fusion = b.conv("fusion", cfg.iterations, 1, 1);
        Ok(Network {
            cfg: *cfg,
            params: b.params,
            param_names: b.names,
            param_kinds: b.kinds,
            stats: b.stats,
            stat_names: b.stat_names,
            iterations,
            fusion,
        })
    }

    /// Allocates the network and applies the standard initialization.
    pub fn build<R: RngCore + ?Sized>(cfg: &NetworkConfig, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(cfg)?;
        crate::train::init_weights(&mut net, rng);
        Ok(net)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[Parameter<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<F>] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.param_names
    }

    pub fn param_kinds(&self) -> &[ParamKind] {
        &self.param_kinds
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.param_names.iter().position(|n| n == name)
    }

    pub fn param(&self, name: &str) -> Option<&Parameter<F>> {
        self.param_index(name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Parameter<F>> {
        self.param_index(name).map(|i| &mut self.params[i])
    }

    /// Batch-norm running statistics with their layer paths.
    pub fn running_stats(&self) -> impl Iterator<Item = (&str, &RunningStats<F>)> {
        self.stat_names.iter().map(String::as_str).zip(&self.stats)
    }

    pub fn running_stats_mut(&mut self) -> impl Iterator<Item = (&str, &mut RunningStats<F>)> {
        self.stat_names.iter().map(String::as_str).zip(self.stats.iter_mut())
    }

    /// Total scalar parameter count.
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Scalar parameter count of iteration `t` (1-based).
    pub fn iteration_parameter_count(&self, t: usize) -> usize {
        let prefix = format!("iter{t}/");
        self.param_names
            .iter()
            .zip(&self.params)
            .filter(|(n, _)| n.starts_with(&prefix))
            .map(|(_, p)| p.value.len())
            .sum()
    }

    /// Copies the parameters into another element type.
    pub fn cast<G: Real>(&self) -> Network<G> {
        Network {
            cfg: self.cfg,
            params: self
                .params
                .iter()
                .map(|p| {
                    let mut q = Parameter::new(p.value.cast());
                    let (m, v) = p.moments();
                    let conv = |s: &[F]| s.iter().map(|&x| G::from_f64_lossy(x.to_f64_lossy())).collect();
                    q.set_optimizer_state(conv(m), conv(v), p.step_count()).expect("same length");
                    q
                })
                .collect(),
            param_names: self.param_names.clone(),
            param_kinds: self.param_kinds.clone(),
            stats: self
                .stats
                .iter()
                .map(|s| {
                    let conv = |s: &[F]| s.iter().map(|&x| G::from_f64_lossy(x.to_f64_lossy())).collect();
                    RunningStats {
                        mean: conv(&s.mean),
                        var: conv(&s.var),
                        momentum: G::from_f64_lossy(s.momentum.to_f64_lossy()),
                        eps: G::from_f64_lossy(s.eps.to_f64_lossy()),
                    }
                })
                .collect(),
            stat_names: self.stat_names.clone(),
            iterations: self.iterations.clone(),
            fusion: self.fusion,
        }
    }

    /// Stores gradients and folds batch statistics into the running stats.
    pub fn absorb(&mut self, out: SessionOutput<F>) -> Result<()> {
        if let Some(grads) = out.grads {
            if grads.len() != self.params.len() {
                return Err(Error::shape("gradient count differs from parameter count"));
            }
            for (p, g) in self.params.iter_mut().zip(grads) {
                p.grad = Some(g);
            }
        }
        for (s, b) in self.stats.iter_mut().zip(&out.batch_stats) {
            if let Some(b) = b {
                s.update(b);
            }
        }
        Ok(())
    }

    /// Eval-mode reconstruction of an `N×1×D×H×W` field batch. Returns the
    /// fused output and the T latent outputs.
    pub fn forward_eval(&self, input: &Tensor<F>) -> Result<(Tensor<F>, Vec<Tensor<F>>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = Session::new(self, Mode::Eval, &mut rng);
        let x = s.input(input.clone())?;
        let (fin, lat) = s.ir2_forward(x)?;
        let fin_t = s.tape.value(fin)?.clone();
        let lat_t = lat.iter().map(|&v| s.tape.value(v).cloned()).collect::<Result<_>>()?;
        Ok((fin_t, lat_t))
    }

    /// Eval-mode reconstruction of one field volume. Returns the fused
    /// susceptibility map and the T latent maps.
    pub fn reconstruct(&self, field: &Volume) -> Result<(Volume, Vec<Volume>)> {
        let [nx, ny, nz] = field.dims();
        check_extents([nx, ny, nz])?;
        let data = field.values().iter().map(|&v| F::from_f64_lossy(v)).collect();
        let input = Tensor::from_vec(&[1, 1, nz, ny, nx], data)?;
        let (fin, lat) = self.forward_eval(&input)?;
        let to_vol = |t: &Tensor<F>| field.with_values(t.data().iter().map(|v| v.to_f64_lossy()).collect());
        Ok((to_vol(&fin)?, lat.iter().map(to_vol).collect::<Result<_>>()?))
    }

    /// Train-mode forward pass (batch statistics, dropout) that also updates
    /// the running statistics. No gradients are kept.
    pub fn forward_train<R: RngCore + ?Sized>(
        &mut self,
        input: &Tensor<F>,
        rng: &mut R,
    ) -> Result<(Tensor<F>, Vec<Tensor<F>>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(rng.next_u64());
        let mut s = Session::new(self, Mode::Train, &mut rng);
        let x = s.input(input.clone())?;
        let (fin, lat) = s.ir2_forward(x)?;
        let fin_t = s.tape.value(fin)?.clone();
        let lat_t = lat.iter().map(|&v| s.tape.value(v).cloned()).collect::<Result<_>>()?;
        let out = s.finish();
        self.absorb(out)?;
        Ok((fin_t, lat_t))
    }
}

/// Result of a [`Session`]: optional parameter gradients (in parameter order)
/// and the batch statistics of every train-mode batch norm.
#[derive(Debug)]
pub struct SessionOutput<F> {
    pub grads: Option<Vec<Tensor<F>>>,
    pub batch_stats: Vec<Option<BatchStats<F>>>,
}

/// Per-forward state threaded through the cascade.
#[derive(Debug, Clone, Default)]
pub struct IterationState {
    /// Decoder outputs of the previous iteration, finest level first.
    pub rc_features: [Option<Var>; 3],
    /// RC tensors actually concatenated at the most recent iteration.
    pub rc_inputs: Vec<Var>,
    /// Hidden state H of the recurrent module.
    pub rm_hidden: Option<Var>,
    pub latent_outputs: Vec<Var>,
    /// Most recent recurrent module trace.
    pub rm_trace: Option<RecurrentTrace>,
}

/// Intermediate values of one recurrent module evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecurrentTrace {
    pub alpha: Var,
    /// BN/ReLU-wrapped `conv_x(X_t)`.
    pub x_path: Var,
    /// BN/ReLU-wrapped `conv_h(H_{t−1})`.
    pub h_path: Var,
    pub y: Var,
    pub h: Var,
}

/// One forward (and optionally backward) pass of a network on a fresh tape.
pub struct Session<'a, F: Real> {
    pub tape: Tape<F>,
    net: &'a Network<F>,
    vars: Vec<Var>,
    mode: Mode,
    rng: &'a mut dyn RngCore,
    batch_stats: Vec<Option<BatchStats<F>>>,
}

impl<'a, F: Real> Session<'a, F> {
    /// Registers every parameter on a new tape: as trainable leaves in train
    /// mode, as constants in eval mode.
    pub fn new(net: &'a Network<F>, mode: Mode, rng: &'a mut dyn RngCore) -> Self {
        let mut tape = Tape::new();
        let vars = net
            .params
            .iter()
            .map(|p| match mode {
                Mode::Train => tape.leaf(p.value.clone()),
                Mode::Eval => tape.constant(p.value.clone()),
            })
            .collect();
        Session { tape, net, vars, mode, rng, batch_stats: vec![None; net.stats.len()] }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.net.param_index(name).map(|i| self.vars[i])
    }

    /// Adds an `N×1×D×H×W` input, checking that extents are divisible by 8.
    pub fn input(&mut self, x: Tensor<F>) -> Result<Var> {
        let [_, c, d, h, w] = x.dims5()?;
        if c != 1 {
            return Err(Error::shape(format!("network input must have 1 channel, got {c}")));
        }
        check_extents([w, h, d])?;
        Ok(self.tape.constant(x))
    }

    fn conv(&mut self, idx: ConvIdx, x: Var, pad: usize) -> Result<Var> {
        self.tape.conv3d(x, self.vars[idx.w], self.vars[idx.b], pad)
    }

    fn up(&mut self, idx: ConvIdx, x: Var) -> Result<Var> {
        self.tape.conv_transpose3d(x, self.vars[idx.w], self.vars[idx.b])
    }

    fn bn(&mut self, idx: BnIdx, x: Var) -> Result<Var> {
        let (g, b) = (self.vars[idx.gamma], self.vars[idx.beta]);
        let stats = &self.net.stats[idx.stats];
        match self.mode {
            Mode::Train => {
                let (v, batch) = self.tape.batchnorm3d_train(x, g, b, stats.eps)?;
                self.batch_stats[idx.stats] = Some(batch);
                Ok(v)
            }
            Mode::Eval => self.tape.batchnorm3d_eval(x, g, b, stats),
        }
    }

    fn stage(&mut self, conv: ConvIdx, bn: BnIdx, x: Var) -> Result<Var> {
        let y = self.conv(conv, x, 1)?;
        let y = self.bn(bn, y)?;
        let y = self.tape.relu(y)?;
        self.tape.dropout(y, self.net.cfg.dropout_rate, self.mode, &mut *self.rng)
    }

    fn block(&mut self, b: Block, x: Var) -> Result<Var> {
        let y = self.stage(b.conv1, b.bn1, x)?;
        self.stage(b.conv2, b.bn2, y)
    }

    fn layout(&self, t: usize) -> Result<&'a IterationLayout> {
        let net: &'a Network<F> = self.net;
        net.iterations
            .get(t.wrapping_sub(1))
            .ok_or_else(|| Error::usage(format!("iteration {t} outside 1..={}", net.cfg.iterations)))
    }

    /// Gated bottleneck of iteration `t`:
    /// `α = σ(conv_a(X))`, `Y = P·α + Q·(1−α)` with `P = ReLU(BN(conv_x(X)))`
    /// and `Q = ReLU(BN(conv_h(H)))`; the new hidden state is `Y`.
    pub fn recurrent_module_forward(&mut self, t: usize, x: Var, h_prev: Var) -> Result<RecurrentTrace> {
        let Middle::Recurrent(rm) = self.layout(t)?.middle else {
            return Err(Error::usage("network was built without the recurrent module"));
        };
        let (xs, hs) = (self.tape.value(x)?.shape(), self.tape.value(h_prev)?.shape());
        if xs != hs {
            return Err(Error::shape(format!("recurrent module: X shape {xs:?} differs from H shape {hs:?}")));
        }
        let a = self.conv(rm.conv_a, x, 1)?;
        let alpha = self.tape.sigmoid(a)?;
        let p = self.conv(rm.conv_x, x, 1)?;
        let p = self.bn(rm.bn_x, p)?;
        let x_path = self.tape.relu(p)?;
        let q = self.conv(rm.conv_h, h_prev, 1)?;
        let q = self.bn(rm.bn_h, q)?;
        let h_path = self.tape.relu(q)?;
        let pa = self.tape.mul(x_path, alpha)?;
        let one_minus = self.tape.one_minus(alpha)?;
        let qa = self.tape.mul(h_path, one_minus)?;
        let y = self.tape.add(pa, qa)?;
        Ok(RecurrentTrace { alpha, x_path, h_path, y, h: y })
    }

    fn with_rc(&mut self, level: usize, x: Var, state: &mut IterationState) -> Result<Var> {
        if !self.net.cfg.reverse_concat {
            return Ok(x);
        }
        let rc = match state.rc_features[level] {
            Some(v) => v,
            None => {
                let mut shape = self.tape.value(x)?.shape().to_vec();
                shape[1] = self.net.cfg.channels(level);
                self.tape.constant(Tensor::zeros(&shape))
            }
        };
        state.rc_inputs.push(rc);
        self.tape.concat_channels(x, rc)
    }

    /// One tailored U-net pass at iteration `t` (1-based). Appends χ_t to
    /// `state.latent_outputs`, replaces `state.rc_features` with this
    /// iteration's decoder outputs and advances the recurrent hidden state.
    pub fn unet_iteration_forward(&mut self, t: usize, input: Var, state: &mut IterationState) -> Result<Var> {
        let lay = self.layout(t)?;
        let shape = self.tape.value(input)?.shape().to_vec();
        if shape.len() != 5 || shape[1] != 1 {
            return Err(Error::shape(format!("iteration input must be N×1×D×H×W, got {shape:?}")));
        }
        check_extents([shape[4], shape[3], shape[2]])?;
        state.rc_inputs.clear();

        let x = self.with_rc(0, input, state)?;
        let e1 = self.block(lay.enc[0], x)?;
        let p1 = self.tape.maxpool3d(e1)?;
        let x = self.with_rc(1, p1, state)?;
        let e2 = self.block(lay.enc[1], x)?;
        let p2 = self.tape.maxpool3d(e2)?;
        let x = self.with_rc(2, p2, state)?;
        let e3 = self.block(lay.enc[2], x)?;
        let bottom = self.tape.maxpool3d(e3)?;

        let mid = match lay.middle {
            Middle::Recurrent(_) => {
                let h_prev = state.rm_hidden.unwrap_or(bottom);
                let trace = self.recurrent_module_forward(t, bottom, h_prev)?;
                state.rm_hidden = Some(trace.h);
                state.rm_trace = Some(trace);
                trace.y
            }
            Middle::Plain(b) => self.block(b, bottom)?,
        };

        let u3 = self.up(lay.up[0], mid)?;
        let c3 = self.tape.concat_channels(u3, e3)?;
        let d3 = self.block(lay.dec[0], c3)?;
        let u2 = self.up(lay.up[1], d3)?;
        let c2 = self.tape.concat_channels(u2, e2)?;
        let d2 = self.block(lay.dec[1], c2)?;
        let u1 = self.up(lay.up[2], d2)?;
        let c1 = self.tape.concat_channels(u1, e1)?;
        let d1 = self.block(lay.dec[2], c1)?;
        let chi = self.conv(lay.head, d1, 0)?;

        state.rc_features = [Some(d1), Some(d2), Some(d3)];
        state.latent_outputs.push(chi);
        Ok(chi)
    }

    /// Full cascade: iteration 1 sees the field, iteration t > 1 sees χ_{t−1};
    /// the T latent outputs are fused by a 1³ convolution.
    pub fn ir2_forward(&mut self, field: Var) -> Result<(Var, Vec<Var>)> {
        let mut state = IterationState::default();
        let mut u = field;
        for t in 1..=self.net.cfg.iterations {
            u = self.unet_iteration_forward(t, u, &mut state)?;
        }
        let fused = self.fuse(&state.latent_outputs)?;
        Ok((fused, state.latent_outputs))
    }

    /// Channel-concatenates the latent outputs and applies the fusion layer.
    pub fn fuse(&mut self, latents: &[Var]) -> Result<Var> {
        if latents.len() != self.net.cfg.iterations {
            return Err(Error::shape(format!(
                "fusion expects {} latent outputs, got {}",
                self.net.cfg.iterations,
                latents.len()
            )));
        }
        let mut cat = latents[0];
        for &l in &latents[1..] {
            cat = self.tape.concat_channels(cat, l)?;
        }
        self.conv(self.net.fusion, cat, 0)
    }

    /// Backpropagates `loss` and returns gradients for every parameter.
    pub fn backward(mut self, loss: Var) -> Result<SessionOutput<F>> {
        if self.mode != Mode::Train {
            return Err(Error::usage("backward requires a train-mode session"));
        }
        let grads = self.tape.backward(loss)?;
        let g = self
            .vars
            .iter()
            .zip(&self.net.params)
            .map(|(&v, p)| grads.get_or_zeros(v, p.value.shape()))
            .collect();
        Ok(SessionOutput { grads: Some(g), batch_stats: self.batch_stats })
    }

    /// Ends the session without gradients.
    pub fn finish(self) -> SessionOutput<F> {
        SessionOutput { grads: None, batch_stats: self.batch_stats }
    }
}

/// Spatial extents (x, y, z) must be positive multiples of 8.
pub fn check_extents(dims: [usize; 3]) -> Result<()> {
    if dims.iter().any(|&d| d == 0 || d % 8 != 0) {
        return Err(Error::shape(format!(
            "input extents {dims:?} must be positive multiples of 8 (three 2x poolings)"
        )));
    }
    Ok(())
}
