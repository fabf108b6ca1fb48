//! Multi-output loss, learning-rate schedule, initialization and the
//! training loop over synthetic patch pairs.

mod history;
mod loss;
mod schedule;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use history::{EpochRecord, StepRecord, TrainHistory};
pub use loss::{compute_loss, loss_weights};
pub use schedule::{lr_schedule, LrSchedule};

use crate::dipole::{add_noise_in_place, NoiseConfig, PatchPair};
use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::net::{check_extents, Network, NetworkConfig, ParamKind, Session, NETWORK_KEYS};
use crate::tensor::{Adam, Mode, Real, Tensor};

/// Standard deviation of the normal initialization of convolutions.
pub const INIT_STD: f64 = 0.01;

/// Convolution weights and biases ~ N(0, 0.01²); batch norm γ = 1, β = 0 and
/// running statistics reset to mean 0, variance 1.
pub fn init_weights<F: Real, R: RngCore + ?Sized>(net: &mut Network<F>, rng: &mut R) {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let kinds = net.param_kinds().to_vec();
    for (p, kind) in net.params_mut().iter_mut().zip(kinds) {
        for v in p.value.data_mut() {
            *v = match kind {
                ParamKind::ConvWeight | ParamKind::ConvBias => F::from_f64_lossy(normal.sample(rng)),
                ParamKind::BnGamma => F::one(),
                ParamKind::BnBeta => F::zero(),
            };
        }
    }
    for (_, s) in net.running_stats_mut() {
        s.mean.iter_mut().for_each(|m| *m = F::zero());
        s.var.iter_mut().for_each(|v| *v = F::one());
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub network: NetworkConfig,
    pub epochs: usize,
    pub lr_schedule: LrSchedule,
    pub batch_size: usize,
    pub lambda: f64,
    pub noise: NoiseConfig,
    pub seed: u64,
    /// Patch extents and stride used to build the dataset (echo only).
    pub patch: [usize; 3],
    pub stride: [usize; 3],
    /// Write a checkpoint every this many epochs; 0 disables intermediate
    /// checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            network: NetworkConfig::default(),
            epochs: 100,
            lr_schedule: LrSchedule::default(),
            batch_size: 4,
            lambda: 0.5,
            noise: NoiseConfig::default(),
            seed: 0,
            patch: [64; 3],
            stride: [24, 36, 20],
            checkpoint_every: 1,
        }
    }
}

const TRAIN_KEYS: &[&str] = &[
    "epochs",
    "lr_schedule",
    "batch_size",
    "lambda",
    "noise_sigma_ppm",
    "noise_seed",
    "seed",
    "patch",
    "stride",
    "checkpoint_every",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.noise.validate()?;
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.epochs > self.lr_schedule.last_epoch() {
            return Err(Error::config(format!(
                "epochs {} exceed the learning-rate schedule ({} epochs)",
                self.epochs,
                self.lr_schedule.last_epoch()
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(Error::config(format!("lambda {} outside (0, 1]", self.lambda)));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = self.network.to_kv();
        kv.insert("epochs", self.epochs);
        kv.insert("lr_schedule", &self.lr_schedule);
        kv.insert("batch_size", self.batch_size);
        kv.insert("lambda", self.lambda);
        kv.insert_list("noise_sigma_ppm", &self.noise.sigma_range_ppm);
        kv.insert("noise_seed", self.noise.seed);
        kv.insert("seed", self.seed);
        kv.insert_list("patch", &self.patch);
        kv.insert_list("stride", &self.stride);
        kv.insert("checkpoint_every", self.checkpoint_every);
        kv
    }

    /// Parses a training config. Unknown keys are rejected by name.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let allowed: Vec<&str> = TRAIN_KEYS.iter().chain(NETWORK_KEYS).copied().collect();
        kv.check_known(&allowed)?;
        let d = Self::default();
        let cfg = TrainConfig {
            network: NetworkConfig::from_kv(kv)?,
            epochs: kv.parsed_or("epochs", d.epochs)?,
            lr_schedule: kv.parsed_or("lr_schedule", d.lr_schedule)?,
            batch_size: kv.parsed_or("batch_size", d.batch_size)?,
            lambda: kv.parsed_or("lambda", d.lambda)?,
            noise: NoiseConfig {
                sigma_range_ppm: kv.array("noise_sigma_ppm")?.unwrap_or(d.noise.sigma_range_ppm),
                seed: kv.parsed_or("noise_seed", d.noise.seed)?,
            },
            seed: kv.parsed_or("seed", d.seed)?,
            patch: kv.array("patch")?.unwrap_or(d.patch),
            stride: kv.array("stride")?.unwrap_or(d.stride),
            checkpoint_every: kv.parsed_or("checkpoint_every", d.checkpoint_every)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Held-out reconstruction quality of a network on patch pairs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationScores {
    /// Pooled over all patches: `100·‖pred − gt‖ / ‖gt‖` with sums over every
    /// voxel of every patch.
    pub nrmse_percent: f64,
    /// Mean over patches whose reference has high-frequency content.
    pub hfen_percent: f64,
    /// Mean over patches.
    pub ssim: f64,
    pub patches: usize,
}

/// Eval-mode reconstruction of every patch, scored against its target.
pub fn validate_network(net: &Network<f32>, patches: &[PatchPair]) -> Result<ValidationScores> {
    if patches.is_empty() {
        return Err(Error::usage("validation set is empty"));
    }
    let (mut num, mut den) = (0.0, 0.0);
    let (mut hfen_sum, mut hfen_n, mut ssim_sum) = (0.0, 0usize, 0.0);
    for p in patches {
        let (pred, _) = net.reconstruct(&p.field)?;
        for (a, b) in pred.values().iter().zip(p.chi.values()) {
            num += (a - b).powi(2);
            den += b * b;
        }
        match crate::metrics::hfen(&pred, &p.chi, None) {
            Ok(h) => {
                hfen_sum += h;
                hfen_n += 1;
            }
            Err(Error::Division(_)) => {}
            Err(e) => return Err(e),
        }
        ssim_sum += crate::metrics::ssim(&pred, &p.chi)?;
    }
    if den == 0.0 {
        return Err(Error::Division("validation targets are all zero".into()));
    }
    Ok(ValidationScores {
        nrmse_percent: 100.0 * (num / den).sqrt(),
        hfen_percent: if hfen_n > 0 { hfen_sum / hfen_n as f64 } else { f64::NAN },
        ssim: ssim_sum / patches.len() as f64,
        patches: patches.len(),
    })
}

/// RNG for shuffling, noise and dropout in `epoch`. Depends only on the seed
/// and the epoch, so resumed runs replay the same streams.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

fn batch_tensor(values: impl Iterator<Item = Vec<f64>>, count: usize, dims: [usize; 3]) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(count * dims.iter().product::<usize>());
    for v in values {
        data.extend(v.into_iter().map(|x| x as f32));
    }
    Tensor::from_vec(&[count, 1, dims[2], dims[1], dims[0]], data)
}

/// One optimizer step on a batch; returns the loss.
pub fn train_step(
    net: &mut Network<f32>,
    field: Tensor<f32>,
    target: Tensor<f32>,
    lambda: f64,
    lr: f64,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    let mut s = Session::new(net, Mode::Train, rng);
    let x = s.input(field)?;
    let (fin, latents) = s.ir2_forward(x)?;
    let gt = s.tape.constant(target);
    let loss = compute_loss(&mut s.tape, &latents, fin, gt, lambda)?;
    let value = s.tape.value(loss)?.data()[0] as f64;
    if !value.is_finite() {
        return Err(Error::numeric(format!("non-finite training loss {value}")));
    }
    let out = s.backward(loss)?;
    net.absorb(out)?;
    Adam::default().step(net.params_mut().iter_mut(), lr)?;
    Ok(value)
}

/// Trains for every epoch of `cfg`.
pub fn train_loop(dataset: &[PatchPair], net: Network<f32>, cfg: &TrainConfig) -> Result<(Network<f32>, TrainHistory)> {
    train_epochs(dataset, net, cfg, 1, |_, _, _| Ok(()))
}

/// Trains epochs `first_epoch..=cfg.epochs`. `on_epoch_end` runs after every
/// epoch with the network, the finished epoch and the history so far.
pub fn train_epochs(
    dataset: &[PatchPair],
    mut net: Network<f32>,
    cfg: &TrainConfig,
    first_epoch: usize,
    mut on_epoch_end: impl FnMut(&Network<f32>, usize, &TrainHistory) -> Result<()>,
) -> Result<(Network<f32>, TrainHistory)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::usage("training dataset is empty; generate patches first"));
    }
    if first_epoch == 0 {
        return Err(Error::usage("epochs are 1-based"));
    }
    let dims = dataset[0].field.dims();
    check_extents(dims)?;
    if let Some(p) = dataset.iter().find(|p| p.field.dims() != dims || p.chi.dims() != dims) {
        return Err(Error::shape(format!("patch at {:?} has dims {:?}, expected {dims:?}", p.origin, p.field.dims())));
    }
    let mut history = TrainHistory::default();
    let mut step = net.params().first().map_or(0, |p| p.step_count());
    for epoch in first_epoch..=cfg.epochs {
        let lr = cfg.lr_schedule.lr(epoch)?;
        let start = Instant::now();
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut noise_rng = epoch_rng(cfg.noise.seed ^ 0x6e6f_6973_6521, epoch);
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let mut fields = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let mut v = dataset[i].field.values().to_vec();
                add_noise_in_place(&mut v, &cfg.noise, &mut noise_rng)?;
                fields.push(v);
            }
            let field = batch_tensor(fields.into_iter(), chunk.len(), dims)?;
            let target = batch_tensor(chunk.iter().map(|&i| dataset[i].chi.values().to_vec()), chunk.len(), dims)?;
            let loss = train_step(&mut net, field, target, cfg.lambda, lr, &mut rng)
                .map_err(|e| match e {
                    Error::Numeric(m) => Error::numeric(format!("epoch {epoch}, step {}: {m}", step + 1)),
                    other => other,
                })?;
            step += 1;
            log::debug!("epoch {epoch} step {step} loss {loss:.6e}");
            history.steps.push(StepRecord { step, epoch, lr, loss });
            losses.push(loss);
        }
        let mean_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        history.epochs.push(EpochRecord { epoch, lr, mean_loss, wall_seconds: start.elapsed().as_secs_f64() });
        log::info!("epoch {epoch}: mean loss {mean_loss:.6e} (lr {lr:e})");
        on_epoch_end(&net, epoch, &history)?;
    }
    Ok((net, history))
}
