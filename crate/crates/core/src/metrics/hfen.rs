use super::filter::{gaussian_taps, separable};
use super::{check_pair, masked, norm_ratio_percent};
use crate::dipole::Volume;
use crate::error::{Error, Result};

pub const LOG_WIDTH: usize = 15;
pub const LOG_SIGMA: f64 = 1.5;
/// Relative size of ‖LoG(gt)‖ below which the reference counts as constant.
const ROUNDOFF_FLOOR: f64 = 1e-10;

/// Zero-sum Laplacian-of-Gaussian kernel, as separable parts.
///
/// With `g(u) = exp(−u²/2σ²)` and `S = (Σg)³`, the kernel is
/// `h(x,y,z) = Σ_a g_a''(x_a)·Π_{b≠a} g(x_b) / S − m` where
/// `g''(u) = g(u)(u² − σ²)/σ⁴` and `m` is the mean that makes `Σh = 0`.
pub struct LogKernel {
    pub g: Vec<f64>,
    pub d2: Vec<f64>,
    pub mean: f64,
}

impl LogKernel {
    pub fn new(width: usize, sigma: f64) -> Self {
        let g = gaussian_taps(width, sigma);
        let s: f64 = g.iter().sum();
        let norm = s * s * s;
        let half = (width / 2) as f64;
        let s4 = sigma.powi(4);
        let d2: Vec<f64> = g
            .iter()
            .enumerate()
            .map(|(i, &gi)| gi * ((i as f64 - half).powi(2) - sigma * sigma) / s4 / norm)
            .collect();
        // Σh before centering = 3·(Σd2)·(Σg)², spread over width³ taps.
        let total = 3.0 * d2.iter().sum::<f64>() * s * s;
        let mean = total / (width as f64).powi(3);
        LogKernel { g, d2, mean }
    }

    /// Full kernel value at tap offsets (0-based indices into each axis).
    pub fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.d2[i] * self.g[j] * self.g[k] + self.g[i] * self.d2[j] * self.g[k] + self.g[i] * self.g[j] * self.d2[k]
            - self.mean
    }

    /// Filters `data` (replicate boundaries).
    pub fn apply(&self, data: &[f64], dims: [usize; 3]) -> Vec<f64> {
        let ones = vec![1.0; self.g.len()];
        let (g, d2) = (self.g.as_slice(), self.d2.as_slice());
        let a = separable(data, dims, [d2, g, g]);
        let b = separable(data, dims, [g, d2, g]);
        let c = separable(data, dims, [g, g, d2]);
        let box_sum = separable(data, dims, [&ones, &ones, &ones]);
        (0..data.len()).map(|i| a[i] + b[i] + c[i] - self.mean * box_sum[i]).collect()
    }
}

/// `100·‖LoG(pred) − LoG(gt)‖ / ‖LoG(gt)‖` with a 15³, σ = 1.5 zero-sum
/// LoG. Outside-mask voxels are zeroed before filtering and excluded from
/// the norms. A reference whose LoG response is at roundoff level (locally
/// constant, e.g. a single voxel) has no defined HFEN.
pub fn hfen(pred: &Volume, gt: &Volume, mask: Option<&[bool]>) -> Result<f64> {
    check_pair(pred, gt, mask)?;
    let kernel = LogKernel::new(LOG_WIDTH, LOG_SIGMA);
    let gm = masked(gt.values(), mask);
    let fp = kernel.apply(&masked(pred.values(), mask), pred.dims());
    let fg = kernel.apply(&gm, gt.dims());
    let inside = |i: &usize| mask.is_none_or(|m| m[*i]);
    let norm = |v: &[f64]| (0..v.len()).filter(inside).map(|i| v[i] * v[i]).sum::<f64>().sqrt();
    if norm(&fg) <= ROUNDOFF_FLOOR * norm(&gm) {
        return Err(Error::Division("LoG-filtered reference is constant inside the mask".into()));
    }
    norm_ratio_percent(&fp, &fg, mask, "LoG-filtered reference")
}
