use super::filter::{gaussian_taps, separable};
use super::{check_pair, masked};
use crate::dipole::Volume;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimConfig {
    pub k1: f64,
    pub k2: f64,
    pub window: usize,
    pub sigma: f64,
    /// Dynamic range L; `None` takes max − min of the reference.
    pub data_range: Option<f64>,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig { k1: 0.01, k2: 0.03, window: 11, sigma: 1.5, data_range: None }
    }
}

/// Mean structural similarity with the default configuration.
pub fn ssim(pred: &Volume, gt: &Volume) -> Result<f64> {
    ssim_with(pred, gt, None, &SsimConfig::default())
}

/// Mean of the local SSIM map, computed with a normalized 3D gaussian
/// window and replicate boundaries. With a mask, outside voxels are zeroed
/// before filtering and the map is averaged over the mask only.
pub fn ssim_with(pred: &Volume, gt: &Volume, mask: Option<&[bool]>, cfg: &SsimConfig) -> Result<f64> {
    check_pair(pred, gt, mask)?;
    if cfg.window == 0 || cfg.window.is_multiple_of(2) || !(cfg.sigma > 0.0) {
        return Err(Error::config("SSIM window must be odd and sigma positive"));
    }
    let dims = gt.dims();
    let x = masked(pred.values(), mask);
    let y = masked(gt.values(), mask);
    let range = match cfg.data_range {
        Some(r) => r,
        None => {
            let inside = |i: &usize| mask.is_none_or(|m| m[*i]);
            let vals = (0..y.len()).filter(inside).map(|i| y[i]);
            let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            if lo.is_finite() { hi - lo } else { 0.0 }
        }
    };
    let c1 = (cfg.k1 * range).powi(2);
    let c2 = (cfg.k2 * range).powi(2);

    let mut w = gaussian_taps(cfg.window, cfg.sigma);
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    let blur = |d: &[f64]| separable(d, dims, [&w, &w, &w]);
    let mu_x = blur(&x);
    let mu_y = blur(&y);
    let xx = blur(&x.iter().map(|v| v * v).collect::<Vec<_>>());
    let yy = blur(&y.iter().map(|v| v * v).collect::<Vec<_>>());
    let xy = blur(&x.iter().zip(&y).map(|(a, b)| a * b).collect::<Vec<_>>());

    let mut acc = 0.0;
    let mut count = 0usize;
    for i in 0..x.len() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        let (mx, my) = (mu_x[i], mu_y[i]);
        let vx = xx[i] - mx * mx;
        let vy = yy[i] - my * my;
        let cov = xy[i] - mx * my;
        let num = (2.0 * mx * my + c1) * (2.0 * cov + c2);
        let den = (mx * mx + my * my + c1) * (vx + vy + c2);
        acc += if den == 0.0 { 1.0 } else { num / den };
        count += 1;
    }
    if count == 0 {
        return Err(Error::Division("SSIM mask selects no voxels".into()));
    }
    Ok(acc / count as f64)
}
