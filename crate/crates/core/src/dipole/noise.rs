use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Volume;
use crate::error::{Error, Result};

/// Additive gaussian noise with a per-call σ drawn uniformly from
/// `sigma_range_ppm`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    pub sigma_range_ppm: [f64; 2],
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { sigma_range_ppm: [0.0, 0.01], seed: 0 }
    }
}

impl NoiseConfig {
    pub fn disabled() -> Self {
        NoiseConfig { sigma_range_ppm: [0.0, 0.0], seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.sigma_range_ppm;
        if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::config(format!("noise sigma range [{lo}, {hi}] must satisfy 0 ≤ lo ≤ hi")));
        }
        Ok(())
    }

    pub fn is_disabled(&self) -> bool {
        self.sigma_range_ppm[1] == 0.0
    }

    fn sample_sigma<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let [lo, hi] = self.sigma_range_ppm;
        if lo == hi {
            lo
        } else {
            rng.random_range(lo..=hi)
        }
    }
}

/// Adds noise to a slice in place and returns the σ used.
pub fn add_noise_in_place<R: Rng + ?Sized>(values: &mut [f64], cfg: &NoiseConfig, rng: &mut R) -> Result<f64> {
    cfg.validate()?;
    let sigma = cfg.sample_sigma(rng);
    if sigma == 0.0 {
        return Ok(0.0);
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::config(e.to_string()))?;
    for v in values.iter_mut() {
        *v += normal.sample(rng);
    }
    Ok(sigma)
}

pub fn add_noise<R: Rng + ?Sized>(field: &Volume, cfg: &NoiseConfig, rng: &mut R) -> Result<Volume> {
    let mut out = field.clone();
    add_noise_in_place(out.values_mut(), cfg, rng)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_sigma_is_identity() {
        let v = Volume::new([2, 2, 2], [1.0; 3], (0..8).map(f64::from).collect()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(add_noise(&v, &NoiseConfig::disabled(), &mut rng).unwrap(), v);
    }

    #[test]
    fn fixed_sigma_matches_sample_std() {
        let v = Volume::zeros([100, 100, 100], [1.0; 3]).unwrap();
        let cfg = NoiseConfig { sigma_range_ppm: [0.01, 0.01], seed: 0 };
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = add_noise(&v, &cfg, &mut rng).unwrap();
        let len = n.len() as f64;
        let mean = n.values().iter().sum::<f64>() / len;
        let std = (n.values().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / len).sqrt();
        assert!((std - 0.01).abs() < 0.0005, "std {std}");
    }

    #[test]
    fn same_seed_same_noise() {
        let v = Volume::zeros([8, 8, 8], [1.0; 3]).unwrap();
        let cfg = NoiseConfig::default();
        let a = add_noise(&v, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = add_noise(&v, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_range_rejected() {
        let cfg = NoiseConfig { sigma_range_ppm: [0.02, 0.01], seed: 0 };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = NoiseConfig { sigma_range_ppm: [-0.01, 0.01], seed: 0 };
        assert!(cfg.validate().is_err());
    }
}
