use super::network::check_extents;
use super::NetworkConfig;
use crate::error::Result;

/// Analytic operation count of one eval-mode forward pass.
///
/// Convolutions count one multiply-accumulate per weight tap plus one per
/// output for the bias. Batch norm counts 2 per element, ReLU and sigmoid 1,
/// the recurrent gating 4, and max pooling 8 comparisons per output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopCount {
    /// Cost independent of T (the fusion bias).
    pub base: u64,
    /// Cost of one U-net iteration plus its fusion input channel.
    pub per_iteration: u64,
    pub iterations: u64,
}

impl FlopCount {
    pub fn total(&self) -> u64 {
        self.base + self.iterations * self.per_iteration
    }
}

fn conv(vox: u64, c_in: u64, c_out: u64, k: u64) -> u64 {
    vox * c_out * (c_in * k * k * k + 1)
}

fn stage(vox: u64, c_in: u64, c_out: u64) -> u64 {
    conv(vox, c_in, c_out, 3) + 3 * vox * c_out
}

fn block(vox: u64, c_in: u64, c_out: u64) -> u64 {
    stage(vox, c_in, c_out) + stage(vox, c_out, c_out)
}

fn up(vox_out: u64, c_in: u64, c_out: u64) -> u64 {
    // Each output voxel is touched by exactly one tap per input channel.
    vox_out * c_out * (c_in + 1)
}

/// Counts operations for an input of spatial `dims` (x, y, z).
pub fn count_flops(cfg: &NetworkConfig, dims: [usize; 3]) -> Result<FlopCount> {
    cfg.validate()?;
    check_extents(dims)?;
    let v0: u64 = dims.iter().map(|&d| d as u64).product();
    let vox = [v0, v0 / 8, v0 / 64, v0 / 512];
    let c = |l: usize| cfg.channels(l) as u64;
    let rc = |l: usize| if cfg.reverse_concat { c(l) } else { 0 };

    let mut it = 0;
    it += block(vox[0], 1 + rc(0), c(0)) + 8 * vox[1] * c(0);
    it += block(vox[1], c(0) + rc(1), c(1)) + 8 * vox[2] * c(1);
    it += block(vox[2], c(1) + rc(2), c(2)) + 8 * vox[3] * c(2);
    it += if cfg.recurrent_module {
        let conv_a = conv(vox[3], c(2), c(2), 3) + vox[3] * c(2);
        let path = stage(vox[3], c(2), c(2));
        conv_a + 2 * path + 4 * vox[3] * c(2)
    } else {
        block(vox[3], c(2), c(2))
    };
    it += up(vox[2], c(2), c(2)) + block(vox[2], 2 * c(2), c(2));
    it += up(vox[1], c(2), c(1)) + block(vox[1], 2 * c(1), c(1));
    it += up(vox[0], c(1), c(0)) + block(vox[0], 2 * c(0), c(0));
    it += conv(vox[0], c(0), 1, 1);
    // One fusion input channel per iteration.
    it += vox[0];

    Ok(FlopCount { base: vox[0], per_iteration: it, iterations: cfg.iterations as u64 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn total(t: usize, c: usize, d: usize) -> u64 {
        let cfg = NetworkConfig { iterations: t, base_channels: c, ..Default::default() };
        count_flops(&cfg, [d; 3]).unwrap().total()
    }

    #[test]
    fn affine_in_iterations() {
        let d1 = total(2, 16, 64) - total(1, 16, 64);
        let d2 = total(3, 16, 64) - total(2, 16, 64);
        let d3 = total(4, 16, 64) - total(3, 16, 64);
        assert_eq!(d1, d2);
        assert_eq!(d2, d3);
    }

    #[test]
    fn minimum_input_is_positive() {
        assert!(total(1, 1, 8) > 0);
    }

    #[test]
    fn odd_extent_rejected() {
        assert!(count_flops(&NetworkConfig::default(), [12, 16, 16]).is_err());
    }
}
