//! 3D FFT over x-fastest volumes, built from 1D rustfft plans.
//!
//! Unnormalized forward transform; the inverse divides by the voxel count.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

pub(crate) struct Fft3 {
    dims: [usize; 3],
    forward: [Arc<dyn Fft<f64>>; 3],
    inverse: [Arc<dyn Fft<f64>>; 3],
}

impl Fft3 {
    pub fn new(dims: [usize; 3]) -> Self {
        let mut planner = FftPlanner::new();
        let forward = dims.map(|n| planner.plan_fft_forward(n));
        let inverse = dims.map(|n| planner.plan_fft_inverse(n));
        Fft3 { dims, forward, inverse }
    }

    pub fn forward(&self, data: &mut [Complex64]) {
        self.run(data, &self.forward);
    }

    pub fn inverse(&self, data: &mut [Complex64]) {
        self.run(data, &self.inverse);
        let scale = 1.0 / data.len() as f64;
        for v in data.iter_mut() {
            *v *= scale;
        }
    }

    fn run(&self, data: &mut [Complex64], plans: &[Arc<dyn Fft<f64>>; 3]) {
        let [nx, ny, nz] = self.dims;
        assert_eq!(data.len(), nx * ny * nz);
        let scratch_len = plans.iter().map(|p| p.get_inplace_scratch_len()).max().unwrap_or(0);
        let mut scratch = vec![Complex64::default(); scratch_len];

        for row in data.chunks_exact_mut(nx) {
            plans[0].process_with_scratch(row, &mut scratch);
        }

        let mut line = vec![Complex64::default(); ny.max(nz)];
        for z in 0..nz {
            for x in 0..nx {
                for y in 0..ny {
                    line[y] = data[(z * ny + y) * nx + x];
                }
                plans[1].process_with_scratch(&mut line[..ny], &mut scratch);
                for y in 0..ny {
                    data[(z * ny + y) * nx + x] = line[y];
                }
            }
        }

        for y in 0..ny {
            for x in 0..nx {
                for z in 0..nz {
                    line[z] = data[(z * ny + y) * nx + x];
                }
                plans[2].process_with_scratch(&mut line[..nz], &mut scratch);
                for z in 0..nz {
                    data[(z * ny + y) * nx + x] = line[z];
                }
            }
        }
    }
}

/// Signed frequency index of bin `i` in an `n`-point unshifted spectrum
/// (0, 1, …, ⌈n/2⌉−1, −⌊n/2⌋, …, −1).
pub fn signed_frequency(i: usize, n: usize) -> f64 {
    if i < n.div_ceil(2) {
        i as f64
    } else {
        i as f64 - n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_recovers_input() {
        let dims = [4, 6, 5];
        let n = 4 * 6 * 5;
        let orig: Vec<Complex64> = (0..n).map(|i| Complex64::new((i as f64).sin(), (i as f64 * 0.3).cos())).collect();
        let mut data = orig.clone();
        let f = Fft3::new(dims);
        f.forward(&mut data);
        f.inverse(&mut data);
        for (a, b) in data.iter().zip(&orig) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn matches_direct_dft_at_one_bin() {
        let dims = [3, 4, 5];
        let vals: Vec<f64> = (0..60).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let mut data: Vec<Complex64> = vals.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        Fft3::new(dims).forward(&mut data);
        let (kx, ky, kz) = (1usize, 3usize, 2usize);
        let mut direct = Complex64::default();
        for z in 0..5 {
            for y in 0..4 {
                for x in 0..3 {
                    let phase = -2.0
                        * std::f64::consts::PI
                        * ((kx * x) as f64 / 3.0 + (ky * y) as f64 / 4.0 + (kz * z) as f64 / 5.0);
                    direct += vals[(z * 4 + y) * 3 + x] * Complex64::from_polar(1.0, phase);
                }
            }
        }
        assert!((data[(kz * 4 + ky) * 3 + kx] - direct).norm() < 1e-10);
    }

    #[test]
    fn signed_frequency_layout() {
        let even: Vec<f64> = (0..4).map(|i| signed_frequency(i, 4)).collect();
        assert_eq!(even, vec![0.0, 1.0, -2.0, -1.0]);
        let odd: Vec<f64> = (0..5).map(|i| signed_frequency(i, 5)).collect();
        assert_eq!(odd, vec![0.0, 1.0, 2.0, -2.0, -1.0]);
    }
}
