use super::fft::signed_frequency;
use crate::error::{Error, Result};

/// Unit dipole response in k-space for B0 along z:
/// `D(k) = 1/3 − kz² / (kx² + ky² + kz²)`, with `D(0) = 0`.
///
/// Coefficients follow the unshifted FFT layout (DC at index 0, x fastest)
/// and physical frequencies `k_i = n_i / (N_i · Δx_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DipoleKernel {
    dims: [usize; 3],
    voxel_size_mm: [f64; 3],
    coefficients: Vec<f64>,
}

impl DipoleKernel {
    pub fn new(dims: [usize; 3], voxel_size_mm: [f64; 3]) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::shape(format!("kernel dims must be positive, got {dims:?}")));
        }
        if voxel_size_mm.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::config(format!("voxel size must be positive, got {voxel_size_mm:?}")));
        }
        let [nx, ny, nz] = dims;
        let freq = |axis: usize, i: usize| signed_frequency(i, dims[axis]) / (dims[axis] as f64 * voxel_size_mm[axis]);
        let mut coefficients = Vec::with_capacity(nx * ny * nz);
        for z in 0..nz {
            let kz2 = freq(2, z).powi(2);
            for y in 0..ny {
                let ky2 = freq(1, y).powi(2);
                for x in 0..nx {
                    let kx2 = freq(0, x).powi(2);
                    let k2 = kx2 + ky2 + kz2;
                    coefficients.push(if k2 == 0.0 { 0.0 } else { 1.0 / 3.0 - kz2 / k2 });
                }
            }
        }
        Ok(DipoleKernel { dims, voxel_size_mm, coefficients })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxel_size_mm(&self) -> [f64; 3] {
        self.voxel_size_mm
    }

    pub fn b0_direction(&self) -> [f64; 3] {
        [0.0, 0.0, 1.0]
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    /// Coefficient at spectrum index `(x, y, z)`.
    pub fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.coefficients[(z * self.dims[1] + y) * self.dims[0] + x]
    }
}

pub fn make_dipole_kernel(dims: [usize; 3], voxel_size_mm: [f64; 3]) -> Result<DipoleKernel> {
    DipoleKernel::new(dims, voxel_size_mm)
}
