use num_complex::Complex64;

use super::fft::Fft3;
use super::{DipoleKernel, Volume};
use crate::error::{Error, Result};

/// Largest tolerated ratio ‖imag‖/‖real‖ after the inverse transform.
const MAX_IMAG_RESIDUE: f64 = 1e-6;

/// Multiplies the spectrum of `values` by `multiplier` and returns the real
/// part together with the relative imaginary residue it discarded.
pub fn apply_spectral_multiplier(values: &[f64], dims: [usize; 3], multiplier: &[f64]) -> (Vec<f64>, f64) {
    let fft = Fft3::new(dims);
    let mut buf: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft.forward(&mut buf);
    for (c, &m) in buf.iter_mut().zip(multiplier) {
        *c *= m;
    }
    fft.inverse(&mut buf);
    let re_norm: f64 = buf.iter().map(|c| c.re * c.re).sum::<f64>().sqrt();
    let im_norm: f64 = buf.iter().map(|c| c.im * c.im).sum::<f64>().sqrt();
    let residue = if re_norm > 0.0 { im_norm / re_norm } else { im_norm };
    (buf.into_iter().map(|c| c.re).collect(), residue)
}

fn check_real(residue: f64) -> Result<()> {
    if residue > MAX_IMAG_RESIDUE {
        return Err(Error::numeric(format!("imaginary residue {residue:e} after inverse FFT")));
    }
    Ok(())
}

/// Local field `φ = F⁻¹[D · Fχ]` on the periodic grid of `chi`.
pub fn forward_field(chi: &Volume, kernel: &DipoleKernel) -> Result<Volume> {
    forward_field_with_residue(chi, kernel).map(|(v, _)| v)
}

/// As [`forward_field`], also returning the relative imaginary residue.
pub fn forward_field_with_residue(chi: &Volume, kernel: &DipoleKernel) -> Result<(Volume, f64)> {
    if chi.dims() != kernel.dims() {
        return Err(Error::shape(format!(
            "chi dims {:?} do not match kernel dims {:?}",
            chi.dims(),
            kernel.dims()
        )));
    }
    let (field, residue) = apply_spectral_multiplier(chi.values(), chi.dims(), kernel.coefficients());
    check_real(residue)?;
    let mut out = chi.with_values(field)?;
    if let Some(mask) = chi.mask() {
        out = out.with_mask(mask.to_vec())?;
    }
    Ok((out, residue))
}

/// Forward field computed on a zero-padded grid `pad_factor` times larger
/// per axis, cropped back to the input grid. Suppresses periodic images of
/// the source at the cost of a larger transform.
pub fn forward_field_padded(chi: &Volume, pad_factor: usize) -> Result<Volume> {
    if pad_factor == 0 {
        return Err(Error::config("pad factor must be at least 1"));
    }
    let [nx, ny, nz] = chi.dims();
    let big = [nx * pad_factor, ny * pad_factor, nz * pad_factor];
    let mut values = vec![0.0; big.iter().product()];
    for z in 0..nz {
        for y in 0..ny {
            let src = chi.index(0, y, z);
            let dst = (z * big[1] + y) * big[0];
            values[dst..dst + nx].copy_from_slice(&chi.values()[src..src + nx]);
        }
    }
    let padded = Volume::new(big, chi.voxel_size_mm(), values)?;
    let kernel = DipoleKernel::new(big, chi.voxel_size_mm())?;
    forward_field(&padded, &kernel)?.crop([0, 0, 0], chi.dims())
}

/// Thresholded k-space division: `χ̂ = F⁻¹[Fφ / D̃]` with
/// `D̃ = D` where `|D| ≥ threshold`, else `sign(D)·threshold` (sign(0) = +1).
pub fn tkd_invert(field: &Volume, kernel: &DipoleKernel, threshold: f64) -> Result<Volume> {
    if !(threshold > 0.0 && threshold < 2.0 / 3.0) {
        return Err(Error::config(format!("TKD threshold {threshold} outside (0, 2/3)")));
    }
    if field.dims() != kernel.dims() {
        return Err(Error::shape(format!(
            "field dims {:?} do not match kernel dims {:?}",
            field.dims(),
            kernel.dims()
        )));
    }
    let inverse: Vec<f64> = kernel
        .coefficients()
        .iter()
        .map(|&d| {
            let clamped = if d.abs() >= threshold {
                d
            } else if d < 0.0 {
                -threshold
            } else {
                threshold
            };
            1.0 / clamped
        })
        .collect();
    let (chi, residue) = apply_spectral_multiplier(field.values(), field.dims(), &inverse);
    check_real(residue)?;
    field.with_values(chi)
}

/// Closed-form field of a uniformly magnetized sphere: zero inside, and
/// `Δχ · R³/3 · (3cos²θ − 1) / r³` outside, θ measured from B0 (z).
///
/// `center` is in voxel coordinates; distances are in mm.
pub fn analytic_sphere_field(
    center: [f64; 3],
    radius_mm: f64,
    delta_chi_ppm: f64,
    dims: [usize; 3],
    voxel_size_mm: [f64; 3],
) -> Result<Volume> {
    if !(radius_mm > 0.0) {
        return Err(Error::Geometry(format!("sphere radius must be positive, got {radius_mm}")));
    }
    for a in 0..3 {
        let r_vox = radius_mm / voxel_size_mm[a];
        if center[a] - r_vox < 0.0 || center[a] + r_vox > (dims[a] - 1) as f64 {
            return Err(Error::Geometry(format!(
                "sphere of radius {radius_mm} mm at {center:?} leaves the {dims:?} grid"
            )));
        }
    }
    let mut out = Volume::zeros(dims, voxel_size_mm)?;
    let r3 = radius_mm.powi(3);
    for z in 0..dims[2] {
        let dz = (z as f64 - center[2]) * voxel_size_mm[2];
        for y in 0..dims[1] {
            let dy = (y as f64 - center[1]) * voxel_size_mm[1];
            for x in 0..dims[0] {
                let dx = (x as f64 - center[0]) * voxel_size_mm[0];
                let r2 = dx * dx + dy * dy + dz * dz;
                let r = r2.sqrt();
                if r <= radius_mm {
                    continue;
                }
                let cos2 = dz * dz / r2;
                let i = out.index(x, y, z);
                out.values_mut()[i] = delta_chi_ppm * r3 / 3.0 * (3.0 * cos2 - 1.0) / (r2 * r);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_chi_gives_zero_field() {
        let chi = Volume::new([8, 6, 4], [1.0; 3], vec![0.37; 192]).unwrap();
        let k = DipoleKernel::new(chi.dims(), chi.voxel_size_mm()).unwrap();
        let f = forward_field(&chi, &k).unwrap();
        assert!(f.values().iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn dims_mismatch_is_shape_error() {
        let chi = Volume::zeros([8, 8, 8], [1.0; 3]).unwrap();
        let k = DipoleKernel::new([8, 8, 4], [1.0; 3]).unwrap();
        assert!(matches!(forward_field(&chi, &k), Err(Error::Shape(_))));
        assert!(matches!(tkd_invert(&chi, &k, 0.2), Err(Error::Shape(_))));
    }

    #[test]
    fn tkd_threshold_range() {
        let v = Volume::zeros([4, 4, 4], [1.0; 3]).unwrap();
        let k = DipoleKernel::new([4, 4, 4], [1.0; 3]).unwrap();
        for t in [0.0, -0.1, 2.0 / 3.0, 1.0, f64::NAN] {
            assert!(matches!(tkd_invert(&v, &k, t), Err(Error::Config(_))));
        }
        let z = tkd_invert(&v, &k, 0.2).unwrap();
        assert!(z.values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn analytic_sphere_angular_cases() {
        let (r, dchi) = (2.0, 0.5);
        let f = analytic_sphere_field([8.0, 8.0, 8.0], r, dchi, [17, 17, 17], [1.0; 3]).unwrap();
        let on_axis = f.get(8, 8, 14);
        assert!((on_axis - 2.0 * dchi * r.powi(3) / (3.0 * 216.0)).abs() < 1e-15);
        let equator = f.get(14, 8, 8);
        assert!((equator + dchi * r.powi(3) / (3.0 * 216.0)).abs() < 1e-15);
        assert_eq!(f.get(8, 8, 8), 0.0);
        assert_eq!(f.get(9, 8, 8), 0.0);
        // (3, 3, 3) offset: dx² + dy² = 2dz², so 3cos²θ = 1.
        assert!(f.get(11, 11, 11).abs() < 1e-15);
    }

    #[test]
    fn analytic_sphere_out_of_bounds() {
        assert!(matches!(
            analytic_sphere_field([1.0, 8.0, 8.0], 3.0, 1.0, [16, 16, 16], [1.0; 3]),
            Err(Error::Geometry(_))
        ));
    }
}
