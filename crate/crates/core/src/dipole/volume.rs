use crate::error::{Error, Result};

/// Real-space 3D scalar field in ppm, stored x-fastest, then y, then z.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    voxel_size_mm: [f64; 3],
    values: Vec<f64>,
    mask: Option<Vec<bool>>,
}

impl Volume {
    pub fn new(dims: [usize; 3], voxel_size_mm: [f64; 3], values: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::shape(format!("volume dims must be positive, got {dims:?}")));
        }
        if voxel_size_mm.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::config(format!("voxel size must be positive, got {voxel_size_mm:?}")));
        }
        let n: usize = dims.iter().product();
        if values.len() != n {
            return Err(Error::shape(format!("dims {dims:?} need {n} values, got {}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("volume contains non-finite values"));
        }
        Ok(Volume { dims, voxel_size_mm, values, mask: None })
    }

    pub fn zeros(dims: [usize; 3], voxel_size_mm: [f64; 3]) -> Result<Self> {
        let n = dims.iter().product();
        Self::new(dims, voxel_size_mm, vec![0.0; n])
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.values.len() {
            return Err(Error::shape("mask length does not match volume dims"));
        }
        self.mask = Some(mask);
        Ok(self)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxel_size_mm(&self) -> [f64; 3] {
        self.voxel_size_mm
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.values[self.index(x, y, z)]
    }

    /// Same geometry, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Volume::new(self.dims, self.voxel_size_mm, values)
    }

    /// Copies the box `[origin, origin + extent)`.
    pub fn crop(&self, origin: [usize; 3], extent: [usize; 3]) -> Result<Volume> {
        for a in 0..3 {
            if origin[a] + extent[a] > self.dims[a] {
                return Err(Error::shape(format!(
                    "crop {extent:?} at {origin:?} exceeds volume {:?}",
                    self.dims
                )));
            }
        }
        let mut out = Vec::with_capacity(extent.iter().product());
        for z in 0..extent[2] {
            for y in 0..extent[1] {
                let start = self.index(origin[0], origin[1] + y, origin[2] + z);
                out.extend_from_slice(&self.values[start..start + extent[0]]);
            }
        }
        Volume::new(extent, self.voxel_size_mm, out)
    }

    pub fn same_shape(&self, other: &Volume) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::shape(format!("volume dims {:?} and {:?} differ", self.dims, other.dims)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(Volume::new([2, 2, 2], [1.0; 3], vec![0.0; 7]), Err(Error::Shape(_))));
        assert!(matches!(Volume::new([2, 2, 0], [1.0; 3], vec![]), Err(Error::Shape(_))));
        assert!(matches!(Volume::new([1, 1, 1], [0.0, 1.0, 1.0], vec![0.0]), Err(Error::Config(_))));
        assert!(matches!(Volume::new([1, 1, 1], [1.0; 3], vec![f64::NAN]), Err(Error::Numeric(_))));
        let v = Volume::zeros([2, 2, 2], [1.0; 3]).unwrap();
        assert!(v.clone().with_mask(vec![true; 3]).is_err());
        assert!(v.with_mask(vec![true; 8]).is_ok());
    }

    #[test]
    fn crop_copies_box() {
        let vals: Vec<f64> = (0..4 * 3 * 2).map(f64::from).collect();
        let v = Volume::new([4, 3, 2], [1.0; 3], vals).unwrap();
        let c = v.crop([1, 1, 1], [2, 2, 1]).unwrap();
        assert_eq!(c.values(), &[v.get(1, 1, 1), v.get(2, 1, 1), v.get(1, 2, 1), v.get(2, 2, 1)]);
        assert!(v.crop([3, 0, 0], [2, 1, 1]).is_err());
    }
}
