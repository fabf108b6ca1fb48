use super::Volume;
use crate::error::{Error, Result};

/// Co-located training pair: network input (field) and label (χ).
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    pub origin: [usize; 3],
    pub field: Volume,
    pub chi: Volume,
}

/// Number of patch anchors along one axis.
pub fn anchors_per_axis(dim: usize, patch: usize, stride: usize) -> usize {
    if patch > dim || stride == 0 {
        0
    } else {
        (dim - patch) / stride + 1
    }
}

/// Slides a `patch` window over both volumes with `stride`, keeping only
/// windows that fit entirely inside. Anchors are visited x fastest.
pub fn extract_patches(chi: &Volume, field: &Volume, patch: [usize; 3], stride: [usize; 3]) -> Result<Vec<PatchPair>> {
    chi.same_shape(field)?;
    let dims = chi.dims();
    if patch.contains(&0) {
        return Err(Error::shape("patch extents must be positive"));
    }
    if stride.contains(&0) {
        return Err(Error::config("patch stride must be positive"));
    }
    if (0..3).any(|a| patch[a] > dims[a]) {
        return Err(Error::shape(format!("patch {patch:?} larger than volume {dims:?}")));
    }
    let counts: [usize; 3] = std::array::from_fn(|a| anchors_per_axis(dims[a], patch[a], stride[a]));
    let mut out = Vec::with_capacity(counts.iter().product());
    for k in 0..counts[2] {
        for j in 0..counts[1] {
            for i in 0..counts[0] {
                let origin = [i * stride[0], j * stride[1], k * stride[2]];
                out.push(PatchPair { origin, field: field.crop(origin, patch)?, chi: chi.crop(origin, patch)? });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(dims: [usize; 3]) -> Volume {
        let n = dims.iter().product::<usize>();
        Volume::new(dims, [1.0; 3], (0..n).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn whole_volume_patch_gives_one_pair() {
        let v = ramp([8, 8, 8]);
        for s in [1, 3, 100] {
            assert_eq!(extract_patches(&v, &v, [8, 8, 8], [s, s, s]).unwrap().len(), 1);
        }
    }

    #[test]
    fn anchor_count_formula() {
        // (144−64)/24+1 = 4, (196−64)/36+1 = 4, (128−64)/20+1 = 4
        assert_eq!(anchors_per_axis(144, 64, 24), 4);
        assert_eq!(anchors_per_axis(196, 64, 36), 4);
        assert_eq!(anchors_per_axis(128, 64, 20), 4);
        let v = ramp([20, 13, 9]);
        let pairs = extract_patches(&v, &v, [8, 4, 4], [4, 3, 2]).unwrap();
        assert_eq!(pairs.len(), 4 * 4 * 3);
    }

    #[test]
    fn patch_voxels_match_source() {
        let chi = ramp([10, 9, 7]);
        let field = chi.with_values(chi.values().iter().map(|v| -v).collect()).unwrap();
        for p in extract_patches(&chi, &field, [4, 3, 5], [3, 2, 2]).unwrap() {
            let [ox, oy, oz] = p.origin;
            for z in 0..5 {
                for y in 0..3 {
                    for x in 0..4 {
                        assert_eq!(p.chi.get(x, y, z), chi.get(ox + x, oy + y, oz + z));
                        assert_eq!(p.field.get(x, y, z), field.get(ox + x, oy + y, oz + z));
                    }
                }
            }
        }
    }

    #[test]
    fn oversized_patch_is_shape_error() {
        let v = ramp([8, 8, 8]);
        assert!(matches!(extract_patches(&v, &v, [9, 8, 8], [1, 1, 1]), Err(Error::Shape(_))));
    }
}
