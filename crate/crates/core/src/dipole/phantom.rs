//! Random geometric susceptibility phantoms for training-pair synthesis.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Volume;
use crate::error::{Error, Result};
use crate::kv::KeyValues;

/// Keys read by `PhantomSpec::from_kv`.
pub const PHANTOM_KEYS: &[&str] =
    &["dims", "voxel_size_mm", "spheres", "cuboids", "cylinders", "size_range_vox", "chi_range_ppm", "seed"];

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub voxel_size_mm: [f64; 3],
    pub spheres: usize,
    pub cuboids: usize,
    pub cylinders: usize,
    /// Radius / half-extent range in voxels.
    pub size_range_vox: [f64; 2],
    pub chi_range_ppm: [f64; 2],
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [64, 64, 64],
            voxel_size_mm: [1.0; 3],
            spheres: 12,
            cuboids: 8,
            cylinders: 6,
            size_range_vox: [2.0, 10.0],
            chi_range_ppm: [-0.1, 0.2],
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.insert_list("dims", &self.dims);
        kv.insert_list("voxel_size_mm", &self.voxel_size_mm);
        kv.insert("spheres", self.spheres);
        kv.insert("cuboids", self.cuboids);
        kv.insert("cylinders", self.cylinders);
        kv.insert_list("size_range_vox", &self.size_range_vox);
        kv.insert_list("chi_range_ppm", &self.chi_range_ppm);
        kv.insert("seed", self.seed);
        kv
    }

    /// Reads the phantom keys of `kv`, falling back to defaults. Other keys
    /// are ignored.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        let spec = PhantomSpec {
            dims: kv.array("dims")?.unwrap_or(d.dims),
            voxel_size_mm: kv.array("voxel_size_mm")?.unwrap_or(d.voxel_size_mm),
            spheres: kv.parsed_or("spheres", d.spheres)?,
            cuboids: kv.parsed_or("cuboids", d.cuboids)?,
            cylinders: kv.parsed_or("cylinders", d.cylinders)?,
            size_range_vox: kv.array("size_range_vox")?.unwrap_or(d.size_range_vox),
            chi_range_ppm: kv.array("chi_range_ppm")?.unwrap_or(d.chi_range_ppm),
            seed: kv.parsed_or("seed", d.seed)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::config("phantom dims must be positive"));
        }
        if self.voxel_size_mm.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::config("phantom voxel size must be positive"));
        }
        let [lo, hi] = self.size_range_vox;
        if !(lo > 0.0 && lo < hi && hi.is_finite()) {
            return Err(Error::config(format!("size range [{lo}, {hi}] is degenerate")));
        }
        let [lo, hi] = self.chi_range_ppm;
        if !(lo < hi && lo.is_finite() && hi.is_finite()) {
            return Err(Error::config(format!("susceptibility range [{lo}, {hi}] is degenerate")));
        }
        Ok(())
    }

    /// Draws every source of the phantom in paint order.
    pub fn sample_sources(&self) -> Result<Vec<Source>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let kinds = std::iter::repeat_n(0u8, self.spheres)
            .chain(std::iter::repeat_n(1u8, self.cuboids))
            .chain(std::iter::repeat_n(2u8, self.cylinders));
        let mut out = Vec::with_capacity(self.spheres + self.cuboids + self.cylinders);
        for kind in kinds {
            let center = self.dims.map(|d| rng.random_range(0.0..d as f64));
            let value = rng.random_range(self.chi_range_ppm[0]..self.chi_range_ppm[1]);
            let [lo, hi] = self.size_range_vox;
            let shape = match kind {
                0 => Shape::Sphere { radius: rng.random_range(lo..hi) },
                1 => Shape::Cuboid {
                    half_extent: [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)],
                },
                _ => Shape::Cylinder {
                    axis: rng.random_range(0..3),
                    radius: rng.random_range(lo..hi),
                    half_length: rng.random_range(lo..hi),
                },
            };
            out.push(Source { center, value, shape });
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Sphere { radius: f64 },
    Cuboid { half_extent: [f64; 3] },
    /// Circular cylinder aligned with `axis` (0 = x, 1 = y, 2 = z).
    Cylinder { axis: usize, radius: f64, half_length: f64 },
}

/// One uniform-susceptibility inclusion, in voxel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Source {
    pub center: [f64; 3],
    pub value: f64,
    pub shape: Shape,
}

impl Source {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        match self.shape {
            Shape::Sphere { radius } => d.iter().map(|v| v * v).sum::<f64>() <= radius * radius,
            Shape::Cuboid { half_extent } => d.iter().zip(half_extent).all(|(v, h)| v.abs() <= h),
            Shape::Cylinder { axis, radius, half_length } => {
                let radial: f64 = (0..3).filter(|&a| a != axis).map(|a| d[a] * d[a]).sum();
                radial <= radius * radius && d[axis].abs() <= half_length
            }
        }
    }

    fn bounds(&self, dims: [usize; 3]) -> [(usize, usize); 3] {
        let reach = match self.shape {
            Shape::Sphere { radius } => [radius; 3],
            Shape::Cuboid { half_extent } => half_extent,
            Shape::Cylinder { axis, radius, half_length } => {
                let mut r = [radius; 3];
                r[axis] = half_length;
                r
            }
        };
        std::array::from_fn(|a| {
            let lo = (self.center[a] - reach[a]).floor().max(0.0) as usize;
            let hi = ((self.center[a] + reach[a]).ceil() as usize + 1).min(dims[a]);
            (lo.min(hi), hi)
        })
    }
}

/// Paints `sources` in order onto `volume`, later sources overwriting.
pub fn paint(volume: &mut Volume, sources: &[Source]) {
    let dims = volume.dims();
    for s in sources {
        let [(x0, x1), (y0, y1), (z0, z1)] = s.bounds(dims);
        for z in z0..z1 {
            for y in y0..y1 {
                for x in x0..x1 {
                    if s.contains([x as f64, y as f64, z as f64]) {
                        let i = volume.index(x, y, z);
                        volume.values_mut()[i] = s.value;
                    }
                }
            }
        }
    }
}

/// Ground-truth susceptibility: background 0, deterministic in `spec.seed`.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Volume> {
    let sources = spec.sample_sources()?;
    let mut vol = Volume::zeros(spec.dims, spec.voxel_size_mm)?;
    paint(&mut vol, &sources);
    Ok(vol)
}
