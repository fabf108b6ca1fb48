use std::path::Path;

use super::write_file;
use crate::dipole::Volume;
use crate::error::{Error, Result};

/// 16-bit grayscale slice, rows top to bottom.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SliceImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u16>,
}

/// Maps `x` linearly from `[lo, hi]` to `[0, 65535]`, rounding half up and
/// clamping.
pub fn window_value(x: f64, lo: f64, hi: f64) -> u16 {
    let t = (x - lo) / (hi - lo) * 65535.0;
    (t + 0.5).floor().clamp(0.0, 65535.0) as u16
}

/// Extracts the plane `axis = index` (0 = x, 1 = y, 2 = z). The image's
/// columns run along the lower remaining axis and rows along the higher one;
/// row 0 is coordinate 0.
pub fn export_slice(v: &Volume, axis: usize, index: usize, window: (f64, f64)) -> Result<SliceImage> {
    let (lo, hi) = window;
    if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::config(format!("window [{lo}, {hi}] must satisfy lo < hi")));
    }
    if axis > 2 {
        return Err(Error::usage(format!("axis {axis} must be 0 (x), 1 (y) or 2 (z)")));
    }
    let dims = v.dims();
    if index >= dims[axis] {
        return Err(Error::usage(format!("slice index {index} outside 0..{} on axis {axis}", dims[axis])));
    }
    let (ca, ra) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let (width, height) = (dims[ca], dims[ra]);
    let mut pixels = Vec::with_capacity(width * height);
    for r in 0..height {
        for c in 0..width {
            let mut p = [0usize; 3];
            p[axis] = index;
            p[ca] = c;
            p[ra] = r;
            pixels.push(window_value(v.get(p[0], p[1], p[2]), lo, hi));
        }
    }
    Ok(SliceImage { width, height, pixels })
}

/// Binary PGM (P5) with maxval 65535; samples are big-endian as the format
/// requires.
pub fn write_pgm(path: &Path, img: &SliceImage) -> Result<()> {
    let mut out = format!("P5\n{} {}\n65535\n", img.width, img.height).into_bytes();
    for &p in &img.pixels {
        out.extend_from_slice(&p.to_be_bytes());
    }
    write_file(path, &out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_volume_is_mid_gray() {
        let v = Volume::new([3, 3, 3], [1.0; 3], vec![0.25; 27]).unwrap();
        let img = export_slice(&v, 2, 1, (-0.75, 1.25)).unwrap();
        assert!(img.pixels.iter().all(|&p| p == 32768));
    }

    #[test]
    fn rounding_and_clamping() {
        assert_eq!(window_value(0.0, 0.0, 1.0), 0);
        assert_eq!(window_value(1.0, 0.0, 1.0), 65535);
        assert_eq!(window_value(-3.0, 0.0, 1.0), 0);
        assert_eq!(window_value(9.0, 0.0, 1.0), 65535);
        assert_eq!(window_value(0.5, 0.0, 1.0), 32768);
    }

    #[test]
    fn invalid_requests() {
        let v = Volume::zeros([4, 3, 2], [1.0; 3]).unwrap();
        assert!(matches!(export_slice(&v, 2, 0, (0.0, 0.0)), Err(Error::Config(_))));
        assert!(matches!(export_slice(&v, 2, 2, (0.0, 1.0)), Err(Error::Usage(_))));
        assert!(matches!(export_slice(&v, 3, 0, (0.0, 1.0)), Err(Error::Usage(_))));
    }

    #[test]
    fn plane_orientation() {
        let v = Volume::new([4, 3, 2], [1.0; 3], (0..24).map(f64::from).collect()).unwrap();
        let img = export_slice(&v, 0, 1, (0.0, 65535.0)).unwrap();
        assert_eq!((img.width, img.height), (3, 2));
        assert_eq!(img.pixels[4] as f64, v.get(1, 1, 1));
        let img = export_slice(&v, 2, 1, (0.0, 65535.0)).unwrap();
        assert_eq!((img.width, img.height), (4, 3));
        assert_eq!(img.pixels[5] as f64, v.get(1, 1, 1));
    }
}
