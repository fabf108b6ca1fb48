//! Separable 3D filtering with replicate (clamp-to-edge) boundaries.

/// Correlates `data` with the 1D `taps` along `axis` (0 = x). The taps are
/// centered; out-of-range samples take the nearest edge value.
pub(crate) fn filter_axis(data: &[f64], dims: [usize; 3], axis: usize, taps: &[f64]) -> Vec<f64> {
    let [nx, ny, _] = dims;
    let stride = [1, nx, nx * ny][axis];
    let n = dims[axis] as isize;
    let half = (taps.len() / 2) as isize;
    let mut out = vec![0.0; data.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let pos = ((i / stride) % dims[axis]) as isize;
        let base = i - pos as usize * stride;
        let mut acc = 0.0;
        for (k, &w) in taps.iter().enumerate() {
            let p = (pos + k as isize - half).clamp(0, n - 1) as usize;
            acc += w * data[base + p * stride];
        }
        *o = acc;
    }
    out
}

/// Applies `taps[0]` along x, `taps[1]` along y and `taps[2]` along z.
pub(crate) fn separable(data: &[f64], dims: [usize; 3], taps: [&[f64]; 3]) -> Vec<f64> {
    let a = filter_axis(data, dims, 0, taps[0]);
    let b = filter_axis(&a, dims, 1, taps[1]);
    filter_axis(&b, dims, 2, taps[2])
}

pub(crate) fn gaussian_taps(width: usize, sigma: f64) -> Vec<f64> {
    let half = (width / 2) as f64;
    (0..width).map(|i| (-(i as f64 - half).powi(2) / (2.0 * sigma * sigma)).exp()).collect()
}
