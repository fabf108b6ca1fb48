//! Raw 3D kernels over `N×C×D×H×W` slices.
//!
//! Parallel work is split so that each output chunk is owned by one task and
//! reduced in a fixed loop order.

use rayon::prelude::*;

use super::Real;

#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv3dGeom {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
    pub k: usize,
    pub pad: usize,
}

impl Conv3dGeom {
    pub fn new(n: usize, c_in: usize, c_out: usize, in_dims: [usize; 3], k: usize, pad: usize) -> Self {
        let out_dims = in_dims.map(|d| d + 2 * pad + 1 - k);
        Conv3dGeom { n, c_in, c_out, in_dims, out_dims, k, pad }
    }

    fn in_vox(&self) -> usize {
        self.in_dims.iter().product()
    }

    fn out_vox(&self) -> usize {
        self.out_dims.iter().product()
    }

    /// Output index range `[lo, hi)` along one axis for kernel tap `kk`.
    fn range(&self, axis: usize, kk: usize) -> (usize, usize) {
        let pad = self.pad as isize;
        let kk = kk as isize;
        let lo = (pad - kk).max(0);
        let hi = (self.in_dims[axis] as isize + pad - kk).min(self.out_dims[axis] as isize);
        if hi <= lo {
            (0, 0)
        } else {
            (lo as usize, hi as usize)
        }
    }

    fn w_index(&self, oc: usize, ic: usize, kz: usize, ky: usize, kx: usize) -> usize {
        (((oc * self.c_in + ic) * self.k + kz) * self.k + ky) * self.k + kx
    }
}

pub(crate) fn conv3d_forward<F: Real>(g: &Conv3dGeom, x: &[F], w: &[F], bias: &[F]) -> Vec<F> {
    let (iv, ov) = (g.in_vox(), g.out_vox());
    let [_, ih, iw] = g.in_dims;
    let [_, oh, ow] = g.out_dims;
    let mut out = vec![F::zero(); g.n * g.c_out * ov];
    out.par_chunks_mut(ov).enumerate().for_each(|(idx, o)| {
        let (s, oc) = (idx / g.c_out, idx % g.c_out);
        o.fill(bias[oc]);
        for ic in 0..g.c_in {
            let xin = &x[(s * g.c_in + ic) * iv..][..iv];
            for kz in 0..g.k {
                let (z0, z1) = g.range(0, kz);
                for ky in 0..g.k {
                    let (y0, y1) = g.range(1, ky);
                    for kx in 0..g.k {
                        let (x0, x1) = g.range(2, kx);
                        if x1 == x0 {
                            continue;
                        }
                        let wv = w[g.w_index(oc, ic, kz, ky, kx)];
                        for oz in z0..z1 {
                            let iz = oz + kz - g.pad;
                            for oy in y0..y1 {
                                let iy = oy + ky - g.pad;
                                let orow = &mut o[(oz * oh + oy) * ow + x0..(oz * oh + oy) * ow + x1];
                                let ibase = (iz * ih + iy) * iw + x0 + kx - g.pad;
                                let irow = &xin[ibase..ibase + (x1 - x0)];
                                for (ov, &iv) in orow.iter_mut().zip(irow) {
                                    *ov += wv * iv;
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

pub(crate) fn conv3d_backward_input<F: Real>(g: &Conv3dGeom, gout: &[F], w: &[F]) -> Vec<F> {
    let (iv, ov) = (g.in_vox(), g.out_vox());
    let [_, ih, iw] = g.in_dims;
    let [_, oh, ow] = g.out_dims;
    let mut gx = vec![F::zero(); g.n * g.c_in * iv];
    gx.par_chunks_mut(iv).enumerate().for_each(|(idx, gxi)| {
        let (s, ic) = (idx / g.c_in, idx % g.c_in);
        for oc in 0..g.c_out {
            let go = &gout[(s * g.c_out + oc) * ov..][..ov];
            for kz in 0..g.k {
                let (z0, z1) = g.range(0, kz);
                for ky in 0..g.k {
                    let (y0, y1) = g.range(1, ky);
                    for kx in 0..g.k {
                        let (x0, x1) = g.range(2, kx);
                        if x1 == x0 {
                            continue;
                        }
                        let wv = w[g.w_index(oc, ic, kz, ky, kx)];
                        for oz in z0..z1 {
                            let iz = oz + kz - g.pad;
                            for oy in y0..y1 {
                                let iy = oy + ky - g.pad;
                                let orow = &go[(oz * oh + oy) * ow + x0..(oz * oh + oy) * ow + x1];
                                let ibase = (iz * ih + iy) * iw + x0 + kx - g.pad;
                                let irow = &mut gxi[ibase..ibase + (x1 - x0)];
                                for (iv, &ov) in irow.iter_mut().zip(orow) {
                                    *iv += wv * ov;
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    gx
}

/// Returns `(grad_weight, grad_bias)`.
pub(crate) fn conv3d_backward_params<F: Real>(g: &Conv3dGeom, gout: &[F], x: &[F]) -> (Vec<F>, Vec<F>) {
    let (iv, ov) = (g.in_vox(), g.out_vox());
    let [_, ih, iw] = g.in_dims;
    let [_, oh, ow] = g.out_dims;
    let k3 = g.k * g.k * g.k;
    let mut gw = vec![F::zero(); g.c_out * g.c_in * k3];
    gw.par_chunks_mut(k3).enumerate().for_each(|(idx, gwk)| {
        let (oc, ic) = (idx / g.c_in, idx % g.c_in);
        for kz in 0..g.k {
            let (z0, z1) = g.range(0, kz);
            for ky in 0..g.k {
                let (y0, y1) = g.range(1, ky);
                for kx in 0..g.k {
                    let (x0, x1) = g.range(2, kx);
                    let mut acc = F::zero();
                    if x1 > x0 {
                        for s in 0..g.n {
                            let go = &gout[(s * g.c_out + oc) * ov..][..ov];
                            let xin = &x[(s * g.c_in + ic) * iv..][..iv];
                            for oz in z0..z1 {
                                let iz = oz + kz - g.pad;
                                for oy in y0..y1 {
                                    let iy = oy + ky - g.pad;
                                    let orow = &go[(oz * oh + oy) * ow + x0..(oz * oh + oy) * ow + x1];
                                    let ibase = (iz * ih + iy) * iw + x0 + kx - g.pad;
                                    let irow = &xin[ibase..ibase + (x1 - x0)];
                                    for (&a, &b) in orow.iter().zip(irow) {
                                        acc += a * b;
                                    }
                                }
                            }
                        }
                    }
                    gwk[(kz * g.k + ky) * g.k + kx] = acc;
                }
            }
        }
    });
    let gb = (0..g.c_out)
        .map(|oc| {
            let mut acc = F::zero();
            for s in 0..g.n {
                for &v in &gout[(s * g.c_out + oc) * ov..][..ov] {
                    acc += v;
                }
            }
            acc
        })
        .collect();
    (gw, gb)
}

/// Geometry of a 2³ stride-2 transposed convolution. Weights are laid out
/// `C_in×C_out×2×2×2`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Up2Geom {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub in_dims: [usize; 3],
}

impl Up2Geom {
    fn in_vox(&self) -> usize {
        self.in_dims.iter().product()
    }

    fn w_index(&self, ic: usize, oc: usize, a: usize, b: usize, c: usize) -> usize {
        (((ic * self.c_out + oc) * 2 + a) * 2 + b) * 2 + c
    }

    fn out_index(&self, z: usize, y: usize, x: usize, a: usize, b: usize, c: usize) -> usize {
        let [_, h, w] = self.in_dims;
        ((2 * z + a) * 2 * h + 2 * y + b) * 2 * w + 2 * x + c
    }
}

pub(crate) fn conv_transpose3d_forward<F: Real>(g: &Up2Geom, x: &[F], w: &[F], bias: &[F]) -> Vec<F> {
    let iv = g.in_vox();
    let ov = iv * 8;
    let [d, h, wd] = g.in_dims;
    let mut out = vec![F::zero(); g.n * g.c_out * ov];
    out.par_chunks_mut(ov).enumerate().for_each(|(idx, o)| {
        let (s, oc) = (idx / g.c_out, idx % g.c_out);
        o.fill(bias[oc]);
        for ic in 0..g.c_in {
            let xin = &x[(s * g.c_in + ic) * iv..][..iv];
            for a in 0..2 {
                for b in 0..2 {
                    for c in 0..2 {
                        let wv = w[g.w_index(ic, oc, a, b, c)];
                        for z in 0..d {
                            for y in 0..h {
                                let row = &xin[(z * h + y) * wd..][..wd];
                                for (xx, &v) in row.iter().enumerate() {
                                    o[g.out_index(z, y, xx, a, b, c)] += wv * v;
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

pub(crate) fn conv_transpose3d_backward_input<F: Real>(g: &Up2Geom, gout: &[F], w: &[F]) -> Vec<F> {
    let iv = g.in_vox();
    let ov = iv * 8;
    let [d, h, wd] = g.in_dims;
    let mut gx = vec![F::zero(); g.n * g.c_in * iv];
    gx.par_chunks_mut(iv).enumerate().for_each(|(idx, gxi)| {
        let (s, ic) = (idx / g.c_in, idx % g.c_in);
        for oc in 0..g.c_out {
            let go = &gout[(s * g.c_out + oc) * ov..][..ov];
            for a in 0..2 {
                for b in 0..2 {
                    for c in 0..2 {
                        let wv = w[g.w_index(ic, oc, a, b, c)];
                        for z in 0..d {
                            for y in 0..h {
                                for xx in 0..wd {
                                    gxi[(z * h + y) * wd + xx] += wv * go[g.out_index(z, y, xx, a, b, c)];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    gx
}

pub(crate) fn conv_transpose3d_backward_params<F: Real>(g: &Up2Geom, gout: &[F], x: &[F]) -> (Vec<F>, Vec<F>) {
    let iv = g.in_vox();
    let ov = iv * 8;
    let [d, h, wd] = g.in_dims;
    let mut gw = vec![F::zero(); g.c_in * g.c_out * 8];
    gw.par_chunks_mut(8).enumerate().for_each(|(idx, gwk)| {
        let (ic, oc) = (idx / g.c_out, idx % g.c_out);
        for a in 0..2 {
            for b in 0..2 {
                for c in 0..2 {
                    let mut acc = F::zero();
                    for s in 0..g.n {
                        let xin = &x[(s * g.c_in + ic) * iv..][..iv];
                        let go = &gout[(s * g.c_out + oc) * ov..][..ov];
                        for z in 0..d {
                            for y in 0..h {
                                for xx in 0..wd {
                                    acc += xin[(z * h + y) * wd + xx] * go[g.out_index(z, y, xx, a, b, c)];
                                }
                            }
                        }
                    }
                    gwk[(a * 2 + b) * 2 + c] = acc;
                }
            }
        }
    });
    let gb = (0..g.c_out)
        .map(|oc| {
            let mut acc = F::zero();
            for s in 0..g.n {
                for &v in &gout[(s * g.c_out + oc) * ov..][..ov] {
                    acc += v;
                }
            }
            acc
        })
        .collect();
    (gw, gb)
}

/// 2³ stride-2 max pooling over `planes` independent `D×H×W` blocks.
/// Returns pooled values and, per output voxel, the flat input index of the
/// winner (first maximum in z, y, x scan order).
pub(crate) fn maxpool3d_forward<F: Real>(x: &[F], planes: usize, dims: [usize; 3]) -> (Vec<F>, Vec<usize>) {
    let [d, h, w] = dims;
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let iv = d * h * w;
    let ov = od * oh * ow;
    let mut out = vec![F::zero(); planes * ov];
    let mut arg = vec![0usize; planes * ov];
    out.par_chunks_mut(ov)
        .zip(arg.par_chunks_mut(ov))
        .enumerate()
        .for_each(|(p, (o, am))| {
            let base = p * iv;
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut best = base + ((2 * z) * h + 2 * y) * w + 2 * xx;
                        for a in 0..2 {
                            for b in 0..2 {
                                for c in 0..2 {
                                    let i = base + ((2 * z + a) * h + 2 * y + b) * w + 2 * xx + c;
                                    if x[i] > x[best] {
                                        best = i;
                                    }
                                }
                            }
                        }
                        let oi = (z * oh + y) * ow + xx;
                        o[oi] = x[best];
                        am[oi] = best;
                    }
                }
            }
        });
    (out, arg)
}
