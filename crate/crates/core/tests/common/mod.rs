//! Shared helpers for integration and acceptance tests.
#![allow(dead_code, clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ir2qsm::net::{Network, NetworkConfig, Session};
use ir2qsm::tensor::{Mode, RunningStats, Tape, Tensor, Var};
use ir2qsm::train::compute_loss;
use ir2qsm::Result;

pub const FD_STEP: f64 = 1e-5;

/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values at least `gap` away from zero, for kinked operations.
pub fn away_from_zero(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    uniform(shape, -1.0, 1.0, rng).map(|v| if v < 0.0 { v - gap } else { v + gap })
}

/// Distinct values on a shuffled grid with spacing 0.01, so every 2³ pooling
/// window has a clear maximum under FD perturbation.
pub fn distinct(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - n as f64 * 0.005).collect();
    for i in (1..n).rev() {
        v.swap(i, rng.random_range(0..=i));
    }
    Tensor::from_vec(shape, v).unwrap()
}

type OpFn = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// Gradient of `sum(op(inputs) ⊙ R)` for a fixed random `R`, analytic versus
/// central differences, over every input element. Returns the maximum
/// relative error.
pub fn op_gradcheck(inputs: &[Tensor<f64>], op: &OpFn, seed: u64) -> f64 {
    let weights = {
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        let out = op(&mut t, &vars).unwrap();
        let shape = t.value(out).unwrap().shape().to_vec();
        uniform(&shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    };
    let loss = |xs: &[Tensor<f64>], grad: bool| -> (f64, Vec<Tensor<f64>>) {
        let mut t = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| if grad { t.leaf(x.clone()) } else { t.constant(x.clone()) }).collect();
        let out = op(&mut t, &vars).unwrap();
        let r = t.constant(weights.clone());
        let prod = t.mul(out, r).unwrap();
        let l = t.sum(prod).unwrap();
        let value = t.value(l).unwrap().data()[0];
        if !grad {
            return (value, Vec::new());
        }
        let g = t.backward(l).unwrap();
        let grads = vars.iter().zip(xs).map(|(&v, x)| g.get_or_zeros(v, x.shape())).collect();
        (value, grads)
    };
    let (_, analytic) = loss(inputs, true);
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        for j in 0..x.len() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] = x.data()[j] + FD_STEP;
            let (lp, _) = loss(&xs, false);
            xs[i].data_mut()[j] = x.data()[j] - FD_STEP;
            let (lm, _) = loss(&xs, false);
            let numeric = (lp - lm) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i].data()[j], numeric));
        }
    }
    worst
}

/// Runs the FD check for every differentiable tape operation.
pub fn op_suite() -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let r = &mut rng;
    let x = uniform(&[2, 2, 4, 4, 4], -1.0, 1.0, r);
    let w3 = uniform(&[3, 2, 3, 3, 3], -0.5, 0.5, r);
    let b3 = uniform(&[3], -0.5, 0.5, r);
    let w1 = uniform(&[3, 2, 1, 1, 1], -0.5, 0.5, r);
    let xt = uniform(&[2, 2, 2, 2, 2], -1.0, 1.0, r);
    let wt = uniform(&[2, 3, 2, 2, 2], -0.5, 0.5, r);
    let gamma = uniform(&[2], 0.5, 1.5, r);
    let beta = uniform(&[2], -0.5, 0.5, r);
    let y = uniform(&[2, 2, 4, 4, 4], -1.0, 1.0, r);
    let c2 = uniform(&[2, 3, 4, 4, 4], -1.0, 1.0, r);
    let kinked = away_from_zero(&[2, 2, 4, 4, 4], 1e-3, r);
    let pooled = distinct(&[2, 2, 4, 4, 4], r);
    let stats = {
        let mut s = RunningStats::new(2);
        s.mean = vec![0.3, -0.2];
        s.var = vec![1.7, 0.6];
        s
    };

    let mut out = Vec::new();
    let mut run = |name: &'static str, inputs: Vec<Tensor<f64>>, op: Box<OpFn>| {
        out.push((name, op_gradcheck(&inputs, op.as_ref(), name.len() as u64)));
    };
    run("conv3d 3x3x3", vec![x.clone(), w3, b3.clone()], Box::new(|t, v| t.conv3d(v[0], v[1], v[2], 1)));
    run("conv3d 1x1x1", vec![x.clone(), w1, b3], Box::new(|t, v| t.conv3d(v[0], v[1], v[2], 0)));
    run("conv_transpose3d", vec![xt, wt, uniform(&[3], -0.5, 0.5, r)], Box::new(|t, v| t.conv_transpose3d(v[0], v[1], v[2])));
    run("maxpool3d", vec![pooled], Box::new(|t, v| t.maxpool3d(v[0])));
    run(
        "batchnorm3d train",
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(|t, v| Ok(t.batchnorm3d_train(v[0], v[1], v[2], 1e-5)?.0)),
    );
    run(
        "batchnorm3d eval",
        vec![x.clone(), gamma, beta],
        Box::new(move |t, v| t.batchnorm3d_eval(v[0], v[1], v[2], &stats)),
    );
    run("relu", vec![kinked], Box::new(|t, v| t.relu(v[0])));
    run("sigmoid", vec![x.clone()], Box::new(|t, v| t.sigmoid(v[0])));
    run("concat_channels", vec![x.clone(), c2], Box::new(|t, v| t.concat_channels(v[0], v[1])));
    run(
        "dropout train",
        vec![x.clone()],
        Box::new(|t, v| t.dropout(v[0], 0.3, Mode::Train, &mut ChaCha8Rng::seed_from_u64(5))),
    );
    run("add", vec![x.clone(), y.clone()], Box::new(|t, v| t.add(v[0], v[1])));
    run("sub", vec![x.clone(), y.clone()], Box::new(|t, v| t.sub(v[0], v[1])));
    run("mul", vec![x.clone(), y.clone()], Box::new(|t, v| t.mul(v[0], v[1])));
    run("scale", vec![x.clone()], Box::new(|t, v| t.scale(v[0], -1.75)));
    run("one_minus", vec![x.clone()], Box::new(|t, v| t.one_minus(v[0])));
    run("mse", vec![x.clone(), y], Box::new(|t, v| t.mse(v[0], v[1])));
    run("sum", vec![x], Box::new(|t, v| t.sum(v[0])));
    out
}

/// Multi-output loss of a train-mode forward pass.
fn network_loss(net: &Network<f64>, field: &Tensor<f64>, target: &Tensor<f64>, grad: bool) -> (f64, Option<Vec<Tensor<f64>>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut s = Session::new(net, Mode::Train, &mut rng);
    let x = s.input(field.clone()).unwrap();
    let (fin, lat) = s.ir2_forward(x).unwrap();
    let gt = s.tape.constant(target.clone());
    let l = compute_loss(&mut s.tape, &lat, fin, gt, 0.5).unwrap();
    let value = s.tape.value(l).unwrap().data()[0];
    if !grad {
        return (value, None);
    }
    (value, s.backward(l).unwrap().grads)
}

/// FD check of the full network's loss gradient with respect to its
/// parameters: `per_tensor` elements of every parameter tensor are probed
/// (all elements when the tensor is smaller). Returns the maximum relative
/// error and the number of probed elements.
pub fn network_gradcheck(cfg: &NetworkConfig, dims: [usize; 3], batch: usize, per_tensor: usize) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    // larger-than-default init keeps activations well above the FD noise floor
    let mut net = Network::<f64>::zeros(cfg).unwrap();
    for p in net.params_mut() {
        for v in p.value.data_mut() {
            *v = rng.random_range(-0.4..0.4);
        }
    }
    let shape = [batch, 1, dims[2], dims[1], dims[0]];
    let field = uniform(&shape, -1.0, 1.0, &mut rng);
    let target = uniform(&shape, -0.2, 0.2, &mut rng);
    let (_, grads) = network_loss(&net, &field, &target, true);
    let grads = grads.expect("train-mode session keeps gradients");
    let mut worst: f64 = 0.0;
    let mut probed = 0;
    for pi in 0..net.params().len() {
        let len = net.params()[pi].value.len();
        let picks: Vec<usize> = if len <= per_tensor {
            (0..len).collect()
        } else {
            (0..per_tensor).map(|_| rng.random_range(0..len)).collect()
        };
        for j in picks {
            let orig = net.params()[pi].value.data()[j];
            net.params_mut()[pi].value.data_mut()[j] = orig + FD_STEP;
            let (lp, _) = network_loss(&net, &field, &target, false);
            net.params_mut()[pi].value.data_mut()[j] = orig - FD_STEP;
            let (lm, _) = network_loss(&net, &field, &target, false);
            net.params_mut()[pi].value.data_mut()[j] = orig;
            let numeric = (lp - lm) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(grads[pi].data()[j], numeric));
            probed += 1;
        }
    }
    (worst, probed)
}

/// HFEN through an explicit 15³ LoG kernel (σ = 1.5, normalized by the
/// gaussian sum, mean removed) applied by direct convolution with clamped
/// borders.
pub fn naive_hfen(pred: &[f64], gt: &[f64], dims: [usize; 3]) -> f64 {
    const W: usize = 15;
    const S: f64 = 1.5;
    let half = (W / 2) as isize;
    let mut h = vec![0.0; W * W * W];
    let mut gsum = 0.0;
    for c in 0..W {
        for b in 0..W {
            for a in 0..W {
                let r2 = [a, b, c].iter().map(|&i| (i as f64 - half as f64).powi(2)).sum::<f64>();
                let g = (-r2 / (2.0 * S * S)).exp();
                gsum += g;
                h[(c * W + b) * W + a] = g * (r2 - 3.0 * S * S) / S.powi(4);
            }
        }
    }
    h.iter_mut().for_each(|v| *v /= gsum);
    let mean = h.iter().sum::<f64>() / h.len() as f64;
    h.iter_mut().for_each(|v| *v -= mean);
    let [nx, ny, nz] = dims;
    let conv = |d: &[f64]| -> Vec<f64> {
        let at = |x: isize, y: isize, z: isize| {
            let x = x.clamp(0, nx as isize - 1) as usize;
            let y = y.clamp(0, ny as isize - 1) as usize;
            let z = z.clamp(0, nz as isize - 1) as usize;
            d[(z * ny + y) * nx + x]
        };
        let mut out = vec![0.0; d.len()];
        for z in 0..nz as isize {
            for y in 0..ny as isize {
                for x in 0..nx as isize {
                    let mut acc = 0.0;
                    for c in -half..=half {
                        for b in -half..=half {
                            for a in -half..=half {
                                let w = h[(((c + half) * W as isize + b + half) * W as isize + a + half) as usize];
                                acc += w * at(x + a, y + b, z + c);
                            }
                        }
                    }
                    out[(z as usize * ny + y as usize) * nx + x as usize] = acc;
                }
            }
        }
        out
    };
    let (lp, lg) = (conv(pred), conv(gt));
    let num: f64 = lp.iter().zip(&lg).map(|(a, b)| (a - b).powi(2)).sum();
    let den: f64 = lg.iter().map(|b| b * b).sum();
    100.0 * (num / den).sqrt()
}

/// Slope and intercept from the 2×2 normal equations, solved by Cramer's
/// rule on raw sums.
pub fn ols_oracle(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
    let sxx: f64 = x.iter().map(|v| v * v).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let det = n * sxx - sx * sx;
    ((n * sxy - sx * sy) / det, (sxx * sy - sx * sxy) / det)
}
