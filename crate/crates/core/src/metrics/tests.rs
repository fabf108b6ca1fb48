use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::*;

fn random(dims: [usize; 3], seed: u64) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dims.iter().product();
    Volume::new(dims, [1.0; 3], (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn scaled(v: &Volume, mut f: impl FnMut(f64) -> f64) -> Volume {
    v.with_values(v.values().iter().map(|&x| f(x)).collect()).unwrap()
}

/// Explicit width³ kernel, looped convolution with clamped indices.
fn naive_log(data: &[f64], dims: [usize; 3]) -> Vec<f64> {
    let k = LogKernel::new(LOG_WIDTH, LOG_SIGMA);
    let half = (LOG_WIDTH / 2) as isize;
    let mut h = vec![0.0; LOG_WIDTH.pow(3)];
    for c in 0..LOG_WIDTH {
        for b in 0..LOG_WIDTH {
            for a in 0..LOG_WIDTH {
                let (x, y, z) = (a as f64 - 7.0, b as f64 - 7.0, c as f64 - 7.0);
                let r2 = x * x + y * y + z * z;
                let s2 = LOG_SIGMA * LOG_SIGMA;
                h[(c * LOG_WIDTH + b) * LOG_WIDTH + a] = (-r2 / (2.0 * s2)).exp() * (r2 - 3.0 * s2) / (s2 * s2);
            }
        }
    }
    let g_sum: f64 = (0..LOG_WIDTH)
        .flat_map(|c| (0..LOG_WIDTH).flat_map(move |b| (0..LOG_WIDTH).map(move |a| (a, b, c))))
        .map(|(a, b, c)| {
            let r2 = (a as f64 - 7.0).powi(2) + (b as f64 - 7.0).powi(2) + (c as f64 - 7.0).powi(2);
            (-r2 / (2.0 * LOG_SIGMA * LOG_SIGMA)).exp()
        })
        .sum();
    h.iter_mut().for_each(|v| *v /= g_sum);
    let mean = h.iter().sum::<f64>() / h.len() as f64;
    h.iter_mut().for_each(|v| *v -= mean);
    assert!((mean - k.mean).abs() < 1e-15);

    let [nx, ny, nz] = dims;
    let at = |x: isize, y: isize, z: isize| {
        let (x, y, z) = (x.clamp(0, nx as isize - 1), y.clamp(0, ny as isize - 1), z.clamp(0, nz as isize - 1));
        data[(z as usize * ny + y as usize) * nx + x as usize]
    };
    let mut out = vec![0.0; data.len()];
    for z in 0..nz as isize {
        for y in 0..ny as isize {
            for x in 0..nx as isize {
                let mut acc = 0.0;
                for c in -half..=half {
                    for b in -half..=half {
                        for a in -half..=half {
                            let w = h[(((c + half) as usize * LOG_WIDTH) + (b + half) as usize) * LOG_WIDTH + (a + half) as usize];
                            acc += w * at(x + a, y + b, z + c);
                        }
                    }
                }
                out[(z as usize * ny + y as usize) * nx + x as usize] = acc;
            }
        }
    }
    out
}

#[test]
fn nrmse_identities() {
    let gt = random([6, 5, 4], 1);
    assert_eq!(nrmse(&gt, &gt, None).unwrap(), 0.0);
    assert!((nrmse(&scaled(&gt, |x| 2.0 * x), &gt, None).unwrap() - 100.0).abs() < 1e-12);
    assert!((nrmse(&scaled(&gt, |_| 0.0), &gt, None).unwrap() - 100.0).abs() < 1e-12);
    for eps in [0.1, -0.03, 1e-4] {
        let v = nrmse(&scaled(&gt, |x| x * (1.0 + eps)), &gt, None).unwrap();
        assert!((v - 100.0 * f64::abs(eps)).abs() < 1e-9, "{v}");
    }
    let zero = scaled(&gt, |_| 0.0);
    assert!(matches!(nrmse(&gt, &zero, None), Err(Error::Division(_))));
}

#[test]
fn hfen_identities() {
    let gt = random([12, 11, 10], 2);
    assert_eq!(hfen(&gt, &gt, None).unwrap(), 0.0);
    let shifted = scaled(&gt, |x| x + 3.7);
    assert!(hfen(&shifted, &gt, None).unwrap() < 1e-4);
    let pred = random([12, 11, 10], 3);
    let a = hfen(&pred, &gt, None).unwrap();
    let b = hfen(&scaled(&pred, |x| x + 1.0), &scaled(&gt, |x| x + 1.0), None).unwrap();
    assert!((a - b).abs() < 1e-8);
}

#[test]
fn hfen_of_constant_reference_is_undefined() {
    let one = Volume::new([1, 1, 1], [1.0; 3], vec![-0.7]).unwrap();
    let other = one.with_values(vec![0.4]).unwrap();
    assert!(matches!(hfen(&other, &one, None), Err(Error::Division(_))));
    let flat = Volume::new([6, 5, 4], [1.0; 3], vec![0.3; 120]).unwrap();
    assert!(matches!(hfen(&random([6, 5, 4], 9), &flat, None), Err(Error::Division(_))));
}

#[test]
fn log_filter_matches_naive_convolution() {
    let v = random([9, 8, 7], 4);
    let fast = LogKernel::new(LOG_WIDTH, LOG_SIGMA).apply(v.values(), v.dims());
    let slow = naive_log(v.values(), v.dims());
    for (a, b) in fast.iter().zip(&slow) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
    let pred = random([9, 8, 7], 5);
    let fp = naive_log(pred.values(), pred.dims());
    let num: f64 = fp.iter().zip(&slow).map(|(a, b)| (a - b).powi(2)).sum();
    let den: f64 = slow.iter().map(|b| b * b).sum();
    let oracle = 100.0 * (num / den).sqrt();
    assert!((hfen(&pred, &v, None).unwrap() - oracle).abs() < 1e-5);
}

#[test]
fn ssim_identities() {
    let gt = random([12, 12, 12], 6);
    assert!((ssim(&gt, &gt).unwrap() - 1.0).abs() < 1e-12);
    let mean = gt.values().iter().sum::<f64>() / gt.len() as f64;
    let centered = scaled(&gt, |x| x - mean);
    let neg = scaled(&centered, |x| -x);
    assert!(ssim(&neg, &centered).unwrap() < 1.0);
}

#[test]
fn ssim_with_one_percent_noise() {
    let spec = crate::dipole::PhantomSpec { dims: [32, 32, 32], seed: 3, ..Default::default() };
    let gt = crate::dipole::generate_phantom(&spec).unwrap();
    let (lo, hi) = gt.values().iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
    let noise = Normal::new(0.0, 0.01 * (hi - lo)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let noisy = scaled(&gt, |v| v + noise.sample(&mut rng));
    let s = ssim(&noisy, &gt).unwrap();
    eprintln!("SSIM with 1% noise: {s:.4}");
    assert!(s > 0.9, "{s}");
}

#[test]
fn ssim_symmetric_with_fixed_range() {
    let a = random([10, 9, 8], 8);
    let b = random([10, 9, 8], 9);
    let cfg = SsimConfig { data_range: Some(2.0), ..Default::default() };
    let ab = ssim_with(&a, &b, None, &cfg).unwrap();
    let ba = ssim_with(&b, &a, None, &cfg).unwrap();
    assert!((ab - ba).abs() < 1e-10);
}

#[test]
fn ssim_constant_reference_does_not_fail() {
    let c = scaled(&random([8, 8, 8], 1), |_| 0.5);
    assert!((ssim(&c, &c).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn metrics_ignore_voxels_outside_mask() {
    let gt = random([10, 10, 10], 10);
    let pred = random([10, 10, 10], 11);
    let mask: Vec<bool> = (0..gt.len()).map(|i| i % 3 != 0).collect();
    let mut gt2 = gt.clone();
    let mut pred2 = pred.clone();
    for i in (0..gt.len()).filter(|&i| !mask[i]) {
        gt2.values_mut()[i] = 1e3;
        pred2.values_mut()[i] = -7.0;
    }
    let cfg = SsimConfig { data_range: Some(2.0), ..Default::default() };
    assert_eq!(nrmse(&pred, &gt, Some(&mask)).unwrap(), nrmse(&pred2, &gt2, Some(&mask)).unwrap());
    assert_eq!(hfen(&pred, &gt, Some(&mask)).unwrap(), hfen(&pred2, &gt2, Some(&mask)).unwrap());
    assert_eq!(
        ssim_with(&pred, &gt, Some(&mask), &cfg).unwrap(),
        ssim_with(&pred2, &gt2, Some(&mask), &cfg).unwrap()
    );
}

fn labels(dims: [usize; 3]) -> RoiLabelMap {
    let n = dims.iter().product::<usize>();
    let legend = BTreeMap::from([(1, "GP".to_string()), (2, "PU".to_string())]);
    RoiLabelMap::new(dims, (0..n).map(|i| (i % 4) as u32).collect(), legend).unwrap()
}

#[test]
fn regression_identities() {
    let gt = random([6, 6, 6], 12);
    let map = labels(gt.dims());
    let r = roi_regression(&gt, &gt, &map, RegressionPoints::Voxelwise).unwrap().regression;
    assert!((r.slope - 1.0).abs() < 1e-12 && r.intercept.abs() < 1e-12);
    assert!((r.r_squared - 1.0).abs() < 1e-12 && r.mse == 0.0);
    let half = scaled(&gt, |x| 0.5 * x);
    let r = roi_regression(&half, &gt, &map, RegressionPoints::Voxelwise).unwrap().regression;
    assert!((r.slope - 0.5).abs() < 1e-12 && r.intercept.abs() < 1e-12);
    let a = roi_regression(&half, &gt, &map, RegressionPoints::RoiMeans).unwrap();
    assert_eq!(a.regression.points, 3);
    assert_eq!(a.entries[0].name, "GP");
    assert_eq!(a.entries[2].name, "roi3");
}

#[test]
fn regression_matches_normal_equations() {
    let gt = random([7, 6, 5], 13);
    let pred = random([7, 6, 5], 14);
    let map = labels(gt.dims());
    let r = roi_regression(&pred, &gt, &map, RegressionPoints::Voxelwise).unwrap().regression;
    let idx: Vec<usize> = (0..gt.len()).filter(|&i| map.labels()[i] > 0).collect();
    let (x, y): (Vec<f64>, Vec<f64>) = idx.iter().map(|&i| (gt.values()[i], pred.values()[i])).unzip();
    let n = x.len() as f64;
    let sx: f64 = x.iter().sum();
    let sy: f64 = y.iter().sum();
    let sxx: f64 = x.iter().map(|v| v * v).sum();
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
    let syy: f64 = y.iter().map(|v| v * v).sum();
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    let intercept = (sy - slope * sx) / n;
    let corr = (n * sxy - sx * sy) / ((n * sxx - sx * sx) * (n * syy - sy * sy)).sqrt();
    assert!((r.slope - slope).abs() < 1e-8);
    assert!((r.intercept - intercept).abs() < 1e-8);
    assert!((r.r_squared - corr * corr).abs() < 1e-8);
}

#[test]
fn degenerate_regression_rejected() {
    let gt = scaled(&random([4, 4, 4], 1), |_| 0.2);
    let map = labels(gt.dims());
    assert!(matches!(roi_regression(&gt, &gt, &map, RegressionPoints::Voxelwise), Err(Error::Regression(_))));
}

#[test]
fn report_csv_round_trip() {
    let gt = random([12, 12, 12], 15);
    let pred = random([12, 12, 12], 16);
    let map = labels(gt.dims());
    let rep = MetricsReport::compute(&pred, &gt, None, Some(&map), RegressionPoints::Voxelwise).unwrap();
    let back = MetricsReport::from_csv(&rep.to_csv(), Path::new("m.csv")).unwrap();
    assert_eq!(back, rep);
    assert!(rep.to_text().contains("GP"));
    let plain = MetricsReport::compute(&gt, &gt, None, None, RegressionPoints::Voxelwise).unwrap();
    assert_eq!(plain.nrmse_percent, 0.0);
    assert!((plain.ssim - 1.0).abs() < 1e-12);
    assert_eq!(MetricsReport::from_csv(&plain.to_csv(), Path::new("m.csv")).unwrap(), plain);
}
