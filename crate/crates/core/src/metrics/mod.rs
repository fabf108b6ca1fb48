//! Reconstruction quality metrics and ROI analysis.

mod filter;
mod hfen;
mod roi;
mod ssim;

use std::fmt::Write as _;
use std::path::Path;

pub use hfen::{hfen, LogKernel, LOG_SIGMA, LOG_WIDTH};
pub use roi::{fit_line, roi_regression, Regression, RegressionPoints, RoiAnalysis, RoiEntry, RoiLabelMap};
pub use ssim::{ssim, ssim_with, SsimConfig};

use crate::dipole::Volume;
use crate::error::{Error, Result};

pub(crate) fn check_pair(pred: &Volume, gt: &Volume, mask: Option<&[bool]>) -> Result<()> {
    pred.same_shape(gt)?;
    if let Some(m) = mask {
        if m.len() != gt.len() {
            return Err(Error::shape(format!("mask has {} voxels, volume has {}", m.len(), gt.len())));
        }
    }
    Ok(())
}

/// Copy of `values` with outside-mask voxels set to zero.
pub(crate) fn masked(values: &[f64], mask: Option<&[bool]>) -> Vec<f64> {
    match mask {
        None => values.to_vec(),
        Some(m) => values.iter().zip(m).map(|(&v, &keep)| if keep { v } else { 0.0 }).collect(),
    }
}

/// `100·‖a − b‖ / ‖b‖` over masked voxels.
pub(crate) fn norm_ratio_percent(a: &[f64], b: &[f64], mask: Option<&[bool]>, what: &str) -> Result<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..a.len() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        num += (a[i] - b[i]).powi(2);
        den += b[i] * b[i];
    }
    if den == 0.0 {
        return Err(Error::Division(format!("{what} has zero norm inside the mask")));
    }
    Ok(100.0 * (num / den).sqrt())
}

/// `100·‖pred − gt‖ / ‖gt‖` over masked voxels.
pub fn nrmse(pred: &Volume, gt: &Volume, mask: Option<&[bool]>) -> Result<f64> {
    check_pair(pred, gt, mask)?;
    norm_ratio_percent(pred.values(), gt.values(), mask, "reference")
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub nrmse_percent: f64,
    pub hfen_percent: f64,
    /// Fraction, not percent.
    pub ssim: f64,
    pub rois: Vec<RoiEntry>,
    pub regression: Option<Regression>,
}

impl MetricsReport {
    /// Computes all metrics. ROI statistics and the regression are included
    /// when a label map is given.
    pub fn compute(
        pred: &Volume,
        gt: &Volume,
        mask: Option<&[bool]>,
        rois: Option<&RoiLabelMap>,
        points: RegressionPoints,
    ) -> Result<Self> {
        let nrmse_percent = nrmse(pred, gt, mask)?;
        let hfen_percent = hfen(pred, gt, mask)?;
        let ssim = ssim_with(pred, gt, mask, &SsimConfig::default())?;
        let (rois, regression) = match rois {
            Some(map) => {
                let a = roi_regression(pred, gt, map, points)?;
                (a.entries, Some(a.regression))
            }
            None => (Vec::new(), None),
        };
        Ok(MetricsReport { nrmse_percent, hfen_percent, ssim, rois, regression })
    }

    /// Like `compute`, but metric-level degeneracies do not fail: a zero
    /// reference norm yields NaN and a degenerate regression is omitted.
    /// Shape errors still propagate.
    pub fn compute_tolerant(
        pred: &Volume,
        gt: &Volume,
        mask: Option<&[bool]>,
        rois: Option<&RoiLabelMap>,
        points: RegressionPoints,
    ) -> Result<Self> {
        let soft = |r: Result<f64>| match r {
            Err(Error::Division(m)) => {
                log::warn!("{m}; reporting NaN");
                Ok(f64::NAN)
            }
            other => other,
        };
        let nrmse_percent = soft(nrmse(pred, gt, mask))?;
        let hfen_percent = soft(hfen(pred, gt, mask))?;
        let ssim = soft(ssim_with(pred, gt, mask, &SsimConfig::default()))?;
        let (rois, regression) = match rois {
            Some(map) => {
                let (entries, xs, ys) = roi::roi_points(pred, gt, map, points)?;
                let regression = match fit_line(&xs, &ys) {
                    Ok(r) => Some(r),
                    Err(Error::Regression(m)) => {
                        log::warn!("regression skipped: {m}");
                        None
                    }
                    Err(e) => return Err(e),
                };
                (entries, regression)
            }
            None => (Vec::new(), None),
        };
        Ok(MetricsReport { nrmse_percent, hfen_percent, ssim, rois, regression })
    }

    /// Two-column `key,value` CSV. Floats use the shortest representation
    /// that parses back to the same value.
    pub fn to_csv(&self) -> String {
        let mut rows: Vec<(String, String)> = vec![
            ("nrmse_percent".into(), self.nrmse_percent.to_string()),
            ("hfen_percent".into(), self.hfen_percent.to_string()),
            ("ssim".into(), self.ssim.to_string()),
        ];
        if let Some(r) = &self.regression {
            rows.push(("regression_slope".into(), r.slope.to_string()));
            rows.push(("regression_intercept".into(), r.intercept.to_string()));
            rows.push(("regression_r_squared".into(), r.r_squared.to_string()));
            rows.push(("regression_mse".into(), r.mse.to_string()));
            rows.push(("regression_points".into(), r.points.to_string()));
        }
        for e in &self.rois {
            let k = |f: &str| format!("roi_{}_{f}", e.label);
            rows.push((k("name"), e.name.clone()));
            rows.push((k("voxels"), e.voxels.to_string()));
            rows.push((k("mean_ppm"), e.mean_ppm.to_string()));
            rows.push((k("std_ppm"), e.std_ppm.to_string()));
            rows.push((k("ref_mean_ppm"), e.ref_mean_ppm.to_string()));
            rows.push((k("ref_std_ppm"), e.ref_std_ppm.to_string()));
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["key", "value"]).expect("in-memory write");
        for (k, v) in rows {
            w.write_record([k, v]).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("UTF-8 output")
    }

    pub fn from_csv(text: &str, path: &Path) -> Result<Self> {
        let fmt = |m: String| Error::format(path, m);
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let mut map = std::collections::BTreeMap::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| fmt(e.to_string()))?;
            let (Some(k), Some(v)) = (rec.get(0), rec.get(1)) else {
                return Err(fmt("metrics row needs key and value".into()));
            };
            map.insert(k.to_string(), v.to_string());
        }
        let num = |k: &str| -> Result<f64> {
            map.get(k)
                .ok_or_else(|| fmt(format!("missing `{k}`")))?
                .parse()
                .map_err(|_| fmt(format!("bad number for `{k}`")))
        };
        let regression = if map.contains_key("regression_slope") {
            Some(Regression {
                slope: num("regression_slope")?,
                intercept: num("regression_intercept")?,
                r_squared: num("regression_r_squared")?,
                mse: num("regression_mse")?,
                points: num("regression_points")? as usize,
            })
        } else {
            None
        };
        let mut labels: Vec<u32> = map
            .keys()
            .filter_map(|k| k.strip_prefix("roi_")?.strip_suffix("_name")?.parse().ok())
            .collect();
        labels.sort_unstable();
        let rois = labels
            .into_iter()
            .map(|l| {
                let k = |f: &str| format!("roi_{l}_{f}");
                Ok(RoiEntry {
                    label: l,
                    name: map[&k("name")].clone(),
                    voxels: num(&k("voxels"))? as usize,
                    mean_ppm: num(&k("mean_ppm"))?,
                    std_ppm: num(&k("std_ppm"))?,
                    ref_mean_ppm: num(&k("ref_mean_ppm"))?,
                    ref_std_ppm: num(&k("ref_std_ppm"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MetricsReport {
            nrmse_percent: num("nrmse_percent")?,
            hfen_percent: num("hfen_percent")?,
            ssim: num("ssim")?,
            rois,
            regression,
        })
    }

    /// Human-readable summary.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "NRMSE  {:>10.4} %", self.nrmse_percent);
        let _ = writeln!(s, "HFEN   {:>10.4} %", self.hfen_percent);
        let _ = writeln!(s, "SSIM   {:>10.6}   ({:.2} %)", self.ssim, 100.0 * self.ssim);
        if !self.rois.is_empty() {
            let _ = writeln!(s, "\n{:<8} {:>8} {:>12} {:>12} {:>12} {:>12}", "ROI", "voxels", "mean", "std", "ref mean", "ref std");
            for e in &self.rois {
                let _ = writeln!(
                    s,
                    "{:<8} {:>8} {:>12.6} {:>12.6} {:>12.6} {:>12.6}",
                    e.name, e.voxels, e.mean_ppm, e.std_ppm, e.ref_mean_ppm, e.ref_std_ppm
                );
            }
        }
        if let Some(r) = &self.regression {
            let _ = writeln!(
                s,
                "\nregression over {} points: y = {:.6}·x + {:.6}, R² = {:.6}, MSE = {:.6e}",
                r.points, r.slope, r.intercept, r.r_squared, r.mse
            );
        }
        s
    }
}

#[cfg(test)]
mod tests;
