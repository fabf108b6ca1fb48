use std::collections::BTreeMap;

use crate::dipole::Volume;
use crate::error::{Error, Result};

/// Integer label volume; 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiLabelMap {
    dims: [usize; 3],
    labels: Vec<u32>,
    legend: BTreeMap<u32, String>,
}

impl RoiLabelMap {
    pub fn new(dims: [usize; 3], labels: Vec<u32>, legend: BTreeMap<u32, String>) -> Result<Self> {
        if labels.len() != dims.iter().product::<usize>() {
            return Err(Error::shape(format!("label map has {} voxels, dims {dims:?}", labels.len())));
        }
        Ok(RoiLabelMap { dims, labels, legend })
    }

    /// Labels from a volume of non-negative integer values.
    pub fn from_volume(v: &Volume, legend: BTreeMap<u32, String>) -> Result<Self> {
        let labels = v
            .values()
            .iter()
            .map(|&x| {
                if x >= 0.0 && x.fract() == 0.0 && x <= u32::MAX as f64 {
                    Ok(x as u32)
                } else {
                    Err(Error::config(format!("ROI label {x} is not a non-negative integer")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(v.dims(), labels, legend)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// Distinct non-background labels in ascending order.
    pub fn rois(&self) -> Vec<u32> {
        let mut v: Vec<u32> = self.labels.iter().copied().filter(|&l| l > 0).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn name(&self, label: u32) -> String {
        self.legend.get(&label).cloned().unwrap_or_else(|| format!("roi{label}"))
    }
}

/// Which points enter the regression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RegressionPoints {
    #[default]
    Voxelwise,
    RoiMeans,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoiEntry {
    pub label: u32,
    pub name: String,
    pub voxels: usize,
    pub mean_ppm: f64,
    /// Population standard deviation.
    pub std_ppm: f64,
    pub ref_mean_ppm: f64,
    pub ref_std_ppm: f64,
}

/// Ordinary least squares of prediction (y) on reference (x).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Regression {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Mean squared difference between prediction and reference points.
    pub mse: f64,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoiAnalysis {
    pub entries: Vec<RoiEntry>,
    pub regression: Regression,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

/// Least-squares line through `(x, y)` using centered sums.
pub fn fit_line(x: &[f64], y: &[f64]) -> Result<Regression> {
    if x.len() != y.len() {
        return Err(Error::shape("regression inputs differ in length"));
    }
    if x.len() < 2 {
        return Err(Error::Regression(format!("need at least 2 points, got {}", x.len())));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let scale: f64 = x.iter().map(|v| v * v).sum();
    if !(sxx > 1e-20 * scale) {
        return Err(Error::Regression("reference values have no variance".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - (intercept + slope * a)).powi(2)).sum();
    let ss_tot: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    let mse = x.iter().zip(y).map(|(a, b)| (b - a).powi(2)).sum::<f64>() / n;
    Ok(Regression { slope, intercept, r_squared, mse, points: x.len() })
}

/// Per-ROI statistics of `pred` and `gt`, plus a regression of prediction
/// against reference over ROI voxels or ROI means.
pub fn roi_regression(pred: &Volume, gt: &Volume, rois: &RoiLabelMap, points: RegressionPoints) -> Result<RoiAnalysis> {
    let (entries, xs, ys) = roi_points(pred, gt, rois, points)?;
    let regression = fit_line(&xs, &ys)?;
    Ok(RoiAnalysis { entries, regression })
}

type RoiPoints = (Vec<RoiEntry>, Vec<f64>, Vec<f64>);

/// Per-ROI statistics and the (reference, prediction) regression points.
pub(crate) fn roi_points(pred: &Volume, gt: &Volume, rois: &RoiLabelMap, points: RegressionPoints) -> Result<RoiPoints> {
    pred.same_shape(gt)?;
    if rois.dims() != gt.dims() {
        return Err(Error::shape(format!("label map dims {:?} differ from volume dims {:?}", rois.dims(), gt.dims())));
    }
    let mut entries = Vec::new();
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for label in rois.rois() {
        let idx: Vec<usize> = (0..rois.labels.len()).filter(|&i| rois.labels[i] == label).collect();
        let p: Vec<f64> = idx.iter().map(|&i| pred.values()[i]).collect();
        let g: Vec<f64> = idx.iter().map(|&i| gt.values()[i]).collect();
        let (mean_ppm, std_ppm) = mean_std(&p);
        let (ref_mean_ppm, ref_std_ppm) = mean_std(&g);
        match points {
            RegressionPoints::Voxelwise => {
                xs.extend(&g);
                ys.extend(&p);
            }
            RegressionPoints::RoiMeans => {
                xs.push(ref_mean_ppm);
                ys.push(mean_ppm);
            }
        }
        entries.push(RoiEntry { label, name: rois.name(label), voxels: idx.len(), mean_ppm, std_ppm, ref_mean_ppm, ref_std_ppm });
    }
    Ok((entries, xs, ys))
}
