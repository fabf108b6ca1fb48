use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};

use ir2qsm::dipole::{make_dipole_kernel, tkd_invert, Volume};
use ir2qsm::error::{Error, Result};
use ir2qsm::io::{export_slice as slice_image, parse_legend, read_qsmv, write_pgm, write_qsmv};
use ir2qsm::manifest::RunManifest;
use ir2qsm::metrics::{MetricsReport, RegressionPoints, RoiLabelMap};
use ir2qsm::net::{count_flops, Checkpoint, Network, NetworkConfig};

use super::{file_manifest, input_path, read_kv, split_output, triple, write_manifest, write_text, ArgList};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Ir2qsm,
    Tkd,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    /// Local field volume (QSMV).
    #[arg(long)]
    pub field: PathBuf,
    /// Output susceptibility volume (QSMV).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Method::Ir2qsm)]
    pub method: Method,
    /// Trained network (required for ir2qsm).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// TKD truncation threshold on |D|.
    #[arg(long, default_value_t = 0.2)]
    pub tkd_threshold: f64,
    /// Also write each iteration's latent map as `<out stem>_latent<t>.qsmv`.
    #[arg(long)]
    pub emit_latents: bool,
}

fn stem(name: &str) -> &str {
    name.strip_suffix(".qsmv").unwrap_or(name)
}

pub fn reconstruct(a: &ReconstructArgs, seed: u64) -> Result<()> {
    let mut m = RunManifest::new("reconstruct", seed);
    let mut args = ArgList::default();
    let field_path = input_path(&a.field)?;
    args.path("field", &field_path);
    m.add_input("field", &field_path)?;
    let field = read_qsmv(&field_path)?;
    let (dir, name) = split_output(&a.out)?;
    let (chi, latents) = match a.method {
        Method::Tkd => {
            if a.emit_latents {
                return Err(Error::Usage("--emit-latents needs --method ir2qsm".into()));
            }
            args.opt("method", "tkd").opt("tkd-threshold", a.tkd_threshold);
            m.config.insert("method", "tkd");
            m.config.insert("tkd_threshold", a.tkd_threshold);
            let kernel = make_dipole_kernel(field.dims(), field.voxel_size_mm())?;
            (tkd_invert(&field, &kernel, a.tkd_threshold)?, Vec::new())
        }
        Method::Ir2qsm => {
            let ck = a
                .checkpoint
                .as_deref()
                .ok_or_else(|| Error::Usage("--method ir2qsm needs --checkpoint <file>".into()))?;
            let ck = input_path(ck)?;
            args.opt("method", "ir2qsm").path("checkpoint", &ck).switch("emit-latents", a.emit_latents);
            m.add_input("checkpoint", &ck)?;
            let net: Network<f32> = Checkpoint::load(&ck)?.to_network()?;
            m.config = net.config().to_kv();
            m.config.insert("method", "ir2qsm");
            let (chi, latents) = net.reconstruct(&field)?;
            (chi, if a.emit_latents { latents } else { Vec::new() })
        }
    };
    m.args = args.out().0.clone();
    write_qsmv(&dir.join(&name), &chi)?;
    m.outputs.push(name.clone());
    for (t, lat) in latents.iter().enumerate() {
        let n = format!("{}_latent{}.qsmv", stem(&name), t + 1);
        write_qsmv(&dir.join(&n), lat)?;
        m.outputs.push(n);
    }
    log::info!("wrote {}", a.out.display());
    write_manifest(&file_manifest(&a.out), &m)
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Reconstruction (QSMV).
    #[arg(long)]
    pub pred: PathBuf,
    /// Reference susceptibility (QSMV).
    #[arg(long)]
    pub gt: PathBuf,
    /// Mask volume; nonzero voxels are inside.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Integer ROI label volume (QSMV); 0 is background.
    #[arg(long)]
    pub rois: Option<PathBuf>,
    /// ROI names, one `label name` per line.
    #[arg(long, requires = "rois")]
    pub legend: Option<PathBuf>,
    /// Regress ROI means instead of ROI voxels.
    #[arg(long, requires = "rois")]
    pub roi_means: bool,
    /// Metrics CSV.
    #[arg(long)]
    pub out: PathBuf,
}

fn load_input(name: &str, p: &Path, m: &mut RunManifest, args: &mut ArgList) -> Result<Volume> {
    let p = input_path(p)?;
    args.path(name, &p);
    m.add_input(name, &p)?;
    read_qsmv(&p)
}

pub fn evaluate(a: &EvaluateArgs, seed: u64) -> Result<()> {
    let mut m = RunManifest::new("evaluate", seed);
    let mut args = ArgList::default();
    let pred = load_input("pred", &a.pred, &mut m, &mut args)?;
    let gt = load_input("gt", &a.gt, &mut m, &mut args)?;
    let mask = match &a.mask {
        Some(p) => {
            let v = load_input("mask", p, &mut m, &mut args)?;
            Some(v.values().iter().map(|&x| x != 0.0).collect::<Vec<bool>>())
        }
        None => None,
    };
    let rois = match &a.rois {
        Some(p) => {
            let v = load_input("rois", p, &mut m, &mut args)?;
            let legend = match &a.legend {
                Some(l) => {
                    let l = input_path(l)?;
                    args.path("legend", &l);
                    m.add_input("legend", &l)?;
                    let text = std::fs::read_to_string(&l).map_err(|e| Error::Io { path: l.clone(), source: e })?;
                    parse_legend(&text, &l)?
                }
                None => Default::default(),
            };
            Some(RoiLabelMap::from_volume(&v, legend)?)
        }
        None => None,
    };
    let points = if a.roi_means { RegressionPoints::RoiMeans } else { RegressionPoints::Voxelwise };
    args.switch("roi-means", a.roi_means);
    m.args = args.out().0.clone();
    m.config.insert("regression_points", if a.roi_means { "roi_means" } else { "voxelwise" });

    let report = MetricsReport::compute_tolerant(&pred, &gt, mask.as_deref(), rois.as_ref(), points)?;
    let (dir, name) = split_output(&a.out)?;
    write_text(&dir.join(&name), &report.to_csv())?;
    m.outputs.push(name);
    print!("{}", report.to_text());
    write_manifest(&file_manifest(&a.out), &m)
}

fn parse_axis(s: &str) -> std::result::Result<usize, String> {
    match s {
        "x" | "0" => Ok(0),
        "y" | "1" => Ok(1),
        "z" | "2" => Ok(2),
        _ => Err(format!("axis `{s}` must be x, y or z")),
    }
}

fn parse_window(s: &str) -> std::result::Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(':').ok_or_else(|| format!("window `{s}` must look like lo:hi"))?;
    let num = |v: &str| v.trim().parse::<f64>().map_err(|_| format!("`{v}` is not a number"));
    Ok((num(lo)?, num(hi)?))
}

#[derive(Debug, Args)]
pub struct ExportSliceArgs {
    /// Volume to slice (QSMV).
    #[arg(long)]
    pub input: PathBuf,
    /// Axis normal to the slice: x, y or z.
    #[arg(long, value_parser = parse_axis, default_value = "z")]
    pub axis: usize,
    /// Slice index along the axis. Defaults to the center.
    #[arg(long)]
    pub index: Option<usize>,
    /// Display window `lo:hi` in ppm. Defaults to the volume's range.
    #[arg(long, value_parser = parse_window, allow_hyphen_values = true)]
    pub window: Option<(f64, f64)>,
    /// Output PGM.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn export_slice(a: &ExportSliceArgs, seed: u64) -> Result<()> {
    let mut m = RunManifest::new("export-slice", seed);
    let mut args = ArgList::default();
    let v = load_input("input", &a.input, &mut m, &mut args)?;
    let index = a.index.unwrap_or(v.dims()[a.axis.min(2)] / 2);
    let window = match a.window {
        Some(w) => w,
        None => {
            let lo = v.values().iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.values().iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !(lo < hi) {
                return Err(Error::config(format!("volume is constant ({lo}); pass --window lo:hi")));
            }
            (lo, hi)
        }
    };
    args.opt("axis", ["x", "y", "z"][a.axis.min(2)]).opt("index", index).opt("window", format!("{}:{}", window.0, window.1));
    m.args = args.out().0.clone();
    let img = slice_image(&v, a.axis, index, window)?;
    let (dir, name) = split_output(&a.out)?;
    write_pgm(&dir.join(&name), &img)?;
    m.outputs.push(name);
    write_manifest(&file_manifest(&a.out), &m)
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    /// Network config (key=value); its iteration count is overridden.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Iteration numbers to count, comma-separated.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1usize, 2, 3, 4])]
    pub iterations: Vec<usize>,
    /// Input extents x,y,z.
    #[arg(long, value_parser = triple::<usize>, default_value = "64,64,64")]
    pub dims: [usize; 3],
    /// Also write the table as CSV (with a manifest).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn flops(a: &FlopsArgs, seed: u64) -> Result<()> {
    let mut m = RunManifest::new("flops", seed);
    let mut args = ArgList::default();
    let base = match &a.config {
        Some(p) => {
            let p = input_path(p)?;
            args.path("config", &p);
            m.add_input("config", &p)?;
            NetworkConfig::from_kv(&read_kv(&p)?)?
        }
        None => NetworkConfig::default(),
    };
    let list = a.iterations.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
    args.opt("iterations", &list).opt("dims", a.dims.map(|d| d.to_string()).join(","));
    let mut text = String::from("iterations,flops,gflops,increment\n");
    let mut prev: Option<u64> = None;
    for &t in &a.iterations {
        let cfg = NetworkConfig { iterations: t, ..base };
        let total = count_flops(&cfg, a.dims)?.total();
        let inc = prev.map_or(String::new(), |p| (total as i128 - p as i128).to_string());
        text.push_str(&format!("{t},{total},{:.3},{inc}\n", total as f64 / 1e9));
        prev = Some(total);
    }
    print!("{text}");
    if let Some(out) = &a.out {
        m.args = args.out().0.clone();
        m.config = base.to_kv();
        let (dir, name) = split_output(out)?;
        write_text(&dir.join(&name), &text)?;
        m.outputs.push(name);
        write_manifest(&file_manifest(out), &m)?;
    }
    Ok(())
}
