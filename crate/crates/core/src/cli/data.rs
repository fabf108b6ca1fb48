use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};

use ir2qsm::dipole::{extract_patches, forward_field, generate_phantom, make_dipole_kernel, PatchPair, PhantomSpec, PHANTOM_KEYS};
use ir2qsm::error::{Error, Result};
use ir2qsm::io::{read_patch_archive, write_patch_archive, write_qsmv};
use ir2qsm::kv::KeyValues;
use ir2qsm::manifest::RunManifest;
use ir2qsm::net::{count_flops, Checkpoint, Network};
use ir2qsm::train::{epoch_rng, train_epochs, train_loop, validate_network, TrainConfig};

use super::{create_dir, dir_manifest, input_path, read_kv, write_manifest, write_text, ArgList};

pub const PATCH_ARCHIVE: &str = "patches.qpat";

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Phantom spec (key=value). Defaults apply to missing keys.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Number of phantoms.
    #[arg(long)]
    pub count: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

fn resolve_config(path: Option<&Path>, seed: u64) -> Result<(Option<PathBuf>, KeyValues)> {
    let Some(p) = path else {
        let mut kv = KeyValues::new();
        kv.insert("seed", seed);
        return Ok((None, kv));
    };
    let p = input_path(p)?;
    let mut kv = read_kv(&p)?;
    if !kv.contains("seed") {
        kv.insert("seed", seed);
    }
    Ok((Some(p), kv))
}

pub fn generate(a: &GenerateArgs, seed: u64) -> Result<()> {
    let (spec_path, kv) = resolve_config(a.spec.as_deref(), seed)?;
    let allowed: Vec<&str> = PHANTOM_KEYS.iter().copied().chain(["patch", "stride"]).collect();
    kv.check_known(&allowed)?;
    let spec = PhantomSpec::from_kv(&kv)?;
    let patch: [usize; 3] = kv.array("patch")?.unwrap_or(spec.dims.map(|d| d.min(64)));
    let stride: [usize; 3] = kv.array("stride")?.unwrap_or([24, 36, 20]);

    let mut m = RunManifest::new("generate", seed);
    let mut args = ArgList::default();
    if let Some(p) = &spec_path {
        args.path("spec", p);
        m.add_input("spec", p)?;
    }
    args.opt("count", a.count).out();
    m.args = args.0;
    m.config = spec.to_kv();
    m.config.insert("count", a.count);
    m.config.insert_list("patch", &patch);
    m.config.insert_list("stride", &stride);

    create_dir(&a.out)?;
    let kernel = make_dipole_kernel(spec.dims, spec.voxel_size_mm)?;
    let mut patches: Vec<PatchPair> = Vec::new();
    for i in 0..a.count {
        let s = PhantomSpec { seed: spec.seed.wrapping_add(i as u64), ..spec.clone() };
        let chi = generate_phantom(&s)?;
        // the stored float32 map is the source of the stored field
        let chi = chi.with_values(chi.values().iter().map(|&v| v as f32 as f64).collect())?;
        let field = forward_field(&chi, &kernel)?;
        let (cn, fname) = (format!("chi_{i:04}.qsmv"), format!("field_{i:04}.qsmv"));
        write_qsmv(&a.out.join(&cn), &chi)?;
        write_qsmv(&a.out.join(&fname), &field)?;
        m.outputs.extend([cn, fname]);
        patches.extend(extract_patches(&chi, &field, patch, stride)?);
    }
    if !patches.is_empty() {
        write_patch_archive(&a.out.join(PATCH_ARCHIVE), &patches)?;
        m.outputs.push(PATCH_ARCHIVE.into());
    }
    log::info!("generated {} phantoms and {} patches in {}", a.count, patches.len(), a.out.display());
    write_manifest(&dir_manifest(&a.out), &m)
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory holding a patch archive from `generate`.
    #[arg(long)]
    pub data: PathBuf,
    /// Training config (key=value). Defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for checkpoints and history.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

fn load_dataset(data: &Path, m: &mut RunManifest, args: &mut ArgList) -> Result<Vec<PatchPair>> {
    let archive = data.join(PATCH_ARCHIVE);
    if !archive.is_file() {
        return Err(Error::Usage(format!(
            "no patch archive at {}; create one with `ir2qsm generate --count N --out {}`",
            archive.display(),
            data.display()
        )));
    }
    let data = input_path(data)?;
    args.path("data", &data);
    m.add_input("patches", &data.join(PATCH_ARCHIVE))?;
    read_patch_archive(&data.join(PATCH_ARCHIVE))
}

fn epoch_checkpoint(epoch: usize) -> String {
    format!("ckpt_epoch_{epoch:04}.ckpt")
}

pub fn train(a: &TrainArgs, seed: u64) -> Result<()> {
    let (cfg_path, kv) = resolve_config(a.config.as_deref(), seed)?;
    let cfg = TrainConfig::from_kv(&kv)?;
    let mut m = RunManifest::new("train", seed);
    let mut args = ArgList::default();
    let dataset = load_dataset(&a.data, &mut m, &mut args)?;
    if let Some(p) = &cfg_path {
        args.path("config", p);
        m.add_input("config", p)?;
    }

    let (net, first_epoch) = match &a.resume {
        Some(p) => {
            let p = input_path(p)?;
            args.path("resume", &p);
            m.add_input("resume", &p)?;
            let ckpt = Checkpoint::load(&p)?;
            let net: Network<f32> = ckpt.to_network()?;
            if net.config() != &cfg.network {
                return Err(Error::Config(format!(
                    "checkpoint {} was trained with a different network config",
                    p.display()
                )));
            }
            let done: usize = ckpt.meta.required("epoch")?;
            if done >= cfg.epochs {
                return Err(Error::Usage(format!(
                    "checkpoint is at epoch {done}; raise `epochs` above {done} to continue"
                )));
            }
            (net, done + 1)
        }
        None => (Network::build(&cfg.network, &mut epoch_rng(cfg.seed, 0))?, 1),
    };
    m.args = args.out().0.clone();
    m.config = cfg.to_kv();

    create_dir(&a.out)?;
    write_text(&a.out.join("config.txt"), &cfg.to_kv().to_text())?;
    m.outputs.push("config.txt".into());
    log::info!("training on {} patches, epochs {first_epoch}..={}", dataset.len(), cfg.epochs);
    let save = |net: &Network<f32>, epoch: usize, name: &str| {
        let mut extra = cfg.to_kv();
        extra.insert("epoch", epoch);
        Checkpoint::from_network(net, &extra).save(&a.out.join(name))
    };
    let mut written = Vec::new();
    let (net, history) = train_epochs(&dataset, net, &cfg, first_epoch, |net, epoch, _| {
        if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
            let name = epoch_checkpoint(epoch);
            save(net, epoch, &name)?;
            written.push(name);
        }
        Ok(())
    })?;
    m.outputs.extend(written);
    save(&net, cfg.epochs, "final.ckpt")?;
    write_text(&a.out.join("history.csv"), &history.to_csv())?;
    m.outputs.extend(["final.ckpt".into(), "history.csv".into()]);
    if let Some(l) = history.final_loss() {
        log::info!("final loss {l:.6e}");
    }
    write_manifest(&dir_manifest(&a.out), &m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StudyKind {
    /// Vary the iteration number T.
    Iterations,
    /// Toggle reverse concatenation and the recurrent module.
    RcRm,
    /// Vary the dropout rate.
    Dropout,
}

#[derive(Debug, Args)]
pub struct StudyArgs {
    /// Directory holding a patch archive from `generate`.
    #[arg(long)]
    pub data: PathBuf,
    /// Base training config shared by every variant.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for study.csv.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub kind: StudyKind,
    /// Values to sweep (iterations or dropout rates), comma-separated.
    #[arg(long, value_delimiter = ',')]
    pub values: Vec<f64>,
    /// Patches held out for validation, taken from the end of the archive.
    /// Defaults to a tenth of the archive (at least one).
    #[arg(long)]
    pub val_count: Option<usize>,
}

pub fn study(a: &StudyArgs, seed: u64) -> Result<()> {
    let (cfg_path, kv) = resolve_config(a.config.as_deref(), seed)?;
    let base = TrainConfig::from_kv(&kv)?;
    let mut m = RunManifest::new("study", seed);
    let mut args = ArgList::default();
    let dataset = load_dataset(&a.data, &mut m, &mut args)?;
    if let Some(p) = &cfg_path {
        args.path("config", p);
        m.add_input("config", p)?;
    }
    let kind = a.kind.to_possible_value().expect("no skipped variants").get_name().to_string();
    args.opt("kind", &kind);
    if !a.values.is_empty() {
        args.opt("values", a.values.iter().map(f64::to_string).collect::<Vec<_>>().join(","));
    }
    let val_count = a.val_count.unwrap_or((dataset.len() / 10).max(1));
    args.opt("val-count", val_count);
    m.args = args.out().0.clone();
    if val_count == 0 || val_count >= dataset.len() {
        return Err(Error::Usage(format!("val-count {val_count} must leave 1..{} training patches", dataset.len())));
    }
    let (train_set, val_set) = dataset.split_at(dataset.len() - val_count);

    let variants: Vec<(String, TrainConfig)> = match a.kind {
        StudyKind::Iterations => {
            let vs = if a.values.is_empty() { vec![1.0, 2.0, 3.0, 4.0] } else { a.values.clone() };
            vs.iter()
                .map(|&v| {
                    if v < 1.0 || v.fract() != 0.0 {
                        return Err(Error::Usage(format!("iteration count {v} is not a positive integer")));
                    }
                    let mut c = base.clone();
                    c.network.iterations = v as usize;
                    Ok((format!("T={v}"), c))
                })
                .collect::<Result<_>>()?
        }
        StudyKind::RcRm => [(true, true), (true, false), (false, true), (false, false)]
            .into_iter()
            .map(|(rc, rm)| {
                let mut c = base.clone();
                c.network.reverse_concat = rc;
                c.network.recurrent_module = rm;
                (format!("{}RC+{}RM", if rc { "" } else { "no " }, if rm { "" } else { "no " }), c)
            })
            .collect(),
        StudyKind::Dropout => {
            let vs = if a.values.is_empty() { vec![0.0, 0.05, 0.1, 0.2] } else { a.values.clone() };
            vs.iter()
                .map(|&v| {
                    let mut c = base.clone();
                    c.network.dropout_rate = v;
                    (format!("dropout={v}"), c)
                })
                .collect()
        }
    };
    m.config = base.to_kv();
    m.config.insert("study_kind", &kind);
    m.config.insert("val_count", val_count);

    create_dir(&a.out)?;
    let dims = train_set[0].field.dims();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "variant",
        "iterations",
        "reverse_concat",
        "recurrent_module",
        "dropout_rate",
        "parameters",
        "flops",
        "final_loss",
        "val_nrmse_percent",
        "val_hfen_percent",
        "val_ssim",
    ])
    .expect("in-memory write");
    for (name, cfg) in &variants {
        cfg.validate()?;
        log::info!("study variant {name}");
        let net = Network::build(&cfg.network, &mut epoch_rng(cfg.seed, 0))?;
        let params = net.parameter_count();
        let (net, history) = train_loop(train_set, net, cfg)?;
        let scores = validate_network(&net, val_set)?;
        let flops = count_flops(&cfg.network, dims)?.total();
        let n = &cfg.network;
        w.write_record([
            name.clone(),
            n.iterations.to_string(),
            n.reverse_concat.to_string(),
            n.recurrent_module.to_string(),
            n.dropout_rate.to_string(),
            params.to_string(),
            flops.to_string(),
            history.final_loss().unwrap_or(f64::NAN).to_string(),
            scores.nrmse_percent.to_string(),
            scores.hfen_percent.to_string(),
            scores.ssim.to_string(),
        ])
        .expect("in-memory write");
        log::info!("{name}: val NRMSE {:.3} %, SSIM {:.4}", scores.nrmse_percent, scores.ssim);
    }
    let text = String::from_utf8(w.into_inner().expect("in-memory flush")).expect("UTF-8 output");
    write_text(&a.out.join("study.csv"), &text)?;
    m.outputs.push("study.csv".into());
    print!("{text}");
    write_manifest(&dir_manifest(&a.out), &m)
}
