//! Command-line surface. Every command records a run manifest next to its
//! outputs; `rerun` replays one.

mod data;
mod inspect;

use std::fmt::Display;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use ir2qsm::error::{Error, Result};
use ir2qsm::kv::KeyValues;
use ir2qsm::manifest::{RunManifest, MANIFEST_FILE, OUT_PLACEHOLDER};

#[derive(Debug, Parser)]
#[command(name = "ir2qsm", version, about = "Synthetic QSM data, IR2QSM training, reconstruction and evaluation")]
pub struct Cli {
    /// Seed used when a config or spec file does not set one.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for tensor kernels. Outputs do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize phantoms, their fields and a training patch archive.
    Generate(data::GenerateArgs),
    /// Train a network on a generated patch archive.
    Train(data::TrainArgs),
    /// Compare network variants on a held-out split.
    Study(data::StudyArgs),
    /// Reconstruct susceptibility from a field volume.
    Reconstruct(inspect::ReconstructArgs),
    /// Score a reconstruction against a reference.
    Evaluate(inspect::EvaluateArgs),
    /// Write one plane of a volume as a 16-bit PGM image.
    ExportSlice(inspect::ExportSliceArgs),
    /// Count forward-pass FLOPs per iteration number.
    Flops(inspect::FlopsArgs),
    /// Replay a command from its run manifest.
    Rerun(RerunArgs),
}

#[derive(Debug, Args)]
pub struct RerunArgs {
    pub manifest: PathBuf,
    /// New output location (directory or file, as the original command
    /// expects). Defaults to the original location next to the manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Usage("--threads must be at least 1".into()));
        }
        // a pool built earlier in this process (rerun) is kept
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let seed = cli.seed;
    match cli.command {
        Command::Generate(a) => data::generate(&a, seed),
        Command::Train(a) => data::train(&a, seed),
        Command::Study(a) => data::study(&a, seed),
        Command::Reconstruct(a) => inspect::reconstruct(&a, seed),
        Command::Evaluate(a) => inspect::evaluate(&a, seed),
        Command::ExportSlice(a) => inspect::export_slice(&a, seed),
        Command::Flops(a) => inspect::flops(&a, seed),
        Command::Rerun(a) => rerun(&a),
    }
}

/// Whether a command's `--out` names a directory (true) or a file.
fn writes_directory(command: &str) -> bool {
    matches!(command, "generate" | "train" | "study")
}

fn rerun(a: &RerunArgs) -> Result<()> {
    let m = RunManifest::load(&a.manifest)?;
    m.verify_inputs()?;
    let here = a.manifest.parent().unwrap_or(Path::new("."));
    let out = match &a.out {
        Some(p) => p.clone(),
        None if writes_directory(&m.command) => here.to_path_buf(),
        None => {
            let primary = m.outputs.first().ok_or_else(|| Error::format(&a.manifest, "manifest lists no outputs"))?;
            here.join(primary)
        }
    };
    let mut argv = vec!["ir2qsm".to_string(), "--seed".into(), m.seed.to_string(), m.command.clone()];
    argv.extend(m.args.iter().map(|s| if s == OUT_PLACEHOLDER { out.display().to_string() } else { s.clone() }));
    log::info!("replaying `{}` into {}", m.command, out.display());
    let cli = Cli::try_parse_from(&argv).map_err(|e| Error::format(&a.manifest, format!("recorded arguments do not parse: {e}")))?;
    if matches!(cli.command, Command::Rerun(_)) {
        return Err(Error::format(&a.manifest, "a manifest cannot replay another rerun"));
    }
    run(cli)
}

/// Recorded subcommand arguments in canonical form.
#[derive(Default)]
struct ArgList(Vec<String>);

impl ArgList {
    fn opt(&mut self, name: &str, value: impl Display) -> &mut Self {
        self.0.push(format!("--{name}"));
        self.0.push(value.to_string());
        self
    }

    fn path(&mut self, name: &str, p: &Path) -> &mut Self {
        self.opt(name, p.display())
    }

    fn switch(&mut self, name: &str, on: bool) -> &mut Self {
        if on {
            self.0.push(format!("--{name}"));
        }
        self
    }

    fn out(&mut self) -> &mut Self {
        self.opt("out", OUT_PLACEHOLDER)
    }
}

/// Absolute path of an existing input; a missing file is an I/O error that
/// names the path.
fn input_path(p: &Path) -> Result<PathBuf> {
    std::fs::canonicalize(p).map_err(|e| Error::Io { path: p.to_path_buf(), source: e })
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::Io { path: p.to_path_buf(), source: e })
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    std::fs::write(p, text).map_err(|e| Error::Io { path: p.to_path_buf(), source: e })
}

fn read_kv(p: &Path) -> Result<KeyValues> {
    let text = std::fs::read_to_string(p).map_err(|e| Error::Io { path: p.to_path_buf(), source: e })?;
    KeyValues::parse(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", p.display())),
        other => other,
    })
}

/// Manifest location for a run writing into directory `dir`.
fn dir_manifest(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_FILE)
}

/// Manifest location for a run whose primary output is the file `out`.
fn file_manifest(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.txt");
    out.with_file_name(name)
}

/// Parent directory of an output file, created if needed, and the file name.
fn split_output(out: &Path) -> Result<(PathBuf, String)> {
    let name = out
        .file_name()
        .ok_or_else(|| Error::Usage(format!("output `{}` has no file name", out.display())))?
        .to_string_lossy()
        .into_owned();
    let dir = match out.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    create_dir(&dir)?;
    Ok((dir, name))
}

fn write_manifest(path: &Path, m: &RunManifest) -> Result<()> {
    write_text(path, &m.to_text())?;
    log::info!("wrote {}", path.display());
    Ok(())
}

/// Parses `a,b,c` into three values.
fn triple<T: std::str::FromStr>(s: &str) -> std::result::Result<[T; 3], String> {
    let v: Vec<T> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("`{p}` is not a valid number")))
        .collect::<std::result::Result<_, _>>()?;
    <[T; 3]>::try_from(v).map_err(|_| format!("expected three comma-separated values, got `{s}`"))
}
