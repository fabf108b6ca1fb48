//! Run manifests: a key=value record of a CLI invocation that is sufficient
//! to replay it. Manifests carry no timestamps or host details, so replays
//! reproduce them byte for byte.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kv::KeyValues;

pub const MANIFEST_FILE: &str = "manifest.txt";
/// Stands in for the output location inside recorded arguments.
pub const OUT_PLACEHOLDER: &str = "{out}";

/// Git-style blob hash with SHA-256: `sha256("blob <len>\0" ‖ content)`.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

pub fn hash_file(path: &Path) -> Result<String> {
    Ok(content_hash(&std::fs::read(path).map_err(|e| Error::io(path, e))?))
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    /// Subcommand arguments with the output location replaced by
    /// `OUT_PLACEHOLDER`. Global flags are not included.
    pub args: Vec<String>,
    /// Named input files and their content hashes, sorted by name.
    pub inputs: Vec<(String, PathBuf, String)>,
    /// Resolved configuration echo.
    pub config: KeyValues,
    /// Output files relative to the output location, in write order.
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64) -> Self {
        RunManifest { command: command.into(), seed, ..Default::default() }
    }

    /// Records an input file and its hash.
    pub fn add_input(&mut self, name: &str, path: &Path) -> Result<()> {
        let hash = hash_file(path)?;
        self.inputs.push((name.into(), path.to_path_buf(), hash));
        self.inputs.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(())
    }

    /// Hash over every input name and content hash, in name order.
    pub fn inputs_hash(&self) -> String {
        let mut text = String::new();
        for (name, _, hash) in &self.inputs {
            text.push_str(&format!("{name} {hash}\n"));
        }
        content_hash(text.as_bytes())
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.insert("tool", "ir2qsm");
        kv.insert("tool_version", env!("CARGO_PKG_VERSION"));
        kv.insert("command", &self.command);
        kv.insert("seed", self.seed);
        kv.insert("args.count", self.args.len());
        for (i, a) in self.args.iter().enumerate() {
            kv.insert(&format!("args.{i:03}"), a);
        }
        for (name, path, hash) in &self.inputs {
            kv.insert(&format!("input.{name}.path"), path.display());
            kv.insert(&format!("input.{name}.hash"), hash);
        }
        kv.insert("inputs_hash", self.inputs_hash());
        for (k, v) in self.config.iter() {
            kv.insert(&format!("config.{k}"), v);
        }
        kv.insert_list("outputs", &self.outputs);
        kv
    }

    pub fn to_text(&self) -> String {
        format!("# ir2qsm run manifest\n{}", self.to_kv().to_text())
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let kv = KeyValues::parse(text).map_err(|e| Error::format(path, e.to_string()))?;
        let fmt = |m: String| Error::format(path, m);
        if kv.get("tool") != Some("ir2qsm") {
            return Err(fmt("not an ir2qsm run manifest".into()));
        }
        let need = |k: &str| kv.get(k).map(str::to_string).ok_or_else(|| fmt(format!("missing `{k}`")));
        let seed = need("seed")?.parse().map_err(|_| fmt("bad `seed`".into()))?;
        let n: usize = need("args.count")?.parse().map_err(|_| fmt("bad `args.count`".into()))?;
        let args = (0..n).map(|i| need(&format!("args.{i:03}"))).collect::<Result<Vec<_>>>()?;
        let mut inputs = Vec::new();
        let mut config = KeyValues::new();
        for (k, v) in kv.iter() {
            if let Some(name) = k.strip_prefix("input.").and_then(|r| r.strip_suffix(".path")) {
                inputs.push((name.to_string(), PathBuf::from(v), need(&format!("input.{name}.hash"))?));
            } else if let Some(c) = k.strip_prefix("config.") {
                config.insert(c, v);
            }
        }
        let outputs = match kv.get("outputs") {
            Some("") | None => Vec::new(),
            Some(s) => s.split(',').map(str::to_string).collect(),
        };
        let m = RunManifest { command: need("command")?, seed, args, inputs, config, outputs };
        if need("inputs_hash")? != m.inputs_hash() {
            return Err(fmt("inputs_hash does not match the listed inputs".into()));
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Checks that every recorded input still has its recorded content.
    pub fn verify_inputs(&self) -> Result<()> {
        for (name, path, hash) in &self.inputs {
            let now = hash_file(path)?;
            if &now != hash {
                return Err(Error::config(format!(
                    "input `{name}` ({}) changed since the manifest was written",
                    path.display()
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn git_style_hash() {
        // sha256 of "blob 0\0", the empty blob id in SHA-256 repositories
        assert_eq!(content_hash(b""), "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813");
    }

    #[test]
    fn text_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("spec.txt");
        std::fs::write(&input, "dims=16,16,16\n").unwrap();
        let mut m = RunManifest::new("generate", 7);
        m.args = vec!["--count".into(), "2".into(), "--out".into(), OUT_PLACEHOLDER.into()];
        m.add_input("spec", &input).unwrap();
        m.config.insert("dims", "16,16,16");
        m.outputs = vec!["chi_0000.qsmv".into(), "field_0000.qsmv".into()];
        let back = RunManifest::parse(&m.to_text(), Path::new("m")).unwrap();
        assert_eq!(back, m);
        assert!(back.verify_inputs().is_ok());
        std::fs::write(&input, "dims=8,8,8\n").unwrap();
        assert!(matches!(back.verify_inputs(), Err(Error::Config(_))));
    }
}
