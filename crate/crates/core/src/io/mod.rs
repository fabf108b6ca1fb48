//! On-disk formats: QSMV volumes, QPAT patch archives and PGM slices.
//! Layouts are documented in FORMATS.md at the repository root.

mod patches;
mod pgm;
mod qsmv;

pub use patches::{read_patch_archive, write_patch_archive, PATCH_MAGIC, PATCH_VERSION};
pub use pgm::{export_slice, window_value, write_pgm, SliceImage};
pub use qsmv::{decode_qsmv, encode_qsmv, read_qsmv, write_qsmv, QSMV_MAGIC, QSMV_VERSION};

use std::path::Path;

use crate::error::{Error, Result};

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Parses an ROI legend: one `label name` pair per line, `#` comments and
/// blank lines ignored. Names may contain spaces.
pub fn parse_legend(text: &str, path: &Path) -> Result<std::collections::BTreeMap<u32, String>> {
    let mut out = std::collections::BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (label, name) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
        let label: u32 = label
            .parse()
            .map_err(|_| Error::format(path, format!("line {}: `{label}` is not a label number", n + 1)))?;
        let name = name.trim();
        if label == 0 || name.is_empty() {
            return Err(Error::format(path, format!("line {}: expected `<label ≥ 1> <name>`", n + 1)));
        }
        if out.insert(label, name.to_string()).is_some() {
            return Err(Error::format(path, format!("line {}: label {label} listed twice", n + 1)));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn legend_parsing() {
        let m = parse_legend("# deep gray matter\n1 GP\n2  PU\n\n5 red nucleus\n", Path::new("l")).unwrap();
        assert_eq!(m[&1], "GP");
        assert_eq!(m[&2], "PU");
        assert_eq!(m[&5], "red nucleus");
        for bad in ["x GP", "0 bg", "3", "1 a\n1 b"] {
            assert!(parse_legend(bad, Path::new("l")).is_err(), "{bad}");
        }
    }
}
