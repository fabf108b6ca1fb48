use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{read_file, write_file};
use crate::dipole::{PatchPair, Volume};
use crate::error::{Error, Result};

pub const PATCH_MAGIC: &[u8; 4] = b"QPAT";
pub const PATCH_VERSION: u16 = 1;

/// Writes patch pairs that share one extent and voxel size.
pub fn write_patch_archive(path: &Path, patches: &[PatchPair]) -> Result<()> {
    let (dims, voxel) = match patches.first() {
        Some(p) => (p.field.dims(), p.field.voxel_size_mm()),
        None => return Err(Error::usage("refusing to write an empty patch archive")),
    };
    if patches.iter().any(|p| p.field.dims() != dims || p.chi.dims() != dims) {
        return Err(Error::shape("all patches in an archive must share dims"));
    }
    let n: usize = dims.iter().product();
    let mut out = Vec::with_capacity(36 + patches.len() * (12 + 8 * n));
    out.extend_from_slice(PATCH_MAGIC);
    out.write_u16::<LittleEndian>(PATCH_VERSION).unwrap();
    out.write_u16::<LittleEndian>(0).unwrap();
    out.write_u32::<LittleEndian>(patches.len() as u32).unwrap();
    for d in dims {
        out.write_u32::<LittleEndian>(d as u32).unwrap();
    }
    for s in voxel {
        out.write_f32::<LittleEndian>(s as f32).unwrap();
    }
    for p in patches {
        for o in p.origin {
            out.write_u32::<LittleEndian>(o as u32).unwrap();
        }
        for &x in p.field.values().iter().chain(p.chi.values()) {
            out.write_f32::<LittleEndian>(x as f32).unwrap();
        }
    }
    write_file(path, &out)
}

pub fn read_patch_archive(path: &Path) -> Result<Vec<PatchPair>> {
    let bytes = read_file(path)?;
    let fmt = |m: &str| Error::format(path, m.to_string());
    let eof = |_| fmt("truncated patch archive");
    let mut r = Cursor::new(bytes.as_slice());
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(eof)?;
    if &magic != PATCH_MAGIC {
        return Err(fmt("not a patch archive (bad magic)"));
    }
    if r.read_u16::<LittleEndian>().map_err(eof)? != PATCH_VERSION {
        return Err(fmt("unsupported patch archive version"));
    }
    r.read_u16::<LittleEndian>().map_err(eof)?;
    let count = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
    }
    let mut voxel = [0f64; 3];
    for s in &mut voxel {
        *s = r.read_f32::<LittleEndian>().map_err(eof)? as f64;
    }
    let n: usize = dims.iter().product();
    let expected = 36 + count * (12 + 8 * n);
    if bytes.len() != expected {
        return Err(Error::format(path, format!("archive has {} bytes, header implies {expected}", bytes.len())));
    }
    let mut out = Vec::with_capacity(count);
    let mut buf = vec![0f32; 2 * n];
    for _ in 0..count {
        let mut origin = [0usize; 3];
        for o in &mut origin {
            *o = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
        }
        r.read_f32_into::<LittleEndian>(&mut buf).map_err(eof)?;
        let field = Volume::new(dims, voxel, buf[..n].iter().map(|&v| v as f64).collect())
            .map_err(|e| Error::format(path, e.to_string()))?;
        let chi = Volume::new(dims, voxel, buf[n..].iter().map(|&v| v as f64).collect())
            .map_err(|e| Error::format(path, e.to_string()))?;
        out.push(PatchPair { origin, field, chi });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.qpat");
        let mk = |o: f64| Volume::new([2, 2, 2], [1.0; 3], (0..8).map(|i| i as f64 + o).collect()).unwrap();
        let pairs = vec![
            PatchPair { origin: [0, 1, 2], field: mk(0.5), chi: mk(-1.0) },
            PatchPair { origin: [4, 0, 0], field: mk(2.0), chi: mk(3.0) },
        ];
        write_patch_archive(&path, &pairs).unwrap();
        assert_eq!(read_patch_archive(&path).unwrap(), pairs);
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.pop();
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(read_patch_archive(&path), Err(Error::Format { .. })));
    }
}
