use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{read_file, write_file};
use crate::dipole::Volume;
use crate::error::{Error, Result};

pub const QSMV_MAGIC: &[u8; 4] = b"QSMV";
pub const QSMV_VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;
const HEADER_LEN: usize = 4 + 2 + 1 + 1 + 12 + 12;

/// Serializes `v` as float32. The mask is not stored.
pub fn encode_qsmv(v: &Volume) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * v.len());
    out.extend_from_slice(QSMV_MAGIC);
    out.write_u16::<LittleEndian>(QSMV_VERSION).unwrap();
    out.write_u8(DTYPE_F32).unwrap();
    out.write_u8(0).unwrap();
    for d in v.dims() {
        out.write_u32::<LittleEndian>(d as u32).unwrap();
    }
    for s in v.voxel_size_mm() {
        out.write_f32::<LittleEndian>(s as f32).unwrap();
    }
    for &x in v.values() {
        out.write_f32::<LittleEndian>(x as f32).unwrap();
    }
    out
}

pub fn decode_qsmv(bytes: &[u8], path: &Path) -> Result<Volume> {
    let fmt = |m: String| Error::format(path, m);
    if bytes.len() < HEADER_LEN {
        return Err(fmt(format!("{} bytes is shorter than the QSMV header", bytes.len())));
    }
    let mut r = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).unwrap();
    if &magic != QSMV_MAGIC {
        return Err(fmt("not a QSMV file (bad magic)".into()));
    }
    let version = r.read_u16::<LittleEndian>().unwrap();
    if version != QSMV_VERSION {
        return Err(fmt(format!("unsupported QSMV version {version}")));
    }
    let dtype = r.read_u8().unwrap();
    if dtype != DTYPE_F32 {
        return Err(fmt(format!("unsupported dtype {dtype}")));
    }
    let _reserved = r.read_u8().unwrap();
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = r.read_u32::<LittleEndian>().unwrap() as usize;
    }
    let mut voxel = [0f64; 3];
    for s in &mut voxel {
        *s = r.read_f32::<LittleEndian>().unwrap() as f64;
    }
    let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| fmt("dims overflow".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != 4 * n {
        return Err(fmt(format!("payload has {} bytes, dims {dims:?} need {}", payload.len(), 4 * n)));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Volume::new(dims, voxel, values).map_err(|e| fmt(e.to_string()))
}

pub fn write_qsmv(path: &Path, v: &Volume) -> Result<()> {
    write_file(path, &encode_qsmv(v))
}

pub fn read_qsmv(path: &Path) -> Result<Volume> {
    decode_qsmv(&read_file(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let v = Volume::new([2, 1, 1], [1.0, 0.5, 2.0], vec![1.0, -2.5]).unwrap();
        let b = encode_qsmv(&v);
        assert_eq!(&b[..4], b"QSMV");
        assert_eq!(&b[4..8], &[1, 0, 0, 0]);
        assert_eq!(&b[8..12], &[2, 0, 0, 0]);
        assert_eq!(&b[20..24], &1.0f32.to_le_bytes());
        assert_eq!(&b[32..36], &1.0f32.to_le_bytes());
        assert_eq!(&b[36..40], &(-2.5f32).to_le_bytes());
        assert_eq!(b.len(), 40);
    }

    #[test]
    fn round_trip() {
        let v = Volume::new([3, 2, 2], [0.9, 0.9, 1.5], (0..12).map(|i| i as f64 * 0.25 - 1.0).collect()).unwrap();
        let back = decode_qsmv(&encode_qsmv(&v), Path::new("v")).unwrap();
        assert_eq!(back.dims(), v.dims());
        assert_eq!(back.values(), v.values());
        assert_eq!(encode_qsmv(&back), encode_qsmv(&v));
    }

    #[test]
    fn malformed_inputs() {
        let v = Volume::zeros([2, 2, 2], [1.0; 3]).unwrap();
        let good = encode_qsmv(&v);
        for bad in [&good[..10], &good[..good.len() - 1]] {
            assert!(matches!(decode_qsmv(bad, Path::new("x")), Err(Error::Format { .. })));
        }
        let mut b = good.clone();
        b[6] = 1;
        assert!(decode_qsmv(&b, Path::new("x")).is_err());
        let mut b = good;
        b.push(0);
        assert!(decode_qsmv(&b, Path::new("x")).is_err());
    }
}
