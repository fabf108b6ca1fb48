//! Checkpoint container: metadata echo plus named f32 arrays.
//!
//! ```text
//! magic    8 bytes  "IR2QCKPT"
//! version  u32      1
//! meta_len u32      followed by meta_len bytes of UTF-8 key=value text
//! count    u32      number of arrays
//! per array:
//!   name_len u32, name (UTF-8)
//!   ndim     u32, ndim × u32 extents
//!   payload  product(extents) × f32
//! ```
//! All integers and floats are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{Network, NetworkConfig};
use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"IR2QCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: KeyValues,
    pub arrays: Vec<NamedArray>,
}

fn to_f32<F: Real>(s: &[F]) -> Vec<f32> {
    s.iter().map(|v| v.to_f64_lossy() as f32).collect()
}

fn from_f32<F: Real>(s: &[f32]) -> Vec<F> {
    s.iter().map(|&v| F::from_f64_lossy(v as f64)).collect()
}

impl Checkpoint {
    pub fn array(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    /// Captures parameters, Adam moments and batch-norm statistics. `extra`
    /// is merged into the metadata after the network config.
    pub fn from_network<F: Real>(net: &Network<F>, extra: &KeyValues) -> Self {
        let mut meta = net.config().to_kv();
        let step = net.params().first().map_or(0, |p| p.step_count());
        meta.insert("adam_step", step);
        meta.extend(extra);
        let mut arrays = Vec::new();
        for (name, p) in net.param_names().iter().zip(net.params()) {
            let shape = p.value.shape().to_vec();
            let (m, v) = p.moments();
            arrays.push(NamedArray { name: name.clone(), shape: shape.clone(), data: to_f32(p.value.data()) });
            arrays.push(NamedArray { name: format!("{name}/adam_m"), shape: shape.clone(), data: to_f32(m) });
            arrays.push(NamedArray { name: format!("{name}/adam_v"), shape, data: to_f32(v) });
        }
        for (name, s) in net.running_stats() {
            let c = s.mean.len();
            arrays.push(NamedArray { name: format!("{name}/running_mean"), shape: vec![c], data: to_f32(&s.mean) });
            arrays.push(NamedArray { name: format!("{name}/running_var"), shape: vec![c], data: to_f32(&s.var) });
        }
        Checkpoint { meta, arrays }
    }

    /// Rebuilds a network from the metadata and arrays. Every expected array
    /// must be present with the right shape.
    pub fn to_network<F: Real>(&self) -> Result<Network<F>> {
        let cfg = NetworkConfig::from_kv(&self.meta)?;
        let mut net = Network::<F>::zeros(&cfg)?;
        let step: u64 = self.meta.parsed_or("adam_step", 0)?;
        let fetch = |name: &str, shape: &[usize]| -> Result<Vec<F>> {
            let a = self.array(name).ok_or_else(|| Error::config(format!("checkpoint lacks array `{name}`")))?;
            if a.shape != shape {
                return Err(Error::shape(format!("checkpoint array `{name}` has shape {:?}, expected {shape:?}", a.shape)));
            }
            Ok(from_f32(&a.data))
        };
        let names = net.param_names().to_vec();
        for (name, p) in names.iter().zip(net.params_mut()) {
            let shape = p.value.shape().to_vec();
            p.value = Tensor::from_vec(&shape, fetch(name, &shape)?)?;
            let m = fetch(&format!("{name}/adam_m"), &shape)?;
            let v = fetch(&format!("{name}/adam_v"), &shape)?;
            p.set_optimizer_state(m, v, step)?;
        }
        for (name, s) in net.running_stats_mut() {
            let c = [s.mean.len()];
            s.mean = fetch(&format!("{name}/running_mean"), &c)?;
            s.var = fetch(&format!("{name}/running_var"), &c)?;
        }
        Ok(net)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        let meta = self.meta.to_text();
        w.write_u32::<LittleEndian>(meta.len() as u32)?;
        w.write_all(meta.as_bytes())?;
        w.write_u32::<LittleEndian>(self.arrays.len() as u32)?;
        for a in &self.arrays {
            w.write_u32::<LittleEndian>(a.name.len() as u32)?;
            w.write_all(a.name.as_bytes())?;
            w.write_u32::<LittleEndian>(a.shape.len() as u32)?;
            for &d in &a.shape {
                w.write_u32::<LittleEndian>(d as u32)?;
            }
            let mut buf = Vec::with_capacity(a.data.len() * 4);
            for &v in &a.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R, path: &Path) -> Result<Self> {
        let fmt = |reason: String| Error::format(path, reason);
        let io = |e: std::io::Error| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::format(path, "truncated checkpoint")
            } else {
                Error::io(path, e)
            }
        };
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(fmt("not a checkpoint (bad magic)".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(io)?;
        if version != CHECKPOINT_VERSION {
            return Err(fmt(format!("unsupported checkpoint version {version}")));
        }
        let read_string = |r: &mut R, len: usize| -> Result<String> {
            let mut b = vec![0u8; len];
            r.read_exact(&mut b).map_err(io)?;
            String::from_utf8(b).map_err(|_| fmt("non-UTF-8 text".into()))
        };
        let meta_len = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let meta = KeyValues::parse(&read_string(r, meta_len)?)?;
        let count = r.read_u32::<LittleEndian>().map_err(io)?;
        let mut arrays = Vec::new();
        for _ in 0..count {
            let name_len = r.read_u32::<LittleEndian>().map_err(io)? as usize;
            let name = read_string(r, name_len)?;
            let ndim = r.read_u32::<LittleEndian>().map_err(io)?;
            if ndim > 8 {
                return Err(fmt(format!("array `{name}` has {ndim} dimensions")));
            }
            let shape = (0..ndim)
                .map(|_| r.read_u32::<LittleEndian>().map(|d| d as usize).map_err(io))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut data = vec![0f32; n];
            r.read_f32_into::<LittleEndian>(&mut data).map_err(io)?;
            arrays.push(NamedArray { name, shape, data });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(io)? != 0 {
            return Err(fmt("trailing bytes after last array".into()));
        }
        Ok(Checkpoint { meta, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut std::io::BufReader::new(file), path)
    }
}
