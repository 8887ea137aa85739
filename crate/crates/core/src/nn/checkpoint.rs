//! Versioned binary checkpoints: a JSON header (network description plus
//! caller metadata) followed by named little-endian `f32` tensors.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::scalar::Scalar;
use super::spec::NetworkSpec;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CTSCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    spec: NetworkSpec,
    meta: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn tensors_as<T: Scalar>(&self) -> Vec<(String, Tensor<T>)> {
        self.tensors
            .iter()
            .map(|(n, t)| (n.clone(), t.cast()))
            .collect()
    }
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    spec: &NetworkSpec,
    meta: &serde_json::Value,
    tensors: &[(String, Tensor<T>)],
) -> Result<()> {
    let io = |e| Error::io(path, e);
    let header = serde_json::to_vec(&Header {
        spec: spec.clone(),
        meta: meta.clone(),
    })
    .map_err(|e| Error::json(path, e))?;
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION).map_err(io)?;
    w.write_u64::<LittleEndian>(header.len() as u64).map_err(io)?;
    w.write_all(&header).map_err(io)?;
    w.write_u32::<LittleEndian>(tensors.len() as u32).map_err(io)?;
    for (name, t) in tensors {
        w.write_u32::<LittleEndian>(name.len() as u32).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        w.write_u32::<LittleEndian>(t.shape().len() as u32).map_err(io)?;
        for &d in t.shape() {
            w.write_u64::<LittleEndian>(d as u64).map_err(io)?;
        }
        for &v in t.data() {
            w.write_f32::<LittleEndian>(v.as_f64() as f32).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    let io = |e: std::io::Error| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Checkpoint(format!("{}: truncated file", path.display()))
        } else {
            Error::io(path, e)
        }
    };
    let mut r = BufReader::new(File::open(path).map_err(io)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io)?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let len = r.read_u64::<LittleEndian>().map_err(io)? as usize;
    let mut header = vec![0u8; len];
    r.read_exact(&mut header).map_err(io)?;
    let header: Header = serde_json::from_slice(&header).map_err(|e| Error::json(path, e))?;
    let count = r.read_u32::<LittleEndian>().map_err(io)?;
    let mut tensors = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let n = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let mut name = vec![0u8; n];
        r.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
        let rank = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let shape = (0..rank)
            .map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(io)?;
        let mut data = vec![0f32; shape.iter().product()];
        r.read_f32_into::<LittleEndian>(&mut data).map_err(io)?;
        tensors.push((name, Tensor::from_vec(&shape, data)?));
    }
    header.spec.validate()?;
    Ok(Checkpoint {
        spec: header.spec,
        meta: header.meta,
        tensors,
    })
}
