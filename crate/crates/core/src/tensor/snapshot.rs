//! Weight snapshot file.
//!
//! ```text
//! "NVW1"  u32 tensor_count
//! repeat: u32 name_len, name (UTF-8), u32 rank, u32 dims[rank], f32 payload (row-major)
//! ```
//! All integers and floats little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::Tensor;
use crate::error::{Error, Result};

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"NVW1";

/// Ordered collection of named `f32` tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Snapshot {
    tensors: Vec<(String, Tensor<f32>)>,
}

impl Snapshot {
    pub fn new() -> Self {
        Snapshot::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<f32>) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn tensors(&self) -> &[(String, Tensor<f32>)] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        write_snapshot(&mut buf, self).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let snap = read_snapshot(&mut bytes)?;
        if !bytes.is_empty() {
            return Err(Error::parse(
                "weight snapshot",
                format!("{} trailing bytes after last tensor", bytes.len()),
            ));
        }
        Ok(snap)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn write_snapshot<W: Write>(w: &mut W, snap: &Snapshot) -> std::io::Result<()> {
    w.write_all(SNAPSHOT_MAGIC)?;
    w.write_u32::<LittleEndian>(snap.tensors.len() as u32)?;
    for (name, t) in &snap.tensors {
        w.write_u32::<LittleEndian>(name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        w.write_u32::<LittleEndian>(t.rank() as u32)?;
        for &d in t.shape() {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        for &v in t.data() {
            w.write_f32::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

fn truncated(what: &str) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::parse("weight snapshot", format!("truncated while reading {what}: {e}"))
}

pub fn read_snapshot<R: Read>(r: &mut R) -> Result<Snapshot> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated("magic"))?;
    if &magic != SNAPSHOT_MAGIC {
        return Err(Error::parse(
            "weight snapshot",
            format!("bad magic {magic:?}, expected \"NVW1\""),
        ));
    }
    let count = r.read_u32::<LittleEndian>().map_err(truncated("tensor count"))?;
    let mut snap = Snapshot::new();
    for i in 0..count {
        let len = r.read_u32::<LittleEndian>().map_err(truncated("name length"))? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(truncated("name"))?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::parse("weight snapshot", format!("tensor {i} name is not UTF-8")))?;
        let rank = r.read_u32::<LittleEndian>().map_err(truncated("rank"))? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.read_u32::<LittleEndian>().map_err(truncated("dims"))? as usize);
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::parse("weight snapshot", format!("`{name}` dims overflow")))?;
        let mut data = vec![0f32; numel];
        r.read_f32_into::<LittleEndian>(&mut data)
            .map_err(truncated("payload"))?;
        let t = Tensor::new(&dims, data)
            .map_err(|e| Error::parse("weight snapshot", format!("`{name}`: {e}")))?;
        snap.push(name, t);
    }
    Ok(snap)
}
