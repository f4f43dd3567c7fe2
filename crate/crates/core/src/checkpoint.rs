//! Binary checkpoints.
//!
//! Layout (little-endian): magic `DEMRCK01`, `u32` version, `u64` config
//! hash, `u64` optimizer step, `u64` completed epochs, `u32` tensor count,
//! then per tensor: `u32` name length, UTF-8 name, `u8` dtype (0 = f32),
//! `u32` rank, `u32` dims, f32 payload. A CRC32 of everything before it
//! closes the file. Adam moments are stored as `adam.m/<name>` and
//! `adam.v/<name>`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tensor2D};

const MAGIC: &[u8; 8] = b"DEMRCK01";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const MOMENT_M: &str = "adam.m/";
const MOMENT_V: &str = "adam.v/";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: u64,
    pub step: u64,
    pub epoch: u64,
    pub tensors: Vec<NamedTensor>,
}

fn to_f32(t: &Tensor2D) -> Vec<f32> {
    t.data().iter().map(|&v| v as f32).collect()
}

impl Checkpoint {
    /// Snapshot of parameters and Adam moments, rounded to f32.
    pub fn from_store(store: &ParamStore, config_hash: u64, epoch: u64) -> Self {
        let mut tensors = Vec::with_capacity(3 * store.len());
        for p in store.iter() {
            let shape = vec![p.value.rows(), p.value.cols()];
            tensors.push(NamedTensor {
                name: p.name.clone(),
                shape: shape.clone(),
                data: to_f32(&p.value),
            });
            tensors.push(NamedTensor {
                name: format!("{MOMENT_M}{}", p.name),
                shape: shape.clone(),
                data: to_f32(&p.m),
            });
            tensors.push(NamedTensor {
                name: format!("{MOMENT_V}{}", p.name),
                shape,
                data: to_f32(&p.v),
            });
        }
        Self {
            version: CHECKPOINT_VERSION,
            config_hash,
            step: store.step,
            epoch,
            tensors,
        }
    }

    fn find(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Copies values and moments into a store with the same layout.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        let n_params = self.tensors.iter().filter(|t| !t.name.starts_with("adam.")).count();
        if n_params != store.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {n_params} parameters; the model has {}",
                store.len()
            )));
        }
        let load = |name: &str, rows: usize, cols: usize| -> Result<Tensor2D> {
            let t = self
                .find(name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name:?}")))?;
            if t.shape != [rows, cols] {
                return Err(Error::Format(format!(
                    "tensor {name:?} has shape {:?}; the model expects [{rows}, {cols}]",
                    t.shape
                )));
            }
            Tensor2D::from_vec(rows, cols, t.data.iter().map(|&v| v as f64).collect())
                .map_err(|e| Error::Format(format!("tensor {name:?}: {e}")))
        };
        for p in store.iter_mut() {
            let (r, c) = p.value.shape();
            p.value = load(&p.name, r, c)?;
            p.m = load(&format!("{MOMENT_M}{}", p.name), r, c)?;
            p.v = load(&format!("{MOMENT_V}{}", p.name), r, c)?;
        }
        store.step = self.step;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::InvalidInput(format!("tensor {:?} payload does not match its shape", t.name)));
            }
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(DTYPE_F32);
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 {
            return Err(Error::Format("checkpoint is truncated".into()));
        }
        let (body, crc) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().expect("4 bytes")) {
            return Err(Error::Format("checkpoint CRC mismatch".into()));
        }
        let mut r = Cursor { buf: body };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let config_hash = r.u64()?;
        let step = r.u64()?;
        let epoch = r.u64()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let dtype = r.take(1)?[0];
            if dtype != DTYPE_F32 {
                return Err(Error::Format(format!("tensor {name:?} has unsupported dtype {dtype}")));
            }
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        if !r.buf.is_empty() {
            return Err(Error::Format("trailing bytes after the last tensor".into()));
        }
        Ok(Self {
            version,
            config_hash,
            step,
            epoch,
            tensors,
        })
    }

    /// Writes through a temporary file so an interrupted save leaves the
    /// previous checkpoint intact.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Fails unless the checkpoint was written under `config_hash`.
    pub fn check_config(&self, config_hash: u64) -> Result<()> {
        if self.config_hash != config_hash {
            return Err(Error::Config(format!(
                "checkpoint config hash {:016x} does not match the run config ({config_hash:016x})",
                self.config_hash
            )));
        }
        Ok(())
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() < n {
            return Err(Error::Format("checkpoint is truncated".into()));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;

    #[test]
    fn bytes_round_trip_and_crc() {
        let mut store = ParamStore::new();
        store.add("a", 2, 3, Init::Glorot, 1).unwrap();
        store.add("b", 1, 3, Init::Zeros, 1).unwrap();
        store.step = 12;
        let ck = Checkpoint::from_store(&store, 0xfeed, 3);
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
        let mut bad = bytes.clone();
        bad[30] ^= 1;
        assert!(Checkpoint::from_bytes(&bad).is_err());

        let mut other = ParamStore::new();
        other.add("a", 2, 3, Init::Zeros, 0).unwrap();
        other.add("b", 1, 3, Init::Zeros, 0).unwrap();
        ck.restore_into(&mut other).unwrap();
        assert_eq!(Checkpoint::from_store(&other, 0xfeed, 3), ck);
        assert!(ck.check_config(0xbeef).is_err());
    }
}
