//! Flat binary dataset files with a JSON sidecar.
//!
//! Layout (little-endian): magic `DEMRDS01`, `u32` version, `u64` sample
//! count, `u32` clips, `u32` feature width, `u32` query length, then per
//! sample: `u64` id, `u32` concept, `f64` start, `f64` end, `u32` tokens,
//! `f64` video features in row-major order.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::synth::{BiasSpec, Sample, SynthConfig};
use crate::error::{Error, Result};
use crate::heads::MomentSpan;
use crate::nn::Tensor2D;

const MAGIC: &[u8; 8] = b"DEMRDS01";
const VERSION: u32 = 1;

/// Generating configuration stored next to a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSidecar {
    pub split: String,
    pub synth: SynthConfig,
    pub bias: BiasSpec,
    pub n_samples: usize,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn encode_dataset(samples: &[Sample]) -> Result<Vec<u8>> {
    let (clips, dim, qlen) = match samples.first() {
        Some(s) => (s.video.rows(), s.video.cols(), s.query.len()),
        None => (0, 0, 0),
    };
    let mut out = Vec::with_capacity(32 + samples.len() * (36 + 4 * qlen + 8 * clips * dim));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(samples.len() as u64).to_le_bytes());
    for v in [clips, dim, qlen] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for s in samples {
        if s.video.shape() != (clips, dim) || s.query.len() != qlen {
            return Err(Error::InvalidInput(format!("sample {} does not match the dataset dimensions", s.id)));
        }
        out.extend_from_slice(&s.id.to_le_bytes());
        out.extend_from_slice(&(s.concept_id as u32).to_le_bytes());
        out.extend_from_slice(&s.gt.start.to_le_bytes());
        out.extend_from_slice(&s.gt.end.to_le_bytes());
        for &t in &s.query {
            out.extend_from_slice(&(t as u32).to_le_bytes());
        }
        for v in s.video.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() < n {
            return Err(Error::Format("dataset file is truncated".into()));
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

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<Sample>> {
    let mut r = Reader { buf: bytes };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a dataset file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let n = r.u64()? as usize;
    let (clips, dim, qlen) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let record = 28 + 4 * qlen + 8 * clips * dim;
    if r.buf.len() != n.saturating_mul(record) {
        return Err(Error::Format(format!(
            "dataset body is {} bytes; {n} records of {record} bytes expected",
            r.buf.len()
        )));
    }
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let id = r.u64()?;
        let concept_id = r.u32()? as usize;
        let gt = MomentSpan::new(r.f64()?, r.f64()?).map_err(|e| Error::Format(e.to_string()))?;
        let query = (0..qlen).map(|_| r.u32().map(|t| t as usize)).collect::<Result<_>>()?;
        let data = (0..clips * dim).map(|_| r.f64()).collect::<Result<_>>()?;
        let video = Tensor2D::from_vec(clips, dim, data).map_err(|e| Error::Format(e.to_string()))?;
        samples.push(Sample {
            id,
            video,
            query,
            gt,
            concept_id,
        });
    }
    Ok(samples)
}

/// Writes the dataset file and its sidecar.
pub fn write_dataset(path: &Path, samples: &[Sample], sidecar: &DatasetSidecar) -> Result<()> {
    let bytes = encode_dataset(samples)?;
    fs::File::create(path)?.write_all(&bytes)?;
    fs::write(sidecar_path(path), serde_json::to_string_pretty(sidecar)? + "\n")?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<Sample>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_dataset(&bytes)
}

pub fn read_sidecar(path: &Path) -> Result<DatasetSidecar> {
    Ok(serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::generate_dataset;

    #[test]
    fn round_trip_is_exact() {
        let cfg = SynthConfig {
            n_samples: 5,
            ..SynthConfig::default()
        };
        let samples = generate_dataset(&cfg, &BiasSpec::default()).unwrap();
        let bytes = encode_dataset(&samples).unwrap();
        assert_eq!(decode_dataset(&bytes).unwrap(), samples);
        assert!(decode_dataset(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_dataset(&bad).is_err());
    }
}
