//! Versioned binary checkpoints: magic, version, config JSON, parameters in
//! canonical group order, then trainer state for exact resumption.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::optim::Adam;
use crate::error::{Error, Result};
use crate::scheduler::TaskWeights;

pub const MAGIC: &[u8; 8] = b"IMTLCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StateHeader {
    step: u64,
    weights: TaskWeights,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Completed training steps.
    pub step: u64,
    pub params: Vec<f64>,
    pub weights: TaskWeights,
    pub adam: Adam,
}

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(bytes);
}

fn put_floats(out: &mut Vec<u8>, xs: &[f64]) {
    out.extend_from_slice(&(xs.len() as u64).to_le_bytes());
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn bytes(&mut self) -> Result<&[u8]> {
        let n = self.u64()? as usize;
        self.take(n)
    }

    fn floats(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("bad length".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_bytes(&mut out, serde_json::to_string(&self.config).expect("config").as_bytes());
        put_floats(&mut out, &self.params);
        let header = StateHeader {
            step: self.step,
            weights: self.weights.clone(),
            beta1: self.adam.beta1,
            beta2: self.adam.beta2,
            eps: self.adam.eps,
            t: self.adam.t,
        };
        put_bytes(&mut out, serde_json::to_string(&header).expect("state").as_bytes());
        put_floats(&mut out, &self.adam.m);
        put_floats(&mut out, &self.adam.v);
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let config: RunConfig = serde_json::from_slice(r.bytes()?)?;
        let params = r.floats()?;
        let header: StateHeader = serde_json::from_slice(r.bytes()?)?;
        let m = r.floats()?;
        let v = r.floats()?;
        if m.len() != params.len() || v.len() != params.len() || r.pos != buf.len() {
            return Err(Error::Checkpoint("inconsistent section sizes".into()));
        }
        Ok(Checkpoint {
            config,
            step: header.step,
            params,
            weights: header.weights,
            adam: Adam {
                beta1: header.beta1,
                beta2: header.beta2,
                eps: header.eps,
                t: header.t,
                m,
                v,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?
            .read_to_end(&mut buf)?;
        Self::from_bytes(&buf).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}
