//! Binary checkpoint format.
//!
//! Little-endian layout:
//!
//! ```text
//! "TSCK" | u16 version | u32 header length | header JSON
//! u32 parameter count | per parameter: u32 name length, name, u64 rows, u64 cols, f64 values
//! u8 optimizer flag | if set: u64 update count, first moments, second moments (values only)
//! 32-byte SHA-256 of everything above
//! ```
//!
//! The header carries the model spec, its hash, the training config and the
//! step and epoch counters.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::io::bundle::Cursor;
use crate::model::{ModelSpec, Testam};
use crate::tensor::Matrix;

use super::adam::Adam;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TSCK";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Hex SHA-256 of the serialized spec; identifies an architecture.
pub fn spec_hash(spec: &ModelSpec) -> String {
    let bytes = serde_json::to_vec(spec).expect("spec serializes");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    spec: ModelSpec,
    spec_hash: String,
    train: Option<TrainConfig>,
    step: u64,
    epoch: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub train: Option<TrainConfig>,
    pub params: Vec<(String, Matrix)>,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Epochs completed so far.
    pub epoch: u64,
    pub optimizer: Option<Adam>,
}

impl Checkpoint {
    pub fn from_model(model: &Testam, train: Option<&TrainConfig>, optimizer: Option<&Adam>, step: u64, epoch: u64) -> Self {
        Self {
            spec: model.spec.clone(),
            train: train.cloned(),
            params: model.store.iter().map(|(n, m)| (n.to_string(), m.clone())).collect(),
            step,
            epoch,
            optimizer: optimizer.cloned(),
        }
    }

    pub fn to_model(&self) -> Result<Testam> {
        Testam::with_parameters(self.spec.clone(), self.params.clone())
    }

    /// Fails with the first differing field when `requested` is not the spec
    /// this checkpoint was trained with.
    pub fn check_compatible(&self, requested: &ModelSpec) -> Result<()> {
        let a = serde_json::to_value(&self.spec)?;
        let b = serde_json::to_value(requested)?;
        match first_difference(&a, &b, String::new()) {
            None => Ok(()),
            Some((field, stored, requested)) => Err(Error::ConfigMismatch {
                field,
                stored,
                requested,
            }),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = Header {
            spec: self.spec.clone(),
            spec_hash: spec_hash(&self.spec),
            train: self.train.clone(),
            step: self.step,
            epoch: self.epoch,
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
        buf.extend_from_slice(&header);
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, m) in &self.params {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(m.rows() as u64).to_le_bytes());
            buf.extend_from_slice(&(m.cols() as u64).to_le_bytes());
            put_values(&mut buf, m);
        }
        match &self.optimizer {
            Some(adam) => {
                buf.push(1);
                buf.extend_from_slice(&adam.t.to_le_bytes());
                for m in adam.m.iter().chain(&adam.v) {
                    put_values(&mut buf, m);
                }
            }
            None => buf.push(0),
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic { expected: "TSCK" });
        }
        if bytes.len() < 6 + 32 {
            return Err(Error::Checksum);
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checksum);
        }
        let mut c = Cursor::new(body, 6);
        let hlen = c.u32()? as usize;
        let header: Header = serde_json::from_slice(c.take(hlen)?)?;
        if spec_hash(&header.spec) != header.spec_hash {
            return Err(Error::ConfigHash);
        }
        let count = c.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = c.u32()? as usize;
            let name = String::from_utf8(c.take(len)?.to_vec()).map_err(|_| Error::Checksum)?;
            let rows = c.count()?;
            let cols = c.count()?;
            let m = get_values(&mut c, rows, cols)?;
            params.push((name, m));
        }
        let optimizer = match c.u8()? {
            0 => None,
            _ => {
                let t = c.u64()?;
                let mut m = Vec::with_capacity(count);
                let mut v = Vec::with_capacity(count);
                for (_, p) in &params {
                    m.push(get_values(&mut c, p.rows(), p.cols())?);
                }
                for (_, p) in &params {
                    v.push(get_values(&mut c, p.rows(), p.cols())?);
                }
                let cfg = header.train.as_ref().map(|t| t.adam.clone()).unwrap_or_default();
                Some(Adam { cfg, t, m, v })
            }
        };
        if c.remaining() != 0 {
            return Err(Error::Checksum);
        }
        Ok(Self {
            spec: header.spec,
            train: header.train,
            params,
            step: header.step,
            epoch: header.epoch,
            optimizer,
        })
    }
}

fn put_values(buf: &mut Vec<u8>, m: &Matrix) {
    for v in m.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn get_values(c: &mut Cursor, rows: usize, cols: usize) -> Result<Matrix> {
    let n = rows.checked_mul(cols).ok_or(Error::Checksum)?;
    if n.checked_mul(8).is_none_or(|bytes| bytes > c.remaining()) {
        return Err(Error::Checksum);
    }
    let data = (0..n).map(|_| c.f64()).collect::<Result<Vec<_>>>()?;
    Ok(Matrix::from_vec(rows, cols, data))
}

fn first_difference(a: &Value, b: &Value, path: String) -> Option<(String, String, String)> {
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            for (k, va) in x {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match y.get(k) {
                    Some(vb) => {
                        if let Some(d) = first_difference(va, vb, p) {
                            return Some(d);
                        }
                    }
                    None => return Some((p, va.to_string(), "<missing>".into())),
                }
            }
            None
        }
        _ if a != b => Some((if path.is_empty() { "<root>".into() } else { path }, a.to_string(), b.to_string())),
        _ => None,
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ckpt.encode()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes)
}
