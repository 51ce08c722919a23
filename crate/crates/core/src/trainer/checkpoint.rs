//! Versioned binary checkpoints.
//!
//! Layout, little-endian:
//!
//! ```text
//! magic    8 bytes  "PSHIFTCK"
//! version  u32
//! checksum 32 bytes SHA-256 of the payload
//! length   u64      payload bytes
//! payload:
//!   config   u64 length + UTF-8 key = value text
//!   counters u64 child_steps, parent_steps, clip_events, optimizer step
//!   adam     f64 lr, beta1, beta2, eps
//!   blocks   u32 count, then per block:
//!            u32 name length + name, u32 rank, u64 dims, f64 values
//! ```
//!
//! Block names are `param/<name>`, `adam.m/<name>` and `adam.v/<name>` in
//! model parameter order. Writing is deterministic, so save, load and save
//! again yields identical bytes.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{init_model, Adam, Counters};
use crate::autodiff::Tensor;
use crate::config::Config;
use crate::encoders::Model;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PSHIFTCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 32 + 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub model: Model,
    pub optimizer: Adam,
    pub counters: Counters,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, x: u32) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }

    fn u64(&mut self, x: u64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }

    fn f64(&mut self, x: f64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }

    fn block(&mut self, name: &str, shape: &[usize], values: &[f64]) {
        self.u32(name.len() as u32);
        self.0.extend_from_slice(name.as_bytes());
        self.u32(shape.len() as u32);
        for &d in shape {
            self.u64(d as u64);
        }
        for &v in values {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or("truncated payload")?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().map_err(|_| "bad u32")?))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().map_err(|_| "bad u64")?))
    }

    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().map_err(|_| "bad f64")?))
    }

    fn usize(&mut self) -> std::result::Result<usize, String> {
        usize::try_from(self.u64()?).map_err(|_| "length overflows usize".to_string())
    }

    fn block(&mut self) -> std::result::Result<(String, Vec<usize>, Vec<f64>), String> {
        let n = self.u32()? as usize;
        let name = String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "block name is not UTF-8")?;
        let rank = self.u32()? as usize;
        let shape = (0..rank)
            .map(|_| self.usize())
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or("block too large")?;
        if numel.checked_mul(8).is_none_or(|b| b > self.bytes.len() - self.pos) {
            return Err(format!("block {name} runs past the end"));
        }
        let values = (0..numel)
            .map(|_| self.f64())
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok((name, shape, values))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        let text = self.config.to_text();
        w.u64(text.len() as u64);
        w.0.extend_from_slice(text.as_bytes());
        w.u64(self.counters.child_steps);
        w.u64(self.counters.parent_steps);
        w.u64(self.counters.clip_events);
        w.u64(self.optimizer.step);
        for x in [
            self.optimizer.lr,
            self.optimizer.beta1,
            self.optimizer.beta2,
            self.optimizer.eps,
        ] {
            w.f64(x);
        }
        let params = self.model.params();
        w.u32(3 * params.len() as u32);
        for (name, t) in &params {
            w.block(&format!("param/{name}"), t.shape(), t.values());
        }
        for (i, (name, t)) in params.iter().enumerate() {
            w.block(&format!("adam.m/{name}"), t.shape(), &self.optimizer.m[i]);
        }
        for (i, (name, t)) in params.iter().enumerate() {
            w.block(&format!("adam.v/{name}"), t.shape(), &self.optimizer.v[i]);
        }
        let payload = w.0;
        let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&Sha256::digest(&payload));
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        out
    }

    /// Parses checkpoint bytes; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
        let corrupt = |detail: String| Error::Corrupt {
            path: path.to_path_buf(),
            detail,
        };
        if bytes.len() < HEADER_LEN || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(corrupt("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]);
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let checksum = &bytes[12..44];
        let mut len = [0u8; 8];
        len.copy_from_slice(&bytes[44..52]);
        let payload = &bytes[HEADER_LEN..];
        if u64::from_le_bytes(len) != payload.len() as u64 {
            return Err(corrupt(format!(
                "payload is {} bytes, header says {}",
                payload.len(),
                u64::from_le_bytes(len)
            )));
        }
        if Sha256::digest(payload).as_slice() != checksum {
            return Err(corrupt("checksum mismatch".into()));
        }
        Checkpoint::parse_payload(payload).map_err(|e| match e {
            ParseError::Format(d) => corrupt(d),
            ParseError::Inner(e) => e,
        })
    }

    fn parse_payload(payload: &[u8]) -> std::result::Result<Checkpoint, ParseError> {
        let mut r = Reader { bytes: payload, pos: 0 };
        let n = r.usize()?;
        let text = std::str::from_utf8(r.take(n)?).map_err(|_| ParseError::Format("config is not UTF-8".into()))?;
        let config = Config::parse(text).map_err(ParseError::Inner)?;
        let counters = Counters {
            child_steps: r.u64()?,
            parent_steps: r.u64()?,
            clip_events: r.u64()?,
        };
        let step = r.u64()?;
        let (lr, beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
        let mut model = init_model(&config).map_err(ParseError::Inner)?;
        let names: Vec<&'static str> = model.params().iter().map(|(n, _)| *n).collect();
        let count = r.u32()? as usize;
        if count != 3 * names.len() {
            return Err(ParseError::Format(format!(
                "{count} blocks, expected {}",
                3 * names.len()
            )));
        }
        let mut blocks = Vec::with_capacity(count);
        for _ in 0..count {
            blocks.push(r.block()?);
        }
        if r.pos != payload.len() {
            return Err(ParseError::Format("trailing bytes after the last block".into()));
        }
        let mut m = Vec::with_capacity(names.len());
        let mut v = Vec::with_capacity(names.len());
        for (i, (name, t)) in model.params_mut().into_iter().enumerate() {
            for (j, prefix) in ["param", "adam.m", "adam.v"].iter().enumerate() {
                let (bname, shape, values) = &blocks[j * names.len() + i];
                if *bname != format!("{prefix}/{name}") || shape.as_slice() != t.shape() {
                    return Err(ParseError::Format(format!(
                        "block {bname} {shape:?} does not match {prefix}/{name} {:?}",
                        t.shape()
                    )));
                }
                match j {
                    0 => {
                        *t = Tensor::new(shape.clone(), values.clone(), true).map_err(ParseError::Inner)?;
                    }
                    1 => m.push(values.clone()),
                    _ => v.push(values.clone()),
                }
            }
        }
        Ok(Checkpoint {
            config,
            model,
            optimizer: Adam {
                lr,
                beta1,
                beta2,
                eps,
                step,
                m,
                v,
            },
            counters,
        })
    }
}

enum ParseError {
    Format(String),
    Inner(Error),
}

impl From<String> for ParseError {
    fn from(s: String) -> Self {
        ParseError::Format(s)
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}
