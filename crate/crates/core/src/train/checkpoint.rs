//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! "SSDN" | version u32 | width, cascade_depth, ast_depth, heads: u32
//! | attn_eps, gate_scale_init, fuse_weight_init, temperature_init: f64
//! | step u64 | tensor count u32
//! | per tensor: name length u32, name bytes, rank u32, extents u32 × rank, f32 payload
//! | has_optim u8 | [optim step u64, then m and v payloads in tensor order]
//! | crc32 of everything before it
//! ```

use std::path::Path;

use thiserror::Error;

use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::model::{param_specs, ModelConfig, ParameterStore};
use crate::tensor::Tensor;

use super::adam::OptimState;

pub const MAGIC: &[u8; 4] = b"SSDN";
pub const VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum CheckpointError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported format version {found} (expected {VERSION})")]
    Version { found: u32 },
    #[error("truncated at byte {offset}")]
    Truncated { offset: usize },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint does not match the model: {0}")]
    Mismatch(String),
}

/// Model weights, their configuration and optionally the optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub params: ParameterStore<f32>,
    pub optim: Option<OptimState<f32>>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_len(out: &mut Vec<u8>, v: usize) {
    put_u32(out, u32::try_from(v).expect("checkpoint field exceeds u32"));
}

fn put_payload(out: &mut Vec<u8>, t: &Tensor<f32>) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(CheckpointError::Truncated { offset: self.bytes.len() })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> std::result::Result<[u8; N], CheckpointError> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn u32(&mut self) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> std::result::Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> std::result::Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn payload(&mut self, shape: &[usize]) -> std::result::Result<Tensor<f32>, CheckpointError> {
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(4).ok_or(CheckpointError::Truncated { offset: self.pos })?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Tensor::from_vec(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.params.scalar_count() * 12);
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        let c = &self.config;
        for v in [c.width, c.cascade_depth, c.ast_depth, c.heads] {
            put_len(&mut out, v);
        }
        for v in [c.attn_eps, c.gate_scale_init, c.fuse_weight_init, c.temperature_init] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        put_len(&mut out, self.params.len());
        for (name, t) in self.params.iter() {
            put_len(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put_len(&mut out, t.rank());
            for &e in t.shape() {
                put_len(&mut out, e);
            }
            put_payload(&mut out, t);
        }
        match &self.optim {
            None => out.push(0),
            Some(o) => {
                out.push(1);
                out.extend_from_slice(&o.step.to_le_bytes());
                for store in [&o.m, &o.v] {
                    for (_, t) in store.iter() {
                        put_payload(&mut out, t);
                    }
                }
            }
        }
        let crc = crc32fast::hash(&out);
        put_u32(&mut out, crc);
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, CheckpointError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut r = Reader { bytes, pos: 4 };
        let found = r.u32()?;
        if found != VERSION {
            return Err(CheckpointError::Version { found });
        }
        if bytes.len() < 8 + 4 {
            return Err(CheckpointError::Truncated { offset: bytes.len() });
        }
        let body = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(&bytes[..body]);
        // Walk the structure first so a short file reports truncation rather
        // than a checksum failure.
        let mut r = Reader { bytes: &bytes[..body], pos: r.pos };
        let ck = Self::decode_body(&mut r)?;
        if r.pos != body {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", body - r.pos)));
        }
        if stored != computed {
            return Err(CheckpointError::Checksum { stored, computed });
        }
        Ok(ck)
    }

    fn decode_body(r: &mut Reader<'_>) -> std::result::Result<Self, CheckpointError> {
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let config = ModelConfig {
            width: dims[0],
            cascade_depth: dims[1],
            ast_depth: dims[2],
            heads: dims[3],
            attn_eps: r.f64()?,
            gate_scale_init: r.f64()?,
            fuse_weight_init: r.f64()?,
            temperature_init: r.f64()?,
        };
        config
            .validate()
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut params = ParameterStore::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
                .to_owned();
            let rank = r.u32()? as usize;
            if rank == 0 || rank > 8 {
                return Err(CheckpointError::Malformed(format!("tensor `{name}` has rank {rank}")));
            }
            let shape = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
            let t = r.payload(&shape)?;
            params
                .insert(&name, t)
                .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        }
        let optim = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = r.u64()?;
                let mut moments = [ParameterStore::new(), ParameterStore::new()];
                for store in &mut moments {
                    for (name, t) in params.iter() {
                        let p = r.payload(t.shape())?;
                        store.insert(name, p).expect("names are unique");
                    }
                }
                let [m, v] = moments;
                Some(OptimState { step, m, v })
            }
            b => return Err(CheckpointError::Malformed(format!("optimizer flag {b}"))),
        };
        Ok(Checkpoint { config, step, params, optim })
    }

    /// Fails unless the stored tensors are exactly those `cfg` would build.
    pub fn check_against(&self, cfg: &ModelConfig) -> std::result::Result<(), CheckpointError> {
        let specs = param_specs(cfg);
        if specs.len() != self.params.len() {
            return Err(CheckpointError::Mismatch(format!(
                "{} stored tensors, model has {}",
                self.params.len(),
                specs.len()
            )));
        }
        for (spec, (name, t)) in specs.iter().zip(self.params.iter()) {
            if spec.name != name || spec.shape != t.shape() {
                return Err(CheckpointError::Mismatch(format!(
                    "stored `{name}` {:?} where the model expects `{}` {:?}",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.encode())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let ck = Self::decode(&bytes)?;
        ck.check_against(&ck.config)?;
        Ok(ck)
    }

    /// Loads and checks against the architecture the caller intends to run.
    pub fn load_for(path: impl AsRef<Path>, cfg: &ModelConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        ck.check_against(cfg)?;
        Ok(ck)
    }
}
