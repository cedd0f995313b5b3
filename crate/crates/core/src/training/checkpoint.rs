//! Training-state archives.
//!
//! Layout, little-endian:
//!
//! ```text
//! "CFCK" | u32 version
//! | u64 dim_clip | u64 dim_w | u64 n_latent
//! | u64 step | u64 master_seed
//! | u32 len | config text (UTF-8)
//! | u32 n_tensors | (u32 name_len | name | u64 len | f64 × len) × n_tensors
//! | u64 adam_t | (f64 × len) m per tensor | (f64 × len) v per tensor
//! | sha256 of everything above (32 bytes)
//! ```
//!
//! Every random draw in a run is derived from `(master_seed, step, ...)`, so
//! the step counter is the only generator state an archive needs.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::config::TrainConfig;
use super::optim::Adam;
use crate::error::{Error, Result};
use crate::mapper::{MapperDims, MapperParams};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CFCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Completed training steps.
    pub step: u64,
    pub params: MapperParams,
    pub optim: Adam,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(CHECKPOINT_MAGIC);
        b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let d = self.params.dims();
        for v in [d.dim_clip, d.dim_w, d.n_latent] {
            b.extend_from_slice(&(v as u64).to_le_bytes());
        }
        b.extend_from_slice(&self.step.to_le_bytes());
        b.extend_from_slice(&self.config.master_seed.to_le_bytes());
        let text = self.config.to_text();
        b.extend_from_slice(&(text.len() as u32).to_le_bytes());
        b.extend_from_slice(text.as_bytes());
        let tensors = self.params.tensors();
        b.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in &tensors {
            b.extend_from_slice(&(name.len() as u32).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            put_f64s(&mut b, t, true);
        }
        b.extend_from_slice(&self.optim.t.to_le_bytes());
        for m in &self.optim.m {
            put_f64s(&mut b, m, false);
        }
        for v in &self.optim.v {
            put_f64s(&mut b, v, false);
        }
        let digest = Sha256::digest(&b);
        b.extend_from_slice(&digest);
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::corrupt("magic", "not a checkpoint archive"));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::corrupt(
                "version",
                format!("archive version {version}, expected {CHECKPOINT_VERSION}"),
            ));
        }
        if bytes.len() < r.pos + DIGEST_LEN {
            return Err(Error::corrupt("checksum", "archive truncated"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::corrupt("checksum", "sha256 mismatch"));
        }
        r.bytes = body;

        let dims = MapperDims {
            dim_clip: r.u64("dims")? as usize,
            dim_w: r.u64("dims")? as usize,
            n_latent: r.u64("dims")? as usize,
        };
        dims.validate().map_err(|e| Error::corrupt("dims", e.to_string()))?;
        let step = r.u64("step")?;
        let master_seed = r.u64("master_seed")?;
        let len = r.u32("config")? as usize;
        let text = std::str::from_utf8(r.take(len, "config")?)
            .map_err(|_| Error::corrupt("config", "not UTF-8"))?;
        let config = TrainConfig::parse(text).map_err(|e| Error::corrupt("config", e.to_string()))?;
        if config.master_seed != master_seed {
            return Err(Error::corrupt("master_seed", "disagrees with the config record"));
        }
        if MapperDims::from(config.dims) != dims {
            return Err(Error::corrupt("dims", "disagrees with the config record"));
        }

        let n = r.u32("params")? as usize;
        let mut tensors = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name_len = r.u32("params")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "params")?)
                .map_err(|_| Error::corrupt("params", "tensor name not UTF-8"))?
                .to_string();
            let len = r.u64("params")? as usize;
            let values = r.f64s(len, "params")?;
            tensors.push((name, values));
        }
        let mut params = MapperParams::init(0, dims, false)?;
        params.load_tensors(&tensors)?;

        let t = r.u64("optimizer")?;
        let shapes: Vec<usize> = tensors.iter().map(|(_, v)| v.len()).collect();
        let mut optim = Adam::new(config.optimizer, &shapes);
        optim.t = t;
        for (k, &n) in shapes.iter().enumerate() {
            optim.m[k] = r.f64s(n, "optimizer")?;
        }
        for (k, &n) in shapes.iter().enumerate() {
            optim.v[k] = r.f64s(n, "optimizer")?;
        }
        if r.pos != body.len() {
            return Err(Error::corrupt("trailing", format!("{} unread bytes", body.len() - r.pos)));
        }
        Ok(Self {
            config,
            step,
            params,
            optim,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("cfck.tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::corrupt("file", format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

fn put_f64s(b: &mut Vec<u8>, values: &[f64], with_len: bool) {
    if with_len {
        b.extend_from_slice(&(values.len() as u64).to_le_bytes());
    }
    for v in values {
        b.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::corrupt(field, "archive truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }
    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize, field: &str) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::corrupt(field, "bad length"))?, field)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
