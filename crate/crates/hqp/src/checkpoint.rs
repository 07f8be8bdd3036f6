//! Binary checkpoints.
//!
//! Layout, little-endian:
//!
//! ```text
//! magic      8 bytes  "HQPCKPT\0"
//! version    u32
//! config     u32 length + JSON of the RunConfig
//! digest     32 bytes SHA-256 of the config JSON
//! epoch      u64      completed epochs
//! step       u64      optimizer steps
//! entries    u32 count, then per entry:
//!              u16 name length + UTF-8 name
//!              u8 trainable, u32 rows, u32 cols
//!              rows*cols f64 values
//!              trainable only: rows*cols f64 first moments, then second moments
//! trailer    32 bytes SHA-256 of everything above
//! ```

use std::path::Path;

use hqp_core::model::Model;
use hqp_core::optim::AdamW;
use hqp_core::params::ParamStore;
use hqp_core::tensor::Tensor;
use hqp_core::trainer::Trainer;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{io_err, Error, Result};

pub const MAGIC: &[u8; 8] = b"HQPCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub epoch: usize,
    pub store: ParamStore,
    pub opt: AdamW,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes(b.try_into().unwrap()))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Option<Vec<f64>> {
        let raw = self.take(n.checked_mul(8)?)?;
        Some(
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )
    }
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn from_trainer(config: &RunConfig, t: &Trainer) -> Self {
        Self {
            config: config.clone(),
            epoch: t.epoch,
            store: t.model.store.clone(),
            opt: t.opt.clone(),
        }
    }

    /// Rebuilds the trainer: the model layout comes from the stored config,
    /// the values from the stored tensors.
    pub fn into_trainer(self) -> Result<Trainer> {
        let cfg = self.config.train_config();
        cfg.validate()?;
        let mut model = Model::new(cfg.model.clone(), 0)?;
        let fresh = model.store.entries();
        let saved = self.store.entries();
        if fresh.len() != saved.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} tensors, the configured model has {}",
                saved.len(),
                fresh.len()
            )));
        }
        for (a, b) in fresh.iter().zip(saved) {
            if a.name != b.name || a.trainable != b.trainable || (a.tensor.rows, a.tensor.cols) != (b.tensor.rows, b.tensor.cols) {
                return Err(Error::Config(format!("tensor {} does not match the configured model", b.name)));
            }
        }
        model.store = self.store;
        let mut opt = self.opt;
        opt.cfg = cfg.optim;
        Ok(Trainer {
            cfg,
            model,
            opt,
            epoch: self.epoch,
        })
    }

    /// True when `cfg` is the configuration this checkpoint was trained with.
    pub fn config_matches(&self, cfg: &RunConfig) -> bool {
        self.config.digest() == cfg.digest()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let json = serde_json::to_vec(&self.config).expect("config serializes");
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&Sha256::digest(&json));
        out.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        out.extend_from_slice(&self.opt.step.to_le_bytes());
        let entries = self.store.entries();
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (i, e) in entries.iter().enumerate() {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(u8::from(e.trainable));
            out.extend_from_slice(&(e.tensor.rows as u32).to_le_bytes());
            out.extend_from_slice(&(e.tensor.cols as u32).to_le_bytes());
            put_f64s(&mut out, &e.tensor.data);
            if e.trainable {
                put_f64s(&mut out, &self.opt.m[i]);
                put_f64s(&mut out, &self.opt.v[i]);
            }
        }
        let trailer = Sha256::digest(&out);
        out.extend_from_slice(&trailer);
        out
    }

    /// Parses checkpoint bytes; `label` names the source in errors.
    pub fn from_bytes(bytes: &[u8], label: &Path) -> Result<Self> {
        let truncated = || Error::Truncated(label.to_path_buf());
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::BadMagic(label.to_path_buf()));
        }
        let mut c = Cursor {
            bytes,
            pos: MAGIC.len(),
        };
        let version = c.u32().ok_or_else(truncated)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion {
                what: "checkpoint",
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if bytes.len() < 32 + c.pos {
            return Err(truncated());
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != trailer {
            return Err(Error::Tampered(label.to_path_buf()));
        }
        c.bytes = body;
        let len = c.u32().ok_or_else(truncated)? as usize;
        let json = c.take(len).ok_or_else(truncated)?;
        let digest = c.take(32).ok_or_else(truncated)?;
        if Sha256::digest(json).as_slice() != digest {
            return Err(Error::Tampered(label.to_path_buf()));
        }
        let config: RunConfig =
            serde_json::from_slice(json).map_err(|e| Error::Config(format!("{}: stored config: {e}", label.display())))?;
        let epoch = c.u64().ok_or_else(truncated)? as usize;
        let step = c.u64().ok_or_else(truncated)?;
        let count = c.u32().ok_or_else(truncated)? as usize;
        let mut store = ParamStore::new();
        let (mut m, mut v) = (Vec::with_capacity(count), Vec::with_capacity(count));
        for _ in 0..count {
            let n = c.u16().ok_or_else(truncated)? as usize;
            let name = std::str::from_utf8(c.take(n).ok_or_else(truncated)?).map_err(|_| truncated())?.to_string();
            let trainable = c.u8().ok_or_else(truncated)? != 0;
            let rows = c.u32().ok_or_else(truncated)? as usize;
            let cols = c.u32().ok_or_else(truncated)? as usize;
            let size = rows.checked_mul(cols).ok_or_else(truncated)?;
            let data = c.f64s(size).ok_or_else(truncated)?;
            let tensor = Tensor { rows, cols, data };
            if trainable {
                store.add(&name, tensor);
                m.push(c.f64s(size).ok_or_else(truncated)?);
                v.push(c.f64s(size).ok_or_else(truncated)?);
            } else {
                store.add_frozen(&name, tensor);
                m.push(Vec::new());
                v.push(Vec::new());
            }
        }
        if c.pos != body.len() {
            return Err(truncated());
        }
        Ok(Self {
            opt: AdamW {
                cfg: config.optim,
                step,
                m,
                v,
            },
            config,
            epoch,
            store,
        })
    }

    /// Writes through a temporary file so an interrupted save never replaces
    /// a good checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(io_err(&tmp))?;
        std::fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (RunConfig, Trainer) {
        let mut cfg = RunConfig::with_seed(2);
        cfg.model.d_model = 8;
        cfg.model.n_heads = 2;
        cfg.model.ffn_dim = 8;
        cfg.model.neck_hidden = 8;
        cfg.model.roi_size = 2;
        let t = Trainer::new(cfg.train_config()).unwrap();
        (cfg, t)
    }

    #[test]
    fn bytes_round_trip() {
        let (cfg, mut t) = tiny();
        t.opt.step = 7;
        t.opt.m[0][0] = 0.25;
        let ck = Checkpoint::from_trainer(&cfg, &t);
        let back = Checkpoint::from_bytes(&ck.to_bytes(), Path::new("mem")).unwrap();
        assert_eq!(back, ck);
        assert!(back.config_matches(&cfg));
        let t2 = back.into_trainer().unwrap();
        assert_eq!(t2.model.store, t.model.store);
        assert_eq!(t2.opt, t.opt);
    }

    #[test]
    fn any_flipped_byte_is_detected() {
        let (cfg, t) = tiny();
        let bytes = Checkpoint::from_trainer(&cfg, &t).to_bytes();
        for pos in [12, 40, bytes.len() / 2, bytes.len() - 40, bytes.len() - 1] {
            let mut b = bytes.clone();
            b[pos] ^= 0x10;
            assert!(matches!(Checkpoint::from_bytes(&b, Path::new("x")), Err(Error::Tampered(_))), "byte {pos}");
        }
    }

    #[test]
    fn version_magic_and_truncation() {
        let (cfg, t) = tiny();
        let bytes = Checkpoint::from_trainer(&cfg, &t).to_bytes();
        let mut old = bytes.clone();
        old[8..12].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&old, Path::new("x")),
            Err(Error::UnsupportedVersion { found: 0, .. })
        ));
        assert!(matches!(Checkpoint::from_bytes(b"nonsense", Path::new("x")), Err(Error::BadMagic(_))));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() / 2], Path::new("x")).is_err());
    }
}
