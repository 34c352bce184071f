//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "RAPC" | u32 version | u32 len, config text | u64 rng seed | u128 rng word position
//! | [u8; 32] backbone hash | u32 count
//! | count × (u32 len, name, u8 trainable)            name table
//! | count × (u32 rank, rank × u64 dim)                shape table
//! | count × (numel × f64)                             payloads
//! ```

use std::path::Path;

use super::config::ExperimentConfig;
use super::model::{backbone_hash, Model};
use crate::error::{Error, Result};
use crate::tensor::{numel, ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"RAPC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub rng_state: (u64, u128),
    pub backbone_hash: [u8; 32],
    pub store: ParamStore,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Version("checkpoint is truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Version("non-UTF-8 text".into()))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend((s.len() as u32).to_le_bytes());
    out.extend(s.as_bytes());
}

impl Checkpoint {
    pub fn from_model(model: &Model, rng_state: (u64, u128)) -> Self {
        Self {
            config: model.config.clone(),
            rng_state,
            backbone_hash: model.backbone_hash(),
            store: model.store.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        put_str(&mut out, &self.config.to_text());
        out.extend(self.rng_state.0.to_le_bytes());
        out.extend(self.rng_state.1.to_le_bytes());
        out.extend(self.backbone_hash);
        out.extend((self.store.len() as u32).to_le_bytes());
        for (name, t) in self.store.iter() {
            put_str(&mut out, name);
            out.push(t.requires_grad() as u8);
        }
        for (_, t) in self.store.iter() {
            out.extend((t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend((d as u64).to_le_bytes());
            }
        }
        for (_, t) in self.store.iter() {
            for v in t.data() {
                out.extend(v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Version("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version(format!("unsupported checkpoint version {version}")));
        }
        let config: ExperimentConfig = r.string()?.parse()?;
        let rng_state = (r.u64()?, u128::from_le_bytes(r.array()?));
        let recorded: [u8; 32] = r.array()?;
        let count = r.u32()? as usize;
        let names = (0..count)
            .map(|_| Ok((r.string()?, r.take(1)?[0] != 0)))
            .collect::<Result<Vec<_>>>()?;
        let shapes = (0..count)
            .map(|_| {
                let rank = r.u32()? as usize;
                (0..rank).map(|_| Ok(r.u64()? as usize)).collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let mut store = ParamStore::new();
        for ((name, trainable), shape) in names.into_iter().zip(shapes) {
            let n = numel(&shape);
            let bytes = r.take(
                n.checked_mul(8)
                    .ok_or_else(|| Error::Version("shape overflow".into()))?,
            )?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            store
                .insert(name, Tensor::new(&shape, data)?, trainable)
                .map_err(|e| Error::Version(e.to_string()))?;
        }
        if r.pos != buf.len() {
            return Err(Error::Version("trailing bytes after payload".into()));
        }
        if backbone_hash(&store) != recorded {
            return Err(Error::Version(
                "backbone payload does not match its recorded hash".into(),
            ));
        }
        Ok(Self {
            config,
            rng_state,
            backbone_hash: recorded,
            store,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Rebuilds the model described by the stored config and loads the
    /// stored values into it. The rebuilt backbone must match the stored
    /// one.
    pub fn into_model(self) -> Result<Model> {
        let mut model = Model::skeleton(self.config)?;
        if model.backbone_hash() != self.backbone_hash {
            return Err(Error::Version(
                "checkpoint backbone differs from the one its config generates".into(),
            ));
        }
        model.store.load_values(&self.store)?;
        Ok(model)
    }
}
