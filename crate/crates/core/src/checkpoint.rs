//! Binary checkpoint file.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "STRL"  u32 version
//! u32 len, JSON header {train config, num_users, num_pois}
//! u32 epoch, f64 final_loss, u64 rng_state
//! u32 tensor count, then per tensor:
//!     u32 name len, name, u32 rows, u32 cols, rows*cols f64
//! ```
//!
//! Tensors appear in registration order, so equal models give equal bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::SplitMix64;
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 4] = b"STRL";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model,
    pub epoch: usize,
    pub final_loss: f64,
    pub rng_state: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    train: TrainConfig,
    num_users: usize,
    num_pois: usize,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Corrupt {
                offset: self.pos,
                msg: format!(
                    "truncated {what}: need {n} bytes, {} left",
                    self.buf.len() - self.pos
                ),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn corrupt(&self, at: usize, msg: impl Into<String>) -> Error {
        Error::Corrupt {
            offset: at,
            msg: msg.into(),
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid(format!("{what} {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

impl Checkpoint {
    pub fn new(
        config: TrainConfig,
        model: Model,
        epoch: usize,
        final_loss: f64,
        rng_state: u64,
    ) -> Self {
        Self {
            config,
            model,
            epoch,
            final_loss,
            rng_state,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let header = Header {
            train: self.config,
            num_users: self.model.cfg().num_users,
            num_pois: self.model.cfg().num_pois,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::invalid(e.to_string()))?;
        put_u32(&mut out, json.len(), "header length")?;
        out.extend_from_slice(&json);
        put_u32(&mut out, self.epoch, "epoch")?;
        out.extend_from_slice(&self.final_loss.to_le_bytes());
        out.extend_from_slice(&self.rng_state.to_le_bytes());
        put_u32(&mut out, self.model.store.len(), "tensor count")?;
        for (_, p) in self.model.store.iter() {
            put_u32(&mut out, p.name.len(), "name length")?;
            out.extend_from_slice(p.name.as_bytes());
            put_u32(&mut out, p.value.rows, "rows")?;
            put_u32(&mut out, p.value.cols, "cols")?;
            for v in &p.value.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(r.corrupt(0, "bad magic, not a checkpoint"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let len = r.u32("header length")? as usize;
        let at = r.pos;
        let header: Header = serde_json::from_slice(r.take(len, "header")?)
            .map_err(|e| r.corrupt(at, format!("bad header: {e}")))?;
        let epoch = r.u32("epoch")? as usize;
        let final_loss = r.f64("final loss")?;
        let rng_state = r.u64("rng state")?;

        // Skeleton with the expected names and shapes; values are overwritten.
        let cfg = header.train.model_config(header.num_users, header.num_pois);
        let mut model = Model::init(cfg, &mut SplitMix64::new(0))
            .map_err(|e| r.corrupt(at, format!("header describes an invalid model: {e}")))?;
        let at = r.pos;
        let count = r.u32("tensor count")? as usize;
        if count != model.store.len() {
            return Err(r.corrupt(
                at,
                format!(
                    "{count} tensors, configuration implies {}",
                    model.store.len()
                ),
            ));
        }
        let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let at = r.pos;
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "tensor name")?)
                .map_err(|_| r.corrupt(at, "tensor name is not UTF-8"))?
                .to_string();
            let expected = model.store.get(id);
            if name != expected.name {
                return Err(r.corrupt(
                    at,
                    format!("tensor {name:?} where {:?} was expected", expected.name),
                ));
            }
            let at = r.pos;
            let rows = r.u32("rows")? as usize;
            let cols = r.u32("cols")? as usize;
            let want = expected.value.shape();
            if (rows, cols) != want {
                return Err(Error::Shape(format!(
                    "tensor {name} declared {rows}x{cols} at byte {at}, expected {}x{}",
                    want.0, want.1
                )));
            }
            let bytes = r.take(rows * cols * 8, &format!("data of {name}"))?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            model.store.get_mut(id).value = Tensor::from_vec(rows, cols, data)?;
        }
        if r.pos != buf.len() {
            return Err(r.corrupt(r.pos, format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self {
            config: header.train,
            model,
            epoch,
            final_loss,
            rng_state,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}
