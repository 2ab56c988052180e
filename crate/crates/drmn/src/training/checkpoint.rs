//! Versioned binary checkpoints. A checkpoint carries everything a resumed
//! run needs to continue bit-for-bit: the resolved config, every parameter
//! tensor, optimizer state, the trainer's RNG state, and the best-on-dev
//! snapshot.

use super::Optimizer;
use crate::cli::write_atomic;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::params::ParamSet;
use std::path::Path;

const MAGIC: &[u8; 4] = b"DRMN";
const VERSION: u32 = 1;

/// Best-on-dev parameter snapshot.
#[derive(Debug, Clone)]
pub struct Best {
    pub dev_loss: f64,
    pub params: ParamSet,
}

/// Full trainer state at an epoch boundary.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: ParamSet,
    pub optimizer: Optimizer,
    /// Epochs completed so far.
    pub epoch: usize,
    /// Epochs since the dev loss last improved.
    pub since_best: usize,
    /// Trainer RNG state at the boundary.
    pub rng_state: u64,
    pub best: Option<Best>,
}

impl Checkpoint {
    /// Parameters to use for generation and evaluation: the best-on-dev
    /// snapshot when one exists, the live parameters otherwise.
    pub fn inference_params(&self) -> &ParamSet {
        self.best.as_ref().map(|b| &b.params).unwrap_or(&self.params)
    }

    pub fn best_dev(&self) -> f64 {
        self.best.as_ref().map(|b| b.dev_loss).unwrap_or(f64::INFINITY)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_bytes(&mut out, self.config.echo().as_bytes());
        put_u64(&mut out, self.epoch as u64);
        put_u64(&mut out, self.since_best as u64);
        put_u64(&mut out, self.rng_state);
        put_params(&mut out, &self.params);
        match &self.optimizer {
            Optimizer::Sgd { .. } => out.push(0),
            Optimizer::Adam { t, m, v, .. } => {
                out.push(1);
                put_u64(&mut out, *t);
                for tensor in m.iter().chain(v) {
                    put_values(&mut out, tensor);
                }
            }
        }
        match &self.best {
            None => out.push(0),
            Some(best) => {
                out.push(1);
                put_f64(&mut out, best.dev_loss);
                put_params(&mut out, &best.params);
            }
        }
        write_atomic(path, &out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Data(format!("checkpoint {}: {e}", path.display())))?;
        let mut r = Reader { bytes: &bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Data(format!(
                "checkpoint {}: not a checkpoint file",
                path.display()
            )));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Data(format!(
                "checkpoint {}: version {version} unsupported (expected {VERSION})",
                path.display()
            )));
        }
        let blob = String::from_utf8(r.bytes_field()?.to_vec())
            .map_err(|_| Error::Data("checkpoint config not UTF-8".into()))?;
        let config = TrainConfig::from_blob(&blob)?;
        let epoch = r.u64()? as usize;
        let since_best = r.u64()? as usize;
        let rng_state = r.u64()?;
        let params = r.params()?;
        let optimizer = match r.u8()? {
            0 => Optimizer::Sgd {
                lr: config.learning_rate,
            },
            1 => {
                let t = r.u64()?;
                let moments = |r: &mut Reader| -> Result<Vec<Matrix>> {
                    (0..params.len())
                        .map(|i| {
                            let shape = params.value(i).shape();
                            r.values(shape.0, shape.1)
                        })
                        .collect()
                };
                let m = moments(&mut r)?;
                let v = moments(&mut r)?;
                Optimizer::Adam {
                    lr: config.learning_rate,
                    t,
                    m,
                    v,
                }
            }
            k => return Err(Error::Data(format!("unknown optimizer tag {k}"))),
        };
        if optimizer.kind() != config.optimizer {
            return Err(Error::Data("optimizer state does not match config".into()));
        }
        let best = match r.u8()? {
            0 => None,
            1 => Some(Best {
                dev_loss: r.f64()?,
                params: r.params()?,
            }),
            k => return Err(Error::Data(format!("unknown best tag {k}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Data(format!(
                "checkpoint {}: {} trailing bytes",
                path.display(),
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            config,
            params,
            optimizer,
            epoch,
            since_best,
            rng_state,
            best,
        })
    }
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    put_u64(out, bytes.len() as u64);
    out.extend_from_slice(bytes);
}

fn put_values(out: &mut Vec<u8>, m: &Matrix) {
    for v in m.data() {
        put_f64(out, *v);
    }
}

fn put_params(out: &mut Vec<u8>, params: &ParamSet) {
    put_u64(out, params.len() as u64);
    for (name, value) in params.iter() {
        put_bytes(out, name.as_bytes());
        put_u64(out, 2); // rank
        put_u64(out, value.rows as u64);
        put_u64(out, value.cols as u64);
        put_values(out, value);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Data("checkpoint truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bytes_field(&mut self) -> Result<&'a [u8]> {
        let len = self.u64()? as usize;
        self.take(len)
    }

    fn values(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let mut m = Matrix::zeros(rows, cols);
        for v in m.data_mut() {
            *v = self.f64()?;
        }
        Ok(m)
    }

    fn params(&mut self) -> Result<ParamSet> {
        let count = self.u64()? as usize;
        let mut params = ParamSet::new();
        for _ in 0..count {
            let name = String::from_utf8(self.bytes_field()?.to_vec())
                .map_err(|_| Error::Data("tensor name not UTF-8".into()))?;
            let rank = self.u64()?;
            if rank != 2 {
                return Err(Error::Data(format!("tensor {name:?}: rank {rank} != 2")));
            }
            let rows = self.u64()? as usize;
            let cols = self.u64()? as usize;
            if rows.checked_mul(cols).is_none() || rows * cols > (1 << 32) {
                return Err(Error::Data(format!("tensor {name:?}: absurd shape")));
            }
            let value = self.values(rows, cols)?;
            params.add(name, value);
        }
        Ok(params)
    }
}
