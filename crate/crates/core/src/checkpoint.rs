//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MXRS" | u32 version | u32 len | header JSON (architecture, input normalization)
//! u32 count | count x tensor          parameters, declaration order
//! u32 count | count x (mean, var)     batch-norm running statistics
//! u8 has_state [ u64 epoch | f64 best_error_pct | u32 count | count x tensor ]
//! tensor = u32 rank | rank x u32 dim | f32 data
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::model::{ResNet, ResNetConfig};
use crate::tensor::{RunningStats, Tensor};

pub const MAGIC: &[u8; 4] = b"MXRS";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    model: ResNetConfig,
    norm: Option<NormStats>,
}

/// A model with the input normalization it was trained under.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ResNet,
    pub norm: Option<NormStats>,
    pub state: Option<TrainState>,
}

/// Optimizer and progress state needed to resume training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Last completed epoch.
    pub epoch: usize,
    pub best_error_pct: f64,
    pub velocity: Vec<Vec<f32>>,
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn tensor(&mut self, shape: &[usize], data: &[f32]) {
        self.u32(shape.len() as u32);
        for &d in shape {
            self.u32(d as u32);
        }
        for v in data {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("checkpoint is truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<Tensor<f32>> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("implausible tensor rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

pub fn encode(model: &ResNet, norm: Option<&NormStats>, state: Option<&TrainState>) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    let header = Header {
        model: model.config().clone(),
        norm: norm.copied(),
    };
    let config = serde_json::to_vec(&header).map_err(|e| Error::Serialization(e.to_string()))?;
    w.u32(config.len() as u32);
    w.0.extend_from_slice(&config);
    w.u32(model.params().len() as u32);
    for p in model.params() {
        w.tensor(p.shape(), p.data());
    }
    w.u32(model.running_stats().len() as u32);
    for r in model.running_stats() {
        w.tensor(&[r.mean.len()], &r.mean);
        w.tensor(&[r.var.len()], &r.var);
    }
    match state {
        None => w.0.push(0),
        Some(s) => {
            w.0.push(1);
            w.0.extend_from_slice(&(s.epoch as u64).to_le_bytes());
            w.0.extend_from_slice(&s.best_error_pct.to_le_bytes());
            w.u32(s.velocity.len() as u32);
            for v in &s.velocity {
                w.tensor(&[v.len()], v);
            }
        }
    }
    Ok(w.0)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let len = r.u32()? as usize;
    let header: Header =
        serde_json::from_slice(r.take(len)?).map_err(|e| Error::Checkpoint(format!("bad header record: {e}")))?;
    let mut model = ResNet::new(&header.model, 0).map_err(|e| Error::Checkpoint(e.to_string()))?;

    let count = r.u32()? as usize;
    if count != model.params().len() {
        return Err(Error::Checkpoint(format!(
            "{count} parameter tensors, model has {}",
            model.params().len()
        )));
    }
    let params = (0..count).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
    let count = r.u32()? as usize;
    let mut running = Vec::with_capacity(count);
    for _ in 0..count {
        let mean = r.tensor()?.into_data();
        let var = r.tensor()?.into_data();
        running.push(RunningStats { mean, var });
    }
    model.load_state(params, running)?;

    let state = match r.u8()? {
        0 => None,
        1 => {
            let epoch = r.u64()? as usize;
            let best_error_pct = r.f64()?;
            let n = r.u32()? as usize;
            let velocity = (0..n)
                .map(|_| r.tensor().map(Tensor::into_data))
                .collect::<Result<Vec<_>>>()?;
            let fits = velocity.len() == model.params().len()
                && velocity.iter().zip(model.params()).all(|(v, p)| v.len() == p.numel());
            if !fits {
                return Err(Error::Checkpoint("optimizer state does not match the model".into()));
            }
            Some(TrainState {
                epoch,
                best_error_pct,
                velocity,
            })
        }
        flag => return Err(Error::Checkpoint(format!("bad state flag {flag}"))),
    };
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after checkpoint".into()));
    }
    Ok(Checkpoint {
        model,
        norm: header.norm,
        state,
    })
}

/// Writes atomically through a temporary sibling file.
pub fn save(path: &Path, model: &ResNet, norm: Option<&NormStats>, state: Option<&TrainState>) -> Result<()> {
    let bytes = encode(model, norm, state)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    decode(&bytes)
}

/// Loads a checkpoint and checks it was written for `expected`.
pub fn load_matching(path: &Path, expected: &ResNetConfig) -> Result<Checkpoint> {
    let ckpt = load(path)?;
    if ckpt.model.config() != expected {
        return Err(Error::Checkpoint(format!(
            "checkpoint architecture {:?} does not match requested {:?}",
            ckpt.model.config(),
            expected
        )));
    }
    Ok(ckpt)
}
