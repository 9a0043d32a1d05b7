//! Checkpoint files: `"SPOT"`, version byte, length-prefixed ModelConfig
//! JSON, every parameter tensor in declaration order, then an optional
//! optimizer section for resuming training.
//!
//! Tensor record: rank (u8), dims (u32 LE each), values (f64 LE).
//! Optimizer section: flag byte (0 = absent), completed epochs (u64),
//! Adam step (u64), buffer count (u32), then each `m` and `v` buffer as
//! length (u32) + f64 values.

use std::path::Path;

use spotlight_core::model::{ModelConfig, ParameterSet};
use spotlight_core::train::{AdamState, TrainState};
use spotlight_core::Tensor;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SPOT";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParameterSet,
    pub optimizer: Option<OptimizerState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub epoch: usize,
    pub adam: AdamState,
}

impl Checkpoint {
    pub fn from_state(config: &ModelConfig, state: &TrainState) -> Self {
        Self {
            config: config.clone(),
            params: state.params.clone(),
            optimizer: Some(OptimizerState {
                epoch: state.epoch,
                adam: state.adam.clone(),
            }),
        }
    }

    pub fn weights_only(config: &ModelConfig, params: &ParameterSet) -> Self {
        Self {
            config: config.clone(),
            params: params.clone(),
            optimizer: None,
        }
    }

    /// Training state to resume from; a fresh optimizer when none was saved.
    pub fn into_train_state(self) -> TrainState {
        match self.optimizer {
            Some(o) => TrainState {
                params: self.params,
                adam: o.adam,
                epoch: o.epoch,
            },
            None => TrainState::new(self.params),
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in 32 bits")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_values(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    let json = serde_json::to_vec(&ckpt.config).map_err(|e| Error::Format(e.to_string()))?;
    put_u32(&mut out, json.len())?;
    out.extend_from_slice(&json);
    let tensors = ckpt.params.tensors();
    put_u32(&mut out, tensors.len())?;
    for t in tensors {
        out.push(t.rank() as u8);
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        put_values(&mut out, t.data());
    }
    match &ckpt.optimizer {
        None => out.push(0),
        Some(o) => {
            out.push(1);
            out.extend_from_slice(&(o.epoch as u64).to_le_bytes());
            out.extend_from_slice(&o.adam.step.to_le_bytes());
            put_u32(&mut out, o.adam.m.len())?;
            for buf in o.adam.m.iter().chain(&o.adam.v) {
                put_u32(&mut out, buf.len())?;
                put_values(&mut out, buf);
            }
        }
    }
    Ok(out)
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
            .ok_or_else(|| {
                Error::Format(format!(
                    "checkpoint truncated: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn values(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Format("tensor too large".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format(
            "bad checkpoint magic, expected \"SPOT\"".into(),
        ));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let len = r.u32()?;
    let config: ModelConfig = serde_json::from_slice(r.take(len)?)
        .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    let count = r.u32()?;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let values = r.values(shape.iter().product())?;
        tensors.push(Tensor::new(&shape, values)?);
    }
    let params = ParameterSet::from_values(&config, tensors)?;
    let optimizer = match r.u8()? {
        0 => None,
        1 => {
            let epoch = r.u64()? as usize;
            let step = r.u64()?;
            let n = r.u32()?;
            let mut buffers = Vec::with_capacity(2 * n);
            for _ in 0..2 * n {
                let len = r.u32()?;
                buffers.push(r.values(len)?);
            }
            let v = buffers.split_off(n);
            let adam = AdamState {
                step,
                m: buffers,
                v,
            };
            let expected: Vec<usize> = params.learnable().iter().map(|t| t.numel()).collect();
            let got: Vec<usize> = adam.m.iter().map(Vec::len).collect();
            if got != expected || adam.v.iter().map(Vec::len).ne(expected.iter().copied()) {
                return Err(Error::Format(
                    "optimizer buffers do not match the parameters".into(),
                ));
            }
            Some(OptimizerState { epoch, adam })
        }
        f => return Err(Error::Format(format!("bad optimizer flag {f}"))),
    };
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes in checkpoint",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        config,
        params,
        optimizer,
    })
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode(ckpt)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
