//! Little-endian binary checkpoints.
//!
//! Layout:
//!
//! ```text
//! magic      8 bytes  "ATDSRCKP"
//! version    u32
//! config     u32 length + UTF-8 `key=value` lines
//! iteration  u64
//! rng        u8 flag, then seed [u8; 32], stream u64, word position u128
//! optimizer  u8 flag, then step u64
//! params     u32 count, then per parameter:
//!              u32 name length + UTF-8 name
//!              u32 rank + u64 dims
//!              f64 values
//!              (f64 first moments, f64 second moments when optimizer flag set)
//! ```

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{AtdError, Result};
use crate::model::{AtdModel, ModelConfig};
use crate::tensor::Tensor;
use crate::train::{AdamState, TrainState};

pub const MAGIC: &[u8; 8] = b"ATDSRCKP";
pub const VERSION: u32 = 1;

/// Serializable ChaCha8 position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Parameters in model order, keyed by hierarchical name.
    pub params: Vec<(String, Tensor)>,
    pub optimizer: Option<AdamState>,
    pub rng: Option<RngState>,
    pub iteration: u64,
}

impl Checkpoint {
    pub fn from_model(model: &AtdModel) -> Self {
        Self {
            config: model.config.clone(),
            params: model.store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
            optimizer: None,
            rng: None,
            iteration: 0,
        }
    }

    pub fn from_state(state: &TrainState) -> Self {
        Self {
            optimizer: Some(state.optimizer.clone()),
            rng: Some(RngState::capture(&state.rng)),
            iteration: state.iteration as u64,
            ..Self::from_model(&state.model)
        }
    }

    /// Rebuilds the model; every parameter must be present with its shape.
    pub fn to_model(&self) -> Result<AtdModel> {
        let mut model = AtdModel::new(self.config.clone(), 0)?;
        if model.store.len() != self.params.len() {
            return Err(AtdError::Format(format!(
                "checkpoint holds {} parameters, the configured model has {}",
                self.params.len(),
                model.store.len()
            )));
        }
        let expected: Vec<String> = model.store.iter().map(|(n, _)| n.to_string()).collect();
        for ((name, t), expected) in self.params.iter().zip(&expected) {
            if name != expected {
                return Err(AtdError::Format(format!("expected parameter {expected}, found {name}")));
            }
            model
                .store
                .set(name, t.clone())
                .map_err(|e| AtdError::Format(e.to_string()))?;
        }
        Ok(model)
    }

    /// Rebuilds a resumable training state.
    pub fn to_state(&self, seed: u64) -> Result<TrainState> {
        let model = self.to_model()?;
        let mut state = TrainState::new(model, seed);
        if let Some(opt) = &self.optimizer {
            state.optimizer = opt.clone();
        }
        if let Some(rng) = &self.rng {
            state.rng = rng.restore();
        }
        state.iteration = self.iteration as usize;
        Ok(state)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.config.to_kv());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        match &self.rng {
            Some(r) => {
                out.push(1);
                out.extend_from_slice(&r.seed);
                out.extend_from_slice(&r.stream.to_le_bytes());
                out.extend_from_slice(&r.word_pos.to_le_bytes());
            }
            None => out.push(0),
        }
        match &self.optimizer {
            Some(o) => {
                out.push(1);
                out.extend_from_slice(&o.step.to_le_bytes());
            }
            None => out.push(0),
        }
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (i, (name, t)) in self.params.iter().enumerate() {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_f64s(&mut out, t.data());
            if let Some(o) = &self.optimizer {
                put_f64s(&mut out, &o.m[i]);
                put_f64s(&mut out, &o.v[i]);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(AtdError::Format("not a checkpoint (bad magic)".into()));
        }
        let version = get_u32(&mut r)?;
        if version != VERSION {
            return Err(AtdError::Format(format!(
                "checkpoint version {version} is not supported (expected {VERSION})"
            )));
        }
        let config = ModelConfig::from_kv(&get_str(&mut r)?)?;
        let iteration = get_u64(&mut r)?;
        let rng = if get_u8(&mut r)? == 1 {
            let mut seed = [0u8; 32];
            read_exact(&mut r, &mut seed)?;
            let stream = get_u64(&mut r)?;
            let mut wp = [0u8; 16];
            read_exact(&mut r, &mut wp)?;
            Some(RngState {
                seed,
                stream,
                word_pos: u128::from_le_bytes(wp),
            })
        } else {
            None
        };
        let opt_step = if get_u8(&mut r)? == 1 { Some(get_u64(&mut r)?) } else { None };
        let count = get_u32(&mut r)? as usize;
        let mut params = Vec::with_capacity(count);
        let (mut ms, mut vs) = (Vec::new(), Vec::new());
        for _ in 0..count {
            let name = get_str(&mut r)?;
            let rank = get_u32(&mut r)? as usize;
            if rank > 8 {
                return Err(AtdError::Format(format!("parameter {name} has rank {rank}")));
            }
            let shape = (0..rank)
                .map(|_| get_u64(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let remaining = bytes.len() - r.position() as usize;
            if numel.saturating_mul(8) > remaining {
                return Err(AtdError::Format(format!("parameter {name} is truncated")));
            }
            let data = get_f64s(&mut r, numel)?;
            params.push((name, Tensor::new(shape, data)?.with_requires_grad(true)));
            if opt_step.is_some() {
                ms.push(get_f64s(&mut r, numel)?);
                vs.push(get_f64s(&mut r, numel)?);
            }
        }
        if (r.position() as usize) != bytes.len() {
            return Err(AtdError::Format("trailing bytes after the parameter table".into()));
        }
        Ok(Self {
            config,
            params,
            optimizer: opt_step.map(|step| AdamState { m: ms, v: vs, step }),
            rng,
            iteration,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn read_exact(r: &mut Cursor<&[u8]>, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| AtdError::Format("unexpected end of checkpoint".into()))
}

fn get_u8(r: &mut Cursor<&[u8]>) -> Result<u8> {
    let mut b = [0u8; 1];
    read_exact(r, &mut b)?;
    Ok(b[0])
}

fn get_u32(r: &mut Cursor<&[u8]>) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(r: &mut Cursor<&[u8]>) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_str(r: &mut Cursor<&[u8]>) -> Result<String> {
    let len = get_u32(r)? as usize;
    let remaining = r.get_ref().len() - r.position() as usize;
    if len > remaining {
        return Err(AtdError::Format("string runs past the end of the checkpoint".into()));
    }
    let mut b = vec![0u8; len];
    read_exact(r, &mut b)?;
    String::from_utf8(b).map_err(|_| AtdError::Format("string is not UTF-8".into()))
}

fn get_f64s(r: &mut Cursor<&[u8]>, n: usize) -> Result<Vec<f64>> {
    let mut b = [0u8; 8];
    (0..n)
        .map(|_| {
            read_exact(r, &mut b)?;
            Ok(f64::from_le_bytes(b))
        })
        .collect()
}
