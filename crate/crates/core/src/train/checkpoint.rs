use std::path::Path;

use super::{AdamState, Result, TrainError, TrainState};
use crate::model::ModelConfig;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RLRC";
pub const CHECKPOINT_VERSION: u32 = 1;
const HISTORY_NAME: &str = "history.loss";
const RNG_BLOCK: usize = 64;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }

    fn tensor(&mut self, name: &str, shape: &[usize], data: &[f32]) {
        self.str(name);
        self.0.push(shape.len() as u8);
        for &d in shape {
            self.u32(d as u32);
        }
        for v in data {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

/// Serializes a training state: magic, version, config echo, named parameter
/// tensors, named optimizer moments and loss history, epoch, then a 64-byte
/// rng block (seed, completed epochs, optimizer step, zero padding).
pub fn encode_checkpoint(state: &TrainState) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.str(&state.model.config().canonical());
    let stores = [state.model.params(), state.bank.params()];
    let named: Vec<(&str, &Tensor<f32>)> = stores.iter().flat_map(|s| s.iter()).collect();
    w.u32(named.len() as u32);
    for (name, t) in &named {
        w.tensor(name, t.shape(), t.data());
    }
    w.u32((2 * named.len() + 1) as u32);
    for ((name, _), m) in named.iter().zip(&state.optimizer.m) {
        w.tensor(&format!("m.{name}"), m.shape(), m.data());
    }
    for ((name, _), v) in named.iter().zip(&state.optimizer.v) {
        w.tensor(&format!("v.{name}"), v.shape(), v.data());
    }
    w.tensor(HISTORY_NAME, &[state.history.len()], &state.history);
    w.u32(state.epoch as u32);
    let start = w.0.len();
    w.u64(state.seed);
    w.u64(state.epoch as u64);
    w.u64(state.optimizer.step);
    w.0.resize(start + RNG_BLOCK, 0);
    w.0
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(TrainError::Checkpoint {
            offset: self.pos,
            msg: msg.into(),
        })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return self.err(format!("truncated: need {n} bytes, {} left", self.bytes.len() - self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let at = self.pos;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| TrainError::Checkpoint {
            offset: at,
            msg: "name is not UTF-8".into(),
        })
    }

    fn tensor(&mut self) -> Result<(String, Vec<usize>, Vec<f32>)> {
        let name = self.str()?;
        let rank = self.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4));
        let bytes = match count {
            Some(b) if b <= self.bytes.len() - self.pos => b,
            _ => return self.err(format!("tensor {name} with extents {shape:?} overruns the file")),
        };
        let data = self
            .take(bytes)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((name, shape, data))
    }

    fn tensors(&mut self) -> Result<Vec<(String, Tensor<f32>)>> {
        let n = self.u32()? as usize;
        let mut out = Vec::new();
        for _ in 0..n {
            let at = self.pos;
            let (name, shape, data) = self.tensor()?;
            let t = Tensor::from_vec(&shape, data).map_err(|e| TrainError::Checkpoint {
                offset: at,
                msg: format!("tensor {name}: {e}"),
            })?;
            out.push((name, t));
        }
        Ok(out)
    }
}

/// Rebuilds a training state. With `expected`, the embedded config must
/// match it exactly.
pub fn decode_checkpoint(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<TrainState> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        r.pos = 0;
        return r.err("bad magic, not a checkpoint");
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        r.pos -= 4;
        return r.err(format!("unsupported version {version}, expected {CHECKPOINT_VERSION}"));
    }
    let config_at = r.pos;
    let config = ModelConfig::from_canonical(&r.str()?).map_err(|e| TrainError::Checkpoint {
        offset: config_at,
        msg: e.to_string(),
    })?;
    if expected.is_some_and(|e| *e != config) {
        return Err(TrainError::ConfigMismatch);
    }
    let params = r.tensors()?;
    let mut state = TrainState::init(&config, 0)?;
    let n_net = state.model.params().len();
    if params.len() != n_net + state.bank.params().len() {
        return r.err(format!("{} parameter tensors do not fit the embedded config", params.len()));
    }
    let bad_layout = |e: crate::model::ModelError| TrainError::Checkpoint {
        offset: config_at,
        msg: e.to_string(),
    };
    state.model.params_mut().assign(&params[..n_net]).map_err(bad_layout)?;
    state.bank.params_mut().assign(&params[n_net..]).map_err(bad_layout)?;

    let moments_at = r.pos;
    let n = r.u32()? as usize;
    if n != 2 * params.len() + 1 {
        r.pos = moments_at;
        return r.err(format!("expected {} moment entries, found {n}", 2 * params.len() + 1));
    }
    let mut m = Vec::with_capacity(params.len());
    let mut v = Vec::with_capacity(params.len());
    for (i, prefix) in (0..2 * params.len()).map(|i| (i, if i < params.len() { "m." } else { "v." })) {
        let at = r.pos;
        let (name, shape, data) = r.tensor()?;
        let (pname, pt) = &params[i % params.len()];
        if name != format!("{prefix}{pname}") || shape != pt.shape() {
            r.pos = at;
            return r.err(format!("moment {name} does not match parameter {pname}"));
        }
        let t = Tensor::from_vec(&shape, data).expect("shape checked against parameter");
        if i < params.len() {
            m.push(t);
        } else {
            v.push(t);
        }
    }
    let at = r.pos;
    let (name, shape, history) = r.tensor()?;
    if name != HISTORY_NAME || shape.len() != 1 {
        r.pos = at;
        return r.err(format!("expected {HISTORY_NAME}, found {name}"));
    }
    let epoch = r.u32()? as usize;
    let rng_at = r.pos;
    let seed = r.u64()?;
    let rng_epoch = r.u64()?;
    let step = r.u64()?;
    r.take(RNG_BLOCK - 24)?;
    if rng_epoch != epoch as u64 || history.len() != epoch {
        r.pos = rng_at;
        return r.err("epoch counters disagree");
    }
    if r.pos != bytes.len() {
        return r.err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    state.optimizer = AdamState { step, m, v };
    state.epoch = epoch;
    state.history = history;
    state.seed = seed;
    Ok(state)
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(state)).map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_checkpoint(&bytes, expected)
}
