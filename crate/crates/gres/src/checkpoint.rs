//! Binary checkpoints.
//!
//! Layout: the 8-byte magic `GRESCKPT`, a little-endian `u32` format
//! version, a little-endian `u64` header length, the JSON header, then the
//! payload of little-endian `f32` values. The header records the run
//! configuration (as TOML text), the step counters and one entry per tensor
//! giving its name, group, shape and byte offset into the payload. Parameters
//! come first in store order, followed by the optimizer moments.

use std::io::Write;
use std::path::Path;

use gres_core::model::Model;
use gres_core::nn::ParamStore;
use gres_core::tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{io_at, Error, Result};
use crate::train::TrainState;

pub const MAGIC: &[u8; 8] = b"GRESCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Param,
    AdamM,
    AdamV,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub group: Group,
    pub shape: [usize; 2],
    pub dtype: String,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: String,
    pub step: u64,
    pub optimizer_step: u64,
    pub tensors: Vec<TensorEntry>,
}

pub fn to_bytes(cfg: &RunConfig, state: &TrainState) -> Vec<u8> {
    let groups = [(Group::Param, &state.model.store), (Group::AdamM, &state.opt.m), (Group::AdamV, &state.opt.v)];
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    for (group, store) in groups {
        for p in store.iter() {
            let (r, c) = p.value.shape();
            tensors.push(TensorEntry {
                name: p.name.clone(),
                group,
                shape: [r, c],
                dtype: "f32".into(),
                offset: payload.len() as u64,
            });
            for v in p.value.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let header = Header { config: cfg.to_toml(), step: state.step, optimizer_step: state.opt.step, tensors };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(20 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Parses the header and returns it with the payload slice.
pub fn read_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let end = 20usize.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[20..end])?;
    Ok((header, &bytes[end..]))
}

fn fill(store: &mut ParamStore<f32>, group: Group, entries: &[&TensorEntry], payload: &[u8]) -> Result<()> {
    if entries.len() != store.len() {
        return Err(bad(format!("{:?}: {} tensors, model has {}", group, entries.len(), store.len())));
    }
    for e in entries {
        if e.dtype != "f32" {
            return Err(bad(format!("{}: unsupported dtype {}", e.name, e.dtype)));
        }
        let n = e.shape[0] * e.shape[1];
        let start = e.offset as usize;
        let bytes = start
            .checked_add(n * 4)
            .and_then(|end| payload.get(start..end))
            .ok_or_else(|| bad(format!("{}: payload out of range", e.name)))?;
        let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        let t = Tensor::from_vec(e.shape[0], e.shape[1], data)?;
        store.set(&e.name, t).map_err(|err| bad(err.to_string()))?;
    }
    Ok(())
}

pub fn from_bytes(bytes: &[u8]) -> Result<(RunConfig, TrainState)> {
    let (header, payload) = read_header(bytes)?;
    let cfg = RunConfig::from_toml(&header.config)?;
    let mut state = TrainState::new(&cfg)?;
    let mut seen = std::collections::BTreeSet::new();
    for e in &header.tensors {
        if !seen.insert((e.group as u8, e.name.as_str())) {
            return Err(bad(format!("{} listed twice in {:?}", e.name, e.group)));
        }
    }
    let select = |g: Group| header.tensors.iter().filter(|e| e.group == g).collect::<Vec<_>>();
    fill(&mut state.model.store, Group::Param, &select(Group::Param), payload)?;
    fill(&mut state.opt.m, Group::AdamM, &select(Group::AdamM), payload)?;
    fill(&mut state.opt.v, Group::AdamV, &select(Group::AdamV), payload)?;
    state.step = header.step;
    state.opt.step = header.optimizer_step;
    Ok((cfg, state))
}

pub fn save(path: &Path, cfg: &RunConfig, state: &TrainState) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(io_at(path))?;
    f.write_all(&to_bytes(cfg, state)).map_err(io_at(path))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(RunConfig, TrainState)> {
    let bytes = std::fs::read(path).map_err(io_at(path))?;
    from_bytes(&bytes)
}

/// Loads only the model.
pub fn load_model(path: &Path) -> Result<(RunConfig, Model<f32>)> {
    let (cfg, state) = load(path)?;
    Ok((cfg, state.model))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model.image_size = 32;
        cfg.model.channels = 8;
        cfg.model.lang_channels = 8;
        cfg.model.decoder_layers = 1;
        cfg.model.blocks_per_layer = 1;
        cfg.model.main_depth = 1;
        cfg.model.nt_depth = 1;
        cfg
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = tiny();
        let mut state = TrainState::new(&cfg).unwrap();
        state.step = 7;
        state.opt.step = 7;
        for (i, p) in state.opt.v.iter_mut().enumerate() {
            p.value.data_mut().iter_mut().for_each(|x| *x = i as f32 * 0.37 + f32::MIN_POSITIVE);
        }
        let bytes = to_bytes(&cfg, &state);
        let (cfg2, back) = from_bytes(&bytes).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(back.step, 7);
        assert_eq!(to_bytes(&cfg2, &back), bytes);
        for (a, b) in state.model.store.iter().zip(back.model.store.iter()) {
            let bits = |t: &Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value), "{}", a.name);
        }
    }

    #[test]
    fn manifest_covers_every_parameter_once() {
        let cfg = tiny();
        let state = TrainState::new(&cfg).unwrap();
        let bytes = to_bytes(&cfg, &state);
        let (header, payload) = read_header(&bytes).unwrap();
        let params: Vec<_> = header.tensors.iter().filter(|e| e.group == Group::Param).collect();
        assert_eq!(params.len(), state.model.store.len());
        for (e, p) in params.iter().zip(state.model.store.iter()) {
            assert_eq!(e.name, p.name);
        }
        let total: usize = header.tensors.iter().map(|e| e.shape[0] * e.shape[1] * 4).sum();
        assert_eq!(total, payload.len());
        let mut offsets: Vec<_> = header.tensors.iter().map(|e| e.offset).collect();
        offsets.dedup();
        assert_eq!(offsets.len(), header.tensors.len());
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let cfg = tiny();
        let state = TrainState::new(&cfg).unwrap();
        let bytes = to_bytes(&cfg, &state);
        assert!(from_bytes(&bytes[..bytes.len() - 4]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(from_bytes(&wrong).is_err());
        assert!(from_bytes(&bytes[..10]).is_err());
    }
}
