//! Checkpoint files.
//!
//! ```text
//! "TAVD" | version: u16
//! model config: len: u32 | utf-8 TOML table
//! run config:   len: u32 | utf-8 text (may be empty)
//! count: u32
//! count × (name_len: u32 | name | rank: u32 | dims: rank × u32 | f32 payload)
//! ```
//!
//! Parameters are written in sorted name order and stored as f32, so a
//! loaded state equals the saved one rounded to single precision.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::dit::config::ModelConfig;
use crate::dit::model::DenoiserState;
use crate::error::{Error, Result};
use crate::features::record::{put_u16, put_u32, Reader};
use crate::nn::Parameters;
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TAVD";
pub const CHECKPOINT_VERSION: u16 = 2;

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn read_str(r: &mut Reader<'_>) -> Result<String> {
    let n = r.u32()? as usize;
    String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Format("non-utf8 text".into()))
}

pub fn encode_checkpoint(state: &DenoiserState, run_config: &str) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u16(&mut out, CHECKPOINT_VERSION);
    put_str(&mut out, &state.cfg.to_text());
    put_str(&mut out, run_config);
    let mut named = state.named();
    named.sort_by(|a, b| a.0.cmp(&b.0));
    put_u32(&mut out, named.len() as u32);
    for (name, t) in named {
        put_str(&mut out, &name);
        put_u32(&mut out, t.rank() as u32);
        for &d in t.shape() {
            put_u32(&mut out, d as u32);
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// Returns the state and the embedded run configuration text.
pub fn decode_checkpoint(buf: &[u8]) -> Result<(DenoiserState, String)> {
    let mut r = Reader::new(buf);
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let cfg = ModelConfig::from_text(&read_str(&mut r)?)?;
    let run_config = read_str(&mut r)?;
    let count = r.u32()? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name = read_str(&mut r)?;
        let rank = r.u32()? as usize;
        let dims = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let data = r
            .take(n * 4)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        let t = Tensor::new(&dims, data).map_err(|e| Error::Format(e.to_string()))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate parameter {name}")));
        }
    }
    if !r.finished() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    let mut state = DenoiserState::init(&cfg, 0)?;
    let mut problem = None;
    state.visit_mut("", &mut |name, t| match tensors.remove(&name) {
        Some(src) if src.shape() == t.shape() => *t = src,
        Some(src) => {
            problem.get_or_insert(format!(
                "parameter {name}: stored {:?}, expected {:?}",
                src.shape(),
                t.shape()
            ));
        }
        None => {
            problem.get_or_insert(format!("checkpoint lacks parameter {name}"));
        }
    });
    if let Some(p) = problem {
        return Err(Error::Format(p));
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Format(format!("unexpected parameter {extra}")));
    }
    if !state.all_finite() {
        return Err(Error::Numeric("checkpoint holds non-finite weights".into()));
    }
    Ok((state, run_config))
}

pub fn save_checkpoint(path: &Path, state: &DenoiserState, run_config: &str) -> Result<()> {
    fs::write(path, encode_checkpoint(state, run_config)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(DenoiserState, String)> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&buf)
}
