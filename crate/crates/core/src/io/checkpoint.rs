//! Binary checkpoints.
//!
//! ```text
//! "UMCKPT01"
//! u32       tensor count (model tensors, then "adam/…" tensors)
//! per tensor:
//!   u16     name length, then the UTF-8 name
//!   u8      rank, then one u32 per extent
//!   f64     payload, row-major
//! u32       config length, then the UTF-8 config text
//! ```
//!
//! All integers and floats are little-endian. The tied target embedding is
//! stored once, as `tgt.emb`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{param_shapes, Model, ModelParams};
use crate::tensor::Tensor;
use crate::trainer::{AdamState, TrainConfig};

use super::config::{parse_config, render_config};
use super::{read_bytes, write_atomic};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"UMCKPT01";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model,
    pub adam: Option<AdamState>,
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| Error::invalid("tensor name too long"))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(u8::try_from(t.rank()).map_err(|_| Error::invalid("rank too large"))?);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::invalid("extent too large"))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(())
}

pub fn encode_checkpoint(cfg: &TrainConfig, model: &Model, adam: Option<&AdamState>) -> Result<Vec<u8>> {
    if cfg.model != model.config {
        return Err(Error::invalid("checkpoint config does not describe the model"));
    }
    let step = adam.map(|a| Tensor::from_parts(vec![1], vec![a.step as f64]));
    let mut tensors: Vec<(String, &Tensor)> = model
        .params
        .iter()
        .map(|(n, t)| (n.to_string(), t))
        .collect();
    if let (Some(a), Some(step)) = (adam, &step) {
        for (name, m) in model.params.names().iter().zip(&a.m) {
            tensors.push((format!("adam/m/{name}"), m));
        }
        for (name, v) in model.params.names().iter().zip(&a.v) {
            tensors.push((format!("adam/v/{name}"), v));
        }
        tensors.push(("adam/step".to_string(), step));
    }

    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        put_tensor(&mut out, name, t)?;
    }
    let text = render_config(cfg);
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.path, format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn utf8(&mut self, n: usize) -> Result<&'a str> {
        let path = self.path;
        std::str::from_utf8(self.take(n)?).map_err(|_| Error::format(path, "invalid UTF-8"))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let len = self.u16()? as usize;
        let name = self.utf8(len)?.to_string();
        let rank = self.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::format(self.path, format!("tensor `{name}` is too large")))?;
        let data = self
            .take(n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::format(self.path, format!("tensor `{name}`: {e}")))?;
        Ok((name, t))
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(8).ok() != Some(&CHECKPOINT_MAGIC[..]) {
        return Err(Error::format(path, "not a UMCKPT01 checkpoint (bad magic)"));
    }
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        tensors.push(r.tensor()?);
    }
    let len = r.u32()? as usize;
    let text = r.utf8(len)?;
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after config"));
    }
    let config = parse_config(text).map_err(|e| Error::format(path, e.to_string()))?;

    let shapes = param_shapes(&config.model);
    let mut params: Vec<Option<Tensor>> = vec![None; shapes.len()];
    let mut m: Vec<Option<Tensor>> = vec![None; shapes.len()];
    let mut v: Vec<Option<Tensor>> = vec![None; shapes.len()];
    let mut step = None;
    let slot = |name: &str| shapes.iter().position(|(n, _)| n == name);
    for (name, t) in tensors {
        let (target, base) = if let Some(rest) = name.strip_prefix("adam/m/") {
            (&mut m, rest)
        } else if let Some(rest) = name.strip_prefix("adam/v/") {
            (&mut v, rest)
        } else if name == "adam/step" {
            step = Some(t.data()[0]);
            continue;
        } else {
            (&mut params, name.as_str())
        };
        let i = slot(base).ok_or_else(|| Error::format(path, format!("unknown tensor `{name}`")))?;
        if t.shape() != &shapes[i].1[..] {
            return Err(Error::format(
                path,
                format!("tensor `{name}` has shape {:?}, expected {:?}", t.shape(), shapes[i].1),
            ));
        }
        if target[i].replace(t).is_some() {
            return Err(Error::format(path, format!("duplicate tensor `{name}`")));
        }
    }

    let mut named = Vec::with_capacity(shapes.len());
    for ((name, _), t) in shapes.iter().zip(params) {
        let t = t.ok_or_else(|| Error::format(path, format!("missing tensor `{name}`")))?;
        named.push((name.clone(), t));
    }
    let model = Model::new(config.model, ModelParams::from_named(named))
        .map_err(|e| Error::format(path, e.to_string()))?;

    let adam = match step {
        None if m.iter().chain(&v).all(Option::is_none) => None,
        None => return Err(Error::format(path, "optimizer moments without adam/step")),
        Some(step) => {
            let collect = |xs: Vec<Option<Tensor>>| -> Result<Vec<Tensor>> {
                xs.into_iter()
                    .map(|t| t.ok_or_else(|| Error::format(path, "incomplete optimizer state")))
                    .collect()
            };
            Some(AdamState {
                config: config.adam,
                step: step as u64,
                m: collect(m)?,
                v: collect(v)?,
            })
        }
    };
    Ok(Checkpoint { config, model, adam })
}

pub fn save_checkpoint(path: &Path, cfg: &TrainConfig, model: &Model, adam: Option<&AdamState>) -> Result<()> {
    write_atomic(path, &encode_checkpoint(cfg, model, adam)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&read_bytes(path)?, path)
}
