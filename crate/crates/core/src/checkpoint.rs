// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "FENCECKP"
//! version    u32
//! header_len u64
//! header     header_len bytes of JSON (CheckpointHeader)
//! blocks     repeated until EOF:
//!              name_len u32, name (utf-8), rank u32, dims u64 × rank,
//!              data f32 × product(dims)
//! ```
//!
//! Model parameters come first in model order, followed by optional
//! optimizer moments named `adam.m.<param>` and `adam.v.<param>`.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fence::FenceConfig;
use crate::model::{Model, ModelConfig};
use crate::optim::{AdamState, Moments};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"FENCECKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub fence: Option<FenceConfig>,
    /// Vocabulary in id order.
    pub vocab: Vec<String>,
    /// Hash of the training schedule that produced the weights.
    pub schedule_fingerprint: Option<String>,
    pub seed: u64,
    /// Optimizer steps taken so far.
    pub step: u64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: Model,
    pub optimizer: Option<AdamState>,
}

fn write_block<W: Write>(w: &mut W, name: &str, shape: &[usize], data: &[f32]) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &d in shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Writes `model` (and optionally optimizer state) under `header`. The
/// header's model config is replaced by the model's own, and its step by
/// the optimizer's when one is given.
pub fn save(path: &Path, header: &CheckpointHeader, model: &Model, optimizer: Option<&AdamState>) -> Result<()> {
    let mut header = header.clone();
    header.model = model.config().clone();
    if let Some(opt) = optimizer {
        header.step = opt.step;
    }
    let json = serde_json::to_vec(&header)?;
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(std::fs::File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for (name, p) in model.param_names().iter().zip(model.params()) {
            write_block(&mut w, name, p.shape(), p.data())?;
        }
        if let Some(opt) = optimizer {
            for ((name, p), m) in model.param_names().iter().zip(model.params()).zip(&opt.moments) {
                write_block(&mut w, &format!("adam.m.{name}"), p.shape(), &m.m)?;
                write_block(&mut w, &format!("adam.v.{name}"), p.shape(), &m.v)?;
            }
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Cursor<R> {
    r: R,
}

impl<R: Read> Cursor<R> {
    fn exact(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.r
            .read_exact(&mut buf)
            .map_err(|e| Error::Checkpoint(format!("truncated {what}: {e}")))?;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.exact(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.exact(8, what)?.try_into().expect("8 bytes")))
    }

    /// Next block, or `None` at a clean end of file.
    fn block(&mut self) -> Result<Option<(String, Tensor)>> {
        let mut first = [0u8; 4];
        match self.r.read(&mut first[..1])? {
            0 => return Ok(None),
            _ => self
                .r
                .read_exact(&mut first[1..])
                .map_err(|e| Error::Checkpoint(format!("truncated block name length: {e}")))?,
        }
        let name_len = u32::from_le_bytes(first) as usize;
        if name_len > 4096 {
            return Err(Error::Checkpoint(format!("implausible block name length {name_len}")));
        }
        let name = String::from_utf8(self.exact(name_len, "block name")?)
            .map_err(|_| Error::Checkpoint("block name is not utf-8".into()))?;
        let rank = self.u32("block rank")? as usize;
        if rank > 3 {
            return Err(Error::Checkpoint(format!("block `{name}` has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64("block dims")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = self.exact(numel * 4, &format!("data of `{name}`"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Some((name, Tensor::new(&shape, data)?)))
    }
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
    let mut c = Cursor { r: BufReader::new(file) };
    if c.exact(8, "magic")? != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let version = c.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let header_len = c.u64("header length")? as usize;
    let header: CheckpointHeader = serde_json::from_slice(&c.exact(header_len, "header")?)?;
    let n_params = header.model.param_specs().len();
    let mut params = Vec::with_capacity(n_params);
    let mut moments_m = Vec::new();
    let mut moments_v = Vec::new();
    while let Some((name, t)) = c.block()? {
        if let Some(rest) = name.strip_prefix("adam.m.") {
            moments_m.push((rest.to_string(), t));
        } else if let Some(rest) = name.strip_prefix("adam.v.") {
            moments_v.push((rest.to_string(), t));
        } else {
            params.push((name, t));
        }
    }
    let model = Model::from_params(header.model.clone(), params)?;
    let optimizer = if moments_m.is_empty() && moments_v.is_empty() {
        None
    } else {
        if moments_m.len() != n_params || moments_v.len() != n_params {
            return Err(Error::Checkpoint("incomplete optimizer state".into()));
        }
        let moments = model
            .param_names()
            .iter()
            .zip(moments_m.into_iter().zip(moments_v))
            .map(|(name, ((nm, m), (nv, v)))| {
                if &nm != name || &nv != name {
                    return Err(Error::Checkpoint(format!("optimizer block order mismatch at `{name}`")));
                }
                Ok(Moments {
                    m: m.into_data(),
                    v: v.into_data(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Some(AdamState {
            step: header.step,
            moments,
        })
    };
    if let Some(f) = &header.fence {
        f.validate_layout()?;
        if f.hidden_dim != header.model.hidden_dim {
            return Err(Error::Checkpoint(format!(
                "fence hidden_dim {} does not match model hidden_dim {}",
                f.hidden_dim, header.model.hidden_dim
            )));
        }
    }
    if header.vocab.len() != header.model.vocab_size {
        return Err(Error::Checkpoint(format!(
            "vocabulary has {} words but the model expects {}",
            header.vocab.len(),
            header.model.vocab_size
        )));
    }
    Ok(Checkpoint {
        header,
        model,
        optimizer,
    })
}
