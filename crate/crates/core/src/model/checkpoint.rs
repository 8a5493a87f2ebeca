//! `.pkckpt` container.
//!
//! ```text
//! "PKCKPT"            6 bytes
//! version             u32 LE
//! descriptor length   u64 LE
//! descriptor          JSON (architecture, epoch, round, per-layer buffer lengths)
//! per parametric layer, in order: weights f32 LE, then bias f32 LE
//! per conv layer, in order: mask bitset, ceil(n_out/8) bytes, LSB-first
//! crc32               u32 LE over every preceding byte
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{ConvWeights, LinearWeights};

use super::{Architecture, FilterMask, LayerParams, ModelState};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"PKCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Descriptor {
    architecture: Architecture,
    epoch: usize,
    round: usize,
    buffers: Vec<BufferInfo>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BufferInfo {
    layer: usize,
    weights: usize,
    bias: usize,
}

pub(crate) fn to_bytes(model: &ModelState) -> Result<Vec<u8>> {
    let buffers = model
        .params
        .iter()
        .enumerate()
        .filter_map(|(layer, p)| match p {
            LayerParams::None => None,
            LayerParams::Conv(c) => Some(BufferInfo {
                layer,
                weights: c.filters.len(),
                bias: c.bias.as_ref().map_or(0, Vec::len),
            }),
            LayerParams::Linear(l) => Some(BufferInfo {
                layer,
                weights: l.weight.len(),
                bias: l.bias.len(),
            }),
        })
        .collect();
    let desc = serde_json::to_vec(&Descriptor {
        architecture: model.arch.clone(),
        epoch: model.epoch,
        round: model.round,
        buffers,
    })?;

    let mut out = Vec::with_capacity(64 + desc.len() + 4 * model.stored_param_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(desc.len() as u64).to_le_bytes());
    out.extend_from_slice(&desc);
    for p in &model.params {
        for buf in p.buffers() {
            for v in buf {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    for mask in &model.masks {
        let mut bytes = vec![0u8; mask.len().div_ceil(8)];
        for (j, &live) in mask.bits().iter().enumerate() {
            if live {
                bytes[j / 8] |= 1 << (j % 8);
            }
        }
        out.extend_from_slice(&bytes);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

pub(crate) fn from_bytes(bytes: &[u8]) -> Result<ModelState> {
    if bytes.len() < CHECKPOINT_MAGIC.len() + 4 + 8 + 4 {
        return Err(Error::Checkpoint("file too short".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
    if crc32fast::hash(body) != stored {
        return Err(Error::Checkpoint("crc32 mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(6)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let desc_len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
    let desc: Descriptor = serde_json::from_slice(r.take(desc_len)?)?;

    let mut model = ModelState::zeros(desc.architecture)?;
    model.epoch = desc.epoch;
    model.round = desc.round;
    let mut infos = desc.buffers.into_iter();
    for (layer, p) in model.params.iter_mut().enumerate() {
        if matches!(p, LayerParams::None) {
            continue;
        }
        let info = infos
            .next()
            .filter(|b| b.layer == layer)
            .ok_or_else(|| Error::Checkpoint(format!("descriptor missing buffers for layer {layer}")))?;
        match p {
            LayerParams::Conv(c) => {
                if info.weights != c.filters.len() || info.bias != c.bias.as_ref().map_or(0, Vec::len) {
                    return Err(Error::Checkpoint(format!(
                        "layer {layer} buffer sizes disagree with architecture"
                    )));
                }
                let filters = r.f32s(info.weights)?;
                let bias = (info.bias > 0).then(|| r.f32s(info.bias)).transpose()?;
                *c = ConvWeights::new(c.n_out, c.n_in, c.k, filters, bias)?;
            }
            LayerParams::Linear(l) => {
                if info.weights != l.weight.len() || info.bias != l.bias.len() {
                    return Err(Error::Checkpoint(format!(
                        "layer {layer} buffer sizes disagree with architecture"
                    )));
                }
                *l = LinearWeights {
                    weight: r.f32s(info.weights)?,
                    bias: r.f32s(info.bias)?,
                    ..*l
                };
            }
            LayerParams::None => unreachable!(),
        }
    }
    for mask in model.masks.iter_mut() {
        let n = mask.len();
        let bytes = r.take(n.div_ceil(8))?;
        *mask = FilterMask::from_bits((0..n).map(|j| bytes[j / 8] & (1 << (j % 8)) != 0).collect());
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &ModelState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(model)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelState> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
