//! Checkpoint files.
//!
//! Layout (little-endian): `"MSDC"`, version `u32`, config hash `u64`, step
//! `u64`; a named-tensor table (`u32` count, then per tensor: name length
//! `u16`, UTF-8 name, rank `u8`, dims `u32[rank]`, `f64` payload); one block
//! per queue (image then text: capacity `u64`, dim `u32`, head `u64`, fill
//! `u64`, ids `u64[capacity]`, ring `f64[capacity·dim]`); and a trailing state
//! block with the epoch/optimizer counters and divergence bookkeeping.

use std::collections::HashMap;
use std::path::Path;

use crate::data::Cursor;
use crate::encoder::{EncoderParams, TemperatureParam};
use crate::error::{Error, Result};
use crate::losses::TemperatureMode;
use crate::model::{temperature_names, DualEncoder};
use crate::momentum::{MomentumPair, MomentumQueue};
use crate::rfbe::QueuePair;
use crate::tensor::Tensor;

use super::optim::AdamState;
use super::TrainState;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MSDC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_queue(out: &mut Vec<u8>, q: &MomentumQueue) {
    out.extend_from_slice(&(q.capacity() as u64).to_le_bytes());
    out.extend_from_slice(&(q.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(q.head() as u64).to_le_bytes());
    out.extend_from_slice(&(q.fill() as u64).to_le_bytes());
    for id in q.raw_ids() {
        out.extend_from_slice(&id.to_le_bytes());
    }
    for v in q.raw_ring() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(state: &TrainState, config_hash: u64) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&config_hash.to_le_bytes());
    out.extend_from_slice(&state.step.to_le_bytes());

    let mut table: Vec<(String, &Tensor)> = state.model.named_tensors();
    let trainable = state.model.trainable_names();
    for (name, m) in trainable.iter().zip(&state.adam.m) {
        table.push((format!("adam.m.{name}"), m));
    }
    for (name, v) in trainable.iter().zip(&state.adam.v) {
        table.push((format!("adam.v.{name}"), v));
    }
    out.extend_from_slice(&(table.len() as u32).to_le_bytes());
    for (name, t) in &table {
        put_tensor(&mut out, name, t);
    }

    put_queue(&mut out, &state.queues.image);
    put_queue(&mut out, &state.queues.text);

    out.extend_from_slice(&state.epoch.to_le_bytes());
    out.extend_from_slice(&state.adam.t.to_le_bytes());
    out.extend_from_slice(&state.ema_updates.to_le_bytes());
    out.push(state.initial_loss.is_some() as u8);
    out.extend_from_slice(&state.initial_loss.unwrap_or(0.0).to_le_bytes());
    out.extend_from_slice(&state.divergence_streak.to_le_bytes());
    out.extend_from_slice(&state.metrics_lines.to_le_bytes());
    let failure = state.failure.as_deref().unwrap_or("");
    out.push(state.failure.is_some() as u8);
    out.extend_from_slice(&(failure.len() as u16).to_le_bytes());
    out.extend_from_slice(failure.as_bytes());
    out
}

fn take_queue(c: &mut Cursor) -> Result<MomentumQueue> {
    let at = c.offset();
    let capacity = c.u64("queue capacity")? as usize;
    let dim = c.u32("queue dim")? as usize;
    let head = c.u64("queue head")? as usize;
    let fill = c.u64("queue fill")? as usize;
    let ids_bytes = c.take(
        capacity.checked_mul(8).ok_or_else(|| Error::format(at, "queue capacity overflows"))?,
        "queue ids",
    )?;
    let ids = ids_bytes.chunks_exact(8).map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
    let ring = c.f64s(capacity.saturating_mul(dim), "queue ring")?;
    MomentumQueue::from_parts(capacity, dim, ring, ids, head, fill).map_err(|e| Error::format(at, e.to_string()))
}

/// Named tensors read from a file, consumed by name.
struct Table {
    tensors: HashMap<String, Tensor>,
    end: u64,
}

impl Table {
    fn take(&mut self, name: &str) -> Result<Tensor> {
        self.tensors.remove(name).ok_or_else(|| Error::format(self.end, format!("missing tensor \"{name}\"")))
    }

    fn encoder(&mut self, prefix: &str) -> Result<EncoderParams> {
        let mut parts = Vec::new();
        let mut i = 0;
        while self.tensors.contains_key(&format!("{prefix}.layer{i}.weight")) {
            parts.push(self.take(&format!("{prefix}.layer{i}.weight"))?);
            parts.push(self.take(&format!("{prefix}.layer{i}.bias"))?);
            i += 1;
        }
        parts.push(self.take(&format!("{prefix}.proj.weight"))?);
        parts.push(self.take(&format!("{prefix}.proj.bias"))?);
        EncoderParams::from_tensors(parts).map_err(|e| Error::format(self.end, format!("{prefix}: {e}")))
    }
}

/// Returns the state and the config hash stored in the file.
pub fn decode_checkpoint(buf: &[u8]) -> Result<(TrainState, u64)> {
    let mut c = Cursor::new(buf);
    if c.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "bad magic, expected \"MSDC\""));
    }
    let at = c.offset();
    let version = c.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(at, format!("unsupported version {version}")));
    }
    let hash = c.u64("config hash")?;
    let step = c.u64("step")?;

    let count = c.u32("tensor count")?;
    let mut tensors = HashMap::new();
    for _ in 0..count {
        let at = c.offset();
        let len = c.u16("name length")? as usize;
        let name = std::str::from_utf8(c.take(len, "tensor name")?)
            .map_err(|_| Error::format(at, "tensor name is not UTF-8"))?
            .to_string();
        let rank = c.u8("rank")? as usize;
        let dims = (0..rank).map(|_| c.u32("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let numel = numel.ok_or_else(|| Error::format(at, format!("tensor \"{name}\" is too large")))?;
        let data = c.f64s(numel, "tensor payload")?;
        let t = Tensor::new(dims, data).map_err(|e| Error::format(at, format!("tensor \"{name}\": {e}")))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::format(at, format!("duplicate tensor \"{name}\"")));
        }
    }
    let mut table = Table { tensors, end: c.offset() };

    let mode = if table.tensors.contains_key("log_tau") { TemperatureMode::Shared } else { TemperatureMode::PerLoss };
    let temperatures = temperature_names(mode)
        .iter()
        .map(|n| {
            let t = table.take(n)?;
            t.item().map(TemperatureParam::from_log).map_err(|e| Error::format(table.end, format!("{n}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let image = MomentumPair { query: table.encoder("image.query")?, key: table.encoder("image.key")? };
    let text = MomentumPair { query: table.encoder("text.query")?, key: table.encoder("text.key")? };
    let model = DualEncoder { image, text, temperatures };
    if !model.image.query.same_architecture(&model.image.key) || !model.text.query.same_architecture(&model.text.key) {
        return Err(Error::format(table.end, "key and query encoders differ in shape"));
    }

    let names = model.trainable_names();
    let mut m = Vec::with_capacity(names.len());
    let mut v = Vec::with_capacity(names.len());
    for (name, p) in names.iter().zip(model.trainable()) {
        for (kind, out) in [("m", &mut m), ("v", &mut v)] {
            let full = format!("adam.{kind}.{name}");
            let t = table.take(&full)?;
            if t.shape() != p.shape() {
                return Err(Error::format(table.end, format!("tensor \"{full}\" has shape {:?}", t.shape())));
            }
            out.push(t);
        }
    }
    if let Some(extra) = table.tensors.keys().min() {
        return Err(Error::format(table.end, format!("unexpected tensor \"{extra}\"")));
    }

    let queues = QueuePair { image: take_queue(&mut c)?, text: take_queue(&mut c)? };
    let at = c.offset();
    if queues.image.dim() != model.image.query.embed_dim() || queues.text.dim() != model.text.query.embed_dim() {
        return Err(Error::format(at, "queue width differs from embedding width"));
    }

    let epoch = c.u64("epoch")?;
    let adam_t = c.u64("optimizer step")?;
    let ema_updates = c.u64("ema updates")?;
    let has_initial = c.u8("initial loss flag")? != 0;
    let initial = c.f64("initial loss")?;
    let divergence_streak = c.u32("divergence streak")?;
    let metrics_lines = c.u64("metrics lines")?;
    let failed = c.u8("failure flag")? != 0;
    let len = c.u16("failure length")? as usize;
    let at = c.offset();
    let msg = std::str::from_utf8(c.take(len, "failure message")?)
        .map_err(|_| Error::format(at, "failure message is not UTF-8"))?
        .to_string();
    if c.remaining() != 0 {
        return Err(Error::format(c.offset(), format!("{} trailing bytes", c.remaining())));
    }

    let state = TrainState {
        model,
        queues,
        adam: AdamState { m, v, t: adam_t },
        step,
        epoch,
        ema_updates,
        initial_loss: has_initial.then_some(initial),
        divergence_streak,
        metrics_lines,
        failure: failed.then_some(msg),
    };
    Ok((state, hash))
}

pub fn save_checkpoint(state: &TrainState, config_hash: u64, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, encode_checkpoint(state, config_hash))?;
    std::fs::rename(tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(TrainState, u64)> {
    decode_checkpoint(&std::fs::read(path)?)
}
