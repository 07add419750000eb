//! The gradient-free branch: EMA key encoders and per-modality key queues.

use std::collections::HashMap;

use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::tensor::{dot, Tensor};

/// Default EMA coefficient.
pub const DEFAULT_MOMENTUM: f64 = 0.995;
/// Default number of keys held per modality.
pub const DEFAULT_QUEUE_CAPACITY: usize = 4096;
/// Allowed deviation from unit norm for stored keys.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-9;

/// EMA step for a single coordinate: `m·key + (1−m)·query`, written as one
/// fused multiply-add on the difference so equal inputs stay equal.
#[inline]
pub fn ema_coordinate(key: f64, query: f64, m: f64) -> f64 {
    if m == 1.0 {
        key
    } else {
        m.mul_add(key - query, query)
    }
}

/// Query encoder and its EMA mirror.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumPair {
    pub query: EncoderParams,
    pub key: EncoderParams,
}

impl MomentumPair {
    /// Key branch starts as an exact copy of the query branch.
    pub fn new(query: EncoderParams) -> Self {
        Self { key: query.clone(), query }
    }

    pub fn ema_update(&mut self, m: f64) -> Result<()> {
        ema_update(&mut self.key, &self.query, m)
    }
}

/// `θ_k ← m·θ_k + (1−m)·θ_q` for every coordinate.
pub fn ema_update(key: &mut EncoderParams, query: &EncoderParams, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Parameter(format!("momentum {m} outside [0, 1]")));
    }
    if !key.same_architecture(query) {
        return Err(Error::dim("ema_update", "key and query encoders differ in shape"));
    }
    for (k, q) in key.tensors_mut().into_iter().zip(query.tensors()) {
        for (kv, &qv) in k.data_mut().iter_mut().zip(q.data()) {
            *kv = ema_coordinate(*kv, qv, m);
        }
    }
    Ok(())
}

/// Fixed-capacity FIFO ring of unit-norm keys tagged with sample ids.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumQueue {
    capacity: usize,
    dim: usize,
    ring: Vec<f64>,
    ids: Vec<u64>,
    /// Next slot to write.
    head: usize,
    fill: usize,
}

impl MomentumQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::Config(format!("queue capacity {capacity} and dim {dim} must be positive")));
        }
        Ok(Self { capacity, dim, ring: vec![0.0; capacity * dim], ids: vec![0; capacity], head: 0, fill: 0 })
    }

    /// Rebuild from serialized parts.
    pub fn from_parts(
        capacity: usize,
        dim: usize,
        ring: Vec<f64>,
        ids: Vec<u64>,
        head: usize,
        fill: usize,
    ) -> Result<Self> {
        if capacity == 0 || dim == 0 || ring.len() != capacity * dim || ids.len() != capacity || head >= capacity || fill > capacity
        {
            return Err(Error::Config("inconsistent queue layout".into()));
        }
        Ok(Self { capacity, dim, ring, ids, head, fill })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fill(&self) -> usize {
        self.fill
    }

    pub fn head(&self) -> usize {
        self.head
    }

    pub fn is_empty(&self) -> bool {
        self.fill == 0
    }

    pub fn raw_ring(&self) -> &[f64] {
        &self.ring
    }

    pub fn raw_ids(&self) -> &[u64] {
        &self.ids
    }

    /// Append `keys` as the newest entries, evicting the oldest on overflow.
    pub fn enqueue(&mut self, keys: &Tensor, ids: &[u64]) -> Result<()> {
        let [b, d] = keys.shape() else {
            return Err(Error::dim("enqueue", format!("keys must be a matrix, got {:?}", keys.shape())));
        };
        if *d != self.dim {
            return Err(Error::dim("enqueue", format!("key width {d}, queue width {}", self.dim)));
        }
        if ids.len() != *b {
            return Err(Error::dim("enqueue", format!("{} ids for {b} keys", ids.len())));
        }
        if *b > self.capacity {
            return Err(Error::Capacity { batch: *b, capacity: self.capacity });
        }
        for r in 0..*b {
            let norm = dot(keys.row(r), keys.row(r)).sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(Error::Normalization { row: r, norm });
            }
        }
        for (r, &id) in ids.iter().enumerate() {
            let slot = self.head;
            self.ring[slot * self.dim..(slot + 1) * self.dim].copy_from_slice(keys.row(r));
            self.ids[slot] = id;
            self.head = (self.head + 1) % self.capacity;
        }
        self.fill = (self.fill + b).min(self.capacity);
        Ok(())
    }

    /// Slot of the `i`-th oldest live entry.
    fn slot(&self, i: usize) -> usize {
        (self.head + self.capacity - self.fill + i) % self.capacity
    }

    /// Live sample ids, oldest first.
    pub fn ids_oldest_first(&self) -> Vec<u64> {
        (0..self.fill).map(|i| self.ids[self.slot(i)]).collect()
    }

    /// Gradient-free copy of the live keys, oldest first.
    pub fn snapshot(&self) -> Result<QueueSnapshot> {
        if self.fill == 0 {
            return Err(Error::EmptyQueue);
        }
        let mut data = Vec::with_capacity(self.fill * self.dim);
        let mut ids = Vec::with_capacity(self.fill);
        let mut index = HashMap::with_capacity(self.fill);
        for i in 0..self.fill {
            let s = self.slot(i);
            data.extend_from_slice(&self.ring[s * self.dim..(s + 1) * self.dim]);
            ids.push(self.ids[s]);
            // newer rows overwrite older ones for a repeated id
            index.insert(self.ids[s], i);
        }
        Ok(QueueSnapshot { keys: Tensor::matrix(self.fill, self.dim, data)?, ids, index })
    }
}

/// Immutable view of a queue at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct QueueSnapshot {
    pub keys: Tensor,
    pub ids: Vec<u64>,
    index: HashMap<u64, usize>,
}

impl QueueSnapshot {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Row of the newest key for `id`.
    pub fn index_of(&self, id: u64) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn rows_for(&self, ids: &[u64]) -> Result<Vec<usize>> {
        ids.iter().map(|&id| self.index_of(id).ok_or(Error::UnknownId(id))).collect()
    }
}
