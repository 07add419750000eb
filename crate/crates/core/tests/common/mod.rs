//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::{HashMap, VecDeque};

use msd_core::momentum::MomentumQueue;
use msd_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Rows drawn from a small integer grid so exact score ties are common.
pub fn tie_prone_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-2i32..=2) as f64).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

pub fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).unwrap().row_l2_normalize().unwrap()
}

/// Ranks every gallery row for every query by explicit sorting.
pub fn brute_recall(queries: &Tensor, gallery: &Tensor, k: usize) -> f64 {
    let n = queries.rows();
    let mut hits = 0;
    for i in 0..n {
        let mut scored: Vec<(f64, usize)> = (0..n)
            .map(|j| (queries.row(i).iter().zip(gallery.row(j)).map(|(a, b)| a * b).sum(), j))
            .collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite scores").then(a.1.cmp(&b.1)));
        if scored.iter().take(k).any(|&(_, j)| j == i) {
            hits += 1;
        }
    }
    hits as f64 / n as f64
}

/// Fraction of (positive, negative) pairs ordered correctly, ties counting half.
pub fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut concordant = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    concordant += 1.0;
                } else if scores[i] == scores[j] {
                    concordant += 0.5;
                }
            }
        }
    }
    concordant / pairs
}

/// Unbounded list truncated to the newest `capacity` entries.
pub struct ListQueue {
    pub capacity: usize,
    pub items: VecDeque<(u64, Vec<f64>)>,
}

impl ListQueue {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, items: VecDeque::new() }
    }

    pub fn push(&mut self, keys: &Tensor, ids: &[u64]) {
        for (r, &id) in ids.iter().enumerate() {
            self.items.push_back((id, keys.row(r).to_vec()));
        }
        while self.items.len() > self.capacity {
            self.items.pop_front();
        }
    }

    /// Position of the newest entry for every live id.
    pub fn newest_positions(&self) -> HashMap<u64, usize> {
        self.items.iter().enumerate().map(|(pos, (id, _))| (*id, pos)).collect()
    }
}

/// Runs `batches` random enqueues against both implementations; returns a
/// description of the first disagreement.
pub fn queue_matches_model(seed: u64, capacity: usize, batches: usize) -> Result<(), String> {
    let mut rng = rng(seed);
    let dim = 3;
    let mut queue = MomentumQueue::new(capacity, dim).unwrap();
    let mut model = ListQueue::new(capacity);
    let id_range = (capacity as u64 * 2).max(4);
    let max_batch = (capacity / 4).max(capacity.min(4));
    for step in 0..batches {
        let b = rng.random_range(1..=max_batch);
        let ids: Vec<u64> = (0..b).map(|_| rng.random_range(0..id_range)).collect();
        let keys = unit_rows(&mut rng, b, dim);
        queue.enqueue(&keys, &ids).map_err(|e| format!("enqueue failed: {e}"))?;
        model.push(&keys, &ids);

        let snap = queue.snapshot().map_err(|e| format!("snapshot failed: {e}"))?;
        let expected_ids: Vec<u64> = model.items.iter().map(|(i, _)| *i).collect();
        if snap.ids != expected_ids {
            return Err(format!("step {step}: ids differ"));
        }
        let expected_keys: Vec<f64> = model.items.iter().flat_map(|(_, k)| k.iter().copied()).collect();
        if snap.keys.data() != expected_keys.as_slice() {
            return Err(format!("step {step}: keys differ"));
        }
        let newest = model.newest_positions();
        for &id in &ids {
            let got = snap.index_of(id);
            if got != newest.get(&id).copied() {
                return Err(format!("step {step}: index of {id} is {got:?}"));
            }
            let row = got.ok_or_else(|| format!("step {step}: {id} missing"))?;
            if snap.ids[row] != id {
                return Err(format!("step {step}: row {row} holds {}, not {id}", snap.ids[row]));
            }
        }
    }
    Ok(())
}

/// Coordinate-wise check of `θ_k(k) − θ_q = m^k (θ_k(0) − θ_q)`; returns the
/// largest relative deviation.
pub fn geometric_decay_deviation(key0: &[f64], key_k: &[f64], query: &[f64], m: f64, k: i32) -> f64 {
    let factor = m.powi(k);
    key0.iter()
        .zip(key_k)
        .zip(query)
        .map(|((&a, &b), &q)| {
            let expected = factor * (a - q);
            let got = b - q;
            (got - expected).abs() / expected.abs().max(1e-300)
        })
        .fold(0.0, f64::max)
}
