//! Resource-free batch enlargement.
//!
//! A primary batch of `N` samples is processed in two phases. Phase 1 runs the
//! momentum encoders (no gradients) over every sub-batch, concatenates the keys
//! and enqueues all `N` of them. Phase 2 walks the sub-batches again, encodes
//! the queries on a fresh tape, scores them against the full key snapshot and
//! accumulates `|s|/N`-scaled gradients. Nothing is updated in between, so the
//! result equals one monolithic pass over the whole batch while only one
//! sub-batch of activations is alive at a time.

use std::ops::Range;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{
    infonce_uni, msd_loss, msd_targets, multi_loss, onehot_multi_loss, student_log_probs, total_loss, uni_loss,
    LossConfig, LossMode, Stream, TemperatureMode,
};
use crate::model::{
    peak_tracked_activations, ActivationLedger, BoundModel, DualEncoder, LossBreakdown, LossVars, StepBatch, StepOutput,
    TowerDims,
};
use crate::momentum::{MomentumQueue, QueueSnapshot};
use crate::rng::{rng_for, stream};
use crate::tensor::{max_relative_error, Tape, Tensor};

/// Default primary batch.
pub const DEFAULT_PRIMARY_BATCH: usize = 512;
/// Default sub-batch.
pub const DEFAULT_SUB_BATCH: usize = 16;

/// Split of a primary batch into equal consecutive sub-batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RfbePlan {
    primary: usize,
    sub: usize,
}

impl RfbePlan {
    pub fn new(primary: usize, sub: usize) -> Result<Self> {
        if primary == 0 || sub == 0 || !primary.is_multiple_of(sub) {
            return Err(Error::Plan(format!("sub-batch {sub} must divide primary batch {primary}")));
        }
        Ok(Self { primary, sub })
    }

    pub fn primary(&self) -> usize {
        self.primary
    }

    pub fn sub(&self) -> usize {
        self.sub
    }

    pub fn sub_batches(&self) -> Vec<Range<usize>> {
        (0..self.primary / self.sub).map(|i| i * self.sub..(i + 1) * self.sub).collect()
    }
}

/// One key queue per modality.
#[derive(Debug, Clone, PartialEq)]
pub struct QueuePair {
    pub image: MomentumQueue,
    pub text: MomentumQueue,
}

impl QueuePair {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        Ok(Self { image: MomentumQueue::new(capacity, dim)?, text: MomentumQueue::new(capacity, dim)? })
    }
}

/// Output of phase 1.
#[derive(Debug, Clone)]
pub struct PreparedKeys {
    pub image_keys: Tensor,
    pub text_keys: Tensor,
    /// Momentum-encoded query views, needed by the distillation teachers.
    pub image_momentum_queries: Option<Tensor>,
    pub text_momentum_queries: Option<Tensor>,
    pub image_snapshot: QueueSnapshot,
    pub text_snapshot: QueueSnapshot,
}

fn encode_keys(
    batch: &StepBatch,
    model: &DualEncoder,
    ranges: &[Range<usize>],
    with_momentum_queries: bool,
) -> Result<[Option<Tensor>; 4]> {
    let mut parts: [Vec<Tensor>; 4] = Default::default();
    for r in ranges {
        let sub = batch.slice(r.clone())?;
        parts[0].push(model.image.key.encode_detached(&sub.image_key)?);
        parts[1].push(model.text.key.encode_detached(&sub.text_key)?);
        if with_momentum_queries {
            parts[2].push(model.image.key.encode_detached(&sub.image_query)?);
            parts[3].push(model.text.key.encode_detached(&sub.text_query)?);
        }
    }
    let cat = |v: &Vec<Tensor>| -> Result<Option<Tensor>> {
        if v.is_empty() {
            return Ok(None);
        }
        Tensor::concat_rows(&v.iter().collect::<Vec<_>>()).map(Some)
    };
    Ok([cat(&parts[0])?, cat(&parts[1])?, cat(&parts[2])?, cat(&parts[3])?])
}

/// Phase 1: momentum keys for the whole primary batch, computed per
/// sub-batch, concatenated, enqueued, and snapshotted.
pub fn prepare_keys(
    batch: &StepBatch,
    ranges: &[Range<usize>],
    model: &DualEncoder,
    queues: &mut QueuePair,
    cfg: &LossConfig,
) -> Result<PreparedKeys> {
    let [ik, tk, imq, tmq] = encode_keys(batch, model, ranges, cfg.mode == LossMode::Msd)?;
    let image_keys = ik.expect("at least one sub-batch");
    let text_keys = tk.expect("at least one sub-batch");
    queues.image.enqueue(&image_keys, &batch.ids)?;
    queues.text.enqueue(&text_keys, &batch.ids)?;
    let needed = batch.len();
    for q in [&queues.image, &queues.text] {
        if q.fill() < needed {
            return Err(Error::Warmup { fill: q.fill(), needed });
        }
    }
    Ok(PreparedKeys {
        image_snapshot: queues.image.snapshot()?,
        text_snapshot: queues.text.snapshot()?,
        image_keys,
        text_keys,
        image_momentum_queries: imq,
        text_momentum_queries: tmq,
    })
}

/// All four loss streams for rows `range` of the batch, recorded on `tape`.
fn objective(
    tape: &mut Tape,
    bound: &BoundModel,
    model: &DualEncoder,
    batch: &StepBatch,
    range: Range<usize>,
    keys: &PreparedKeys,
    cfg: &LossConfig,
) -> Result<LossVars> {
    let sub = batch.slice(range.clone())?;
    let image_pos = keys.image_snapshot.rows_for(&sub.ids)?;
    let text_pos = keys.text_snapshot.rows_for(&sub.ids)?;
    let image_bank = &keys.image_snapshot.keys;
    let text_bank = &keys.text_snapshot.keys;

    let iq = tape.constant(sub.image_query);
    let tq = tape.constant(sub.text_query);
    let q_img = bound.image.encode(tape, iq)?;
    let q_txt = bound.text.encode(tape, tq)?;

    let i2i = infonce_uni(tape, q_img, &image_pos, image_bank, bound.tau(Stream::I2I))?;
    let t2t = infonce_uni(tape, q_txt, &text_pos, text_bank, bound.tau(Stream::T2T))?;

    let (t2i, i2t) = match cfg.mode {
        LossMode::Msd => {
            let rows: Vec<usize> = range.collect();
            let text_mq = keys.text_momentum_queries.as_ref().expect("prepared for msd").select_rows(&rows)?;
            let image_mq = keys.image_momentum_queries.as_ref().expect("prepared for msd").select_rows(&rows)?;

            // text queries distil against the image key queue
            let (q2k, k2k) = msd_targets(&text_mq, &image_pos, image_bank, model.tau(Stream::T2I))?;
            let student = student_log_probs(tape, q_txt, image_bank, bound.tau(Stream::T2I))?;
            let t2i = msd_loss(tape, student, &q2k, &k2k, cfg.alpha, cfg.beta)?;

            let (q2k, k2k) = msd_targets(&image_mq, &text_pos, text_bank, model.tau(Stream::I2T))?;
            let student = student_log_probs(tape, q_img, text_bank, bound.tau(Stream::I2T))?;
            let i2t = msd_loss(tape, student, &q2k, &k2k, cfg.alpha, cfg.beta)?;
            (t2i, i2t)
        }
        LossMode::Onehot => (
            onehot_multi_loss(tape, q_txt, &image_pos, image_bank, bound.tau(Stream::T2I))?,
            onehot_multi_loss(tape, q_img, &text_pos, text_bank, bound.tau(Stream::I2T))?,
        ),
        LossMode::End2end => {
            return Err(Error::Config("end-to-end mode has no momentum branch".into()));
        }
    };
    let uni = uni_loss(tape, i2i, t2t)?;
    let multi = multi_loss(tape, t2i, i2t)?;
    let total = total_loss(tape, uni, multi, cfg.omega_uni, cfg.omega_multi)?;
    Ok(LossVars { total, uni, multi, i2i, t2t, t2i, i2t })
}

fn check_inputs(batch: &StepBatch, model: &DualEncoder, queues: &QueuePair, cfg: &LossConfig) -> Result<()> {
    cfg.validate()?;
    batch.validate()?;
    if cfg.mode == LossMode::End2end {
        return Err(Error::Config("end-to-end mode has no momentum branch".into()));
    }
    let dim = model.image.key.embed_dim();
    if queues.image.dim() != dim || queues.text.dim() != dim || model.text.key.embed_dim() != dim {
        return Err(Error::dim("step", "queue width differs from embedding width"));
    }
    Ok(())
}

/// Gradient-accumulated step over `plan.sub_batches()`.
///
/// Mutates the queues (phase 1 enqueues the batch's keys) but not the model.
pub fn run_rfbe_step(
    batch: &StepBatch,
    plan: &RfbePlan,
    model: &DualEncoder,
    queues: &mut QueuePair,
    cfg: &LossConfig,
) -> Result<StepOutput> {
    check_inputs(batch, model, queues, cfg)?;
    if plan.primary() != batch.len() {
        return Err(Error::Plan(format!("plan for {} samples, batch has {}", plan.primary(), batch.len())));
    }
    let ranges = plan.sub_batches();
    let keys = prepare_keys(batch, &ranges, model, queues, cfg)?;

    let n = batch.len() as f64;
    let mut grads = model.zero_grads();
    let mut loss = LossBreakdown::default();
    let mut ledger = ActivationLedger::new();
    for range in ranges {
        let weight = range.len() as f64 / n;
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape)?;
        let vars = objective(&mut tape, &bound, model, batch, range, &keys, cfg)?;
        let scaled = tape.scale(vars.total, weight)?;
        ledger.allocate(tape.tracked_scalars());
        loss.add_scaled(&LossBreakdown::read(&tape, &vars)?, weight);
        tape.backward(scaled)?;
        bound.collect_grads(&mut tape, &mut grads)?;
        ledger.release(tape.tracked_scalars());
    }
    ledger.finish_step();
    Ok(StepOutput { grads, loss, ledger })
}

/// Single forward/backward over the whole primary batch; the reference the
/// accumulated step must reproduce.
pub fn run_monolithic_step(
    batch: &StepBatch,
    model: &DualEncoder,
    queues: &mut QueuePair,
    cfg: &LossConfig,
) -> Result<StepOutput> {
    check_inputs(batch, model, queues, cfg)?;
    let whole = 0..batch.len();
    let keys = prepare_keys(batch, std::slice::from_ref(&whole), model, queues, cfg)?;

    let mut grads = model.zero_grads();
    let mut ledger = ActivationLedger::new();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape)?;
    let vars = objective(&mut tape, &bound, model, batch, whole, &keys, cfg)?;
    ledger.allocate(tape.tracked_scalars());
    let loss = LossBreakdown::read(&tape, &vars)?;
    tape.backward(vars.total)?;
    bound.collect_grads(&mut tape, &mut grads)?;
    ledger.release(tape.tracked_scalars());
    ledger.finish_step();
    Ok(StepOutput { grads, loss, ledger })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceConfig {
    pub primary: usize,
    pub sub_batches: Vec<usize>,
    pub mode: LossMode,
    pub seed: u64,
    /// Queue capacity; the queue starts full so every step sees the same number of keys.
    pub queue_capacity: usize,
    /// Larger primary batch at which the accumulated peak is measured again.
    pub compare_primary: Option<usize>,
    pub grad_tolerance: f64,
    pub loss_tolerance: f64,
}

impl Default for EquivalenceConfig {
    fn default() -> Self {
        Self {
            primary: 64,
            sub_batches: vec![1, 2, 4, 8, 16, 32, 64],
            mode: LossMode::Msd,
            seed: 0,
            queue_capacity: 512,
            compare_primary: None,
            grad_tolerance: 1e-9,
            loss_tolerance: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceRow {
    pub sub_batch: usize,
    pub max_rel_grad_dev: f64,
    pub loss_dev: f64,
    pub rfbe_peak: usize,
    pub monolithic_peak: usize,
    /// Accumulated peak at `compare_primary`, same sub-batch.
    pub rfbe_peak_at_compare: Option<usize>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub primary: usize,
    pub mode: LossMode,
    pub seed: u64,
    pub compare_primary: Option<usize>,
    pub rows: Vec<EquivalenceRow>,
    pub passed: bool,
}

/// Small random model, a primary batch of `n` samples, and a full queue pair.
pub fn equivalence_fixture(seed: u64, n: usize, capacity: usize) -> Result<(DualEncoder, StepBatch, QueuePair)> {
    let dims = TowerDims { image_in: 6, text_in: 5, hidden: 8, depth: 1, embed: 4 };
    let mut model = DualEncoder::init(seed, dims, TemperatureMode::Shared)?;
    let other = DualEncoder::init(seed ^ 0x9e37_79b9, dims, TemperatureMode::Shared)?;
    model.image.key = other.image.query;
    model.text.key = other.text.query;
    let mut rng = rng_for(seed, stream::CHECK, &[n as u64]);
    let mut normal = |r: usize, c: usize| -> Result<Tensor> {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
    };
    let batch = StepBatch {
        ids: (0..n as u64).collect(),
        image_query: normal(n, 6)?,
        image_key: normal(n, 6)?,
        text_query: normal(n, 5)?,
        text_key: normal(n, 5)?,
    };
    let mut queues = QueuePair::new(capacity, 4)?;
    let filler: Vec<u64> = (0..capacity as u64).map(|i| 1_000_000 + i).collect();
    queues.image.enqueue(&normal(capacity, 4)?.row_l2_normalize()?, &filler)?;
    queues.text.enqueue(&normal(capacity, 4)?.row_l2_normalize()?, &filler)?;
    Ok((model, batch, queues))
}

fn accumulated_peak(seed: u64, n: usize, b: usize, capacity: usize, cfg: &LossConfig) -> Result<usize> {
    let (model, batch, mut queues) = equivalence_fixture(seed, n, capacity)?;
    let out = run_rfbe_step(&batch, &RfbePlan::new(n, b)?, &model, &mut queues, cfg)?;
    peak_tracked_activations(&out.ledger)
}

/// Compares accumulated and monolithic steps for every sub-batch in `cfg`.
pub fn check_equivalence(cfg: &EquivalenceConfig) -> Result<EquivalenceReport> {
    let loss_cfg = LossConfig { mode: cfg.mode, ..Default::default() };
    let (model, batch, queues) = equivalence_fixture(cfg.seed, cfg.primary, cfg.queue_capacity)?;
    let mono = run_monolithic_step(&batch, &model, &mut queues.clone(), &loss_cfg)?;
    let mono_peak = peak_tracked_activations(&mono.ledger)?;
    let mut rows = Vec::new();
    for &b in &cfg.sub_batches {
        let plan = RfbePlan::new(cfg.primary, b)?;
        let acc = run_rfbe_step(&batch, &plan, &model, &mut queues.clone(), &loss_cfg)?;
        let max_rel_grad_dev = max_relative_error(&acc.grads.flatten(), &mono.grads.flatten());
        let loss_dev = (acc.loss.total - mono.loss.total).abs();
        let rfbe_peak_at_compare = match cfg.compare_primary {
            Some(n) => Some(accumulated_peak(cfg.seed, n, b, cfg.queue_capacity, &loss_cfg)?),
            None => None,
        };
        rows.push(EquivalenceRow {
            sub_batch: b,
            max_rel_grad_dev,
            loss_dev,
            rfbe_peak: peak_tracked_activations(&acc.ledger)?,
            monolithic_peak: mono_peak,
            rfbe_peak_at_compare,
            passed: max_rel_grad_dev <= cfg.grad_tolerance && loss_dev <= cfg.loss_tolerance,
        });
    }
    Ok(EquivalenceReport {
        primary: cfg.primary,
        mode: cfg.mode,
        seed: cfg.seed,
        compare_primary: cfg.compare_primary,
        passed: rows.iter().all(|r| r.passed),
        rows,
    })
}

/// Every `b` dividing `n`.
pub fn divisors(n: usize) -> Vec<usize> {
    (1..=n).filter(|&b| n.is_multiple_of(b)).collect()
}
