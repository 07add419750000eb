//! Training loop: view sampling, RFBE or end-to-end steps, AdamW, EMA,
//! metrics, checkpoints and divergence detection.

mod checkpoint;
mod optim;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, fnv1a, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use optim::{adamw_step, cosine_lr, AdamState, AdamWConfig};

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, GenConfig, PairedDataset};
use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossMode, Stream};
use crate::model::{run_end2end_step, DualEncoder, LossBreakdown, StepBatch, TowerDims};
use crate::momentum::{DEFAULT_MOMENTUM, DEFAULT_QUEUE_CAPACITY};
use crate::rfbe::{run_rfbe_step, QueuePair, RfbePlan, DEFAULT_PRIMARY_BATCH, DEFAULT_SUB_BATCH};
use crate::rng::{key, rng_for, stream};
use crate::tensor::Tensor;

/// Learning rate used with pretrained backbones; far too small for
/// randomly initialised MLPs, so the synthetic default is larger.
pub const BACKBONE_LEARNING_RATE: f64 = 1e-6;
pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;

/// Epoch-mean loss above this multiple of the first epoch's mean counts toward divergence.
pub const DIVERGENCE_FACTOR: f64 = 10.0;
/// Consecutive over-threshold epochs that mark a run as failed.
pub const DIVERGENCE_EPOCHS: u32 = 3;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.msdc";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    #[serde(skip)]
    pub seed: u64,
    pub epochs: usize,
    pub primary_batch: usize,
    pub sub_batch: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub queue_capacity: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub hidden: usize,
    pub depth: usize,
    pub embed: usize,
    /// Draw augmented views; when off every view is the raw sample.
    pub augment: bool,
    pub shuffle: bool,
    /// Trailing fraction of ids held out for evaluation.
    pub test_fraction: f64,
    #[serde(skip)]
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 50,
            primary_batch: DEFAULT_PRIMARY_BATCH,
            sub_batch: DEFAULT_SUB_BATCH,
            base_lr: DEFAULT_LEARNING_RATE,
            momentum: DEFAULT_MOMENTUM,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            hidden: 64,
            depth: 1,
            embed: 32,
            augment: true,
            shuffle: true,
            test_fraction: 0.2,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        RfbePlan::new(self.primary_batch, self.sub_batch)?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1]", self.momentum)));
        }
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            return Err(Error::Config(format!("learning rate {} must be finite and non-negative", self.base_lr)));
        }
        if self.queue_capacity < self.primary_batch {
            return Err(Error::Config(format!(
                "queue capacity {} smaller than primary batch {}",
                self.queue_capacity, self.primary_batch
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return Err(Error::Config("adam betas must lie in [0, 1) and eps be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        if self.hidden == 0 || self.embed == 0 {
            return Err(Error::Config("hidden and embedding widths must be positive".into()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config(format!("test fraction {} outside (0, 1)", self.test_fraction)));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { beta1: self.beta1, beta2: self.beta2, eps: self.adam_eps, weight_decay: self.weight_decay }
    }

    pub fn tower_dims(&self, data: &PairedDataset) -> TowerDims {
        TowerDims { image_in: data.d_a(), text_in: data.d_b(), hidden: self.hidden, depth: self.depth, embed: self.embed }
    }

    /// FNV-1a over the seed and the JSON form of the training and loss settings.
    pub fn hash(&self) -> u64 {
        let mut bytes = self.seed.to_le_bytes().to_vec();
        bytes.extend(serde_json::to_vec(self).expect("config serializes"));
        bytes.extend(serde_json::to_vec(&self.loss).expect("config serializes"));
        fnv1a(&bytes)
    }
}

/// Everything needed to continue a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: DualEncoder,
    pub queues: QueuePair,
    pub adam: AdamState,
    /// Primary batches processed.
    pub step: u64,
    /// Completed epochs.
    pub epoch: u64,
    pub ema_updates: u64,
    /// Mean loss of the first epoch.
    pub initial_loss: Option<f64>,
    pub divergence_streak: u32,
    /// Lines written to the metrics log so far.
    pub metrics_lines: u64,
    pub failure: Option<String>,
}

impl TrainState {
    pub fn init(cfg: &TrainConfig, dims: TowerDims) -> Result<Self> {
        let model = DualEncoder::init(cfg.seed, dims, cfg.loss.temperature)?;
        let adam = AdamState::zeros_like(&model.trainable());
        Ok(Self {
            queues: QueuePair::new(cfg.queue_capacity, dims.embed)?,
            model,
            adam,
            step: 0,
            epoch: 0,
            ema_updates: 0,
            initial_loss: None,
            divergence_streak: 0,
            metrics_lines: 0,
            failure: None,
        })
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// `"step"` or `"epoch"`.
    pub kind: String,
    pub step: u64,
    pub epoch: u64,
    pub loss: Option<f64>,
    pub loss_i2i: Option<f64>,
    pub loss_t2t: Option<f64>,
    pub loss_t2i: Option<f64>,
    pub loss_i2t: Option<f64>,
    pub loss_uni: Option<f64>,
    pub loss_multi: Option<f64>,
    pub tau: f64,
    pub lr: f64,
    pub mode: LossMode,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

impl MetricsRecord {
    fn new(kind: &str, step: u64, epoch: u64, loss: &LossBreakdown, tau: f64, lr: f64, mode: LossMode) -> Self {
        Self {
            kind: kind.to_string(),
            step,
            epoch,
            loss: finite(loss.total),
            loss_i2i: finite(loss.i2i),
            loss_t2t: finite(loss.t2t),
            loss_t2i: finite(loss.t2i),
            loss_i2t: finite(loss.i2t),
            loss_uni: finite(loss.uni),
            loss_multi: finite(loss.multi),
            tau,
            lr,
            mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    TrainingFailed,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub status: RunStatus,
    /// Epoch records produced by this invocation.
    pub epochs: Vec<MetricsRecord>,
    pub warnings: Vec<String>,
}

/// Stacks rows `ids` of `features` into a matrix.
pub fn gather_rows(features: &Tensor, ids: &[u64]) -> Result<Tensor> {
    let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    features.select_rows(&idx)
}

/// Query and key views for one primary batch. Image views: a fair coin picks
/// which branch sees the raw sample, the other branch an augmented copy. Text
/// views: two independent augmentations.
pub fn build_views(
    data: &PairedDataset,
    ids: &[u64],
    cfg: &TrainConfig,
    aug: &GenConfig,
    epoch: u64,
    step: u64,
) -> Result<StepBatch> {
    let (da, db) = (data.d_a(), data.d_b());
    let n = ids.len();
    let mut iq = Vec::with_capacity(n * da);
    let mut ik = Vec::with_capacity(n * da);
    let mut tq = Vec::with_capacity(n * db);
    let mut tk = Vec::with_capacity(n * db);
    for &id in ids {
        let row = id as usize;
        if row >= data.len() {
            return Err(Error::UnknownId(id));
        }
        let xa = data.features_a.row(row);
        let xb = data.features_b.row(row);
        if !cfg.augment {
            iq.extend_from_slice(xa);
            ik.extend_from_slice(xa);
            tq.extend_from_slice(xb);
            tk.extend_from_slice(xb);
            continue;
        }
        let seed = |k: u64| key(&[cfg.seed, epoch, step, id, k]);
        let original_is_query = rng_for(cfg.seed, stream::VIEWS, &[epoch, step, id]).random_bool(0.5);
        let augmented = augment(xa, seed(0), aug);
        if original_is_query {
            iq.extend_from_slice(xa);
            ik.extend(augmented);
        } else {
            iq.extend(augmented);
            ik.extend_from_slice(xa);
        }
        tq.extend(augment(xb, seed(1), aug));
        tk.extend(augment(xb, seed(2), aug));
    }
    Ok(StepBatch {
        ids: ids.to_vec(),
        image_query: Tensor::matrix(n, da, iq)?,
        image_key: Tensor::matrix(n, da, ik)?,
        text_query: Tensor::matrix(n, db, tq)?,
        text_key: Tensor::matrix(n, db, tk)?,
    })
}

/// Training ids in the order visited during `epoch`.
pub fn epoch_order(train_ids: &[u64], cfg: &TrainConfig, epoch: u64) -> Vec<u64> {
    let mut order = train_ids.to_vec();
    if cfg.shuffle {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng_for(cfg.seed, stream::SHUFFLE, &[epoch]));
    }
    order
}

fn reported_tau(model: &DualEncoder) -> f64 {
    model.tau(Stream::T2I)
}

/// Runs one epoch, passing every metrics record to `sink`. Stops early and
/// sets `state.failure` on a non-finite loss or temperature.
pub fn train_epoch(
    state: &mut TrainState,
    cfg: &TrainConfig,
    aug: &GenConfig,
    data: &PairedDataset,
    train_ids: &[u64],
    sink: &mut dyn FnMut(&MetricsRecord) -> Result<()>,
) -> Result<MetricsRecord> {
    let plan = RfbePlan::new(cfg.primary_batch, cfg.sub_batch)?;
    let per_epoch = train_ids.len() / cfg.primary_batch;
    if per_epoch == 0 {
        return Err(Error::Config(format!(
            "{} training samples cannot fill a primary batch of {}",
            train_ids.len(),
            cfg.primary_batch
        )));
    }
    let total_steps = cfg.epochs * per_epoch;
    let epoch = state.epoch;
    let order = epoch_order(train_ids, cfg, epoch);
    let decay = state.model.trainable_is_matrix();
    let mode = cfg.loss.mode;

    let mut sum = LossBreakdown::default();
    let mut taken = 0usize;
    let mut lr = 0.0;
    for ids in order.chunks_exact(cfg.primary_batch) {
        let step = state.step;
        lr = cosine_lr(step as usize, total_steps, cfg.base_lr)?;
        let batch = build_views(data, ids, cfg, aug, epoch, step)?;
        let out = match mode {
            LossMode::End2end => run_end2end_step(&batch, &state.model, &cfg.loss)?,
            _ => run_rfbe_step(&batch, &plan, &state.model, &mut state.queues, &cfg.loss)?,
        };
        state.step += 1;
        taken += 1;
        if !out.loss.is_finite() {
            state.failure = Some(format!("non-finite loss at step {step}"));
        } else {
            state.adam.step(state.model.trainable_mut(), out.grads.tensors(), &decay, lr, &cfg.adamw())?;
            if mode != LossMode::End2end {
                state.model.ema_update(cfg.momentum)?;
                state.ema_updates += 1;
            }
            let tau = reported_tau(&state.model);
            if !(tau.is_finite() && tau > 0.0) {
                state.failure = Some(format!("temperature {tau} at step {step}"));
            }
        }
        sum.add_scaled(&out.loss, 1.0);
        let record = MetricsRecord::new("step", step, epoch, &out.loss, reported_tau(&state.model), lr, mode);
        sink(&record)?;
        state.metrics_lines += 1;
        if state.failure.is_some() {
            break;
        }
    }

    let mut mean = LossBreakdown::default();
    mean.add_scaled(&sum, 1.0 / taken as f64);
    state.epoch += 1;
    if state.failure.is_none() {
        match state.initial_loss {
            None => state.initial_loss = Some(mean.total),
            Some(initial) => {
                if mean.total > DIVERGENCE_FACTOR * initial {
                    state.divergence_streak += 1;
                } else {
                    state.divergence_streak = 0;
                }
                if state.divergence_streak >= DIVERGENCE_EPOCHS {
                    state.failure = Some(format!(
                        "epoch loss above {DIVERGENCE_FACTOR}x the first epoch's {initial:.6} for {DIVERGENCE_EPOCHS} epochs"
                    ));
                }
            }
        }
    }
    let record = MetricsRecord::new("epoch", state.step, epoch, &mean, reported_tau(&state.model), lr, mode);
    sink(&record)?;
    state.metrics_lines += 1;
    Ok(record)
}

/// Where a run writes its artifacts.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join(METRICS_FILE)
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.root.join(CHECKPOINT_FILE)
    }

    pub fn epoch_checkpoint(&self, epoch: u64) -> PathBuf {
        self.root.join(format!("checkpoint_epoch{epoch:04}.msdc"))
    }
}

fn truncate_lines(path: &Path, keep: u64) -> Result<()> {
    let mut kept = Vec::new();
    if path.exists() {
        for line in BufReader::new(File::open(path)?).lines().take(keep as usize) {
            kept.push(line?);
        }
    }
    if (kept.len() as u64) < keep {
        return Err(Error::State(format!("metrics log has {} lines, checkpoint expects {keep}", kept.len())));
    }
    let mut f = BufWriter::new(File::create(path)?);
    for line in kept {
        writeln!(f, "{line}")?;
    }
    f.flush()?;
    Ok(())
}

/// Trains until `cfg.epochs` epochs are complete or the run fails.
///
/// With `dir`, metrics go to `metrics.jsonl` and a checkpoint is written after
/// every epoch; `resume` continues from the latest checkpoint there.
pub fn train(
    cfg: &TrainConfig,
    aug: &GenConfig,
    data: &PairedDataset,
    dir: Option<&RunDir>,
    resume: bool,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    data.validate()?;
    let (train_ids, _) = data.split(cfg.test_fraction)?;
    let hash = cfg.hash();
    let mut warnings = Vec::new();

    let mut state = match dir {
        Some(d) if resume && d.checkpoint().exists() => {
            let (state, stored) = load_checkpoint(d.checkpoint())?;
            if stored != hash {
                warnings.push(format!("checkpoint config hash {stored:016x} differs from current {hash:016x}"));
            }
            truncate_lines(&d.metrics(), state.metrics_lines)?;
            state
        }
        _ => TrainState::init(cfg, cfg.tower_dims(data))?,
    };

    let mut writer = match dir {
        Some(d) => {
            std::fs::create_dir_all(&d.root)?;
            let file = if resume { OpenOptions::new().create(true).append(true).open(d.metrics())? } else { File::create(d.metrics())? };
            Some(BufWriter::new(file))
        }
        None => None,
    };

    let mut epochs = Vec::new();
    while state.failure.is_none() && (state.epoch as usize) < cfg.epochs {
        let mut sink = |r: &MetricsRecord| -> Result<()> {
            if let Some(w) = writer.as_mut() {
                serde_json::to_writer(&mut *w, r)?;
                w.write_all(b"\n")?;
            }
            Ok(())
        };
        epochs.push(train_epoch(&mut state, cfg, aug, data, &train_ids, &mut sink)?);
        if let (Some(d), Some(w)) = (dir, writer.as_mut()) {
            w.flush()?;
            save_checkpoint(&state, hash, d.epoch_checkpoint(state.epoch))?;
            save_checkpoint(&state, hash, d.checkpoint())?;
        }
    }
    let status = if state.failure.is_some() { RunStatus::TrainingFailed } else { RunStatus::Completed };
    Ok(TrainOutcome { state, status, epochs, warnings })
}
