//! The dual-tower model, primary batches, and the end-to-end baseline step.

use std::ops::Range;

use crate::encoder::{temperature, BoundEncoder, EncoderParams, TemperatureParam, INITIAL_TEMPERATURE};
use crate::error::{Error, Result};
use crate::losses::{end2end_directions, multi_loss, total_loss, uni_loss, LossConfig, Stream, TemperatureMode};
use crate::momentum::MomentumPair;
use crate::tensor::{Tape, Tensor, Var};

/// Image-side and text-side momentum pairs plus the learnable temperature(s).
#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoder {
    pub image: MomentumPair,
    pub text: MomentumPair,
    pub temperatures: Vec<TemperatureParam>,
}

/// Architecture of both towers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TowerDims {
    pub image_in: usize,
    pub text_in: usize,
    pub hidden: usize,
    pub depth: usize,
    pub embed: usize,
}

impl TowerDims {
    fn layer_dims(&self, input: usize) -> Vec<usize> {
        std::iter::once(input).chain(std::iter::repeat_n(self.hidden, self.depth)).collect()
    }
}

impl DualEncoder {
    pub fn init(seed: u64, dims: TowerDims, temperature_mode: TemperatureMode) -> Result<Self> {
        let image = EncoderParams::init_stream(seed, 0, &dims.layer_dims(dims.image_in), dims.embed)?;
        let text = EncoderParams::init_stream(seed, 1, &dims.layer_dims(dims.text_in), dims.embed)?;
        let tau = TemperatureParam::new(INITIAL_TEMPERATURE)?;
        Ok(Self {
            image: MomentumPair::new(image),
            text: MomentumPair::new(text),
            temperatures: vec![tau; temperature_mode.count()],
        })
    }

    pub fn temperature_mode(&self) -> TemperatureMode {
        if self.temperatures.len() == 1 { TemperatureMode::Shared } else { TemperatureMode::PerLoss }
    }

    pub fn tau(&self, stream: Stream) -> f64 {
        self.temperatures[self.temperature_mode().slot(stream)].value()
    }

    /// Trainable tensors: image query tower, text query tower, temperatures.
    pub fn trainable(&self) -> Vec<&Tensor> {
        let mut out = self.image.query.tensors();
        out.extend(self.text.query.tensors());
        out.extend(self.temperatures.iter().map(|t| &t.log_tau));
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.image.query.tensors_mut();
        out.extend(self.text.query.tensors_mut());
        out.extend(self.temperatures.iter_mut().map(|t| &mut t.log_tau));
        out
    }

    pub fn trainable_names(&self) -> Vec<String> {
        let mut out = self.image.query.tensor_names("image.query");
        out.extend(self.text.query.tensor_names("text.query"));
        out.extend(temperature_names(self.temperature_mode()));
        out
    }

    /// Whether a trainable tensor is a weight matrix (the ones weight decay applies to).
    pub fn trainable_is_matrix(&self) -> Vec<bool> {
        self.trainable().iter().map(|t| t.shape().len() == 2).collect()
    }

    /// Every tensor with its checkpoint name, trainable ones first.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self.trainable_names().into_iter().zip(self.trainable()).collect();
        out.extend(self.image.key.tensor_names("image.key").into_iter().zip(self.image.key.tensors()));
        out.extend(self.text.key.tensor_names("text.key").into_iter().zip(self.text.key.tensors()));
        out
    }

    pub fn ema_update(&mut self, m: f64) -> Result<()> {
        self.image.ema_update(m)?;
        self.text.ema_update(m)
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients(self.trainable().iter().map(|t| Tensor::zeros(t.shape())).collect())
    }

    pub(crate) fn bind(&self, tape: &mut Tape) -> Result<BoundModel> {
        let image = self.image.query.bind(tape);
        let text = self.text.query.bind(tape);
        let log_taus: Vec<Var> = self.temperatures.iter().map(|t| t.bind(tape)).collect();
        let taus = log_taus.iter().map(|&lt| temperature(tape, lt)).collect::<Result<Vec<_>>>()?;
        Ok(BoundModel { image, text, log_taus, taus, mode: self.temperature_mode() })
    }
}

pub fn temperature_names(mode: TemperatureMode) -> Vec<String> {
    match mode {
        TemperatureMode::Shared => vec!["log_tau".to_string()],
        TemperatureMode::PerLoss => Stream::ALL.iter().map(|s| format!("log_tau.{}", s.name())).collect(),
    }
}

/// Trainable parameters recorded as tape leaves.
pub(crate) struct BoundModel {
    pub image: BoundEncoder,
    pub text: BoundEncoder,
    log_taus: Vec<Var>,
    taus: Vec<Var>,
    mode: TemperatureMode,
}

impl BoundModel {
    pub fn tau(&self, stream: Stream) -> Var {
        self.taus[self.mode.slot(stream)]
    }

    fn leaves(&self) -> Vec<Var> {
        let mut out = self.image.vars().to_vec();
        out.extend_from_slice(self.text.vars());
        out.extend_from_slice(&self.log_taus);
        out
    }

    /// Add this tape's leaf gradients into `acc`.
    pub fn collect_grads(&self, tape: &mut Tape, acc: &mut Gradients) -> Result<()> {
        for (slot, var) in acc.0.iter_mut().zip(self.leaves()) {
            if let Some(g) = tape.take_grad(var) {
                slot.add_assign(&g)?;
            }
        }
        Ok(())
    }
}

/// Gradients aligned with [`DualEncoder::trainable`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Tensor>);

impl Gradients {
    pub fn tensors(&self) -> &[Tensor] {
        &self.0
    }

    /// Max over coordinates of `|a − b| / (1 + |b|)`.
    pub fn max_deviation(&self, reference: &Gradients) -> f64 {
        self.0
            .iter()
            .zip(&reference.0)
            .flat_map(|(a, b)| a.data().iter().zip(b.data()))
            .map(|(a, b)| (a - b).abs() / (1.0 + b.abs()))
            .fold(0.0, f64::max)
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.0.iter().flat_map(|t| t.data().iter().copied()).collect()
    }
}

/// One primary batch: two views per modality, row-aligned with `ids`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepBatch {
    pub ids: Vec<u64>,
    pub image_query: Tensor,
    pub image_key: Tensor,
    pub text_query: Tensor,
    pub text_key: Tensor,
}

impl StepBatch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.ids.len();
        if n == 0 {
            return Err(Error::Plan("empty batch".into()));
        }
        for t in [&self.image_query, &self.image_key, &self.text_query, &self.text_key] {
            if t.shape().len() != 2 || t.rows() != n {
                return Err(Error::dim("batch", format!("view {:?} for {n} ids", t.shape())));
            }
        }
        if self.image_query.shape() != self.image_key.shape() || self.text_query.shape() != self.text_key.shape() {
            return Err(Error::dim("batch", "query and key views differ in shape"));
        }
        Ok(())
    }

    pub fn slice(&self, range: Range<usize>) -> Result<StepBatch> {
        let rows: Vec<usize> = range.clone().collect();
        Ok(StepBatch {
            ids: self.ids[range].to_vec(),
            image_query: self.image_query.select_rows(&rows)?,
            image_key: self.image_key.select_rows(&rows)?,
            text_query: self.text_query.select_rows(&rows)?,
            text_key: self.text_key.select_rows(&rows)?,
        })
    }
}

/// Loss values of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub uni: f64,
    pub multi: f64,
    pub i2i: f64,
    pub t2t: f64,
    pub t2i: f64,
    pub i2t: f64,
}

impl LossBreakdown {
    pub(crate) fn read(tape: &Tape, vars: &LossVars) -> Result<Self> {
        let v = |x: Var| tape.value(x).item();
        Ok(Self {
            total: v(vars.total)?,
            uni: v(vars.uni)?,
            multi: v(vars.multi)?,
            i2i: v(vars.i2i)?,
            t2t: v(vars.t2t)?,
            t2i: v(vars.t2i)?,
            i2t: v(vars.i2t)?,
        })
    }

    pub(crate) fn add_scaled(&mut self, other: &Self, w: f64) {
        self.total += w * other.total;
        self.uni += w * other.uni;
        self.multi += w * other.multi;
        self.i2i += w * other.i2i;
        self.t2t += w * other.t2t;
        self.t2i += w * other.t2i;
        self.i2t += w * other.i2t;
    }

    pub fn is_finite(&self) -> bool {
        [self.total, self.uni, self.multi, self.i2i, self.t2t, self.t2i, self.i2t].iter().all(|v| v.is_finite())
    }
}

pub(crate) struct LossVars {
    pub total: Var,
    pub uni: Var,
    pub multi: Var,
    pub i2i: Var,
    pub t2t: Var,
    pub t2i: Var,
    pub i2t: Var,
}

/// Peak count of simultaneously live gradient-tracked scalars.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ActivationLedger {
    current: usize,
    peak: usize,
    steps: usize,
}

impl ActivationLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn allocate(&mut self, scalars: usize) {
        self.current += scalars;
        self.peak = self.peak.max(self.current);
    }

    pub fn release(&mut self, scalars: usize) {
        self.current = self.current.saturating_sub(scalars);
    }

    pub fn current(&self) -> usize {
        self.current
    }

    /// Zero until a step has run.
    pub fn peak(&self) -> usize {
        self.peak
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub(crate) fn finish_step(&mut self) {
        self.steps += 1;
    }

    /// Fold another ledger's history in (peaks do not add).
    pub fn merge(&mut self, other: &ActivationLedger) {
        self.peak = self.peak.max(other.peak);
        self.steps += other.steps;
    }
}

pub fn peak_tracked_activations(ledger: &ActivationLedger) -> Result<usize> {
    if ledger.steps == 0 {
        return Err(Error::State("no step has been recorded".into()));
    }
    Ok(ledger.peak)
}

/// Result of one primary-batch step, before any parameter update.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub grads: Gradients,
    pub loss: LossBreakdown,
    pub ledger: ActivationLedger,
}

/// End-to-end baseline: both views of each modality go through the query
/// towers with gradients, negatives are the other batch rows only.
pub fn run_end2end_step(batch: &StepBatch, model: &DualEncoder, cfg: &LossConfig) -> Result<StepOutput> {
    cfg.validate()?;
    batch.validate()?;
    let mut ledger = ActivationLedger::new();
    let mut grads = model.zero_grads();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape)?;
    let iq = tape.constant(batch.image_query.clone());
    let ik = tape.constant(batch.image_key.clone());
    let tq = tape.constant(batch.text_query.clone());
    let tk = tape.constant(batch.text_key.clone());
    let img_q = bound.image.encode(&mut tape, iq)?;
    let img_k = bound.image.encode(&mut tape, ik)?;
    let txt_q = bound.text.encode(&mut tape, tq)?;
    let txt_k = bound.text.encode(&mut tape, tk)?;

    let (a, b) = end2end_directions(&mut tape, img_q, img_k, bound.tau(Stream::I2I))?;
    let i2i = multi_loss(&mut tape, a, b)?;
    let (a, b) = end2end_directions(&mut tape, txt_q, txt_k, bound.tau(Stream::T2T))?;
    let t2t = multi_loss(&mut tape, a, b)?;
    let (i2t, t2i) = end2end_directions(&mut tape, img_q, txt_q, bound.tau(Stream::T2I))?;
    let uni = uni_loss(&mut tape, i2i, t2t)?;
    let multi = multi_loss(&mut tape, t2i, i2t)?;
    let total = total_loss(&mut tape, uni, multi, cfg.omega_uni, cfg.omega_multi)?;
    let vars = LossVars { total, uni, multi, i2i, t2t, t2i, i2t };
    let loss = LossBreakdown::read(&tape, &vars)?;

    ledger.allocate(tape.tracked_scalars());
    tape.backward(total)?;
    bound.collect_grads(&mut tape, &mut grads)?;
    ledger.release(tape.tracked_scalars());
    ledger.finish_step();
    Ok(StepOutput { grads, loss, ledger })
}
