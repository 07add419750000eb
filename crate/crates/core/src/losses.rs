//! Contrastive and self-distillation objectives.
//!
//! All batch losses are arithmetic means over their rows, so a loss over a
//! sub-batch scaled by `|s|/N` sums to the loss over the full batch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{scaled_softmax_rows, Tape, Tensor, Var};

/// Which multi-modal objective drives training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    /// Momentum self-distillation with soft teacher targets.
    Msd,
    /// Multi-modal MoCo: exact pair as the single positive.
    Onehot,
    /// Symmetric in-batch contrast with gradients through both towers.
    End2end,
}

impl LossMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::Msd => "msd",
            LossMode::Onehot => "onehot",
            LossMode::End2end => "end2end",
        }
    }
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "msd" => Ok(LossMode::Msd),
            "onehot" => Ok(LossMode::Onehot),
            "end2end" => Ok(LossMode::End2end),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One learnable temperature for all four loss streams, or one each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemperatureMode {
    Shared,
    PerLoss,
}

/// The four loss streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    I2I,
    T2T,
    T2I,
    I2T,
}

impl Stream {
    pub const ALL: [Stream; 4] = [Stream::I2I, Stream::T2T, Stream::T2I, Stream::I2T];

    pub fn name(self) -> &'static str {
        match self {
            Stream::I2I => "i2i",
            Stream::T2T => "t2t",
            Stream::T2I => "t2i",
            Stream::I2T => "i2t",
        }
    }
}

impl TemperatureMode {
    pub fn count(self) -> usize {
        match self {
            TemperatureMode::Shared => 1,
            TemperatureMode::PerLoss => 4,
        }
    }

    pub fn slot(self, stream: Stream) -> usize {
        match self {
            TemperatureMode::Shared => 0,
            TemperatureMode::PerLoss => stream as usize,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub omega_uni: f64,
    pub omega_multi: f64,
    pub mode: LossMode,
    pub temperature: TemperatureMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            beta: 0.7,
            omega_uni: 1.0,
            omega_multi: 10.0,
            mode: LossMode::Msd,
            temperature: TemperatureMode::Shared,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.alpha, self.beta, self.omega_uni, self.omega_multi].iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Config("loss weights must be finite".into()));
        }
        if self.alpha < 0.0 || self.beta < 0.0 || self.alpha + self.beta <= 0.0 {
            return Err(Error::Config(format!(
                "need alpha, beta >= 0 with alpha + beta > 0 (got {}, {})",
                self.alpha, self.beta
            )));
        }
        if self.omega_uni < 0.0 || self.omega_multi < 0.0 || self.omega_uni + self.omega_multi <= 0.0 {
            return Err(Error::Config(format!(
                "need omega_uni, omega_multi >= 0, not both zero (got {}, {})",
                self.omega_uni, self.omega_multi
            )));
        }
        Ok(())
    }
}

fn check_rows(rows: &[usize], len: usize) -> Result<()> {
    match rows.iter().find(|&&r| r >= len) {
        Some(&index) => Err(Error::Index { index, len }),
        None => Ok(()),
    }
}

/// `log softmax(q · keysᵀ / τ)` over every key.
pub fn student_log_probs(tape: &mut Tape, queries: Var, keys: &Tensor, tau: Var) -> Result<Var> {
    let k = tape.constant(keys.clone());
    let logits = tape.matmul_nt(queries, k)?;
    let scaled = tape.div_scalar(logits, tau)?;
    tape.log_softmax_rows(scaled)
}

/// InfoNCE against a constant key set: batch mean of `−log softmax(q·Kᵀ/τ)[pos]`.
pub fn infonce_uni(tape: &mut Tape, queries: Var, pos_rows: &[usize], keys: &Tensor, tau: Var) -> Result<Var> {
    check_rows(pos_rows, keys.rows())?;
    let log_probs = student_log_probs(tape, queries, keys, tau)?;
    tape.nll(log_probs, pos_rows)
}

/// `(a + b) / 2`.
pub fn uni_loss(tape: &mut Tape, i2i: Var, t2t: Var) -> Result<Var> {
    let s = tape.add(i2i, t2t)?;
    tape.scale(s, 0.5)
}

/// `(a + b) / 2`.
pub fn multi_loss(tape: &mut Tape, t2i: Var, i2t: Var) -> Result<Var> {
    let s = tape.add(t2i, i2t)?;
    tape.scale(s, 0.5)
}

/// Weighted mean `(ω_u·uni + ω_m·multi) / (ω_u + ω_m)`.
pub fn total_loss(tape: &mut Tape, uni: Var, multi: Var, omega_uni: f64, omega_multi: f64) -> Result<Var> {
    let denom = omega_uni + omega_multi;
    if omega_uni < 0.0 || omega_multi < 0.0 || !(denom > 0.0) {
        return Err(Error::Config(format!("invalid loss weights ({omega_uni}, {omega_multi})")));
    }
    let u = tape.scale(uni, omega_uni / denom)?;
    let m = tape.scale(multi, omega_multi / denom)?;
    tape.add(u, m)
}

/// Teacher distributions for self-distillation.
///
/// `p_q2k` compares the momentum-encoded query with every key; `p_k2k`
/// compares the query's paired key with every key. Both are off-tape.
pub fn msd_targets(
    momentum_queries: &Tensor,
    paired_key_rows: &[usize],
    keys: &Tensor,
    tau: f64,
) -> Result<(Tensor, Tensor)> {
    check_rows(paired_key_rows, keys.rows())?;
    if momentum_queries.rows() != paired_key_rows.len() {
        return Err(Error::dim(
            "msd_targets",
            format!("{} queries, {} paired rows", momentum_queries.rows(), paired_key_rows.len()),
        ));
    }
    let q2k = scaled_softmax_rows(&momentum_queries.matmul_nt(keys)?, tau)?;
    let paired = keys.select_rows(paired_key_rows)?;
    let k2k = scaled_softmax_rows(&paired.matmul_nt(keys)?, tau)?;
    Ok((q2k, k2k))
}

/// `α·KL(p_q2k ‖ student) + β·KL(p_k2k ‖ student)`.
pub fn msd_loss(
    tape: &mut Tape,
    student_log_probs: Var,
    p_q2k: &Tensor,
    p_k2k: &Tensor,
    alpha: f64,
    beta: f64,
) -> Result<Var> {
    if alpha < 0.0 || beta < 0.0 || !(alpha + beta > 0.0) {
        return Err(Error::Config(format!("invalid distillation weights ({alpha}, {beta})")));
    }
    let kl_q = tape.kl_divergence(p_q2k, student_log_probs)?;
    let kl_k = tape.kl_divergence(p_k2k, student_log_probs)?;
    let a = tape.scale(kl_q, alpha)?;
    let b = tape.scale(kl_k, beta)?;
    tape.add(a, b)
}

/// Cross-modal InfoNCE with the paired key as the only positive.
pub fn onehot_multi_loss(tape: &mut Tape, queries: Var, pos_rows: &[usize], keys: &Tensor, tau: Var) -> Result<Var> {
    infonce_uni(tape, queries, pos_rows, keys, tau)
}

/// In-batch InfoNCE in both directions over the `b×b` similarity matrix:
/// `(image→text, text→image)`.
pub fn end2end_directions(tape: &mut Tape, image: Var, text: Var, tau: Var) -> Result<(Var, Var)> {
    let b = tape.value(image).rows();
    if b < 2 {
        return Err(Error::DegenerateBatch(b));
    }
    if tape.value(text).shape() != tape.value(image).shape() {
        return Err(Error::dim(
            "end2end_loss",
            format!("{:?} vs {:?}", tape.value(image).shape(), tape.value(text).shape()),
        ));
    }
    let diag: Vec<usize> = (0..b).collect();
    let logits = tape.matmul_nt(image, text)?;
    let scaled = tape.div_scalar(logits, tau)?;
    let i2t_lp = tape.log_softmax_rows(scaled)?;
    let i2t = tape.nll(i2t_lp, &diag)?;
    let transposed = tape.transpose(scaled)?;
    let t2i_lp = tape.log_softmax_rows(transposed)?;
    let t2i = tape.nll(t2i_lp, &diag)?;
    Ok((i2t, t2i))
}

/// Symmetric in-batch InfoNCE, the mean of both directions.
pub fn end2end_loss(tape: &mut Tape, image: Var, text: Var, tau: Var) -> Result<Var> {
    let (i2t, t2i) = end2end_directions(tape, image, text, tau)?;
    multi_loss(tape, i2t, t2i)
}
