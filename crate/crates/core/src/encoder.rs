//! Two-tower MLP encoders and the learnable temperature.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};
use crate::tensor::{Tape, Tensor, Var};

/// Default initial temperature.
pub const INITIAL_TEMPERATURE: f64 = 0.07;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Hidden tanh layers followed by a linear projection to the embedding width.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub layers: Vec<Linear>,
    pub proj: Linear,
}

impl EncoderParams {
    /// Glorot-uniform weights and zero biases, fully determined by `seed`.
    ///
    /// `dims` lists the input width followed by each hidden width.
    pub fn init(seed: u64, dims: &[usize], embed_dim: usize) -> Result<Self> {
        Self::init_stream(seed, 0, dims, embed_dim)
    }

    /// As [`EncoderParams::init`] with an extra counter, so several towers can
    /// share one seed.
    pub fn init_stream(seed: u64, tower: u64, dims: &[usize], embed_dim: usize) -> Result<Self> {
        if dims.is_empty() || embed_dim == 0 || dims.contains(&0) {
            return Err(Error::Config(format!(
                "encoder dims must be non-empty and positive (dims {dims:?}, embedding {embed_dim})"
            )));
        }
        let mut rng = rng_for(seed, stream::INIT, &[tower]);
        let mut glorot = |d_in: usize, d_out: usize| -> Result<Linear> {
            let a = (6.0 / (d_in + d_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
            let w = (0..d_in * d_out).map(|_| dist.sample(&mut rng)).collect();
            Ok(Linear { weight: Tensor::matrix(d_in, d_out, w)?, bias: Tensor::zeros(&[d_out]) })
        };
        let layers = dims
            .windows(2)
            .map(|w| glorot(w[0], w[1]))
            .collect::<Result<Vec<_>>>()?;
        let proj = glorot(*dims.last().expect("non-empty"), embed_dim)?;
        Ok(Self { layers, proj })
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().unwrap_or(&self.proj).weight.shape()[0]
    }

    pub fn embed_dim(&self) -> usize {
        self.proj.weight.shape()[1]
    }

    /// Parameters in a fixed order: each layer's weight then bias, projection last.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .chain(std::iter::once(&self.proj))
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .chain(std::iter::once(&mut self.proj))
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Names matching [`EncoderParams::tensors`], under `prefix`.
    pub fn tensor_names(&self, prefix: &str) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.layers.len() {
            names.push(format!("{prefix}.layer{i}.weight"));
            names.push(format!("{prefix}.layer{i}.bias"));
        }
        names.push(format!("{prefix}.proj.weight"));
        names.push(format!("{prefix}.proj.bias"));
        names
    }

    /// Rebuild from tensors in [`EncoderParams::tensors`] order.
    pub fn from_tensors(tensors: Vec<Tensor>) -> Result<Self> {
        if tensors.len() < 2 || !tensors.len().is_multiple_of(2) {
            return Err(Error::Config(format!("{} tensors cannot form an encoder", tensors.len())));
        }
        let mut it = tensors.into_iter();
        let mut linears = Vec::new();
        while let (Some(weight), Some(bias)) = (it.next(), it.next()) {
            linears.push(Linear { weight, bias });
        }
        let proj = linears.pop().expect("at least one layer");
        let params = Self { layers: linears, proj };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        let mut width = self.input_dim();
        for l in self.layers.iter().chain(std::iter::once(&self.proj)) {
            let [d_in, d_out] = l.weight.shape() else {
                return Err(Error::Config("encoder weight is not a matrix".into()));
            };
            if *d_in != width || l.bias.shape() != [*d_out] {
                return Err(Error::Config(format!(
                    "layer dims do not chain: expected input {width}, weight {:?}, bias {:?}",
                    l.weight.shape(),
                    l.bias.shape()
                )));
            }
            if !l.weight.is_finite() || !l.bias.is_finite() {
                return Err(Error::Config("encoder parameters must be finite".into()));
            }
            width = *d_out;
        }
        Ok(())
    }

    pub fn same_architecture(&self, other: &Self) -> bool {
        let a = self.tensors();
        let b = other.tensors();
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.shape() == y.shape())
    }

    /// Gradient-free forward pass.
    pub fn encode_detached(&self, inputs: &Tensor) -> Result<Tensor> {
        self.check_width(inputs)?;
        let mut h = inputs.clone();
        for l in &self.layers {
            h = h.matmul(&l.weight)?.add_row(&l.bias)?.map(f64::tanh);
        }
        h.matmul(&self.proj.weight)?.add_row(&self.proj.bias)?.row_l2_normalize()
    }

    /// Record all parameters as leaves.
    pub fn bind(&self, tape: &mut Tape) -> BoundEncoder {
        let vars = self.tensors().into_iter().map(|t| tape.leaf(t.clone())).collect();
        BoundEncoder { vars, input_dim: self.input_dim() }
    }

    fn check_width(&self, inputs: &Tensor) -> Result<()> {
        if inputs.shape().len() != 2 || inputs.cols() != self.input_dim() {
            return Err(Error::dim(
                "encode",
                format!("input {:?} for encoder width {}", inputs.shape(), self.input_dim()),
            ));
        }
        Ok(())
    }
}

/// Encoder parameters recorded on a tape.
#[derive(Debug, Clone)]
pub struct BoundEncoder {
    vars: Vec<Var>,
    input_dim: usize,
}

impl BoundEncoder {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// On-tape forward pass producing unit-norm rows.
    pub fn encode(&self, tape: &mut Tape, inputs: Var) -> Result<Var> {
        let shape = tape.value(inputs).shape();
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(Error::dim(
                "encode",
                format!("input {shape:?} for encoder width {}", self.input_dim),
            ));
        }
        let (hidden, proj) = self.vars.split_at(self.vars.len() - 2);
        let mut h = inputs;
        for pair in hidden.chunks(2) {
            let z = tape.matmul(h, pair[0])?;
            let z = tape.add_row(z, pair[1])?;
            h = tape.tanh(z)?;
        }
        let z = tape.matmul(h, proj[0])?;
        let z = tape.add_row(z, proj[1])?;
        tape.row_l2_normalize(z)
    }
}

/// Convenience: `encode` on a fresh binding.
pub fn encode(tape: &mut Tape, params: &EncoderParams, inputs: Var) -> Result<(BoundEncoder, Var)> {
    let bound = params.bind(tape);
    let out = bound.encode(tape, inputs)?;
    Ok((bound, out))
}

/// Learnable temperature stored as its logarithm, so `τ = exp(log_tau) > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct TemperatureParam {
    pub log_tau: Tensor,
}

impl TemperatureParam {
    pub fn new(tau: f64) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
        }
        Ok(Self { log_tau: Tensor::scalar(tau.ln()) })
    }

    pub fn from_log(log_tau: f64) -> Self {
        Self { log_tau: Tensor::scalar(log_tau) }
    }

    pub fn value(&self) -> f64 {
        self.log_tau.data()[0].exp()
    }

    pub fn bind(&self, tape: &mut Tape) -> Var {
        tape.leaf(self.log_tau.clone())
    }
}

impl Default for TemperatureParam {
    fn default() -> Self {
        Self::new(INITIAL_TEMPERATURE).expect("positive")
    }
}

/// `τ = exp(log_tau)` on the tape.
pub fn temperature(tape: &mut Tape, log_tau: Var) -> Result<Var> {
    tape.exp(log_tau)
}

/// Uniform draw helper used by tests and the data generator.
pub(crate) fn uniform_vec(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}
