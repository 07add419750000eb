//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Operations are recorded in execution order on a [`Tape`]; parents always
//! precede their children, so a single reverse sweep visits every record once.
//! Gradients of leaves persist on the tape and accumulate across repeated
//! [`Tape::backward`] calls.

use std::collections::HashMap;

use super::dense::{Tensor, MIN_ROW_NORM};
use crate::error::{Error, Result};

/// Handle to a recorded value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    DivScalar(Var, Var),
    AddRow(Var, Var),
    Matmul(Var, Var),
    MatmulNt(Var, Var),
    Transpose(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    ConcatRows(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    RowL2Normalize { input: Var, norms: Vec<f64> },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    KlDivergence { target: Tensor, log_q: Var },
    Nll { log_probs: Var, targets: Vec<usize> },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf | Constant => Vec::new(),
            Add(a, b) | Sub(a, b) | Mul(a, b) | MulScalar(a, b) | DivScalar(a, b) | AddRow(a, b)
            | Matmul(a, b) | MatmulNt(a, b) => vec![*a, *b],
            Scale(a, _) | Transpose(a) | Tanh(a) | Relu(a) | Exp(a) | Log(a) | Sum(a) | Mean(a)
            | SelectRows(a, _) | SoftmaxRows(a) | LogSoftmaxRows(a) => vec![*a],
            RowL2Normalize { input, .. } => vec![*input],
            KlDivergence { log_q, .. } => vec![*log_q],
            Nll { log_probs, .. } => vec![*log_probs],
            ConcatRows(parts) => parts.clone(),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recording of one forward computation.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: HashMap<Var, Tensor>,
    tracked_scalars: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Scalars held by gradient-tracked intermediate records (leaves and
    /// constants excluded). Nothing is freed before the tape is dropped, so
    /// this is also the tape's peak.
    pub fn tracked_scalars(&self) -> usize {
        self.tracked_scalars
    }

    /// A trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// An input that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Value-equal copy that lives off the tape.
    pub fn detach(&self, v: Var) -> Tensor {
        self.nodes[v.0].value.clone()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v)
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.grads.remove(&v)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let id = Var(self.nodes.len());
        if requires_grad && !matches!(op, Op::Leaf) {
            self.tracked_scalars += value.numel();
        }
        self.nodes.push(Node { value, op, requires_grad });
        id
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.push_raw(value, op, requires_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// Multiply by a fixed constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).scale(c)?;
        Ok(self.push(v, Op::Scale(a, c)))
    }

    /// Multiply every element of `a` by the one-element tensor `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let c = self.value(s).item()?;
        let v = self.value(a).scale(c)?;
        Ok(self.push(v, Op::MulScalar(a, s)))
    }

    /// Divide every element of `a` by the one-element tensor `s`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let c = self.value(s).item()?;
        if c == 0.0 {
            return Err(Error::NonFinite("div_scalar"));
        }
        let v = self.value(a).map(|x| x / c).check_finite("div_scalar")?;
        Ok(self.push(v, Op::DivScalar(a, s)))
    }

    /// `[m×n] + [n]` bias add.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let v = self.value(a).add_row(self.value(row))?;
        Ok(self.push(v, Op::AddRow(a, row)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::Matmul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(v, Op::MatmulNt(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose()?;
        Ok(self.push(v, Op::Transpose(a)))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::tanh);
        Ok(self.push(v, Op::Tanh(a)))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(0.0));
        Ok(self.push(v, Op::Relu(a)))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::exp).check_finite("exp")?;
        Ok(self.push(v, Op::Exp(a)))
    }

    /// Natural log; every input must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| !(x > 0.0)) {
            return Err(Error::NonFinite("log"));
        }
        let v = self.value(a).map(f64::ln);
        Ok(self.push(v, Op::Log(a)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum()).check_finite("sum")?;
        Ok(self.push(v, Op::Sum(a)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).mean()).check_finite("mean")?;
        Ok(self.push(v, Op::Mean(a)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_rows(&values)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let v = self.value(a).select_rows(indices)?;
        Ok(self.push(v, Op::SelectRows(a, indices.to_vec())))
    }

    pub fn row_l2_normalize(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let norms = x.row_norms()?;
        if let Some((row, &norm)) = norms.iter().enumerate().find(|(_, &n)| !(n > MIN_ROW_NORM)) {
            return Err(Error::DegenerateRow { row, norm });
        }
        let v = x.row_l2_normalize()?;
        Ok(self.push(v, Op::RowL2Normalize { input: a, norms }))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).softmax_rows()?;
        Ok(self.push(v, Op::SoftmaxRows(a)))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).log_softmax_rows()?;
        Ok(self.push(v, Op::LogSoftmaxRows(a)))
    }

    /// Row-wise softmax of `logits / temperature` with an on-tape temperature.
    pub fn scaled_softmax_rows(&mut self, logits: Var, temperature: Var) -> Result<Var> {
        let tau = self.value(temperature).item()?;
        if !(tau > 0.0) {
            return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
        }
        let scaled = self.div_scalar(logits, temperature)?;
        self.softmax_rows(scaled)
    }

    /// Batch-mean `KL(p ‖ q)` from a constant target `p` and student log-probabilities.
    ///
    /// Terms with `p = 0` contribute zero. Gradient reaches `log_q` only.
    pub fn kl_divergence(&mut self, target: &Tensor, log_q: Var) -> Result<Var> {
        let lq = self.value(log_q);
        if target.shape() != lq.shape() || target.shape().len() != 2 {
            return Err(Error::dim(
                "kl_divergence",
                format!("target {:?} vs log_q {:?}", target.shape(), lq.shape()),
            ));
        }
        validate_distribution_rows(target)?;
        let value = kl_rows(target, lq) / target.rows() as f64;
        let v = Tensor::scalar(value).check_finite("kl_divergence")?;
        Ok(self.push(v, Op::KlDivergence { target: target.clone(), log_q }))
    }

    /// `−mean_i log_probs[i, targets[i]]`.
    pub fn nll(&mut self, log_probs: Var, targets: &[usize]) -> Result<Var> {
        let lp = self.value(log_probs);
        let [m, n] = lp.shape() else {
            return Err(Error::dim("nll", format!("expected a matrix, got {:?}", lp.shape())));
        };
        if targets.len() != *m {
            return Err(Error::dim("nll", format!("{} targets for {m} rows", targets.len())));
        }
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= *n {
                return Err(Error::Index { index: t, len: *n });
            }
            total -= lp.row(i)[t];
        }
        let v = Tensor::scalar(total / *m as f64).check_finite("nll")?;
        Ok(self.push(v, Op::Nll { log_probs, targets: targets.to_vec() }))
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients add onto whatever
    /// earlier calls stored.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(Error::Rank(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Err(Error::State("loss does not depend on any trainable leaf".into()));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Tensor::filled(root.value.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                match self.grads.get_mut(&Var(idx)) {
                    Some(acc) => acc.add_assign(&g)?,
                    None => {
                        self.grads.insert(Var(idx), g);
                    }
                }
                continue;
            }
            for (parent, contribution) in self.vjp(idx, &g)? {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut adj[parent.0] {
                    Some(acc) => acc.add_assign(&contribution)?,
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of record `idx` for upstream gradient `g`.
    fn vjp(&self, idx: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[idx];
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let out = match &node.op {
            Op::Leaf | Op::Constant => Vec::new(),
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Mul(a, b) => vec![(*a, g.mul(val(*b))?), (*b, g.mul(val(*a))?)],
            Op::Scale(a, c) => vec![(*a, g.map(|v| v * c))],
            Op::MulScalar(a, s) => {
                let c = val(*s).item()?;
                let ds: f64 = g.data().iter().zip(val(*a).data()).map(|(gi, ai)| gi * ai).sum();
                vec![(*a, g.map(|v| v * c)), (*s, Tensor::filled(val(*s).shape(), ds))]
            }
            Op::DivScalar(a, s) => {
                let c = val(*s).item()?;
                let ds: f64 = -g.data().iter().zip(y.data()).map(|(gi, yi)| gi * yi).sum::<f64>() / c;
                vec![(*a, g.map(|v| v / c)), (*s, Tensor::filled(val(*s).shape(), ds))]
            }
            Op::AddRow(a, row) => {
                let db = g.sum_rows()?;
                let db = Tensor::new(val(*row).shape().to_vec(), db.into_data())?;
                vec![(*a, g.clone()), (*row, db)]
            }
            Op::Matmul(a, b) => vec![(*a, g.matmul_nt(val(*b))?), (*b, val(*a).matmul_tn(g)?)],
            Op::MatmulNt(a, b) => vec![(*a, g.matmul(val(*b))?), (*b, g.matmul_tn(val(*a))?)],
            Op::Transpose(a) => vec![(*a, g.transpose()?)],
            Op::Tanh(a) => vec![(*a, g.zip_map(y, "tanh'", |gi, yi| gi * (1.0 - yi * yi))?)],
            Op::Relu(a) => {
                vec![(*a, g.zip_map(val(*a), "relu'", |gi, xi| if xi > 0.0 { gi } else { 0.0 })?)]
            }
            Op::Exp(a) => vec![(*a, g.mul(y)?)],
            Op::Log(a) => vec![(*a, g.zip_map(val(*a), "log'", |gi, xi| gi / xi)?)],
            Op::Sum(a) => {
                let gi = g.item()?;
                vec![(*a, Tensor::filled(val(*a).shape(), gi))]
            }
            Op::Mean(a) => {
                let x = val(*a);
                let gi = g.item()? / x.numel() as f64;
                vec![(*a, Tensor::filled(x.shape(), gi))]
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut offset = 0;
                let mut grads = Vec::with_capacity(parts.len());
                for p in parts {
                    let rows = val(*p).rows();
                    let slice = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                    grads.push((*p, Tensor::matrix(rows, cols, slice)?));
                    offset += rows;
                }
                grads
            }
            Op::SelectRows(a, indices) => {
                let x = val(*a);
                let cols = x.cols();
                let mut dx = Tensor::zeros(x.shape());
                for (r, &i) in indices.iter().enumerate() {
                    let src = g.row(r);
                    for (d, s) in dx.data_mut()[i * cols..(i + 1) * cols].iter_mut().zip(src) {
                        *d += s;
                    }
                }
                vec![(*a, dx)]
            }
            Op::RowL2Normalize { input, norms } => {
                let cols = y.cols();
                let mut dx = g.clone();
                for (i, norm) in norms.iter().enumerate() {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let proj: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (j, d) in dx.data_mut()[i * cols..(i + 1) * cols].iter_mut().enumerate() {
                        *d = (gr[j] - yr[j] * proj) / norm;
                    }
                }
                vec![(*input, dx)]
            }
            Op::SoftmaxRows(a) => {
                let cols = y.cols();
                let mut dx = g.clone();
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (j, d) in dx.data_mut()[i * cols..(i + 1) * cols].iter_mut().enumerate() {
                        *d = yr[j] * (gr[j] - inner);
                    }
                }
                vec![(*a, dx)]
            }
            Op::LogSoftmaxRows(a) => {
                let cols = y.cols();
                let mut dx = g.clone();
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let total: f64 = gr.iter().sum();
                    for (j, d) in dx.data_mut()[i * cols..(i + 1) * cols].iter_mut().enumerate() {
                        *d = gr[j] - yr[j].exp() * total;
                    }
                }
                vec![(*a, dx)]
            }
            Op::KlDivergence { target, log_q } => {
                let c = -g.item()? / target.rows() as f64;
                vec![(*log_q, target.map(|p| p * c))]
            }
            Op::Nll { log_probs, targets } => {
                let lp = val(*log_probs);
                let c = -g.item()? / targets.len() as f64;
                let mut dx = Tensor::zeros(lp.shape());
                let cols = lp.cols();
                for (i, &t) in targets.iter().enumerate() {
                    dx.data_mut()[i * cols + t] += c;
                }
                vec![(*log_probs, dx)]
            }
        };
        Ok(out)
    }
}

/// Tolerance on row sums for anything treated as a probability distribution.
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-9;

pub(crate) fn validate_distribution_rows(p: &Tensor) -> Result<()> {
    for i in 0..p.rows() {
        let row = p.row(i);
        let sum: f64 = row.iter().sum();
        if row.iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > DISTRIBUTION_TOLERANCE {
            return Err(Error::Distribution { row: i, sum });
        }
    }
    Ok(())
}

/// `Σ_rows Σ_j p_j (log p_j − log q_j)` with `0·log 0 := 0`.
fn kl_rows(p: &Tensor, log_q: &Tensor) -> f64 {
    p.data()
        .iter()
        .zip(log_q.data())
        .filter(|(&pj, _)| pj > 0.0)
        .map(|(&pj, &lq)| pj * (pj.ln() - lq))
        .sum()
}

/// Off-tape batch-mean KL divergence, same conventions as [`Tape::kl_divergence`].
pub fn kl_divergence(p: &Tensor, log_q: &Tensor) -> Result<f64> {
    if p.shape() != log_q.shape() || p.shape().len() != 2 {
        return Err(Error::dim("kl_divergence", format!("{:?} vs {:?}", p.shape(), log_q.shape())));
    }
    validate_distribution_rows(p)?;
    Ok(kl_rows(p, log_q) / p.rows() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Tensor {
        Tensor::matrix(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::matrix(2, 3, vec![0.5; 6]).unwrap());
        let s = tape.sum(w).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn square_gives_two_x() {
        let mut tape = Tape::new();
        let w = tape.leaf(row(&[1.0, 2.0]));
        let sq = tape.mul(w, w).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_accumulates() {
        let x = row(&[0.3, -1.2, 0.7]);
        let mut split = Tape::new();
        let w = split.leaf(x.clone());
        let t = split.tanh(w).unwrap();
        let l1 = split.sum(t).unwrap();
        let sq = split.mul(w, w).unwrap();
        let l2 = split.mean(sq).unwrap();
        split.backward(l1).unwrap();
        split.backward(l2).unwrap();

        let mut joint = Tape::new();
        let w2 = joint.leaf(x);
        let t = joint.tanh(w2).unwrap();
        let l1 = joint.sum(t).unwrap();
        let sq = joint.mul(w2, w2).unwrap();
        let l2 = joint.mean(sq).unwrap();
        let total = joint.add(l1, l2).unwrap();
        joint.backward(total).unwrap();

        for (a, b) in split.grad(w).unwrap().data().iter().zip(joint.grad(w2).unwrap().data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let w = tape.leaf(row(&[1.0, 2.0]));
        let t = tape.tanh(w).unwrap();
        assert!(matches!(tape.backward(t), Err(Error::Rank(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(row(&[1.0, 2.0]));
        let c = tape.constant(row(&[3.0, 4.0]));
        let p = tape.mul(w, c).unwrap();
        let s = tape.sum(p).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[3.0, 4.0]);
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.tracked_scalars(), 2 + 1);
    }

    #[test]
    fn kl_hand_values() {
        let p = row(&[1.0, 0.0]);
        let q = row(&[0.5, 0.5]).map(f64::ln);
        assert!((kl_divergence(&p, &q).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);

        let p = row(&[0.5, 0.5]);
        let q = row(&[0.9, 0.1]).map(f64::ln);
        let expected = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        let got = kl_divergence(&p, &q).unwrap();
        assert!((got - expected).abs() < 1e-15);
        assert!((got - 0.510826).abs() < 1e-6);

        let same = row(&[0.2, 0.3, 0.5]);
        assert_eq!(kl_divergence(&same, &same.map(f64::ln)).unwrap(), 0.0);

        let bad = row(&[0.5, 0.4]);
        assert!(matches!(kl_divergence(&bad, &q), Err(Error::Distribution { row: 0, .. })));
    }

    #[test]
    fn kl_gradient_skips_target() {
        let mut tape = Tape::new();
        let logits = tape.leaf(row(&[0.1, -0.4, 0.9]));
        let lq = tape.log_softmax_rows(logits).unwrap();
        let p = row(&[0.2, 0.3, 0.5]);
        let kl = tape.kl_divergence(&p, lq).unwrap();
        tape.backward(kl).unwrap();
        // d KL / d logits = softmax(logits) − p
        let q = tape.value(logits).softmax_rows().unwrap();
        for ((g, qi), pi) in tape.grad(logits).unwrap().data().iter().zip(q.data()).zip(p.data()) {
            assert!((g - (qi - pi)).abs() < 1e-15);
        }
    }
}
