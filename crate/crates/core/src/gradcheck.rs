//! Finite-difference verification of every tape operation and every loss.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{encode, uniform_vec, EncoderParams, TemperatureParam};
use crate::error::{Error, Result};
use crate::losses::{
    end2end_loss, infonce_uni, msd_loss, msd_targets, multi_loss, onehot_multi_loss, student_log_probs, total_loss,
    uni_loss, LossConfig, LossMode, TemperatureMode,
};
use crate::model::{run_end2end_step, DualEncoder, StepBatch, TowerDims};
use crate::rfbe::{run_monolithic_step, QueuePair};
use crate::rng::{rng_for, stream};
use crate::tensor::{finite_diff_grad, max_relative_error, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub seed: u64,
    pub instances: usize,
    pub eps: f64,
    pub tolerance: f64,
    /// Corrupt the analytic gradients before comparing; the suite must then fail.
    pub sabotage: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { seed: 0, instances: 20, eps: 1e-5, tolerance: 1e-6, sabotage: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpReport {
    pub name: String,
    pub instances: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub ops: Vec<OpReport>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn to_table(&self) -> String {
        let width = self.ops.iter().map(|o| o.name.len()).max().unwrap_or(0);
        let mut out = String::new();
        for o in &self.ops {
            let verdict = if o.passed { "pass" } else { "FAIL" };
            out.push_str(&format!("{:<width$}  {:>3}  {:>10.3e}  {verdict}\n", o.name, o.instances, o.max_rel_error));
        }
        out
    }
}

/// Analytic and numeric gradients for one random instance.
struct Instance {
    analytic: Vec<f64>,
    numeric: Vec<f64>,
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

fn flatten(ts: &[Tensor]) -> Vec<f64> {
    ts.iter().flat_map(|t| t.data().iter().copied()).collect()
}

fn unflatten(like: &[Tensor], x: &[f64]) -> Result<Vec<Tensor>> {
    let mut at = 0;
    like.iter()
        .map(|t| {
            let n = t.numel();
            let out = Tensor::new(t.shape().to_vec(), x[at..at + n].to_vec());
            at += n;
            out
        })
        .collect()
}

/// Differentiates `build(inputs)` on the tape and by central differences.
fn tape_instance(inputs: Vec<Tensor>, build: Build, eps: f64) -> Result<Instance> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let grads: Vec<Tensor> =
        vars.iter().zip(&inputs).map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()))).collect();
    let numeric = finite_diff_grad(
        |x| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = unflatten(&inputs, x)?.into_iter().map(|t| tape.leaf(t)).collect();
            let loss = build(&mut tape, &vars)?;
            tape.value(loss).item()
        },
        &flatten(&inputs),
        eps,
    )?;
    Ok(Instance { analytic: flatten(&grads), numeric })
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
    Tensor::matrix(rows, cols, data).expect("positive extents")
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(rows, cols, uniform_vec(rng, rows * cols, lo, hi)).expect("positive extents")
}

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    normal_matrix(rng, rows, cols).row_l2_normalize().expect("gaussian rows are nonzero")
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(2..=5)
}

/// `Σ out ∘ w` for a fixed random `w`, so every output coordinate matters.
fn weighted(w: Tensor) -> impl Fn(&mut Tape, Var) -> Result<Var> {
    move |tape, out| {
        let w = tape.constant(w.clone());
        let p = tape.mul(out, w)?;
        tape.sum(p)
    }
}

fn unary(rng: &mut ChaCha8Rng, x: Tensor, op: fn(&mut Tape, Var) -> Result<Var>) -> (Vec<Tensor>, Build) {
    let w = normal_matrix(rng, x.rows(), x.cols());
    let reduce = weighted(w);
    (vec![x], Box::new(move |t, v| {
        let y = op(t, v[0])?;
        reduce(t, y)
    }))
}

fn binary(rng: &mut ChaCha8Rng, a: Tensor, b: Tensor, out_shape: [usize; 2], op: fn(&mut Tape, Var, Var) -> Result<Var>) -> (Vec<Tensor>, Build) {
    let reduce = weighted(normal_matrix(rng, out_shape[0], out_shape[1]));
    (vec![a, b], Box::new(move |t, v| {
        let y = op(t, v[0], v[1])?;
        reduce(t, y)
    }))
}

/// Positive scalar leaf in `[lo, hi]`.
fn positive_scalar(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    Tensor::scalar(rng.random_range(lo..hi))
}

fn op_case(name: &str, rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Build) {
    let (r, c, k) = (dim(rng), dim(rng), dim(rng));
    match name {
        "add" => {
            let (a, b) = (normal_matrix(rng, r, c), normal_matrix(rng, r, c));
            binary(rng, a, b, [r, c], Tape::add)
        }
        "sub" => {
            let (a, b) = (normal_matrix(rng, r, c), normal_matrix(rng, r, c));
            binary(rng, a, b, [r, c], Tape::sub)
        }
        "mul" => {
            let (a, b) = (normal_matrix(rng, r, c), normal_matrix(rng, r, c));
            binary(rng, a, b, [r, c], Tape::mul)
        }
        "scale" => {
            let s = rng.random_range(-2.0..2.0);
            let reduce = weighted(normal_matrix(rng, r, c));
            (vec![normal_matrix(rng, r, c)], Box::new(move |t, v| {
                let y = t.scale(v[0], s)?;
                reduce(t, y)
            }))
        }
        "mul_scalar" | "div_scalar" => {
            let a = normal_matrix(rng, r, c);
            let s = positive_scalar(rng, 0.5, 2.0);
            let reduce = weighted(normal_matrix(rng, r, c));
            let div = name == "div_scalar";
            (vec![a, s], Box::new(move |t, v| {
                let y = if div { t.div_scalar(v[0], v[1])? } else { t.mul_scalar(v[0], v[1])? };
                reduce(t, y)
            }))
        }
        "add_row" => {
            let a = normal_matrix(rng, r, c);
            let row = Tensor::new(vec![c], normal_matrix(rng, 1, c).into_data()).expect("positive extent");
            binary(rng, a, row, [r, c], Tape::add_row)
        }
        "matmul" => {
            let (a, b) = (normal_matrix(rng, r, k), normal_matrix(rng, k, c));
            binary(rng, a, b, [r, c], Tape::matmul)
        }
        "matmul_nt" => {
            let (a, b) = (normal_matrix(rng, r, k), normal_matrix(rng, c, k));
            binary(rng, a, b, [r, c], Tape::matmul_nt)
        }
        "transpose" => {
            let x = normal_matrix(rng, r, c);
            let reduce = weighted(normal_matrix(rng, c, r));
            (vec![x], Box::new(move |t, v| {
                let y = t.transpose(v[0])?;
                reduce(t, y)
            }))
        }
        "tanh" => {
            let x = normal_matrix(rng, r, c);
            unary(rng, x, Tape::tanh)
        }
        "relu" => {
            // keep inputs clear of the kink at zero
            let x = normal_matrix(rng, r, c).map(|v| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v });
            unary(rng, x, Tape::relu)
        }
        "exp" => {
            let x = uniform_matrix(rng, r, c, -1.5, 1.5);
            unary(rng, x, Tape::exp)
        }
        "log" => {
            let x = uniform_matrix(rng, r, c, 0.5, 2.0);
            unary(rng, x, Tape::log)
        }
        "sum" | "mean" => {
            let w = rng.random_range(-2.0..2.0);
            let mean = name == "mean";
            (vec![normal_matrix(rng, r, c)], Box::new(move |t, v| {
                let y = if mean { t.mean(v[0])? } else { t.sum(v[0])? };
                t.scale(y, w)
            }))
        }
        "concat_rows" => {
            let (a, b) = (normal_matrix(rng, r, c), normal_matrix(rng, k, c));
            let reduce = weighted(normal_matrix(rng, r + k, c));
            (vec![a, b], Box::new(move |t, v| {
                let y = t.concat_rows(&[v[0], v[1]])?;
                reduce(t, y)
            }))
        }
        "select_rows" => {
            let x = normal_matrix(rng, r, c);
            let idx: Vec<usize> = (0..r + 2).map(|_| rng.random_range(0..r)).collect();
            let reduce = weighted(normal_matrix(rng, idx.len(), c));
            (vec![x], Box::new(move |t, v| {
                let y = t.select_rows(v[0], &idx)?;
                reduce(t, y)
            }))
        }
        "row_l2_normalize" => {
            let x = normal_matrix(rng, r, c);
            unary(rng, x, Tape::row_l2_normalize)
        }
        "softmax_rows" => {
            let x = normal_matrix(rng, r, c);
            unary(rng, x, Tape::softmax_rows)
        }
        "log_softmax_rows" => {
            let x = normal_matrix(rng, r, c);
            unary(rng, x, Tape::log_softmax_rows)
        }
        "scaled_softmax_rows" => {
            let x = normal_matrix(rng, r, c);
            let tau = positive_scalar(rng, 0.2, 1.0);
            binary(rng, x, tau, [r, c], Tape::scaled_softmax_rows)
        }
        "kl_divergence" => {
            let target = normal_matrix(rng, r, c).softmax_rows().expect("finite logits");
            (vec![normal_matrix(rng, r, c)], Box::new(move |t, v| {
                let lq = t.log_softmax_rows(v[0])?;
                t.kl_divergence(&target, lq)
            }))
        }
        "nll" => {
            let targets: Vec<usize> = (0..r).map(|_| rng.random_range(0..c)).collect();
            (vec![normal_matrix(rng, r, c)], Box::new(move |t, v| {
                let lp = t.log_softmax_rows(v[0])?;
                t.nll(lp, &targets)
            }))
        }
        other => unreachable!("unknown op {other}"),
    }
}

pub const OP_NAMES: [&str; 24] = [
    "add",
    "sub",
    "mul",
    "scale",
    "mul_scalar",
    "div_scalar",
    "add_row",
    "matmul",
    "matmul_nt",
    "transpose",
    "tanh",
    "relu",
    "exp",
    "log",
    "sum",
    "mean",
    "concat_rows",
    "select_rows",
    "row_l2_normalize",
    "softmax_rows",
    "log_softmax_rows",
    "scaled_softmax_rows",
    "kl_divergence",
    "nll",
];

/// Raw queries (normalized on the tape), fixed unit keys, positives and a temperature.
struct Retrieval {
    queries: Tensor,
    keys: Tensor,
    pos: Vec<usize>,
    tau: Tensor,
}

fn retrieval(rng: &mut ChaCha8Rng) -> Retrieval {
    let (b, d) = (rng.random_range(2..=4), rng.random_range(2..=4));
    let k = rng.random_range(b..=b + 4);
    let positions: Vec<usize> = (0..k).collect();
    let pos = (0..b).map(|_| *positions.choose(rng).expect("non-empty")).collect();
    Retrieval { queries: normal_matrix(rng, b, d), keys: unit_rows(rng, k, d), pos, tau: positive_scalar(rng, 0.1, 1.0) }
}

fn loss_case(name: &str, rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Build) {
    match name {
        "infonce" | "onehot_multi" => {
            let Retrieval { queries, keys, pos, tau } = retrieval(rng);
            let onehot = name == "onehot_multi";
            (vec![queries, tau], Box::new(move |t, v| {
                let q = t.row_l2_normalize(v[0])?;
                if onehot { onehot_multi_loss(t, q, &pos, &keys, v[1]) } else { infonce_uni(t, q, &pos, &keys, v[1]) }
            }))
        }
        "distillation" => {
            let Retrieval { queries, keys, pos, tau } = retrieval(rng);
            let mq = unit_rows(rng, queries.rows(), queries.cols());
            let (q2k, k2k) = msd_targets(&mq, &pos, &keys, tau.item().expect("scalar")).expect("valid teachers");
            let alpha = rng.random_range(0.0..1.0);
            (vec![queries, tau], Box::new(move |t, v| {
                let q = t.row_l2_normalize(v[0])?;
                let lp = student_log_probs(t, q, &keys, v[1])?;
                msd_loss(t, lp, &q2k, &k2k, alpha, 1.0 - alpha)
            }))
        }
        "total" => {
            // four streams sharing one temperature, combined with random weights
            let parts: Vec<Retrieval> = (0..4).map(|_| retrieval(rng)).collect();
            let mqs: Vec<Tensor> = parts[2..].iter().map(|p| unit_rows(rng, p.queries.rows(), p.queries.cols())).collect();
            let tau = positive_scalar(rng, 0.1, 1.0);
            let (wu, wm) = (rng.random_range(0.1..2.0), rng.random_range(0.1..10.0));
            let alpha = rng.random_range(0.0..1.0);
            let tau_value = tau.item().expect("scalar");
            let teachers: Vec<(Tensor, Tensor)> = parts[2..]
                .iter()
                .zip(&mqs)
                .map(|(p, mq)| msd_targets(mq, &p.pos, &p.keys, tau_value).expect("valid teachers"))
                .collect();
            let mut inputs: Vec<Tensor> = parts.iter().map(|p| p.queries.clone()).collect();
            inputs.push(tau);
            let fixed: Vec<(Tensor, Vec<usize>)> = parts.into_iter().map(|p| (p.keys, p.pos)).collect();
            (inputs, Box::new(move |t, v| {
                let tau = v[4];
                let mut streams = Vec::new();
                for (i, (keys, pos)) in fixed.iter().enumerate() {
                    let q = t.row_l2_normalize(v[i])?;
                    streams.push(if i < 2 {
                        infonce_uni(t, q, pos, keys, tau)?
                    } else {
                        let lp = student_log_probs(t, q, keys, tau)?;
                        let (q2k, k2k) = &teachers[i - 2];
                        msd_loss(t, lp, q2k, k2k, alpha, 1.0 - alpha)?
                    });
                }
                let uni = uni_loss(t, streams[0], streams[1])?;
                let multi = multi_loss(t, streams[2], streams[3])?;
                total_loss(t, uni, multi, wu, wm)
            }))
        }
        "end2end" => {
            let (b, d) = (rng.random_range(2..=5), rng.random_range(2..=4));
            let tau = positive_scalar(rng, 0.1, 1.0);
            (vec![normal_matrix(rng, b, d), normal_matrix(rng, b, d), tau], Box::new(move |t, v| {
                let i = t.row_l2_normalize(v[0])?;
                let x = t.row_l2_normalize(v[1])?;
                end2end_loss(t, i, x, v[2])
            }))
        }
        other => unreachable!("unknown loss {other}"),
    }
}

pub const LOSS_NAMES: [&str; 5] = ["infonce", "onehot_multi", "distillation", "total", "end2end"];

fn encoder_instance(rng: &mut ChaCha8Rng, seed: u64, eps: f64) -> Result<Instance> {
    let (din, h, e, b) = (rng.random_range(2..=5), rng.random_range(2..=5), rng.random_range(2..=4), rng.random_range(2..=4));
    let params = EncoderParams::init(seed, &[din, h], e)?;
    let x = normal_matrix(rng, b, din);
    let w = normal_matrix(rng, b, e);
    let reduce = weighted(w);
    let forward = |p: &EncoderParams, tape: &mut Tape| -> Result<(Vec<Var>, Var)> {
        let input = tape.constant(x.clone());
        let (bound, out) = encode(tape, p, input)?;
        Ok((bound.vars().to_vec(), reduce(tape, out)?))
    };
    let mut tape = Tape::new();
    let (vars, loss) = forward(&params, &mut tape)?;
    tape.backward(loss)?;
    let grads: Vec<Tensor> = vars.iter().map(|&v| tape.grad(v).cloned().expect("every parameter is used")).collect();
    let like: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
    let numeric = finite_diff_grad(
        |v| {
            let p = EncoderParams::from_tensors(unflatten(&like, v)?)?;
            let mut tape = Tape::new();
            let (_, loss) = forward(&p, &mut tape)?;
            tape.value(loss).item()
        },
        &flatten(&like),
        eps,
    )?;
    Ok(Instance { analytic: flatten(&grads), numeric })
}

/// Whole-model step: gradients of the total loss with respect to both query
/// towers. With momentum branches the temperature is left out because the
/// teachers read it detached.
fn model_instance(rng: &mut ChaCha8Rng, seed: u64, mode: LossMode, eps: f64) -> Result<Instance> {
    let dims = TowerDims { image_in: 3, text_in: 4, hidden: 3, depth: 1, embed: 3 };
    let mut model = DualEncoder::init(seed, dims, TemperatureMode::Shared)?;
    model.temperatures[0] = TemperatureParam::new(rng.random_range(0.1..1.0))?;
    // distinct key encoders so teachers differ from students
    model.image.key = EncoderParams::init_stream(seed ^ 0x5a5a, 0, &[3, 3], 3)?;
    model.text.key = EncoderParams::init_stream(seed ^ 0x5a5a, 1, &[4, 3], 3)?;
    let n = 4;
    let batch = StepBatch {
        ids: (0..n as u64).collect(),
        image_query: normal_matrix(rng, n, 3),
        image_key: normal_matrix(rng, n, 3),
        text_query: normal_matrix(rng, n, 4),
        text_key: normal_matrix(rng, n, 4),
    };
    let mut queues = QueuePair::new(8, 3)?;
    let filler: Vec<u64> = (100..104).collect();
    queues.image.enqueue(&unit_rows(rng, 4, 3), &filler)?;
    queues.text.enqueue(&unit_rows(rng, 4, 3), &filler)?;
    let cfg = LossConfig { mode, alpha: rng.random_range(0.0..1.0), ..Default::default() };
    let cfg = LossConfig { beta: 1.0 - cfg.alpha, ..cfg };

    let step = |m: &DualEncoder| match mode {
        LossMode::End2end => run_end2end_step(&batch, m, &cfg),
        _ => run_monolithic_step(&batch, m, &mut queues.clone(), &cfg),
    };
    let out = step(&model)?;
    let mut towers = model.image.query.tensors().len() + model.text.query.tensors().len();
    if mode == LossMode::End2end {
        towers = model.trainable().len();
    }
    let analytic = flatten(&out.grads.tensors()[..towers]);
    let like: Vec<Tensor> = model.trainable()[..towers].iter().map(|t| (*t).clone()).collect();
    let numeric = finite_diff_grad(
        |v| {
            let mut m = model.clone();
            for (dst, src) in m.trainable_mut().into_iter().zip(unflatten(&like, v)?) {
                *dst = src;
            }
            Ok(step(&m)?.loss.total)
        },
        &flatten(&like),
        eps,
    )?;
    Ok(Instance { analytic, numeric })
}

fn score(inst: &Instance, sabotage: bool) -> f64 {
    let mut analytic = inst.analytic.clone();
    if sabotage {
        for g in analytic.iter_mut() {
            *g *= 1.01;
        }
        if let Some(g) = analytic.first_mut() {
            *g += 1e-3;
        }
    }
    max_relative_error(&analytic, &inst.numeric)
}

fn run_group(
    name: &str,
    index: u64,
    cfg: &GradCheckConfig,
    mut make: impl FnMut(&mut ChaCha8Rng, u64) -> Result<Instance>,
) -> Result<OpReport> {
    let mut worst: f64 = 0.0;
    for i in 0..cfg.instances as u64 {
        let mut rng = rng_for(cfg.seed, stream::CHECK, &[index, i]);
        let inst = make(&mut rng, cfg.seed.wrapping_add(i))?;
        let err = score(&inst, cfg.sabotage);
        worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
    }
    Ok(OpReport { name: name.to_string(), instances: cfg.instances, max_rel_error: worst, passed: worst <= cfg.tolerance })
}

/// Runs every check `cfg.instances` times.
pub fn run_grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if cfg.instances == 0 {
        return Err(Error::Parameter("need at least one instance per check".into()));
    }
    let eps = cfg.eps;
    let mut ops = Vec::new();
    let mut index = 0u64;
    for name in OP_NAMES {
        ops.push(run_group(name, index, cfg, |rng, _| {
            let (inputs, build) = op_case(name, rng);
            tape_instance(inputs, build, eps)
        })?);
        index += 1;
    }
    for name in LOSS_NAMES {
        ops.push(run_group(&format!("loss:{name}"), index, cfg, |rng, _| {
            let (inputs, build) = loss_case(name, rng);
            tape_instance(inputs, build, eps)
        })?);
        index += 1;
    }
    ops.push(run_group("encoder", index, cfg, |rng, seed| encoder_instance(rng, seed, eps))?);
    index += 1;
    for mode in [LossMode::Msd, LossMode::Onehot, LossMode::End2end] {
        ops.push(run_group(&format!("model_step:{mode}"), index, cfg, |rng, seed| model_instance(rng, seed, mode, eps))?);
        index += 1;
    }
    let passed = ops.iter().all(|o| o.passed);
    Ok(GradCheckReport { ops, passed })
}
