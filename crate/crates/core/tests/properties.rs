mod common;

use common::{brute_auc, brute_recall, geometric_decay_deviation, queue_matches_model, rng, tie_prone_matrix, unit_rows};
use msd_core::encoder::EncoderParams;
use msd_core::eval::{auc_roc, recall_at_k, zero_shot_classify};
use msd_core::losses::{
    end2end_loss, infonce_uni, msd_loss, msd_targets, onehot_multi_loss, student_log_probs, total_loss,
};
use msd_core::momentum::{ema_update, MomentumPair};
use msd_core::tensor::{kl_divergence, scaled_softmax_rows};
use msd_core::{Tape, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn flat(params: &EncoderParams) -> Vec<f64> {
    params.tensors().iter().flat_map(|t| t.data().iter().copied()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..12, tau in 0.01f64..2.0) {
        let mut r = rng(seed);
        let bound = 50.0 / tau;
        let data = (0..rows * cols).map(|_| r.random_range(-bound..=bound)).collect();
        let p = scaled_softmax_rows(&Tensor::matrix(rows, cols, data).unwrap(), tau).unwrap();
        for i in 0..rows {
            prop_assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn kl_of_distribution_with_itself_is_zero(seed in any::<u64>(), rows in 1usize..5, cols in 1usize..10) {
        let mut r = rng(seed);
        let logits = Tensor::matrix(rows, cols, (0..rows * cols).map(|_| r.random_range(-5.0..5.0)).collect()).unwrap();
        let p = logits.softmax_rows().unwrap();
        let log_p = logits.log_softmax_rows().unwrap();
        prop_assert!(kl_divergence(&p, &log_p).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn backward_calls_accumulate(seed in any::<u64>(), n in 1usize..8) {
        let mut r = rng(seed);
        let x = Tensor::matrix(1, n, (0..n).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap();
        let losses = |tape: &mut Tape, w| {
            let e = tape.exp(w).unwrap();
            let l1 = tape.mean(e).unwrap();
            let t = tape.tanh(w).unwrap();
            let sq = tape.mul(t, w).unwrap();
            let l2 = tape.sum(sq).unwrap();
            (l1, l2)
        };
        let mut split = Tape::new();
        let w = split.leaf(x.clone());
        let (l1, l2) = losses(&mut split, w);
        split.backward(l1).unwrap();
        split.backward(l2).unwrap();
        let mut joint = Tape::new();
        let w2 = joint.leaf(x);
        let (l1, l2) = losses(&mut joint, w2);
        let total = joint.add(l1, l2).unwrap();
        joint.backward(total).unwrap();
        for (a, b) in split.grad(w).unwrap().data().iter().zip(joint.grad(w2).unwrap().data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn encoder_outputs_are_unit_norm(seed in any::<u64>(), rows in 1usize..10, depth in 0usize..3) {
        let mut dims = vec![5];
        dims.extend(std::iter::repeat_n(7, depth));
        let enc = EncoderParams::init(seed, &dims, 3).unwrap();
        let mut r = rng(seed);
        let x = Tensor::matrix(rows, 5, (0..rows * 5).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap();
        for n in enc.encode_detached(&x).unwrap().row_norms().unwrap() {
            prop_assert!((n - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn ema_is_an_exact_contraction(seed in any::<u64>(), m in 0.0f64..=1.0) {
        let query = EncoderParams::init(seed, &[4, 6], 3).unwrap();
        let mut key = EncoderParams::init(seed.wrapping_add(1), &[4, 6], 3).unwrap();
        let before = flat(&key);
        ema_update(&mut key, &query, m).unwrap();
        for ((&k0, &k1), &q) in before.iter().zip(&flat(&key)).zip(&flat(&query)) {
            prop_assert!(((k1 - q).abs() - m * (k0 - q).abs()).abs() <= 4.0 * f64::EPSILON * (k0.abs() + q.abs()));
        }
    }

    #[test]
    fn ema_decays_geometrically(seed in any::<u64>(), m in 0.9f64..0.999, k in 1i32..100) {
        let query = EncoderParams::init(seed, &[4, 6], 3).unwrap();
        let start = EncoderParams::init(seed.wrapping_add(1), &[4, 6], 3).unwrap();
        let mut pair = MomentumPair { query, key: start.clone() };
        for _ in 0..k {
            pair.ema_update(m).unwrap();
        }
        prop_assert!(geometric_decay_deviation(&flat(&start), &flat(&pair.key), &flat(&pair.query), m, k) <= 1e-9);
    }

    #[test]
    fn queue_agrees_with_list_model(seed in any::<u64>(), capacity in prop::sample::select(vec![1usize, 3, 4, 17, 64])) {
        prop_assert_eq!(queue_matches_model(seed, capacity, 24), Ok(()));
    }

    #[test]
    fn losses_are_non_negative_and_finite(seed in any::<u64>(), b in 2usize..6, extra in 0usize..6, tau in 0.01f64..1.0) {
        let mut r = rng(seed);
        let k = b + extra;
        let queries = unit_rows(&mut r, b, 4);
        let keys = unit_rows(&mut r, k, 4);
        let momentum = unit_rows(&mut r, b, 4);
        let pos: Vec<usize> = (0..b).collect();
        let mut tape = Tape::new();
        let q = tape.leaf(queries.clone());
        let t = tape.leaf(Tensor::scalar(tau));
        let uni = infonce_uni(&mut tape, q, &pos, &keys, t).unwrap();
        let one = onehot_multi_loss(&mut tape, q, &pos, &keys, t).unwrap();
        let (q2k, k2k) = msd_targets(&momentum, &pos, &keys, tau).unwrap();
        let student = student_log_probs(&mut tape, q, &keys, t).unwrap();
        let msd = msd_loss(&mut tape, student, &q2k, &k2k, 0.3, 0.7).unwrap();
        let text = tape.leaf(keys.select_rows(&pos).unwrap());
        let e2e = end2end_loss(&mut tape, q, text, t).unwrap();
        let total = total_loss(&mut tape, uni, msd, 1.0, 10.0).unwrap();
        for v in [uni, one, msd, e2e, total] {
            let x = tape.value(v).item().unwrap();
            prop_assert!(x.is_finite() && x >= -1e-12, "{}", x);
        }
    }

    #[test]
    fn scaling_both_weights_leaves_total_unchanged(uni in 0.0f64..10.0, multi in 0.0f64..10.0, wu in 0.01f64..5.0, wm in 0.01f64..20.0, c in 0.01f64..100.0) {
        let mut tape = Tape::new();
        let u = tape.leaf(Tensor::scalar(uni));
        let m = tape.leaf(Tensor::scalar(multi));
        let a = total_loss(&mut tape, u, m, wu, wm).unwrap();
        let b = total_loss(&mut tape, u, m, c * wu, c * wm).unwrap();
        prop_assert!((tape.value(a).item().unwrap() - tape.value(b).item().unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn recall_is_monotone_in_k(seed in any::<u64>(), n in 1usize..16, d in 1usize..4) {
        let mut r = rng(seed);
        let q = tie_prone_matrix(&mut r, n, d);
        let g = tie_prone_matrix(&mut r, n, d);
        let mut prev = 0.0;
        for k in 1..=n {
            let v = recall_at_k(&q, &g, k).unwrap();
            prop_assert!(v >= prev);
            prev = v;
        }
        prop_assert_eq!(prev, 1.0);
    }

    #[test]
    fn metrics_match_brute_force(seed in any::<u64>(), n in 2usize..=16) {
        let mut r = rng(seed);
        let q = tie_prone_matrix(&mut r, n, 2);
        let g = tie_prone_matrix(&mut r, n, 2);
        let k = r.random_range(1..=n);
        prop_assert_eq!(recall_at_k(&q, &g, k).unwrap(), brute_recall(&q, &g, k));
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(0..4) as f64).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| r.random_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        prop_assert_eq!(auc_roc(&scores, &labels).unwrap(), brute_auc(&scores, &labels));
    }

    #[test]
    fn auc_survives_increasing_maps(seed in any::<u64>(), n in 2usize..40, a in 0.01f64..10.0, b in -5.0f64..5.0) {
        let mut r = rng(seed);
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..3.0)).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| r.random_bool(0.4)).collect();
        labels[0] = true;
        labels[n - 1] = false;
        let base = auc_roc(&scores, &labels).unwrap();
        let exp: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
        let affine: Vec<f64> = scores.iter().map(|s| a * s + b).collect();
        prop_assert!((auc_roc(&exp, &labels).unwrap() - base).abs() <= 1e-12);
        prop_assert!((auc_roc(&affine, &labels).unwrap() - base).abs() <= 1e-12);
    }

    #[test]
    fn zero_shot_ignores_positive_rescaling(seed in any::<u64>(), n in 4usize..30, c in 2usize..5, scale in 0.01f64..100.0) {
        let mut r = rng(seed);
        let emb = unit_rows(&mut r, n, 3);
        let anchors = unit_rows(&mut r, c, 3);
        let mut labels: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
        labels[..c].iter_mut().enumerate().for_each(|(i, l)| *l = i);
        let base = zero_shot_classify(&emb, &anchors, &labels).unwrap();
        let scaled = zero_shot_classify(&emb, &anchors.scale(scale).unwrap(), &labels).unwrap();
        prop_assert_eq!(base.accuracy, scaled.accuracy);
    }
}
