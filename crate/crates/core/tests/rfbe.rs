use msd_core::losses::{LossConfig, LossMode};
use msd_core::model::{peak_tracked_activations, ActivationLedger};
use msd_core::rfbe::{
    check_equivalence, divisors, equivalence_fixture, prepare_keys, run_monolithic_step, run_rfbe_step,
    EquivalenceConfig, RfbePlan,
};
use msd_core::tensor::max_relative_error;

fn cfg(mode: LossMode) -> LossConfig {
    LossConfig { mode, ..Default::default() }
}

#[test]
fn accumulated_gradients_match_monolithic_at_64() {
    for mode in [LossMode::Msd, LossMode::Onehot] {
        let report = check_equivalence(&EquivalenceConfig {
            primary: 64,
            sub_batches: vec![8, 16, 32],
            mode,
            seed: 5,
            ..Default::default()
        })
        .unwrap();
        for row in &report.rows {
            assert!(row.max_rel_grad_dev <= 1e-9 && row.loss_dev <= 1e-12, "{mode}: {row:?}");
        }
    }
}

#[test]
fn per_coordinate_bound_holds_for_every_divisor_of_16() {
    let loss_cfg = cfg(LossMode::Msd);
    let (model, batch, queues) = equivalence_fixture(11, 16, 64).unwrap();
    let mono = run_monolithic_step(&batch, &model, &mut queues.clone(), &loss_cfg).unwrap();
    for b in divisors(16) {
        let acc = run_rfbe_step(&batch, &RfbePlan::new(16, b).unwrap(), &model, &mut queues.clone(), &loss_cfg).unwrap();
        for (g, m) in acc.grads.flatten().iter().zip(mono.grads.flatten()) {
            assert!((g - m).abs() <= 1e-9 * (1.0 + m.abs()), "b = {b}: {g} vs {m}");
        }
    }
}

#[test]
fn whole_batch_plan_is_the_monolithic_step() {
    let loss_cfg = cfg(LossMode::Onehot);
    let (model, batch, queues) = equivalence_fixture(2, 12, 48).unwrap();
    let mono = run_monolithic_step(&batch, &model, &mut queues.clone(), &loss_cfg).unwrap();
    let acc = run_rfbe_step(&batch, &RfbePlan::new(12, 12).unwrap(), &model, &mut queues.clone(), &loss_cfg).unwrap();
    assert!(max_relative_error(&acc.grads.flatten(), &mono.grads.flatten()) <= 1e-15);
    assert!((acc.loss.total - mono.loss.total).abs() <= 1e-15);
}

#[test]
fn phase_one_keys_do_not_depend_on_the_plan() {
    let loss_cfg = cfg(LossMode::Msd);
    let (model, batch, queues) = equivalence_fixture(4, 24, 96).unwrap();
    let whole = prepare_keys(&batch, &RfbePlan::new(24, 24).unwrap().sub_batches(), &model, &mut queues.clone(), &loss_cfg)
        .unwrap();
    for b in [1, 3, 8] {
        let split = prepare_keys(&batch, &RfbePlan::new(24, b).unwrap().sub_batches(), &model, &mut queues.clone(), &loss_cfg)
            .unwrap();
        assert_eq!(split.image_keys, whole.image_keys);
        assert_eq!(split.text_keys, whole.text_keys);
        assert_eq!(split.image_momentum_queries, whole.image_momentum_queries);
        assert_eq!(split.image_snapshot, whole.image_snapshot);
    }
}

#[test]
fn weighted_sub_batch_losses_sum_to_full_loss() {
    for mode in [LossMode::Msd, LossMode::Onehot] {
        let loss_cfg = cfg(mode);
        let (model, batch, queues) = equivalence_fixture(9, 20, 80).unwrap();
        let mono = run_monolithic_step(&batch, &model, &mut queues.clone(), &loss_cfg).unwrap();
        // b = 1 is the per-sample average
        for b in [1, 4, 5, 10] {
            let acc = run_rfbe_step(&batch, &RfbePlan::new(20, b).unwrap(), &model, &mut queues.clone(), &loss_cfg).unwrap();
            assert!((acc.loss.total - mono.loss.total).abs() <= 1e-12, "{mode} b = {b}");
            assert!((acc.loss.multi - mono.loss.multi).abs() <= 1e-12);
        }
    }
}

#[test]
fn repeated_steps_are_identical() {
    let loss_cfg = cfg(LossMode::Msd);
    let (model, batch, queues) = equivalence_fixture(1, 16, 64).unwrap();
    let plan = RfbePlan::new(16, 4).unwrap();
    let a = run_rfbe_step(&batch, &plan, &model, &mut queues.clone(), &loss_cfg).unwrap();
    let b = run_rfbe_step(&batch, &plan, &model, &mut queues.clone(), &loss_cfg).unwrap();
    assert_eq!(a.grads, b.grads);
    assert_eq!(a.loss, b.loss);
}

#[test]
fn ledger_peaks() {
    assert_eq!(ActivationLedger::new().peak(), 0);
    let loss_cfg = cfg(LossMode::Msd);
    let peak = |n: usize, b: Option<usize>| {
        let (model, batch, mut queues) = equivalence_fixture(3, n, 512).unwrap();
        let out = match b {
            Some(b) => run_rfbe_step(&batch, &RfbePlan::new(n, b).unwrap(), &model, &mut queues, &loss_cfg),
            None => run_monolithic_step(&batch, &model, &mut queues, &loss_cfg),
        };
        peak_tracked_activations(&out.unwrap().ledger).unwrap() as f64
    };
    let ratio = peak(128, None) / peak(64, None);
    assert!((1.8..=2.2).contains(&ratio), "monolithic growth {ratio}");
    let (small, large) = (peak(64, Some(8)), peak(256, Some(8)));
    assert!((large - small).abs() / small < 0.05, "{small} vs {large}");
    assert!(peak(256, None) >= 6.4 * large);
}

#[test]
fn teachers_carry_no_gradient() {
    let loss_cfg = cfg(LossMode::Msd);
    let (model, batch, queues) = equivalence_fixture(6, 8, 32).unwrap();
    let base = run_monolithic_step(&batch, &model, &mut queues.clone(), &loss_cfg).unwrap();
    let mut perturbed = model.clone();
    perturbed.text.key.proj.weight.data_mut()[0] += 0.05;
    let moved = run_monolithic_step(&batch, &perturbed, &mut queues.clone(), &loss_cfg).unwrap();
    assert_ne!(base.loss.total, moved.loss.total);
    assert_eq!(base.grads.tensors().len(), model.trainable().len());
    assert!(model.trainable_names().iter().all(|n| !n.contains(".key.")));
}
