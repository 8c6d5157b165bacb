mod common;

use common::*;
use proptest::prelude::*;

use gradprom::engine::{
    adam_update, combine_gradients, combine_gradients_multi, compute_task_gradients, cosine_similarity, descent_check,
    joint_direction, read_step_records, train_epoch, train_step, warmup_and_pretrain, GateMode, OptimConfig, Strategy,
    StrategyConfig, Supervision, TrainState, DESCENT_TOLERANCE,
};
use gradprom::synthdata::AugmentConfig;

fn vec_strategy(n: usize) -> impl proptest::strategy::Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn gate_decision_ignores_positive_rescaling(
        a in vec_strategy(16), b in vec_strategy(16), ca in 1e-3f64..1e3, cb in 1e-3f64..1e3,
    ) {
        let (_, o) = combine_gradients(&a, &b, 0.5, GateMode::Hard).unwrap();
        let sa: Vec<f64> = a.iter().map(|v| v * ca).collect();
        let sb: Vec<f64> = b.iter().map(|v| v * cb).collect();
        let (_, o2) = combine_gradients(&sa, &sb, 0.5, GateMode::Hard).unwrap();
        prop_assume!(o.cosine.abs() > 1e-9);
        prop_assert_eq!(o.open, o2.open);
        prop_assert!((o.cosine - o2.cosine).abs() < 1e-9);
    }

    #[test]
    fn hard_gate_is_exact(a in vec_strategy(16), b in vec_strategy(16), lambda in 0.0f64..2.0) {
        let (d, o) = combine_gradients(&a, &b, lambda, GateMode::Hard).unwrap();
        if o.open {
            let expected: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + lambda * y).collect();
            prop_assert_eq!(bits(&d), bits(&expected));
        } else {
            prop_assert_eq!(bits(&d), bits(&a));
        }
        prop_assert!(descent_check(&d, &a).unwrap() >= -DESCENT_TOLERANCE);
    }

    #[test]
    fn multi_gate_is_per_auxiliary(a in vec_strategy(8), b in vec_strategy(8), c in vec_strategy(8)) {
        let (d, outs) = combine_gradients_multi(&a, &[&b, &c], 1.0, GateMode::Hard).unwrap();
        let mut expected = a.clone();
        for (g, o) in [&b, &c].into_iter().zip(&outs) {
            prop_assert_eq!(o.open, cosine_similarity(&a, g).unwrap() >= 0.0);
            if o.open {
                expected.iter_mut().zip(g.iter()).for_each(|(e, v)| *e += v);
            }
        }
        prop_assert_eq!(bits(&d), bits(&expected));
    }
}

#[test]
fn cosine_scaled_matches_formula_on_1000_pairs() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
    let mut closed = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..64);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lambda = rng.random_range(0.0..2.0);
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        let s = dot / (na * nb);
        closed += usize::from(s < 0.0);
        let (d, _) = combine_gradients(&a, &b, lambda, GateMode::CosineScaled).unwrap();
        for i in 0..n {
            let expected = a[i] + lambda * b[i] * s.max(0.0);
            assert!((d[i] - expected).abs() <= 1e-12, "{} vs {expected}", d[i]);
        }
    }
    assert!(closed > 100 && closed < 900);
}

#[test]
fn degenerate_gradients_count_as_aligned() {
    let zero = [0.0; 4];
    let g = [1.0, -2.0, 0.5, 0.0];
    let (d, o) = combine_gradients(&zero, &g, 1.0, GateMode::Hard).unwrap();
    assert_eq!((o.cosine, o.open), (0.0, true));
    assert_eq!(&d[..], &g[..]);
    assert!(combine_gradients(&g, &g[..3], 1.0, GateMode::Hard).is_err());
    assert!(combine_gradients(&g, &g, -1.0, GateMode::Hard).is_err());
}

#[test]
fn decomposition_matches_single_backward_on_20_pairs() {
    let data = samples(3, 40, 0.2);
    let mut worst: f64 = 0.0;
    for pair in 0..20u64 {
        let recs = match pair % 3 {
            0 => vec![classifier()],
            1 => vec![segmenter()],
            _ => vec![classifier(), segmenter()],
        };
        let st = state(100 + pair, &recs);
        let sup = if pair % 2 == 0 {
            Supervision::Supervised
        } else {
            Supervision::Unsupervised
        };
        let lambda = [1e-4, 1e-2, 0.5, 1.0][(pair % 4) as usize];
        let start = (pair as usize * 2) % 36;
        let b = batch(&data[start..start + 4]);
        let err = decomposition_error(&st, &b, &strategy(Strategy::GradProm, sup, lambda));
        worst = worst.max(err);
    }
    assert!(worst < 1e-10, "max rel err {worst:e}");
}

#[test]
fn pixel_gradient_does_not_depend_on_auxiliary_branch() {
    let data = samples(4, 4, 0.2);
    let b = batch(&data);
    let st = state(1, &[classifier(), segmenter()]);
    let alone = compute_task_gradients(&st, &b, &strategy(Strategy::None, Supervision::Supervised, 0.1)).unwrap();
    for sup in [Supervision::Supervised, Supervision::Unsupervised] {
        let with = compute_task_gradients(&st, &b, &strategy(Strategy::GradProm, sup, 0.1)).unwrap();
        assert_eq!(bits(&alone.g_ip), bits(&with.g_ip));
        assert_eq!(with.g_vr_theta.len(), 2);
        for g in &with.g_vr_theta {
            assert!(g.norm() > 0.0);
        }
        assert!(with.g_vr_phi.iter().all(Option::is_some));
    }
    let frozen = compute_task_gradients(&st, &b, &strategy(Strategy::Frozen, Supervision::Supervised, 0.1)).unwrap();
    assert!(frozen.g_vr_phi.iter().all(Option::is_none));
}

#[test]
fn frozen_strategy_keeps_recognizer_fixed() {
    let data = samples(5, 8, 0.2);
    let mut st = state(2, &[classifier()]);
    let phi = st.recognizers[0].phi.clone();
    let theta = st.theta.clone();
    let strat = strategy(Strategy::Frozen, Supervision::Supervised, 0.1);
    train_epoch(
        &mut st,
        &data,
        &strat,
        &OptimConfig::default(),
        AugmentConfig::default(),
    )
    .unwrap();
    assert_eq!(st.recognizers[0].phi, phi);
    assert_ne!(st.theta, theta);
    assert_eq!(st.recognizers[0].adam.t, 0);
}

/// A closed gate applies exactly the enhancer-only Adam step.
#[test]
fn conflict_step_equals_enhancer_only_step() {
    let data = samples(6, 32, 0.3);
    let optim = OptimConfig::default();
    let gated = StrategyConfig {
        update_vr_params: false,
        ..strategy(Strategy::GradProm, Supervision::Supervised, 0.5)
    };
    let mut found = 0;
    for seed in 0..40u64 {
        let st = state(seed, &[classifier()]);
        let b = batch(&data[(seed as usize % 8) * 4..(seed as usize % 8) * 4 + 4]);
        let mut a = st.clone();
        let rec = train_step(&mut a, &b, &gated, &optim).unwrap();
        if rec.gate_open {
            continue;
        }
        found += 1;
        let mut plain = st.clone();
        train_step(
            &mut plain,
            &b,
            &strategy(Strategy::None, Supervision::Supervised, 0.5),
            &optim,
        )
        .unwrap();
        assert_eq!(bits(&a.theta.flatten_values()), bits(&plain.theta.flatten_values()));
        assert_eq!(a.theta_adam, plain.theta_adam);
        let g = compute_task_gradients(&st, &b, &gated).unwrap();
        let (theta, _) = adam_update(&st.theta, &g.g_ip, &st.theta_adam, &optim).unwrap();
        assert_eq!(theta, a.theta);
    }
    assert!(found > 0, "no conflicting step found");
}

#[test]
fn warmup_and_pretrain_touch_only_their_models() {
    let data = samples(7, 8, 0.2);
    let optim = OptimConfig::default();
    let base = state(3, &[classifier()]);

    let mut st = base.clone();
    let pretrain_only = StrategyConfig {
        warmup_epochs: 0,
        vr_pretrain_epochs: 2,
        ..strategy(Strategy::GradProm, Supervision::Supervised, 0.1)
    };
    let records = warmup_and_pretrain(&mut st, &data, &pretrain_only, &optim, AugmentConfig::default()).unwrap();
    assert!(records.is_empty());
    assert_eq!(st.theta, base.theta);
    assert_ne!(st.recognizers[0].phi, base.recognizers[0].phi);
    assert_eq!((st.step, st.epoch), (0, 0));

    let mut st = base.clone();
    let warmup_only = StrategyConfig {
        warmup_epochs: 2,
        vr_pretrain_epochs: 0,
        ..pretrain_only
    };
    let records = warmup_and_pretrain(&mut st, &data, &warmup_only, &optim, AugmentConfig::default()).unwrap();
    assert_eq!(records.len(), 2);
    assert!(records.iter().all(|r| !r.gate_open && r.loss_vr == 0.0));
    assert_eq!(st.recognizers[0].phi, base.recognizers[0].phi);
    assert_ne!(st.theta, base.theta);
    assert_eq!((st.step, st.epoch), (2, 2));

    let mut st = base.clone();
    let nothing = StrategyConfig {
        warmup_epochs: 0,
        vr_pretrain_epochs: 0,
        ..pretrain_only
    };
    warmup_and_pretrain(&mut st, &data, &nothing, &optim, AugmentConfig::default()).unwrap();
    assert_eq!(st, base);
}

fn trajectory(
    mut st: TrainState,
    data: &[gradprom::synthdata::Sample],
    strat: &StrategyConfig,
    epochs: usize,
) -> (TrainState, Vec<gradprom::engine::StepRecord>) {
    let mut records = Vec::new();
    for _ in 0..epochs {
        records.extend(train_epoch(&mut st, data, strat, &OptimConfig::default(), AugmentConfig::default()).unwrap());
    }
    (st, records)
}

#[test]
fn zero_lambda_reproduces_enhancer_only_training() {
    let data = samples(8, 16, 0.3);
    for sup in [Supervision::Supervised, Supervision::Unsupervised] {
        let (plain, _) = trajectory(state(4, &[classifier()]), &data, &strategy(Strategy::None, sup, 0.0), 3);
        let (gated, recs) = trajectory(
            state(4, &[classifier()]),
            &data,
            &strategy(Strategy::GradProm, sup, 0.0),
            3,
        );
        assert_eq!(bits(&plain.theta.flatten_values()), bits(&gated.theta.flatten_values()));
        assert_eq!(recs.len(), 6);
    }
}

#[test]
fn all_open_gated_run_reproduces_joint_training() {
    let data = samples(9, 8, 0.3);
    let gated = strategy(Strategy::GradProm, Supervision::Supervised, 0.5);
    let joint = strategy(Strategy::Joint, Supervision::Supervised, 0.5);
    let mut checked = 0;
    for seed in 0..40u64 {
        let (a, recs) = trajectory(state(seed, &[classifier()]), &data, &gated, 1);
        if !recs.iter().all(|r| r.gate_open) {
            continue;
        }
        let (b, _) = trajectory(state(seed, &[classifier()]), &data, &joint, 1);
        assert_eq!(bits(&a.theta.flatten_values()), bits(&b.theta.flatten_values()));
        assert_eq!(a.recognizers, b.recognizers);
        checked += 1;
    }
    assert!(checked > 0, "no all-open run found");
}

#[test]
fn training_is_deterministic_and_records_round_trip() {
    let data = samples(10, 12, 0.2);
    let strat = strategy(Strategy::GradProm, Supervision::Unsupervised, 0.1);
    let (a, ra) = trajectory(state(5, &[segmenter()]), &data, &strat, 2);
    let (b, rb) = trajectory(state(5, &[segmenter()]), &data, &strat, 2);
    assert_eq!(a, b);
    assert_eq!(ra, rb);
    assert_eq!(
        ra.iter().map(|r| r.step).collect::<Vec<_>>(),
        (0..4).collect::<Vec<_>>()
    );
    let mut buf = Vec::new();
    gradprom::engine::write_step_records(&mut buf, &ra).unwrap();
    assert_eq!(read_step_records(&buf[..]).unwrap(), ra);
    for r in &ra {
        assert!(r.inner_product_check >= -DESCENT_TOLERANCE);
        assert_eq!(r.gate_open, r.cosine_s >= 0.0);
    }
}

#[test]
fn joint_direction_matches_open_gate() {
    let a = [0.5, -1.0, 2.0];
    let b = [0.25, -0.5, 1.0];
    let (d, _) = combine_gradients_multi(&a, &[&b, &b], 0.3, GateMode::Hard).unwrap();
    let j = joint_direction(&a, &[&b, &b], 0.3).unwrap();
    assert_eq!(bits(&d), bits(&j));
}
