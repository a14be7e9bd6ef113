use approx::assert_relative_eq;
use mmlab::harness::run::init_net;
use mmlab::ndcore::Tensor;
use mmlab::synthdata::{gen_shortcut_bimodal, BimodalDataset, GeneratorSpec};
use mmlab::trainers::{epoch_seed, sgd_step, Algorithm, RunStatus, Schedule, StepKind, TrainConfig, TrainState};

fn data(n: usize) -> BimodalDataset {
    gen_shortcut_bimodal(&GeneratorSpec {
        n_train: n,
        n_val: 32,
        n_test: 32,
        size: 8,
        ..Default::default()
    })
    .unwrap()
}

fn config(algorithm: Algorithm) -> TrainConfig {
    TrainConfig {
        algorithm,
        batch_size: 32,
        epochs: 3,
        stop_at_full_train_acc: false,
        ..Default::default()
    }
}

#[test]
fn momentum_matches_closed_form() {
    // constant gradient g: v_t = g (1 - m^t) / (1 - m), θ_T = θ_0 - lr Σ v_t
    let (lr, m, g) = (0.05, 0.9, 0.3);
    let mut p = vec![Tensor::vector(vec![2.0, -1.0])];
    let mut v = vec![Tensor::zeros(&[2])];
    let grad = vec![Tensor::vector(vec![g, -g])];
    let steps = 25;
    for _ in 0..steps {
        sgd_step(&mut p, &mut v, &grad, lr, m, 0.0).unwrap();
    }
    let sum_v: f64 = (1..=steps).map(|t| g * (1.0 - m.powi(t)) / (1.0 - m)).sum();
    assert_relative_eq!(p[0].data()[0], 2.0 - lr * sum_v, epsilon = 1e-12);
    assert_relative_eq!(p[0].data()[1], -1.0 + lr * sum_v, epsilon = 1e-12);
    assert_relative_eq!(v[0].data()[0], g * (1.0 - m.powi(steps)) / (1.0 - m), epsilon = 1e-12);
}

#[test]
fn l1_term_shrinks_toward_zero() {
    let mut p = vec![Tensor::vector(vec![0.5, -0.5, 0.0])];
    let mut v = vec![Tensor::zeros(&[3])];
    let total = sgd_step(&mut p, &mut v, &[Tensor::zeros(&[3])], 0.1, 0.0, 0.01).unwrap();
    assert_eq!(total[0].data(), &[0.01, -0.01, 0.0]);
    assert_relative_eq!(p[0].data()[0], 0.499, epsilon = 1e-15);
    assert_relative_eq!(p[0].data()[1], -0.499, epsilon = 1e-15);
    assert_eq!(p[0].data()[2], 0.0);
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let ds = data(64);
    let net = init_net(&ds, None, 1).unwrap();
    let cfg = TrainConfig {
        lr: 0.0,
        ..config(Algorithm::Vanilla)
    };
    let mut st = TrainState::new(net.clone(), cfg).unwrap();
    let (x0, x1, y) = ds.train.gather(&(0..32).collect::<Vec<_>>());
    let out = st.step(&x0, &x1, &y, StepKind::Regular).unwrap();
    assert!(out.loss > 0.0);
    assert_eq!(st.net.params.tensors(), net.params.tensors());
}

#[test]
fn one_batch_epoch_accumulates_once() {
    let ds = data(32);
    let mut st = TrainState::new(init_net(&ds, None, 2).unwrap(), config(Algorithm::Guided)).unwrap();
    st.run_epoch(&ds.train, &ds.val, None).unwrap();
    assert_eq!(st.accumulator.steps, 1);
    assert_eq!(st.steps, 1);
    assert_eq!(st.history[0].kinds, [1, 0, 0]);
}

#[test]
fn infinite_alpha_reproduces_vanilla() {
    let ds = data(96);
    let net = init_net(&ds, None, 3).unwrap();
    let mut a = TrainState::new(net.clone(), config(Algorithm::Vanilla)).unwrap();
    let mut b = TrainState::new(
        net,
        TrainConfig {
            alpha: f64::INFINITY,
            ..config(Algorithm::Guided)
        },
    )
    .unwrap();
    a.run(&ds.train, &ds.val).unwrap();
    b.run(&ds.train, &ds.val).unwrap();
    assert_eq!(a.net, b.net);
    assert_eq!(a.velocity, b.velocity);
    assert_eq!(a.history, b.history);
    assert_eq!(b.kind_counts[1] + b.kind_counts[2], 0);
}

#[test]
fn guided_window_trace() {
    let mut s = Schedule::Guided {
        window: 4,
        alpha: 0.1,
        q: 4,
        last_diff: None,
    };
    // warm-up is all regular and ignores the speeds
    for _ in 0..5 {
        assert_eq!(s.next_kind(true), StepKind::Regular);
        s.after_regular(Some(3.0), true);
    }
    // the speed gap seen at each regular step
    let mut diffs = [0.5, -0.5, 0.05, 0.05].into_iter();
    let mut trace = Vec::new();
    while trace.len() < 10 {
        let k = s.next_kind(false);
        if k == StepKind::Regular {
            s.after_regular(diffs.next(), false);
        }
        trace.push(k);
    }
    use StepKind::*;
    // a small gap opens no window
    let want = [
        Regular,
        RebalanceM0,
        RebalanceM0,
        RebalanceM0, //
        Regular,
        RebalanceM1,
        RebalanceM1,
        RebalanceM1, //
        Regular,
        Regular,
    ];
    assert_eq!(trace, want);
}

#[test]
fn random_schedule_is_uniform() {
    let mut s = Schedule::for_config(&TrainConfig {
        seed: 9,
        ..config(Algorithm::Random)
    });
    let mut counts = [0usize; 3];
    let n = 6000;
    for _ in 0..n {
        counts[s.next_kind(false).index()] += 1;
    }
    for c in counts {
        let f = c as f64 / n as f64;
        assert!((f - 1.0 / 3.0).abs() < 0.03, "{counts:?}");
    }
    let mut t = Schedule::for_config(&TrainConfig {
        seed: 9,
        ..config(Algorithm::Random)
    });
    let mut u = t.clone();
    for _ in 0..50 {
        assert_eq!(t.next_kind(false), u.next_kind(false));
    }
}

#[test]
fn scripted_schedule_drives_steps() {
    let ds = data(128);
    let mut st = TrainState::new(init_net(&ds, None, 4).unwrap(), config(Algorithm::Vanilla)).unwrap();
    st.run_epoch(&ds.train, &ds.val, None).unwrap();
    st.schedule = Schedule::Scripted {
        kinds: vec![StepKind::RebalanceM1, StepKind::Regular, StepKind::RebalanceM0],
        pos: 0,
    };
    let before = st.accumulator.steps;
    st.run_epoch(&ds.train, &ds.val, None).unwrap();
    assert_eq!(st.history[1].kinds, [1, 1, 2]);
    assert_eq!(st.accumulator.steps, before + 1);
}

#[test]
fn speed_log_has_one_line_per_regular_step() {
    let ds = data(128);
    let mut st = TrainState::new(init_net(&ds, None, 5).unwrap(), config(Algorithm::Guided)).unwrap();
    let mut log = Vec::new();
    st.run_epoch(&ds.train, &ds.val, Some(&mut log)).unwrap();
    st.run_epoch(&ds.train, &ds.val, Some(&mut log)).unwrap();
    let lines = String::from_utf8(log).unwrap().lines().count() as u64;
    assert_eq!(lines, st.kind_counts[0]);
    assert_eq!(st.accumulator.steps, st.kind_counts[0]);
}

#[test]
fn divergence_marks_the_run_failed() {
    let ds = data(64);
    let cfg = TrainConfig {
        lr: 1e200,
        ..config(Algorithm::Vanilla)
    };
    let mut st = TrainState::new(init_net(&ds, None, 6).unwrap(), cfg).unwrap();
    st.run(&ds.train, &ds.val).unwrap();
    assert!(matches!(st.status, RunStatus::Failed(_)), "{:?}", st.status);
}

#[test]
fn invalid_configs_are_rejected() {
    let ds = data(32);
    let net = init_net(&ds, None, 7).unwrap();
    for cfg in [
        TrainConfig {
            lr: -1.0,
            ..Default::default()
        },
        TrainConfig {
            momentum: 1.0,
            ..Default::default()
        },
        TrainConfig {
            batch_size: 0,
            ..Default::default()
        },
        TrainConfig {
            q: 0,
            ..Default::default()
        },
        TrainConfig {
            alpha: 0.0,
            ..Default::default()
        },
        TrainConfig {
            lambda: f64::NAN,
            ..Default::default()
        },
    ] {
        assert!(TrainState::new(net.clone(), cfg).is_err());
    }
}

#[test]
fn epoch_seeds_differ_by_epoch_not_algorithm() {
    let a: Vec<u64> = (0..10).map(|e| epoch_seed(3, e)).collect();
    let mut b = a.clone();
    b.sort();
    b.dedup();
    assert_eq!(a.len(), b.len());
    assert_ne!(epoch_seed(3, 0), epoch_seed(4, 0));
}
