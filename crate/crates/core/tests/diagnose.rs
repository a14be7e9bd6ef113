use approx::assert_relative_eq;
use mmlab::diagnose::{accuracies, accuracy, sparsity_fraction, sparsity_of, utilization, utilization_from, HBar, HBarSource, Variant};
use mmlab::fusion::FusionMode;
use mmlab::model::{predict, MultiModalNet, NetSpec, Phase};
use mmlab::ndcore::{Graph, Rng, Tensor};
use mmlab::synthdata::{gen_shortcut_bimodal, BimodalDataset, GeneratorSpec};

fn data(n: usize) -> BimodalDataset {
    gen_shortcut_bimodal(&GeneratorSpec {
        n_train: n,
        n_val: 20,
        n_test: 60,
        size: 8,
        ..Default::default()
    })
    .unwrap()
}

fn trained_net(ds: &BimodalDataset, seed: u64) -> MultiModalNet {
    // a few warm-up forwards give nontrivial running norms and gate means
    let mut net = MultiModalNet::new(NetSpec::desk_default(3, 1, 8, 10), &mut Rng::new(seed)).unwrap();
    for start in [0, 32] {
        let idx: Vec<usize> = (start..start + 32).collect();
        let (x0, x1, _) = ds.train.gather(&idx);
        let mut g = Graph::new();
        let out = net
            .forward(&mut g, Some(&x0), Some(&x1), FusionMode::Regular, Phase::Train)
            .unwrap();
        net.update_fusion_stats(&out.traces);
        net.apply_norm_updates(&out.norm_updates);
    }
    net
}

#[test]
fn recomputed_h_bar_matches_per_sample_mean() {
    let ds = data(300);
    let net = trained_net(&ds, 1);
    let hb = HBar::recompute(&net, &ds.train).unwrap();
    assert_eq!(hb.source, HBarSource::Recomputed);
    let mut sums: Vec<(Vec<f64>, Vec<f64>)> = net.fusions.iter().map(|(_, m)| (vec![0.0; m.c0], vec![0.0; m.c1])).collect();
    for i in 0..ds.train.len() {
        let (x0, x1, _) = ds.train.gather(&[i]);
        let mut g = Graph::new();
        let out = net.forward(&mut g, Some(&x0), Some(&x1), FusionMode::Regular, Phase::Eval).unwrap();
        for ((s0, s1), t) in sums.iter_mut().zip(&out.traces) {
            for (a, b) in s0.iter_mut().zip(t.h0.as_ref().unwrap().data()) {
                *a += b;
            }
            for (a, b) in s1.iter_mut().zip(t.h1.as_ref().unwrap().data()) {
                *a += b;
            }
        }
    }
    for ((m0, m1), (s0, s1)) in hb.means().into_iter().zip(&sums) {
        for (a, b) in m0.unwrap().iter().zip(s0) {
            assert_relative_eq!(*a, b / 300.0, epsilon = 1e-12);
        }
        for (a, b) in m1.unwrap().iter().zip(s1) {
            assert_relative_eq!(*a, b / 300.0, epsilon = 1e-12);
        }
    }
    let empty = ds.train.gather(&[]);
    assert!(empty.2.is_empty());
}

#[test]
fn accuracy_matches_enumeration() {
    let ds = data(64);
    let net = HBar::recompute(&trained_net(&ds, 2), &ds.train)
        .unwrap()
        .install(&trained_net(&ds, 2));
    let mut correct = [0usize; 5];
    for i in 0..ds.test.len() {
        let (x0, x1, y) = ds.test.gather(&[i]);
        let mut g = Graph::new();
        let r = net.forward(&mut g, Some(&x0), Some(&x1), FusionMode::Regular, Phase::Eval).unwrap();
        let mut g = Graph::new();
        let m0 = net.forward(&mut g, Some(&x0), None, FusionMode::MarginalM0, Phase::Eval).unwrap();
        let mut g = Graph::new();
        let m1 = net.forward(&mut g, None, Some(&x1), FusionMode::MarginalM1, Phase::Eval).unwrap();
        let preds = [
            predict(r.probs.unwrap().data()),
            predict(r.probs0.unwrap().data()),
            predict(m0.probs0.unwrap().data()),
            predict(r.probs1.unwrap().data()),
            predict(m1.probs1.unwrap().data()),
        ];
        for (c, p) in correct.iter_mut().zip(preds) {
            *c += (p == y[0]) as usize;
        }
    }
    let variants = [Variant::F, Variant::F0, Variant::F0Marginal, Variant::F1, Variant::F1Marginal];
    let got = accuracies(&net, &variants, &ds.test).unwrap();
    for (g, c) in got.iter().zip(correct) {
        assert_eq!(*g, c as f64 / ds.test.len() as f64);
    }
    assert_eq!(accuracy(&net, Variant::F1, &ds.test).unwrap(), got[3]);
}

#[test]
fn utilization_arithmetic() {
    let (u01, u10, d) = utilization_from(0.8, 0.4, 0.5, 0.5).unwrap();
    assert_eq!((u01, u10), (0.0, 0.5));
    assert_eq!(d, 0.5);
    // u(depth|RGB) = 0.63, u(RGB|depth) = 0.01
    let (u01, u10, d) = utilization_from(1.0, 0.37, 1.0, 0.99).unwrap();
    assert_relative_eq!(u10, 0.63, epsilon = 1e-12);
    assert_relative_eq!(u01, 0.01, epsilon = 1e-12);
    assert_relative_eq!(d, 0.62, epsilon = 1e-12);
    assert!(matches!(
        utilization_from(0.0, 0.0, 0.5, 0.5),
        Err(mmlab::Error::UtilizationUndefined("f0"))
    ));
    assert!(matches!(
        utilization_from(0.5, 0.5, 0.0, 0.1),
        Err(mmlab::Error::UtilizationUndefined("f1"))
    ));
    let (u01, _, _) = utilization_from(0.5, 0.5, 0.4, 0.8).unwrap();
    assert!(u01 < -0.99);
}

#[test]
fn input_independent_gates_give_zero_utilization() {
    let ds = data(64);
    let mut net = trained_net(&ds, 3);
    for (_, m) in &net.fusions.clone() {
        let w = net.params.get_mut(m.slots.w_joint);
        *w = Tensor::zeros(w.shape());
    }
    let hb = HBar::recompute(&net, &ds.train).unwrap();
    let r = utilization(&net, &ds.test, &hb).unwrap();
    if r.a_f0 > 0.0 && r.a_f1 > 0.0 {
        assert_eq!(r.a_f0, r.a_f0_marginal);
        assert_eq!(r.a_f1, r.a_f1_marginal);
        assert_eq!((r.u_m0_given_m1, r.u_m1_given_m0, r.diff_util), (0.0, 0.0, 0.0));
        assert!(!r.marginal_exceeds_full);
    }
}

#[test]
fn mirroring_negates_diff_util() {
    let ds = data(96);
    let net = trained_net(&ds, 4);
    let r = utilization(&net, &ds.test, &HBar::recompute(&net, &ds.train).unwrap()).unwrap();
    let (m, sw) = (net.mirrored(), ds.swapped());
    let s = utilization(&m, &sw.test, &HBar::recompute(&m, &sw.train).unwrap()).unwrap();
    assert_eq!(s.a_f0, r.a_f1);
    assert_eq!(s.a_f0_marginal, r.a_f1_marginal);
    assert_eq!(s.u_m0_given_m1, r.u_m1_given_m0);
    assert_eq!(s.diff_util, -r.diff_util);
}

#[test]
fn running_h_bar_reads_training_statistics() {
    let ds = data(64);
    let net = trained_net(&ds, 5);
    let hb = HBar::running(&net);
    assert_eq!(hb.source, HBarSource::Running);
    assert_eq!(hb.install(&net), net);
    let r = utilization(&net, &ds.test, &hb).unwrap();
    assert_eq!(r.h_bar_source, HBarSource::Running);
    assert!(r.diff_util.is_finite());
}

#[test]
fn sparsity_counts_tiny_magnitudes() {
    let t = Tensor::vector(vec![0.0, 5e-8, -5e-8, 1e-7, 0.3]);
    assert_relative_eq!(sparsity_of([&t]), 0.6, epsilon = 1e-15);
    let ds = data(64);
    let mut net = trained_net(&ds, 6);
    let count = |net: &MultiModalNet| {
        let all: Vec<f64> = net.params.entries().iter().flat_map(|e| e.value.data().to_vec()).collect();
        all.iter().filter(|v| v.abs() < 1e-7).count() as f64 / all.len() as f64
    };
    let before = sparsity_fraction(&net);
    assert_eq!(before, count(&net));
    assert!(before < 0.5);
    {
        let e = &mut net.params.entries_mut()[0];
        e.value = Tensor::zeros(e.value.shape());
    }
    assert!(sparsity_fraction(&net) > before);
    assert_eq!(sparsity_fraction(&net), count(&net));
}
