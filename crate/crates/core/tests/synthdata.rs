#![allow(clippy::needless_range_loop)]

use mmlab::synthdata::{
    batches, gen_duplicated, gen_shortcut_bimodal, load_dataset, palette, save_dataset, DatasetKind, GeneratorSpec, Modality, Split,
};
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn spec(n: usize, p_train: f64, p_test: f64) -> GeneratorSpec {
    GeneratorSpec {
        n_train: n,
        n_val: 50,
        n_test: n,
        size: 8,
        p_train,
        p_test,
        ..Default::default()
    }
}

fn agreement(s: &Split) -> f64 {
    s.labels.iter().zip(&s.colors).filter(|(a, b)| a == b).count() as f64 / s.len() as f64
}

/// Read the tint back out of the pixels: x0 = gray × palette(color).
fn decode_colors(s: &Split, k: usize) -> Vec<usize> {
    let px = s.x1.shape()[2] * s.x1.shape()[3];
    (0..s.len())
        .map(|i| {
            let gray = &s.x1.data()[i * px..(i + 1) * px];
            let j = (0..px).max_by(|&a, &b| gray[a].abs().total_cmp(&gray[b].abs())).unwrap();
            let tint: Vec<f64> = (0..3).map(|c| s.x0.data()[(i * 3 + c) * px + j] / gray[j]).collect();
            (0..k)
                .min_by(|&a, &b| {
                    let d = |c: usize| palette(c, k).iter().zip(&tint).map(|(p, t)| (p - t).powi(2)).sum::<f64>();
                    d(a).total_cmp(&d(b))
                })
                .unwrap()
        })
        .collect()
}

#[test]
fn certain_shortcut_always_agrees() {
    let ds = gen_shortcut_bimodal(&spec(300, 1.0, 1.0)).unwrap();
    assert_eq!(agreement(&ds.train), 1.0);
    assert_eq!(agreement(&ds.test), 1.0);
}

#[test]
fn color_frequency_tracks_p() {
    let n = 4000;
    for (p_train, p_test) in [(0.99, 0.1), (0.6, 0.3)] {
        let ds = gen_shortcut_bimodal(&spec(n, p_train, p_test)).unwrap();
        for (s, p) in [(&ds.train, p_train), (&ds.test, p_test)] {
            let sd = (p * (1.0 - p) / n as f64).sqrt();
            assert!((agreement(s) - p).abs() < 4.0 * sd + 1e-9, "{} vs {p}", agreement(s));
            // the recorded color is what the pixels carry
            assert_eq!(decode_colors(s, 10), s.colors);
        }
    }
}

#[test]
fn chance_level_color_is_uninformative() {
    let n = 5000;
    let ds = gen_shortcut_bimodal(&spec(n, 0.1, 0.1)).unwrap();
    let mut counts = vec![[0usize; 10]; 10];
    for (&y, &c) in ds.train.labels.iter().zip(&ds.train.colors) {
        counts[y][c] += 1;
    }
    // every color equally likely within a class: chi-square against uniform
    let mut chi2 = 0.0;
    for row in &counts {
        let expected = row.iter().sum::<usize>() as f64 / 10.0;
        chi2 += row.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum::<f64>();
    }
    let p = 1.0 - ChiSquared::new(90.0).unwrap().cdf(chi2);
    assert!(p > 1e-3, "chi2 {chi2}, p {p}, {counts:?}");
}

#[test]
fn classes_are_balanced_and_gray_matches_color_slot() {
    let ds = gen_shortcut_bimodal(&spec(200, 0.99, 0.1)).unwrap();
    for k in 0..10 {
        assert_eq!(ds.train.labels.iter().filter(|&&y| y == k).count(), 20);
    }
    assert_eq!(ds.channels(), (3, 1));
    let px = 64;
    for i in 0..ds.train.len() {
        let tint = palette(ds.train.colors[i], 10);
        for c in 0..3 {
            for j in 0..px {
                let want = ds.train.x1.data()[i * px + j] * tint[c];
                assert_eq!(ds.train.x0.data()[(i * 3 + c) * px + j], want);
            }
        }
    }
}

#[test]
fn generation_is_seeded() {
    let a = gen_shortcut_bimodal(&spec(100, 0.99, 0.1)).unwrap();
    let b = gen_shortcut_bimodal(&spec(100, 0.99, 0.1)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.id(), b.id());
    let c = gen_shortcut_bimodal(&GeneratorSpec {
        seed: 1,
        ..spec(100, 0.99, 0.1)
    })
    .unwrap();
    assert_ne!(a.train.x1, c.train.x1);
    assert_ne!(a.id(), c.id());
}

#[test]
fn duplicated_slots_are_bitwise_identical() {
    for source in [Modality::M0, Modality::M1] {
        let ds = gen_duplicated(&spec(60, 0.99, 0.1), source).unwrap();
        assert_eq!(ds.kind, DatasetKind::Duplicated { source });
        for s in [&ds.train, &ds.val, &ds.test] {
            assert_eq!(s.x0, s.x1);
        }
        assert_eq!(ds.channels(), (3, 3));
        assert_eq!(ds.swapped(), ds);
    }
    let base = gen_shortcut_bimodal(&spec(60, 0.99, 0.1)).unwrap();
    let dup = gen_duplicated(&spec(60, 0.99, 0.1), Modality::M1).unwrap();
    assert_eq!(dup.train.labels, base.train.labels);
    assert_ne!(dup.id(), base.id());
}

#[test]
fn batches_partition_the_indices() {
    for (n, b) in [(10, 3), (64, 64), (100, 7), (5, 10)] {
        let bs = batches(n, b, 42);
        assert_eq!(bs.len(), n.div_ceil(b));
        assert!(bs[..bs.len() - 1].iter().all(|x| x.len() == b));
        let mut all: Vec<usize> = bs.concat();
        all.sort();
        assert_eq!(all, (0..n).collect::<Vec<_>>());
        assert_eq!(batches(n, b, 42), bs);
    }
    assert_ne!(batches(100, 10, 1), batches(100, 10, 2));
}

#[test]
fn persistence_round_trip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let ds = gen_duplicated(&spec(40, 0.99, 0.1), Modality::M0).unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back, ds);
    assert_eq!(back.id(), ds.id());

    let path = dir.path().join("val.bin");
    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(mmlab::Error::Checksum { .. })));

    let manifest = dir.path().join("manifest.json");
    let text = std::fs::read_to_string(&manifest)
        .unwrap()
        .replace("\"format\": 1", "\"format\": 9");
    std::fs::write(&manifest, text).unwrap();
    assert!(matches!(
        load_dataset(dir.path()),
        Err(mmlab::Error::VersionMismatch { found: 9, .. })
    ));
    assert!(load_dataset(&dir.path().join("missing")).is_err());
}

#[test]
fn invalid_specs_are_rejected() {
    let bad = [
        GeneratorSpec {
            classes: 1,
            ..Default::default()
        },
        GeneratorSpec {
            size: 2,
            ..Default::default()
        },
        GeneratorSpec {
            p_train: 1.5,
            ..Default::default()
        },
        GeneratorSpec {
            p_test: 0.05,
            ..Default::default()
        },
        GeneratorSpec {
            sigma_shape: -1.0,
            ..Default::default()
        },
    ];
    for s in bad {
        assert!(matches!(gen_shortcut_bimodal(&s), Err(mmlab::Error::Config(_))), "{s:?}");
    }
}
