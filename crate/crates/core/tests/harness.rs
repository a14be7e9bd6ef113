use std::path::Path;

use mmlab::diagnose::HBarSource;
use mmlab::harness::checkpoint::{BLOB_FILE, MANIFEST_FILE};
use mmlab::harness::cli::main_with_args;
use mmlab::harness::report::{collect_records, histograms, write_summary_csv, CSV_HEADER};
use mmlab::harness::run::init_net;
use mmlab::harness::stats::{sign_test_p, spearman};
use mmlab::harness::{load_checkpoint, run_training, save_checkpoint, sweep, LrRule, SweepSpec};
use mmlab::synthdata::{gen_shortcut_bimodal, save_dataset, BimodalDataset, GeneratorSpec};
use mmlab::trainers::{Algorithm, TrainConfig, TrainState};

fn gen() -> GeneratorSpec {
    GeneratorSpec {
        n_train: 96,
        n_val: 32,
        n_test: 32,
        size: 8,
        ..Default::default()
    }
}

fn data() -> BimodalDataset {
    gen_shortcut_bimodal(&gen()).unwrap()
}

fn base() -> TrainConfig {
    TrainConfig {
        batch_size: 32,
        epochs: 3,
        stop_at_full_train_acc: false,
        ..Default::default()
    }
}

fn small_sweep() -> SweepSpec {
    SweepSpec {
        dataset: "mem".into(),
        algorithms: vec![Algorithm::Vanilla, Algorithm::Guided],
        lrs: LrRule::List(vec![0.01, 0.03]),
        seeds_per_lr: 1,
        base: TrainConfig { epochs: 2, ..base() },
        lambdas: vec![0.0],
        net: None,
        h_bar: HBarSource::Recomputed,
    }
}

#[test]
fn plan_enumerates_the_grid() {
    let spec = SweepSpec {
        lambdas: vec![0.0, 1e-4],
        seeds_per_lr: 3,
        ..small_sweep()
    };
    let plan = spec.plan().unwrap();
    assert_eq!(plan.len(), 2 * 2 * 2 * 3);
    // seeds pair up across algorithms
    let seeds = |a| {
        plan.iter()
            .filter(|c| c.algorithm == a && c.lambda == 0.0)
            .map(|c| (c.lr, c.seed))
            .collect::<Vec<_>>()
    };
    assert_eq!(seeds(Algorithm::Vanilla), seeds(Algorithm::Guided));

    let log = SweepSpec {
        lrs: LrRule::LogUniform {
            lo: 1e-3,
            hi: 1e-1,
            count: 200,
        },
        ..small_sweep()
    };
    let lrs = log.lrs.materialize(0).unwrap();
    assert!(lrs.iter().all(|&l| (1e-3..=1e-1).contains(&l)));
    let below = lrs.iter().filter(|&&l| l < 1e-2).count();
    assert!((70..=130).contains(&below), "{below}");
    assert_eq!(lrs, log.lrs.materialize(0).unwrap());
}

#[test]
fn sweep_results_do_not_depend_on_parallelism() {
    let ds = data();
    let spec = small_sweep();
    let one = sweep(&ds, &spec, 1, None).unwrap();
    let two = sweep(&ds, &spec, 2, None).unwrap();
    assert_eq!(one.len(), 4);
    for (a, b) in one.iter().zip(&two) {
        assert!(a.same_outcome(b), "{a:?}\n{b:?}");
    }
    // each run matches a standalone run with the same config
    let cfg = &spec.plan().unwrap()[3];
    let (_, alone) = run_training(&ds, None, cfg, HBarSource::Recomputed).unwrap();
    assert!(alone.same_outcome(&one[3]));
}

#[test]
fn sweep_output_feeds_the_report() {
    let ds = data();
    let dir = tempfile::tempdir().unwrap();
    let records = sweep(&ds, &small_sweep(), 1, Some(dir.path())).unwrap();
    assert!(dir.path().join("aggregate.json").exists());
    let found = collect_records(dir.path()).unwrap();
    assert_eq!(found.len(), 4);
    let csv_path = dir.path().join("summary.csv");
    write_summary_csv(&found, &csv_path).unwrap();
    let mut rdr = csv::Reader::from_path(&csv_path).unwrap();
    assert_eq!(rdr.headers().unwrap().iter().collect::<Vec<_>>(), CSV_HEADER);
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 4);
    let ids: Vec<&str> = rows.iter().map(|r| &r[0]).collect();
    let mut sorted = ids.clone();
    sorted.sort();
    assert_eq!(ids, sorted);
    for r in &records {
        let row = rows.iter().find(|row| &row[0] == r.run_id.as_str()).unwrap();
        assert_eq!(row[11].parse::<f64>().unwrap(), r.test_acc.unwrap());
    }
    let h = histograms(&found);
    let binned: usize = h.diff_util.counts.iter().sum::<usize>() + h.diff_util.below + h.diff_util.above;
    assert_eq!(binned, found.iter().filter(|r| r.diff_util.is_some()).count());
    assert_eq!(h.excluded_failed, 0);
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let ds = data();
    let mut st = TrainState::new(
        init_net(&ds, None, 1).unwrap(),
        TrainConfig {
            algorithm: Algorithm::Guided,
            ..base()
        },
    )
    .unwrap();
    st.run_epoch(&ds.train, &ds.val, None).unwrap();
    st.run_epoch(&ds.train, &ds.val, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    save_checkpoint(&st, &a).unwrap();
    let back = load_checkpoint(&a).unwrap();
    assert_eq!(back, st);

    // saving the loaded state reproduces the files byte for byte
    let b = dir.path().join("b");
    save_checkpoint(&back, &b).unwrap();
    for f in [MANIFEST_FILE, BLOB_FILE] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
    }

    let blob = b.join(BLOB_FILE);
    let bytes = std::fs::read(&blob).unwrap();
    std::fs::write(&blob, &bytes[..bytes.len() - 8]).unwrap();
    assert!(matches!(load_checkpoint(&b), Err(mmlab::Error::Checksum(_))));

    let manifest = a.join(MANIFEST_FILE);
    let mut v: serde_json::Value = serde_json::from_slice(&std::fs::read(&manifest).unwrap()).unwrap();
    v["format"] = 2.into();
    std::fs::write(&manifest, serde_json::to_vec(&v).unwrap()).unwrap();
    assert!(matches!(
        load_checkpoint(&a),
        Err(mmlab::Error::VersionMismatch { found: 2, expected: 1 })
    ));
}

#[test]
fn resumed_run_equals_uninterrupted_run() {
    let ds = data();
    let cfg = TrainConfig {
        algorithm: Algorithm::Random,
        ..base()
    };
    let net = init_net(&ds, None, 2).unwrap();
    let mut full = TrainState::new(net.clone(), cfg.clone()).unwrap();
    full.run(&ds.train, &ds.val).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut part = TrainState::new(net, cfg).unwrap();
    part.run_epoch(&ds.train, &ds.val, None).unwrap();
    save_checkpoint(&part, dir.path()).unwrap();
    drop(part);
    let mut resumed = load_checkpoint(dir.path()).unwrap();
    resumed.run(&ds.train, &ds.val).unwrap();
    assert_eq!(resumed, full);
}

fn cli(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("mmlab").chain(args.iter().copied()))
}

fn write_json(path: &Path, v: &serde_json::Value) {
    std::fs::write(path, serde_json::to_vec_pretty(v).unwrap()).unwrap();
}

#[test]
fn command_line_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s);
    let s = |s: &str| p(s).to_str().unwrap().to_string();

    write_json(&p("gen.json"), &serde_json::to_value(gen()).unwrap());
    assert_eq!(cli(&["gen-data", "--spec", &s("gen.json"), "--out", &s("data")]), 0);
    assert_eq!(
        cli(&["gen-data", "--spec", &s("gen.json"), "--out", &s("dup"), "--duplicate", "m1"]),
        0
    );

    let train = serde_json::json!({
        "dataset": s("data"),
        "train": { "algorithm": "guided", "epochs": 2, "batch_size": 32, "stop_at_full_train_acc": false }
    });
    write_json(&p("train.json"), &train);
    assert_eq!(cli(&["train", "--config", &s("train.json"), "--out", &s("run")]), 0);
    for f in ["record.json", "epochs.json", "speed.jsonl", "checkpoint/manifest.json"] {
        assert!(p("run").join(f).exists(), "{f}");
    }
    // resuming a finished run is a no-op that reproduces the record
    let before: serde_json::Value = serde_json::from_slice(&std::fs::read(p("run/record.json")).unwrap()).unwrap();
    assert_eq!(cli(&["train", "--config", &s("train.json"), "--out", &s("run"), "--resume"]), 0);
    let after: serde_json::Value = serde_json::from_slice(&std::fs::read(p("run/record.json")).unwrap()).unwrap();
    assert_eq!(before["test_acc"], after["test_acc"]);
    assert_eq!(before["diff_util"], after["diff_util"]);

    assert_eq!(
        cli(&[
            "diagnose",
            "--checkpoint",
            &s("run/checkpoint"),
            "--data",
            &s("data"),
            "--out",
            &s("util.json")
        ]),
        0
    );
    let util: serde_json::Value = serde_json::from_slice(&std::fs::read(p("util.json")).unwrap()).unwrap();
    assert_eq!(util["diff_util"], before["diff_util"]);

    let sw = serde_json::json!({
        "dataset": s("data"),
        "algorithms": ["vanilla"],
        "lrs": { "list": [0.02] },
        "seeds_per_lr": 2,
        "base": { "epochs": 1, "batch_size": 32 },
        "lambdas": [0.0, 1e-4]
    });
    write_json(&p("sweep.json"), &sw);
    assert_eq!(cli(&["sweep", "--spec", &s("sweep.json"), "--out", &s("sweep"), "--l1"]), 0);
    assert!(p("sweep/l1_study.json").exists());
    assert_eq!(cli(&["report", "--runs", &s("sweep"), "--out", &s("summary.csv")]), 0);
    assert_eq!(std::fs::read_to_string(p("summary.csv")).unwrap().lines().count(), 5);
    assert!(p("summary.hist.json").exists());

    // usage errors and run failures
    assert_eq!(cli(&["bogus"]), 2);
    assert_eq!(cli(&["train", "--config"]), 2);
    assert_eq!(cli(&["train", "--config", &s("missing.json"), "--out", &s("x")]), 1);
    assert_eq!(cli(&["diagnose", "--checkpoint", &s("data"), "--data", &s("data")]), 1);
    write_json(&p("bad.json"), &serde_json::json!({ "classes": 1 }));
    assert_eq!(cli(&["gen-data", "--spec", &s("bad.json"), "--out", &s("bad")]), 1);
}

#[test]
fn dataset_directory_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&data(), &dir.path().join("a")).unwrap();
    save_dataset(&data(), &dir.path().join("b")).unwrap();
    for f in ["manifest.json", "train.bin", "val.bin", "test.bin"] {
        assert_eq!(
            std::fs::read(dir.path().join("a").join(f)).unwrap(),
            std::fs::read(dir.path().join("b").join(f)).unwrap()
        );
    }
}

#[test]
fn statistics_against_textbook_values() {
    // exact binomial: 9 of 10 positive, two-sided p = 22/1024
    let p = sign_test_p(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, -1.0]);
    assert!((p - 22.0 / 1024.0).abs() < 1e-12, "{p}");
    assert_eq!(sign_test_p(&[1.0, -1.0, 0.0]), 1.0);
    let rho = spearman(&[1.0, 2.0, 3.0, 4.0, 5.0], &[5.0, 6.0, 7.0, 8.0, 7.0]).unwrap();
    // ranks y: 1, 2, 3.5, 5, 3.5
    assert!((rho - 0.820_782_681_668_123_8).abs() < 1e-12, "{rho}");
    assert!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_none());
}
