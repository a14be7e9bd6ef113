//! Seeded sweeps over learning rates, seeds, algorithms and L1 weights.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::run::{finish, init_net, run_id, RunRecord};
use super::stats::{mean, sign_counts, sign_test_p, spearman, std_dev, SignCounts};
use crate::diagnose::HBarSource;
use crate::error::{Error, Result};
use crate::model::NetSpec;
use crate::ndcore::rng::streams;
use crate::ndcore::Rng;
use crate::persist;
use crate::synthdata::BimodalDataset;
use crate::trainers::{Algorithm, RunStatus, TrainConfig, TrainState};

/// Environment variable capping the number of concurrent runs.
pub const JOBS_ENV: &str = "MMLAB_JOBS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrRule {
    /// `count` draws, log-uniform on `[lo, hi]`, from the sweep stream.
    LogUniform {
        lo: f64,
        hi: f64,
        count: usize,
    },
    List(Vec<f64>),
}

impl LrRule {
    pub fn materialize(&self, seed: u64) -> Result<Vec<f64>> {
        match self {
            LrRule::List(v) => Ok(v.clone()),
            LrRule::LogUniform { lo, hi, count } => {
                if !(*lo > 0.0 && hi >= lo) {
                    return Err(Error::Config(format!("log-uniform interval [{lo}, {hi}]")));
                }
                let mut rng = Rng::with_stream(seed, streams::SWEEP);
                let (a, b) = (lo.ln(), hi.ln());
                Ok((0..*count).map(|_| rng.uniform_in(a, b).exp()).collect())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    /// Dataset directory (CLI) or a label (in-memory use).
    pub dataset: String,
    pub algorithms: Vec<Algorithm>,
    pub lrs: LrRule,
    pub seeds_per_lr: usize,
    /// Shared training fields; algorithm, lr, seed and lambda are overridden.
    #[serde(default)]
    pub base: TrainConfig,
    #[serde(default = "zero_lambda")]
    pub lambdas: Vec<f64>,
    #[serde(default)]
    pub net: Option<NetSpec>,
    #[serde(default = "recomputed")]
    pub h_bar: HBarSource,
}

fn zero_lambda() -> Vec<f64> {
    vec![0.0]
}

fn recomputed() -> HBarSource {
    HBarSource::Recomputed
}

impl SweepSpec {
    /// Every run's configuration, in a fixed order. Seeds are
    /// `base.seed + j` and are shared across algorithms and λ so runs pair up.
    pub fn plan(&self) -> Result<Vec<TrainConfig>> {
        let lrs = self.lrs.materialize(self.base.seed)?;
        let mut out = Vec::new();
        for &lambda in &self.lambdas {
            for &algorithm in &self.algorithms {
                for (i, &lr) in lrs.iter().enumerate() {
                    for j in 0..self.seeds_per_lr {
                        out.push(TrainConfig {
                            algorithm,
                            lr,
                            lambda,
                            seed: self.base.seed + (i * self.seeds_per_lr + j) as u64,
                            ..self.base.clone()
                        });
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Parallelism from `requested`, capped by [`JOBS_ENV`] when set.
pub fn job_count(requested: usize) -> usize {
    let cap = std::env::var(JOBS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v > 0);
    match cap {
        Some(c) => requested.max(1).min(c),
        None => requested.max(1),
    }
}

fn failed_record(cfg: &TrainConfig, ds: &BimodalDataset, h_bar: HBarSource, e: &Error) -> RunRecord {
    let mut nulls = std::collections::BTreeMap::new();
    nulls.insert("run".into(), e.to_string());
    RunRecord {
        run_id: run_id(cfg),
        dataset_id: ds.id(),
        algorithm: cfg.algorithm,
        lr: cfg.lr,
        seed: cfg.seed,
        lambda: cfg.lambda,
        q: cfg.q,
        alpha: cfg.alpha.is_finite().then_some(cfg.alpha),
        epochs_completed: 0,
        best_epoch: None,
        best_val_acc: None,
        test_acc: None,
        a_f0: None,
        a_f0_marginal: None,
        a_f1: None,
        a_f1_marginal: None,
        u_m0_given_m1: None,
        u_m1_given_m0: None,
        diff_util: None,
        diff_speed: None,
        t_steps: None,
        sparsity: None,
        h_bar_source: h_bar,
        marginal_exceeds_full: None,
        status: RunStatus::Failed(e.to_string()),
        nulls,
        wall_time_s: 0.0,
    }
}

/// Train, diagnose and optionally persist one run. Errors become a failed
/// record.
fn execute(cfg: &TrainConfig, ds: &BimodalDataset, spec: &SweepSpec, out: Option<&Path>) -> RunRecord {
    let t0 = Instant::now();
    let id = run_id(cfg);
    let attempt = || -> Result<RunRecord> {
        let mut state = TrainState::new(init_net(ds, spec.net.as_ref(), cfg.seed)?, cfg.clone())?;
        state.run(&ds.train, &ds.val)?;
        let (record, report) = finish(&state, ds, spec.h_bar, id.clone(), t0.elapsed().as_secs_f64())?;
        if let Some(root) = out {
            let dir = root.join("runs").join(&id);
            persist::write_json(&dir.join("record.json"), &record)?;
            persist::write_json(&dir.join("epochs.json"), &state.history)?;
            if let Some(r) = &report {
                persist::write_json(&dir.join("utilization.json"), r)?;
            }
            super::checkpoint::save_checkpoint(&state, &dir.join("checkpoint"))?;
        }
        Ok(record)
    };
    attempt().unwrap_or_else(|e| failed_record(cfg, ds, spec.h_bar, &e))
}

/// Run the whole sweep with up to `jobs` concurrent runs. The record list
/// is in plan order regardless of scheduling.
pub fn sweep(ds: &BimodalDataset, spec: &SweepSpec, jobs: usize, out: Option<&Path>) -> Result<Vec<RunRecord>> {
    let plan = spec.plan()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(job_count(jobs))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let records: Vec<RunRecord> = pool.install(|| plan.par_iter().map(|cfg| execute(cfg, ds, spec, out)).collect());
    if let Some(root) = out {
        persist::write_json(&root.join("sweep.json"), spec)?;
        persist::write_json(&root.join("aggregate.json"), &aggregate_by_algorithm(&records))?;
    }
    Ok(records)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub runs: usize,
    pub failed: usize,
    /// Non-failed runs without a utilization report.
    pub missing_diff_util: usize,
    pub used: usize,
    pub mean_diff_util: Option<f64>,
    pub std_diff_util: Option<f64>,
    pub mean_diff_speed: Option<f64>,
    pub std_diff_speed: Option<f64>,
    pub diff_util_signs: SignCounts,
    /// Two-sided sign test of diff_util against a zero median.
    pub diff_util_sign_test_p: f64,
    /// Across runs with both values.
    pub spearman_speed_util: Option<f64>,
    pub mean_test_acc: Option<f64>,
}

pub fn aggregate(records: &[RunRecord]) -> Aggregate {
    let ok: Vec<&RunRecord> = records.iter().filter(|r| !r.failed()).collect();
    let util: Vec<f64> = ok.iter().filter_map(|r| r.diff_util).collect();
    let speed: Vec<f64> = ok.iter().filter_map(|r| r.diff_speed).collect();
    let (ps, pu): (Vec<f64>, Vec<f64>) = ok.iter().filter_map(|r| Some((r.diff_speed?, r.diff_util?))).unzip();
    let acc: Vec<f64> = ok.iter().filter_map(|r| r.test_acc).collect();
    Aggregate {
        runs: records.len(),
        failed: records.len() - ok.len(),
        missing_diff_util: ok.len() - util.len(),
        used: util.len(),
        mean_diff_util: mean(&util),
        std_diff_util: std_dev(&util),
        mean_diff_speed: mean(&speed),
        std_diff_speed: std_dev(&speed),
        diff_util_signs: sign_counts(&util),
        diff_util_sign_test_p: sign_test_p(&util),
        spearman_speed_util: spearman(&ps, &pu),
        mean_test_acc: mean(&acc),
    }
}

pub fn aggregate_by_algorithm(records: &[RunRecord]) -> Vec<(Algorithm, f64, Aggregate)> {
    let mut keys: Vec<(Algorithm, f64)> = Vec::new();
    for r in records {
        if !keys.iter().any(|&(a, l)| a == r.algorithm && l == r.lambda) {
            keys.push((r.algorithm, r.lambda));
        }
    }
    keys.into_iter()
        .map(|(a, l)| {
            let group: Vec<RunRecord> = records.iter().filter(|r| r.algorithm == a && r.lambda == l).cloned().collect();
            (a, l, aggregate(&group))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct L1Row {
    pub lambda: f64,
    pub runs: usize,
    pub mean_sparsity: Option<f64>,
    pub mean_abs_diff_util: Option<f64>,
    pub mean_abs_diff_speed: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct L1Study {
    pub rows: Vec<L1Row>,
    /// Adjacent λ pairs where mean sparsity decreased.
    pub sparsity_inversions: usize,
    /// Largest such decrease.
    pub max_sparsity_drop: f64,
    /// Across individual runs.
    pub spearman_sparsity_abs_util: Option<f64>,
}

/// Per-λ summaries of a sweep whose `lambdas` list is ascending.
pub fn l1_study(records: &[RunRecord]) -> Result<L1Study> {
    let mut lambdas: Vec<f64> = Vec::new();
    for r in records {
        if !lambdas.contains(&r.lambda) {
            lambdas.push(r.lambda);
        }
    }
    if lambdas.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Config("lambda list must be ascending".into()));
    }
    let ok: Vec<&RunRecord> = records.iter().filter(|r| !r.failed()).collect();
    let rows: Vec<L1Row> = lambdas
        .iter()
        .map(|&l| {
            let g: Vec<&&RunRecord> = ok.iter().filter(|r| r.lambda == l).collect();
            let col = |f: &dyn Fn(&RunRecord) -> Option<f64>| mean(&g.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
            L1Row {
                lambda: l,
                runs: g.len(),
                mean_sparsity: col(&|r| r.sparsity),
                mean_abs_diff_util: col(&|r| r.diff_util.map(f64::abs)),
                mean_abs_diff_speed: col(&|r| r.diff_speed.map(f64::abs)),
            }
        })
        .collect();
    let (mut inversions, mut max_drop) = (0, 0.0f64);
    for w in rows.windows(2) {
        if let (Some(a), Some(b)) = (w[0].mean_sparsity, w[1].mean_sparsity) {
            if b < a {
                inversions += 1;
                max_drop = max_drop.max(a - b);
            }
        }
    }
    let (rs, us): (Vec<f64>, Vec<f64>) = ok.iter().filter_map(|r| Some((r.sparsity?, r.diff_util?.abs()))).unzip();
    Ok(L1Study {
        rows,
        sparsity_inversions: inversions,
        max_sparsity_drop: max_drop,
        spearman_sparsity_abs_util: spearman(&rs, &us),
    })
}
