//! One training run end to end: init, train, select best, diagnose.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::diagnose::{sparsity_fraction, utilization, HBar, HBarSource, UtilizationReport};
use crate::error::Result;
use crate::model::{MultiModalNet, NetSpec};
use crate::ndcore::rng::streams;
use crate::ndcore::Rng;
use crate::synthdata::BimodalDataset;
use crate::trainers::{Algorithm, RunStatus, TrainConfig, TrainState};

/// Contents of a `train --config` file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Dataset directory.
    pub dataset: String,
    #[serde(default)]
    pub train: TrainConfig,
    /// Architecture; defaults to the desk-scale net for the dataset's shapes.
    #[serde(default)]
    pub net: Option<NetSpec>,
    #[serde(default = "default_h_bar")]
    pub h_bar: HBarSource,
}

fn default_h_bar() -> HBarSource {
    HBarSource::Recomputed
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub dataset_id: String,
    pub algorithm: Algorithm,
    pub lr: f64,
    pub seed: u64,
    pub lambda: f64,
    pub q: usize,
    /// `None` when re-balancing is disabled (infinite tolerance).
    pub alpha: Option<f64>,
    pub epochs_completed: usize,
    pub best_epoch: Option<usize>,
    pub best_val_acc: Option<f64>,
    pub test_acc: Option<f64>,
    pub a_f0: Option<f64>,
    pub a_f0_marginal: Option<f64>,
    pub a_f1: Option<f64>,
    pub a_f1_marginal: Option<f64>,
    pub u_m0_given_m1: Option<f64>,
    pub u_m1_given_m0: Option<f64>,
    pub diff_util: Option<f64>,
    /// At the best-validation step.
    pub diff_speed: Option<f64>,
    /// Optimizer steps up to the best-validation checkpoint.
    pub t_steps: Option<u64>,
    pub sparsity: Option<f64>,
    pub h_bar_source: HBarSource,
    pub marginal_exceeds_full: Option<bool>,
    pub status: RunStatus,
    /// Reason for every field left empty.
    pub nulls: BTreeMap<String, String>,
    pub wall_time_s: f64,
}

impl RunRecord {
    pub fn failed(&self) -> bool {
        matches!(self.status, RunStatus::Failed(_))
    }

    /// Equality of everything except wall time.
    pub fn same_outcome(&self, other: &RunRecord) -> bool {
        let mut a = self.clone();
        a.wall_time_s = other.wall_time_s;
        &a == other
    }
}

pub fn run_id(cfg: &TrainConfig) -> String {
    format!("{}-lr{:.3e}-s{}-l{:.0e}", cfg.algorithm.as_str(), cfg.lr, cfg.seed, cfg.lambda)
}

/// Network initialized from the run seed's init stream.
pub fn init_net(ds: &BimodalDataset, spec: Option<&NetSpec>, seed: u64) -> Result<MultiModalNet> {
    let spec = match spec {
        Some(s) => s.clone(),
        None => {
            let (c0, c1) = ds.channels();
            NetSpec::desk_default(c0, c1, ds.spec.size, ds.spec.classes)
        }
    };
    MultiModalNet::new(spec, &mut Rng::with_stream(seed, streams::INIT))
}

/// Diagnose the best checkpoint of a finished state and fill a record.
pub fn finish(
    state: &TrainState,
    ds: &BimodalDataset,
    h_bar: HBarSource,
    run_id: String,
    wall_time_s: f64,
) -> Result<(RunRecord, Option<UtilizationReport>)> {
    let cfg = &state.config;
    let mut nulls = BTreeMap::new();
    let mut report = None;
    let (mut best_epoch, mut best_val, mut t_steps, mut diff_speed, mut sparsity) = (None, None, None, None, None);
    match &state.best {
        None => {
            nulls.insert("best".into(), "no epoch completed".into());
        }
        Some(b) => {
            best_epoch = Some(b.epoch);
            best_val = Some(b.val_acc);
            t_steps = Some(b.steps);
            sparsity = Some(sparsity_fraction(&b.net));
            match b.accumulator.diff_speed() {
                Ok(d) => diff_speed = Some(d),
                Err(e) => {
                    nulls.insert("diff_speed".into(), e.to_string());
                }
            }
            let hb = match h_bar {
                HBarSource::Recomputed => HBar::recompute(&b.net, &ds.train)?,
                HBarSource::Running => HBar::running(&b.net),
            };
            match utilization(&b.net, &ds.test, &hb) {
                Ok(mut r) => {
                    r.dataset = Some(ds.id());
                    r.checkpoint = Some(format!("{run_id}@epoch{}", b.epoch));
                    report = Some(r);
                }
                Err(e) => {
                    nulls.insert("utilization".into(), e.to_string());
                }
            }
        }
    }
    let r = report.as_ref();
    let record = RunRecord {
        run_id,
        dataset_id: ds.id(),
        algorithm: cfg.algorithm,
        lr: cfg.lr,
        seed: cfg.seed,
        lambda: cfg.lambda,
        q: cfg.q,
        alpha: cfg.alpha.is_finite().then_some(cfg.alpha),
        epochs_completed: state.epoch,
        best_epoch,
        best_val_acc: best_val,
        test_acc: r.map(|r| r.a_f),
        a_f0: r.map(|r| r.a_f0),
        a_f0_marginal: r.map(|r| r.a_f0_marginal),
        a_f1: r.map(|r| r.a_f1),
        a_f1_marginal: r.map(|r| r.a_f1_marginal),
        u_m0_given_m1: r.map(|r| r.u_m0_given_m1),
        u_m1_given_m0: r.map(|r| r.u_m1_given_m0),
        diff_util: r.map(|r| r.diff_util),
        diff_speed,
        t_steps,
        sparsity,
        h_bar_source: h_bar,
        marginal_exceeds_full: r.map(|r| r.marginal_exceeds_full),
        status: state.status.clone(),
        nulls,
        wall_time_s,
    };
    Ok((record, report))
}

/// Train from scratch and diagnose; everything in memory.
pub fn run_training(ds: &BimodalDataset, net: Option<&NetSpec>, cfg: &TrainConfig, h_bar: HBarSource) -> Result<(TrainState, RunRecord)> {
    let t0 = Instant::now();
    let mut state = TrainState::new(init_net(ds, net, cfg.seed)?, cfg.clone())?;
    state.run(&ds.train, &ds.val)?;
    let (record, _) = finish(&state, ds, h_bar, run_id(cfg), t0.elapsed().as_secs_f64())?;
    Ok((state, record))
}
