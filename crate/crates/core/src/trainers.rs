//! Training loops: SGD with momentum and optional L1, the vanilla, guided
//! and random step schedules, and best-checkpoint selection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FusionMode;
use crate::model::{predict_rows, MultiModalNet, Phase};
use crate::ndcore::rng::streams;
use crate::ndcore::{Graph, Rng, RngState, Tensor};
use crate::speedtrack::{mu, SpeedAccumulator, SpeedRecord, StepMu};
use crate::synthdata::{batches, Split};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Vanilla,
    Guided,
    Random,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Vanilla => "vanilla",
            Algorithm::Guided => "guided",
            Algorithm::Random => "random",
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Algorithm::Vanilla),
            "guided" => Ok(Algorithm::Guided),
            "random" => Ok(Algorithm::Random),
            _ => Err(Error::Config(format!("unknown algorithm {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Total epochs, the all-regular warm-up epoch included.
    pub epochs: usize,
    /// Re-balancing window.
    pub q: usize,
    /// Imbalance tolerance; `null` in JSON means never re-balance.
    #[serde(with = "infinite_as_null")]
    pub alpha: f64,
    /// L1 weight.
    pub lambda: f64,
    pub seed: u64,
    /// Stop once every minibatch of an epoch was classified correctly.
    pub stop_at_full_train_acc: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            algorithm: Algorithm::Vanilla,
            lr: 0.01,
            momentum: 0.9,
            batch_size: 128,
            epochs: 60,
            q: 5,
            alpha: 0.1,
            lambda: 0.0,
            seed: 0,
            stop_at_full_train_acc: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr = {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum = {} outside [0, 1)", self.momentum));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive".into());
        }
        if self.q == 0 {
            return bad("q must be at least 1".into());
        }
        if self.alpha.is_nan() || self.alpha <= 0.0 {
            return bad(format!("alpha = {} must be positive", self.alpha));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda = {}", self.lambda));
        }
        Ok(())
    }
}

mod infinite_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_none()
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StepKind {
    Regular,
    RebalanceM0,
    RebalanceM1,
}

impl StepKind {
    pub fn mode(self) -> FusionMode {
        match self {
            StepKind::Regular => FusionMode::Regular,
            StepKind::RebalanceM0 => FusionMode::RebalanceM0,
            StepKind::RebalanceM1 => FusionMode::RebalanceM1,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Which kind of step to take next.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Schedule {
    Vanilla,
    /// Window state machine: `q` runs from 1 to `window`; a regular step is
    /// taken at `q == window`, re-balancing steps otherwise.
    Guided {
        window: usize,
        #[serde(with = "infinite_as_null")]
        alpha: f64,
        q: usize,
        last_diff: Option<f64>,
    },
    Random {
        rng: RngState,
    },
    /// Fixed sequence, repeated; for tests.
    Scripted {
        kinds: Vec<StepKind>,
        pos: usize,
    },
}

impl Schedule {
    pub fn for_config(cfg: &TrainConfig) -> Schedule {
        match cfg.algorithm {
            Algorithm::Vanilla => Schedule::Vanilla,
            Algorithm::Guided => Schedule::Guided {
                window: cfg.q,
                alpha: cfg.alpha,
                q: cfg.q,
                last_diff: None,
            },
            Algorithm::Random => Schedule::Random {
                rng: Rng::with_stream(cfg.seed, streams::SCHEDULE).state(),
            },
        }
    }

    /// Kind of the next step. During warm-up every step is regular.
    pub fn next_kind(&mut self, warmup: bool) -> StepKind {
        if warmup {
            return StepKind::Regular;
        }
        match self {
            Schedule::Vanilla => StepKind::Regular,
            Schedule::Guided { window, q, last_diff, .. } => {
                if *q == *window {
                    StepKind::Regular
                } else {
                    *q += 1;
                    match last_diff {
                        Some(d) if *d > 0.0 => StepKind::RebalanceM0,
                        _ => StepKind::RebalanceM1,
                    }
                }
            }
            Schedule::Random { rng } => {
                let mut r = Rng::from_state(*rng);
                let k = [StepKind::Regular, StepKind::RebalanceM0, StepKind::RebalanceM1][r.below(3)];
                *rng = r.state();
                k
            }
            Schedule::Scripted { kinds, pos } => {
                let k = kinds[*pos % kinds.len()];
                *pos += 1;
                k
            }
        }
    }

    /// Feed the speed difference computed right after a regular step.
    pub fn after_regular(&mut self, diff_speed: Option<f64>, warmup: bool) {
        if let Schedule::Guided { alpha, q, last_diff, .. } = self {
            if warmup {
                return;
            }
            *last_diff = diff_speed;
            if let Some(d) = diff_speed {
                if d.abs() > *alpha {
                    *q = 1;
                }
            }
        }
    }
}

/// One SGD-with-momentum update with an L1 subgradient.
///
/// Returns the total gradient `g + λ·sign(θ)` (sign 0 at θ = 0) evaluated at
/// the pre-step parameters. Nothing is modified if any gradient is
/// non-finite.
pub fn sgd_step(
    params: &mut [Tensor],
    velocity: &mut [Tensor],
    grads: &[Tensor],
    lr: f64,
    momentum: f64,
    lambda: f64,
) -> Result<Vec<Tensor>> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::Config(format!(
            "sgd_step: {} params, {} grads, {} velocities",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    let mut total = Vec::with_capacity(grads.len());
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::shape("sgd_step", p.shape(), g.shape()));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter slot {i}")));
        }
        let t = if lambda > 0.0 {
            g.zip_map(p, "sgd_step", |g, th| g + lambda * sign0(th))?
        } else {
            g.clone()
        };
        total.push(t);
    }
    for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(&total) {
        for ((th, vel), gi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vel = momentum * *vel + gi;
            *th -= lr * *vel;
        }
    }
    Ok(total)
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Per-epoch shuffle seed; identical for every algorithm given the run seed.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub diff_speed: Option<f64>,
    /// Steps per kind this epoch: regular, rebalance m0, rebalance m1.
    pub kinds: [u64; 3],
}

/// Snapshot taken whenever validation accuracy improves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Best {
    /// 1-based epoch.
    pub epoch: usize,
    /// Optimizer steps taken up to this point.
    pub steps: u64,
    pub val_acc: f64,
    pub accumulator: SpeedAccumulator,
    pub net: MultiModalNet,
}

impl Best {
    pub fn diff_speed(&self) -> Option<f64> {
        self.accumulator.diff_speed().ok()
    }
}

/// Index of the highest accuracy, earliest on ties.
pub fn select_best(val_accs: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &a) in val_accs.iter().enumerate() {
        if best.is_none_or(|b| a > val_accs[b]) {
            best = Some(i);
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Completed,
    /// Every training minibatch of an epoch was classified correctly.
    ReachedFullTrainAccuracy,
    Failed(String),
}

/// Complete, resumable state of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub config: TrainConfig,
    pub net: MultiModalNet,
    pub velocity: Vec<Tensor>,
    pub accumulator: SpeedAccumulator,
    pub schedule: Schedule,
    /// Completed epochs.
    pub epoch: usize,
    pub steps: u64,
    pub kind_counts: [u64; 3],
    pub history: Vec<EpochLog>,
    pub best: Option<Best>,
    pub status: RunStatus,
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub kind: StepKind,
    pub loss: f64,
    pub correct: usize,
    pub mu: Option<StepMu>,
}

impl TrainState {
    pub fn new(net: MultiModalNet, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let velocity = net.params.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect();
        let schedule = Schedule::for_config(&config);
        Ok(TrainState {
            config,
            net,
            velocity,
            accumulator: SpeedAccumulator::new(),
            schedule,
            epoch: 0,
            steps: 0,
            kind_counts: [0; 3],
            history: Vec::new(),
            best: None,
            status: RunStatus::Running,
        })
    }

    pub fn is_finished(&self) -> bool {
        self.status != RunStatus::Running
    }

    /// One optimizer step of `kind` on a minibatch.
    pub fn step(&mut self, x0: &Tensor, x1: &Tensor, labels: &[usize], kind: StepKind) -> Result<StepOutcome> {
        let mut g = Graph::new();
        let vars = self.net.params.bind(&mut g);
        let out = self
            .net
            .forward_bound(&mut g, &vars, Some(x0), Some(x1), kind.mode(), Phase::Train)?;
        let (z0, z1) = (out.logits0.expect("both branches run"), out.logits1.expect("both branches run"));
        let loss_var = MultiModalNet::loss(&mut g, z0, z1, labels)?;
        let loss = g.value(loss_var).item();
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {}", self.steps + 1)));
        }
        let grads = {
            let gr = g.backward(loss_var)?;
            let shapes = self.net.params.shapes();
            gr.params_dense(&shapes)
        };
        let correct = predict_rows(out.probs.as_ref().expect("both branches run"))
            .iter()
            .zip(labels)
            .filter(|(p, y)| p == y)
            .count();
        drop(g);

        let mut params = self.net.params.tensors();
        let c = &self.config;
        let total = sgd_step(&mut params, &mut self.velocity, &grads, c.lr, c.momentum, c.lambda)?;
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite(format!("parameters after step {}", self.steps + 1)));
        }
        self.net.params.set_tensors(params);
        self.net.apply_norm_updates(&out.norm_updates);

        let mut step_mu = None;
        if kind == StepKind::Regular {
            self.net.update_fusion_stats(&out.traces);
            step_mu = self.effective_updates(&total)?;
            if let Some(m) = step_mu {
                self.accumulator.accumulate(m);
            }
        }
        self.steps += 1;
        self.kind_counts[kind.index()] += 1;
        Ok(StepOutcome {
            kind,
            loss,
            correct,
            mu: step_mu,
        })
    }

    /// μ per group, or None for a network without fusion modules.
    fn effective_updates(&self, total: &[Tensor]) -> Result<Option<StepMu>> {
        let part = self.net.partition();
        if part.fusion0.is_empty() || part.fusion1.is_empty() {
            return Ok(None);
        }
        let group =
            |slots: &[usize]| -> Result<f64> { mu(slots.iter().map(|&s| &total[s]), slots.iter().map(|&s| self.net.params.get(s))) };
        Ok(Some(StepMu {
            theta0: group(&part.branch0)?,
            fusion0: group(&part.fusion0)?,
            theta1: group(&part.branch1)?,
            fusion1: group(&part.fusion1)?,
        }))
    }

    /// One epoch over `train`, then validation on `val`. Errors inside the
    /// epoch mark the run failed rather than propagating.
    pub fn run_epoch(&mut self, train: &Split, val: &Split, mut log: Option<&mut dyn std::io::Write>) -> Result<()> {
        if self.is_finished() {
            return Ok(());
        }
        let warmup = self.epoch == 0;
        let order = batches(train.len(), self.config.batch_size, epoch_seed(self.config.seed, self.epoch));
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        let mut kinds = [0u64; 3];
        for idx in &order {
            let (x0, x1, y) = train.gather(idx);
            let kind = self.schedule.next_kind(warmup);
            let out = match self.step(&x0, &x1, &y, kind) {
                Ok(o) => o,
                Err(e @ (Error::NonFinite(_) | Error::DegenerateGroup(_))) => {
                    self.status = RunStatus::Failed(e.to_string());
                    return Ok(());
                }
                Err(e) => return Err(e),
            };
            if kind == StepKind::Regular {
                let d = self.accumulator.diff_speed().ok();
                self.schedule.after_regular(d, warmup);
                if let (Some(w), Some(_)) = (log.as_deref_mut(), out.mu) {
                    SpeedRecord::snapshot(self.steps, &self.accumulator)
                        .write_line(w)
                        .map_err(|e| Error::io("speed log", e))?;
                }
            }
            loss_sum += out.loss * y.len() as f64;
            correct += out.correct;
            kinds[kind.index()] += 1;
        }
        self.epoch += 1;
        let val_acc = crate::diagnose::accuracy(&self.net, crate::diagnose::Variant::F, val)?;
        let n = train.len() as f64;
        let train_acc = correct as f64 / n;
        self.history.push(EpochLog {
            epoch: self.epoch,
            train_loss: loss_sum / n,
            train_acc,
            val_acc,
            diff_speed: self.accumulator.diff_speed().ok(),
            kinds,
        });
        if self.best.as_ref().is_none_or(|b| val_acc > b.val_acc) {
            self.best = Some(Best {
                epoch: self.epoch,
                steps: self.steps,
                val_acc,
                accumulator: self.accumulator.clone(),
                net: self.net.clone(),
            });
        }
        if self.config.stop_at_full_train_acc && correct == train.len() {
            self.status = RunStatus::ReachedFullTrainAccuracy;
        } else if self.epoch >= self.config.epochs {
            self.status = RunStatus::Completed;
        }
        Ok(())
    }

    /// Run epochs until the budget is spent, the run fails, or training
    /// accuracy saturates.
    pub fn run(&mut self, train: &Split, val: &Split) -> Result<()> {
        while !self.is_finished() {
            self.run_epoch(train, val, None)?;
        }
        Ok(())
    }
}
