//! Post-hoc diagnostics on a frozen network: accuracies of the derived
//! models, conditional utilization rates and parameter sparsity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{FusionMode, RunningMean};
use crate::model::{predict_rows, MultiModalNet, Phase};
use crate::ndcore::{Graph, Tensor};
use crate::synthdata::Split;

/// Samples per evaluation forward pass.
pub const EVAL_CHUNK: usize = 256;

pub const SPARSITY_THRESHOLD: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Averaged prediction of both branches.
    F,
    F0,
    F1,
    /// Branch 0 with modality 1 replaced by its mean squeeze.
    F0Marginal,
    F1Marginal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HBarSource {
    /// One full pass over the training set at diagnosis time.
    Recomputed,
    /// Running means collected during regular training steps.
    Running,
}

/// `(h̄0, h̄1)` of one module; `None` before any sample.
pub type ModuleMeans = (Option<Vec<f64>>, Option<Vec<f64>>);

/// Mean squeezed vectors `(h̄0, h̄1)` per fusion module.
#[derive(Clone, Debug, PartialEq)]
pub struct HBar {
    pub modules: Vec<(RunningMean, RunningMean)>,
    pub source: HBarSource,
}

impl HBar {
    /// Exact means over `train`, evaluation-mode normalization.
    pub fn recompute(net: &MultiModalNet, train: &Split) -> Result<HBar> {
        if train.is_empty() {
            return Err(Error::Empty { op: "compute_h_bar" });
        }
        let mut modules: Vec<(RunningMean, RunningMean)> = net
            .fusions
            .iter()
            .map(|(_, m)| (RunningMean::new(m.c0), RunningMean::new(m.c1)))
            .collect();
        for idx in chunks(train.len()) {
            let (x0, x1, _) = train.gather(&idx);
            let mut g = Graph::new();
            let out = net.forward(&mut g, Some(&x0), Some(&x1), FusionMode::Regular, Phase::Eval)?;
            for ((m0, m1), t) in modules.iter_mut().zip(&out.traces) {
                m0.observe_rows(t.h0.as_ref().expect("regular mode squeezes both"));
                m1.observe_rows(t.h1.as_ref().expect("regular mode squeezes both"));
            }
        }
        Ok(HBar {
            modules,
            source: HBarSource::Recomputed,
        })
    }

    pub fn running(net: &MultiModalNet) -> HBar {
        HBar {
            modules: net.fusions.iter().map(|(_, m)| (m.stats.h0.clone(), m.stats.h1.clone())).collect(),
            source: HBarSource::Running,
        }
    }

    pub fn means(&self) -> Vec<ModuleMeans> {
        self.modules.iter().map(|(a, b)| (a.mean(), b.mean())).collect()
    }

    /// Copy of `net` whose marginal modes use these means.
    pub fn install(&self, net: &MultiModalNet) -> MultiModalNet {
        let mut n = net.clone();
        for ((_, m), (h0, h1)) in n.fusions.iter_mut().zip(&self.modules) {
            m.stats.h0 = h0.clone();
            m.stats.h1 = h1.clone();
        }
        n
    }
}

fn chunks(n: usize) -> Vec<Vec<usize>> {
    (0..n).collect::<Vec<_>>().chunks(EVAL_CHUNK).map(|c| c.to_vec()).collect()
}

fn count_correct(probs: &Tensor, labels: &[usize]) -> usize {
    predict_rows(probs).iter().zip(labels).filter(|(p, y)| p == y).count()
}

/// Correct-prediction counts for several variants sharing one split.
fn correct_counts(net: &MultiModalNet, split: &Split, variants: &[Variant]) -> Result<Vec<usize>> {
    let mut counts = vec![0usize; variants.len()];
    let need = |mode: FusionMode| {
        variants.iter().any(|v| match v {
            Variant::F | Variant::F0 | Variant::F1 => mode == FusionMode::Regular,
            Variant::F0Marginal => mode == FusionMode::MarginalM0,
            Variant::F1Marginal => mode == FusionMode::MarginalM1,
        })
    };
    for idx in chunks(split.len()) {
        let (x0, x1, y) = split.gather(&idx);
        for mode in [FusionMode::Regular, FusionMode::MarginalM0, FusionMode::MarginalM1] {
            if !need(mode) {
                continue;
            }
            let mut g = Graph::new();
            let out = net.forward(&mut g, Some(&x0), Some(&x1), mode, Phase::Eval)?;
            for (c, v) in counts.iter_mut().zip(variants) {
                let probs = match (v, mode) {
                    (Variant::F, FusionMode::Regular) => out.probs.as_ref(),
                    (Variant::F0, FusionMode::Regular) | (Variant::F0Marginal, FusionMode::MarginalM0) => out.probs0.as_ref(),
                    (Variant::F1, FusionMode::Regular) | (Variant::F1Marginal, FusionMode::MarginalM1) => out.probs1.as_ref(),
                    _ => None,
                };
                if let Some(p) = probs {
                    *c += count_correct(p, &y);
                }
            }
        }
    }
    Ok(counts)
}

/// Fraction of correct argmax predictions. Marginal variants use the
/// network's installed fusion means (see [`HBar::install`]).
pub fn accuracy(net: &MultiModalNet, variant: Variant, split: &Split) -> Result<f64> {
    accuracies(net, &[variant], split).map(|v| v[0])
}

pub fn accuracies(net: &MultiModalNet, variants: &[Variant], split: &Split) -> Result<Vec<f64>> {
    if split.is_empty() {
        return Err(Error::Empty { op: "accuracy" });
    }
    let n = split.len() as f64;
    Ok(correct_counts(net, split, variants)?.into_iter().map(|c| c as f64 / n).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilizationReport {
    pub a_f: f64,
    pub a_f0: f64,
    pub a_f0_marginal: f64,
    pub a_f1: f64,
    pub a_f1_marginal: f64,
    /// `(A(f1) − A(f1′)) / A(f1)`
    pub u_m0_given_m1: f64,
    /// `(A(f0) − A(f0′)) / A(f0)`
    pub u_m1_given_m0: f64,
    /// `u(m1|m0) − u(m0|m1)`
    pub diff_util: f64,
    pub h_bar_source: HBarSource,
    /// A marginalized branch beat its full counterpart, so |u| may exceed
    /// the usual bound.
    pub marginal_exceeds_full: bool,
    pub dataset: Option<String>,
    pub checkpoint: Option<String>,
}

/// Utilization rates from the four branch accuracies; values are not clamped.
pub fn utilization_from(a_f0: f64, a_f0_marginal: f64, a_f1: f64, a_f1_marginal: f64) -> Result<(f64, f64, f64)> {
    if a_f0 <= 0.0 {
        return Err(Error::UtilizationUndefined("f0"));
    }
    if a_f1 <= 0.0 {
        return Err(Error::UtilizationUndefined("f1"));
    }
    let u01 = (a_f1 - a_f1_marginal) / a_f1;
    let u10 = (a_f0 - a_f0_marginal) / a_f0;
    Ok((u01, u10, u10 - u01))
}

pub fn utilization(net: &MultiModalNet, test: &Split, h_bar: &HBar) -> Result<UtilizationReport> {
    let net = h_bar.install(net);
    let acc = accuracies(
        &net,
        &[Variant::F, Variant::F0, Variant::F0Marginal, Variant::F1, Variant::F1Marginal],
        test,
    )?;
    let (a_f, a_f0, a_f0m, a_f1, a_f1m) = (acc[0], acc[1], acc[2], acc[3], acc[4]);
    let (u01, u10, diff) = utilization_from(a_f0, a_f0m, a_f1, a_f1m)?;
    Ok(UtilizationReport {
        a_f,
        a_f0,
        a_f0_marginal: a_f0m,
        a_f1,
        a_f1_marginal: a_f1m,
        u_m0_given_m1: u01,
        u_m1_given_m0: u10,
        diff_util: diff,
        h_bar_source: h_bar.source,
        marginal_exceeds_full: a_f0m > a_f0 || a_f1m > a_f1,
        dataset: None,
        checkpoint: None,
    })
}

/// Fraction of trainable scalars with magnitude below 1e-7.
pub fn sparsity_fraction(net: &MultiModalNet) -> f64 {
    let tensors = net.params.entries().iter().map(|e| &e.value);
    sparsity_of(tensors)
}

pub fn sparsity_of<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> f64 {
    let (mut small, mut total) = (0usize, 0usize);
    for t in tensors {
        small += t.data().iter().filter(|v| v.abs() < SPARSITY_THRESHOLD).count();
        total += t.len();
    }
    if total == 0 {
        0.0
    } else {
        small as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn utilization_arithmetic() {
        let (u01, _, _) = utilization_from(0.5, 0.5, 0.8, 0.6).unwrap();
        assert!((u01 - 0.25).abs() < 1e-15);
        assert!(matches!(utilization_from(0.0, 0.0, 0.5, 0.5), Err(Error::UtilizationUndefined(_))));
    }

    #[test]
    fn sparsity_threshold() {
        let t = Tensor::vector(vec![0.0, 1e-8, 0.5, 1e-6]);
        assert_eq!(sparsity_of([&t]), 0.5);
        assert_eq!(sparsity_of([&Tensor::zeros(&[3])]), 1.0);
    }
}
