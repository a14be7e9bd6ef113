//! Effective-update bookkeeping and conditional learning speed.
//!
//! An effective update of a parameter group is `‖G‖² / ‖θ‖²`, with the
//! gradient taken before the optimizer step and the norm after it. The
//! accumulator keeps four running sums, one per group of the partition.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::{group_sq_norm, Tensor};

/// `‖grads‖² / ‖params_post‖²` over the concatenated group.
pub fn mu<'a, 'b>(grads: impl IntoIterator<Item = &'a Tensor>, params_post: impl IntoIterator<Item = &'b Tensor>) -> Result<f64> {
    let num = group_sq_norm(grads)?;
    let den = group_sq_norm(params_post)?;
    if den == 0.0 || !den.is_finite() {
        return Err(Error::DegenerateGroup(format!("parameter norm {den}")));
    }
    Ok(num / den)
}

/// Effective updates of the four groups for one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMu {
    pub theta0: f64,
    pub fusion0: f64,
    pub theta1: f64,
    pub fusion1: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SpeedAccumulator {
    pub m_theta0: f64,
    pub m_fusion0: f64,
    pub m_theta1: f64,
    pub m_fusion1: f64,
    pub steps: u64,
}

impl SpeedAccumulator {
    pub fn new() -> Self {
        SpeedAccumulator::default()
    }

    pub fn accumulate(&mut self, mu: StepMu) {
        debug_assert!(mu.theta0 >= 0.0 && mu.fusion0 >= 0.0 && mu.theta1 >= 0.0 && mu.fusion1 >= 0.0);
        self.m_theta0 += mu.theta0;
        self.m_fusion0 += mu.fusion0;
        self.m_theta1 += mu.theta1;
        self.m_fusion1 += mu.fusion1;
        self.steps += 1;
    }

    /// `(s(m1|m0), s(m0|m1))`.
    pub fn cond_speed(&self) -> Result<(f64, f64)> {
        let sums = [self.m_theta0, self.m_fusion0, self.m_theta1, self.m_fusion1];
        if sums.iter().any(|&v| v <= 0.0) {
            return Err(Error::InsufficientWarmup("conditional speed needs positive sums"));
        }
        Ok(((self.m_fusion0 / self.m_theta0).ln(), (self.m_fusion1 / self.m_theta1).ln()))
    }

    pub fn diff_speed(&self) -> Result<f64> {
        let (s10, s01) = self.cond_speed()?;
        Ok(s10 - s01)
    }

    /// Same bookkeeping with modality labels exchanged.
    pub fn mirrored(&self) -> Self {
        SpeedAccumulator {
            m_theta0: self.m_theta1,
            m_fusion0: self.m_fusion1,
            m_theta1: self.m_theta0,
            m_fusion1: self.m_fusion0,
            steps: self.steps,
        }
    }
}

/// Per-modality effective-update sums for a k-modality network:
/// `branch[i]` over the branch consuming modality i, `fusion[i]` over the
/// fusion parameters feeding that branch's gates.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiSpeed {
    pub branch: Vec<f64>,
    pub fusion: Vec<f64>,
}

impl MultiSpeed {
    pub fn speeds(&self) -> Result<Vec<f64>> {
        if self.branch.len() != self.fusion.len() {
            return Err(Error::Config(format!(
                "{} branch sums vs {} fusion sums",
                self.branch.len(),
                self.fusion.len()
            )));
        }
        self.branch
            .iter()
            .zip(&self.fusion)
            .map(|(&b, &f)| {
                if b <= 0.0 || f <= 0.0 {
                    Err(Error::InsufficientWarmup("conditional speed needs positive sums"))
                } else {
                    Ok((f / b).ln())
                }
            })
            .collect()
    }
}

impl From<&SpeedAccumulator> for MultiSpeed {
    fn from(a: &SpeedAccumulator) -> Self {
        MultiSpeed {
            branch: vec![a.m_theta0, a.m_theta1],
            fusion: vec![a.m_fusion0, a.m_fusion1],
        }
    }
}

/// Largest gap between per-modality speeds: `(max − min, (argmax, argmin))`.
/// Ties resolve to the lowest index.
pub fn diff_speed_multi(speeds: &[f64]) -> Result<(f64, (usize, usize))> {
    if speeds.len() < 2 {
        return Err(Error::Config(format!("need at least two modalities, got {}", speeds.len())));
    }
    let (mut hi, mut lo) = (0, 0);
    for (i, &s) in speeds.iter().enumerate() {
        if s > speeds[hi] {
            hi = i;
        }
        if s < speeds[lo] {
            lo = i;
        }
    }
    Ok((speeds[hi] - speeds[lo], (hi, lo)))
}

/// One line of the per-step metrics log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpeedRecord {
    pub step: u64,
    pub m_theta0: f64,
    pub m_fusion0: f64,
    pub m_theta1: f64,
    pub m_fusion1: f64,
    pub diff_speed: Option<f64>,
}

impl SpeedRecord {
    pub fn snapshot(step: u64, acc: &SpeedAccumulator) -> Self {
        SpeedRecord {
            step,
            m_theta0: acc.m_theta0,
            m_fusion0: acc.m_fusion0,
            m_theta1: acc.m_theta1,
            m_fusion1: acc.m_fusion1,
            diff_speed: acc.diff_speed().ok(),
        }
    }

    /// Append as one JSON line.
    pub fn write_line(&self, out: &mut (impl Write + ?Sized)) -> std::io::Result<()> {
        serde_json::to_writer(&mut *out, self)?;
        out.write_all(b"\n")
    }
}
