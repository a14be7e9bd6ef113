//! MMTM-style gated fusion between two branches.
//!
//! Each module squeezes both branches' feature maps to channel vectors,
//! projects their concatenation through a shared bottleneck, and rescales
//! each branch's maps channel-wise by `2·σ(gate)`.
//!
//! Besides regular operation the module supports two marginalized modes,
//! where one side's squeezed vector is replaced by its training-set mean so
//! that the other branch cannot see that modality, and two re-balancing
//! modes, where one branch's gate is frozen at its running-mean activation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::{Graph, Rng, Tensor, Var};
use crate::params::{ParamGroup, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FusionMode {
    Regular,
    /// Branch 0 only; its gates see the mean of branch 1's squeeze.
    MarginalM0,
    /// Branch 1 only; its gates see the mean of branch 0's squeeze.
    MarginalM1,
    /// Branch 0 gated by its mean activation, branch 1 per-sample.
    RebalanceM0,
    /// Branch 1 gated by its mean activation, branch 0 per-sample.
    RebalanceM1,
}

impl FusionMode {
    pub fn runs_branch0(self) -> bool {
        self != FusionMode::MarginalM1
    }

    pub fn runs_branch1(self) -> bool {
        self != FusionMode::MarginalM0
    }

    pub fn mirrored(self) -> Self {
        match self {
            FusionMode::Regular => FusionMode::Regular,
            FusionMode::MarginalM0 => FusionMode::MarginalM1,
            FusionMode::MarginalM1 => FusionMode::MarginalM0,
            FusionMode::RebalanceM0 => FusionMode::RebalanceM1,
            FusionMode::RebalanceM1 => FusionMode::RebalanceM0,
        }
    }
}

/// Streaming mean of fixed-width vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningMean {
    pub sum: Vec<f64>,
    pub count: u64,
}

impl RunningMean {
    pub fn new(width: usize) -> Self {
        RunningMean {
            sum: vec![0.0; width],
            count: 0,
        }
    }

    /// Add every row of a `[B×width]` batch.
    pub fn observe_rows(&mut self, rows: &Tensor) {
        let w = self.sum.len();
        for row in rows.data().chunks(w.max(1)) {
            for (s, v) in self.sum.iter_mut().zip(row) {
                *s += v;
            }
        }
        self.count += (rows.len() / w.max(1)) as u64;
    }

    pub fn mean(&self) -> Option<Vec<f64>> {
        if self.count == 0 {
            return None;
        }
        let n = self.count as f64;
        Some(self.sum.iter().map(|s| s / n).collect())
    }

    pub fn width(&self) -> usize {
        self.sum.len()
    }
}

/// Means of squeezed vectors (`h`) and pre-sigmoid gate activations (`w`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionStats {
    pub h0: RunningMean,
    pub h1: RunningMean,
    pub w0: RunningMean,
    pub w1: RunningMean,
}

impl FusionStats {
    pub fn new(c0: usize, c1: usize) -> Self {
        FusionStats {
            h0: RunningMean::new(c0),
            h1: RunningMean::new(c1),
            w0: RunningMean::new(c0),
            w1: RunningMean::new(c1),
        }
    }
}

/// Slot indices of one module's parameters inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionSlots {
    pub w_joint: usize,
    pub b_joint: usize,
    pub w0: usize,
    pub b0: usize,
    pub w1: usize,
    pub b1: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionModule {
    pub c0: usize,
    pub c1: usize,
    pub hidden: usize,
    pub slots: FusionSlots,
    pub stats: FusionStats,
}

/// Per-sample values seen by a module during one forward pass.
#[derive(Clone, Debug, Default)]
pub struct FusionTrace {
    pub h0: Option<Tensor>,
    pub h1: Option<Tensor>,
    pub w0: Option<Tensor>,
    pub w1: Option<Tensor>,
}

/// Bottleneck width used when none is configured: `max(1, ⌊(C+C′)/4⌋)`.
pub fn default_hidden(c0: usize, c1: usize) -> usize {
    ((c0 + c1) / 4).max(1)
}

impl FusionModule {
    /// Allocate and initialize the module's six parameter tensors in `store`.
    pub fn new(store: &mut ParamStore, prefix: &str, c0: usize, c1: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        if hidden == 0 || c0 == 0 || c1 == 0 {
            return Err(Error::Config(format!(
                "fusion widths must be positive (C={c0}, C'={c1}, H={hidden})"
            )));
        }
        let cat = c0 + c1;
        let slots = FusionSlots {
            w_joint: store.push_init(format!("{prefix}.joint.weight"), ParamGroup::Joint, &[cat, hidden], cat, rng),
            b_joint: store.push_init(format!("{prefix}.joint.bias"), ParamGroup::Joint, &[hidden], cat, rng),
            w0: store.push_init(format!("{prefix}.gate0.weight"), ParamGroup::Gate0, &[hidden, c0], hidden, rng),
            b0: store.push_init(format!("{prefix}.gate0.bias"), ParamGroup::Gate0, &[c0], hidden, rng),
            w1: store.push_init(format!("{prefix}.gate1.weight"), ParamGroup::Gate1, &[hidden, c1], hidden, rng),
            b1: store.push_init(format!("{prefix}.gate1.bias"), ParamGroup::Gate1, &[c1], hidden, rng),
        };
        Ok(FusionModule {
            c0,
            c1,
            hidden,
            slots,
            stats: FusionStats::new(c0, c1),
        })
    }

    /// Global-average-pool each side's feature map to `[B×C]`.
    pub fn squeeze(&self, g: &mut Graph, a0: Option<Var>, a1: Option<Var>) -> Result<(Option<Var>, Option<Var>)> {
        let h0 = a0.map(|a| self.squeeze_one(g, a, self.c0)).transpose()?;
        let h1 = a1.map(|a| self.squeeze_one(g, a, self.c1)).transpose()?;
        Ok((h0, h1))
    }

    fn squeeze_one(&self, g: &mut Graph, a: Var, channels: usize) -> Result<Var> {
        let s = g.value(a).shape();
        if s.len() < 2 || s[1] != channels {
            return Err(Error::shape("squeeze", s, &[s.first().copied().unwrap_or(0), channels]));
        }
        g.gap(a)
    }

    fn broadcast_mean(g: &mut Graph, mean: &RunningMean, batch: usize, what: &'static str) -> Result<Var> {
        let m = mean.mean().ok_or(Error::StatsNotWarmedUp(what))?;
        let mut data = Vec::with_capacity(batch * m.len());
        for _ in 0..batch {
            data.extend_from_slice(&m);
        }
        Ok(g.constant(Tensor::new(vec![batch, m.len()], data)?))
    }

    /// Joint excitation `g([h0, h1])`.
    ///
    /// In the marginal modes the missing side is replaced by its stored mean
    /// and only the evaluated branch's gate is produced.
    pub fn excite(
        &self,
        g: &mut Graph,
        vars: &[Var],
        h0: Option<Var>,
        h1: Option<Var>,
        mode: FusionMode,
    ) -> Result<(Option<Var>, Option<Var>)> {
        let (in0, in1) = match mode {
            FusionMode::MarginalM0 => {
                let h0 = h0.ok_or(Error::MissingInput("excite: h0"))?;
                let b = g.value(h0).shape()[0];
                (h0, Self::broadcast_mean(g, &self.stats.h1, b, "h̄1")?)
            }
            FusionMode::MarginalM1 => {
                let h1 = h1.ok_or(Error::MissingInput("excite: h1"))?;
                let b = g.value(h1).shape()[0];
                (Self::broadcast_mean(g, &self.stats.h0, b, "h̄0")?, h1)
            }
            _ => (
                h0.ok_or(Error::MissingInput("excite: h0"))?,
                h1.ok_or(Error::MissingInput("excite: h1"))?,
            ),
        };
        let z = g.concat(in0, in1)?;
        let pre = g.matmul(z, vars[self.slots.w_joint])?;
        let pre = g.add_row_bias(pre, vars[self.slots.b_joint])?;
        let hid = g.relu(pre);
        let w0 = if mode != FusionMode::MarginalM1 {
            let w = g.matmul(hid, vars[self.slots.w0])?;
            Some(g.add_row_bias(w, vars[self.slots.b0])?)
        } else {
            None
        };
        let w1 = if mode != FusionMode::MarginalM0 {
            let w = g.matmul(hid, vars[self.slots.w1])?;
            Some(g.add_row_bias(w, vars[self.slots.b1])?)
        } else {
            None
        };
        Ok((w0, w1))
    }

    fn mean_gate(&self, g: &mut Graph, mean: &RunningMean, what: &'static str) -> Result<Var> {
        let m = mean.mean().ok_or(Error::StatsNotWarmedUp(what))?;
        Ok(g.constant(Tensor::vector(m)))
    }

    /// Rescale feature maps by `2·σ(gate)`; re-balancing modes substitute
    /// the stored mean activation for one side's per-sample gate.
    pub fn apply_gates(
        &self,
        g: &mut Graph,
        a0: Option<Var>,
        a1: Option<Var>,
        w0: Option<Var>,
        w1: Option<Var>,
        mode: FusionMode,
    ) -> Result<(Option<Var>, Option<Var>)> {
        let gate0 = match (mode, a0) {
            (_, None) => None,
            (FusionMode::RebalanceM0, Some(_)) => Some(self.mean_gate(g, &self.stats.w0, "w̄0")?),
            (_, Some(_)) => Some(w0.ok_or(Error::MissingInput("apply_gates: w0"))?),
        };
        let gate1 = match (mode, a1) {
            (_, None) => None,
            (FusionMode::RebalanceM1, Some(_)) => Some(self.mean_gate(g, &self.stats.w1, "w̄1")?),
            (_, Some(_)) => Some(w1.ok_or(Error::MissingInput("apply_gates: w1"))?),
        };
        let out0 = match (a0, gate0) {
            (Some(a), Some(w)) => Some(g.channel_scale(a, w)?),
            _ => None,
        };
        let out1 = match (a1, gate1) {
            (Some(a), Some(w)) => Some(g.channel_scale(a, w)?),
            _ => None,
        };
        Ok((out0, out1))
    }

    /// Fold a regular step's per-sample vectors into the running means.
    pub fn update_stats(&mut self, trace: &FusionTrace) {
        if let Some(h) = &trace.h0 {
            self.stats.h0.observe_rows(h);
        }
        if let Some(h) = &trace.h1 {
            self.stats.h1.observe_rows(h);
        }
        if let Some(w) = &trace.w0 {
            self.stats.w0.observe_rows(w);
        }
        if let Some(w) = &trace.w1 {
            self.stats.w1.observe_rows(w);
        }
    }

    /// Run squeeze → excite → gate on one pair of feature maps.
    pub fn forward(
        &self,
        g: &mut Graph,
        vars: &[Var],
        a0: Option<Var>,
        a1: Option<Var>,
        mode: FusionMode,
    ) -> Result<(Option<Var>, Option<Var>, FusionTrace)> {
        let (h0, h1) = self.squeeze(g, a0, a1)?;
        let (w0, w1) = self.excite(g, vars, h0, h1, mode)?;
        let (o0, o1) = self.apply_gates(g, a0, a1, w0, w1, mode)?;
        let trace = FusionTrace {
            h0: h0.map(|v| g.value(v).clone()),
            h1: h1.map(|v| g.value(v).clone()),
            w0: w0.map(|v| g.value(v).clone()),
            w1: w1.map(|v| g.value(v).clone()),
        };
        Ok((o0, o1, trace))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn module(c0: usize, c1: usize, seed: u64) -> (ParamStore, FusionModule) {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let m = FusionModule::new(&mut store, "f", c0, c1, default_hidden(c0, c1), &mut rng).unwrap();
        (store, m)
    }

    #[test]
    fn hidden_width_rule() {
        assert_eq!(default_hidden(8, 16), 6);
        assert_eq!(default_hidden(1, 1), 1);
        assert_eq!(default_hidden(16, 32), 12);
    }

    #[test]
    fn squeeze_constant_and_vector_inputs() {
        let (_, m) = module(2, 3, 1);
        let mut g = Graph::new();
        let a0 = g.constant(Tensor::full(&[1, 2, 3, 3], 1.5));
        let a1 = g.constant(Tensor::full(&[1, 3, 2, 2], -2.0));
        let (h0, h1) = m.squeeze(&mut g, Some(a0), Some(a1)).unwrap();
        assert_eq!(g.value(h0.unwrap()).data(), &[1.5, 1.5]);
        assert_eq!(g.value(h1.unwrap()).data(), &[-2.0; 3]);

        let v0 = g.constant(Tensor::new(vec![1, 2], vec![0.1, 0.2]).unwrap());
        let (h0, _) = m.squeeze(&mut g, Some(v0), None).unwrap();
        assert_eq!(g.value(h0.unwrap()).data(), &[0.1, 0.2]);

        let wrong = g.constant(Tensor::zeros(&[1, 4, 2, 2]));
        assert!(m.squeeze(&mut g, Some(wrong), None).is_err());
    }

    #[test]
    fn zero_joint_weights_collapse_to_gate_bias() {
        let (mut store, m) = module(2, 3, 4);
        *store.get_mut(m.slots.w_joint) = Tensor::zeros(&[5, 1]);
        *store.get_mut(m.slots.b_joint) = Tensor::zeros(&[1]);
        let mut g = Graph::new();
        let vars = store.bind(&mut g);
        let h0 = g.constant(Tensor::new(vec![2, 2], vec![1.0, -7.0, 3.0, 0.5]).unwrap());
        let h1 = g.constant(Tensor::new(vec![2, 3], vec![9.0, 1.0, 2.0, -1.0, 0.0, 4.0]).unwrap());
        let (w0, w1) = m.excite(&mut g, &vars, Some(h0), Some(h1), FusionMode::Regular).unwrap();
        let b0 = store.get(m.slots.b0).data();
        let b1 = store.get(m.slots.b1).data();
        for row in g.value(w0.unwrap()).data().chunks(2) {
            assert_eq!(row, b0);
        }
        for row in g.value(w1.unwrap()).data().chunks(3) {
            assert_eq!(row, b1);
        }
    }

    #[test]
    fn marginal_requires_warm_stats() {
        let (store, m) = module(2, 2, 5);
        let mut g = Graph::new();
        let vars = store.bind(&mut g);
        let h0 = g.constant(Tensor::zeros(&[1, 2]));
        let err = m.excite(&mut g, &vars, Some(h0), None, FusionMode::MarginalM0).unwrap_err();
        assert!(matches!(err, Error::StatsNotWarmedUp(_)));
        let a0 = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
        let err = m
            .apply_gates(&mut g, Some(a0), None, None, None, FusionMode::RebalanceM0)
            .unwrap_err();
        assert!(matches!(err, Error::StatsNotWarmedUp(_)));
    }

    #[test]
    fn marginal_m0_ignores_h1() {
        let (store, mut m) = module(2, 3, 6);
        m.stats.h1.observe_rows(&Tensor::new(vec![1, 3], vec![0.3, -0.2, 1.0]).unwrap());
        let run = |h1_data: Vec<f64>| {
            let mut g = Graph::new();
            let vars = store.bind(&mut g);
            let h0 = g.constant(Tensor::new(vec![1, 2], vec![0.7, -0.4]).unwrap());
            let h1 = g.constant(Tensor::new(vec![1, 3], h1_data).unwrap());
            let (w0, w1) = m.excite(&mut g, &vars, Some(h0), Some(h1), FusionMode::MarginalM0).unwrap();
            assert!(w1.is_none());
            g.value(w0.unwrap()).clone()
        };
        assert_eq!(run(vec![1.0, 2.0, 3.0]), run(vec![-5.0, 0.0, 8.0]));
    }

    #[test]
    fn rebalance_m0_gate_is_constant_across_samples() {
        let (_, mut m) = module(1, 1, 7);
        m.stats.w0.observe_rows(&Tensor::new(vec![2, 1], vec![0.4, 1.2]).unwrap());
        let mut g = Graph::new();
        let a0 = g.constant(Tensor::new(vec![2, 1, 1, 1], vec![3.0, 3.0]).unwrap());
        let a1 = g.constant(Tensor::new(vec![2, 1, 1, 1], vec![1.0, -4.0]).unwrap());
        let w0 = g.constant(Tensor::new(vec![2, 1], vec![-9.0, 9.0]).unwrap());
        let w1 = g.constant(Tensor::new(vec![2, 1], vec![0.0, 0.0]).unwrap());
        let (o0, o1) = m
            .apply_gates(&mut g, Some(a0), Some(a1), Some(w0), Some(w1), FusionMode::RebalanceM0)
            .unwrap();
        let o0 = g.value(o0.unwrap()).data();
        assert_eq!(o0[0], o0[1]);
        let expect = 3.0 * 2.0 / (1.0 + (-0.8f64).exp());
        assert!((o0[0] - expect).abs() < 1e-14);
        assert_eq!(g.value(o1.unwrap()).data(), &[1.0, -4.0]);
    }

    #[test]
    fn running_mean_examples() {
        let mut r = RunningMean::new(2);
        assert!(r.mean().is_none());
        r.observe_rows(&Tensor::new(vec![1, 2], vec![1.5, -3.0]).unwrap());
        assert_eq!(r.mean().unwrap(), vec![1.5, -3.0]);
        r.observe_rows(&Tensor::new(vec![1, 2], vec![-1.5, 3.0]).unwrap());
        assert_eq!(r.mean().unwrap(), vec![0.0, 0.0]);
        assert_eq!(r.count, 2);
    }
}
