//! Two-branch network with fusion modules at configured depths.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{default_hidden, FusionMode, FusionModule, FusionTrace};
use crate::ndcore::{BatchStats, Graph, Rng, Tensor, Var};
use crate::params::{ParamGroup, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        #[serde(default = "yes")]
        batch_norm: bool,
    },
    /// Fully connected; conv feature maps are flattened first.
    Linear {
        out_features: usize,
        #[serde(default)]
        batch_norm: bool,
    },
}

fn yes() -> bool {
    true
}

impl LayerSpec {
    pub fn out_channels(&self) -> usize {
        match self {
            LayerSpec::Conv { out_channels, .. } => *out_channels,
            LayerSpec::Linear { out_features, .. } => *out_features,
        }
    }

    fn batch_norm(&self) -> bool {
        match self {
            LayerSpec::Conv { batch_norm, .. } | LayerSpec::Linear { batch_norm, .. } => *batch_norm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchSpec {
    /// Channels of the input (`[B×C×H×W]`) or features (`[B×C]`).
    pub in_channels: usize,
    /// Spatial extent `(H, W)` of image inputs; `None` for vector inputs.
    pub input_hw: Option<(usize, usize)>,
    pub layers: Vec<LayerSpec>,
}

/// How the two branch outputs are merged into the prediction `ŷ`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// `ŷ = ½(softmax(z₀) + softmax(z₁))`
    #[default]
    Probabilities,
    /// `ŷ = softmax(½(z₀ + z₁))`
    Logits,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub branch0: BranchSpec,
    pub branch1: BranchSpec,
    /// Zero-based layer indices after which a fusion module is inserted.
    pub fusion_after: Vec<usize>,
    pub classes: usize,
    /// Fusion bottleneck width; `None` uses `max(1, ⌊(C+C′)/4⌋)`.
    #[serde(default)]
    pub fusion_hidden: Option<usize>,
    #[serde(default)]
    pub averaging: Averaging,
}

impl NetSpec {
    /// Three conv layers per branch (8→16→32, kernel 3, strides 2/2/1) with
    /// fusion after the second and third layer.
    pub fn desk_default(in0: usize, in1: usize, size: usize, classes: usize) -> Self {
        let layers = vec![
            LayerSpec::Conv {
                out_channels: 8,
                kernel: 3,
                stride: 2,
                padding: 1,
                batch_norm: true,
            },
            LayerSpec::Conv {
                out_channels: 16,
                kernel: 3,
                stride: 2,
                padding: 1,
                batch_norm: true,
            },
            LayerSpec::Conv {
                out_channels: 32,
                kernel: 3,
                stride: 1,
                padding: 1,
                batch_norm: true,
            },
        ];
        NetSpec {
            branch0: BranchSpec {
                in_channels: in0,
                input_hw: Some((size, size)),
                layers: layers.clone(),
            },
            branch1: BranchSpec {
                in_channels: in1,
                input_hw: Some((size, size)),
                layers,
            },
            fusion_after: vec![1, 2],
            classes,
            fusion_hidden: None,
            averaging: Averaging::Probabilities,
        }
    }

    /// Same architecture with the two branches exchanged.
    pub fn mirrored(&self) -> Self {
        NetSpec {
            branch0: self.branch1.clone(),
            branch1: self.branch0.clone(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        let depth = self.branch0.layers.len();
        if self.branch1.layers.len() != depth {
            return Err(Error::Config("branches must have the same number of layers".into()));
        }
        for &d in &self.fusion_after {
            if d >= depth {
                return Err(Error::Config(format!("fusion depth {d} beyond {depth} layers")));
            }
        }
        let mut sorted = self.fusion_after.clone();
        sorted.dedup();
        if sorted.len() != self.fusion_after.len() || !self.fusion_after.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config("fusion depths must be strictly increasing".into()));
        }
        for b in [&self.branch0, &self.branch1] {
            if b.in_channels == 0 || b.layers.iter().any(|l| l.out_channels() == 0) {
                return Err(Error::Config("layer widths must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormState {
    pub gamma: usize,
    pub beta: usize,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub spec: LayerSpec,
    pub weight: usize,
    pub bias: Option<usize>,
    pub norm: Option<NormState>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub layers: Vec<Layer>,
    pub head_weight: usize,
    pub head_bias: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Batch-norm uses batch statistics.
    Train,
    /// Batch-norm uses running statistics.
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiModalNet {
    pub spec: NetSpec,
    pub params: ParamStore,
    pub branch0: Branch,
    pub branch1: Branch,
    /// `(layer index, module)` in increasing depth.
    pub fusions: Vec<(usize, FusionModule)>,
}

/// Batch statistics observed by one normalization layer.
#[derive(Clone, Debug)]
pub struct NormUpdate {
    pub branch: usize,
    pub layer: usize,
    pub stats: BatchStats,
}

pub struct ForwardOut {
    pub logits0: Option<Var>,
    pub logits1: Option<Var>,
    pub probs0: Option<Tensor>,
    pub probs1: Option<Tensor>,
    /// Averaged prediction; present only when both branches ran.
    pub probs: Option<Tensor>,
    pub traces: Vec<FusionTrace>,
    pub norm_updates: Vec<NormUpdate>,
}

/// Row-wise softmax of a `[B×K]` tensor.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let k = logits.shape()[1];
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}

/// Argmax with ties resolved to the lowest index.
pub fn predict(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// Row-wise [`predict`] over a `[B×K]` tensor.
pub fn predict_rows(probs: &Tensor) -> Vec<usize> {
    let k = probs.shape()[1];
    probs.data().chunks(k).map(predict).collect()
}

fn build_branch(store: &mut ParamStore, spec: &BranchSpec, group: ParamGroup, name: &str, classes: usize, rng: &mut Rng) -> Result<Branch> {
    let mut layers = Vec::with_capacity(spec.layers.len());
    let mut channels = spec.in_channels;
    let mut hw = spec.input_hw;
    for (i, ls) in spec.layers.iter().enumerate() {
        let prefix = format!("{name}.layer{i}");
        let (weight, fan_in, next_hw) = match ls {
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                let (h, w) = hw.ok_or_else(|| Error::Config(format!("{prefix}: conv layer needs image input")))?;
                if *kernel > h + 2 * padding || *kernel > w + 2 * padding || *stride == 0 {
                    return Err(Error::Config(format!("{prefix}: kernel {kernel} does not fit {h}×{w}")));
                }
                let fan_in = channels * kernel * kernel;
                let slot = store.push_init(
                    format!("{prefix}.weight"),
                    group,
                    &[*out_channels, channels, *kernel, *kernel],
                    fan_in,
                    rng,
                );
                let next = ((h + 2 * padding - kernel) / stride + 1, (w + 2 * padding - kernel) / stride + 1);
                (slot, fan_in, Some(next))
            }
            LayerSpec::Linear { out_features, .. } => {
                let fan_in = channels * hw.map_or(1, |(h, w)| h * w);
                let slot = store.push_init(format!("{prefix}.weight"), group, &[fan_in, *out_features], fan_in, rng);
                (slot, fan_in, None)
            }
        };
        let out = ls.out_channels();
        let (bias, norm) = if ls.batch_norm() {
            let gamma = store.push(format!("{prefix}.bn.gamma"), group, Tensor::full(&[out], 1.0));
            let beta = store.push(format!("{prefix}.bn.beta"), group, Tensor::zeros(&[out]));
            let norm = NormState {
                gamma,
                beta,
                running_mean: vec![0.0; out],
                running_var: vec![1.0; out],
            };
            (None, Some(norm))
        } else {
            (Some(store.push_init(format!("{prefix}.bias"), group, &[out], fan_in, rng)), None)
        };
        layers.push(Layer {
            spec: ls.clone(),
            weight,
            bias,
            norm,
        });
        channels = out;
        hw = next_hw;
    }
    let head_weight = store.push_init(format!("{name}.head.weight"), group, &[channels, classes], channels, rng);
    let head_bias = store.push_init(format!("{name}.head.bias"), group, &[classes], channels, rng);
    Ok(Branch {
        layers,
        head_weight,
        head_bias,
    })
}

impl MultiModalNet {
    pub fn new(spec: NetSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new();
        let branch0 = build_branch(&mut params, &spec.branch0, ParamGroup::Branch0, "branch0", spec.classes, rng)?;
        let branch1 = build_branch(&mut params, &spec.branch1, ParamGroup::Branch1, "branch1", spec.classes, rng)?;
        let mut fusions = Vec::new();
        for &d in &spec.fusion_after {
            let c0 = spec.branch0.layers[d].out_channels();
            let c1 = spec.branch1.layers[d].out_channels();
            let hidden = spec.fusion_hidden.unwrap_or_else(|| default_hidden(c0, c1));
            let m = FusionModule::new(&mut params, &format!("fusion{d}"), c0, c1, hidden, rng)?;
            fusions.push((d, m));
        }
        Ok(MultiModalNet {
            spec,
            params,
            branch0,
            branch1,
            fusions,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    fn layer_forward(&self, g: &mut Graph, vars: &[Var], layer: &Layer, x: Var, phase: Phase) -> Result<(Var, Option<BatchStats>)> {
        let mut y = match &layer.spec {
            LayerSpec::Conv { stride, padding, .. } => g.conv2d(x, vars[layer.weight], *stride, *padding)?,
            LayerSpec::Linear { .. } => {
                let s = g.value(x).shape().to_vec();
                let x = if s.len() > 2 {
                    g.reshape(x, &[s[0], s[1..].iter().product()])?
                } else {
                    x
                };
                g.matmul(x, vars[layer.weight])?
            }
        };
        if let Some(b) = layer.bias {
            y = if g.value(y).rank() == 2 {
                g.add_row_bias(y, vars[b])?
            } else {
                g.add_channel_bias(y, vars[b])?
            };
        }
        let mut stats = None;
        if let Some(n) = &layer.norm {
            let running = match phase {
                Phase::Train => None,
                Phase::Eval => Some((n.running_mean.as_slice(), n.running_var.as_slice())),
            };
            let (out, s) = g.batch_norm(y, vars[n.gamma], vars[n.beta], running)?;
            y = out;
            stats = s;
        }
        Ok((g.relu(y), stats))
    }

    fn head(&self, g: &mut Graph, vars: &[Var], branch: &Branch, x: Var) -> Result<Var> {
        let h = g.gap(x)?;
        let z = g.matmul(h, vars[branch.head_weight])?;
        g.add_row_bias(z, vars[branch.head_bias])
    }

    /// Forward pass under `mode`.
    ///
    /// Marginal modes evaluate only their own branch, so the other input may
    /// be omitted.
    pub fn forward(&self, g: &mut Graph, x0: Option<&Tensor>, x1: Option<&Tensor>, mode: FusionMode, phase: Phase) -> Result<ForwardOut> {
        let vars = self.params.bind(g);
        self.forward_bound(g, &vars, x0, x1, mode, phase)
    }

    pub fn forward_bound(
        &self,
        g: &mut Graph,
        vars: &[Var],
        x0: Option<&Tensor>,
        x1: Option<&Tensor>,
        mode: FusionMode,
        phase: Phase,
    ) -> Result<ForwardOut> {
        let mut a0 = if mode.runs_branch0() {
            Some(g.constant(x0.ok_or(Error::MissingInput("forward: x0"))?.clone()))
        } else {
            None
        };
        let mut a1 = if mode.runs_branch1() {
            Some(g.constant(x1.ok_or(Error::MissingInput("forward: x1"))?.clone()))
        } else {
            None
        };
        if let (Some(a), Some(b)) = (a0, a1) {
            let (ba, bb) = (g.value(a).shape()[0], g.value(b).shape()[0]);
            if ba != bb {
                return Err(Error::shape("forward: batch", g.value(a).shape(), g.value(b).shape()));
            }
        }

        let mut norm_updates = Vec::new();
        let mut traces = Vec::with_capacity(self.fusions.len());
        let mut next_fusion = self.fusions.iter().peekable();
        for i in 0..self.branch0.layers.len() {
            if let Some(x) = a0 {
                let (y, s) = self.layer_forward(g, vars, &self.branch0.layers[i], x, phase)?;
                if let Some(stats) = s {
                    norm_updates.push(NormUpdate {
                        branch: 0,
                        layer: i,
                        stats,
                    });
                }
                a0 = Some(y);
            }
            if let Some(x) = a1 {
                let (y, s) = self.layer_forward(g, vars, &self.branch1.layers[i], x, phase)?;
                if let Some(stats) = s {
                    norm_updates.push(NormUpdate {
                        branch: 1,
                        layer: i,
                        stats,
                    });
                }
                a1 = Some(y);
            }
            if let Some((_, m)) = next_fusion.next_if(|(d, _)| *d == i) {
                let (o0, o1, trace) = m.forward(g, vars, a0, a1, mode)?;
                a0 = o0;
                a1 = o1;
                traces.push(trace);
            }
        }

        let logits0 = a0.map(|x| self.head(g, vars, &self.branch0, x)).transpose()?;
        let logits1 = a1.map(|x| self.head(g, vars, &self.branch1, x)).transpose()?;
        let probs0 = logits0.map(|z| softmax_rows(g.value(z)));
        let probs1 = logits1.map(|z| softmax_rows(g.value(z)));
        let probs = match (logits0, logits1) {
            (Some(z0), Some(z1)) => Some(match self.spec.averaging {
                Averaging::Probabilities => {
                    let (p0, p1) = (probs0.as_ref().unwrap(), probs1.as_ref().unwrap());
                    p0.zip_map(p1, "average", |a, b| 0.5 * (a + b))?
                }
                Averaging::Logits => softmax_rows(&g.value(z0).zip_map(g.value(z1), "average", |a, b| 0.5 * (a + b))?),
            }),
            _ => None,
        };
        Ok(ForwardOut {
            logits0,
            logits1,
            probs0,
            probs1,
            probs,
            traces,
            norm_updates,
        })
    }

    /// Sum of the two modality-specific cross-entropies.
    pub fn loss(g: &mut Graph, logits0: Var, logits1: Var, labels: &[usize]) -> Result<Var> {
        let l0 = g.softmax_cross_entropy(logits0, labels)?;
        let l1 = g.softmax_cross_entropy(logits1, labels)?;
        g.add(l0, l1)
    }

    /// Fold training-mode batch statistics into the running estimates.
    pub fn apply_norm_updates(&mut self, updates: &[NormUpdate]) {
        for u in updates {
            let branch = if u.branch == 0 { &mut self.branch0 } else { &mut self.branch1 };
            if let Some(n) = &mut branch.layers[u.layer].norm {
                for (r, m) in n.running_mean.iter_mut().zip(&u.stats.mean) {
                    *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
                }
                for (r, v) in n.running_var.iter_mut().zip(&u.stats.var) {
                    *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v;
                }
            }
        }
    }

    /// Fold a regular step's traces into every fusion module's statistics.
    pub fn update_fusion_stats(&mut self, traces: &[FusionTrace]) {
        for ((_, m), t) in self.fusions.iter_mut().zip(traces) {
            m.update_stats(t);
        }
    }

    /// Central-difference check of every parameter's gradient of the
    /// two-branch loss on one batch, with batch-norm in training mode.
    pub fn grad_check(&self, x0: &Tensor, x1: &Tensor, labels: &[usize], mode: FusionMode) -> Result<crate::ndcore::GradCheckReport> {
        self.grad_check_with(x0, x1, labels, mode, Graph::new)
    }

    #[doc(hidden)]
    pub fn grad_check_with(
        &self,
        x0: &Tensor,
        x1: &Tensor,
        labels: &[usize],
        mode: FusionMode,
        graph: impl Fn() -> Graph,
    ) -> Result<crate::ndcore::GradCheckReport> {
        let params = self.params.tensors();
        let mut build = |g: &mut Graph, vars: &[Var]| -> Result<Var> {
            let out = self.forward_bound(g, vars, Some(x0), Some(x1), mode, Phase::Train)?;
            match (out.logits0, out.logits1) {
                (Some(z0), Some(z1)) => MultiModalNet::loss(g, z0, z1, labels),
                (Some(z), None) | (None, Some(z)) => g.softmax_cross_entropy(z, labels),
                (None, None) => unreachable!("at least one branch runs"),
            }
        };
        crate::ndcore::gradcheck::grad_check_with(&params, graph, &mut build)
    }

    pub fn partition(&self) -> ParamPartition {
        ParamPartition::of(&self.params)
    }

    /// The same network with the roles of the two modalities exchanged:
    /// branches, gate projections and the two halves of every joint input
    /// weight are swapped, so evaluating it on swapped inputs yields swapped
    /// outputs.
    pub fn mirrored(&self) -> MultiModalNet {
        let spec = self.spec.mirrored();
        let old = self.params.entries();
        let mut params = ParamStore::new();
        let mut remap = vec![usize::MAX; old.len()];

        let mut copy_branch = |params: &mut ParamStore, from: &Branch, group: ParamGroup, name: &str| -> Branch {
            let mut take = |slot: usize, params: &mut ParamStore| {
                let e = &old[slot];
                let suffix = e.name.split_once('.').map_or("", |(_, s)| s);
                let new = params.push(format!("{name}.{suffix}"), group, e.value.clone());
                remap[slot] = new;
                new
            };
            let layers = from
                .layers
                .iter()
                .map(|l| Layer {
                    spec: l.spec.clone(),
                    weight: take(l.weight, params),
                    bias: l.bias.map(|b| take(b, params)),
                    norm: l.norm.as_ref().map(|n| NormState {
                        gamma: take(n.gamma, params),
                        beta: take(n.beta, params),
                        running_mean: n.running_mean.clone(),
                        running_var: n.running_var.clone(),
                    }),
                })
                .collect();
            Branch {
                layers,
                head_weight: take(from.head_weight, params),
                head_bias: take(from.head_bias, params),
            }
        };
        let branch0 = copy_branch(&mut params, &self.branch1, ParamGroup::Branch0, "branch0");
        let branch1 = copy_branch(&mut params, &self.branch0, ParamGroup::Branch1, "branch1");

        let fusions = self
            .fusions
            .iter()
            .map(|(d, m)| {
                let prefix = format!("fusion{d}");
                let wj = self.params.get(m.slots.w_joint);
                // rows [0, C) read h0 and rows [C, C+C′) read h1; swap the blocks
                let (c0, c1, h) = (m.c0, m.c1, m.hidden);
                let mut swapped = Vec::with_capacity(wj.len());
                swapped.extend_from_slice(&wj.data()[c0 * h..(c0 + c1) * h]);
                swapped.extend_from_slice(&wj.data()[..c0 * h]);
                let slots = crate::fusion::FusionSlots {
                    w_joint: params.push(
                        format!("{prefix}.joint.weight"),
                        ParamGroup::Joint,
                        Tensor::new(vec![c0 + c1, h], swapped).expect("same size"),
                    ),
                    b_joint: params.push(
                        format!("{prefix}.joint.bias"),
                        ParamGroup::Joint,
                        self.params.get(m.slots.b_joint).clone(),
                    ),
                    w0: params.push(
                        format!("{prefix}.gate0.weight"),
                        ParamGroup::Gate0,
                        self.params.get(m.slots.w1).clone(),
                    ),
                    b0: params.push(
                        format!("{prefix}.gate0.bias"),
                        ParamGroup::Gate0,
                        self.params.get(m.slots.b1).clone(),
                    ),
                    w1: params.push(
                        format!("{prefix}.gate1.weight"),
                        ParamGroup::Gate1,
                        self.params.get(m.slots.w0).clone(),
                    ),
                    b1: params.push(
                        format!("{prefix}.gate1.bias"),
                        ParamGroup::Gate1,
                        self.params.get(m.slots.b0).clone(),
                    ),
                };
                let stats = crate::fusion::FusionStats {
                    h0: m.stats.h1.clone(),
                    h1: m.stats.h0.clone(),
                    w0: m.stats.w1.clone(),
                    w1: m.stats.w0.clone(),
                };
                (
                    *d,
                    FusionModule {
                        c0: c1,
                        c1: c0,
                        hidden: h,
                        slots,
                        stats,
                    },
                )
            })
            .collect();
        MultiModalNet {
            spec,
            params,
            branch0,
            branch1,
            fusions,
        }
    }
}

/// The four parameter groups used by learning-speed tracking.
///
/// `fusion0`/`fusion1` share the joint projections; every other slot
/// belongs to exactly one group.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamPartition {
    pub branch0: Vec<usize>,
    pub branch1: Vec<usize>,
    pub fusion0: Vec<usize>,
    pub fusion1: Vec<usize>,
}

impl ParamPartition {
    pub fn of(store: &ParamStore) -> Self {
        ParamPartition {
            branch0: store.slots_in(&[ParamGroup::Branch0]),
            branch1: store.slots_in(&[ParamGroup::Branch1]),
            fusion0: store.slots_in(&[ParamGroup::Joint, ParamGroup::Gate0]),
            fusion1: store.slots_in(&[ParamGroup::Joint, ParamGroup::Gate1]),
        }
    }

    /// Slots shared by both fusion groups.
    pub fn shared(&self) -> Vec<usize> {
        self.fusion0.iter().filter(|s| self.fusion1.contains(s)).copied().collect()
    }
}
