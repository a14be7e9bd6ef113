//! Seeded bimodal datasets.
//!
//! The shortcut dataset pairs a gray image of a per-class blob prototype
//! (modality 1) with the same image tinted by a color (modality 0). The color
//! agrees with the label with probability `p` per split, high on train and
//! low on validation/test, so color is a shortcut that stops working after
//! training.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::rng::streams;
use crate::ndcore::{Rng, Tensor};
use crate::persist;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSpec {
    pub classes: usize,
    pub size: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub p_train: f64,
    pub p_val: f64,
    pub p_test: f64,
    pub sigma_shape: f64,
    /// Prototypes are translated by up to this many pixels per axis.
    pub max_shift: usize,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            classes: 10,
            size: 12,
            n_train: 5000,
            n_val: 1000,
            n_test: 1000,
            p_train: 0.99,
            p_val: 0.1,
            p_test: 0.1,
            sigma_shape: 1.5,
            max_shift: 0,
            seed: 0,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.size < 3 {
            return Err(Error::Config(format!("image size {} is below 3", self.size)));
        }
        let chance = 1.0 / self.classes as f64;
        for (name, p) in [("p_train", self.p_train), ("p_val", self.p_val), ("p_test", self.p_test)] {
            if !(chance - 1e-12..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} outside [1/K, 1]")));
            }
        }
        if !(self.sigma_shape >= 0.0 && self.sigma_shape.is_finite()) {
            return Err(Error::Config(format!("sigma_shape = {}", self.sigma_shape)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    M0,
    M1,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetKind {
    Shortcut,
    /// Both slots hold the named modality of the shortcut data.
    Duplicated {
        source: Modality,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    /// `[N × C0 × S × S]`
    pub x0: Tensor,
    /// `[N × C1 × S × S]`
    pub x1: Tensor,
    pub labels: Vec<usize>,
    /// Tint index per sample (the shortcut feature).
    pub colors: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows `idx` of both modalities with their labels.
    pub fn gather(&self, idx: &[usize]) -> (Tensor, Tensor, Vec<usize>) {
        (
            self.x0.gather_rows(idx),
            self.x1.gather_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// The split with modality slots exchanged.
    pub fn swapped(&self) -> Split {
        Split {
            x0: self.x1.clone(),
            x1: self.x0.clone(),
            labels: self.labels.clone(),
            colors: self.colors.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BimodalDataset {
    pub spec: GeneratorSpec,
    pub kind: DatasetKind,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

impl BimodalDataset {
    pub fn channels(&self) -> (usize, usize) {
        (self.train.x0.shape()[1], self.train.x1.shape()[1])
    }

    pub fn swapped(&self) -> BimodalDataset {
        BimodalDataset {
            spec: self.spec.clone(),
            kind: self.kind,
            train: self.train.swapped(),
            val: self.val.swapped(),
            test: self.test.swapped(),
        }
    }

    /// Short stable identifier derived from the spec and kind.
    pub fn id(&self) -> String {
        let text = serde_json::to_string(&(&self.spec, &self.kind)).expect("spec serializes");
        persist::sha256_hex(text.as_bytes())[..12].to_string()
    }
}

/// RGB tint for color index `c` of `k`: evenly spaced hues at full
/// saturation and value.
pub fn palette(c: usize, k: usize) -> [f64; 3] {
    let h = 6.0 * c as f64 / k as f64;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    match h as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

/// Binary blob per class: Gaussian noise, two passes of a 3×3 box blur,
/// thresholded at zero.
pub fn prototypes(k: usize, s: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    (0..k)
        .map(|_| {
            let mut f: Vec<f64> = (0..s * s).map(|_| rng.normal()).collect();
            for _ in 0..2 {
                let mut g = vec![0.0; s * s];
                for i in 0..s {
                    for j in 0..s {
                        let mut acc = 0.0;
                        for di in -1i64..=1 {
                            for dj in -1i64..=1 {
                                let (a, b) = (i as i64 + di, j as i64 + dj);
                                if a >= 0 && b >= 0 && (a as usize) < s && (b as usize) < s {
                                    acc += f[a as usize * s + b as usize];
                                }
                            }
                        }
                        g[i * s + j] = acc / 9.0;
                    }
                }
                f = g;
            }
            f.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect()
        })
        .collect()
}

fn render_split(spec: &GeneratorSpec, protos: &[Vec<f64>], n: usize, p: f64, rng: &mut Rng) -> Result<Split> {
    let (k, s) = (spec.classes, spec.size);
    let px = s * s;
    let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    rng.shuffle(&mut labels);
    let mut x0 = Vec::with_capacity(n * 3 * px);
    let mut x1 = Vec::with_capacity(n * px);
    let mut colors = Vec::with_capacity(n);
    let mut gray = vec![0.0; px];
    for &y in &labels {
        let c = if rng.uniform() < p {
            y
        } else {
            let other = rng.below(k - 1);
            if other >= y {
                other + 1
            } else {
                other
            }
        };
        let span = 2 * spec.max_shift + 1;
        let (di, dj) = if spec.max_shift > 0 {
            (
                rng.below(span) as i64 - spec.max_shift as i64,
                rng.below(span) as i64 - spec.max_shift as i64,
            )
        } else {
            (0, 0)
        };
        for i in 0..s {
            for j in 0..s {
                let (a, b) = (i as i64 - di, j as i64 - dj);
                let v = if a >= 0 && b >= 0 && (a as usize) < s && (b as usize) < s {
                    protos[y][a as usize * s + b as usize]
                } else {
                    0.0
                };
                gray[i * s + j] = v + spec.sigma_shape * rng.normal();
            }
        }
        x1.extend_from_slice(&gray);
        for tint in palette(c, k) {
            x0.extend(gray.iter().map(|v| v * tint));
        }
        colors.push(c);
    }
    Ok(Split {
        x0: Tensor::new(vec![n, 3, s, s], x0)?,
        x1: Tensor::new(vec![n, 1, s, s], x1)?,
        labels,
        colors,
    })
}

pub fn gen_shortcut_bimodal(spec: &GeneratorSpec) -> Result<BimodalDataset> {
    spec.validate()?;
    let mut rng = Rng::with_stream(spec.seed, streams::DATA);
    let protos = prototypes(spec.classes, spec.size, &mut rng);
    let train = render_split(spec, &protos, spec.n_train, spec.p_train, &mut rng)?;
    let val = render_split(spec, &protos, spec.n_val, spec.p_val, &mut rng)?;
    let test = render_split(spec, &protos, spec.n_test, spec.p_test, &mut rng)?;
    Ok(BimodalDataset {
        spec: spec.clone(),
        kind: DatasetKind::Shortcut,
        train,
        val,
        test,
    })
}

fn replicate_channels(x: &Tensor, c: usize) -> Tensor {
    let (n, px) = (x.shape()[0], x.shape()[2] * x.shape()[3]);
    let mut out = Vec::with_capacity(n * c * px);
    for img in x.data().chunks(px) {
        for _ in 0..c {
            out.extend_from_slice(img);
        }
    }
    Tensor::new(vec![n, c, x.shape()[2], x.shape()[3]], out).expect("sizes agree")
}

/// Both slots carry the same tensor. Gray data is replicated to three
/// channels so that the default colored-slot architecture applies.
pub fn gen_duplicated(spec: &GeneratorSpec, source: Modality) -> Result<BimodalDataset> {
    let base = gen_shortcut_bimodal(spec)?;
    let dup = |s: Split| -> Split {
        let x = match source {
            Modality::M0 => s.x0,
            Modality::M1 => replicate_channels(&s.x1, 3),
        };
        Split {
            x0: x.clone(),
            x1: x,
            labels: s.labels,
            colors: s.colors,
        }
    };
    Ok(BimodalDataset {
        spec: base.spec,
        kind: DatasetKind::Duplicated { source },
        train: dup(base.train),
        val: dup(base.val),
        test: dup(base.test),
    })
}

/// Seeded permutation of `0..n` cut into batches of `batch`; the final
/// short batch is kept.
pub fn batches(n: usize, batch: usize, epoch_seed: u64) -> Vec<Vec<usize>> {
    assert!(batch >= 1, "batch size must be positive");
    let mut order: Vec<usize> = (0..n).collect();
    Rng::with_stream(epoch_seed, streams::SHUFFLE).shuffle(&mut order);
    order.chunks(batch).map(|c| c.to_vec()).collect()
}

pub const DATASET_FORMAT: u32 = 1;

#[derive(Serialize, Deserialize)]
struct SplitEntry {
    name: String,
    file: String,
    samples: usize,
    sha256: String,
}

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    format: u32,
    id: String,
    spec: GeneratorSpec,
    #[serde(flatten)]
    kind: DatasetKind,
    splits: Vec<SplitEntry>,
}

/// Write `manifest.json` plus one tensor file per split holding x0, x1,
/// labels and colors (the last two as f64 vectors).
pub fn save_dataset(ds: &BimodalDataset, dir: &Path) -> Result<()> {
    let mut entries = Vec::new();
    for (name, split) in [("train", &ds.train), ("val", &ds.val), ("test", &ds.test)] {
        let labels = Tensor::vector(split.labels.iter().map(|&v| v as f64).collect());
        let colors = Tensor::vector(split.colors.iter().map(|&v| v as f64).collect());
        let bytes = persist::encode_tensors(&[&split.x0, &split.x1, &labels, &colors]);
        let file = format!("{name}.bin");
        persist::write_file(&dir.join(&file), &bytes)?;
        entries.push(SplitEntry {
            name: name.to_string(),
            file,
            samples: split.len(),
            sha256: persist::sha256_hex(&bytes),
        });
    }
    persist::write_json(
        &dir.join("manifest.json"),
        &DatasetManifest {
            format: DATASET_FORMAT,
            id: ds.id(),
            spec: ds.spec.clone(),
            kind: ds.kind,
            splits: entries,
        },
    )
}

pub fn load_dataset(dir: &Path) -> Result<BimodalDataset> {
    let manifest_path = dir.join("manifest.json");
    let m: DatasetManifest = persist::read_json(&manifest_path)?;
    if m.format != DATASET_FORMAT {
        return Err(Error::VersionMismatch {
            found: m.format,
            expected: DATASET_FORMAT,
        });
    }
    let mut splits = Vec::new();
    for name in ["train", "val", "test"] {
        let e = m.splits.iter().find(|e| e.name == name).ok_or_else(|| Error::Corrupt {
            path: manifest_path.clone(),
            detail: format!("no {name} split"),
        })?;
        let path = dir.join(&e.file);
        let bytes = persist::read_checked(&path, &e.sha256)?;
        let mut t = persist::decode_tensors(&bytes, &path)?;
        if t.len() != 4 {
            return Err(Error::Corrupt {
                path,
                detail: format!("{} tensors, expected 4", t.len()),
            });
        }
        let to_idx = |t: Tensor| t.data().iter().map(|&v| v as usize).collect::<Vec<_>>();
        let colors = to_idx(t.pop().unwrap());
        let labels = to_idx(t.pop().unwrap());
        let x1 = t.pop().unwrap();
        let x0 = t.pop().unwrap();
        splits.push(Split { x0, x1, labels, colors });
    }
    let test = splits.pop().unwrap();
    let val = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    Ok(BimodalDataset {
        spec: m.spec,
        kind: m.kind,
        train,
        val,
        test,
    })
}
