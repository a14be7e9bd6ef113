//! Checkpoint directories: `manifest.json` plus `tensors.bin`.
//!
//! The manifest holds the format version, one entry per stored tensor
//! (name, section, shape, partition label) in blob order, the run counters,
//! and the remaining training state. Parameter, velocity and best-snapshot
//! tensors live in the blob; the manifest's copy of the state carries empty
//! placeholders in their place.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::Tensor;
use crate::params::ParamGroup;
use crate::persist;
use crate::trainers::TrainState;

pub const CHECKPOINT_FORMAT: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Section {
    Param,
    Velocity,
    BestParam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub section: Section,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Counters {
    pub epoch: usize,
    pub steps: u64,
    pub kind_counts: [u64; 3],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub blob: String,
    pub blob_sha256: String,
    pub tensors: Vec<TensorEntry>,
    pub counters: Counters,
    pub state: TrainState,
}

fn placeholder() -> Tensor {
    Tensor::zeros(&[0])
}

/// Split the state into a tensor-free skeleton and the tensors in blob order.
fn detach(state: &TrainState) -> (TrainState, Vec<TensorEntry>, Vec<Tensor>) {
    let mut skel = state.clone();
    let mut entries = Vec::new();
    let mut tensors = Vec::new();
    for e in skel.net.params.entries_mut() {
        let t = std::mem::replace(&mut e.value, placeholder());
        entries.push(TensorEntry {
            name: e.name.clone(),
            section: Section::Param,
            shape: t.shape().to_vec(),
            group: e.group,
        });
        tensors.push(t);
    }
    let groups: Vec<(String, ParamGroup)> = state.net.params.entries().iter().map(|e| (e.name.clone(), e.group)).collect();
    for (v, (name, group)) in skel.velocity.iter_mut().zip(&groups) {
        let t = std::mem::replace(v, placeholder());
        entries.push(TensorEntry {
            name: name.clone(),
            section: Section::Velocity,
            shape: t.shape().to_vec(),
            group: *group,
        });
        tensors.push(t);
    }
    if let Some(best) = &mut skel.best {
        for e in best.net.params.entries_mut() {
            let t = std::mem::replace(&mut e.value, placeholder());
            entries.push(TensorEntry {
                name: e.name.clone(),
                section: Section::BestParam,
                shape: t.shape().to_vec(),
                group: e.group,
            });
            tensors.push(t);
        }
    }
    (skel, entries, tensors)
}

pub fn save_checkpoint(state: &TrainState, dir: &Path) -> Result<()> {
    let (skel, entries, tensors) = detach(state);
    let refs: Vec<&Tensor> = tensors.iter().collect();
    let blob = persist::encode_tensors(&refs);
    persist::write_file(&dir.join(BLOB_FILE), &blob)?;
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT,
        blob: BLOB_FILE.to_string(),
        blob_sha256: persist::sha256_hex(&blob),
        tensors: entries,
        counters: Counters {
            epoch: state.epoch,
            steps: state.steps,
            kind_counts: state.kind_counts,
        },
        state: skel,
    };
    persist::write_json(&dir.join(MANIFEST_FILE), &manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<TrainState> {
    let mpath = dir.join(MANIFEST_FILE);
    let raw: serde_json::Value = persist::read_json(&mpath)?;
    let format = raw.get("format").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if format != CHECKPOINT_FORMAT {
        return Err(Error::VersionMismatch {
            found: format,
            expected: CHECKPOINT_FORMAT,
        });
    }
    let m: Manifest = serde_json::from_value(raw).map_err(|e| Error::Corrupt {
        path: mpath.clone(),
        detail: e.to_string(),
    })?;
    let bpath = dir.join(&m.blob);
    let blob = persist::read_checked(&bpath, &m.blob_sha256)?;
    let tensors = persist::decode_tensors(&blob, &bpath)?;
    if tensors.len() != m.tensors.len() {
        return Err(Error::Corrupt {
            path: bpath,
            detail: format!("{} tensors, manifest lists {}", tensors.len(), m.tensors.len()),
        });
    }
    let mut state = m.state;
    let mut it = m.tensors.iter().zip(tensors);
    let mut fill = |section: Section, slot: &mut Tensor, name: &str| -> Result<()> {
        let (e, t) = it.next().ok_or_else(|| Error::Corrupt {
            path: mpath.clone(),
            detail: "too few tensors".into(),
        })?;
        if e.section != section || e.name != name || e.shape != t.shape() {
            return Err(Error::Corrupt {
                path: mpath.clone(),
                detail: format!("tensor entry {} ({:?}) out of place", e.name, e.section),
            });
        }
        *slot = t;
        Ok(())
    };
    let names: Vec<String> = state.net.params.entries().iter().map(|e| e.name.clone()).collect();
    for e in state.net.params.entries_mut() {
        let name = e.name.clone();
        fill(Section::Param, &mut e.value, &name)?;
    }
    if state.velocity.len() != names.len() {
        return Err(Error::Corrupt {
            path: mpath.clone(),
            detail: "velocity count differs from parameter count".into(),
        });
    }
    for (v, name) in state.velocity.iter_mut().zip(&names) {
        fill(Section::Velocity, v, name)?;
    }
    if let Some(best) = &mut state.best {
        for e in best.net.params.entries_mut() {
            let name = e.name.clone();
            fill(Section::BestParam, &mut e.value, &name)?;
        }
    }
    if it.next().is_some() {
        return Err(Error::Corrupt {
            path: mpath,
            detail: "unreferenced tensors in blob".into(),
        });
    }
    Ok(state)
}
