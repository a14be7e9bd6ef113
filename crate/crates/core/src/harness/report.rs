//! `summary.csv` and histogram bins from a directory of run records.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::run::RunRecord;
use crate::error::{Error, Result};
use crate::persist;

pub const HIST_LO: f64 = -1.5;
pub const HIST_HI: f64 = 1.5;
pub const HIST_BINS: usize = 30;

pub const CSV_HEADER: [&str; 24] = [
    "run_id",
    "dataset_id",
    "algorithm",
    "lr",
    "seed",
    "lambda",
    "q",
    "alpha",
    "epochs_completed",
    "best_epoch",
    "best_val_acc",
    "test_acc",
    "a_f0",
    "a_f0_marginal",
    "a_f1",
    "a_f1_marginal",
    "u_m0_given_m1",
    "u_m1_given_m0",
    "diff_util",
    "diff_speed",
    "t_steps",
    "sparsity",
    "status",
    "wall_time_s",
];

/// Every `record.json` below `root`, sorted by path.
pub fn collect_records(root: &Path) -> Result<Vec<RunRecord>> {
    let mut paths: Vec<PathBuf> = walkdir::WalkDir::new(root)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file() && e.file_name() == "record.json")
        .map(|e| e.into_path())
        .collect();
    paths.sort();
    paths.iter().map(|p| persist::read_json(p)).collect()
}

/// Records in a canonical order (run id, then dataset).
pub fn canonical_order(records: &mut [RunRecord]) {
    records.sort_by(|a, b| (&a.run_id, &a.dataset_id).cmp(&(&b.run_id, &b.dataset_id)));
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_summary_csv(records: &[RunRecord], path: &Path) -> Result<()> {
    let mut sorted = records.to_vec();
    canonical_order(&mut sorted);
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Corrupt {
        path: path.to_path_buf(),
        detail: e.to_string(),
    };
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in &sorted {
        let status = match &r.status {
            crate::trainers::RunStatus::Failed(_) => "failed".to_string(),
            s => serde_json::to_value(s)?.as_str().unwrap_or("unknown").to_string(),
        };
        w.write_record([
            r.run_id.clone(),
            r.dataset_id.clone(),
            r.algorithm.as_str().to_string(),
            r.lr.to_string(),
            r.seed.to_string(),
            r.lambda.to_string(),
            r.q.to_string(),
            opt(r.alpha),
            r.epochs_completed.to_string(),
            opt(r.best_epoch),
            opt(r.best_val_acc),
            opt(r.test_acc),
            opt(r.a_f0),
            opt(r.a_f0_marginal),
            opt(r.a_f1),
            opt(r.a_f1_marginal),
            opt(r.u_m0_given_m1),
            opt(r.u_m1_given_m0),
            opt(r.diff_util),
            opt(r.diff_speed),
            opt(r.t_steps),
            opt(r.sparsity),
            status,
            r.wall_time_s.to_string(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Corrupt {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    persist::write_file(path, &bytes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub width: f64,
    pub counts: Vec<usize>,
    pub below: usize,
    pub above: usize,
}

/// Fixed bins of width 0.1 over [−1.5, 1.5]; bins are half-open except the
/// last, which includes 1.5.
pub fn histogram(values: &[f64]) -> Histogram {
    let width = (HIST_HI - HIST_LO) / HIST_BINS as f64;
    let mut h = Histogram {
        lo: HIST_LO,
        hi: HIST_HI,
        width,
        counts: vec![0; HIST_BINS],
        below: 0,
        above: 0,
    };
    for &v in values {
        if v < HIST_LO {
            h.below += 1;
        } else if v > HIST_HI {
            h.above += 1;
        } else {
            let b = (((v - HIST_LO) / width).floor() as usize).min(HIST_BINS - 1);
            h.counts[b] += 1;
        }
    }
    h
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramReport {
    pub excluded_failed: usize,
    pub diff_util: Histogram,
    pub diff_speed: Histogram,
}

pub fn histograms(records: &[RunRecord]) -> HistogramReport {
    let ok: Vec<&RunRecord> = records.iter().filter(|r| !r.failed()).collect();
    HistogramReport {
        excluded_failed: records.len() - ok.len(),
        diff_util: histogram(&ok.iter().filter_map(|r| r.diff_util).collect::<Vec<_>>()),
        diff_speed: histogram(&ok.iter().filter_map(|r| r.diff_speed).collect::<Vec<_>>()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_edges() {
        let h = histogram(&[-1.5, -1.45, 0.0, 1.5, 1.6, -2.0]);
        assert_eq!(h.counts[0], 2);
        assert_eq!(h.counts[15], 1);
        assert_eq!(h.counts[29], 1);
        assert_eq!((h.below, h.above), (1, 1));
    }
}
