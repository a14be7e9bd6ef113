//! Command-line front end. Exit codes: 0 success, 1 run failure, 2 usage.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::report::{collect_records, histograms, write_summary_csv};
use super::run::{finish, init_net, run_id, RunConfig};
use super::sweep::{l1_study, sweep, SweepSpec};
use crate::diagnose::{utilization, HBar};
use crate::error::{Error, Result};
use crate::persist;
use crate::synthdata::{gen_duplicated, gen_shortcut_bimodal, load_dataset, save_dataset, GeneratorSpec, Modality};
use crate::trainers::TrainState;

#[derive(Parser, Debug)]
#[command(name = "mmlab", version, about = "Multi-modal fusion training lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum DupSource {
    M0,
    M1,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum HBarArg {
    Recomputed,
    Running,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a dataset directory from a generator spec.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Put the named modality in both slots.
        #[arg(long, value_enum)]
        duplicate: Option<DupSource>,
    },
    /// Train one run; writes checkpoint/, record.json, epochs.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from out/checkpoint if present.
        #[arg(long)]
        resume: bool,
    },
    /// Run a sweep; writes runs/<id>/ and aggregate.json.
    Sweep {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Also write l1_study.json.
        #[arg(long)]
        l1: bool,
    },
    /// Utilization report for the best snapshot of a checkpoint.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "recomputed")]
        h_bar: HBarArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize every record.json under a directory.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Histogram bins; defaults to <out>.hist.json.
        #[arg(long)]
        hist: Option<PathBuf>,
    },
}

/// Parse `argv` and execute; returns the process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let msg = serde_json::json!({ "error": e.to_string() });
            eprintln!("{msg}");
            1
        }
    }
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { spec, out, duplicate } => {
            let spec: GeneratorSpec = persist::read_json(&spec)?;
            let ds = match duplicate {
                None => gen_shortcut_bimodal(&spec)?,
                Some(DupSource::M0) => gen_duplicated(&spec, Modality::M0)?,
                Some(DupSource::M1) => gen_duplicated(&spec, Modality::M1)?,
            };
            save_dataset(&ds, &out)?;
            println!("{}", out.display());
            Ok(())
        }
        Command::Train { config, out, resume } => train(&config, &out, resume),
        Command::Sweep { spec, out, jobs, l1 } => {
            let spec: SweepSpec = persist::read_json(&spec)?;
            let ds = load_dataset(Path::new(&spec.dataset))?;
            let records = sweep(&ds, &spec, jobs, Some(&out))?;
            if l1 {
                persist::write_json(&out.join("l1_study.json"), &l1_study(&records)?)?;
            }
            let failed = records.iter().filter(|r| r.failed()).count();
            println!("{} runs, {} failed", records.len(), failed);
            Ok(())
        }
        Command::Diagnose {
            checkpoint,
            data,
            h_bar,
            out,
        } => {
            let state = load_checkpoint(&checkpoint)?;
            let ds = load_dataset(&data)?;
            let best = state.best.as_ref().ok_or(Error::MissingInput("checkpoint has no best snapshot"))?;
            let hb = match h_bar {
                HBarArg::Recomputed => HBar::recompute(&best.net, &ds.train)?,
                HBarArg::Running => HBar::running(&best.net),
            };
            let mut r = utilization(&best.net, &ds.test, &hb)?;
            r.dataset = Some(ds.id());
            r.checkpoint = Some(format!("{}@epoch{}", checkpoint.display(), best.epoch));
            match out {
                Some(p) => persist::write_json(&p, &r)?,
                None => println!("{}", serde_json::to_string_pretty(&r)?),
            }
            Ok(())
        }
        Command::Report { runs, out, hist } => {
            let records = collect_records(&runs)?;
            write_summary_csv(&records, &out)?;
            let hist = hist.unwrap_or_else(|| out.with_extension("hist.json"));
            persist::write_json(&hist, &histograms(&records))?;
            println!("{} records", records.len());
            Ok(())
        }
    }
}

fn train(config: &Path, out: &Path, resume: bool) -> Result<()> {
    let t0 = Instant::now();
    let rc: RunConfig = persist::read_json(config)?;
    let ds = load_dataset(Path::new(&rc.dataset))?;
    let ckpt = out.join("checkpoint");
    let mut state = if resume && ckpt.join(super::checkpoint::MANIFEST_FILE).exists() {
        let s = load_checkpoint(&ckpt)?;
        if s.config != rc.train {
            return Err(Error::Config("checkpoint was written with a different training config".into()));
        }
        s
    } else {
        TrainState::new(init_net(&ds, rc.net.as_ref(), rc.train.seed)?, rc.train.clone())?
    };
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(out.join("speed.jsonl"))
        .or_else(|_| {
            std::fs::create_dir_all(out)?;
            std::fs::OpenOptions::new().create(true).append(true).open(out.join("speed.jsonl"))
        })
        .map_err(|e| Error::io(out.join("speed.jsonl"), e))?;
    while !state.is_finished() {
        state.run_epoch(&ds.train, &ds.val, Some(&mut log))?;
        save_checkpoint(&state, &ckpt)?;
        persist::write_json(&out.join("epochs.json"), &state.history)?;
    }
    let (record, report) = finish(&state, &ds, rc.h_bar, run_id(&rc.train), t0.elapsed().as_secs_f64())?;
    persist::write_json(&out.join("record.json"), &record)?;
    if let Some(r) = report {
        persist::write_json(&out.join("utilization.json"), &r)?;
    }
    println!("{}", serde_json::to_string(&record)?);
    if record.failed() {
        return Err(Error::NonFinite(format!("run {} diverged", record.run_id)));
    }
    Ok(())
}
