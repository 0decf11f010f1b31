//! Command-line front end.
//!
//! Exit codes: 0 success, 1 configuration or validation error, 2
//! mathematical domain error, 3 I/O error.

pub mod config;

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use crate::drop::{GaussianKernelTable, DEFAULT_TABLE_STEPS};
use crate::error::{Error, Result};
use crate::harness::{run, RunConfig, RunRecord};
use crate::theory::{bound_radicand, kl_gaussian_attention, pac_bayes_bound, TheoryInputs};

pub use config::{AblationGrid, Cell, GridKind, RunConfigFile};

#[derive(Debug, Parser)]
#[command(name = "attndrop", version, about = "Attention-logit perturbation experiments")]
pub struct Cli {
    /// Derive every seed in the run configuration from this value.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a Gaussian kernel table as JSON.
    PrecomputeKernels {
        #[arg(long, default_value_t = 5)]
        w: usize,
        #[arg(long, default_value_t = 0.5)]
        sigma_max: f64,
        #[arg(long, default_value_t = DEFAULT_TABLE_STEPS)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one training configuration and write its CSV and JSON.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides `output.dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the hyperparameter grid and write a summary CSV.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long, value_enum, default_value_t = GridKind::All)]
        grid: GridKind,
    },
    /// Print the instantiated PAC-Bayes bound as JSON.
    Theory {
        #[arg(long)]
        heads: usize,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        sigma: f64,
        #[arg(long)]
        samples: usize,
        #[arg(long)]
        delta: f64,
        #[arg(long, default_value_t = 0.0)]
        emp_risk: f64,
    },
}

/// Runs a parsed command, writing any primary output to `stdout`.
pub fn execute(cli: Cli, stdout: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::PrecomputeKernels { w, sigma_max, steps, out } => {
            let table = GaussianKernelTable::new(w, sigma_max, steps)?;
            table.save(&out)?;
            writeln!(stdout, "wrote {} kernel rows to {}", table.steps, out.display())?;
        }
        Command::Train { config, out } => {
            let file = load_with_seed(&config, cli.seed)?;
            let table = file.kernel_table.as_deref().map(GaussianKernelTable::load).transpose()?;
            let record = run(&file.run_config()?, table)?;
            let dir = out.unwrap_or_else(|| file.output.dir.clone());
            record.write(&dir, &file.output.name)?;
            let last = record.last();
            writeln!(
                stdout,
                "{}: {} epochs, val_acc {:.4}, ece {:.4}",
                dir.join(&file.output.name).display(),
                record.rows.len(),
                last.val_acc,
                last.ece
            )?;
        }
        Command::Ablate { config, out, jobs, grid } => {
            let file = load_with_seed(&config, cli.seed)?;
            let cells = file.ablation.cells(&file.run_config()?, grid);
            let summary = ablate(&cells, &out, jobs)?;
            let failed = summary.iter().filter(|r| r.status != "ok").count();
            writeln!(
                stdout,
                "{} cells, {} failed; summary at {}",
                summary.len(),
                failed,
                out.join(SUMMARY_FILE).display()
            )?;
        }
        Command::Theory {
            heads,
            n,
            sigma,
            samples,
            delta,
            emp_risk,
        } => {
            let inputs = TheoryInputs {
                heads,
                seq_len: n,
                samples,
                delta,
                sigma,
                empirical_risk: emp_risk,
            };
            theory(&inputs, stdout)?;
        }
    }
    Ok(())
}

fn load_with_seed(path: &Path, seed: Option<u64>) -> Result<RunConfigFile> {
    let mut file = RunConfigFile::load(path)?;
    if seed.is_some() {
        file.seed = seed;
    }
    Ok(file)
}

#[derive(Serialize)]
struct TheoryReport {
    kl: f64,
    radicand: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    bound: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<DomainReport>,
}

#[derive(Serialize)]
struct DomainReport {
    kind: &'static str,
    message: String,
}

/// Prints `{kl, radicand, bound}` or, on a negative radicand,
/// `{kl, radicand, error}` and returns the domain error.
pub fn theory(inputs: &TheoryInputs, stdout: &mut dyn Write) -> Result<()> {
    inputs.validate()?;
    let kl = kl_gaussian_attention(inputs.heads, inputs.seq_len, inputs.sigma)?;
    let radicand = bound_radicand(inputs.samples, inputs.delta, kl);
    let outcome = pac_bayes_bound(inputs, kl);
    let report = match &outcome {
        Ok(b) => TheoryReport {
            kl,
            radicand,
            bound: Some(*b),
            error: None,
        },
        Err(e @ Error::Domain { .. }) => TheoryReport {
            kl,
            radicand,
            bound: None,
            error: Some(DomainReport {
                kind: "domain",
                message: e.to_string(),
            }),
        },
        Err(_) => return outcome.map(|_| ()),
    };
    writeln!(stdout, "{}", serde_json::to_string_pretty(&report)?)?;
    outcome.map(|_| ())
}

pub const SUMMARY_FILE: &str = "summary.csv";

#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct SummaryRow {
    pub cell: String,
    pub variant: String,
    pub p: f64,
    pub k: usize,
    pub sigma_max: f64,
    pub w: usize,
    pub consistency: bool,
    pub lambda: f64,
    pub drop_seed: u64,
    pub status: String,
    pub val_acc: Option<f64>,
    pub ece: Option<f64>,
    pub task_loss: Option<f64>,
    pub error: String,
}

fn summary_row(cell: &Cell, outcome: &Result<RunRecord>) -> SummaryRow {
    let d = &cell.config.drop;
    let last = outcome.as_ref().ok().map(|r| r.last());
    SummaryRow {
        cell: cell.name.clone(),
        variant: format!("{:?}", d.variant),
        p: d.p,
        k: d.k,
        sigma_max: d.sigma_max,
        w: d.w,
        consistency: d.consistency,
        lambda: d.lambda,
        drop_seed: d.seed,
        status: if outcome.is_ok() { "ok" } else { "failed" }.into(),
        val_acc: last.map(|r| r.val_acc),
        ece: last.map(|r| r.ece),
        task_loss: last.map(|r| r.task_loss),
        error: outcome.as_ref().err().map(|e| e.to_string()).unwrap_or_default(),
    }
}

fn run_cell(config: &RunConfig, dir: &Path, name: &str) -> Result<RunRecord> {
    let record = run(config, None)?;
    record.write(dir, name)?;
    Ok(record)
}

/// Runs every cell on up to `jobs` threads. A failing cell is recorded in
/// the summary and does not stop the others. Rows follow `cells` order.
pub fn ablate(cells: &[Cell], out: &Path, jobs: usize) -> Result<Vec<SummaryRow>> {
    if jobs == 0 {
        return Err(Error::Config("--jobs must be positive".into()));
    }
    std::fs::create_dir_all(out)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let rows: Vec<SummaryRow> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| summary_row(cell, &run_cell(&cell.config, out, &cell.name)))
            .collect()
    });
    let mut w = csv::Writer::from_path(out.join(SUMMARY_FILE))?;
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(rows)
}
