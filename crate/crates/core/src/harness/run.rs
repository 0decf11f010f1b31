//! Full training runs and their per-epoch records.

use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::drop::{DropConfig, GaussianKernelTable};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, RngStream};
use crate::theory::VarianceReport;

use super::metrics::DEFAULT_ECE_BINS;
use super::model::{build_model, ModelConfig};
use super::optim::AdamW;
use super::task::{Batch, Dataset, SyntheticTask};
use super::train::{evaluate_dataset, grad_variance_probe, train_step, DropState};

/// Probe stream id under the drop seed; training draws use stream 0.
const PROBE_STREAM: u64 = 1;
const PROBE_ORDER_LABEL: u64 = 0x7072_6f62;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub ece_bins: usize,
    /// Probe batches for the per-epoch `grad_var` column.
    pub probe_batches: usize,
    /// Probe batches for the final variance report.
    pub final_probe_batches: usize,
    /// Write measured milliseconds to `wall_ms`; when false the column is 0
    /// so that reruns are byte-identical.
    pub record_wall_time: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ece_bins: DEFAULT_ECE_BINS,
            probe_batches: 4,
            final_probe_batches: 10,
            record_wall_time: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ece_bins == 0 {
            return Err(Error::Config("eval: ece_bins must be positive".into()));
        }
        if self.probe_batches < 2 || self.final_probe_batches < 2 {
            return Err(Error::Config("eval: probe batch counts must be >= 2".into()));
        }
        Ok(())
    }
}

/// Everything that determines a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: SyntheticTask,
    pub model: ModelConfig,
    pub optim: super::optim::OptimConfig,
    pub drop: DropConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.model.validate()?;
        self.optim.validate()?;
        self.eval.validate()?;
        let t = &self.task;
        let m = &self.model;
        if (t.vocab, t.seq_len, t.classes) != (m.vocab, m.seq_len, m.classes) {
            return Err(Error::Config(format!(
                "model (vocab {}, seq_len {}, classes {}) does not match task (vocab {}, seq_len {}, classes {})",
                m.vocab, m.seq_len, m.classes, t.vocab, t.seq_len, t.classes
            )));
        }
        self.drop.validate(t.seq_len)?;
        let batches = self.optim.steps_per_epoch(t.train_size);
        let needed = self.eval.probe_batches.max(self.eval.final_probe_batches);
        if batches < needed {
            return Err(Error::Config(format!(
                "eval: {needed} probe batches requested but the training set only has {batches}"
            )));
        }
        Ok(())
    }

    /// Replaces the task, model, shuffle and drop seeds with children of `seed`.
    pub fn reseeded(mut self, seed: u64) -> Self {
        self.task.seed = derive_seed(seed, 1);
        self.model.seed = derive_seed(seed, 2);
        self.optim.shuffle_seed = derive_seed(seed, 3);
        self.drop.seed = derive_seed(seed, 4);
        self
    }
}

/// One CSV row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub task_loss: f64,
    pub cons_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub ece: f64,
    pub grad_var: f64,
    pub wall_ms: u64,
}

pub const CSV_HEADER: &str = "epoch,task_loss,cons_loss,train_acc,val_acc,ece,grad_var,wall_ms";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: RunConfig,
    pub parameters: usize,
    pub rows: Vec<EpochRow>,
    pub final_variance: VarianceReport,
}

impl RunRecord {
    pub fn last(&self) -> &EpochRow {
        self.rows.last().expect("a run has at least one epoch")
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// JSON sidecar: config, seeds, final variance report and the rows.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Writes `<stem>.csv` and `<stem>.json` under `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        File::create(dir.join(format!("{stem}.csv")))?.write_all(self.to_csv()?.as_bytes())?;
        File::create(dir.join(format!("{stem}.json")))?.write_all(self.to_json()?.as_bytes())?;
        Ok(())
    }
}

/// Fixed probe batches drawn once from the training set.
fn probe_batches(train: &Dataset, batch_size: usize, count: usize, seed: u64) -> Vec<Batch> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    RngStream::new(derive_seed(seed, PROBE_ORDER_LABEL)).shuffle(&mut order);
    order.chunks(batch_size).take(count).map(|c| train.batch(c)).collect()
}

/// Trains a model end to end. `table` overrides the config's kernel table
/// (e.g. one loaded from disk); it must match `drop.w` and `drop.sigma_max`.
pub fn run(config: &RunConfig, table: Option<GaussianKernelTable>) -> Result<RunRecord> {
    config.validate()?;
    let table = match table {
        Some(t) => {
            t.validate()?;
            if t.w != config.drop.w || t.sigma_max != config.drop.sigma_max {
                return Err(Error::Config(format!(
                    "kernel table (w {}, sigma_max {}) does not match drop config (w {}, sigma_max {})",
                    t.w, t.sigma_max, config.drop.w, config.drop.sigma_max
                )));
            }
            Some(t)
        }
        None => config.drop.kernel_table()?,
    };
    let (train, val) = config.task.generate()?;
    let mut model = build_model(&config.model)?;
    let optim_cfg = &config.optim;
    let steps_per_epoch = optim_cfg.steps_per_epoch(train.len());
    let mut optim = AdamW::new(optim_cfg.clone(), model.params(), steps_per_epoch * optim_cfg.epochs);
    let mut drop = DropState::with_table(config.drop.clone(), table);
    let mut probe_rng = RngStream::with_stream(config.drop.seed, PROBE_STREAM);
    let mut shuffle_rng = RngStream::new(optim_cfg.shuffle_seed);
    let eval = &config.eval;
    let probes = probe_batches(
        &train,
        optim_cfg.batch_size,
        eval.probe_batches.max(eval.final_probe_batches),
        optim_cfg.shuffle_seed,
    );

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rows = Vec::with_capacity(optim_cfg.epochs);
    for epoch in 1..=optim_cfg.epochs {
        let start = Instant::now();
        shuffle_rng.shuffle(&mut order);
        let (mut task_sum, mut cons_sum, mut correct) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(optim_cfg.batch_size) {
            let batch = train.batch(chunk);
            let stats = train_step(&mut model, &batch, &mut drop, &mut optim)?;
            let n = batch.size() as f64;
            task_sum += stats.task_loss * n;
            cons_sum += stats.cons_loss * n;
            correct += stats.correct;
        }
        let val_stats = evaluate_dataset(&model, &val, optim_cfg.batch_size, eval.ece_bins)?;
        let probe = grad_variance_probe(
            &model,
            &probes[..eval.probe_batches],
            &drop.config,
            drop.table.as_ref(),
            &mut probe_rng,
        )?;
        let n = train.len() as f64;
        let row = EpochRow {
            epoch,
            task_loss: task_sum / n,
            cons_loss: cons_sum / n,
            train_acc: correct as f64 / n,
            val_acc: val_stats.accuracy,
            ece: val_stats.ece,
            grad_var: probe.var_ad,
            wall_ms: if eval.record_wall_time { start.elapsed().as_millis() as u64 } else { 0 },
        };
        let finite = [row.task_loss, row.cons_loss, row.train_acc, row.val_acc, row.ece, row.grad_var]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Contract(format!("non-finite statistics in epoch {epoch}: {row:?}")));
        }
        rows.push(row);
    }
    let final_variance = grad_variance_probe(
        &model,
        &probes[..eval.final_probe_batches],
        &drop.config,
        drop.table.as_ref(),
        &mut probe_rng,
    )?;
    Ok(RunRecord {
        config: config.clone(),
        parameters: model.num_parameters(),
        rows,
        final_variance,
    })
}
