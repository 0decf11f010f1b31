//! Training steps, clean evaluation and the paired gradient probe.

use crate::drop::{consistency_loss, total_loss, Draw, DropConfig, GaussianKernelTable, Perturber};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Graph;
use crate::theory::{variance_decomposition, VarianceReport};

use super::metrics::{accuracy, confidences, ece};
use super::model::Model;
use super::optim::AdamW;
use super::task::{Batch, Dataset};

/// Drop configuration with its kernel table and training stream.
#[derive(Clone, Debug)]
pub struct DropState {
    pub config: DropConfig,
    pub table: Option<GaussianKernelTable>,
    pub rng: RngStream,
}

impl DropState {
    /// Builds the kernel table from the config; the stream is `(seed, 0)`.
    pub fn new(config: DropConfig) -> Result<Self> {
        let table = config.kernel_table()?;
        Ok(Self::with_table(config, table))
    }

    pub fn with_table(config: DropConfig, table: Option<GaussianKernelTable>) -> Self {
        let rng = RngStream::with_stream(config.seed, 0);
        DropState { config, table, rng }
    }
}

/// Where a forward pass gets its perturbation draws.
pub enum Draws<'a> {
    /// Inference: plain softmax attention.
    Clean,
    Sample(&'a mut RngStream),
    Replay(&'a [Draw]),
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    /// `task + lambda * cons` (just `task` for a single pass).
    pub loss: f64,
    pub task_loss: f64,
    pub cons_loss: f64,
    /// First-pass logits, `[B, C]` row-major.
    pub logits: Vec<f64>,
    /// Per-parameter gradients of `loss`, when requested.
    pub grads: Option<Vec<Vec<f64>>>,
    /// Draws consumed, in the order the attention layers used them.
    pub draws: Vec<Draw>,
}

/// Builds the training objective on a fresh graph.
///
/// With `consistency`, two forward passes draw independently (pass one's
/// draws first) and the loss is `CE(Z1, Y) + lambda * KL(P1 || P2)`.
pub fn evaluate_objective(
    model: &Model,
    batch: &Batch,
    drop: &DropConfig,
    table: Option<&GaussianKernelTable>,
    draws: Draws,
    consistency: bool,
    with_grads: bool,
) -> Result<Evaluation> {
    let mut g = Graph::new();
    let params = model.register(&mut g);
    let mut perturber = match draws {
        Draws::Clean => Perturber::clean(drop),
        Draws::Sample(rng) => Perturber::sampling(drop, table, rng),
        Draws::Replay(d) => Perturber::replaying(drop, table, d),
    };
    let z1 = model.forward(&mut g, &params, batch, &mut perturber)?;
    let task = g.cross_entropy_with_logits(z1, &batch.labels)?;
    let (loss, cons) = if consistency {
        let z2 = model.forward(&mut g, &params, batch, &mut perturber)?;
        let cons = consistency_loss(&mut g, z1, z2)?;
        (total_loss(&mut g, task, cons, drop.lambda)?, Some(cons))
    } else {
        (task, None)
    };
    let draws = perturber.into_draws();
    let task_loss = g.value(task).item()?;
    let cons_loss = cons.map(|c| g.value(c).item()).transpose()?.unwrap_or(0.0);
    let loss_value = g.value(loss).item()?;
    let logits = g.value(z1).data().to_vec();
    let grads = if with_grads {
        g.backward(loss)?;
        Some(params.iter().map(|&p| g.grad(p).expect("parameter leaf").to_vec()).collect())
    } else {
        None
    };
    Ok(Evaluation {
        loss: loss_value,
        task_loss,
        cons_loss,
        logits,
        grads,
        draws,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub task_loss: f64,
    pub cons_loss: f64,
    /// First-pass predictions that matched the (possibly noisy) label.
    pub correct: usize,
}

fn apply_step(model: &mut Model, optim: &mut AdamW, batch: &Batch, eval: Evaluation) -> Result<StepStats> {
    let classes = model.config().classes;
    let correct = confidences(&eval.logits, classes, &batch.labels).iter().filter(|c| c.1).count();
    let grads = eval.grads.expect("gradients requested");
    optim.step(model.params_mut(), &grads)?;
    Ok(StepStats {
        task_loss: eval.task_loss,
        cons_loss: eval.cons_loss,
        correct,
    })
}

/// One perturbed pass, cross-entropy, backward, optimiser step.
pub fn train_step_single(model: &mut Model, batch: &Batch, drop: &mut DropState, optim: &mut AdamW) -> Result<StepStats> {
    if drop.config.consistency {
        return Err(Error::Contract("train_step_single called with consistency enabled".into()));
    }
    let eval = evaluate_objective(
        model,
        batch,
        &drop.config,
        drop.table.as_ref(),
        Draws::Sample(&mut drop.rng),
        false,
        true,
    )?;
    apply_step(model, optim, batch, eval)
}

/// Two independently perturbed passes, `CE(Z1) + lambda * KL(P1 || P2)`,
/// one backward, one optimiser step.
pub fn train_step_consistency(model: &mut Model, batch: &Batch, drop: &mut DropState, optim: &mut AdamW) -> Result<StepStats> {
    if !drop.config.consistency {
        return Err(Error::Contract("train_step_consistency called with consistency disabled".into()));
    }
    let eval = evaluate_objective(
        model,
        batch,
        &drop.config,
        drop.table.as_ref(),
        Draws::Sample(&mut drop.rng),
        true,
        true,
    )?;
    apply_step(model, optim, batch, eval)
}

/// Dispatches on `drop.config.consistency`.
pub fn train_step(model: &mut Model, batch: &Batch, drop: &mut DropState, optim: &mut AdamW) -> Result<StepStats> {
    if drop.config.consistency {
        train_step_consistency(model, batch, drop, optim)
    } else {
        train_step_single(model, batch, drop, optim)
    }
}

fn flatten(grads: Vec<Vec<f64>>) -> Vec<f64> {
    grads.into_iter().flatten().collect()
}

/// Paired flattened gradients of the task loss for each probe batch: clean
/// (`g_base`) and perturbed (`g_ad`) on the same data. Parameters are not
/// touched.
pub fn probe_gradients(
    model: &Model,
    probe_batches: &[Batch],
    drop: &DropConfig,
    table: Option<&GaussianKernelTable>,
    rng: &mut RngStream,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    if probe_batches.len() < 2 {
        return Err(Error::Parameter(format!(
            "gradient probe needs >= 2 batches, got {}",
            probe_batches.len()
        )));
    }
    let mut base = Vec::with_capacity(probe_batches.len());
    let mut perturbed = Vec::with_capacity(probe_batches.len());
    for batch in probe_batches {
        let clean = evaluate_objective(model, batch, drop, table, Draws::Clean, false, true)?;
        let noisy = evaluate_objective(model, batch, drop, table, Draws::Sample(rng), false, true)?;
        base.push(flatten(clean.grads.unwrap()));
        perturbed.push(flatten(noisy.grads.unwrap()));
    }
    Ok((base, perturbed))
}

/// Variance decomposition of the paired probe gradients.
pub fn grad_variance_probe(
    model: &Model,
    probe_batches: &[Batch],
    drop: &DropConfig,
    table: Option<&GaussianKernelTable>,
    rng: &mut RngStream,
) -> Result<VarianceReport> {
    let (base, perturbed) = probe_gradients(model, probe_batches, drop, table, rng)?;
    variance_decomposition(&base, &perturbed)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalStats {
    pub loss: f64,
    pub accuracy: f64,
    pub ece: f64,
}

/// Clean (unperturbed) loss, accuracy and ECE over a dataset.
pub fn evaluate_dataset(model: &Model, data: &Dataset, batch_size: usize, ece_bins: usize) -> Result<EvalStats> {
    let drop = DropConfig::baseline();
    let classes = model.config().classes;
    let mut preds = Vec::with_capacity(data.len());
    let mut loss = 0.0;
    for batch in data.batches(batch_size) {
        let eval = evaluate_objective(model, &batch, &drop, None, Draws::Clean, false, false)?;
        loss += eval.task_loss * batch.size() as f64;
        preds.extend(confidences(&eval.logits, classes, &batch.labels));
    }
    Ok(EvalStats {
        loss: loss / data.len() as f64,
        accuracy: accuracy(&preds),
        ece: ece(&preds, ece_bins)?,
    })
}
