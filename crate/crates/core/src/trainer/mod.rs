//! Semi-supervised hard-EM training.
//!
//! Each step infers classes, masks and switches bottom-up (E-step), renders
//! the chosen class top-down, and takes one SGD step on the weighted loss
//! with those latents held fixed (M-step).

mod batches;
mod metrics;
#[cfg(test)]
mod tests;

use std::fmt;
use std::str::FromStr;

pub use batches::{assemble_batch, make_batches, select_labeled_subset, semi_supervised_sets, Batch, BatchIndices};
pub use metrics::{MetricsWriter, EPOCH_HEADER, STEP_HEADER};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{bottom_up_pass, one_hot, top_down_pass, ArchitectureSpec, LatentTrace, ModelParams, ParamVars, Phase, PresetDefaults, TopDownOptions, Unpool};
use crate::objective::{cross_entropy_term, expected_reconstruction_term, kl_term, nonnegativity_term, reconstruction_term, total_term, LossReport, LossTerms, LossWeights};
use crate::tensor::{sgd_step, Real, Tape, Tensor, Var, BN_MOMENTUM};

/// Which rendering enters the reconstruction term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Reconstruction {
    /// Render the most likely class only.
    #[default]
    Argmax,
    /// Average the error of every class's rendering under the posterior.
    Expected,
}

impl fmt::Display for Reconstruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Reconstruction::Argmax => "argmax",
            Reconstruction::Expected => "expected",
        })
    }
}

impl FromStr for Reconstruction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "argmax" => Ok(Reconstruction::Argmax),
            "expected" => Ok(Reconstruction::Expected),
            other => Err(Error::config(format!("unknown reconstruction mode {other:?}; expected argmax or expected"))),
        }
    }
}

/// Settings of one training step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOptions {
    pub weights: LossWeights,
    pub unpool: Unpool,
    pub reconstruction: Reconstruction,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Even; half labeled, half unlabeled.
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub unpool: Unpool,
    pub reconstruction: Reconstruction,
    /// Epochs between test-set evaluations; 0 evaluates after the last
    /// epoch only.
    pub eval_every: usize,
    /// Items per forward pass during evaluation.
    pub eval_chunk: usize,
}

impl TrainConfig {
    pub fn from_preset(d: &PresetDefaults, seed: u64) -> Self {
        TrainConfig {
            epochs: d.epochs,
            batch_size: d.batch_size,
            lr_start: d.lr_start,
            lr_end: d.lr_end,
            weights: LossWeights { alpha_h: d.alpha_h, alpha_rc: d.alpha_rc, alpha_kl: d.alpha_kl, alpha_nn: d.alpha_nn },
            seed,
            unpool: Unpool::default(),
            reconstruction: Reconstruction::default(),
            eval_every: 1,
            eval_chunk: 500,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 || !self.batch_size.is_multiple_of(2) {
            return Err(Error::config(format!("batch_size {} must be even and at least 2", self.batch_size)));
        }
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end && self.lr_start.is_finite()) {
            return Err(Error::config(format!("learning rates need lr_start >= lr_end > 0, got {} and {}", self.lr_start, self.lr_end)));
        }
        if self.eval_chunk == 0 {
            return Err(Error::config("eval_chunk must be positive"));
        }
        self.weights.validate()
    }

    pub fn step_options(&self) -> StepOptions {
        StepOptions { weights: self.weights, unpool: self.unpool, reconstruction: self.reconstruction }
    }
}

/// Per-epoch summary.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub steps: u64,
    pub lr: f64,
    /// Component-wise mean over the epoch's steps.
    pub mean: LossReport,
    /// Percent, when the test set was evaluated after this epoch.
    pub test_error: Option<f64>,
}

/// One step's record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub report: LossReport,
}

/// Receives progress from [`train`]. Errors abort training.
pub trait TrainObserver {
    fn on_step(&mut self, _record: &StepRecord) -> Result<()> {
        Ok(())
    }

    fn on_epoch(&mut self, _stats: &EpochStats, _params: &ModelParams<f32>) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// `lr_start · (lr_end / lr_start)^(epoch / (epochs − 1))`; constant
/// `lr_start` with fewer than two epochs.
pub fn lr_schedule(config: &TrainConfig, epoch: usize) -> f64 {
    if config.epochs < 2 {
        return config.lr_start;
    }
    let t = epoch.min(config.epochs - 1) as f64 / (config.epochs - 1) as f64;
    config.lr_start * (config.lr_end / config.lr_start).powf(t)
}

/// Graph of the full objective for one batch.
pub struct LossGraph<T: Real> {
    pub total: Var,
    pub report: LossReport,
    pub trace: LatentTrace<T>,
    pub batch_stats: Vec<Option<crate::tensor::BatchStats<T>>>,
}

/// Builds bottom-up inference, top-down rendering and the four losses on
/// `tape`. With `fixed`, masks, switches and classes come from that trace.
#[allow(clippy::too_many_arguments)]
pub fn build_objective<T: Real>(
    tape: &mut Tape<T>,
    arch: &ArchitectureSpec,
    params: &ModelParams<T>,
    vars: &ParamVars,
    images: Var,
    labels: &[Option<usize>],
    options: &StepOptions,
    fixed: Option<&LatentTrace<T>>,
) -> Result<LossGraph<T>> {
    let bu = bottom_up_pass(tape, arch, params, vars, images, Phase::Train, fixed)?;
    let n = bu.trace.batch;
    let c = arch.classes();
    let td_options = TopDownOptions::with_unpool(options.unpool);
    let render = |tape: &mut Tape<T>, classes: &[usize]| -> Result<(Var, Vec<Var>)> {
        let cv = tape.constant(one_hot::<T>(classes, c)?.reshape(vec![n, 1, 1, c])?);
        let pass = top_down_pass(tape, arch, vars, cv, &bu.trace, td_options)?;
        Ok((pass.reconstruction, pass.intermediates))
    };
    let (rendered, intermediates) = render(tape, &bu.trace.classes)?;
    let (l_h, labeled) = cross_entropy_term(tape, bu.posterior, labels)?;
    let l_kl = kl_term(tape, bu.posterior, &params.class_prior)?;
    let l_rc = match options.reconstruction {
        Reconstruction::Argmax => reconstruction_term(tape, images, rendered)?,
        Reconstruction::Expected => {
            let per_class = (0..c).map(|k| render(tape, &vec![k; n]).map(|r| r.0)).collect::<Result<Vec<_>>>()?;
            expected_reconstruction_term(tape, images, &per_class, bu.posterior)?
        }
    };
    let l_nn = nonnegativity_term(tape, &intermediates, n)?;
    let terms = LossTerms { l_h, l_rc, l_kl, l_nn, labeled, unlabeled: n - labeled };
    let (total, report) = total_term(tape, &options.weights, &terms)?;
    Ok(LossGraph { total, report, trace: bu.trace, batch_stats: bu.batch_stats })
}

/// One E-step plus SGD step on `batch`; updates the running batch-norm
/// statistics. Returns the losses before the update.
pub fn train_step<T: Real>(
    params: &mut ModelParams<T>,
    arch: &ArchitectureSpec,
    images: &Tensor<T>,
    labels: &[Option<usize>],
    options: &StepOptions,
    lr: f64,
) -> Result<LossReport> {
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params, true);
    let x = tape.constant(images.clone());
    let graph = build_objective(&mut tape, arch, params, &vars, x, labels, options, None)?;
    if !graph.report.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss ({})", graph.report)));
    }
    let mut grads = tape.backward(graph.total)?;
    for (var, tensor) in vars.trainable().into_iter().zip(params.trainable_mut()) {
        let g = grads.take(var).unwrap_or_else(|| vec![T::zero(); tensor.len()]);
        tensor.set_grad(g)?;
    }
    sgd_step(&mut params.trainable_mut(), T::from_f64_lossy(lr))?;
    let momentum = T::from_f64_lossy(BN_MOMENTUM);
    for (conv, stats) in params.convs.iter_mut().zip(&graph.batch_stats) {
        if let (Some(running), Some(stats)) = (conv.running.as_mut(), stats) {
            running.update(stats, momentum)?;
        }
    }
    if !params.is_finite() {
        return Err(Error::Numeric(format!("parameters became non-finite (losses before the step: {})", graph.report)));
    }
    Ok(graph.report)
}

/// Eval-mode argmax predictions, `chunk` items per pass.
pub fn predict(params: &ModelParams<f32>, arch: &ArchitectureSpec, images: &Tensor<f32>, chunk: usize) -> Result<Vec<usize>> {
    params.validate(arch)?;
    let n = images.shape().first().copied().unwrap_or(0);
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + chunk.max(1)).min(n);
        let mut tape = Tape::new();
        let vars = ParamVars::register(&mut tape, params, false);
        let x = tape.constant(images.slice_outer(start, end)?);
        let bu = bottom_up_pass(&mut tape, arch, params, &vars, x, Phase::Eval, None)?;
        out.extend(bu.trace.classes);
        start = end;
    }
    Ok(out)
}

/// Percentage of `predictions` that differ from `labels`.
pub fn error_percent(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::contract("cannot evaluate on an empty set"));
    }
    if predictions.len() != labels.len() {
        return Err(Error::dim(format!("{} predictions for {} labels", predictions.len(), labels.len())));
    }
    let wrong = predictions.iter().zip(labels).filter(|(p, l)| p != l).count();
    Ok(100.0 * wrong as f64 / labels.len() as f64)
}

/// `confusion[true][predicted]` counts.
pub fn confusion(predictions: &[usize], labels: &[usize], classes: usize) -> Result<Vec<Vec<u64>>> {
    let mut m = vec![vec![0u64; classes]; classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        if p >= classes || l >= classes {
            return Err(Error::dim(format!("class {} out of range for {classes}", p.max(l))));
        }
        m[l][p] += 1;
    }
    Ok(m)
}

/// Test error in percent with eval-mode batch norm.
pub fn evaluate(params: &ModelParams<f32>, arch: &ArchitectureSpec, test: &Dataset, chunk: usize) -> Result<f64> {
    let labels = test.labels()?;
    if test.is_empty() {
        return Err(Error::contract("cannot evaluate on an empty test set"));
    }
    error_percent(&predict(params, arch, &test.images, chunk)?, labels)
}

fn mean_report(sum: &LossReport, steps: u64) -> LossReport {
    let k = steps.max(1) as f64;
    LossReport {
        l_h: sum.l_h / k,
        l_rc: sum.l_rc / k,
        l_kl: sum.l_kl / k,
        l_nn: sum.l_nn / k,
        total: sum.total / k,
        labeled: sum.labeled,
        unlabeled: sum.unlabeled,
    }
}

/// Runs `config.epochs` epochs of semi-supervised training from `params`,
/// starting the step counter at `first_step`.
#[allow(clippy::too_many_arguments)]
pub fn train(
    config: &TrainConfig,
    arch: &ArchitectureSpec,
    params: &mut ModelParams<f32>,
    labeled: &Dataset,
    unlabeled: &Dataset,
    test: Option<&Dataset>,
    first_step: u64,
    observer: &mut dyn TrainObserver,
) -> Result<Vec<EpochStats>> {
    config.validate()?;
    params.validate(arch)?;
    for (name, d) in [("labeled", labeled), ("unlabeled", unlabeled)] {
        if d.image_shape() != arch.input() {
            return Err(Error::config(format!("{name} images {:?} do not match architecture input {:?}", d.image_shape(), arch.input())));
        }
    }
    labeled.labels()?;
    let options = config.step_options();
    let mut step = first_step;
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = lr_schedule(config, epoch);
        let plan = make_batches(labeled.len(), unlabeled.len(), config.batch_size, config.seed, epoch as u64)?;
        let mut sum = LossReport::default();
        let mut steps = 0u64;
        for idx in &plan {
            let batch = assemble_batch(labeled, unlabeled, idx)?;
            let report = train_step(params, arch, &batch.images, &batch.labels, &options, lr)
                .map_err(|e| match e {
                    Error::Numeric(m) => Error::Numeric(format!("step {step} (epoch {epoch}): {m}")),
                    other => other,
                })?;
            observer.on_step(&StepRecord { step, epoch, lr, report })?;
            for (acc, v) in [&mut sum.l_h, &mut sum.l_rc, &mut sum.l_kl, &mut sum.l_nn, &mut sum.total].into_iter().zip([report.l_h, report.l_rc, report.l_kl, report.l_nn, report.total]) {
                *acc += v;
            }
            sum.labeled += report.labeled;
            sum.unlabeled += report.unlabeled;
            step += 1;
            steps += 1;
        }
        let last = epoch + 1 == config.epochs;
        let due = config.eval_every > 0 && (epoch + 1) % config.eval_every == 0;
        let test_error = match test {
            Some(t) if last || due => Some(evaluate(params, arch, t, config.eval_chunk)?),
            _ => None,
        };
        let stats = EpochStats { epoch, steps, lr, mean: mean_report(&sum, steps), test_error };
        observer.on_epoch(&stats, params)?;
        history.push(stats);
    }
    Ok(history)
}
