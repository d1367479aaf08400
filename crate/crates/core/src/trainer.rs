//! Minibatch ELBO optimization with validation tracking.

use std::cell::Cell;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::corpus::{smooth_window_stats, EncodedDoc, WindowStats};
use crate::error::{Error, Result};
use crate::eval::{per_word_nll, EvalMode};
use crate::model::{elbo_loss, elbo_loss_and_grad, DetmParams, LossBreakdown, LossOptions, Noise, Weights};
use crate::optim::{clip_global_norm, RAdam};

/// Which epoch's parameters `train` returns.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    #[default]
    BestValidation,
    LastEpoch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Scale per-document terms by `n_train / |batch|`.
    pub reweight: bool,
    /// Evaluate with statistics recomputed from the evaluation split.
    pub recompute: bool,
    pub seed: u64,
    pub gradient_clip_norm: f64,
    pub selection: Selection,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            learning_rate: 0.005,
            batch_size: 512,
            epochs: 50,
            reweight: false,
            recompute: false,
            seed: 0,
            gradient_clip_norm: 2.0,
            selection: Selection::BestValidation,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be at least 1".into()));
        }
        // an infinite clip norm disables clipping
        if self.gradient_clip_norm.is_nan() || self.gradient_clip_norm <= 0.0 {
            return Err(Error::InvalidArgument("gradient_clip_norm must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    Validation,
    Test,
}

/// Source of the window statistics fed to the mixture-prior network.
pub trait StatsProvider {
    /// Smoothed statistics of the training split.
    fn training_stats(&self) -> &WindowStats;
    /// Statistics recomputed from an evaluation split, then smoothed.
    fn eval_stats(&self, split: EvalSplit) -> Result<WindowStats>;
}

/// Statistics for the three splits, counting how often evaluation-split
/// statistics are requested.
#[derive(Debug)]
pub struct SplitStats {
    train: WindowStats,
    validation: Vec<EncodedDoc>,
    test: Vec<EncodedDoc>,
    eval_reads: Cell<usize>,
}

impl SplitStats {
    pub fn new(train: WindowStats, validation: Vec<EncodedDoc>, test: Vec<EncodedDoc>) -> Result<Self> {
        if train.has_zero_rows() || !train.smoothed {
            return Err(Error::UnsmoothedStats);
        }
        Ok(SplitStats {
            train,
            validation,
            test,
            eval_reads: Cell::new(0),
        })
    }

    /// Builds and smooths training statistics from encoded training docs.
    pub fn from_docs(train: &[EncodedDoc], validation: Vec<EncodedDoc>, test: Vec<EncodedDoc>, vocab_size: usize, window_count: usize) -> Result<Self> {
        let raw = WindowStats::from_encoded(train, vocab_size, window_count)?;
        Self::new(smooth_window_stats(&raw)?, validation, test)
    }

    pub fn eval_reads(&self) -> usize {
        self.eval_reads.get()
    }
}

impl StatsProvider for SplitStats {
    fn training_stats(&self) -> &WindowStats {
        &self.train
    }

    fn eval_stats(&self, split: EvalSplit) -> Result<WindowStats> {
        self.eval_reads.set(self.eval_reads.get() + 1);
        let docs = match split {
            EvalSplit::Validation => &self.validation,
            EvalSplit::Test => &self.test,
        };
        let raw = WindowStats::from_encoded(docs, self.train.vocab_size(), self.train.window_count())?;
        smooth_window_stats(&raw)
    }
}

/// The statistics evaluation on `split` should use under `recompute`.
pub fn evaluation_stats(provider: &dyn StatsProvider, split: EvalSplit, recompute: bool) -> Result<WindowStats> {
    if recompute {
        provider.eval_stats(split)
    } else {
        Ok(provider.training_stats().clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean over the epoch's batches.
    pub train: LossBreakdown,
    pub validation_nll: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub records: Vec<EpochRecord>,
    /// Epoch whose parameters were returned.
    pub selected_epoch: usize,
}

impl TrainingHistory {
    pub fn best_validation(&self) -> Option<&EpochRecord> {
        self.records.iter().min_by(|a, b| a.validation_nll.total_cmp(&b.validation_nll))
    }
}

/// One optimizer update: loss and gradient, clipping, the RAdam step and
/// log-variance clamping. Fails without touching `params` when the loss or
/// gradient is non-finite.
pub fn optimizer_step(
    params: &mut DetmParams,
    optimizer: &mut RAdam,
    batch: &[EncodedDoc],
    stats: &WindowStats,
    opts: LossOptions,
    noise: &Noise,
    clip_norm: f64,
) -> Result<LossBreakdown> {
    let (loss, mut grads) = elbo_loss_and_grad(batch, params, stats, opts, noise)?;
    if !loss.is_finite() || !grads.all_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    if clip_norm.is_finite() {
        clip_global_norm(&mut grads, clip_norm);
    }
    optimizer.step(&mut params.weights, &grads);
    params.clamp_logvars();
    Ok(loss)
}

fn mean_breakdown(items: &[LossBreakdown]) -> LossBreakdown {
    let n = items.len() as f64;
    let avg = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
    LossBreakdown {
        nll: avg(|l| l.nll),
        kl_theta: avg(|l| l.kl_theta),
        kl_eta: avg(|l| l.kl_eta),
        kl_alpha: avg(|l| l.kl_alpha),
        total: avg(|l| l.total),
        reweighted: items.first().is_some_and(|l| l.reweighted),
    }
}

/// Trains for `config.epochs` epochs, reporting each finished epoch to
/// `observer`.
pub fn train_with_observer(
    mut params: DetmParams,
    train_docs: &[EncodedDoc],
    val_docs: &[EncodedDoc],
    provider: &dyn StatsProvider,
    config: &TrainingConfig,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<(DetmParams, TrainingHistory)> {
    config.validate()?;
    params.check_shapes()?;
    let train_docs: Vec<EncodedDoc> = train_docs.iter().filter(|d| !d.is_empty()).cloned().collect();
    if train_docs.is_empty() {
        return Err(Error::InvalidArgument("no nonempty training sub-documents".into()));
    }
    let stats = provider.training_stats();
    let val_stats = evaluation_stats(provider, EvalSplit::Validation, config.recompute)?;

    let opts = LossOptions {
        reweight: config.reweight,
        n_train: train_docs.len(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut optimizer = RAdam::new(config.learning_rate, &params.weights);
    let mut order: Vec<usize> = (0..train_docs.len()).collect();
    let mut history = TrainingHistory::default();
    let mut best: Option<(f64, usize, Weights<Tensor>)> = None;

    for epoch in 1..=config.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut losses = Vec::with_capacity(order.len().div_ceil(config.batch_size));
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<EncodedDoc> = idx.iter().map(|&i| train_docs[i].clone()).collect();
            let noise = Noise::sample(&params.config, batch.len(), &mut rng);
            let loss = optimizer_step(&mut params, &mut optimizer, &batch, stats, opts, &noise, config.gradient_clip_norm)
                .map_err(|e| match e {
                    Error::NonFinite(_) => Error::Diverged {
                        epoch,
                        batch: b,
                        loss: elbo_total(&batch, &params, stats, opts, &noise),
                    },
                    other => other,
                })?;
            losses.push(loss);
        }
        let validation_nll = per_word_nll(&params, val_docs, &val_stats, EvalMode::Deterministic)?.per_word_nll;
        let record = EpochRecord {
            epoch,
            train: mean_breakdown(&losses),
            validation_nll,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        observer(&record);
        history.records.push(record);
        if config.selection == Selection::BestValidation && best.as_ref().is_none_or(|(v, _, _)| validation_nll < *v) {
            best = Some((validation_nll, epoch, params.weights.clone()));
        }
    }

    history.selected_epoch = config.epochs;
    if let Some((_, epoch, weights)) = best {
        history.selected_epoch = epoch;
        params.weights = weights;
    }
    Ok((params, history))
}

fn elbo_total(batch: &[EncodedDoc], params: &DetmParams, stats: &WindowStats, opts: LossOptions, noise: &Noise) -> f64 {
    elbo_loss(batch, params, stats, opts, noise).map_or(f64::NAN, |l| l.total)
}

pub fn train(
    params: DetmParams,
    train_docs: &[EncodedDoc],
    val_docs: &[EncodedDoc],
    provider: &dyn StatsProvider,
    config: &TrainingConfig,
) -> Result<(DetmParams, TrainingHistory)> {
    train_with_observer(params, train_docs, val_docs, provider, config, &mut |_| {})
}
