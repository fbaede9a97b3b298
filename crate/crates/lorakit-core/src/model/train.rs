//! Training loops for pre-training and adaptation.
//!
//! Both regimes share one engine: shuffle the dataset, record each batch
//! on a fresh tape, run the backward sweep, and apply AdamW to exactly
//! the trainable leaves. Under any non-full-fine-tune strategy the frozen
//! base weights are never touched — neither by gradients (the tape skips
//! them) nor by the optimizer (they have no bindings).

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::adapters::{AdaptState, AdaptationStrategy};
use crate::error::CoreError;
use crate::fmath;
use crate::matrix::Matrix;
use crate::model::config::ModelConfig;
use crate::model::data::TaskDataset;
use crate::model::transformer::{
    build_training_graph, forward_batch, BatchLayout, ParamKey, SeqExample, TransformerModel,
};
use crate::optim::{adamw_update_param, AdamWConfig, AdamWState};
use crate::rng::derived_rng;
use crate::tape::Tape;
use crate::Result;

/// Learning-rate schedule over optimizer steps.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum LrSchedule {
    Constant,
    /// Linear warmup to the base rate, then linear decay toward zero at
    /// the final step.
    Linear { warmup_steps: usize },
}

impl LrSchedule {
    fn lr_at(&self, base: f64, step: usize, total_steps: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Linear { warmup_steps } => {
                let w = *warmup_steps;
                if w > 0 && step < w {
                    base * (step + 1) as f64 / w as f64
                } else if total_steps <= w {
                    base
                } else {
                    let done = (step - w) as f64 / (total_steps - w) as f64;
                    base * (1.0 - done).max(0.0)
                }
            }
        }
    }
}

/// Hyperparameters for one training run.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub optimizer: AdamWConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: AdamWConfig::default(),
            epochs: 20,
            batch_size: 8,
            schedule: LrSchedule::Constant,
        }
    }
}

impl TrainConfig {
    /// Shipped recipe for pre-training the toy model from scratch.
    pub fn pretrain_default() -> Self {
        TrainConfig {
            optimizer: AdamWConfig { lr: 3e-3, weight_decay: 0.01, ..AdamWConfig::default() },
            epochs: 15,
            batch_size: 16,
            schedule: LrSchedule::Linear { warmup_steps: 50 },
        }
    }

    /// Shipped per-strategy adaptation recipe for the toy tasks.
    ///
    /// Mirrors the usual practice of tuning the learning rate per method:
    /// full fine-tuning takes small steps for few epochs, low-rank
    /// factors take much larger steps for many more, and the remaining
    /// baselines sit in between.
    pub fn adapt_default(strategy: &AdaptationStrategy) -> Self {
        let (lr, weight_decay, epochs, batch_size, warmup) = match strategy {
            AdaptationStrategy::FullFineTune | AdaptationStrategy::FineTuneTop2 => {
                (1e-3, 0.01, 11, 16, 50)
            }
            AdaptationStrategy::Lora(_)
            | AdaptationStrategy::LoraPlusPrefixEmbed { .. }
            | AdaptationStrategy::LoraPlusPrefixLayer { .. } => (3e-2, 0.0, 200, 32, 60),
            AdaptationStrategy::BitFit => (1e-2, 0.0, 60, 16, 50),
            AdaptationStrategy::AdapterH { .. } | AdaptationStrategy::AdapterL { .. } => {
                (1e-2, 0.0, 60, 16, 50)
            }
            AdaptationStrategy::PrefixEmbed { .. } => (2e-2, 0.0, 60, 16, 50),
            AdaptationStrategy::PrefixLayer { .. } => (5e-3, 0.0, 60, 16, 50),
        };
        TrainConfig {
            optimizer: AdamWConfig { lr, weight_decay, ..AdamWConfig::default() },
            epochs,
            batch_size,
            schedule: LrSchedule::Linear { warmup_steps: warmup },
        }
    }
}

/// Outcome of a training run.
#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Whole-dataset evaluation loss before the first step.
    pub initial_loss: f64,
    /// Whole-dataset evaluation loss after the last step.
    pub final_loss: f64,
    /// Scalars that received gradient entries on the first step.
    pub trainable_params: usize,
    /// Scalars held by the optimizer (two per trainable scalar).
    pub optimizer_state_scalars: usize,
    pub steps: usize,
}

/// Pre-trains a fresh model (all parameters trainable) on the dataset.
pub fn pretrain(
    config: ModelConfig,
    dataset: &TaskDataset,
    train: &TrainConfig,
    seed: u64,
) -> Result<(TransformerModel, TrainReport)> {
    pretrain_with(config, dataset, train, seed, |_, _| {})
}

/// [`pretrain`] with a per-epoch observer `(epoch, mean_loss)`.
pub fn pretrain_with(
    config: ModelConfig,
    dataset: &TaskDataset,
    train: &TrainConfig,
    seed: u64,
    on_epoch: impl FnMut(usize, f64),
) -> Result<(TransformerModel, TrainReport)> {
    let mut model = TransformerModel::init(config, seed)?;
    let mut state = AdaptState::attach(&config, AdaptationStrategy::FullFineTune, seed)?;
    let report = run_training(&mut model, &mut state, dataset, train, seed, on_epoch)?;
    Ok((model, report))
}

/// Adapts a pre-trained model under `strategy`. Only the parameters the
/// strategy owns receive updates; everything else is bit-preserved.
pub fn adapt(
    model: &mut TransformerModel,
    dataset: &TaskDataset,
    strategy: AdaptationStrategy,
    train: &TrainConfig,
    seed: u64,
) -> Result<(AdaptState, TrainReport)> {
    adapt_with(model, dataset, strategy, train, seed, |_, _| {})
}

/// [`adapt`] with a per-epoch observer `(epoch, mean_loss)`.
pub fn adapt_with(
    model: &mut TransformerModel,
    dataset: &TaskDataset,
    strategy: AdaptationStrategy,
    train: &TrainConfig,
    seed: u64,
    on_epoch: impl FnMut(usize, f64),
) -> Result<(AdaptState, TrainReport)> {
    let mut state = AdaptState::attach(&model.config, strategy, seed)?;
    let report = run_training(model, &mut state, dataset, train, seed, on_epoch)?;
    Ok((state, report))
}

fn run_training(
    model: &mut TransformerModel,
    state: &mut AdaptState,
    dataset: &TaskDataset,
    train: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    dataset.validate(&model.config, state.reserved_slots())?;
    if state.any_merged() {
        return Err(CoreError::Contract(String::from(
            "cannot train while low-rank modules are merged",
        )));
    }
    if train.epochs == 0 {
        return Err(CoreError::Config("epochs must be positive".into()));
    }
    let batch_size = train.batch_size.max(1);
    let initial_loss = eval_loss(model, Some(state), dataset, batch_size)?;

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut shuffle_rng = derived_rng(seed, 0x53_48_55_46); // shuffle stream
    let steps_per_epoch = dataset.len().div_ceil(batch_size);
    let total_steps = steps_per_epoch * train.epochs;

    let mut opt_state: Option<AdamWState> = None;
    let mut trainable_params = 0usize;
    let mut epoch_losses = Vec::with_capacity(train.epochs);
    let mut step = 0usize;

    for epoch in 0..train.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss_sum = 0.0;
        let mut epoch_batches = 0usize;
        for chunk in order.chunks(batch_size) {
            let batch: Vec<SeqExample> = chunk
                .iter()
                .map(|&i| {
                    let (x, y) = &dataset.pairs[i];
                    SeqExample { x, y }
                })
                .collect();

            // Record, differentiate, and harvest gradients before any
            // mutation; the tape borrows the model until dropped.
            let (loss_value, grads) = {
                let mut tape = Tape::new();
                let graph = build_training_graph(&mut tape, model, Some(state), &batch)?;
                let loss_value = tape.value(graph.loss).get(0, 0);
                let mut g = tape.backward(graph.loss)?;
                let mut harvested: Vec<(ParamKey, Matrix)> =
                    Vec::with_capacity(graph.bindings.len());
                for (key, node) in graph.bindings {
                    let grad = g.take(node).ok_or_else(|| {
                        CoreError::Contract(String::from("trainable leaf missing its adjoint"))
                    })?;
                    harvested.push((key, grad));
                }
                (loss_value, harvested)
            };
            if !loss_value.is_finite() {
                return Err(CoreError::Training {
                    step,
                    reason: String::from("loss is not finite"),
                });
            }

            let opt = match opt_state.as_mut() {
                Some(s) => s,
                None => {
                    let shapes: Vec<&Matrix> = grads.iter().map(|(_, g)| g).collect();
                    trainable_params = shapes.iter().map(|g| g.len()).sum();
                    opt_state = Some(AdamWState::new(&shapes));
                    opt_state.as_mut().expect("just set")
                }
            };
            if grads.len() != opt.slots() {
                return Err(CoreError::Contract(String::from(
                    "trainable set changed between steps",
                )));
            }

            let lr = train.schedule.lr_at(train.optimizer.lr, step, total_steps);
            let cfg = AdamWConfig { lr, ..train.optimizer };
            let t = opt.bump();
            for (idx, (key, grad)) in grads.iter().enumerate() {
                let (m, v) = opt.slot_mut(idx);
                let param = resolve_param_mut(key, model, state)?;
                adamw_update_param(param, grad, m, v, t, &cfg)?;
            }

            epoch_loss_sum += loss_value;
            epoch_batches += 1;
            step += 1;
        }
        let mean = epoch_loss_sum / epoch_batches as f64;
        epoch_losses.push(mean);
        on_epoch(epoch, mean);
    }

    let final_loss = eval_loss(model, Some(state), dataset, batch_size)?;
    Ok(TrainReport {
        epoch_losses,
        initial_loss,
        final_loss,
        trainable_params,
        optimizer_state_scalars: opt_state.as_ref().map_or(0, AdamWState::scalar_count),
        steps: step,
    })
}

/// Maps an optimizer binding back to the matrix it updates.
///
/// The borrow is scoped to one update; bindings never alias because every
/// key names a distinct matrix.
fn resolve_param_mut<'m>(
    key: &ParamKey,
    model: &'m mut TransformerModel,
    state: &'m mut AdaptState,
) -> Result<&'m mut Matrix> {
    let missing = || CoreError::Contract(String::from("binding refers to a missing parameter"));
    Ok(match key {
        ParamKey::Base(name) => model.param_mut(name).ok_or_else(missing)?,
        ParamKey::LoraA(i) => &mut state.lora.get_mut(*i).ok_or_else(missing)?.a,
        ParamKey::LoraB(i) => &mut state.lora.get_mut(*i).ok_or_else(missing)?.b,
        ParamKey::AdapterWDown(i) => {
            &mut state.adapters.get_mut(*i).ok_or_else(missing)?.w_down
        }
        ParamKey::AdapterBDown(i) => {
            &mut state.adapters.get_mut(*i).ok_or_else(missing)?.b_down
        }
        ParamKey::AdapterWUp(i) => &mut state.adapters.get_mut(*i).ok_or_else(missing)?.w_up,
        ParamKey::AdapterBUp(i) => &mut state.adapters.get_mut(*i).ok_or_else(missing)?.b_up,
        ParamKey::AdapterLnGamma(i) => {
            &mut state
                .adapters
                .get_mut(*i)
                .and_then(|a| a.layer_norm.as_mut())
                .ok_or_else(missing)?
                .0
        }
        ParamKey::AdapterLnBeta(i) => {
            &mut state
                .adapters
                .get_mut(*i)
                .and_then(|a| a.layer_norm.as_mut())
                .ok_or_else(missing)?
                .1
        }
        ParamKey::PrefixEmbed => state
            .prefix
            .as_mut()
            .and_then(|p| p.embed.as_mut())
            .ok_or_else(missing)?,
        ParamKey::PrefixLayer(l) => state
            .prefix
            .as_mut()
            .and_then(|p| p.per_layer.as_mut())
            .and_then(|v| v.get_mut(*l))
            .ok_or_else(missing)?,
    })
}

/// Mean negative log-likelihood of the listed `(row, class)` targets,
/// computed by explicit softmax — an implementation independent of the
/// tape's fused log-sum-exp loss.
pub fn nll_loss(logits: &Matrix, targets: &[(usize, usize)]) -> Result<f64> {
    if targets.is_empty() {
        return Err(CoreError::Contract(String::from("loss over an empty target span")));
    }
    let mut total = 0.0;
    for &(row, class) in targets {
        if row >= logits.rows() || class >= logits.cols() {
            return Err(CoreError::Contract(String::from("target outside the logits matrix")));
        }
        let r = logits.row(row);
        let max = r.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let denom: f64 = r.iter().map(|&v| fmath::exp(v - max)).sum();
        let p = fmath::exp(r[class] - max) / denom;
        total -= fmath::ln(p);
    }
    Ok(total / targets.len() as f64)
}

/// Whole-dataset evaluation loss (mean NLL over every target token).
pub fn eval_loss(
    model: &TransformerModel,
    state: Option<&AdaptState>,
    dataset: &TaskDataset,
    batch_size: usize,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for_each_eval_batch(model, state, dataset, batch_size, |layout, batch, logits| {
        for (s, sample_logits) in logits.iter().enumerate() {
            // Single-sample view: rows come out local to this sample.
            let targets = layout.loss_targets(&batch[s..=s]);
            total += nll_loss(sample_logits, &targets)? * targets.len() as f64;
            count += targets.len();
        }
        Ok(())
    })?;
    if count == 0 {
        return Err(CoreError::Contract(String::from("dataset has no predictable targets")));
    }
    Ok(total / count as f64)
}

/// Fraction of target tokens whose argmax logit matches.
pub fn eval_token_accuracy(
    model: &TransformerModel,
    state: Option<&AdaptState>,
    dataset: &TaskDataset,
    batch_size: usize,
) -> Result<f64> {
    let mut hits = 0usize;
    let mut count = 0usize;
    for_each_eval_batch(model, state, dataset, batch_size, |layout, batch, logits| {
        for (s, sample_logits) in logits.iter().enumerate() {
            for (row, class) in layout.loss_targets(&batch[s..=s]) {
                let r = sample_logits.row(row);
                let mut best = 0usize;
                for (j, &v) in r.iter().enumerate() {
                    if v > r[best] {
                        best = j;
                    }
                }
                hits += usize::from(best == class);
                count += 1;
            }
        }
        Ok(())
    })?;
    if count == 0 {
        return Err(CoreError::Contract(String::from("dataset has no predictable targets")));
    }
    Ok(hits as f64 / count as f64)
}

fn for_each_eval_batch(
    model: &TransformerModel,
    state: Option<&AdaptState>,
    dataset: &TaskDataset,
    batch_size: usize,
    mut f: impl FnMut(&BatchLayout, &[SeqExample], &[Matrix]) -> Result<()>,
) -> Result<()> {
    let batch_size = batch_size.max(1);
    for chunk in dataset.pairs.chunks(batch_size) {
        let batch: Vec<SeqExample> =
            chunk.iter().map(|(x, y)| SeqExample { x, y }).collect();
        let layout = BatchLayout::from_batch(&model.config, state, &batch)?;
        let (logits, _) = forward_batch(model, state, &batch)?;
        f(&layout, &batch, &logits)?;
    }
    Ok(())
}
