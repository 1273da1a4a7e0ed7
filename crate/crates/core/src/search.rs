//! Alternating bi-level rank search and fixed-rank fine-tuning.
//!
//! Each mini-batch index runs one weight step (adapter factors on a training
//! batch, alphas frozen) followed by one alpha step (alphas on a validation
//! batch, factors frozen). Alpha gradients are first-order: no unrolled inner
//! step. After the search epochs every module keeps the rank with the largest
//! alpha, and the extracted adapters are fine-tuned on the training split.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{batch_iter, Batch, Dataset, Splits};
use crate::error::{Error, Result};
use crate::model::{eval_perplexity, AdaptedModel, Attachment, BoundAttachment, TrainMode};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::rng::derive_seed;
use crate::supernet::{RankMap, RankSearchSpace};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub search_epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub weight_optimizer: OptimizerConfig,
    pub alpha_optimizer: OptimizerConfig,
    /// Global L2 gradient-norm cap, per step and parameter group.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    pub seed: u64,
    #[serde(default)]
    pub reinit_after_search: bool,
    pub space: RankSearchSpace,
    /// LoRA scaling numerator; the scaling is `lora_alpha / r_max` and
    /// defaults to 1.
    #[serde(default)]
    pub lora_alpha: Option<f64>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            search_epochs: 3,
            finetune_epochs: 7,
            batch_size: 16,
            eval_batch_size: 64,
            weight_optimizer: OptimizerConfig::adam(1e-3),
            alpha_optimizer: OptimizerConfig::sgd(3e-3),
            grad_clip: None,
            seed: 0,
            reinit_after_search: false,
            space: RankSearchSpace::new(vec![8, 16, 32, 64]).expect("valid"),
            lora_alpha: None,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.search_epochs == 0 {
            return Err(Error::validation("search_epochs", "must be at least 1"));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::validation("batch_size", "must be at least 1"));
        }
        self.weight_optimizer.validate("weight_optimizer")?;
        self.alpha_optimizer.validate("alpha_optimizer")?;
        if self.weight_optimizer.lr <= 0.0 || self.alpha_optimizer.lr <= 0.0 {
            return Err(Error::validation("lr", "learning rates must be positive"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::validation("grad_clip", "must be positive"));
            }
        }
        if let Some(a) = self.lora_alpha {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::validation("lora_alpha", "must be positive"));
            }
        }
        Ok(())
    }

    pub fn scaling(&self) -> f64 {
        scaling_for(self.lora_alpha, self.space.r_max())
    }
}

fn scaling_for(lora_alpha: Option<f64>, r_max: usize) -> f64 {
    lora_alpha.unwrap_or(r_max as f64) / r_max as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Search,
    Finetune,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Search => "search",
            Phase::Finetune => "finetune",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub phase: Phase,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub eval_perplexity: f64,
    pub trainable_params: usize,
    pub wall_seconds: f64,
}

/// Progress of a search run; enough, with the model, to resume exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchState {
    /// Completed (weight step, alpha step) pairs.
    pub step: usize,
    pub epochs_done: usize,
    /// Module → per-epoch alpha distributions (post-softmax).
    pub alpha_history: BTreeMap<String, Vec<Vec<f64>>>,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub metrics: Vec<EpochMetrics>,
    pub weight_opt: Optimizer,
    pub alpha_opt: Optimizer,
}

impl SearchState {
    pub fn new(config: &SearchConfig) -> Self {
        Self {
            step: 0,
            epochs_done: 0,
            alpha_history: BTreeMap::new(),
            train_loss: Vec::new(),
            val_loss: Vec::new(),
            metrics: Vec::new(),
            weight_opt: Optimizer::new(config.weight_optimizer),
            alpha_opt: Optimizer::new(config.alpha_optimizer),
        }
    }
}

/// Identifies a step in diagnostics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StepTag {
    pub step: usize,
    pub batch: usize,
}

fn grad_or_zero(g: Option<Tensor>, like: &Tensor) -> Tensor {
    g.unwrap_or_else(|| Tensor::zeros(like.shape()))
}

fn checked_loss(value: f64, phase: &'static str, tag: StepTag) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFiniteLoss {
            phase,
            step: tag.step,
            batch: tag.batch,
            loss: value,
        })
    }
}

/// Descends the training loss in the adapter factors; alphas stay frozen.
pub fn weight_step(
    model: &mut AdaptedModel,
    batch: &Batch,
    opt: &mut Optimizer,
    clip: Option<f64>,
    tag: StepTag,
) -> Result<f64> {
    if model.attachments.is_empty() {
        return Err(Error::State("weight step on a model without adapters".into()));
    }
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, TrainMode::WEIGHTS);
    let loss = model.loss(&mut tape, &bound, batch)?;
    let value = checked_loss(tape.value(loss).item(), "train", tag)?;
    let mut grads = tape.backward(loss)?;
    let mut updates = Vec::new();
    for (name, att) in model.attachments.iter_mut() {
        match (att, &bound.attachments[name]) {
            (Attachment::Super(m), BoundAttachment::Super(v)) => {
                let ga = grad_or_zero(grads.take(v.w_a), &m.w_a);
                let gb = grad_or_zero(grads.take(v.w_b), &m.w_b);
                updates.push((format!("{name}/w_a"), &mut m.w_a, ga));
                updates.push((format!("{name}/w_b"), &mut m.w_b, gb));
            }
            (Attachment::Fixed(a), BoundAttachment::Fixed(v)) => {
                let ga = grad_or_zero(grads.take(v.w_a), &a.w_a);
                let gb = grad_or_zero(grads.take(v.w_b), &a.w_b);
                updates.push((format!("{name}/w_a"), &mut a.w_a, ga));
                updates.push((format!("{name}/w_b"), &mut a.w_b, gb));
            }
            _ => unreachable!("binding mirrors attachments"),
        }
    }
    opt.step(&mut updates, clip);
    Ok(value)
}

/// Descends the validation loss in the alphas; factors stay frozen.
pub fn alpha_step(
    model: &mut AdaptedModel,
    batch: &Batch,
    opt: &mut Optimizer,
    clip: Option<f64>,
    tag: StepTag,
) -> Result<f64> {
    if model.supernets().next().is_none() {
        return Err(Error::State("alpha step on a model without supernet modules".into()));
    }
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, TrainMode::ALPHAS);
    let loss = model.loss(&mut tape, &bound, batch)?;
    let value = checked_loss(tape.value(loss).item(), "val", tag)?;
    let mut grads = tape.backward(loss)?;
    let mut updates = Vec::new();
    for (name, att) in model.attachments.iter_mut() {
        if let (Attachment::Super(m), BoundAttachment::Super(v)) = (att, &bound.attachments[name]) {
            let g = grad_or_zero(grads.take(v.alphas), &m.alphas);
            updates.push((format!("{name}/alphas"), &mut m.alphas, g));
        }
    }
    opt.step(&mut updates, clip);
    Ok(value)
}

/// Token-level mean cross-entropy over a split.
pub fn mean_loss(model: &AdaptedModel, split: &Dataset, batch_size: usize) -> Result<f64> {
    Ok(eval_perplexity(model, split, batch_size)?.ln())
}

/// One search epoch: every training batch paired with a validation batch,
/// cycling the validation batches when there are fewer of them.
pub fn search_epoch(
    model: &mut AdaptedModel,
    splits: &Splits,
    config: &SearchConfig,
    state: &mut SearchState,
) -> Result<()> {
    let start = Instant::now();
    let epoch = state.epochs_done;
    let train_batches = batch_iter(&splits.train, config.batch_size, config.seed, epoch);
    let val_batches = batch_iter(
        &splits.val,
        config.batch_size,
        derive_seed(config.seed, "val"),
        epoch,
    );
    if val_batches.is_empty() || train_batches.is_empty() {
        return Err(Error::arg("search needs non-empty train and val splits"));
    }
    let (mut train_sum, mut val_sum) = (0.0, 0.0);
    for (i, idx) in train_batches.iter().enumerate() {
        let tag = StepTag {
            step: state.step,
            batch: i,
        };
        let tb = splits.train.batch(idx)?;
        let tl = weight_step(model, &tb, &mut state.weight_opt, config.grad_clip, tag)?;
        let vb = splits.val.batch(&val_batches[i % val_batches.len()])?;
        let vl = alpha_step(model, &vb, &mut state.alpha_opt, config.grad_clip, tag)?;
        state.train_loss.push(tl);
        state.val_loss.push(vl);
        state.step += 1;
        train_sum += tl;
        val_sum += vl;
    }
    for m in model.supernets() {
        state
            .alpha_history
            .entry(m.name.clone())
            .or_default()
            .push(m.probabilities());
    }
    let n = train_batches.len() as f64;
    let ppl = eval_perplexity(model, &splits.eval, config.eval_batch_size)?;
    state.metrics.push(EpochMetrics {
        phase: Phase::Search,
        epoch,
        train_loss: train_sum / n,
        val_loss: val_sum / n,
        eval_perplexity: ppl,
        trainable_params: model.trainable_params(),
        wall_seconds: start.elapsed().as_secs_f64(),
    });
    state.epochs_done += 1;
    log::info!(
        "search epoch {epoch}: train {:.4} val {:.4} eval ppl {ppl:.4}",
        train_sum / n,
        val_sum / n
    );
    Ok(())
}

/// Attaches fresh supernet modules for `config` to every target projection.
pub fn prepare_search(model: &mut AdaptedModel, config: &SearchConfig) -> Result<()> {
    config.validate()?;
    let lora_alpha = config.lora_alpha.unwrap_or(config.space.r_max() as f64);
    model.attach_supernets(&config.space, lora_alpha, config.seed)
}

/// Runs the search epochs on a model carrying supernet modules and samples
/// the rank map.
pub fn run_search(model: &mut AdaptedModel, splits: &Splits, config: &SearchConfig) -> Result<(RankMap, SearchState)> {
    let state = SearchState::new(config);
    resume_search(model, splits, config, state, None)
}

/// Continues a search from `state`. On a step error the model and state as
/// of the last completed epoch are written to `abort_checkpoint` first.
pub fn resume_search(
    model: &mut AdaptedModel,
    splits: &Splits,
    config: &SearchConfig,
    mut state: SearchState,
    abort_checkpoint: Option<&Path>,
) -> Result<(RankMap, SearchState)> {
    config.validate()?;
    if model.supernets().next().is_none() || model.supernets().count() != model.attachments.len() {
        return Err(Error::State(
            "run_search needs supernet modules on every adapted projection".into(),
        ));
    }
    while state.epochs_done < config.search_epochs {
        let snapshot = abort_checkpoint.map(|_| (model.clone(), state.clone()));
        if let Err(e) = search_epoch(model, splits, config, &mut state) {
            if let (Some(path), Some((m, s))) = (abort_checkpoint, snapshot) {
                log::error!("search aborted: {e}; writing checkpoint to {}", path.display());
                crate::checkpoint::Checkpoint::new(m)
                    .with_search(s, config.clone())
                    .save(path)?;
            }
            return Err(e);
        }
    }
    Ok((RankMap::from_modules(model.supernets()), state))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub eval_perplexity: f64,
    pub adapter_params: usize,
    pub train_loss: Vec<f64>,
    pub metrics: Vec<EpochMetrics>,
}

/// Replaces supernet modules with fixed-rank adapters from `rank_map` (warm
/// start, or fresh initialization with `reinit_after_search`) and trains
/// them on the training split.
pub fn run_finetune(
    model: &mut AdaptedModel,
    rank_map: &RankMap,
    splits: &Splits,
    config: &SearchConfig,
) -> Result<FinetuneReport> {
    config.validate()?;
    rank_map.validate()?;
    let mut next = BTreeMap::new();
    for (name, att) in &model.attachments {
        let rank = rank_map
            .rank(name)
            .ok_or_else(|| Error::arg(format!("rank map has no entry for `{name}`")))?;
        let fixed = match att {
            Attachment::Super(m) => {
                if !m.space.contains(rank) {
                    return Err(Error::arg(format!(
                        "rank {rank} for `{name}` is not in its search space {:?}",
                        m.space.ranks()
                    )));
                }
                m.extract_adapter(rank)?
            }
            Attachment::Fixed(a) if a.rank == rank => a.clone(),
            Attachment::Fixed(a) => {
                return Err(Error::arg(format!(
                    "`{name}` already carries a rank-{} adapter, rank map asks for {rank}",
                    a.rank
                )))
            }
        };
        next.insert(name.clone(), Attachment::Fixed(fixed));
    }
    if next.is_empty() || config.reinit_after_search {
        model.attach_adapters(rank_map, config.scaling(), config.seed)?;
    } else {
        model.attachments = next;
    }
    train_adapters(model, splits, config)
}

/// Plain fixed-rank LoRA fine-tuning at a uniform `rank` from a fresh
/// initialization, for `config.finetune_epochs` epochs.
pub fn run_baseline(model: &mut AdaptedModel, rank: usize, splits: &Splits, config: &SearchConfig) -> Result<FinetuneReport> {
    config.validate()?;
    let names: Vec<String> = model.config().adapted_modules().into_iter().map(|(n, _)| n).collect();
    let map = RankMap::uniform(names.iter().map(String::as_str), rank);
    model.attach_adapters(&map, scaling_for(config.lora_alpha, rank), config.seed)?;
    train_adapters(model, splits, config)
}

fn train_adapters(model: &mut AdaptedModel, splits: &Splits, config: &SearchConfig) -> Result<FinetuneReport> {
    let mut opt = Optimizer::new(config.weight_optimizer);
    let seed = derive_seed(config.seed, "finetune");
    let mut train_loss = Vec::new();
    let mut metrics = Vec::new();
    for epoch in 0..config.finetune_epochs {
        let start = Instant::now();
        let batches = batch_iter(&splits.train, config.batch_size, seed, epoch);
        let mut sum = 0.0;
        for (i, idx) in batches.iter().enumerate() {
            let tag = StepTag {
                step: train_loss.len(),
                batch: i,
            };
            let b = splits.train.batch(idx)?;
            let l = weight_step(model, &b, &mut opt, config.grad_clip, tag)?;
            train_loss.push(l);
            sum += l;
        }
        let val_loss = mean_loss(model, &splits.val, config.eval_batch_size)?;
        let ppl = eval_perplexity(model, &splits.eval, config.eval_batch_size)?;
        log::info!(
            "finetune epoch {epoch}: train {:.4} val {val_loss:.4} eval ppl {ppl:.4}",
            sum / batches.len() as f64
        );
        metrics.push(EpochMetrics {
            phase: Phase::Finetune,
            epoch,
            train_loss: sum / batches.len() as f64,
            val_loss,
            eval_perplexity: ppl,
            trainable_params: model.trainable_params(),
            wall_seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(FinetuneReport {
        eval_perplexity: eval_perplexity(model, &splits.eval, config.eval_batch_size)?,
        adapter_params: model.adapter_params(),
        train_loss,
        metrics,
    })
}
