//! The training loop: sampling, bidirectional objective, Adam, validation,
//! learning-rate decay and early stopping.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loss::ObjectiveWeights;
use super::sampling::{training_examples, Sampler, SamplingConfig, TrainBatch, TrainExample};
use crate::autodiff::{adam_step, AdamConfig, AdamState, LossGroup, NodeId, Tape};
use crate::data::DatasetBundle;
use crate::error::{Error, Result};
use crate::eval::{validation_score, Scorer, ValScore};
use crate::graph::{Direction, EntityId, RetrievalMode};
use crate::model::{GradientSet, ParamStore};
use crate::rng::{substream, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Queries per direction per optimizer step.
    pub batch_size: usize,
    pub negatives: usize,
    pub positives: usize,
    pub temperature: f64,
    pub lambda_dir: f64,
    pub lambda_reg: f64,
    pub lr: f64,
    pub clip_norm: f64,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    pub eval_every: usize,
    /// Epochs without improvement before the learning rate is decayed.
    pub lr_patience: usize,
    pub lr_decay: f64,
    pub min_lr: f64,
    pub select_mode: RetrievalMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 64,
            negatives: 1024,
            positives: 4,
            temperature: 0.1,
            lambda_dir: 0.5,
            lambda_reg: 1e-5,
            lr: 1e-3,
            clip_norm: 1.0,
            patience: 30,
            eval_every: 1,
            lr_patience: 10,
            lr_decay: 0.5,
            min_lr: 1e-5,
            select_mode: RetrievalMode::TypeConstrained,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.lambda_dir > 0.0 && self.lambda_dir < 1.0) {
            return bad("lambda_dir must lie strictly between 0 and 1");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if self.negatives == 0 || self.positives == 0 || self.batch_size == 0 {
            return bad("negatives, positives and batch size must be at least 1");
        }
        if self.epochs == 0 || self.eval_every == 0 || self.patience == 0 {
            return bad("epochs, eval_every and patience must be at least 1");
        }
        if !(self.lambda_reg >= 0.0) || !(self.lr > 0.0) || !(self.clip_norm > 0.0) {
            return bad("lambda_reg must be non-negative, lr and clip_norm positive");
        }
        Ok(())
    }

    pub fn weights(&self) -> ObjectiveWeights {
        ObjectiveWeights { lambda_dir: self.lambda_dir, lambda_reg: self.lambda_reg }
    }

    pub fn sampling(&self) -> SamplingConfig {
        SamplingConfig { positives: self.positives, negatives: self.negatives }
    }
}

/// A model whose loss can be recorded on a tape.
pub trait Trainable {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    /// Records the scores of one batch. Returns the score node and one loss
    /// group per batch item indexing into it.
    fn record_batch<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        bundle: &'a DatasetBundle,
        batch: &TrainBatch,
    ) -> Result<(NodeId, Vec<LossGroup>)>;
}

/// Loss groups for a dense `items × targets` score matrix whose columns
/// follow target graph order.
pub fn dense_groups(bundle: &DatasetBundle, batch: &TrainBatch) -> Vec<LossGroup> {
    let target = bundle.target_graph(batch.direction);
    let n = target.len();
    let pos_of = |id: &EntityId| target.index_of(*id).expect("sampled ids exist");
    batch
        .items
        .iter()
        .enumerate()
        .map(|(k, item)| LossGroup {
            pos: item.positives.iter().map(|id| k * n + pos_of(id)).collect(),
            neg: item.negatives.iter().map(|id| k * n + pos_of(id)).collect(),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveValue {
    pub total: f64,
    pub tcm2wm: Option<f64>,
    pub wm2tcm: Option<f64>,
    pub sum_squares: f64,
}

/// `λ_dir·L_wm2tcm + (1-λ_dir)·L_tcm2wm + λ_reg·Σθ²` and its gradient.
pub fn objective<M: Trainable>(
    model: &M,
    bundle: &DatasetBundle,
    batches: &[TrainBatch],
    temperature: f64,
    weights: ObjectiveWeights,
) -> Result<(ObjectiveValue, GradientSet)> {
    let mut tape = Tape::new(model.params());
    let mut terms = Vec::new();
    let mut value = ObjectiveValue { total: 0.0, tcm2wm: None, wm2tcm: None, sum_squares: model.params().sum_squares() };
    for batch in batches {
        let (scores, groups) = model.record_batch(&mut tape, bundle, batch)?;
        let l = tape.mp_loss(scores, &groups, temperature)?;
        let w = match batch.direction {
            Direction::WmToTcm => {
                value.wm2tcm = Some(tape.scalar(l));
                weights.lambda_dir
            }
            Direction::TcmToWm => {
                value.tcm2wm = Some(tape.scalar(l));
                1.0 - weights.lambda_dir
            }
        };
        terms.push((l, w));
    }
    if weights.lambda_reg != 0.0 {
        for idx in 0..model.params().len() {
            let p = tape.param(idx);
            let ss = tape.sum_squares(p);
            terms.push((ss, weights.lambda_reg));
        }
    }
    let total = tape.weighted_sum(terms)?;
    value.total = tape.scalar(total);
    let grads = tape.backward(total)?;
    Ok((value, grads))
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: Option<f64>,
    #[serde(rename = "hit@10")]
    pub hit10: Option<f64>,
    pub mrr: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub best: ValScore,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub evaluations: usize,
    pub records: Vec<TrainRecord>,
    pub adam: AdamState,
    pub negatives_reduced: bool,
}

impl TrainOutcome {
    pub fn log_jsonl(&self) -> String {
        self.records.iter().map(|r| serde_json::to_string(r).expect("records serialize") + "\n").collect()
    }
}

fn batch_slice(list: &[TrainExample], step: usize, size: usize) -> Vec<TrainExample> {
    let start = step * size;
    if start < list.len() {
        list[start..(start + size).min(list.len())].to_vec()
    } else {
        (0..size.min(list.len())).map(|i| list[(start + i) % list.len()]).collect()
    }
}

fn diverged(epoch: usize, err: Error, params: &ParamStore) -> Error {
    match err {
        Error::NonFinite { .. } | Error::DegenerateNorm(_) => {
            Error::Diverged { epoch, reason: err.to_string(), params: Box::new(params.clone()) }
        }
        other => other,
    }
}

/// Trains `model` in place, leaving it at the best validated parameters.
///
/// Each optimizer step samples one batch per direction; the direction with
/// fewer examples wraps around so both contribute to every step. `allowed`
/// restricts which train pairs drive examples and count as positives.
pub fn train<M: Trainable>(
    model: &mut M,
    bundle: &DatasetBundle,
    config: &TrainConfig,
    allowed: Option<&BTreeSet<(EntityId, EntityId)>>,
    mut validate: impl FnMut(&M) -> Result<ValScore>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let examples = [
        training_examples(bundle, Direction::TcmToWm, allowed),
        training_examples(bundle, Direction::WmToTcm, allowed),
    ];
    if examples.iter().all(Vec::is_empty) {
        return Err(Error::InsufficientData("the training split yields no examples".into()));
    }
    let sampler = Sampler::new(bundle, config.sampling(), allowed)?;
    let mut rng = substream(config.seed, Stream::Sampling);
    let mut adam = AdamState::new(model.params(), AdamConfig { lr: config.lr, ..AdamConfig::default() });
    let weights = config.weights();

    let mut records = Vec::new();
    let mut best: Option<(ValScore, ParamStore, usize)> = None;
    let (mut stale_evals, mut stale_epochs, mut evaluations) = (0, 0, 0);
    let mut epochs_run = 0;
    let dirs = [Direction::TcmToWm, Direction::WmToTcm];
    for epoch in 1..=config.epochs {
        epochs_run = epoch;
        let mut order = examples.clone();
        for list in &mut order {
            list.shuffle(&mut rng);
        }
        let longest = order.iter().map(Vec::len).max().unwrap_or(0);
        let steps = longest.div_ceil(config.batch_size);
        let mut loss_sum = 0.0;
        for step in 0..steps {
            let mut batches = Vec::with_capacity(2);
            for (dir, list) in dirs.iter().zip(&order) {
                if !list.is_empty() {
                    let chunk = batch_slice(list, step, config.batch_size);
                    batches.push(sampler.sample_batch(*dir, &chunk, &mut rng)?);
                }
            }
            let (value, grads) = objective(model, bundle, &batches, config.temperature, weights)
                .map_err(|e| diverged(epoch, e, model.params()))?;
            if !value.total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    reason: format!("loss is {}", value.total),
                    params: Box::new(model.params().clone()),
                });
            }
            adam_step(model.params_mut(), &grads, &mut adam, Some(config.clip_norm))
                .map_err(|e| diverged(epoch, e, model.params()))?;
            loss_sum += value.total;
        }
        let lr = adam.config.lr;
        records.push(TrainRecord {
            epoch,
            split: "train".into(),
            loss: Some(loss_sum / steps as f64),
            hit10: None,
            mrr: None,
            lr,
        });

        if epoch % config.eval_every == 0 {
            let score = validate(model)?;
            evaluations += 1;
            records.push(TrainRecord {
                epoch,
                split: "val".into(),
                loss: None,
                hit10: Some(score.hit10),
                mrr: Some(score.mrr),
                lr,
            });
            if best.as_ref().is_none_or(|(b, _, _)| score.beats(b)) {
                best = Some((score, model.params().clone(), epoch));
                stale_evals = 0;
                stale_epochs = 0;
            } else {
                stale_evals += 1;
                stale_epochs += config.eval_every;
                if stale_epochs >= config.lr_patience {
                    adam.config.lr = (adam.config.lr * config.lr_decay).max(config.min_lr);
                    stale_epochs = 0;
                }
                if stale_evals >= config.patience {
                    break;
                }
            }
        }
    }

    let (best, best_epoch) = match best {
        Some((score, params, epoch)) => {
            *model.params_mut() = params;
            (score, epoch)
        }
        None => {
            let score = validate(model)?;
            evaluations += 1;
            (score, epochs_run)
        }
    };
    Ok(TrainOutcome {
        best,
        best_epoch,
        epochs_run,
        evaluations,
        records,
        adam,
        negatives_reduced: sampler.negatives_reduced(),
    })
}

/// [`train`] with validation on the val split in `config.select_mode`.
pub fn fit<M: Trainable + Scorer>(
    model: &mut M,
    bundle: &DatasetBundle,
    config: &TrainConfig,
    allowed: Option<&BTreeSet<(EntityId, EntityId)>>,
) -> Result<TrainOutcome> {
    let mode = config.select_mode;
    train(model, bundle, config, allowed, |m| validation_score(m, bundle, mode))
}
