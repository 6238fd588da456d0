//! Mini-batch training with Adam.
//!
//! Every epoch visits each trajectory once, in a shuffled order, with a split
//! point drawn uniformly from its steps. Per-example gradients are computed
//! in parallel and summed in a fixed order so results do not depend on the
//! thread count.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Checkpoint, ModelError};
use crate::codec::{encode_pair, CodecError, EncodedPair, Vocabulary};
use crate::trajectory::Trajectory;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("non-finite loss at step {step}")]
    NonFinite { step: u64 },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("callback failed: {0}")]
    Callback(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub gradient_accumulation: usize,
    pub epochs: usize,
    pub lambda: f64,
    pub shuffle_seed: u64,
    /// Optimizer steps between checkpoint callbacks; 0 disables them.
    pub checkpoint_every: u64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 8,
            gradient_accumulation: 1,
            epochs: 10,
            lambda: 0.5,
            shuffle_seed: 0,
            checkpoint_every: 0,
            clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.98,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.learning_rate > 0.0) {
            return err("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.gradient_accumulation == 0 {
            return err("batch_size and gradient_accumulation must be positive");
        }
        if !(self.lambda >= 0.0) {
            return err("lambda must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return err("Adam betas must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub goal_action_loss: f64,
    /// Mean over the examples that had a next-observation span.
    pub observation_loss: Option<f64>,
    pub grad_norm: f64,
}

/// Pre-tokenized training items. Each item holds every split of one
/// trajectory; an epoch samples one split per item.
pub struct TrainingSet {
    items: Vec<Vec<EncodedPair>>,
}

impl TrainingSet {
    /// Tokenizes all splits of each trajectory with its normalized goals.
    pub fn from_trajectories(
        vocab: &Vocabulary,
        data: &[(&Trajectory, Vec<u8>)],
        max_input: usize,
        max_output: usize,
    ) -> Result<TrainingSet, CodecError> {
        let items = data
            .iter()
            .filter(|(t, _)| !t.is_empty())
            .map(|(traj, goals)| {
                (0..traj.len())
                    .map(|t| encode_pair(vocab, traj, t, goals, max_input, max_output))
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(TrainingSet { items })
    }

    /// Each pair becomes its own single-split item.
    pub fn from_pairs(pairs: Vec<EncodedPair>) -> TrainingSet {
        TrainingSet {
            items: pairs.into_iter().map(|p| vec![p]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn pair_count(&self) -> usize {
        self.items.iter().map(Vec::len).sum()
    }

    pub fn pairs(&self) -> impl Iterator<Item = &EncodedPair> {
        self.items.iter().flatten()
    }
}

struct Adam {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: i32,
}

impl Adam {
    fn step(&mut self, params: &mut [Array2<f64>], grads: &[Array2<f64>], cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let lr = cfg.learning_rate;
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + 1e-8);
            });
        }
    }
}

/// Trains `ckpt` in place. `on_step` sees the metrics of every optimizer
/// step; `on_checkpoint` fires every `checkpoint_every` steps and once at the
/// end.
pub fn train(
    ckpt: &mut Checkpoint,
    set: &TrainingSet,
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(&TrainMetrics) -> Result<(), String>,
    on_checkpoint: &mut dyn FnMut(&Checkpoint) -> Result<(), String>,
) -> Result<Vec<TrainMetrics>, TrainError> {
    cfg.validate()?;
    if set.is_empty() {
        return Err(TrainError::Config("empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
    let mut adam = Adam {
        m: ckpt.model.params.zeros_like(),
        v: ckpt.model.params.zeros_like(),
        t: 0,
    };
    let per_step = cfg.batch_size * cfg.gradient_accumulation;
    let mut history = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..set.items.len()).collect();
        order.shuffle(&mut rng);
        let picks: Vec<&EncodedPair> = order
            .iter()
            .map(|&i| {
                let splits = &set.items[i];
                &splits[rng.gen_range(0..splits.len())]
            })
            .collect();
        for batch in picks.chunks(per_step) {
            let step = ckpt.step + 1;
            let model = &ckpt.model;
            let results = batch
                .par_iter()
                .map(|p| model.loss_and_grad(p, cfg.lambda))
                .collect::<Result<Vec<_>, _>>()?;
            let n = results.len() as f64;
            let mut grads = model.params.zeros_like();
            let (mut loss, mut ga) = (0.0, 0.0);
            let (mut obs, mut obs_n) = (0.0, 0usize);
            for (parts, g) in &results {
                loss += parts.total;
                ga += parts.goal_action;
                if let Some(o) = parts.observation {
                    obs += o;
                    obs_n += 1;
                }
                for (acc, gi) in grads.iter_mut().zip(g) {
                    *acc += gi;
                }
            }
            drop(results);
            loss /= n;
            if !loss.is_finite() {
                return Err(TrainError::NonFinite { step });
            }
            let mut norm = 0.0;
            for g in grads.iter_mut() {
                *g /= n;
                norm += g.iter().map(|v| v * v).sum::<f64>();
            }
            let norm = norm.sqrt();
            if !norm.is_finite() {
                return Err(TrainError::NonFinite { step });
            }
            if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
                let scale = cfg.clip_norm / norm;
                grads.iter_mut().for_each(|g| *g *= scale);
            }
            adam.step(&mut ckpt.model.params.tensors, &grads, cfg);
            ckpt.step = step;
            let metrics = TrainMetrics {
                step,
                epoch,
                loss,
                goal_action_loss: ga / n,
                observation_loss: (obs_n > 0).then(|| obs / obs_n as f64),
                grad_norm: norm,
            };
            on_step(&metrics).map_err(TrainError::Callback)?;
            history.push(metrics);
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                on_checkpoint(ckpt).map_err(TrainError::Callback)?;
            }
        }
    }
    on_checkpoint(ckpt).map_err(TrainError::Callback)?;
    Ok(history)
}
