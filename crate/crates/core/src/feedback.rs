//! Reinforcement training of the caption model from the frozen
//! predictor's feedback.
//!
//! Each training step rolls out one caption per pair in the batch,
//! scores it with either the prompt-graded relevance reward or the
//! predictor's confidence in its own answer, and ascends the
//! reward-weighted sequence log-likelihood. During the first epoch only,
//! a fine-tuning anchor term over the adaptation set is mixed in with
//! weight `1 - alpha`; later epochs are pure reinforcement and record an
//! exactly zero anchor gradient norm without computing one.
//!
//! The reward is treated as a constant with respect to the parameters:
//! gradients flow only through the sequence log-probability.

use serde::{Deserialize, Serialize};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adaptation::{ft_loss_and_grad, shuffled_indices, AdaptationExample};
use crate::captioner::{CaptionSample, CaptionerParams, DecodeConfig, DecodeMode, Vocabulary};
use crate::error::{Error, Result};
use crate::predictor::{LevelScheme, Predictor, PredictorConfig, Verdict};
use crate::seed::{derive, derive_idx, derive_idx2};
use crate::world::{DatasetSplit, KnowledgeBase, Scene, WorldPair};

// ==================== configuration ====================

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    /// Relevance level value emitted by the grading instruction.
    Prompt,
    /// Probability the predictor assigns to its own chosen answer.
    Confidence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of the reinforcement term in the joint objective; the
    /// anchor term gets `1 - alpha` and only participates in epoch 0.
    pub alpha: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Desk-scale factor applied to the learning rate.
    pub lr_multiplier: f64,
    /// Linear warmup horizon in optimizer steps (0 disables warmup).
    pub warmup_steps: usize,
    /// Decoupled weight decay applied to every parameter each step.
    pub weight_decay: f64,
    pub reward_kind: RewardKind,
    /// Subtract the batch-mean reward before weighting gradients.
    pub use_baseline: bool,
    /// Top-k width for rollout sampling.
    pub rollout_top_k: usize,
    pub rollout_temperature: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.9,
            epochs: 10,
            batch_size: 8,
            learning_rate: 2e-6,
            lr_multiplier: 1000.0,
            warmup_steps: 600,
            weight_decay: 0.05,
            reward_kind: RewardKind::Confidence,
            use_baseline: false,
            rollout_top_k: 5,
            rollout_temperature: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("alpha must lie in [0, 1]"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0) || !(self.lr_multiplier > 0.0) {
            return Err(Error::config("learning_rate and lr_multiplier must be positive"));
        }
        if !(0.0..1.0).contains(&self.weight_decay) {
            return Err(Error::config("weight_decay must lie in [0, 1)"));
        }
        if self.rollout_top_k == 0 {
            return Err(Error::config("rollout_top_k must be at least 1"));
        }
        if !(self.rollout_temperature > 0.0) {
            return Err(Error::config("rollout_temperature must be positive"));
        }
        Ok(())
    }

    pub fn effective_learning_rate(&self) -> f64 {
        self.learning_rate * self.lr_multiplier
    }

    /// Warmup-scaled learning rate for a zero-based global step.
    pub fn learning_rate_at(&self, global_step: usize) -> f64 {
        let base = self.effective_learning_rate();
        if self.warmup_steps == 0 {
            return base;
        }
        base * (((global_step + 1) as f64) / self.warmup_steps as f64).min(1.0)
    }
}

// ==================== history records ====================

/// One reward observation: a rollout scored by the predictor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub epoch: usize,
    pub scene_id: u64,
    pub question_id: u64,
    pub caption_tokens: Vec<u32>,
    pub reward_kind: RewardKind,
    pub reward: f64,
    /// Present for confidence rewards: the answer the reward came from.
    pub verdict: Option<Verdict>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub mean_reward: f64,
    pub ft_loss: f64,
    pub rl_loss: f64,
    pub ft_grad_norm: f64,
    pub rl_grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_reward: f64,
    pub mean_ft_loss: f64,
    pub mean_rl_loss: f64,
}

/// Complete training trace: per-epoch summaries, per-step optimizer
/// records, every reward observation, and one checkpoint per epoch.
#[derive(Clone, Debug)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    pub rewards: Vec<RewardRecord>,
    pub checkpoints: Vec<CaptionerParams>,
    /// Epoch index with the highest mean reward (earliest on ties).
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn best_params(&self) -> &CaptionerParams {
        &self.checkpoints[self.best_epoch]
    }
}

/// CSV rendering of the per-epoch history; the header is stable.
pub fn history_csv(history: &TrainHistory) -> String {
    let mut out = String::from("epoch,mean_reward,mean_ft_loss,mean_rl_loss\n");
    for e in &history.epochs {
        out.push_str(&format!(
            "{},{},{},{}\n",
            e.epoch, e.mean_reward, e.mean_ft_loss, e.mean_rl_loss
        ));
    }
    out
}

/// Earliest epoch with the highest mean reward.
pub fn best_epoch(epochs: &[EpochRecord]) -> usize {
    let mut best = 0;
    for (i, e) in epochs.iter().enumerate() {
        if e.mean_reward > epochs[best].mean_reward {
            best = i;
        }
    }
    best
}

// ==================== gradient composition ====================

/// The joint gradient: `(1 - alpha) * ft + alpha * rl`, elementwise. The
/// anchor part may be absent (treated as zero).
pub fn joint_gradient(ft_grad: Option<&[f64]>, rl_grad: &[f64], alpha: f64) -> Vec<f64> {
    match ft_grad {
        Some(ft) => ft
            .iter()
            .zip(rl_grad)
            .map(|(f, r)| (1.0 - alpha) * f + alpha * r)
            .collect(),
        None => rl_grad.iter().map(|r| alpha * r).collect(),
    }
}

fn l2(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

// ==================== rollouts ====================

/// Sample one caption for the pair's full scene and score it.
fn rollout(
    params: &CaptionerParams,
    pair: &WorldPair,
    predictor: &Predictor,
    config: &TrainConfig,
    predictor_config: &PredictorConfig,
    levels: &LevelScheme,
    seed: u64,
) -> Result<(CaptionSample, f64, Option<Verdict>)> {
    let cells = pair.scene.occupied_cells().into_iter().collect();
    let sample = params.sample(
        &pair.scene,
        &cells,
        &DecodeConfig {
            mode: DecodeMode::TopK {
                k: config.rollout_top_k,
            },
            temperature: config.rollout_temperature,
            max_len: params.dims.max_len,
            seed,
        },
    )?;
    let (reward, verdict) = match config.reward_kind {
        RewardKind::Prompt => {
            let grading =
                predictor.grade(&pair.question, &sample.tokens, levels, predictor_config)?;
            (grading.reward, None)
        }
        RewardKind::Confidence => {
            let verdict =
                predictor.predict(&pair.scene, &pair.question, &sample.tokens, predictor_config)?;
            (verdict.confidence, Some(verdict))
        }
    };
    Ok((sample, reward, verdict))
}

// ==================== the training loop ====================

/// One optimizer step over a batch of pair indices. Public so the
/// composition of anchor and reinforcement gradients can be probed
/// in isolation; [`train`] drives it.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    params: &mut CaptionerParams,
    split: &DatasetSplit,
    batch: &[usize],
    adaptation_set: &[AdaptationExample],
    scenes: &std::collections::BTreeMap<u64, Scene>,
    kb: &KnowledgeBase,
    vocab: &Vocabulary,
    config: &TrainConfig,
    predictor_config: &PredictorConfig,
    levels: &LevelScheme,
    epoch: usize,
    global_step: usize,
    rollout_stream: u64,
    ft_stream: u64,
    rewards_out: &mut Vec<RewardRecord>,
) -> Result<StepRecord> {
    let predictor = Predictor::new(kb, vocab);
    let n_params = params.n_params();

    // Reinforcement term: one rollout per pair in the batch.
    let mut batch_rewards = Vec::with_capacity(batch.len());
    let mut rollouts = Vec::with_capacity(batch.len());
    for &pair_idx in batch {
        let pair = &split.pairs[pair_idx];
        let seed = derive_idx2(rollout_stream, epoch as u64, pair_idx as u64);
        let (sample, reward, verdict) =
            rollout(params, pair, &predictor, config, predictor_config, levels, seed)?;
        batch_rewards.push(reward);
        rewards_out.push(RewardRecord {
            epoch,
            scene_id: pair.scene.id,
            question_id: pair.question.id,
            caption_tokens: sample.tokens.clone(),
            reward_kind: config.reward_kind,
            reward,
            verdict,
        });
        rollouts.push((pair_idx, sample));
    }
    let mean_reward = batch_rewards.iter().sum::<f64>() / batch.len() as f64;
    let baseline = if config.use_baseline { mean_reward } else { 0.0 };

    let mut rl_grad = vec![0.0; n_params];
    let mut rl_loss = 0.0;
    for ((pair_idx, sample), reward) in rollouts.iter().zip(&batch_rewards) {
        let pair = &split.pairs[*pair_idx];
        let cells = pair.scene.occupied_cells().into_iter().collect();
        let (log_prob, grad) = params.grad_log_prob(&pair.scene, &cells, &sample.tokens)?;
        let adjusted = reward - baseline;
        rl_loss += -adjusted * log_prob;
        for (acc, g) in rl_grad.iter_mut().zip(&grad) {
            *acc += -adjusted * g;
        }
    }
    let n = batch.len() as f64;
    rl_loss /= n;
    for g in &mut rl_grad {
        *g /= n;
    }

    // Anchor term: only in the first epoch, only when it can matter.
    let anchor_active = epoch == 0 && config.alpha < 1.0 && !adaptation_set.is_empty();
    let (ft_loss, ft_grad) = if anchor_active {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_idx(ft_stream, global_step as u64));
        let mut grad_mean = vec![0.0; n_params];
        let mut loss_mean = 0.0;
        for _ in 0..config.batch_size {
            let ex = &adaptation_set[rng.random_range(0..adaptation_set.len())];
            let scene = scenes.get(&ex.scene_id).ok_or_else(|| {
                Error::data(format!(
                    "adaptation example references scene {} not present in the split",
                    ex.scene_id
                ))
            })?;
            let (loss, grad) = ft_loss_and_grad(params, scene, &ex.caption_tokens)?;
            loss_mean += loss;
            for (m, g) in grad_mean.iter_mut().zip(&grad) {
                *m += g;
            }
        }
        let b = config.batch_size as f64;
        loss_mean /= b;
        for m in &mut grad_mean {
            *m /= b;
        }
        (loss_mean, Some(grad_mean))
    } else {
        (0.0, None)
    };
    let ft_grad_norm = ft_grad.as_deref().map_or(0.0, l2);

    let grad = joint_gradient(ft_grad.as_deref(), &rl_grad, config.alpha);
    let lr = config.learning_rate_at(global_step);
    let decay = 1.0 - lr * config.weight_decay;
    for (value, g) in params.values.iter_mut().zip(&grad) {
        *value = *value * decay - lr * g;
    }

    Ok(StepRecord {
        epoch,
        step: global_step,
        lr,
        mean_reward,
        ft_loss,
        rl_loss,
        ft_grad_norm,
        rl_grad_norm: l2(&rl_grad),
    })
}

/// Run the full reinforcement schedule and return the complete history,
/// including one checkpoint per epoch and the best epoch by mean reward.
///
/// With `alpha = 0` and an empty adaptation set there is no gradient
/// signal at all; the loop is skipped with a warning and the initial
/// parameters come back as the only checkpoint.
#[allow(clippy::too_many_arguments)]
pub fn train(
    params: &CaptionerParams,
    split: &DatasetSplit,
    adaptation_set: &[AdaptationExample],
    kb: &KnowledgeBase,
    vocab: &Vocabulary,
    config: &TrainConfig,
    predictor_config: &PredictorConfig,
    levels: &LevelScheme,
    seed: u64,
) -> Result<TrainHistory> {
    config.validate()?;
    predictor_config.validate()?;
    if split.pairs.is_empty() {
        return Err(Error::domain("training split has no pairs"));
    }
    if config.alpha == 0.0 && adaptation_set.is_empty() {
        log::warn!(
            "alpha is 0 and the adaptation set is empty: nothing to optimize, parameters unchanged"
        );
        return Ok(TrainHistory {
            epochs: Vec::new(),
            steps: Vec::new(),
            rewards: Vec::new(),
            checkpoints: vec![params.clone()],
            best_epoch: 0,
        });
    }

    let scenes: std::collections::BTreeMap<u64, Scene> = split
        .pairs
        .iter()
        .map(|p| (p.scene.id, p.scene.clone()))
        .collect();
    let shuffle_stream = derive(seed, "shuffle");
    let rollout_stream = derive(seed, "rollout");
    let ft_stream = derive(seed, "ft-draw");

    let mut current = params.clone();
    let mut history = TrainHistory {
        epochs: Vec::with_capacity(config.epochs),
        steps: Vec::new(),
        rewards: Vec::new(),
        checkpoints: Vec::with_capacity(config.epochs),
        best_epoch: 0,
    };
    let mut global_step = 0usize;
    for epoch in 0..config.epochs {
        let order = shuffled_indices(split.pairs.len(), derive_idx(shuffle_stream, epoch as u64));
        let epoch_reward_start = history.rewards.len();
        let mut ft_sum = 0.0;
        let mut rl_sum = 0.0;
        let mut n_steps = 0usize;
        for batch in order.chunks(config.batch_size) {
            let record = train_step(
                &mut current,
                split,
                batch,
                adaptation_set,
                &scenes,
                kb,
                vocab,
                config,
                predictor_config,
                levels,
                epoch,
                global_step,
                rollout_stream,
                ft_stream,
                &mut history.rewards,
            )?;
            ft_sum += record.ft_loss;
            rl_sum += record.rl_loss;
            history.steps.push(record);
            global_step += 1;
            n_steps += 1;
        }
        let epoch_rewards = &history.rewards[epoch_reward_start..];
        let mean_reward =
            epoch_rewards.iter().map(|r| r.reward).sum::<f64>() / epoch_rewards.len() as f64;
        history.epochs.push(EpochRecord {
            epoch,
            mean_reward,
            mean_ft_loss: ft_sum / n_steps as f64,
            mean_rl_loss: rl_sum / n_steps as f64,
        });
        history.checkpoints.push(current.clone());
    }
    history.best_epoch = best_epoch(&history.epochs);
    Ok(history)
}
