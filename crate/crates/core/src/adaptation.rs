//! Captioning adaptation: propose diverse captions for each training
//! scene, keep the ones the predictor grades at the top relevance level,
//! and fine-tune the caption model on the kept set.
//!
//! Selection never looks at gold answers; the only supervision signal is
//! the frozen predictor's emitted grade. Retained examples keep the
//! (pair order, proposition order) of generation, duplicates included,
//! so the set is reproducible record for record.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::captioner::{CaptionSample, CaptionerParams, DecodeConfig, DecodeMode, Vocabulary};
use crate::error::{Error, Result};
use crate::predictor::{LevelScheme, Predictor, PredictorConfig};
use crate::seed::{derive, derive_idx};
use crate::world::{DatasetSplit, KnowledgeBase, Scene};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptationConfig {
    /// Caption propositions drawn per training pair.
    pub k_propositions: usize,
    /// Nucleus mass for proposal sampling.
    pub nucleus_p: f64,
    /// Sampling temperature for proposals.
    pub decode_temperature: f64,
    /// Fine-tuning epochs over the retained set.
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Desk-scale factor applied to the learning rate; the tiny model
    /// needs far larger steps than the full-scale rate it is quoted at.
    pub lr_multiplier: f64,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig {
            k_propositions: 8,
            nucleus_p: 0.9,
            decode_temperature: 1.0,
            epochs: 3,
            batch_size: 8,
            learning_rate: 2e-6,
            lr_multiplier: 1000.0,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_propositions == 0 {
            return Err(Error::config("k_propositions must be at least 1"));
        }
        if !(self.nucleus_p > 0.0 && self.nucleus_p <= 1.0) {
            return Err(Error::config("nucleus_p must lie in (0, 1]"));
        }
        if !(self.decode_temperature > 0.0) {
            return Err(Error::config("decode_temperature must be positive"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0) || !(self.lr_multiplier > 0.0) {
            return Err(Error::config("learning_rate and lr_multiplier must be positive"));
        }
        Ok(())
    }

    pub fn effective_learning_rate(&self) -> f64 {
        self.learning_rate * self.lr_multiplier
    }
}

/// One retained (pair, caption) example. These are the records written to
/// the adaptation-set JSONL artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptationExample {
    pub scene_id: u64,
    pub question_id: u64,
    pub caption_tokens: Vec<u32>,
    /// Emitted relevance letter at selection time.
    pub grade: char,
    pub rendered_grading_prompt: String,
}

/// Draw `k_propositions` nucleus samples for the full scene. Proposal `i`
/// uses seed `seed + i`, so the propositions for one pair form one
/// contiguous, reproducible seed block.
pub fn propose_captions(
    params: &CaptionerParams,
    scene: &Scene,
    config: &AdaptationConfig,
    seed: u64,
) -> Result<Vec<CaptionSample>> {
    config.validate()?;
    let cells = scene.occupied_cells().into_iter().collect();
    (0..config.k_propositions as u64)
        .map(|i| {
            params.sample(
                scene,
                &cells,
                &DecodeConfig {
                    mode: DecodeMode::Nucleus { p: config.nucleus_p },
                    temperature: config.decode_temperature,
                    max_len: params.dims.max_len,
                    seed: seed + i,
                },
            )
        })
        .collect()
}

/// Propose captions for every training pair and keep those the predictor
/// grades at the top level. Pairs that retain nothing are logged and
/// skipped; an entirely empty result is a warning, not an error.
#[allow(clippy::too_many_arguments)]
pub fn build_adaptation_set(
    params: &CaptionerParams,
    split: &DatasetSplit,
    kb: &KnowledgeBase,
    vocab: &Vocabulary,
    config: &AdaptationConfig,
    predictor_config: &PredictorConfig,
    levels: &LevelScheme,
    seed: u64,
) -> Result<Vec<AdaptationExample>> {
    config.validate()?;
    predictor_config.validate()?;
    let top = levels.len() - 1;
    let proposal_stream = derive(seed, "propose");

    let per_pair: Vec<Vec<AdaptationExample>> = split
        .pairs
        .par_iter()
        .enumerate()
        .map(|(idx, pair)| -> Result<Vec<AdaptationExample>> {
            let predictor = Predictor::new(kb, vocab);
            let pair_seed = derive_idx(proposal_stream, idx as u64);
            let propositions = propose_captions(params, &pair.scene, config, pair_seed)?;
            let mut kept = Vec::new();
            for sample in propositions {
                let grading =
                    predictor.grade(&pair.question, &sample.tokens, levels, predictor_config)?;
                if grading.emitted_level == top {
                    kept.push(AdaptationExample {
                        scene_id: pair.scene.id,
                        question_id: pair.question.id,
                        caption_tokens: sample.tokens.clone(),
                        grade: grading.emitted_letter(),
                        rendered_grading_prompt: predictor
                            .grading_prompt(&pair.question, &sample.tokens)?,
                    });
                }
            }
            if kept.is_empty() {
                log::debug!(
                    "no proposition for scene {} reached the top grade; pair skipped",
                    pair.scene.id
                );
            }
            Ok(kept)
        })
        .collect::<Result<_>>()?;

    let skipped = per_pair.iter().filter(|kept| kept.is_empty()).count();
    let set: Vec<AdaptationExample> = per_pair.into_iter().flatten().collect();
    if set.is_empty() {
        log::warn!("adaptation set is empty: no proposition anywhere reached the top grade");
    } else if skipped > 0 {
        log::info!(
            "{skipped} of {} pairs retained no top-grade proposition",
            split.pairs.len()
        );
    }
    Ok(set)
}

/// Mean token-level negative log-likelihood of one caption, normalized by
/// the step count (content tokens plus the terminator step).
pub fn ft_loss(params: &CaptionerParams, scene: &Scene, tokens: &[u32]) -> Result<f64> {
    let cells = scene.occupied_cells().into_iter().collect();
    let steps = params.step_log_probs(scene, &cells, tokens)?;
    Ok(-steps.iter().sum::<f64>() / steps.len() as f64)
}

/// Loss and flat-space gradient for one caption (same normalization as
/// [`ft_loss`]).
pub fn ft_loss_and_grad(
    params: &CaptionerParams,
    scene: &Scene,
    tokens: &[u32],
) -> Result<(f64, Vec<f64>)> {
    let cells = scene.occupied_cells().into_iter().collect();
    let (log_prob, mut grad) = params.grad_log_prob(scene, &cells, tokens)?;
    let t = (tokens.len() + 1) as f64;
    for g in &mut grad {
        *g = -*g / t;
    }
    Ok((-log_prob / t, grad))
}

#[derive(Clone, Debug)]
pub struct AdaptationOutcome {
    pub params: CaptionerParams,
    /// Mean per-example loss of each epoch, in traversal order.
    pub epoch_losses: Vec<f64>,
    pub n_examples: usize,
}

/// Plain minibatch SGD over the retained set. An empty set leaves the
/// parameters untouched (with a warning); scenes are resolved through the
/// split by scene id.
pub fn fine_tune(
    params: &CaptionerParams,
    split: &DatasetSplit,
    set: &[AdaptationExample],
    config: &AdaptationConfig,
    seed: u64,
) -> Result<AdaptationOutcome> {
    config.validate()?;
    if set.is_empty() {
        log::warn!("fine-tuning skipped: the adaptation set is empty");
        return Ok(AdaptationOutcome {
            params: params.clone(),
            epoch_losses: Vec::new(),
            n_examples: 0,
        });
    }
    let scenes: BTreeMap<u64, &Scene> = split.pairs.iter().map(|p| (p.scene.id, &p.scene)).collect();
    for ex in set {
        if !scenes.contains_key(&ex.scene_id) {
            return Err(Error::data(format!(
                "adaptation example references scene {} not present in the split",
                ex.scene_id
            )));
        }
    }

    let mut current = params.clone();
    let lr = config.effective_learning_rate();
    let shuffle_stream = derive(seed, "ft-shuffle");
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let order = shuffled_indices(set.len(), derive_idx(shuffle_stream, epoch as u64));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut grad_mean = vec![0.0; current.n_params()];
            let mut batch_loss = 0.0;
            for &i in batch {
                let ex = &set[i];
                let scene = scenes[&ex.scene_id];
                let (loss, grad) = ft_loss_and_grad(&current, scene, &ex.caption_tokens)?;
                batch_loss += loss;
                for (m, g) in grad_mean.iter_mut().zip(&grad) {
                    *m += g;
                }
            }
            let n = batch.len() as f64;
            epoch_loss += batch_loss;
            for (value, m) in current.values.iter_mut().zip(&grad_mean) {
                *value -= lr * m / n;
            }
        }
        epoch_losses.push(epoch_loss / set.len() as f64);
    }
    Ok(AdaptationOutcome {
        params: current,
        epoch_losses,
        n_examples: set.len(),
    })
}

/// Seeded Fisher-Yates permutation of 0..n.
pub(crate) fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    order
}
