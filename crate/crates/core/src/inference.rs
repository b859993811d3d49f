//! Caption-conditioned answer prediction.
//!
//! For each question the caption model draws several captions, each over
//! an independently subsampled set of scene cells, and the predictor
//! answers from each caption alone. The final answer aggregates the
//! per-caption verdicts either by majority vote (ties broken by summed
//! confidence, then lowest answer id) or by a weighted marginal over the
//! sampled captions, weighting each caption by the softmax of its total
//! sequence log-probability.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::captioner::{subsample_cells, CaptionSample, CaptionerParams, DecodeConfig, DecodeMode, Vocabulary};
use crate::error::{Error, Result};
use crate::predictor::{Predictor, PredictorConfig, Verdict};
use crate::seed::derive_idx;
use crate::world::{KnowledgeBase, Question, Scene};

// ==================== configuration ====================

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    MaxVote,
    Marginal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    /// Captions drawn per question.
    pub m_captions: usize,
    /// Fraction of occupied cells each caption describes.
    pub cell_fraction: f64,
    /// Top-k width for caption sampling.
    pub top_k: usize,
    pub temperature: f64,
    pub aggregation: Aggregation,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            m_captions: 10,
            cell_fraction: 0.2,
            top_k: 5,
            temperature: 1.0,
            aggregation: Aggregation::MaxVote,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_captions == 0 {
            return Err(Error::config("m_captions must be at least 1"));
        }
        if !(self.cell_fraction > 0.0 && self.cell_fraction <= 1.0) {
            return Err(Error::config("cell_fraction must lie in (0, 1]"));
        }
        if self.top_k == 0 {
            return Err(Error::config("top_k must be at least 1"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config("temperature must be positive"));
        }
        Ok(())
    }
}

// ==================== caption drawing ====================

/// One drawn caption with the cells it described.
#[derive(Clone, Debug, PartialEq)]
pub struct DiverseCaption {
    pub cells: std::collections::BTreeSet<usize>,
    pub sample: CaptionSample,
}

/// Draw `m_captions` captions, each over a fresh cell subsample. Draw `i`
/// uses the derived seeds `(seed, 2i)` for the cells and `(seed, 2i + 1)`
/// for the token sampling, so every draw is independently reproducible.
pub fn generate_diverse_captions(
    params: &CaptionerParams,
    scene: &Scene,
    config: &InferenceConfig,
    seed: u64,
) -> Result<Vec<DiverseCaption>> {
    config.validate()?;
    (0..config.m_captions as u64)
        .map(|i| {
            let cells = subsample_cells(scene, config.cell_fraction, derive_idx(seed, 2 * i))?;
            let sample = params.sample(
                scene,
                &cells,
                &DecodeConfig {
                    mode: DecodeMode::TopK { k: config.top_k },
                    temperature: config.temperature,
                    max_len: params.dims.max_len,
                    seed: derive_idx(seed, 2 * i + 1),
                },
            )?;
            Ok(DiverseCaption { cells, sample })
        })
        .collect()
}

// ==================== aggregation ====================

/// Majority vote over verdicts. Ties break by higher summed confidence,
/// then by lower answer id. Returns the winning id and the vote counts.
pub fn majority_from(verdicts: &[Verdict]) -> Result<(usize, BTreeMap<usize, usize>)> {
    if verdicts.is_empty() {
        return Err(Error::domain("majority vote needs at least one verdict"));
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    let mut confidence: BTreeMap<usize, f64> = BTreeMap::new();
    for v in verdicts {
        *counts.entry(v.answer_id).or_default() += 1;
        *confidence.entry(v.answer_id).or_default() += v.confidence;
    }
    let mut best: Option<usize> = None;
    for (&id, &count) in &counts {
        let better = match best {
            None => true,
            Some(b) => {
                let (bc, bconf) = (counts[&b], confidence[&b]);
                count > bc || (count == bc && confidence[&id] > bconf)
                // Equal count and confidence: keep the earlier (lower) id,
                // which the ascending BTreeMap iteration already visited.
            }
        };
        if better {
            best = Some(id);
        }
    }
    Ok((best.expect("non-empty verdicts"), counts))
}

/// Weighted marginal over captions: `scores[y] = sum_i w_i * probs_i[y]`
/// where `w` is the softmax of the caption log-probabilities. Returns the
/// argmax id (lowest id on ties) and the full score vector.
pub fn marginal_from(
    caption_log_probs: &[f64],
    per_caption_probs: &[Vec<f64>],
) -> Result<(usize, Vec<f64>)> {
    if caption_log_probs.is_empty() || caption_log_probs.len() != per_caption_probs.len() {
        return Err(Error::domain(
            "marginal aggregation needs matching, non-empty captions and distributions",
        ));
    }
    let n_answers = per_caption_probs[0].len();
    if per_caption_probs.iter().any(|p| p.len() != n_answers) {
        return Err(Error::domain("answer distributions have inconsistent lengths"));
    }
    let weights = crate::captioner::softmax(caption_log_probs);
    let mut scores = vec![0.0; n_answers];
    for (w, probs) in weights.iter().zip(per_caption_probs) {
        for (s, p) in scores.iter_mut().zip(probs) {
            *s += w * p;
        }
    }
    Ok((crate::predictor::argmax(&scores), scores))
}

// ==================== per-question prediction ====================

/// Everything recorded about answering one question.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionTraceEntry {
    pub cells_used: Vec<usize>,
    pub caption_tokens: Vec<u32>,
    pub caption_text: String,
    pub caption_log_prob: f64,
    pub verdict: Verdict,
    pub rendered_answer_prompt: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionTrace {
    pub question_id: u64,
    pub aggregation: Aggregation,
    pub captions: Vec<CaptionTraceEntry>,
    pub final_answer: String,
    pub final_answer_id: usize,
    /// Vote counts keyed by answer text (majority aggregation only).
    pub vote_counts: Option<BTreeMap<String, usize>>,
    /// Full marginal score vector (marginal aggregation only).
    pub marginal_scores: Option<Vec<f64>>,
}

/// Both aggregations' outcomes for one question, sharing one set of
/// caption draws; the trace reports the configured aggregation.
#[derive(Clone, Debug)]
pub struct QuestionPrediction {
    pub trace: PredictionTrace,
    pub majority_answer_id: usize,
    pub marginal_answer_id: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn predict_question(
    params: &CaptionerParams,
    scene: &Scene,
    question: &Question,
    kb: &KnowledgeBase,
    vocab: &Vocabulary,
    config: &InferenceConfig,
    predictor_config: &PredictorConfig,
    seed: u64,
) -> Result<QuestionPrediction> {
    config.validate()?;
    let predictor = Predictor::new(kb, vocab);
    let draws = generate_diverse_captions(params, scene, config, seed)?;

    let mut entries = Vec::with_capacity(draws.len());
    let mut verdicts = Vec::with_capacity(draws.len());
    let mut log_probs = Vec::with_capacity(draws.len());
    let mut distributions = Vec::with_capacity(draws.len());
    for draw in &draws {
        let probs = predictor.answer_probs(scene, question, &draw.sample.tokens, predictor_config)?;
        let answer_id = crate::predictor::argmax(&probs);
        let verdict = Verdict {
            answer_id,
            answer: kb.answer_vocabulary()[answer_id].clone(),
            confidence: probs[answer_id],
        };
        entries.push(CaptionTraceEntry {
            cells_used: draw.cells.iter().copied().collect(),
            caption_tokens: draw.sample.tokens.clone(),
            caption_text: vocab.text(&draw.sample.tokens)?,
            caption_log_prob: draw.sample.log_prob,
            verdict: verdict.clone(),
            rendered_answer_prompt: predictor.answer_prompt(
                question,
                &draw.sample.tokens,
                predictor_config,
            )?,
        });
        verdicts.push(verdict);
        log_probs.push(draw.sample.log_prob);
        distributions.push(probs);
    }

    let (majority_answer_id, counts) = majority_from(&verdicts)?;
    let (marginal_answer_id, scores) = marginal_from(&log_probs, &distributions)?;

    let final_answer_id = match config.aggregation {
        Aggregation::MaxVote => majority_answer_id,
        Aggregation::Marginal => marginal_answer_id,
    };
    let trace = PredictionTrace {
        question_id: question.id,
        aggregation: config.aggregation,
        captions: entries,
        final_answer: kb.answer_vocabulary()[final_answer_id].clone(),
        final_answer_id,
        vote_counts: match config.aggregation {
            Aggregation::MaxVote => Some(
                counts
                    .iter()
                    .map(|(&id, &c)| (kb.answer_vocabulary()[id].clone(), c))
                    .collect(),
            ),
            Aggregation::Marginal => None,
        },
        marginal_scores: match config.aggregation {
            Aggregation::MaxVote => None,
            Aggregation::Marginal => Some(scores),
        },
    };
    Ok(QuestionPrediction {
        trace,
        majority_answer_id,
        marginal_answer_id,
    })
}
