//! Evaluation suite: answer scoring on the labeled split, grade-quality
//! and confidence diagnostics, and the three sweep harnesses (training
//! objective grid, grading-scheme sizes, caption-count curve), each with
//! a hand-rolled CSV emitter.
//!
//! Every entry point is deterministic in its explicit seed: per-question
//! work keys its randomness by index so parallel iteration cannot change
//! any result.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptation::{build_adaptation_set, fine_tune, AdaptationConfig};
use crate::captioner::{CaptionSample, CaptionerParams, DecodeConfig, DecodeMode, Vocabulary};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::feedback::{train, RewardKind, TrainConfig};
use crate::inference::{predict_question, Aggregation, InferenceConfig, PredictionTrace};
use crate::predictor::{argmax, level_letter, LevelScheme, Predictor, PredictorConfig};
use crate::seed::derive_idx;
use crate::world::{generate_dataset, AnswerKey, DatasetSplit, KnowledgeBase, Scene, WorldPair};

// ==================== answer scoring ====================

/// Consensus score of one answer against an answer key: the fraction of
/// three annotators that agree, capped at 1. With ten annotations the
/// possible values are 0, 1/3, 2/3 and 1.
pub fn vqa_score(answer: &str, key: &AnswerKey) -> f64 {
    let matches = key
        .annotations
        .iter()
        .filter(|a| a.as_str() == answer)
        .count();
    (matches as f64 / 3.0).min(1.0)
}

fn labeled(pair: &WorldPair) -> Result<&AnswerKey> {
    pair.answer_key.as_ref().ok_or_else(|| {
        Error::data(format!(
            "question {} has no answer key; scoring needs the labeled split",
            pair.question.id
        ))
    })
}

// ==================== split evaluation ====================

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateStat {
    pub n: usize,
    pub mean_vqa: f64,
}

/// Aggregate scores over one labeled split. Both aggregation rules are
/// scored from the same caption draws; `mean_vqa` reports the configured
/// one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Fingerprint of the run configuration this report belongs to.
    pub fingerprint: String,
    pub n_questions: usize,
    pub aggregation: Aggregation,
    pub mean_vqa: f64,
    pub mean_vqa_majority: f64,
    pub mean_vqa_marginal: f64,
    pub per_template: BTreeMap<String, TemplateStat>,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub report: EvalReport,
    /// One trace per question, in split order.
    pub traces: Vec<PredictionTrace>,
}

/// Score a caption model on a labeled split. Question `i` uses the seed
/// `derive_idx(seed, i)`, so the result is independent of thread count.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    params: &CaptionerParams,
    split: &DatasetSplit,
    kb: &KnowledgeBase,
    vocab: &Vocabulary,
    config: &InferenceConfig,
    predictor_config: &PredictorConfig,
    fingerprint: &str,
    seed: u64,
) -> Result<EvalOutcome> {
    config.validate()?;
    if split.pairs.is_empty() {
        return Err(Error::data("evaluation split has no pairs"));
    }
    let answers = kb.answer_vocabulary();
    let rows: Vec<(PredictionTrace, f64, f64, String)> = split
        .pairs
        .par_iter()
        .enumerate()
        .map(|(i, pair)| {
            let key = labeled(pair)?;
            let prediction = predict_question(
                params,
                &pair.scene,
                &pair.question,
                kb,
                vocab,
                config,
                predictor_config,
                derive_idx(seed, i as u64),
            )?;
            let majority = vqa_score(&answers[prediction.majority_answer_id], key);
            let marginal = vqa_score(&answers[prediction.marginal_answer_id], key);
            let template = pair.question.template()?.name().to_string();
            Ok((prediction.trace, majority, marginal, template))
        })
        .collect::<Result<_>>()?;

    let n = rows.len();
    let mut sum_majority = 0.0;
    let mut sum_marginal = 0.0;
    let mut by_template: BTreeMap<String, (usize, f64)> = BTreeMap::new();
    let mut traces = Vec::with_capacity(n);
    for (trace, majority, marginal, template) in rows {
        let configured = match config.aggregation {
            Aggregation::MaxVote => majority,
            Aggregation::Marginal => marginal,
        };
        sum_majority += majority;
        sum_marginal += marginal;
        let entry = by_template.entry(template).or_insert((0, 0.0));
        entry.0 += 1;
        entry.1 += configured;
        traces.push(trace);
    }
    let per_template = by_template
        .into_iter()
        .map(|(name, (count, sum))| {
            (
                name,
                TemplateStat {
                    n: count,
                    mean_vqa: sum / count as f64,
                },
            )
        })
        .collect();
    let (mean_vqa_majority, mean_vqa_marginal) =
        (sum_majority / n as f64, sum_marginal / n as f64);
    let mean_vqa = match config.aggregation {
        Aggregation::MaxVote => mean_vqa_majority,
        Aggregation::Marginal => mean_vqa_marginal,
    };
    Ok(EvalOutcome {
        report: EvalReport {
            fingerprint: fingerprint.to_string(),
            n_questions: n,
            aggregation: config.aggregation,
            mean_vqa,
            mean_vqa_majority,
            mean_vqa_marginal,
            per_template,
            seed,
        },
        traces,
    })
}

// ==================== grade-quality curve ====================

/// One whole-scene caption draw, as the diagnostics use it.
fn full_scene_caption(
    params: &CaptionerParams,
    scene: &Scene,
    top_k: usize,
    temperature: f64,
    seed: u64,
) -> Result<CaptionSample> {
    let cells: BTreeSet<usize> = scene.occupied_cells().into_iter().collect();
    let decode = DecodeConfig {
        mode: DecodeMode::TopK { k: top_k },
        temperature,
        max_len: params.dims.max_len,
        seed,
    };
    params.sample(scene, &cells, &decode)
}

/// Answer quality bucketed by the grade the predictor emitted for the
/// same caption. With a reliable grader the bucket means grow with the
/// grade; corruption flattens or scrambles them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradeBucket {
    pub level: usize,
    pub letter: char,
    pub count: usize,
    /// Mean consensus score of the bucket; absent when no caption
    /// received this grade.
    pub mean_vqa: Option<f64>,
}

/// Bucket single-caption answer scores by emitted grade over a labeled
/// split. Each pair contributes one whole-scene caption.
#[allow(clippy::too_many_arguments)]
pub fn reliability_curve(
    params: &CaptionerParams,
    split: &DatasetSplit,
    kb: &KnowledgeBase,
    vocab: &Vocabulary,
    predictor_config: &PredictorConfig,
    levels: &LevelScheme,
    top_k: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<GradeBucket>> {
    if split.pairs.is_empty() {
        return Err(Error::data("grade-quality curve needs a non-empty labeled split"));
    }
    let predictor = Predictor::new(kb, vocab);
    let rows: Vec<(usize, f64)> = split
        .pairs
        .par_iter()
        .enumerate()
        .map(|(i, pair)| {
            let key = labeled(pair)?;
            let sample =
                full_scene_caption(params, &pair.scene, top_k, temperature, derive_idx(seed, i as u64))?;
            let grading = predictor.grade(&pair.question, &sample.tokens, levels, predictor_config)?;
            let verdict =
                predictor.predict(&pair.scene, &pair.question, &sample.tokens, predictor_config)?;
            Ok((grading.emitted_level, vqa_score(&verdict.answer, key)))
        })
        .collect::<Result<_>>()?;

    let mut counts = vec![0usize; levels.len()];
    let mut sums = vec![0.0; levels.len()];
    for (level, score) in rows {
        counts[level] += 1;
        sums[level] += score;
    }
    Ok((0..levels.len())
        .map(|level| GradeBucket {
            level,
            letter: level_letter(level),
            count: counts[level],
            mean_vqa: (counts[level] > 0).then(|| sums[level] / counts[level] as f64),
        })
        .collect())
}

pub fn grade_curve_csv(buckets: &[GradeBucket]) -> String {
    let mut out = String::from("level,letter,count,mean_vqa\n");
    for b in buckets {
        let mean = b.mean_vqa.map(|m| m.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", b.level, b.letter, b.count, mean));
    }
    out
}

// ==================== confidence diagnostics ====================

/// Rank correlation between the predictor's uncertainty about its own
/// answer and that answer's consensus score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NllCorrelation {
    pub spearman_rho: f64,
    pub n: usize,
    /// True when either variable was constant over the split, which
    /// leaves the correlation undefined; the rho is reported as 0.
    pub degenerate: bool,
}

/// Spearman rank correlation with tie-averaged ranks. Fewer than ten
/// paired observations is an error; a constant input yields (0, true).
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<(f64, bool)> {
    if xs.len() != ys.len() {
        return Err(Error::stats(format!(
            "paired observations have mismatched lengths {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 10 {
        return Err(Error::stats(format!(
            "rank correlation needs at least 10 paired observations, got {}",
            xs.len()
        )));
    }
    if xs.iter().chain(ys.iter()).any(|v| !v.is_finite()) {
        return Err(Error::stats("rank correlation input contains a non-finite value"));
    }
    let rx = tie_averaged_ranks(xs);
    let ry = tie_averaged_ranks(ys);
    let n = xs.len() as f64;
    let mean_x = rx.iter().sum::<f64>() / n;
    let mean_y = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    for i in 0..xs.len() {
        let dx = rx[i] - mean_x;
        let dy = ry[i] - mean_y;
        cov += dx * dy;
        var_x += dx * dx;
        var_y += dy * dy;
    }
    if var_x == 0.0 || var_y == 0.0 {
        return Ok((0.0, true));
    }
    Ok((cov / (var_x * var_y).sqrt(), false))
}

/// 1-based ranks; runs of equal values share their average rank.
fn tie_averaged_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap().then(a.cmp(&b)));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let shared = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[order[k]] = shared;
        }
        i = j + 1;
    }
    ranks
}

/// Correlate single-caption answer NLL with the answer's consensus score
/// over a labeled split. A well-calibrated predictor is less confident
/// exactly when its answer is worse, so the correlation is negative.
#[allow(clippy::too_many_arguments)]
pub fn nll_vqa_correlation(
    params: &CaptionerParams,
    split: &DatasetSplit,
    kb: &KnowledgeBase,
    vocab: &Vocabulary,
    predictor_config: &PredictorConfig,
    top_k: usize,
    temperature: f64,
    seed: u64,
) -> Result<NllCorrelation> {
    let predictor = Predictor::new(kb, vocab);
    let rows: Vec<(f64, f64)> = split
        .pairs
        .par_iter()
        .enumerate()
        .map(|(i, pair)| {
            let key = labeled(pair)?;
            let sample =
                full_scene_caption(params, &pair.scene, top_k, temperature, derive_idx(seed, i as u64))?;
            let probs =
                predictor.answer_probs(&pair.scene, &pair.question, &sample.tokens, predictor_config)?;
            let answer_id = argmax(&probs);
            let nll = predictor.nll(&probs, answer_id, predictor_config)?;
            Ok((nll, vqa_score(&kb.answer_vocabulary()[answer_id], key)))
        })
        .collect::<Result<_>>()?;
    let (xs, ys): (Vec<f64>, Vec<f64>) = rows.into_iter().unzip();
    let (spearman_rho, degenerate) = spearman(&xs, &ys)?;
    Ok(NllCorrelation {
        spearman_rho,
        n: xs.len(),
        degenerate,
    })
}

// ==================== sweep plumbing ====================

/// One replicate of a sweep: the dataset, model init and knowledge built
/// from a rerooted copy of the base config.
struct Replicate {
    config: RunConfig,
    fingerprint: String,
    train_split: DatasetSplit,
    eval_split: DatasetSplit,
    kb: KnowledgeBase,
    vocab: Vocabulary,
    params0: CaptionerParams,
}

fn replicate(base: &RunConfig, seed: u64) -> Result<Replicate> {
    let config = base.replicate(seed);
    let fingerprint = config.fingerprint()?;
    let (train_split, eval_split) = generate_dataset(&config.world, config.world_seed())?;
    let kb = KnowledgeBase::new(&config.world);
    let vocab = Vocabulary::standard(&config.world);
    let params0 = CaptionerParams::for_world(&vocab, &config.captioner, config.captioner_seed())?;
    Ok(Replicate {
        config,
        fingerprint,
        train_split,
        eval_split,
        kb,
        vocab,
        params0,
    })
}

fn eval_mean(rep: &Replicate, params: &CaptionerParams, inference: &InferenceConfig) -> Result<f64> {
    let outcome = evaluate(
        params,
        &rep.eval_split,
        &rep.kb,
        &rep.vocab,
        inference,
        &rep.config.predictor,
        &rep.fingerprint,
        rep.config.eval_seed(),
    )?;
    Ok(outcome.report.mean_vqa)
}

// ==================== objective grid ====================

/// Training objective of one grid row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// The untrained caption model.
    CaptionOnly,
    /// Selection plus fine-tuning only, given the full epoch budget.
    Adaptation,
    /// Pure reinforcement on graded prompt rewards.
    RlPrompt,
    /// Pure reinforcement on answer-confidence rewards.
    RlConfidence,
    /// The full pipeline: fine-tune, then reinforce jointly with the
    /// retained set as the anchor term.
    AdaptationRlJoint,
}

impl Objective {
    pub const ALL: [Objective; 5] = [
        Objective::CaptionOnly,
        Objective::Adaptation,
        Objective::RlPrompt,
        Objective::RlConfidence,
        Objective::AdaptationRlJoint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Objective::CaptionOnly => "caption_only",
            Objective::Adaptation => "adaptation",
            Objective::RlPrompt => "rl_prompt",
            Objective::RlConfidence => "rl_confidence",
            Objective::AdaptationRlJoint => "adaptation_rl_joint",
        }
    }

    /// Whether retraining under a different grading reliability can move
    /// this row. Selection always grades at full reliability and
    /// confidence rewards never consult the grader, so only
    /// prompt-rewarded training reacts to the knob.
    fn reliability_sensitive(self, train: &TrainConfig) -> bool {
        match self {
            Objective::RlPrompt => true,
            Objective::AdaptationRlJoint => {
                train.reward_kind == RewardKind::Prompt && train.alpha > 0.0
            }
            _ => false,
        }
    }
}

/// Train one objective variant from the replicate's initial parameters.
fn train_objective(rep: &Replicate, objective: Objective, reliability: f64) -> Result<CaptionerParams> {
    let config = &rep.config;
    let levels = config.levels()?;
    let reward_pcfg = PredictorConfig {
        reliability,
        ..config.predictor.clone()
    };
    // Selection always grades at full reliability so every variant starts
    // from the same retained set.
    let select_pcfg = PredictorConfig {
        reliability: 1.0,
        ..config.predictor.clone()
    };

    match objective {
        Objective::CaptionOnly => Ok(rep.params0.clone()),
        Objective::Adaptation => {
            // Budget parity with the trained rows: fine-tune for at least
            // the reinforcement epoch count.
            let acfg = AdaptationConfig {
                epochs: config.adaptation.epochs.max(config.train.epochs),
                ..config.adaptation.clone()
            };
            let set = build_adaptation_set(
                &rep.params0,
                &rep.train_split,
                &rep.kb,
                &rep.vocab,
                &acfg,
                &select_pcfg,
                &levels,
                config.adaptation_seed(),
            )?;
            Ok(fine_tune(&rep.params0, &rep.train_split, &set, &acfg, config.adaptation_seed())?.params)
        }
        Objective::RlPrompt | Objective::RlConfidence => {
            let tcfg = TrainConfig {
                alpha: 1.0,
                reward_kind: if objective == Objective::RlPrompt {
                    RewardKind::Prompt
                } else {
                    RewardKind::Confidence
                },
                ..config.train.clone()
            };
            let history = train(
                &rep.params0,
                &rep.train_split,
                &[],
                &rep.kb,
                &rep.vocab,
                &tcfg,
                &reward_pcfg,
                &levels,
                config.train_seed(),
            )?;
            Ok(history.best_params().clone())
        }
        Objective::AdaptationRlJoint => {
            let set = build_adaptation_set(
                &rep.params0,
                &rep.train_split,
                &rep.kb,
                &rep.vocab,
                &config.adaptation,
                &select_pcfg,
                &levels,
                config.adaptation_seed(),
            )?;
            let tuned = fine_tune(
                &rep.params0,
                &rep.train_split,
                &set,
                &config.adaptation,
                config.adaptation_seed(),
            )?;
            let history = train(
                &tuned.params,
                &rep.train_split,
                &set,
                &rep.kb,
                &rep.vocab,
                &config.train,
                &reward_pcfg,
                &levels,
                config.train_seed(),
            )?;
            Ok(history.best_params().clone())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveCell {
    pub objective: Objective,
    pub reliability: f64,
    /// Mean over the sweep seeds of the eval-split consensus score.
    pub mean_vqa: f64,
    pub n_seeds: usize,
}

/// The objective-by-reliability grid. Every cell retrains from scratch
/// under its own grading reliability and shares the seed list, the
/// datasets and the initial parameters with the rest of its column.
pub fn ablate_objectives(base: &RunConfig) -> Result<Vec<ObjectiveCell>> {
    base.validate()?;
    let seeds = &base.eval.seeds;
    let reliabilities = &base.eval.reliability_levels;
    let mut sums = vec![vec![0.0; reliabilities.len()]; Objective::ALL.len()];
    for &seed in seeds {
        let rep = replicate(base, seed)?;
        for (oi, &objective) in Objective::ALL.iter().enumerate() {
            if objective.reliability_sensitive(&rep.config.train) {
                for (ri, &reliability) in reliabilities.iter().enumerate() {
                    let params = train_objective(&rep, objective, reliability)?;
                    sums[oi][ri] += eval_mean(&rep, &params, &rep.config.inference)?;
                }
            } else {
                // One training serves the whole row; the knob cannot
                // reach this objective.
                let params = train_objective(&rep, objective, 1.0)?;
                let mean = eval_mean(&rep, &params, &rep.config.inference)?;
                for cell in sums[oi].iter_mut() {
                    *cell += mean;
                }
            }
        }
    }
    let mut cells = Vec::with_capacity(Objective::ALL.len() * reliabilities.len());
    for (oi, &objective) in Objective::ALL.iter().enumerate() {
        for (ri, &reliability) in reliabilities.iter().enumerate() {
            cells.push(ObjectiveCell {
                objective,
                reliability,
                mean_vqa: sums[oi][ri] / seeds.len() as f64,
                n_seeds: seeds.len(),
            });
        }
    }
    Ok(cells)
}

pub fn objective_grid_csv(cells: &[ObjectiveCell]) -> String {
    let mut out = String::from("objective,reliability,mean_vqa,n_seeds\n");
    for c in cells {
        out.push_str(&format!(
            "{},{},{},{}\n",
            c.objective.name(),
            c.reliability,
            c.mean_vqa,
            c.n_seeds
        ));
    }
    out
}

// ==================== grading-scheme sweep ====================

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelsCell {
    pub n_levels: usize,
    /// The scheme's grading label, e.g. "A: 0%; B: 100%".
    pub label: String,
    pub mean_vqa: f64,
    pub n_seeds: usize,
}

/// Retrain with prompt rewards under each grading-scheme size and score
/// the result. The four-level row follows the exact default reward path.
pub fn ablate_levels(base: &RunConfig) -> Result<Vec<LevelsCell>> {
    base.validate()?;
    let seeds = &base.eval.seeds;
    let mut cells: Vec<LevelsCell> = base
        .eval
        .level_variants
        .iter()
        .map(|&n| {
            Ok(LevelsCell {
                n_levels: n,
                label: LevelScheme::with_levels(n)?.label(),
                mean_vqa: 0.0,
                n_seeds: seeds.len(),
            })
        })
        .collect::<Result<_>>()?;
    for &seed in seeds {
        let rep = replicate(base, seed)?;
        for cell in &mut cells {
            let levels = LevelScheme::with_levels(cell.n_levels)?;
            let tcfg = TrainConfig {
                alpha: 1.0,
                reward_kind: RewardKind::Prompt,
                ..rep.config.train.clone()
            };
            let history = train(
                &rep.params0,
                &rep.train_split,
                &[],
                &rep.kb,
                &rep.vocab,
                &tcfg,
                &rep.config.predictor,
                &levels,
                rep.config.train_seed(),
            )?;
            cell.mean_vqa += eval_mean(&rep, history.best_params(), &rep.config.inference)?;
        }
    }
    for cell in &mut cells {
        cell.mean_vqa /= seeds.len() as f64;
    }
    Ok(cells)
}

pub fn levels_csv(cells: &[LevelsCell]) -> String {
    let mut out = String::from("n_levels,label,mean_vqa,n_seeds\n");
    for c in cells {
        out.push_str(&format!(
            "{},\"{}\",{},{}\n",
            c.n_levels, c.label, c.mean_vqa, c.n_seeds
        ));
    }
    out
}

// ==================== caption-count sweep ====================

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionCountCell {
    pub m_captions: usize,
    pub mean_vqa: f64,
    pub n_seeds: usize,
}

/// Train the full pipeline once per seed, then score it with each
/// caption count. More diverse captions give the aggregation more
/// evidence, so the curve should rise with the count.
pub fn ablate_caption_count(base: &RunConfig) -> Result<Vec<CaptionCountCell>> {
    base.validate()?;
    let seeds = &base.eval.seeds;
    let mut cells: Vec<CaptionCountCell> = base
        .eval
        .caption_counts
        .iter()
        .map(|&m| CaptionCountCell {
            m_captions: m,
            mean_vqa: 0.0,
            n_seeds: seeds.len(),
        })
        .collect();
    for &seed in seeds {
        let rep = replicate(base, seed)?;
        let params = train_objective(
            &rep,
            Objective::AdaptationRlJoint,
            rep.config.predictor.reliability,
        )?;
        for cell in &mut cells {
            let inference = InferenceConfig {
                m_captions: cell.m_captions,
                ..rep.config.inference.clone()
            };
            cell.mean_vqa += eval_mean(&rep, &params, &inference)?;
        }
    }
    for cell in &mut cells {
        cell.mean_vqa /= seeds.len() as f64;
    }
    Ok(cells)
}

pub fn caption_count_csv(cells: &[CaptionCountCell]) -> String {
    let mut out = String::from("m_captions,mean_vqa,n_seeds\n");
    for c in cells {
        out.push_str(&format!("{},{},{}\n", c.m_captions, c.mean_vqa, c.n_seeds));
    }
    out
}
