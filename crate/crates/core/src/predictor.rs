//! The frozen, simulated answer-prediction model.
//!
//! It plays two instruction-following roles against a caption, both
//! driven by how many of the question's required evidence tokens the
//! caption actually carries:
//!
//! * **Grading**: map coverage to one of a small number of relevance
//!   levels. A reliability knob corrupts the emitted level: with
//!   probability `reliability` the true level is returned, otherwise one
//!   of the other levels is drawn uniformly. Corruption is deterministic
//!   per (seed, question, caption).
//! * **Answering**: produce a full distribution over the closed answer
//!   vocabulary, mixing the gold answer (weighted by raw coverage), a
//!   knowledge-driven prior answer, and a uniform floor.
//!
//! Prompts are rendered from a fixed registry purely for logging and
//! audit; every template maps to the same structured behavior.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::captioner::Vocabulary;
use crate::error::{Error, Result};
use crate::seed::{derive, derive_idx2, hash_tokens};
use crate::world::{oracle_answer, KnowledgeBase, Question, Scene};

// ==================== prompt registry ====================

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Grading,
    Answer,
}

/// One prompt template; `[QUESTION]` and `[CAPTION]` are the fill slots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: u32,
    pub name: String,
    pub kind: PromptKind,
    pub text: String,
}

/// The fixed registry. Template 0 is the grading instruction; 1 through 5
/// are answer instructions of varying verbosity. The simulated model
/// treats every answer template identically; the registry exists so runs
/// log the exact prompts a text-interface model would have seen.
pub fn prompt_templates() -> Vec<PromptTemplate> {
    let t = |id: u32, name: &str, kind: PromptKind, text: &str| PromptTemplate {
        id,
        name: name.to_string(),
        kind,
        text: text.to_string(),
    };
    vec![
        t(
            0,
            "grading",
            PromptKind::Grading,
            "Question: [QUESTION] Caption: [CAPTION]\n To what degree does the caption relate to the question:\n A: 0%\n B: 25%\n C: 50%\n D:75%",
        ),
        t(
            1,
            "answer_polite",
            PromptKind::Answer,
            "Please answer the following question.\n[CAPTION]. [QUESTION]",
        ),
        t(
            2,
            "answer_one_word",
            PromptKind::Answer,
            "Answer the following question in one word. Q: [CAPTION]. [QUESTION]",
        ),
        t(
            3,
            "answer_inline",
            PromptKind::Answer,
            "Please answer the following question. [CAPTION]. [QUESTION]",
        ),
        t(
            4,
            "answer_bare",
            PromptKind::Answer,
            "[CAPTION]. [QUESTION]",
        ),
        t(
            5,
            "answer_stepwise",
            PromptKind::Answer,
            "[CAPTION]. [QUESTION] Let's think step by step.",
        ),
    ]
}

pub fn render_prompt(template_id: u32, question_text: &str, caption_text: &str) -> Result<String> {
    let templates = prompt_templates();
    let template = templates
        .iter()
        .find(|t| t.id == template_id)
        .ok_or_else(|| Error::config(format!("unknown prompt template id {template_id}")))?;
    Ok(template
        .text
        .replace("[QUESTION]", question_text)
        .replace("[CAPTION]", caption_text))
}

// ==================== relevance levels ====================

/// An ascending set of relevance level values; the reward for a level is
/// its value. Supported sizes are two through five levels. The four-level
/// scheme is the default used throughout training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelScheme {
    pub values: Vec<f64>,
}

impl LevelScheme {
    pub fn with_levels(n: usize) -> Result<Self> {
        let values: Vec<f64> = match n {
            2 => vec![0.0, 1.0],
            3 => vec![0.0, 0.5, 1.0],
            4 => vec![0.0, 0.25, 0.5, 0.75],
            5 => vec![0.0, 0.25, 0.5, 0.75, 1.0],
            _ => {
                return Err(Error::config(format!(
                    "level schemes support 2 through 5 levels, not {n}"
                )))
            }
        };
        Ok(LevelScheme { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Human-readable summary, e.g. "A: 0%; B: 25%; C: 50%; D: 75%".
    pub fn label(&self) -> String {
        self.values
            .iter()
            .enumerate()
            .map(|(i, v)| format!("{}: {:.0}%", level_letter(i), v * 100.0))
            .collect::<Vec<_>>()
            .join("; ")
    }
}

impl Default for LevelScheme {
    fn default() -> Self {
        LevelScheme::with_levels(4).expect("four levels are supported")
    }
}

pub fn level_letter(level: usize) -> char {
    (b'A' + level as u8) as char
}

/// Integer-exact coverage-to-level map: zero matches is the bottom level,
/// and the rest follows ceil(matched * (levels - 1) / evidence).
pub fn coverage_level(matched: usize, evidence: usize, n_levels: usize) -> Result<usize> {
    if evidence == 0 {
        return Err(Error::domain("question has an empty evidence set"));
    }
    if matched > evidence {
        return Err(Error::domain(format!(
            "matched {matched} exceeds evidence size {evidence}"
        )));
    }
    if n_levels < 2 {
        return Err(Error::config("grading needs at least two levels"));
    }
    Ok((matched * (n_levels - 1)).div_ceil(evidence))
}

/// Count how many required evidence tokens appear among the caption's
/// surface words.
pub fn coverage_counts(
    vocab: &Vocabulary,
    caption_tokens: &[u32],
    question: &Question,
) -> Result<(usize, usize)> {
    let words = vocab.decode(caption_tokens)?;
    let matched = question
        .required_evidence
        .iter()
        .filter(|ev| words.iter().any(|w| w == *ev))
        .count();
    Ok((matched, question.required_evidence.len()))
}

// ==================== configuration ====================

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorConfig {
    /// Probability the emitted grade equals the true coverage grade.
    pub reliability: f64,
    /// Mixture weight of the knowledge-driven prior answer.
    pub language_prior_strength: f64,
    /// Softmax-style temperature applied to the answer distribution.
    pub temperature: f64,
    /// Which answer prompt template to render into traces (1 through 5;
    /// grading always renders template 0).
    pub prompt_template_id: u32,
    /// Upper bound for negative log-likelihood diagnostics.
    pub nll_cap: f64,
    pub seed: u64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            reliability: 1.0,
            language_prior_strength: 0.1,
            temperature: 1.0,
            prompt_template_id: 1,
            nll_cap: 50.0,
            seed: 0,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.reliability) {
            return Err(Error::config("reliability must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.language_prior_strength) {
            return Err(Error::config("language_prior_strength must lie in [0, 1]"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config("temperature must be positive"));
        }
        if !(self.nll_cap > 0.0) {
            return Err(Error::config("nll_cap must be positive"));
        }
        let is_answer = prompt_templates()
            .iter()
            .any(|t| t.id == self.prompt_template_id && t.kind == PromptKind::Answer);
        if !is_answer {
            return Err(Error::config(format!(
                "prompt_template_id {} must name an answer template",
                self.prompt_template_id
            )));
        }
        Ok(())
    }
}

// ==================== outputs ====================

/// Result of grading one caption against one question.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grading {
    pub matched: usize,
    pub evidence: usize,
    /// Level the coverage rule assigns.
    pub true_level: usize,
    /// Level actually emitted after reliability corruption.
    pub emitted_level: usize,
    /// The emitted level's value under the scheme in use.
    pub reward: f64,
}

impl Grading {
    pub fn emitted_letter(&self) -> char {
        level_letter(self.emitted_level)
    }
}

/// The predictor's chosen answer with its probability.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub answer_id: usize,
    pub answer: String,
    pub confidence: f64,
}

// ==================== the predictor ====================

/// Frozen question-answering model simulated from world knowledge. All
/// methods are deterministic in their inputs plus the config seed.
pub struct Predictor<'a> {
    kb: &'a KnowledgeBase,
    vocab: &'a Vocabulary,
}

impl<'a> Predictor<'a> {
    pub fn new(kb: &'a KnowledgeBase, vocab: &'a Vocabulary) -> Self {
        Predictor { kb, vocab }
    }

    /// Grade a caption's relevance to a question under a level scheme.
    /// The corruption draw is keyed by (seed, question id, caption), so
    /// regrading the same triple always emits the same level.
    pub fn grade(
        &self,
        question: &Question,
        caption_tokens: &[u32],
        levels: &LevelScheme,
        config: &PredictorConfig,
    ) -> Result<Grading> {
        config.validate()?;
        let (matched, evidence) = coverage_counts(self.vocab, caption_tokens, question)?;
        let true_level = coverage_level(matched, evidence, levels.len())?;
        let emitted_level = if config.reliability >= 1.0 {
            true_level
        } else {
            let stream = derive(config.seed, "grading");
            let mut rng = ChaCha8Rng::seed_from_u64(derive_idx2(
                stream,
                question.id,
                hash_tokens(caption_tokens),
            ));
            if rng.random::<f64>() < config.reliability {
                true_level
            } else {
                // Uniform over the other levels.
                let mut pick = rng.random_range(0..levels.len() - 1);
                if pick >= true_level {
                    pick += 1;
                }
                pick
            }
        };
        Ok(Grading {
            matched,
            evidence,
            true_level,
            emitted_level,
            reward: levels.values[emitted_level],
        })
    }

    /// Full distribution over the answer vocabulary for a question given
    /// a caption: gold answer weighted by raw evidence coverage, the
    /// prior answer for the target's category, and a uniform floor, then
    /// tempered.
    pub fn answer_probs(
        &self,
        scene: &Scene,
        question: &Question,
        caption_tokens: &[u32],
        config: &PredictorConfig,
    ) -> Result<Vec<f64>> {
        config.validate()?;
        let (matched, evidence) = coverage_counts(self.vocab, caption_tokens, question)?;
        if evidence == 0 {
            return Err(Error::domain("question has an empty evidence set"));
        }
        let coverage = matched as f64 / evidence as f64;
        let gold = oracle_answer(scene, self.kb, question)?;
        let gold_id = self
            .kb
            .answer_id(&gold)
            .ok_or_else(|| Error::domain(format!("gold answer '{gold}' not in answer vocabulary")))?;
        let target = scene
            .object_at(question.target_cell)
            .ok_or_else(|| Error::domain("question targets an empty cell"))?;
        let prior = self.kb.prior_answer(target.category);
        let prior_id = self
            .kb
            .answer_id(prior)
            .expect("prior answers are always in the vocabulary");

        let n = self.kb.answer_vocabulary().len() as f64;
        let lambda = config.language_prior_strength;
        let gold_mass = (1.0 - lambda) * coverage;
        // Clamp: with full coverage the exact residual can round to a
        // tiny negative, which temperature's powf would turn into NaN.
        let floor = ((1.0 - gold_mass - lambda) / n).max(0.0);
        let mut probs = vec![floor; self.kb.answer_vocabulary().len()];
        probs[gold_id] += gold_mass;
        probs[prior_id] += lambda;

        if (config.temperature - 1.0).abs() > 1e-12 {
            let inv = 1.0 / config.temperature;
            for p in &mut probs {
                *p = p.powf(inv);
            }
            let z: f64 = probs.iter().sum();
            for p in &mut probs {
                *p /= z;
            }
        }
        Ok(probs)
    }

    /// Argmax answer (ties break toward the lowest answer id) with its
    /// probability as the confidence.
    pub fn predict(
        &self,
        scene: &Scene,
        question: &Question,
        caption_tokens: &[u32],
        config: &PredictorConfig,
    ) -> Result<Verdict> {
        let probs = self.answer_probs(scene, question, caption_tokens, config)?;
        let answer_id = argmax(&probs);
        Ok(Verdict {
            answer_id,
            answer: self.kb.answer_vocabulary()[answer_id].clone(),
            confidence: probs[answer_id],
        })
    }

    /// Capped negative log-likelihood of one answer id under a
    /// distribution from [`Predictor::answer_probs`].
    pub fn nll(&self, probs: &[f64], answer_id: usize, config: &PredictorConfig) -> Result<f64> {
        let p = *probs
            .get(answer_id)
            .ok_or_else(|| Error::domain(format!("answer id {answer_id} out of range")))?;
        if p <= 0.0 {
            return Ok(config.nll_cap);
        }
        Ok((-p.ln()).min(config.nll_cap))
    }

    /// Diagnostic: capped NLL the predictor assigns to the gold answer.
    pub fn nll_gold(
        &self,
        scene: &Scene,
        question: &Question,
        caption_tokens: &[u32],
        config: &PredictorConfig,
    ) -> Result<f64> {
        let probs = self.answer_probs(scene, question, caption_tokens, config)?;
        let gold = oracle_answer(scene, self.kb, question)?;
        let gold_id = self
            .kb
            .answer_id(&gold)
            .ok_or_else(|| Error::domain(format!("gold answer '{gold}' not in answer vocabulary")))?;
        self.nll(&probs, gold_id, config)
    }

    /// Render the grading prompt for a (question, caption) pair.
    pub fn grading_prompt(&self, question: &Question, caption_tokens: &[u32]) -> Result<String> {
        render_prompt(0, &question.text_string(), &self.vocab.text(caption_tokens)?)
    }

    /// Render the configured answer prompt for a (question, caption) pair.
    pub fn answer_prompt(
        &self,
        question: &Question,
        caption_tokens: &[u32],
        config: &PredictorConfig,
    ) -> Result<String> {
        render_prompt(
            config.prompt_template_id,
            &question.text_string(),
            &self.vocab.text(caption_tokens)?,
        )
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::captioner::EOS;
    use crate::seed::derive_idx;
    use crate::world::{generate_dataset, generate_scene, QuestionTemplate, WorldConfig};
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    struct Fixture {
        kb: KnowledgeBase,
        vocab: Vocabulary,
        scene: Scene,
        question: Question,
    }

    /// A deterministic fixture with one known question.
    fn fixture() -> Fixture {
        let cfg = WorldConfig::default();
        let kb = KnowledgeBase::new(&cfg);
        let vocab = Vocabulary::standard(&cfg);
        let scene = generate_scene(&cfg, 0, 42).unwrap();
        for seed in 0.. {
            let (question, _) = crate::world::generate_question(&scene, &kb, seed).unwrap();
            if question.template().unwrap() == QuestionTemplate::Color {
                return Fixture {
                    kb,
                    vocab,
                    scene,
                    question,
                };
            }
        }
        unreachable!()
    }

    fn encode(vocab: &Vocabulary, words: &[&str]) -> Vec<u32> {
        let owned: Vec<String> = words.iter().map(|s| s.to_string()).collect();
        vocab.encode(&owned).unwrap()
    }

    /// Caption token ids that cover exactly `m` of the question's
    /// evidence tokens, padded with neutral function words.
    fn caption_covering(fx: &Fixture, m: usize) -> Vec<u32> {
        let ev: Vec<&String> = fx.question.required_evidence.iter().collect();
        assert!(m <= ev.len());
        let mut words: Vec<String> = ev[..m].iter().map(|s| s.to_string()).collect();
        words.push("the".to_string());
        words.push("scene".to_string());
        fx.vocab.encode(&words).unwrap()
    }

    #[test]
    fn prompt_templates_render_exactly() {
        let q = "what color is the cake at cell 7 ?";
        let c = "a red wood cake ;";
        let expect = [
            (0, format!("Question: {q} Caption: {c}\n To what degree does the caption relate to the question:\n A: 0%\n B: 25%\n C: 50%\n D:75%")),
            (1, format!("Please answer the following question.\n{c}. {q}")),
            (2, format!("Answer the following question in one word. Q: {c}. {q}")),
            (3, format!("Please answer the following question. {c}. {q}")),
            (4, format!("{c}. {q}")),
            (5, format!("{c}. {q} Let's think step by step.")),
        ];
        for (id, want) in expect {
            assert_eq!(render_prompt(id, q, c).unwrap(), want, "template {id}");
        }
        assert!(matches!(render_prompt(6, q, c), Err(Error::Config(_))));
    }

    #[test]
    fn prompt_registry_roundtrips_and_has_unique_ids() {
        let templates = prompt_templates();
        assert_eq!(templates.len(), 6);
        let ids: std::collections::BTreeSet<u32> = templates.iter().map(|t| t.id).collect();
        assert_eq!(ids.len(), 6);
        assert_eq!(templates[0].kind, PromptKind::Grading);
        let json = serde_json::to_string(&templates).unwrap();
        let back: Vec<PromptTemplate> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, templates);
    }

    #[test]
    fn coverage_levels_are_integer_exact() {
        // (matched, evidence, expected level) under four levels.
        let table = [
            (0, 2, 0),
            (0, 3, 0),
            (1, 3, 1),
            (2, 6, 1),
            (1, 2, 2),
            (2, 3, 2),
            (2, 2, 3),
            (3, 3, 3),
            (1, 1, 3),
        ];
        for (m, e, want) in table {
            assert_eq!(
                coverage_level(m, e, 4).unwrap(),
                want,
                "coverage {m}/{e} should be level {want}"
            );
        }
        assert!(matches!(coverage_level(1, 0, 4), Err(Error::Domain(_))));
        assert!(matches!(coverage_level(3, 2, 4), Err(Error::Domain(_))));
        assert!(matches!(coverage_level(1, 2, 1), Err(Error::Config(_))));
    }

    #[test]
    fn level_schemes_pin_values_and_labels() {
        let expect: [(usize, &[f64], &str); 4] = [
            (2, &[0.0, 1.0], "A: 0%; B: 100%"),
            (3, &[0.0, 0.5, 1.0], "A: 0%; B: 50%; C: 100%"),
            (4, &[0.0, 0.25, 0.5, 0.75], "A: 0%; B: 25%; C: 50%; D: 75%"),
            (5, &[0.0, 0.25, 0.5, 0.75, 1.0], "A: 0%; B: 25%; C: 50%; D: 75%; E: 100%"),
        ];
        for (n, values, label) in expect {
            let scheme = LevelScheme::with_levels(n).unwrap();
            assert_eq!(scheme.values, values);
            assert_eq!(scheme.label(), label);
        }
        assert_eq!(LevelScheme::default().values, vec![0.0, 0.25, 0.5, 0.75]);
        assert!(LevelScheme::with_levels(1).is_err());
        assert!(LevelScheme::with_levels(6).is_err());
    }

    #[test]
    fn coverage_counts_match_evidence_words() {
        let fx = fixture();
        let pred = Predictor::new(&fx.kb, &fx.vocab);
        let levels = LevelScheme::default();
        let config = PredictorConfig::default();
        let e = fx.question.required_evidence.len();
        for m in 0..=e {
            let caption = caption_covering(&fx, m);
            let grading = pred.grade(&fx.question, &caption, &levels, &config).unwrap();
            assert_eq!(grading.matched, m);
            assert_eq!(grading.evidence, e);
            assert_eq!(grading.emitted_level, grading.true_level);
            assert_eq!(grading.reward, levels.values[grading.true_level]);
        }
        // Duplicated evidence words still count once each.
        let ev: Vec<String> = fx.question.required_evidence.iter().cloned().collect();
        let doubled: Vec<String> = ev.iter().chain(ev.iter()).cloned().collect();
        let tokens = fx.vocab.encode(&doubled).unwrap();
        let grading = pred.grade(&fx.question, &tokens, &levels, &config).unwrap();
        assert_eq!(grading.matched, e);
    }

    #[test]
    fn perfect_reliability_never_corrupts() {
        let fx = fixture();
        let pred = Predictor::new(&fx.kb, &fx.vocab);
        let levels = LevelScheme::default();
        let config = PredictorConfig::default();
        let caption = caption_covering(&fx, 1);
        for i in 0..500u64 {
            let mut q = fx.question.clone();
            q.id = i;
            let g = pred.grade(&q, &caption, &levels, &config).unwrap();
            assert_eq!(g.emitted_level, g.true_level);
        }
    }

    /// At reliability r the true level must be emitted with frequency
    /// close to r and every other level close to (1-r)/(L-1).
    #[test]
    fn corruption_frequencies_track_reliability()
    {
        let fx = fixture();
        let pred = Predictor::new(&fx.kb, &fx.vocab);
        let levels = LevelScheme::default();
        let config = PredictorConfig {
            reliability: 0.2,
            ..PredictorConfig::default()
        };
        let caption = caption_covering(&fx, fx.question.required_evidence.len());
        let n = 20_000u64;
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for i in 0..n {
            let mut q = fx.question.clone();
            q.id = i;
            let g = pred.grade(&q, &caption, &levels, &config).unwrap();
            assert_eq!(g.true_level, 3);
            *counts.entry(g.emitted_level).or_default() += 1;
        }
        let freq = |l: usize| counts.get(&l).copied().unwrap_or(0) as f64 / n as f64;
        assert!(
            (freq(3) - 0.2).abs() < 0.03,
            "true level frequency {} far from reliability 0.2",
            freq(3)
        );
        for l in 0..3 {
            let want = 0.8 / 3.0;
            assert!(
                (freq(l) - want).abs() < 0.03,
                "level {l} frequency {} far from {want}",
                freq(l)
            );
        }
    }

    #[test]
    fn corruption_is_deterministic_per_question_and_caption() {
        let fx = fixture();
        let pred = Predictor::new(&fx.kb, &fx.vocab);
        let levels = LevelScheme::default();
        let config = PredictorConfig {
            reliability: 0.3,
            ..PredictorConfig::default()
        };
        let caption = caption_covering(&fx, 1);
        let a = pred.grade(&fx.question, &caption, &levels, &config).unwrap();
        let b = pred.grade(&fx.question, &caption, &levels, &config).unwrap();
        assert_eq!(a, b, "grading the same triple twice must agree");

        // Different captions decouple the corruption draws: over many
        // questions the emitted levels must not be identical streams.
        let other = caption_covering(&fx, 0);
        let mut any_different = false;
        for i in 0..50u64 {
            let mut q = fx.question.clone();
            q.id = i;
            let x = pred.grade(&q, &caption, &levels, &config).unwrap();
            let y = pred.grade(&q, &other, &levels, &config).unwrap();
            if x.emitted_level != y.emitted_level {
                any_different = true;
            }
        }
        assert!(any_different, "corruption draws never varied across captions");
    }

    #[test]
    fn answer_distribution_matches_hand_mixture() {
        let fx = fixture();
        let pred = Predictor::new(&fx.kb, &fx.vocab);
        let config = PredictorConfig::default();
        let e = fx.question.required_evidence.len();
        let gold = oracle_answer(&fx.scene, &fx.kb, &fx.question).unwrap();
        let gold_id = fx.kb.answer_id(&gold).unwrap();
        let target = fx.scene.object_at(fx.question.target_cell).unwrap();
        let prior_id = fx.kb.answer_id(fx.kb.prior_answer(target.category)).unwrap();
        assert_ne!(gold_id, prior_id, "fixture gold must differ from the prior");
        let n = fx.kb.answer_vocabulary().len() as f64;

        for m in 0..=e {
            let caption = caption_covering(&fx, m);
            let probs = pred
                .answer_probs(&fx.scene, &fx.question, &caption, &config)
                .unwrap();
            let c = m as f64 / e as f64;
            let lambda = 0.1;
            let floor = (1.0 - 0.9 * c - lambda) / n;
            for (i, p) in probs.iter().enumerate() {
                let want = if i == gold_id {
                    0.9 * c + floor
                } else if i == prior_id {
                    lambda + floor
                } else {
                    floor
                };
                assert!(
                    (p - want).abs() < 1e-12,
                    "m={m}, answer {i}: got {p}, want {want}"
                );
            }
            let total: f64 = probs.iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_coverage_prediction_follows_the_prior() {
        let fx = fixture();
        let pred = Predictor::new(&fx.kb, &fx.vocab);
        let config = PredictorConfig::default();
        let caption = caption_covering(&fx, 0);
        let verdict = pred
            .predict(&fx.scene, &fx.question, &caption, &config)
            .unwrap();
        let target = fx.scene.object_at(fx.question.target_cell).unwrap();
        assert_eq!(verdict.answer, fx.kb.prior_answer(target.category));

        // Without the prior the distribution is uniform and the argmax
        // tie-break picks the lowest id, the zero-count token.
        let no_prior = PredictorConfig {
            language_prior_strength: 0.0,
            ..config
        };
        let verdict = pred
            .predict(&fx.scene, &fx.question, &caption, &no_prior)
            .unwrap();
        assert_eq!(verdict.answer_id, 0);
        assert_eq!(verdict.answer, "0");
    }

    #[test]
    fn full_coverage_prediction_is_confidently_gold() {
        let fx = fixture();
        let pred = Predictor::new(&fx.kb, &fx.vocab);
        let config = PredictorConfig::default();
        let caption = caption_covering(&fx, fx.question.required_evidence.len());
        let verdict = pred
            .predict(&fx.scene, &fx.question, &caption, &config)
            .unwrap();
        let gold = oracle_answer(&fx.scene, &fx.kb, &fx.question).unwrap();
        assert_eq!(verdict.answer, gold);
        assert!((verdict.confidence - 0.9).abs() < 1e-12);
    }

    #[test]
    fn temperature_flattens_but_preserves_ranking() {
        let fx = fixture();
        let pred = Predictor::new(&fx.kb, &fx.vocab);
        let caption = caption_covering(&fx, fx.question.required_evidence.len());
        let cold = pred
            .predict(&fx.scene, &fx.question, &caption, &PredictorConfig::default())
            .unwrap();
        let hot_config = PredictorConfig {
            temperature: 50.0,
            ..PredictorConfig::default()
        };
        let hot = pred
            .predict(&fx.scene, &fx.question, &caption, &hot_config)
            .unwrap();
        assert_eq!(hot.answer, cold.answer, "temperature must not reorder answers");
        assert!(hot.confidence < cold.confidence);
        let probs = pred
            .answer_probs(&fx.scene, &fx.question, &caption, &hot_config)
            .unwrap();
        let total: f64 = probs.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn answer_templates_do_not_change_behavior() {
        let fx = fixture();
        let pred = Predictor::new(&fx.kb, &fx.vocab);
        let caption = caption_covering(&fx, 1);
        let base = pred
            .answer_probs(&fx.scene, &fx.question, &caption, &PredictorConfig::default())
            .unwrap();
        for id in 2..=5u32 {
            let config = PredictorConfig {
                prompt_template_id: id,
                ..PredictorConfig::default()
            };
            let probs = pred
                .answer_probs(&fx.scene, &fx.question, &caption, &config)
                .unwrap();
            assert_eq!(probs, base, "template {id} changed the answer distribution");
        }
    }

    #[test]
    fn nll_is_capped_and_tracks_coverage() {
        let fx = fixture();
        let pred = Predictor::new(&fx.kb, &fx.vocab);
        let config = PredictorConfig::default();
        let low = pred
            .nll_gold(&fx.scene, &fx.question, &caption_covering(&fx, 0), &config)
            .unwrap();
        let e = fx.question.required_evidence.len();
        let high = pred
            .nll_gold(&fx.scene, &fx.question, &caption_covering(&fx, e), &config)
            .unwrap();
        assert!(
            high < low,
            "gold NLL must drop as coverage rises ({high} !< {low})"
        );
        assert!(pred.nll(&[0.0, 1.0], 0, &config).unwrap() == config.nll_cap);
        assert!(pred.nll(&[1e-30, 1.0], 0, &config).unwrap() == config.nll_cap);
        assert!(matches!(
            pred.nll(&[0.5, 0.5], 7, &config),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn rendered_prompts_embed_question_and_caption() {
        let fx = fixture();
        let pred = Predictor::new(&fx.kb, &fx.vocab);
        let caption = encode(&fx.vocab, &["a", "red", "wood", "cake", ";"]);
        let config = PredictorConfig::default();
        let grading = pred.grading_prompt(&fx.question, &caption).unwrap();
        assert!(grading.starts_with("Question: "));
        assert!(grading.contains(&fx.question.text_string()));
        assert!(grading.contains("a red wood cake ;"));
        assert!(grading.ends_with("D:75%"));
        let answering = pred.answer_prompt(&fx.question, &caption, &config).unwrap();
        assert!(answering.starts_with("Please answer the following question.\n"));
        assert!(answering.contains(&fx.question.text_string()));
    }

    #[test]
    fn config_validation_rejects_out_of_range_values() {
        let bad = [
            PredictorConfig {
                reliability: 1.5,
                ..PredictorConfig::default()
            },
            PredictorConfig {
                reliability: -0.1,
                ..PredictorConfig::default()
            },
            PredictorConfig {
                language_prior_strength: 2.0,
                ..PredictorConfig::default()
            },
            PredictorConfig {
                temperature: 0.0,
                ..PredictorConfig::default()
            },
            PredictorConfig {
                nll_cap: 0.0,
                ..PredictorConfig::default()
            },
            PredictorConfig {
                prompt_template_id: 0,
                ..PredictorConfig::default()
            },
            PredictorConfig {
                prompt_template_id: 9,
                ..PredictorConfig::default()
            },
        ];
        for config in bad {
            assert!(
                matches!(config.validate(), Err(Error::Config(_))),
                "config should have been rejected: {config:?}"
            );
        }
    }

    #[test]
    fn grading_rejects_captions_with_unknown_tokens() {
        let fx = fixture();
        let pred = Predictor::new(&fx.kb, &fx.vocab);
        let levels = LevelScheme::default();
        let config = PredictorConfig::default();
        assert!(pred
            .grade(&fx.question, &[60_000], &levels, &config)
            .is_err());
        // The terminator id itself decodes (it is a real vocabulary
        // entry), and as a special it never matches evidence.
        let g = pred.grade(&fx.question, &[EOS], &levels, &config).unwrap();
        assert_eq!(g.matched, 0);
    }

    /// Sweep a real dataset: every gold answer the generator produces
    /// must be representable in the predictor's answer vocabulary.
    #[test]
    fn gold_answers_always_have_answer_ids() {
        let cfg = WorldConfig {
            n_train_pairs: 30,
            n_eval_pairs: 30,
            ..WorldConfig::default()
        };
        let kb = KnowledgeBase::new(&cfg);
        let (_, eval) = generate_dataset(&cfg, 7).unwrap();
        for pair in &eval.pairs {
            let gold = &pair.answer_key.as_ref().unwrap().gold;
            assert!(
                kb.answer_id(gold).is_some(),
                "gold answer '{gold}' missing from the answer vocabulary"
            );
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        /// The answer distribution is a proper distribution for any
        /// coverage, prior strength, and temperature.
        #[test]
        fn answer_probs_are_normalized(
            m_pick in 0usize..3,
            lambda in 0.0f64..=1.0,
            temp in 0.2f64..5.0,
            seed in 0u64..1000,
        ) {
            let cfg = WorldConfig::default();
            let kb = KnowledgeBase::new(&cfg);
            let vocab = Vocabulary::standard(&cfg);
            let scene = generate_scene(&cfg, 0, derive_idx(11, seed)).unwrap();
            let (question, _) = crate::world::generate_question(&scene, &kb, seed).unwrap();
            let pred = Predictor::new(&kb, &vocab);
            let config = PredictorConfig {
                language_prior_strength: lambda,
                temperature: temp,
                ..PredictorConfig::default()
            };
            let ev: Vec<String> = question.required_evidence.iter().cloned().collect();
            let m = m_pick.min(ev.len());
            let words: Vec<String> = ev[..m].to_vec();
            let caption = vocab.encode(&words).unwrap();
            let probs = pred.answer_probs(&scene, &question, &caption, &config).unwrap();
            let total: f64 = probs.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            prop_assert!(probs.iter().all(|p| *p >= 0.0));
        }
    }
}
