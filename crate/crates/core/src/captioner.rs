//! The trainable caption model: a one-hidden-layer autoregressive decoder
//! over a small caption vocabulary, conditioned on a mean cell-feature
//! embedding of the selected scene cells.
//!
//! Parameters live in one flat `Vec<f64>` so gradients, finite-difference
//! checks, and optimizer updates all share a single coordinate space. The
//! backward pass is written by hand and verified against central
//! finite differences in the tests.
//!
//! Decoding semantics: a caption is a sequence of content tokens; the
//! terminator is implicit. At each step the full softmax over the
//! vocabulary is sampled (greedy, top-k, or nucleus, optionally
//! tempered). Drawing the terminator ends the caption. Once `max_len`
//! content tokens have been emitted the terminator is forced with
//! probability one, so its recorded step log-probability is exactly zero
//! and the total probability mass over all captions of length at most
//! `max_len` is exactly one. Recorded step log-probabilities always come
//! from the untempered full softmax; temperature shapes sampling only.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::{
    object_features, Scene, WorldConfig, CATEGORIES, CELL_FEATURE_DIM, COLORS, DECORATIONS, FACTS,
    MATERIALS,
};

// ==================== vocabulary ====================

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const PAD: u32 = 2;

const FUNCTION_WORDS: [&str; 25] = [
    "a", "an", "the", "is", "are", "on", "in", "at", "of", "with", "and", "or", ";", ".", "made",
    "from", "object", "objects", "scene", "has", "it", "this", "there", "some", "next",
];

/// Closed caption vocabulary: three specials, then attribute tokens,
/// derived-fact tokens, function words, and one localization word per
/// grid cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, u32>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary { tokens, index }
    }

    /// Rebuild the lookup index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
    }

    /// Standard vocabulary for a world configuration. Duplicate surface
    /// forms (the decoration "white" shadowing the color) collapse to one
    /// token.
    pub fn standard(config: &WorldConfig) -> Self {
        let mut tokens: Vec<String> = vec!["<bos>".into(), "<eos>".into(), "<pad>".into()];
        let mut seen: BTreeSet<String> = tokens.iter().cloned().collect();
        let push = |tokens: &mut Vec<String>, seen: &mut BTreeSet<String>, t: &str| {
            if seen.insert(t.to_string()) {
                tokens.push(t.to_string());
            }
        };
        for t in CATEGORIES.iter().chain(&COLORS).chain(&MATERIALS).chain(&DECORATIONS) {
            push(&mut tokens, &mut seen, t);
        }
        for t in &FACTS {
            push(&mut tokens, &mut seen, t);
        }
        for t in &FUNCTION_WORDS {
            push(&mut tokens, &mut seen, t);
        }
        for cell in 0..config.grid_side * config.grid_side {
            push(&mut tokens, &mut seen, &format!("cell{cell}"));
        }
        Vocabulary::from_tokens(tokens)
    }

    /// Minimal vocabulary for unit tests: the three specials plus the
    /// given content tokens.
    pub fn toy(content: &[&str]) -> Self {
        let mut tokens: Vec<String> = vec!["<bos>".into(), "<eos>".into(), "<pad>".into()];
        tokens.extend(content.iter().map(|s| s.to_string()));
        Vocabulary::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: u32) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or_else(|| Error::domain(format!("token id {id} out of vocabulary")))
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn encode(&self, words: &[String]) -> Result<Vec<u32>> {
        words
            .iter()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| Error::data(format!("word '{w}' not in caption vocabulary")))
            })
            .collect()
    }

    /// Token ids back to surface words (specials included verbatim).
    pub fn decode(&self, ids: &[u32]) -> Result<Vec<String>> {
        ids.iter().map(|&id| self.token(id).map(str::to_string)).collect()
    }

    /// Space-joined surface rendering of a caption.
    pub fn text(&self, ids: &[u32]) -> Result<String> {
        Ok(self.decode(ids)?.join(" "))
    }
}

// ==================== parameters ====================

/// Shape header for the caption model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionerDims {
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub max_len: usize,
}

impl CaptionerDims {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= PAD as usize {
            return Err(Error::config("vocab_size must exceed the three special tokens"));
        }
        if self.feature_dim == 0 || self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::config("model dimensions must be positive"));
        }
        if self.max_len == 0 {
            return Err(Error::config("max_len must be at least 1"));
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        let (v, f, d, h) = (self.vocab_size, self.feature_dim, self.embed_dim, self.hidden_dim);
        f * d + v * d + 2 * d * h + h + h * v + v
    }

    fn off_cell_embed(&self) -> usize {
        0
    }
    fn off_tok_embed(&self) -> usize {
        self.feature_dim * self.embed_dim
    }
    fn off_hidden_w(&self) -> usize {
        self.off_tok_embed() + self.vocab_size * self.embed_dim
    }
    fn off_hidden_b(&self) -> usize {
        self.off_hidden_w() + 2 * self.embed_dim * self.hidden_dim
    }
    fn off_out_w(&self) -> usize {
        self.off_hidden_b() + self.hidden_dim
    }
    fn off_out_b(&self) -> usize {
        self.off_out_w() + self.hidden_dim * self.vocab_size
    }
}

/// Tunable configuration for a freshly initialized caption model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CaptionerConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub max_len: usize,
}

impl Default for CaptionerConfig {
    fn default() -> Self {
        CaptionerConfig {
            embed_dim: 32,
            hidden_dim: 64,
            max_len: 16,
        }
    }
}

/// All trainable parameters, flat and row-major per array:
/// cell_embed `[feature_dim x embed_dim]`, tok_embed `[vocab x embed_dim]`,
/// hidden_w `[2*embed_dim x hidden_dim]`, hidden_b `[hidden_dim]`,
/// out_w `[hidden_dim x vocab]`, out_b `[vocab]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptionerParams {
    pub dims: CaptionerDims,
    pub values: Vec<f64>,
}

const INIT_SCALE: f64 = 0.08;

impl CaptionerParams {
    pub fn init(dims: CaptionerDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..dims.n_params())
            .map(|_| rng.random_range(-INIT_SCALE..INIT_SCALE))
            .collect();
        Ok(CaptionerParams { dims, values })
    }

    pub fn for_world(vocab: &Vocabulary, config: &CaptionerConfig, seed: u64) -> Result<Self> {
        let dims = CaptionerDims {
            vocab_size: vocab.len(),
            feature_dim: CELL_FEATURE_DIM,
            embed_dim: config.embed_dim,
            hidden_dim: config.hidden_dim,
            max_len: config.max_len,
        };
        CaptionerParams::init(dims, seed)
    }

    #[inline]
    fn cell_embed(&self, f: usize, j: usize) -> f64 {
        self.values[self.dims.off_cell_embed() + f * self.dims.embed_dim + j]
    }
    #[inline]
    fn tok_embed(&self, t: usize, j: usize) -> f64 {
        self.values[self.dims.off_tok_embed() + t * self.dims.embed_dim + j]
    }
    #[inline]
    fn hidden_w(&self, i: usize, k: usize) -> f64 {
        self.values[self.dims.off_hidden_w() + i * self.dims.hidden_dim + k]
    }
    #[inline]
    fn hidden_b(&self, k: usize) -> f64 {
        self.values[self.dims.off_hidden_b() + k]
    }
    #[inline]
    fn out_w(&self, k: usize, v: usize) -> f64 {
        self.values[self.dims.off_out_w() + k * self.dims.vocab_size + v]
    }
    #[inline]
    fn out_b(&self, v: usize) -> f64 {
        self.values[self.dims.off_out_b() + v]
    }

    pub fn n_params(&self) -> usize {
        self.values.len()
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Mean feature embedding of the selected cells; zero when the
    /// selection is empty. Cells must be in range and occupied.
    pub fn context(&self, scene: &Scene, cells: &BTreeSet<usize>) -> Result<Vec<f64>> {
        let feats = mean_features(&self.dims, scene, cells)?;
        let d = self.dims.embed_dim;
        let mut context = vec![0.0; d];
        for (f, &x) in feats.iter().enumerate() {
            if x != 0.0 {
                for (j, c) in context.iter_mut().enumerate() {
                    *c += x * self.cell_embed(f, j);
                }
            }
        }
        Ok(context)
    }

    /// Next-token logits given the context vector and the previous token.
    pub fn step_logits(&self, context: &[f64], prev_token: u32) -> Result<Vec<f64>> {
        let (d, v) = (self.dims.embed_dim, self.dims.vocab_size);
        if context.len() != d {
            return Err(Error::domain(format!(
                "context has length {}, expected embed_dim {d}",
                context.len()
            )));
        }
        if prev_token as usize >= v {
            return Err(Error::domain(format!("previous token id {prev_token} out of vocabulary")));
        }
        let hid = self.step_hidden(context, prev_token);
        let mut logits = vec![0.0; v];
        for (out, l) in logits.iter_mut().enumerate() {
            let mut acc = self.out_b(out);
            for (k, &hk) in hid.iter().enumerate() {
                acc += hk * self.out_w(k, out);
            }
            *l = acc;
        }
        Ok(logits)
    }

    fn step_hidden(&self, context: &[f64], prev_token: u32) -> Vec<f64> {
        let (d, h) = (self.dims.embed_dim, self.dims.hidden_dim);
        let t = prev_token as usize;
        let mut hid = vec![0.0; h];
        for (k, hk) in hid.iter_mut().enumerate() {
            let mut pre = self.hidden_b(k);
            for (j, &cj) in context.iter().enumerate().take(d) {
                pre += cj * self.hidden_w(j, k);
                pre += self.tok_embed(t, j) * self.hidden_w(d + j, k);
            }
            *hk = pre.tanh();
        }
        hid
    }

    /// Total log-probability of `tokens` as a complete caption for the
    /// selected cells, including the terminator factor (exactly zero when
    /// the caption saturates `max_len`).
    pub fn log_prob(&self, scene: &Scene, cells: &BTreeSet<usize>, tokens: &[u32]) -> Result<f64> {
        Ok(self.step_log_probs(scene, cells, tokens)?.iter().sum())
    }

    /// Per-step log-probabilities for a complete caption: one entry per
    /// content token plus the final terminator entry.
    pub fn step_log_probs(
        &self,
        scene: &Scene,
        cells: &BTreeSet<usize>,
        tokens: &[u32],
    ) -> Result<Vec<f64>> {
        self.validate_caption(tokens)?;
        let context = self.context(scene, cells)?;
        let mut out = Vec::with_capacity(tokens.len() + 1);
        let mut prev = BOS;
        for &tok in tokens {
            let logits = self.step_logits(&context, prev)?;
            out.push(log_softmax_at(&logits, tok as usize));
            prev = tok;
        }
        if tokens.len() < self.dims.max_len {
            let logits = self.step_logits(&context, prev)?;
            out.push(log_softmax_at(&logits, EOS as usize));
        } else {
            out.push(0.0);
        }
        Ok(out)
    }

    fn validate_caption(&self, tokens: &[u32]) -> Result<()> {
        if tokens.len() > self.dims.max_len {
            return Err(Error::domain(format!(
                "caption has {} tokens, model max_len is {}",
                tokens.len(),
                self.dims.max_len
            )));
        }
        for &t in tokens {
            if t == EOS {
                return Err(Error::domain(
                    "caption tokens must not include the terminator",
                ));
            }
            if t as usize >= self.dims.vocab_size {
                return Err(Error::domain(format!("token id {t} out of vocabulary")));
            }
        }
        Ok(())
    }

    /// Log-probability of the caption together with its gradient in the
    /// flat parameter space. The forced terminator step beyond `max_len`
    /// has probability one and contributes no gradient.
    pub fn grad_log_prob(
        &self,
        scene: &Scene,
        cells: &BTreeSet<usize>,
        tokens: &[u32],
    ) -> Result<(f64, Vec<f64>)> {
        self.validate_caption(tokens)?;
        let dims = self.dims;
        let (d, h, v) = (dims.embed_dim, dims.hidden_dim, dims.vocab_size);
        let mean_feats = mean_features(&dims, scene, cells)?;
        let context = self.context(scene, cells)?;

        let mut grad = vec![0.0; self.n_params()];
        let mut d_context = vec![0.0; d];
        let mut total = 0.0;

        // Step targets: each content token, then the terminator unless it
        // is forced by saturation.
        let forced_eos = tokens.len() == dims.max_len;
        let n_steps = tokens.len() + usize::from(!forced_eos);
        let mut prev = BOS;
        for step in 0..n_steps {
            let target = if step < tokens.len() {
                tokens[step] as usize
            } else {
                EOS as usize
            };
            let hid = self.step_hidden(&context, prev);
            let logits = self.step_logits(&context, prev)?;
            let probs = softmax(&logits);
            total += log_softmax_at(&logits, target);

            // d log p / d logit_v = [v == target] - softmax_v
            let mut d_hid = vec![0.0; h];
            for (out, &p) in probs.iter().enumerate() {
                let dl = f64::from(out == target) - p;
                grad[dims.off_out_b() + out] += dl;
                for (k, &hk) in hid.iter().enumerate() {
                    grad[dims.off_out_w() + k * v + out] += hk * dl;
                    d_hid[k] += self.out_w(k, out) * dl;
                }
            }
            let t = prev as usize;
            for (k, &dh) in d_hid.iter().enumerate() {
                let d_pre = dh * (1.0 - hid[k] * hid[k]);
                grad[dims.off_hidden_b() + k] += d_pre;
                for j in 0..d {
                    grad[dims.off_hidden_w() + j * h + k] += context[j] * d_pre;
                    grad[dims.off_hidden_w() + (d + j) * h + k] += self.tok_embed(t, j) * d_pre;
                    d_context[j] += self.hidden_w(j, k) * d_pre;
                    grad[dims.off_tok_embed() + t * d + j] += self.hidden_w(d + j, k) * d_pre;
                }
            }
            if step < tokens.len() {
                prev = tokens[step];
            }
        }

        // The context is shared by every step; push its accumulated
        // gradient through the mean feature embedding.
        for (f, &x) in mean_feats.iter().enumerate() {
            if x != 0.0 {
                for (j, &dc) in d_context.iter().enumerate() {
                    grad[dims.off_cell_embed() + f * d + j] += x * dc;
                }
            }
        }
        Ok((total, grad))
    }

    /// Draw one caption for the selected cells.
    pub fn sample(
        &self,
        scene: &Scene,
        cells: &BTreeSet<usize>,
        config: &DecodeConfig,
    ) -> Result<CaptionSample> {
        config.validate(&self.dims)?;
        let context = self.context(scene, cells)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut tokens: Vec<u32> = Vec::new();
        let mut step_log_probs: Vec<f64> = Vec::new();
        let mut prev = BOS;
        loop {
            if tokens.len() == self.dims.max_len {
                step_log_probs.push(0.0);
                break;
            }
            let logits = self.step_logits(&context, prev)?;
            let chosen = config.mode.draw(&logits, config.temperature, &mut rng);
            step_log_probs.push(log_softmax_at(&logits, chosen));
            if chosen as u32 == EOS {
                break;
            }
            tokens.push(chosen as u32);
            prev = chosen as u32;
        }
        let log_prob = step_log_probs.iter().sum();
        Ok(CaptionSample {
            tokens,
            step_log_probs,
            log_prob,
        })
    }
}

/// Mean feature vector over the selected cells (zero for an empty
/// selection). Cells must be in range and occupied.
fn mean_features(dims: &CaptionerDims, scene: &Scene, cells: &BTreeSet<usize>) -> Result<Vec<f64>> {
    if dims.feature_dim != CELL_FEATURE_DIM {
        return Err(Error::config(format!(
            "feature_dim {} does not match the world's cell feature width {CELL_FEATURE_DIM}",
            dims.feature_dim
        )));
    }
    let mut mean = vec![0.0; dims.feature_dim];
    if cells.is_empty() {
        return Ok(mean);
    }
    for &cell in cells {
        if cell >= scene.n_cells() {
            return Err(Error::domain(format!(
                "cell {cell} out of range for a {}x{} grid",
                scene.grid_side, scene.grid_side
            )));
        }
        let obj = scene
            .object_at(cell)
            .ok_or_else(|| Error::domain(format!("cell {cell} is empty")))?;
        for (m, x) in mean.iter_mut().zip(object_features(obj)) {
            *m += x;
        }
    }
    let n = cells.len() as f64;
    for m in &mut mean {
        *m /= n;
    }
    Ok(mean)
}

// ==================== decoding ====================

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    TopK { k: usize },
    Nucleus { p: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub temperature: f64,
    pub max_len: usize,
    pub seed: u64,
}

impl DecodeConfig {
    pub fn validate(&self, dims: &CaptionerDims) -> Result<()> {
        if self.max_len != dims.max_len {
            return Err(Error::config(format!(
                "decode max_len {} must equal the model's max_len {}",
                self.max_len, dims.max_len
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config("temperature must be positive"));
        }
        match self.mode {
            DecodeMode::TopK { k: 0 } => Err(Error::config("top-k needs k >= 1")),
            DecodeMode::Nucleus { p } if !(p > 0.0 && p <= 1.0) => {
                Err(Error::config("nucleus mass must lie in (0, 1]"))
            }
            _ => Ok(()),
        }
    }
}

impl DecodeMode {
    /// Pick the next token index. Candidates are ordered by tempered
    /// logit descending with index ascending as the tie-break, so every
    /// mode is deterministic given the RNG stream.
    fn draw(&self, logits: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
        let tempered: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
        let mut order: Vec<usize> = (0..tempered.len()).collect();
        order.sort_by(|&a, &b| {
            tempered[b]
                .partial_cmp(&tempered[a])
                .expect("logits are finite")
                .then(a.cmp(&b))
        });
        match *self {
            DecodeMode::Greedy => order[0],
            DecodeMode::TopK { k } => {
                let k = k.min(order.len());
                let cand = &order[..k];
                let probs = softmax_of(&tempered, cand);
                cand[cdf_draw(&probs, rng)]
            }
            DecodeMode::Nucleus { p } => {
                let probs = softmax_of(&tempered, &order);
                let mut cut = order.len();
                let mut cum = 0.0;
                for (i, &q) in probs.iter().enumerate() {
                    cum += q;
                    if cum >= p {
                        cut = i + 1;
                        break;
                    }
                }
                let cand = &order[..cut];
                let mass: f64 = probs[..cut].iter().sum();
                let renorm: Vec<f64> = probs[..cut].iter().map(|q| q / mass).collect();
                cand[cdf_draw(&renorm, rng)]
            }
        }
    }
}

/// One sampled caption with its per-step log-probabilities, which always
/// come from the untempered full softmax (the forced terminator step
/// records exactly zero).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionSample {
    pub tokens: Vec<u32>,
    pub step_log_probs: Vec<f64>,
    pub log_prob: f64,
}

fn cdf_draw(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return i;
        }
    }
    probs.len() - 1
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln()
}

fn log_softmax_at(logits: &[f64], idx: usize) -> f64 {
    logits[idx] - log_sum_exp(logits)
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|l| (l - lse).exp()).collect()
}

/// Softmax over the subset of `values` selected by `idx`, in idx order.
fn softmax_of(values: &[f64], idx: &[usize]) -> Vec<f64> {
    let selected: Vec<f64> = idx.iter().map(|&i| values[i]).collect();
    softmax(&selected)
}

// ==================== cell subsampling ====================

/// Uniform without-replacement selection of `ceil(fraction * occupied)`
/// occupied cells. `fraction` must lie in (0, 1]; an empty scene yields an
/// empty selection.
pub fn subsample_cells(scene: &Scene, fraction: f64, seed: u64) -> Result<BTreeSet<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config("cell fraction must lie in (0, 1]"));
    }
    let occupied = scene.occupied_cells();
    if occupied.is_empty() {
        return Ok(BTreeSet::new());
    }
    let k = ((fraction * occupied.len() as f64).ceil() as usize).clamp(1, occupied.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = rand::seq::index::sample(&mut rng, occupied.len(), k);
    Ok(picked.iter().map(|i| occupied[i]).collect())
}

// ==================== checkpoints ====================

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    vocab_size: usize,
    feature_dim: usize,
    embed_dim: usize,
    hidden_dim: usize,
    max_len: usize,
    cell_embed: Vec<f64>,
    tok_embed: Vec<f64>,
    hidden_w: Vec<f64>,
    hidden_b: Vec<f64>,
    out_w: Vec<f64>,
    out_b: Vec<f64>,
}

impl CaptionerParams {
    pub fn to_json(&self) -> Result<String> {
        let d = &self.dims;
        let seg = |a: usize, b: usize| self.values[a..b].to_vec();
        let file = CheckpointFile {
            version: CHECKPOINT_VERSION,
            vocab_size: d.vocab_size,
            feature_dim: d.feature_dim,
            embed_dim: d.embed_dim,
            hidden_dim: d.hidden_dim,
            max_len: d.max_len,
            cell_embed: seg(d.off_cell_embed(), d.off_tok_embed()),
            tok_embed: seg(d.off_tok_embed(), d.off_hidden_w()),
            hidden_w: seg(d.off_hidden_w(), d.off_hidden_b()),
            hidden_b: seg(d.off_hidden_b(), d.off_out_w()),
            out_w: seg(d.off_out_w(), d.off_out_b()),
            out_b: seg(d.off_out_b(), d.n_params()),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(json)?;
        if file.version != CHECKPOINT_VERSION {
            return Err(Error::data(format!(
                "checkpoint version {} is not the supported version {CHECKPOINT_VERSION}",
                file.version
            )));
        }
        let dims = CaptionerDims {
            vocab_size: file.vocab_size,
            feature_dim: file.feature_dim,
            embed_dim: file.embed_dim,
            hidden_dim: file.hidden_dim,
            max_len: file.max_len,
        };
        dims.validate()?;
        let segments: [(&str, &Vec<f64>, usize); 6] = [
            ("cell_embed", &file.cell_embed, dims.off_tok_embed() - dims.off_cell_embed()),
            ("tok_embed", &file.tok_embed, dims.off_hidden_w() - dims.off_tok_embed()),
            ("hidden_w", &file.hidden_w, dims.off_hidden_b() - dims.off_hidden_w()),
            ("hidden_b", &file.hidden_b, dims.off_out_w() - dims.off_hidden_b()),
            ("out_w", &file.out_w, dims.off_out_b() - dims.off_out_w()),
            ("out_b", &file.out_b, dims.n_params() - dims.off_out_b()),
        ];
        let mut values = Vec::with_capacity(dims.n_params());
        for (name, seg, want) in segments {
            if seg.len() != want {
                return Err(Error::data(format!(
                    "checkpoint array '{name}' has {} values, header implies {want}",
                    seg.len()
                )));
            }
            values.extend_from_slice(seg);
        }
        Ok(CaptionerParams { dims, values })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path)?;
        CaptionerParams::from_json(&json)
    }
}
