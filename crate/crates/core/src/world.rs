//! Synthetic grid-world generator: scenes, a knowledge base of derived
//! facts, templated questions with evidence sets, multi-annotator answer
//! keys, and disjoint dataset splits.
//!
//! Everything here is deterministic given (config, seed). Questions are
//! always answerable from (Scene, KnowledgeBase) alone; the independent
//! oracle in [`oracle_answer`] re-derives the gold answer from scratch and
//! is swept against generation in the tests.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{derive, derive_idx};

// ==================== attribute vocabularies ====================

pub const CATEGORIES: [&str; 12] = [
    "cake", "car", "tree", "house", "statue", "boat", "lamp", "chair", "book", "robot", "fence",
    "kettle",
];
pub const COLORS: [&str; 8] = [
    "red", "blue", "green", "white", "black", "yellow", "purple", "orange",
];
pub const MATERIALS: [&str; 6] = ["wood", "metal", "glass", "plastic", "stone", "fabric"];
/// Decoration values. "white" deliberately shadows the color token: a
/// caption saying "white" covers evidence asking for either reading.
pub const DECORATIONS: [&str; 6] = ["white", "golden", "dark", "silver", "rainbow", "striped"];
/// Derived-fact tokens the knowledge base maps (category, decoration) onto.
pub const FACTS: [&str; 12] = [
    "frosting", "rust", "moss", "varnish", "patina", "tarnish", "enamel", "soot", "glitter",
    "wax", "dew", "mold",
];

/// Fixed two-synonyms-per-answer table. Answers without an entry (the
/// numeric count tokens) fall back to the answer itself when annotation
/// keys are filled.
pub fn synonyms(token: &str) -> Option<[&'static str; 2]> {
    let pair = match token {
        "red" => ["crimson", "scarlet"],
        "blue" => ["azure", "cobalt"],
        "green" => ["emerald", "jade"],
        "white" => ["ivory", "snowy"],
        "black" => ["ebony", "charcoal"],
        "yellow" => ["amber", "lemon"],
        "purple" => ["violet", "lilac"],
        "orange" => ["tangerine", "apricot"],
        "wood" => ["timber", "oak"],
        "metal" => ["steel", "iron"],
        "glass" => ["crystal", "pane"],
        "plastic" => ["polymer", "vinyl"],
        "stone" => ["rock", "granite"],
        "fabric" => ["cloth", "textile"],
        "golden" => ["gilded", "aurous"],
        "dark" => ["dim", "shadowy"],
        "silver" => ["silvery", "chrome"],
        "rainbow" => ["prismatic", "iridescent"],
        "striped" => ["banded", "lined"],
        "frosting" => ["icing", "topping"],
        "rust" => ["corrosion", "oxide"],
        "moss" => ["lichen", "greenery"],
        "varnish" => ["lacquer", "shellac"],
        "patina" => ["verdigris", "weathering"],
        "tarnish" => ["discoloration", "dullness"],
        "enamel" => ["coating", "gloss"],
        "soot" => ["ash", "grime"],
        "glitter" => ["sparkle", "shimmer"],
        "wax" => ["polish", "paraffin"],
        "dew" => ["moisture", "droplets"],
        "mold" => ["mildew", "fungus"],
        "yes" => ["yeah", "yep"],
        "no" => ["nope", "nah"],
        _ => return None,
    };
    Some(pair)
}

// ==================== scene ====================

/// One placed object. Attribute fields are indices into the tables above;
/// serialization uses the token strings for auditability.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SceneObjectRepr", into = "SceneObjectRepr")]
pub struct SceneObject {
    pub category: u8,
    pub color: u8,
    pub material: u8,
    pub decoration: Option<u8>,
}

impl SceneObject {
    pub fn category_name(&self) -> &'static str {
        CATEGORIES[self.category as usize]
    }
    pub fn color_name(&self) -> &'static str {
        COLORS[self.color as usize]
    }
    pub fn material_name(&self) -> &'static str {
        MATERIALS[self.material as usize]
    }
    pub fn decoration_name(&self) -> Option<&'static str> {
        self.decoration.map(|d| DECORATIONS[d as usize])
    }
}

#[derive(Serialize, Deserialize)]
struct SceneObjectRepr {
    category: String,
    color: String,
    material: String,
    decoration: Option<String>,
}

impl From<SceneObject> for SceneObjectRepr {
    fn from(o: SceneObject) -> Self {
        SceneObjectRepr {
            category: o.category_name().to_string(),
            color: o.color_name().to_string(),
            material: o.material_name().to_string(),
            decoration: o.decoration_name().map(str::to_string),
        }
    }
}

fn table_index(table: &[&str], token: &str) -> Option<u8> {
    table.iter().position(|t| *t == token).map(|i| i as u8)
}

impl TryFrom<SceneObjectRepr> for SceneObject {
    type Error = Error;
    fn try_from(r: SceneObjectRepr) -> Result<Self> {
        let category = table_index(&CATEGORIES, &r.category)
            .ok_or_else(|| Error::data(format!("unknown category token '{}'", r.category)))?;
        let color = table_index(&COLORS, &r.color)
            .ok_or_else(|| Error::data(format!("unknown color token '{}'", r.color)))?;
        let material = table_index(&MATERIALS, &r.material)
            .ok_or_else(|| Error::data(format!("unknown material token '{}'", r.material)))?;
        let decoration = match r.decoration {
            None => None,
            Some(d) => Some(
                table_index(&DECORATIONS, &d)
                    .ok_or_else(|| Error::data(format!("unknown decoration token '{d}'")))?,
            ),
        };
        Ok(SceneObject {
            category,
            color,
            material,
            decoration,
        })
    }
}

/// A square grid of optional objects, row-major cell indexing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: u64,
    pub grid_side: usize,
    pub grid: Vec<Option<SceneObject>>,
    pub seed: u64,
}

impl Scene {
    pub fn n_cells(&self) -> usize {
        self.grid_side * self.grid_side
    }

    pub fn occupied_cells(&self) -> Vec<usize> {
        self.grid
            .iter()
            .enumerate()
            .filter_map(|(i, o)| o.as_ref().map(|_| i))
            .collect()
    }

    pub fn object_at(&self, cell: usize) -> Option<&SceneObject> {
        self.grid.get(cell).and_then(|o| o.as_ref())
    }
}

// ==================== cell featurization ====================

/// Flattened per-cell feature width: occupancy bit, one-hot category,
/// color, material, decoration, and a has-decoration bit.
pub const CELL_FEATURE_DIM: usize =
    1 + CATEGORIES.len() + COLORS.len() + MATERIALS.len() + DECORATIONS.len() + 1;

/// Feature vector for one occupied cell, consumed by the caption model's
/// cell embedding table.
pub fn object_features(obj: &SceneObject) -> Vec<f64> {
    let mut f = vec![0.0; CELL_FEATURE_DIM];
    f[0] = 1.0;
    f[1 + obj.category as usize] = 1.0;
    f[1 + CATEGORIES.len() + obj.color as usize] = 1.0;
    f[1 + CATEGORIES.len() + COLORS.len() + obj.material as usize] = 1.0;
    if let Some(d) = obj.decoration {
        f[1 + CATEGORIES.len() + COLORS.len() + MATERIALS.len() + d as usize] = 1.0;
        f[CELL_FEATURE_DIM - 1] = 1.0;
    }
    f
}

// ==================== config ====================

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub grid_side: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Probability that a generated object carries a decoration.
    pub decoration_prob: f64,
    pub n_train_pairs: usize,
    pub n_eval_pairs: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            grid_side: 5,
            min_objects: 8,
            max_objects: 18,
            decoration_prob: 0.6,
            n_train_pairs: 1000,
            n_eval_pairs: 300,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let cells = self.grid_side * self.grid_side;
        if self.grid_side == 0 {
            return Err(Error::config("grid_side must be at least 1"));
        }
        if self.min_objects == 0 {
            return Err(Error::config("min_objects must be at least 1"));
        }
        if self.max_objects < self.min_objects {
            return Err(Error::config(format!(
                "max_objects ({}) must be >= min_objects ({})",
                self.max_objects, self.min_objects
            )));
        }
        if self.max_objects > cells {
            return Err(Error::config(format!(
                "max_objects ({}) exceeds grid cell count ({cells})",
                self.max_objects
            )));
        }
        if !(0.0..=1.0).contains(&self.decoration_prob) {
            return Err(Error::config("decoration_prob must lie in [0, 1]"));
        }
        if self.n_train_pairs == 0 || self.n_eval_pairs == 0 {
            return Err(Error::config("both splits need at least one pair"));
        }
        Ok(())
    }
}

// ==================== scene generation ====================

pub fn generate_scene(config: &WorldConfig, id: u64, seed: u64) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_cells = config.grid_side * config.grid_side;
    let n_objects = rng.random_range(config.min_objects..=config.max_objects);
    let mut cells: Vec<usize> = rand::seq::index::sample(&mut rng, n_cells, n_objects).into_vec();
    cells.sort_unstable();

    let mut grid: Vec<Option<SceneObject>> = vec![None; n_cells];
    for cell in cells {
        let category = rng.random_range(0..CATEGORIES.len()) as u8;
        let color = rng.random_range(0..COLORS.len()) as u8;
        let material = rng.random_range(0..MATERIALS.len()) as u8;
        let decoration = if rng.random::<f64>() < config.decoration_prob {
            Some(rng.random_range(0..DECORATIONS.len()) as u8)
        } else {
            None
        };
        grid[cell] = Some(SceneObject {
            category,
            color,
            material,
            decoration,
        });
    }
    Ok(Scene {
        id,
        grid_side: config.grid_side,
        grid,
        seed,
    })
}

// ==================== knowledge base ====================

/// Deterministic world knowledge: a total map from (category, decoration)
/// to a derived-fact token, the per-category co-occurrence prior, and the
/// closed answer vocabulary.
#[derive(Clone, Debug)]
pub struct KnowledgeBase {
    answer_vocab: Vec<String>,
    answer_index: BTreeMap<String, usize>,
}

impl KnowledgeBase {
    pub fn new(config: &WorldConfig) -> Self {
        let max_count = config.grid_side * config.grid_side;
        let mut answer_vocab: Vec<String> = Vec::new();
        let mut seen: BTreeSet<String> = BTreeSet::new();
        let push = |vocab: &mut Vec<String>, seen: &mut BTreeSet<String>, t: &str| {
            if seen.insert(t.to_string()) {
                vocab.push(t.to_string());
            }
        };

        let mut base: Vec<String> = Vec::new();
        for n in 0..=max_count {
            base.push(n.to_string());
        }
        base.extend(COLORS.iter().map(|s| s.to_string()));
        base.extend(MATERIALS.iter().map(|s| s.to_string()));
        base.extend(DECORATIONS.iter().map(|s| s.to_string()));
        base.extend(FACTS.iter().map(|s| s.to_string()));
        base.push("yes".to_string());
        base.push("no".to_string());

        for t in &base {
            push(&mut answer_vocab, &mut seen, t);
        }
        for t in &base {
            if let Some([a, b]) = synonyms(t) {
                push(&mut answer_vocab, &mut seen, a);
                push(&mut answer_vocab, &mut seen, b);
            }
        }
        let answer_index = answer_vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        KnowledgeBase {
            answer_vocab,
            answer_index,
        }
    }

    /// Derived-fact lookup, total over the (category, decoration) product.
    pub fn fact(&self, category: u8, decoration: u8) -> &'static str {
        FACTS[(category as usize * 5 + decoration as usize * 7) % FACTS.len()]
    }

    /// The answer a knowledge-heavy model leans toward for a category when
    /// the caption carries no evidence: the lead synonym of the category's
    /// most familiar derived fact.
    pub fn prior_answer(&self, category: u8) -> &'static str {
        synonyms(self.fact(category, 0)).expect("facts all have synonyms")[0]
    }

    /// Closed, ordered answer vocabulary (base answers then synonyms).
    pub fn answer_vocabulary(&self) -> &[String] {
        &self.answer_vocab
    }

    pub fn answer_id(&self, token: &str) -> Option<usize> {
        self.answer_index.get(token).copied()
    }
}

// ==================== questions ====================

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuestionTemplate {
    Color = 0,
    DerivedFact = 1,
    Count = 2,
    Relation = 3,
    Negation = 4,
    Material = 5,
}

impl QuestionTemplate {
    pub const ALL: [QuestionTemplate; 6] = [
        QuestionTemplate::Color,
        QuestionTemplate::DerivedFact,
        QuestionTemplate::Count,
        QuestionTemplate::Relation,
        QuestionTemplate::Negation,
        QuestionTemplate::Material,
    ];

    pub fn from_id(id: u32) -> Result<Self> {
        Self::ALL
            .get(id as usize)
            .copied()
            .ok_or_else(|| Error::config(format!("unknown question template id {id}")))
    }

    pub fn name(&self) -> &'static str {
        match self {
            QuestionTemplate::Color => "color",
            QuestionTemplate::DerivedFact => "derived_fact",
            QuestionTemplate::Count => "count",
            QuestionTemplate::Relation => "relation",
            QuestionTemplate::Negation => "negation",
            QuestionTemplate::Material => "material",
        }
    }

    /// Templates about decorations are only posed for decorated targets.
    fn needs_decoration(&self) -> bool {
        matches!(
            self,
            QuestionTemplate::DerivedFact | QuestionTemplate::Relation
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub id: u64,
    pub scene_id: u64,
    pub template_id: u32,
    pub target_cell: usize,
    /// Lowercased word tokens; join with single spaces to render.
    pub text: Vec<String>,
    /// Attribute tokens any sufficient caption must convey.
    pub required_evidence: BTreeSet<String>,
}

impl Question {
    pub fn text_string(&self) -> String {
        self.text.join(" ")
    }

    pub fn template(&self) -> Result<QuestionTemplate> {
        QuestionTemplate::from_id(self.template_id)
    }
}

/// Gold answer plus a ten-annotator key; the gold token always appears at
/// least three times so an exact match earns a full score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnswerKey {
    pub gold: String,
    pub annotations: Vec<String>,
}

fn strings(words: &[&str]) -> Vec<String> {
    words.iter().map(|w| w.to_string()).collect()
}

fn evidence(tokens: &[&str]) -> BTreeSet<String> {
    tokens.iter().map(|t| t.to_string()).collect()
}

/// Generate one question about `scene` together with its answer key.
/// Deterministic in (scene, seed); the template is drawn uniformly from
/// the templates the scene can support.
pub fn generate_question(
    scene: &Scene,
    kb: &KnowledgeBase,
    seed: u64,
) -> Result<(Question, AnswerKey)> {
    let occupied = scene.occupied_cells();
    if occupied.is_empty() {
        return Err(Error::domain("scene has no occupied cells"));
    }
    let decorated: Vec<usize> = occupied
        .iter()
        .copied()
        .filter(|&c| scene.object_at(c).is_some_and(|o| o.decoration.is_some()))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eligible: Vec<QuestionTemplate> = QuestionTemplate::ALL
        .into_iter()
        .filter(|t| !t.needs_decoration() || !decorated.is_empty())
        .collect();
    let template = eligible[rng.random_range(0..eligible.len())];

    let pool = if template.needs_decoration() {
        &decorated
    } else {
        &occupied
    };
    let target_cell = pool[rng.random_range(0..pool.len())];
    let obj = scene
        .object_at(target_cell)
        .expect("target drawn from occupied cells");
    let cell_word = target_cell.to_string();
    let cat = obj.category_name();
    let color = obj.color_name();
    let material = obj.material_name();

    let (text, required_evidence, gold) = match template {
        QuestionTemplate::Color => (
            strings(&["what", "color", "is", "the", cat, "at", "cell", &cell_word, "?"]),
            evidence(&[cat, color]),
            color.to_string(),
        ),
        QuestionTemplate::DerivedFact => {
            let dec = obj.decoration_name().expect("target is decorated");
            (
                strings(&[
                    "what", "is", "the", dec, "substance", "on", "the", cat, "at", "cell",
                    &cell_word, "?",
                ]),
                evidence(&[cat, dec]),
                kb.fact(obj.category, obj.decoration.expect("decorated")).to_string(),
            )
        }
        QuestionTemplate::Count => {
            let count = occupied
                .iter()
                .filter(|&&c| scene.object_at(c).is_some_and(|o| o.color == obj.color))
                .count();
            (
                strings(&["how", "many", color, "objects", "are", "in", "the", "scene", "?"]),
                evidence(&[color]),
                count.to_string(),
            )
        }
        QuestionTemplate::Relation => {
            let dec = obj.decoration_name().expect("target is decorated");
            (
                strings(&[
                    "what",
                    "decoration",
                    "is",
                    "on",
                    "the",
                    color,
                    cat,
                    "at",
                    "cell",
                    &cell_word,
                    "?",
                ]),
                evidence(&[color, cat, dec]),
                dec.to_string(),
            )
        }
        QuestionTemplate::Negation => {
            let probe = if rng.random::<f64>() < 0.5 {
                color
            } else {
                COLORS[rng.random_range(0..COLORS.len())]
            };
            let gold = if probe == color { "no" } else { "yes" };
            (
                strings(&["is", "the", cat, "at", "cell", &cell_word, "not", probe, "?"]),
                evidence(&[cat, color]),
                gold.to_string(),
            )
        }
        QuestionTemplate::Material => (
            strings(&["what", "is", "the", cat, "at", "cell", &cell_word, "made", "of", "?"]),
            evidence(&[cat, material]),
            material.to_string(),
        ),
    };

    let question = Question {
        id: scene.id,
        scene_id: scene.id,
        template_id: template as u32,
        target_cell,
        text,
        required_evidence,
    };
    let key = build_answer_key(&gold, &mut rng);
    Ok((question, key))
}

/// Ten annotations: the gold token at least four times, the remainder
/// drawn from its fixed synonyms (or the gold again when it has none).
fn build_answer_key(gold: &str, rng: &mut ChaCha8Rng) -> AnswerKey {
    let gold_count = 4 + rng.random_range(0..4usize);
    let mut annotations = vec![gold.to_string(); gold_count];
    let syn = synonyms(gold);
    for _ in gold_count..10 {
        match syn {
            Some(pair) => annotations.push(pair[rng.random_range(0..2)].to_string()),
            None => annotations.push(gold.to_string()),
        }
    }
    AnswerKey {
        gold: gold.to_string(),
        annotations,
    }
}

/// Independent answerer: re-derives the gold answer for a question from
/// the scene and knowledge base only, parsing template slots out of the
/// question text where the template needs them.
pub fn oracle_answer(scene: &Scene, kb: &KnowledgeBase, question: &Question) -> Result<String> {
    if question.target_cell >= scene.n_cells() {
        return Err(Error::domain(format!(
            "target cell {} out of range for a {}x{} grid",
            question.target_cell, scene.grid_side, scene.grid_side
        )));
    }
    let obj = scene
        .object_at(question.target_cell)
        .ok_or_else(|| Error::domain(format!("target cell {} is empty", question.target_cell)))?;
    let template = question.template()?;
    let answer = match template {
        QuestionTemplate::Color => obj.color_name().to_string(),
        QuestionTemplate::Material => obj.material_name().to_string(),
        QuestionTemplate::Relation => obj
            .decoration_name()
            .ok_or_else(|| Error::domain("relation question targets an undecorated object"))?
            .to_string(),
        QuestionTemplate::DerivedFact => {
            let dec = obj
                .decoration
                .ok_or_else(|| Error::domain("fact question targets an undecorated object"))?;
            kb.fact(obj.category, dec).to_string()
        }
        QuestionTemplate::Count => {
            let color_word = question
                .text
                .get(2)
                .ok_or_else(|| Error::domain("count question text too short"))?;
            let color = table_index(&COLORS, color_word)
                .ok_or_else(|| Error::domain(format!("unknown color '{color_word}' in question")))?;
            scene
                .occupied_cells()
                .iter()
                .filter(|&&c| scene.object_at(c).is_some_and(|o| o.color == color))
                .count()
                .to_string()
        }
        QuestionTemplate::Negation => {
            let probe = question
                .text
                .get(question.text.len().wrapping_sub(2))
                .ok_or_else(|| Error::domain("negation question text too short"))?;
            if probe == obj.color_name() {
                "no".to_string()
            } else {
                "yes".to_string()
            }
        }
    };
    Ok(answer)
}

// ==================== reference captions ====================

/// Canonical caption for the selected cells: enumerates each object's
/// attribute tokens in cell order. Any evidence set for a question about
/// these cells is covered by construction. An empty selection yields an
/// empty caption.
pub fn reference_caption(scene: &Scene, cells: &BTreeSet<usize>) -> Result<Vec<String>> {
    let mut tokens = Vec::new();
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
        tokens.push("a".to_string());
        tokens.push(obj.color_name().to_string());
        tokens.push(obj.material_name().to_string());
        tokens.push(obj.category_name().to_string());
        if let Some(dec) = obj.decoration_name() {
            tokens.push("with".to_string());
            tokens.push(dec.to_string());
        }
        tokens.push(";".to_string());
    }
    Ok(tokens)
}

// ==================== dataset splits ====================

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRole {
    TrainUnlabeled,
    Eval,
}

/// One (scene, question) pair. Training pairs carry no answer key at all;
/// evaluation pairs always do.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldPair {
    pub scene: Scene,
    pub question: Question,
    pub answer_key: Option<AnswerKey>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub role: SplitRole,
    pub seed: u64,
    pub pairs: Vec<WorldPair>,
}

/// Generate the train (unlabeled) and eval splits. Scene ids are disjoint
/// by construction: train scenes take 0..n_train, eval scenes follow.
pub fn generate_dataset(config: &WorldConfig, seed: u64) -> Result<(DatasetSplit, DatasetSplit)> {
    config.validate()?;
    let kb = KnowledgeBase::new(config);

    let gen_split = |role: SplitRole, tag: &str, count: usize, id_base: u64| -> Result<DatasetSplit> {
        let scene_stream = derive(seed, &format!("{tag}-scenes"));
        let question_stream = derive(seed, &format!("{tag}-questions"));
        let mut pairs = Vec::with_capacity(count);
        for i in 0..count {
            let id = id_base + i as u64;
            let scene = generate_scene(config, id, derive_idx(scene_stream, i as u64))?;
            let (question, key) =
                generate_question(&scene, &kb, derive_idx(question_stream, i as u64))?;
            let answer_key = match role {
                SplitRole::TrainUnlabeled => None,
                SplitRole::Eval => Some(key),
            };
            pairs.push(WorldPair {
                scene,
                question,
                answer_key,
            });
        }
        Ok(DatasetSplit { role, seed, pairs })
    };

    let train = gen_split(SplitRole::TrainUnlabeled, "train", config.n_train_pairs, 0)?;
    let eval = gen_split(
        SplitRole::Eval,
        "eval",
        config.n_eval_pairs,
        config.n_train_pairs as u64,
    )?;
    Ok((train, eval))
}

/// One dataset JSONL record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub scene: Scene,
    pub question: Question,
    pub answer_key: Option<AnswerKey>,
    pub split: SplitRole,
    pub seed: u64,
}

/// Flatten both splits into JSONL records (train first, then eval).
pub fn dataset_records(train: &DatasetSplit, eval: &DatasetSplit) -> Vec<DatasetRecord> {
    let mut records = Vec::with_capacity(train.pairs.len() + eval.pairs.len());
    for split in [train, eval] {
        for pair in &split.pairs {
            records.push(DatasetRecord {
                scene: pair.scene.clone(),
                question: pair.question.clone(),
                answer_key: pair.answer_key.clone(),
                split: split.role,
                seed: split.seed,
            });
        }
    }
    records
}

/// Rebuild splits from parsed records (the inverse of [`dataset_records`]).
pub fn splits_from_records(records: Vec<DatasetRecord>) -> Result<(DatasetSplit, DatasetSplit)> {
    let mut train = DatasetSplit {
        role: SplitRole::TrainUnlabeled,
        seed: 0,
        pairs: Vec::new(),
    };
    let mut eval = DatasetSplit {
        role: SplitRole::Eval,
        seed: 0,
        pairs: Vec::new(),
    };
    for r in records {
        let pair = WorldPair {
            scene: r.scene,
            question: r.question,
            answer_key: r.answer_key,
        };
        match r.split {
            SplitRole::TrainUnlabeled => {
                train.seed = r.seed;
                train.pairs.push(pair);
            }
            SplitRole::Eval => {
                if pair.answer_key.is_none() {
                    return Err(Error::data(format!(
                        "eval record for scene {} lacks an answer key",
                        pair.scene.id
                    )));
                }
                eval.seed = r.seed;
                eval.pairs.push(pair);
            }
        }
    }
    if train.pairs.is_empty() || eval.pairs.is_empty() {
        return Err(Error::data("dataset records must cover both splits"));
    }
    Ok((train, eval))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> WorldConfig {
        WorldConfig {
            n_train_pairs: 40,
            n_eval_pairs: 20,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn scene_generation_is_deterministic() {
        let cfg = WorldConfig::default();
        let a = generate_scene(&cfg, 3, 99).unwrap();
        let b = generate_scene(&cfg, 3, 99).unwrap();
        assert_eq!(a, b, "same seed must reproduce the same scene");
    }

    #[test]
    fn different_seeds_usually_differ() {
        let cfg = WorldConfig::default();
        let mut differing = 0;
        for s in 0..100u64 {
            let a = generate_scene(&cfg, 0, derive_idx(1000, s)).unwrap();
            let b = generate_scene(&cfg, 0, derive_idx(2000, s)).unwrap();
            if a.grid != b.grid {
                differing += 1;
            }
        }
        assert!(
            differing >= 95,
            "expected >=95/100 seed pairs to differ, got {differing}"
        );
    }

    #[test]
    fn single_object_bound_is_exact() {
        let cfg = WorldConfig {
            min_objects: 1,
            max_objects: 1,
            ..WorldConfig::default()
        };
        let scene = generate_scene(&cfg, 0, 7).unwrap();
        assert_eq!(scene.occupied_cells().len(), 1);
    }

    #[test]
    fn occupancy_stays_within_bounds() {
        let cfg = WorldConfig::default();
        for s in 0..50u64 {
            let scene = generate_scene(&cfg, s, derive_idx(5, s)).unwrap();
            let n = scene.occupied_cells().len();
            assert!(
                (cfg.min_objects..=cfg.max_objects).contains(&n),
                "occupancy {n} outside [{}, {}]",
                cfg.min_objects,
                cfg.max_objects
            );
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            WorldConfig {
                min_objects: 0,
                ..WorldConfig::default()
            },
            WorldConfig {
                min_objects: 9,
                max_objects: 8,
                ..WorldConfig::default()
            },
            WorldConfig {
                max_objects: 26,
                ..WorldConfig::default()
            },
            WorldConfig {
                decoration_prob: 1.5,
                ..WorldConfig::default()
            },
            WorldConfig {
                n_eval_pairs: 0,
                ..WorldConfig::default()
            },
        ];
        for cfg in bad {
            assert!(
                matches!(generate_scene(&cfg, 0, 0), Err(Error::Config(_))),
                "config should have been rejected: {cfg:?}"
            );
        }
    }

    #[test]
    fn empty_scene_is_a_domain_error() {
        let cfg = WorldConfig::default();
        let kb = KnowledgeBase::new(&cfg);
        let scene = Scene {
            id: 0,
            grid_side: 5,
            grid: vec![None; 25],
            seed: 0,
        };
        assert!(matches!(
            generate_question(&scene, &kb, 0),
            Err(Error::Domain(_))
        ));
    }

    /// A lone white-decorated cake must yield the "frosting" derived fact,
    /// with the category and decoration tokens as the required evidence.
    #[test]
    fn white_cake_fact_question() {
        let cfg = WorldConfig::default();
        let kb = KnowledgeBase::new(&cfg);
        let mut grid = vec![None; 25];
        grid[7] = Some(SceneObject {
            category: 0, // cake
            color: 0,
            material: 0,
            decoration: Some(0), // white
        });
        let scene = Scene {
            id: 42,
            grid_side: 5,
            grid,
            seed: 0,
        };
        let mut found = false;
        for s in 0..200u64 {
            let (q, key) = generate_question(&scene, &kb, s).unwrap();
            if q.template().unwrap() == QuestionTemplate::DerivedFact {
                assert_eq!(key.gold, "frosting");
                assert_eq!(q.required_evidence, evidence(&["cake", "white"]));
                assert!(q.text.contains(&"substance".to_string()));
                found = true;
                break;
            }
        }
        assert!(found, "no derived-fact question drawn in 200 seeds");
    }

    #[test]
    fn question_generation_is_deterministic() {
        let cfg = WorldConfig::default();
        let kb = KnowledgeBase::new(&cfg);
        let scene = generate_scene(&cfg, 1, 11).unwrap();
        let a = generate_question(&scene, &kb, 5).unwrap();
        let b = generate_question(&scene, &kb, 5).unwrap();
        assert_eq!(a, b);
    }

    /// Every generated question must be answerable by the independent
    /// oracle, and the oracle must agree with the stored gold.
    #[test]
    fn oracle_agrees_with_generation_across_dataset() {
        let cfg = small_config();
        let kb = KnowledgeBase::new(&cfg);
        let (train, eval) = generate_dataset(&cfg, 123).unwrap();
        let mut checked = 0;
        for pair in eval.pairs.iter() {
            let key = pair.answer_key.as_ref().expect("eval pairs are labeled");
            let oracle = oracle_answer(&pair.scene, &kb, &pair.question).unwrap();
            assert_eq!(
                oracle, key.gold,
                "oracle disagrees on question {}",
                pair.question.id
            );
            checked += 1;
        }
        // Train pairs carry no key; still check the oracle runs on them.
        for pair in train.pairs.iter() {
            oracle_answer(&pair.scene, &kb, &pair.question).unwrap();
        }
        assert_eq!(checked, cfg.n_eval_pairs);
    }

    #[test]
    fn evidence_is_nonempty_and_drawn_from_target_attributes() {
        let cfg = small_config();
        let (_, eval) = generate_dataset(&cfg, 9).unwrap();
        for pair in &eval.pairs {
            let obj = pair.scene.object_at(pair.question.target_cell).unwrap();
            let mut attrs: BTreeSet<String> = BTreeSet::new();
            attrs.insert(obj.category_name().to_string());
            attrs.insert(obj.color_name().to_string());
            attrs.insert(obj.material_name().to_string());
            if let Some(d) = obj.decoration_name() {
                attrs.insert(d.to_string());
            }
            assert!(!pair.question.required_evidence.is_empty());
            assert!(
                pair.question.required_evidence.is_subset(&attrs),
                "evidence {:?} not drawn from target attributes {:?}",
                pair.question.required_evidence,
                attrs
            );
        }
    }

    #[test]
    fn answer_keys_have_ten_annotations_with_gold_majority() {
        let cfg = small_config();
        let (_, eval) = generate_dataset(&cfg, 77).unwrap();
        for pair in &eval.pairs {
            let key = pair.answer_key.as_ref().unwrap();
            assert_eq!(key.annotations.len(), 10);
            let gold_count = key.annotations.iter().filter(|a| **a == key.gold).count();
            assert!(gold_count >= 3, "gold multiplicity {gold_count} < 3");
            let allowed: BTreeSet<String> = std::iter::once(key.gold.clone())
                .chain(
                    synonyms(&key.gold)
                        .into_iter()
                        .flatten()
                        .map(str::to_string),
                )
                .collect();
            for a in &key.annotations {
                assert!(allowed.contains(a), "annotation '{a}' not gold or synonym");
            }
        }
    }

    #[test]
    fn splits_are_disjoint_and_train_is_unlabeled() {
        let cfg = small_config();
        let (train, eval) = generate_dataset(&cfg, 55).unwrap();
        let train_ids: BTreeSet<u64> = train.pairs.iter().map(|p| p.scene.id).collect();
        let eval_ids: BTreeSet<u64> = eval.pairs.iter().map(|p| p.scene.id).collect();
        assert!(train_ids.is_disjoint(&eval_ids), "scene ids overlap");
        assert!(train.pairs.iter().all(|p| p.answer_key.is_none()));
        assert!(eval.pairs.iter().all(|p| p.answer_key.is_some()));
    }

    #[test]
    fn dataset_record_roundtrip_and_field_set() {
        let cfg = small_config();
        let (train, eval) = generate_dataset(&cfg, 2).unwrap();
        let records = dataset_records(&train, &eval);
        assert_eq!(records.len(), cfg.n_train_pairs + cfg.n_eval_pairs);

        let line = serde_json::to_string(&records[0]).unwrap();
        let value: serde_json::Value = serde_json::from_str(&line).unwrap();
        let mut keys: Vec<&str> = value.as_object().unwrap().keys().map(|s| s.as_str()).collect();
        keys.sort_unstable();
        assert_eq!(keys, ["answer_key", "question", "scene", "seed", "split"]);
        assert!(line.starts_with(r#"{"scene":"#), "scene field must lead each record");

        let parsed: Vec<DatasetRecord> = records
            .iter()
            .map(|r| serde_json::from_str(&serde_json::to_string(r).unwrap()).unwrap())
            .collect();
        assert_eq!(parsed, records);
        let (train2, eval2) = splits_from_records(parsed).unwrap();
        assert_eq!(train2.pairs, train.pairs);
        assert_eq!(eval2.pairs, eval.pairs);
    }

    #[test]
    fn reference_caption_covers_evidence() {
        let cfg = small_config();
        let (_, eval) = generate_dataset(&cfg, 31).unwrap();
        for pair in eval.pairs.iter().take(50) {
            let cells: BTreeSet<usize> = pair.scene.occupied_cells().into_iter().collect();
            let caption = reference_caption(&pair.scene, &cells).unwrap();
            let caption_set: BTreeSet<&str> = caption.iter().map(|s| s.as_str()).collect();
            for ev in &pair.question.required_evidence {
                assert!(
                    caption_set.contains(ev.as_str()),
                    "reference caption misses evidence token '{ev}'"
                );
            }
        }
    }

    #[test]
    fn reference_caption_edge_cases() {
        let cfg = WorldConfig::default();
        let scene = generate_scene(&cfg, 0, 4).unwrap();
        assert!(reference_caption(&scene, &BTreeSet::new()).unwrap().is_empty());

        let empty_cell = (0..scene.n_cells())
            .find(|c| scene.object_at(*c).is_none())
            .expect("default config leaves empty cells");
        let bad: BTreeSet<usize> = [empty_cell].into_iter().collect();
        assert!(matches!(
            reference_caption(&scene, &bad),
            Err(Error::Domain(_))
        ));
        let out: BTreeSet<usize> = [999].into_iter().collect();
        assert!(matches!(
            reference_caption(&scene, &out),
            Err(Error::Domain(_))
        ));

        let single = scene.occupied_cells()[0];
        let obj = scene.object_at(single).unwrap();
        let cells: BTreeSet<usize> = [single].into_iter().collect();
        let caption = reference_caption(&scene, &cells).unwrap();
        for attr in [obj.color_name(), obj.material_name(), obj.category_name()] {
            assert!(caption.contains(&attr.to_string()));
        }
    }

    #[test]
    fn answer_vocabulary_is_closed_and_duplicate_free() {
        let cfg = WorldConfig::default();
        let kb = KnowledgeBase::new(&cfg);
        let vocab = kb.answer_vocabulary();
        let unique: BTreeSet<&String> = vocab.iter().collect();
        assert_eq!(unique.len(), vocab.len(), "duplicate answer tokens");
        // Counts, all attribute answers, facts, yes/no, and synonyms present.
        for t in ["0", "25", "red", "wood", "striped", "frosting", "yes", "no", "icing"] {
            assert!(kb.answer_id(t).is_some(), "token '{t}' missing from answer vocab");
        }
        // The count vocabulary tracks the grid size.
        assert!(kb.answer_id("26").is_none());
        // Lowest-id token is the zero count, which no question ever has
        // as gold (counts are at least one).
        assert_eq!(vocab[0], "0");
    }

    #[test]
    fn fact_table_is_total_and_pins_the_flagship_fact() {
        let cfg = WorldConfig::default();
        let kb = KnowledgeBase::new(&cfg);
        assert_eq!(kb.fact(0, 0), "frosting", "cake + white must map to frosting");
        for c in 0..CATEGORIES.len() as u8 {
            for d in 0..DECORATIONS.len() as u8 {
                let f = kb.fact(c, d);
                assert!(FACTS.contains(&f));
            }
        }
        assert_eq!(kb.prior_answer(0), "icing");
    }

    #[test]
    fn scene_object_serde_uses_token_strings() {
        let obj = SceneObject {
            category: 0,
            color: 3,
            material: 1,
            decoration: Some(0),
        };
        let json = serde_json::to_string(&obj).unwrap();
        assert_eq!(
            json,
            r#"{"category":"cake","color":"white","material":"metal","decoration":"white"}"#
        );
        let back: SceneObject = serde_json::from_str(&json).unwrap();
        assert_eq!(back, obj);
        assert!(serde_json::from_str::<SceneObject>(
            r#"{"category":"pizza","color":"white","material":"metal","decoration":null}"#
        )
        .is_err());
    }
}
