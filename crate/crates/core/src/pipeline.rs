//! Run pipeline: the on-disk layout of a run directory and the five
//! commands that fill it.
//!
//! A run lives in `<out>/<run_name>/` and accumulates artifacts in
//! stages: data generation writes the resolved config and the dataset,
//! training writes the retained caption set, checkpoints and reward
//! logs, evaluation writes the report and per-question traces, and the
//! analysis and sweep commands add diagnostics and curve tables. Every
//! artifact except `meta.json` (which carries the creation timestamp) is
//! a pure function of the resolved config, so rerunning a command
//! reproduces its files byte for byte.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::adaptation;
use crate::captioner::{CaptionerParams, Vocabulary};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evaluation::{
    self, CaptionCountCell, EvalReport, GradeBucket, LevelsCell, NllCorrelation, ObjectiveCell,
};
use crate::feedback;
use crate::predictor::prompt_templates;
use crate::world::{self, DatasetRecord, DatasetSplit, KnowledgeBase};

// ==================== run directory ====================

/// Handle to one run's directory. Construction goes through
/// [`RunDirectory::create`] (data generation) or [`RunDirectory::open`]
/// (every later stage).
pub struct RunDirectory {
    root: PathBuf,
}

impl RunDirectory {
    /// Create `<out>/<run_name>/` and write the resolved config, the
    /// creation metadata and the prompt template registry. An existing
    /// run of the same name is refused unless `force`, which erases it.
    pub fn create(out_dir: &Path, config: &RunConfig, force: bool) -> Result<Self> {
        config.validate()?;
        let resolved = config.resolved();
        let root = out_dir.join(&resolved.run_name);
        if root.join("config.json").exists() {
            if !force {
                return Err(Error::data(format!(
                    "run directory {} already exists; pass --force to replace it",
                    root.display()
                )));
            }
            fs::remove_dir_all(&root)?;
        }
        fs::create_dir_all(root.join("checkpoints"))?;
        fs::create_dir_all(root.join("curves"))?;
        let dir = RunDirectory { root };
        write_json(&dir.path("config.json"), &resolved)?;
        let meta = RunMeta {
            fingerprint: resolved.fingerprint()?,
            created_unix_seconds: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            package_version: env!("CARGO_PKG_VERSION").to_string(),
        };
        write_json(&dir.path("meta.json"), &meta)?;
        write_json(&dir.path("prompt_templates.json"), &prompt_templates())?;
        Ok(dir)
    }

    /// Open an existing run directory.
    pub fn open(out_dir: &Path, run_name: &str) -> Result<Self> {
        let root = out_dir.join(run_name);
        if !root.join("config.json").is_file() {
            return Err(Error::data(format!(
                "no run named '{run_name}' under {}; run gen-data first",
                out_dir.display()
            )));
        }
        Ok(RunDirectory { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn load_config(&self) -> Result<RunConfig> {
        let text = fs::read_to_string(self.path("config.json"))?;
        let config: RunConfig = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load_dataset(&self) -> Result<(DatasetSplit, DatasetSplit)> {
        let path = self.path("dataset.jsonl");
        if !path.is_file() {
            return Err(Error::data(format!(
                "{} is missing; run gen-data first",
                path.display()
            )));
        }
        let records: Vec<DatasetRecord> = read_jsonl(&path)?;
        world::splits_from_records(records)
    }

    pub fn load_best_params(&self) -> Result<CaptionerParams> {
        let path = self.path("checkpoints/best.json");
        if !path.is_file() {
            return Err(Error::data(format!(
                "{} is missing; run train first",
                path.display()
            )));
        }
        CaptionerParams::load(&path)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RunMeta {
    fingerprint: String,
    created_unix_seconds: u64,
    package_version: String,
}

// ==================== file helpers ====================

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|line| !line.trim().is_empty())
        .map(|line| Ok(serde_json::from_str(line)?))
        .collect()
}

// ==================== commands ====================

#[derive(Clone, Debug, Serialize)]
pub struct GenDataSummary {
    pub fingerprint: String,
    pub n_train_pairs: usize,
    pub n_eval_pairs: usize,
}

/// Generate the dataset for a fresh run directory.
pub fn gen_data(out_dir: &Path, config: &RunConfig, force: bool) -> Result<GenDataSummary> {
    let dir = RunDirectory::create(out_dir, config, force)?;
    let config = dir.load_config()?;
    let (train_split, eval_split) = world::generate_dataset(&config.world, config.world_seed())?;
    let records = world::dataset_records(&train_split, &eval_split);
    write_jsonl(&dir.path("dataset.jsonl"), &records)?;
    Ok(GenDataSummary {
        fingerprint: config.fingerprint()?,
        n_train_pairs: train_split.pairs.len(),
        n_eval_pairs: eval_split.pairs.len(),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub n_retained: usize,
    pub fine_tune_epochs: usize,
    pub train_epochs: usize,
    pub best_epoch: usize,
    pub best_mean_reward: f64,
}

/// Run both training stages: select and fine-tune on top-graded
/// captions, then reinforce with the retained set as the anchor term.
/// Writes the retained set, every epoch checkpoint, the best checkpoint,
/// the reward log and the per-epoch history.
pub fn train(dir: &RunDirectory) -> Result<TrainSummary> {
    let config = dir.load_config()?;
    let (train_split, _) = dir.load_dataset()?;
    let kb = KnowledgeBase::new(&config.world);
    let vocab = Vocabulary::standard(&config.world);
    let levels = config.levels()?;
    let params0 = CaptionerParams::for_world(&vocab, &config.captioner, config.captioner_seed())?;

    let set = adaptation::build_adaptation_set(
        &params0,
        &train_split,
        &kb,
        &vocab,
        &config.adaptation,
        &config.predictor,
        &levels,
        config.adaptation_seed(),
    )?;
    write_jsonl(&dir.path("adaptation_set.jsonl"), &set)?;
    let tuned = adaptation::fine_tune(
        &params0,
        &train_split,
        &set,
        &config.adaptation,
        config.adaptation_seed(),
    )?;

    let history = feedback::train(
        &tuned.params,
        &train_split,
        &set,
        &kb,
        &vocab,
        &config.train,
        &config.predictor,
        &levels,
        config.train_seed(),
    )?;
    for (epoch, params) in history.checkpoints.iter().enumerate() {
        params.save(&dir.path(&format!("checkpoints/epoch_{epoch:03}.json")))?;
    }
    history.best_params().save(&dir.path("checkpoints/best.json"))?;
    write_jsonl(&dir.path("rewards.jsonl"), &history.rewards)?;
    fs::write(dir.path("history.csv"), feedback::history_csv(&history))?;

    Ok(TrainSummary {
        n_retained: set.len(),
        fine_tune_epochs: tuned.epoch_losses.len(),
        train_epochs: history.epochs.len(),
        best_epoch: history.best_epoch,
        best_mean_reward: history.epochs[history.best_epoch].mean_reward,
    })
}

/// Score the best checkpoint on the labeled split. Writes the report and
/// one trace per question.
pub fn evaluate(dir: &RunDirectory) -> Result<EvalReport> {
    let config = dir.load_config()?;
    let (_, eval_split) = dir.load_dataset()?;
    let kb = KnowledgeBase::new(&config.world);
    let vocab = Vocabulary::standard(&config.world);
    let params = dir.load_best_params()?;
    let fingerprint = config.fingerprint()?;
    let outcome = evaluation::evaluate(
        &params,
        &eval_split,
        &kb,
        &vocab,
        &config.inference,
        &config.predictor,
        &fingerprint,
        config.eval_seed(),
    )?;
    write_jsonl(&dir.path("traces.jsonl"), &outcome.traces)?;
    write_json(&dir.path("report.json"), &outcome.report)?;
    Ok(outcome.report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub fingerprint: String,
    pub nll: NllCorrelation,
    pub grade_curve: Vec<GradeBucket>,
}

/// Diagnostics of the best checkpoint: the grade-quality curve and the
/// confidence correlation. Writes `analysis.json` and the curve CSV.
pub fn analyze(dir: &RunDirectory) -> Result<AnalysisReport> {
    let config = dir.load_config()?;
    let (_, eval_split) = dir.load_dataset()?;
    let kb = KnowledgeBase::new(&config.world);
    let vocab = Vocabulary::standard(&config.world);
    let levels = config.levels()?;
    let params = dir.load_best_params()?;
    let seed = config.analysis_seed();
    let grade_curve = evaluation::reliability_curve(
        &params,
        &eval_split,
        &kb,
        &vocab,
        &config.predictor,
        &levels,
        config.inference.top_k,
        config.inference.temperature,
        seed,
    )?;
    let nll = evaluation::nll_vqa_correlation(
        &params,
        &eval_split,
        &kb,
        &vocab,
        &config.predictor,
        config.inference.top_k,
        config.inference.temperature,
        seed,
    )?;
    let report = AnalysisReport {
        fingerprint: config.fingerprint()?,
        nll,
        grade_curve,
    };
    write_json(&dir.path("analysis.json"), &report)?;
    fs::write(
        dir.path("curves/grade_curve.csv"),
        evaluation::grade_curve_csv(&report.grade_curve),
    )?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub fingerprint: String,
    pub objectives: Vec<ObjectiveCell>,
    pub level_schemes: Vec<LevelsCell>,
    pub caption_counts: Vec<CaptionCountCell>,
}

/// Run the three sweeps configured under `eval` and write their tables.
/// Needs only the config; each sweep regenerates its own replicates.
pub fn ablate(dir: &RunDirectory) -> Result<AblationReport> {
    let config = dir.load_config()?;
    let objectives = evaluation::ablate_objectives(&config)?;
    let level_schemes = evaluation::ablate_levels(&config)?;
    let caption_counts = evaluation::ablate_caption_count(&config)?;
    let report = AblationReport {
        fingerprint: config.fingerprint()?,
        objectives,
        level_schemes,
        caption_counts,
    };
    write_json(&dir.path("ablations.json"), &report)?;
    fs::write(
        dir.path("curves/objective_grid.csv"),
        evaluation::objective_grid_csv(&report.objectives),
    )?;
    fs::write(
        dir.path("curves/level_schemes.csv"),
        evaluation::levels_csv(&report.level_schemes),
    )?;
    fs::write(
        dir.path("curves/caption_count.csv"),
        evaluation::caption_count_csv(&report.caption_counts),
    )?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(name: &str) -> RunConfig {
        let mut config = RunConfig {
            run_name: name.to_string(),
            seed: 5,
            ..RunConfig::default()
        };
        config.world.n_train_pairs = 8;
        config.world.n_eval_pairs = 10;
        config.world.max_objects = 10;
        config.captioner.embed_dim = 8;
        config.captioner.hidden_dim = 12;
        config.captioner.max_len = 8;
        config.adaptation.k_propositions = 2;
        config.adaptation.epochs = 1;
        config.adaptation.batch_size = 4;
        config.train.epochs = 2;
        config.train.batch_size = 4;
        config.train.warmup_steps = 3;
        config.inference.m_captions = 2;
        config.inference.top_k = 3;
        config.eval.seeds = vec![11];
        config.eval.reliability_levels = vec![1.0];
        config.eval.caption_counts = vec![1, 2];
        config.eval.level_variants = vec![2, 4];
        config
    }

    #[test]
    fn gen_data_refuses_to_clobber_without_force() {
        let tmp = tempfile::tempdir().unwrap();
        let config = tiny_config("clobber");
        gen_data(tmp.path(), &config, false).unwrap();
        let err = gen_data(tmp.path(), &config, false).unwrap_err();
        assert!(matches!(err, Error::Data(_)), "got {err:?}");
        assert!(err.to_string().contains("--force"));
        gen_data(tmp.path(), &config, true).unwrap();
    }

    #[test]
    fn stages_demand_their_prerequisites() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(matches!(
            RunDirectory::open(tmp.path(), "missing"),
            Err(Error::Data(_))
        ));

        let config = tiny_config("prereq");
        gen_data(tmp.path(), &config, false).unwrap();
        let dir = RunDirectory::open(tmp.path(), "prereq").unwrap();
        let err = evaluate(&dir).unwrap_err();
        assert!(err.to_string().contains("run train first"), "got {err}");

        // Wipe the dataset to make train demand gen-data.
        fs::remove_file(dir.path("dataset.jsonl")).unwrap();
        let err = train(&dir).unwrap_err();
        assert!(err.to_string().contains("run gen-data first"), "got {err}");
    }

    #[test]
    fn full_run_writes_every_artifact() {
        let tmp = tempfile::tempdir().unwrap();
        let config = tiny_config("full");
        let summary = gen_data(tmp.path(), &config, false).unwrap();
        assert_eq!(summary.n_train_pairs, 8);
        assert_eq!(summary.n_eval_pairs, 10);

        let dir = RunDirectory::open(tmp.path(), "full").unwrap();
        let trained = train(&dir).unwrap();
        assert!(trained.n_retained <= 8 * config.adaptation.k_propositions);
        assert!(trained.best_epoch < trained.train_epochs);

        let report = evaluate(&dir).unwrap();
        assert_eq!(report.n_questions, 10);
        let analysis = analyze(&dir).unwrap();
        assert_eq!(analysis.fingerprint, report.fingerprint);

        for name in [
            "config.json",
            "meta.json",
            "prompt_templates.json",
            "dataset.jsonl",
            "adaptation_set.jsonl",
            "checkpoints/epoch_000.json",
            "checkpoints/epoch_001.json",
            "checkpoints/best.json",
            "rewards.jsonl",
            "history.csv",
            "traces.jsonl",
            "report.json",
            "analysis.json",
            "curves/grade_curve.csv",
        ] {
            assert!(dir.path(name).is_file(), "missing artifact {name}");
        }
        // Two epochs produce exactly two epoch checkpoints.
        assert!(!dir.path("checkpoints/epoch_002.json").exists());

        let history = fs::read_to_string(dir.path("history.csv")).unwrap();
        assert!(history.starts_with("epoch,mean_reward,mean_ft_loss,mean_rl_loss\n"));
        assert_eq!(history.lines().count(), 1 + trained.train_epochs);
    }

    #[test]
    fn reruns_reproduce_artifacts_byte_for_byte() {
        let tmp = tempfile::tempdir().unwrap();
        let config = tiny_config("repro");
        gen_data(tmp.path(), &config, false).unwrap();
        let dir = RunDirectory::open(tmp.path(), "repro").unwrap();
        train(&dir).unwrap();
        evaluate(&dir).unwrap();
        let first: Vec<(String, Vec<u8>)> = ["dataset.jsonl", "history.csv", "report.json"]
            .iter()
            .map(|n| (n.to_string(), fs::read(dir.path(n)).unwrap()))
            .collect();

        gen_data(tmp.path(), &config, true).unwrap();
        train(&dir).unwrap();
        evaluate(&dir).unwrap();
        for (name, bytes) in first {
            assert_eq!(
                fs::read(dir.path(&name)).unwrap(),
                bytes,
                "{name} changed across identical reruns"
            );
        }
    }

    #[test]
    fn ablate_writes_tables_from_config_alone() {
        let tmp = tempfile::tempdir().unwrap();
        let config = tiny_config("sweeps");
        gen_data(tmp.path(), &config, false).unwrap();
        let dir = RunDirectory::open(tmp.path(), "sweeps").unwrap();
        let report = ablate(&dir).unwrap();
        assert_eq!(report.objectives.len(), 5);
        assert_eq!(report.level_schemes.len(), 2);
        assert_eq!(report.caption_counts.len(), 2);
        for name in [
            "ablations.json",
            "curves/objective_grid.csv",
            "curves/level_schemes.csv",
            "curves/caption_count.csv",
        ] {
            assert!(dir.path(name).is_file(), "missing artifact {name}");
        }
    }
}
