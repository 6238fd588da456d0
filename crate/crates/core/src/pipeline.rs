//! Config-driven end-to-end runs: data generation, training of every
//! experiment cell, evaluation and the ablation report bundle.
//!
//! All seeds used anywhere in a run are derived from `master_seed`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{CodecError, Vocabulary};
use crate::decode::{DecodePolicy, GoalMode};
use crate::engine::{bundled_game, bundled_names, load_game_file, EngineError, GameSpec};
use crate::goals::{normalized_goals, GoalError, GoalStrategy};
use crate::harness::{self, evaluate, evaluate_model, EvalReport, RandomAgent, SweepTable};
use crate::model::{train, Checkpoint, CheckpointError, ModelConfig, ModelError, TrainConfig, TrainError, TrainingSet};
use crate::seeds;
use crate::trajectory::{dataset_stats, generate_dataset, read_store, write_stats, write_store, DataConfig, DataError, DatasetManifest, TrajectoryStore};

pub const DESK_CONFIG: &str = include_str!("../configs/desk.toml");
pub const VOCAB_FILE: &str = "vocab.json";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const IL_RUN: &str = "IL";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),
    #[error("missing dataset at {0}; run gen-data first")]
    MissingDataset(String),
    #[error("checkpoint {path} was trained with vocabulary {found}, dataset has {expected}")]
    VocabMismatch { path: String, found: String, expected: String },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Goal(#[from] GoalError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl PipelineError {
    /// Stable machine-readable error code.
    pub fn code(&self) -> &'static str {
        match self {
            PipelineError::Config(_) | PipelineError::Goal(_) => "E_CONFIG",
            PipelineError::Io { .. } => "E_IO",
            PipelineError::MissingCheckpoint(_) | PipelineError::Checkpoint(_) => "E_CHECKPOINT",
            PipelineError::MissingDataset(_) => "E_DATASET",
            PipelineError::VocabMismatch { .. } => "E_VOCAB",
            PipelineError::Engine(_) => "E_GAME",
            PipelineError::Data(_) | PipelineError::Codec(_) => "E_DATA",
            PipelineError::Model(_) => "E_MODEL",
            PipelineError::Train(_) => "E_TRAIN",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub strategies: Vec<GoalStrategy>,
    pub lambdas: Vec<f64>,
    /// Epochs for the walkthrough-only baseline, whose dataset is much
    /// smaller than the full one.
    pub il_epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub seeds: Vec<u64>,
    pub alphas: Vec<f64>,
    /// Harness step cap; the game's own cap still applies.
    pub step_cap: Option<u32>,
    /// Alpha used for the strategy and lambda tables and the IL baseline.
    pub table_alpha: f64,
    /// Number of checkpoints (evenly spaced, ending with the final one)
    /// in the tilt sweep.
    pub sweep_checkpoints: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub master_seed: u64,
    /// Bundled game names or paths to game spec files.
    pub games: Vec<String>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub experiments: ExperimentConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig, PipelineError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file; relative paths inside it are resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<RunConfig, PipelineError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.rebase(base);
        Ok(cfg)
    }

    /// The bundled desk-scale config with its outputs under `root`.
    pub fn desk(root: &Path) -> RunConfig {
        let mut cfg = Self::parse(DESK_CONFIG).expect("bundled config is valid");
        cfg.rebase(root);
        cfg
    }

    pub fn rebase(&mut self, base: &Path) {
        for p in [&mut self.paths.data_dir, &mut self.paths.checkpoint_dir, &mut self.paths.report_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        for g in &mut self.games {
            if g.ends_with(".toml") && Path::new(g).is_relative() {
                *g = base.join(&*g).display().to_string();
            }
        }
    }

    fn validate(&self) -> Result<(), PipelineError> {
        let err = |m: String| Err(PipelineError::Config(m));
        if self.games.is_empty() {
            return err("games must be non-empty".into());
        }
        if self.experiments.strategies.is_empty() || self.experiments.lambdas.is_empty() {
            return err("experiments need at least one strategy and one lambda".into());
        }
        if let Some(l) = self.experiments.lambdas.iter().find(|l| !(**l >= 0.0)) {
            return err(format!("lambda {l} must be non-negative"));
        }
        if self.eval.seeds.is_empty() {
            return err("eval.seeds must be non-empty".into());
        }
        if let Some(a) = self.eval.alphas.iter().find(|a| !(**a >= 0.0)) {
            return err(format!("alpha {a} must be non-negative"));
        }
        if self.eval.sweep_checkpoints == 0 {
            return err("eval.sweep_checkpoints must be positive".into());
        }
        self.train.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn with_master_seed(mut self, seed: u64) -> RunConfig {
        self.master_seed = seed;
        self
    }

    /// Model initialization seed, shared by every experiment cell so that
    /// cells differ only in what they vary.
    pub fn init_seed(&self) -> u64 {
        seeds::derive(self.master_seed, &[seeds::label("init")])
    }

    pub fn shuffle_seed(&self) -> u64 {
        seeds::derive(self.master_seed, &[seeds::label("shuffle")])
    }
}

pub fn load_games(cfg: &RunConfig) -> Result<Vec<Arc<GameSpec>>, PipelineError> {
    cfg.games
        .iter()
        .map(|g| {
            if bundled_names().contains(&g.as_str()) {
                Ok(bundled_game(g)?)
            } else if g.ends_with(".toml") {
                Ok(Arc::new(load_game_file(Path::new(g))?))
            } else {
                Err(PipelineError::Config(format!(
                    "unknown game {g:?}; bundled games are {}",
                    bundled_names().join(", ")
                )))
            }
        })
        .collect()
}

fn write_file(path: &Path, text: &str) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

// ---------------------------------------------------------------------------
// Data

pub struct DataSummary {
    pub manifest: DatasetManifest,
    pub vocab_size: usize,
    pub vocab_version: String,
}

/// Generates and stores the dataset, the vocabulary and the dataset
/// statistics.
pub fn gen_data(cfg: &RunConfig) -> Result<DataSummary, PipelineError> {
    let games = load_games(cfg)?;
    let (store, manifest) = generate_dataset(&games, &cfg.data, cfg.master_seed)?;
    write_store(&cfg.paths.data_dir, &store, &manifest)?;
    let vocab = Vocabulary::for_games(&games);
    vocab.save(&cfg.paths.data_dir.join(VOCAB_FILE))?;
    let max_scores: BTreeMap<String, i64> = games.iter().map(|g| (g.name.clone(), g.max_score)).collect();
    write_stats(&cfg.paths.report_dir.join("data"), &dataset_stats(&store, &max_scores))?;
    log::info!("generated {} trajectories", manifest.trajectory_count);
    Ok(DataSummary {
        manifest,
        vocab_size: vocab.len(),
        vocab_version: vocab.version(),
    })
}

pub fn load_dataset(cfg: &RunConfig) -> Result<(TrajectoryStore, DatasetManifest, Vocabulary), PipelineError> {
    let dir = &cfg.paths.data_dir;
    if !dir.join(crate::trajectory::MANIFEST_FILE).exists() {
        return Err(PipelineError::MissingDataset(dir.display().to_string()));
    }
    let (store, manifest) = read_store(dir)?;
    let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
    Ok((store, manifest, vocab))
}

// ---------------------------------------------------------------------------
// Training

/// One trained model: a goal strategy and lambda on the full dataset, or the
/// walkthrough-only imitation baseline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cell {
    Model { strategy: GoalStrategy, lambda: f64 },
    Imitation,
}

impl Cell {
    pub fn name(&self) -> String {
        match self {
            Cell::Model { strategy, lambda } => format!("{}-lambda{lambda}", strategy.name()),
            Cell::Imitation => IL_RUN.to_string(),
        }
    }
}

pub fn cells(cfg: &RunConfig) -> Vec<Cell> {
    let mut out = Vec::new();
    for &lambda in &cfg.experiments.lambdas {
        for &strategy in &cfg.experiments.strategies {
            out.push(Cell::Model { strategy, lambda });
        }
    }
    out.push(Cell::Imitation);
    out
}

pub fn run_dir(cfg: &RunConfig, cell: &Cell) -> PathBuf {
    cfg.paths.checkpoint_dir.join(cell.name())
}

/// Trains one cell, writing `step-NNNNNN.ckpt` files at the configured
/// cadence, `final.ckpt` and `metrics.jsonl`.
pub fn train_cell(cfg: &RunConfig, cell: &Cell) -> Result<Checkpoint, PipelineError> {
    let (store, _, vocab) = load_dataset(cfg)?;
    let games = load_games(cfg)?;
    let max_score = |name: &str| games.iter().find(|g| g.name == name).map(|g| g.max_score);
    let (store, strategy, lambda, epochs) = match *cell {
        Cell::Model { strategy, lambda } => (store, strategy, lambda, cfg.train.epochs),
        Cell::Imitation => (store.walkthroughs_only(), GoalStrategy::ReturnToGo, cfg.train.lambda, cfg.experiments.il_epochs),
    };
    let mut data = Vec::new();
    for t in store.iter() {
        let max = max_score(&t.game).ok_or_else(|| PipelineError::Config(format!("dataset game {} is not configured", t.game)))?;
        data.push((t, normalized_goals(&t.rewards(), strategy, max)?));
    }
    let model_cfg = ModelConfig {
        vocab_size: vocab.len(),
        init_seed: cfg.init_seed(),
        ..cfg.model.clone()
    };
    let set = TrainingSet::from_trajectories(&vocab, &data, model_cfg.max_input_tokens, model_cfg.max_output_tokens)?;
    let train_cfg = TrainConfig {
        lambda,
        epochs,
        shuffle_seed: cfg.shuffle_seed(),
        ..cfg.train.clone()
    };
    let dir = run_dir(cfg, cell);
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
    }
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let metrics_path = dir.join("metrics.jsonl");
    let mut metrics = std::io::BufWriter::new(fs::File::create(&metrics_path).map_err(io_err(&metrics_path))?);
    let mut ckpt = Checkpoint::fresh(model_cfg, vocab.version())?;
    log::info!("training {} on {} trajectories ({} pairs)", cell.name(), set.len(), set.pair_count());
    train(
        &mut ckpt,
        &set,
        &train_cfg,
        &mut |m| {
            let line = serde_json::to_string(m).expect("metrics serialize");
            writeln!(metrics, "{line}").map_err(|e| e.to_string())?;
            if m.step % 50 == 0 {
                log::debug!("{} step {} loss {:.4}", cell.name(), m.step, m.loss);
            }
            Ok(())
        },
        &mut |c| c.save(&dir.join(format!("step-{:06}.ckpt", c.step))).map_err(|e| e.to_string()),
    )?;
    metrics.flush().map_err(io_err(&metrics_path))?;
    ckpt.save(&dir.join(FINAL_CHECKPOINT))?;
    Ok(ckpt)
}

pub fn train_all(cfg: &RunConfig) -> Result<(), PipelineError> {
    for cell in cells(cfg) {
        train_cell(cfg, &cell)?;
    }
    Ok(())
}

/// Intermediate checkpoints of a run, ordered by step.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<(u64, PathBuf)>, PipelineError> {
    let entries = fs::read_dir(dir).map_err(|_| PipelineError::MissingCheckpoint(dir.display().to_string()))?;
    let mut out = Vec::new();
    for e in entries {
        let path = e.map_err(io_err(dir))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if let Some(step) = name.strip_prefix("step-").and_then(|s| s.strip_suffix(".ckpt")) {
            if let Ok(step) = step.parse() {
                out.push((step, path));
            }
        }
    }
    out.sort();
    Ok(out)
}

/// `n` evenly spaced entries ending with the last one.
fn spaced<T: Clone>(items: &[T], n: usize) -> Vec<T> {
    if items.len() <= n {
        return items.to_vec();
    }
    let last = items.len() - 1;
    let mut idx: Vec<usize> = (1..=n).map(|k| (k * last + n - 1) / n).collect();
    idx.dedup();
    idx.iter().map(|&i| items[i].clone()).collect()
}

pub fn load_checkpoint(path: &Path, vocab: &Vocabulary) -> Result<Checkpoint, PipelineError> {
    if !path.exists() {
        return Err(PipelineError::MissingCheckpoint(path.display().to_string()));
    }
    let ckpt = Checkpoint::load(path)?;
    if ckpt.vocab_version != vocab.version() {
        return Err(PipelineError::VocabMismatch {
            path: path.display().to_string(),
            found: ckpt.vocab_version,
            expected: vocab.version(),
        });
    }
    Ok(ckpt)
}

// ---------------------------------------------------------------------------
// Evaluation

pub fn policy_label(mode: &GoalMode) -> String {
    mode.to_string().replace(':', "")
}

/// Evaluates one checkpoint file and writes its report under
/// `report_dir/eval`.
pub fn eval_checkpoint(cfg: &RunConfig, path: &Path, policy: DecodePolicy) -> Result<EvalReport, PipelineError> {
    let (_, _, vocab) = load_dataset(cfg)?;
    let games = load_games(cfg)?;
    let ckpt = load_checkpoint(path, &vocab)?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint");
    let run = path.parent().and_then(|p| p.file_name()).and_then(|s| s.to_str()).unwrap_or("run");
    let label = format!("{run}.{stem}.{}", policy_label(&policy.mode));
    let report = evaluate_model(&label, &ckpt.model, &vocab, policy, &games, &cfg.eval.seeds, cfg.eval.step_cap);
    harness::write_report(&cfg.paths.report_dir.join("eval"), &report)?;
    Ok(report)
}

/// Uniform-random policy over candidate actions.
pub fn random_baseline(cfg: &RunConfig, games: &[Arc<GameSpec>]) -> EvalReport {
    let master = cfg.master_seed;
    evaluate("random", games, &cfg.eval.seeds, cfg.eval.step_cap, |g, seed| {
        Box::new(RandomAgent::new(seeds::derive(master, &[seeds::label("random"), seeds::label(&g.name), seed])))
    })
}

/// Everything produced by [`report`].
pub struct AblationBundle {
    pub sweep: SweepTable,
    /// Every evaluation, keyed by label.
    pub reports: BTreeMap<String, EvalReport>,
}

impl AblationBundle {
    pub fn get(&self, label: &str) -> &EvalReport {
        &self.reports[label]
    }
}

pub fn sweep_label(checkpoint: &str, mode: &GoalMode) -> String {
    format!("sweep.{checkpoint}.{}", policy_label(mode))
}

pub fn table_label(cell: &Cell) -> String {
    format!("table.{}", cell.name())
}

/// Runs the ablations and baselines on trained checkpoints and writes:
/// `tilt_sweep.csv`, `strategy_table.csv`, `lambda_table.csv`,
/// `baselines.csv`, plus per-evaluation reports and traces.
pub fn report(cfg: &RunConfig) -> Result<AblationBundle, PipelineError> {
    let (_, _, vocab) = load_dataset(cfg)?;
    let games = load_games(cfg)?;
    let out = &cfg.paths.report_dir;
    let mut reports = BTreeMap::new();
    let mut keep = |r: EvalReport| -> Result<EvalReport, PipelineError> {
        harness::write_report(&out.join("runs"), &r)?;
        reports.insert(r.label.clone(), r.clone());
        Ok(r)
    };

    // Tilt sweep over the main cell's checkpoints.
    let main = Cell::Model {
        strategy: cfg.experiments.strategies[0],
        lambda: *cfg.experiments.lambdas.iter().find(|&&l| l > 0.0).unwrap_or(&cfg.experiments.lambdas[0]),
    };
    let ckpts = spaced(&list_checkpoints(&run_dir(cfg, &main))?, cfg.eval.sweep_checkpoints);
    if ckpts.is_empty() {
        return Err(PipelineError::MissingCheckpoint(run_dir(cfg, &main).display().to_string()));
    }
    let mut modes: Vec<GoalMode> = cfg.eval.alphas.iter().map(|&alpha| GoalMode::PredictedTilt { alpha }).collect();
    modes.push(GoalMode::OptimalManual);
    let mut sweep = SweepTable {
        columns: modes.iter().map(|m| m.to_string()).collect(),
        rows: Vec::new(),
    };
    for (step, path) in &ckpts {
        let ckpt = load_checkpoint(path, &vocab)?;
        let name = format!("{}.step{step}", main.name());
        let mut row = Vec::new();
        for mode in &modes {
            let r = evaluate_model(&sweep_label(&name, mode), &ckpt.model, &vocab, DecodePolicy::new(*mode), &games, &cfg.eval.seeds, cfg.eval.step_cap);
            row.push(keep(r)?.normalized_average);
        }
        sweep.rows.push((name, row));
    }
    write_file(&out.join("tilt_sweep.csv"), &sweep.to_csv())?;

    // Strategy and lambda tables at the table alpha.
    let table_mode = GoalMode::PredictedTilt { alpha: cfg.eval.table_alpha };
    let mut by_lambda: Vec<(String, Vec<EvalReport>)> = Vec::new();
    for &lambda in &cfg.experiments.lambdas {
        let mut row = Vec::new();
        for &strategy in &cfg.experiments.strategies {
            let cell = Cell::Model { strategy, lambda };
            let ckpt = load_checkpoint(&run_dir(cfg, &cell).join(FINAL_CHECKPOINT), &vocab)?;
            let r = evaluate_model(&table_label(&cell), &ckpt.model, &vocab, DecodePolicy::new(table_mode), &games, &cfg.eval.seeds, cfg.eval.step_cap);
            row.push(keep(r)?);
        }
        if lambda == main_lambda(&main) {
            let named: Vec<(&str, &EvalReport)> = cfg.experiments.strategies.iter().map(|s| s.name()).zip(row.iter()).collect();
            write_file(&out.join("strategy_table.csv"), &harness::strategy_table_csv(&named))?;
        }
        by_lambda.push((format!("lambda={lambda}"), row));
    }
    let pooled: Vec<EvalReport> = by_lambda
        .iter()
        .map(|(name, rs)| harness::pool(name, &rs.iter().collect::<Vec<_>>()))
        .collect();
    let named: Vec<(&str, &EvalReport)> = pooled.iter().map(|r| (r.label.as_str(), r)).collect();
    write_file(&out.join("lambda_table.csv"), &harness::strategy_table_csv(&named))?;
    for r in pooled {
        keep(r)?;
    }

    // Baselines.
    let random = keep(random_baseline(cfg, &games))?;
    let il = load_checkpoint(&run_dir(cfg, &Cell::Imitation).join(FINAL_CHECKPOINT), &vocab)?;
    let il = keep(evaluate_model(IL_RUN, &il.model, &vocab, DecodePolicy::new(table_mode), &games, &cfg.eval.seeds, cfg.eval.step_cap))?;
    let main_final = load_checkpoint(&run_dir(cfg, &main).join(FINAL_CHECKPOINT), &vocab)?;
    let optimal = keep(evaluate_model(
        &format!("{}.optimal", main.name()),
        &main_final.model,
        &vocab,
        DecodePolicy::new(GoalMode::OptimalManual),
        &games,
        &cfg.eval.seeds,
        cfg.eval.step_cap,
    ))?;
    let main_table = reports[&table_label(&main)].clone();
    write_file(
        &out.join("baselines.csv"),
        &harness::strategy_table_csv(&[
            ("random", &random),
            ("IL", &il),
            (&main.name(), &main_table),
            ("optimal", &optimal),
        ]),
    )?;
    Ok(AblationBundle { sweep, reports })
}

fn main_lambda(cell: &Cell) -> f64 {
    match cell {
        Cell::Model { lambda, .. } => *lambda,
        Cell::Imitation => 0.0,
    }
}

/// `gen-data`, `train`, then `report`.
pub fn reproduce(cfg: &RunConfig) -> Result<(DataSummary, AblationBundle), PipelineError> {
    let summary = gen_data(cfg)?;
    train_all(cfg)?;
    let bundle = report(cfg)?;
    Ok((summary, bundle))
}
