//! Offline trajectory generation: follow a walkthrough for a fraction of its
//! length, then act uniformly at random over the candidate actions.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{EngineError, EngineState, GameSpec, Observation};
use crate::seeds;

/// Fraction label used for pure walkthrough trajectories.
pub const WALKTHROUGH_FRACTION: u32 = 100;

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record in {path} line {line}: {message}")]
    Format {
        path: String,
        line: usize,
        message: String,
    },
    #[error("invalid data config: {0}")]
    Config(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub observation: Observation,
    pub action: String,
    pub reward: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub game: String,
    pub seed: u64,
    /// Percentage of the walkthrough followed before random play; 100 marks
    /// the pure walkthrough.
    pub walkthrough_fraction: u32,
    pub repeat: u32,
    pub steps: Vec<Step>,
    pub final_score: i64,
    pub terminal: bool,
}

impl Trajectory {
    pub fn rewards(&self) -> Vec<i64> {
        self.steps.iter().map(|s| s.reward).collect()
    }

    pub fn actions(&self) -> Vec<&str> {
        self.steps.iter().map(|s| s.action.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Records (observation, action, reward) steps of one episode.
struct Recorder {
    state: EngineState,
    obs: Observation,
    steps: Vec<Step>,
}

impl Recorder {
    fn new(game: &Arc<GameSpec>, seed: u64) -> Self {
        let (state, obs) = EngineState::reset(Arc::clone(game), seed);
        Recorder {
            state,
            obs,
            steps: Vec::new(),
        }
    }

    fn act(&mut self, action: &str) -> Result<(), EngineError> {
        let (next, out) = self.state.step(action)?;
        self.steps.push(Step {
            observation: std::mem::replace(&mut self.obs, next),
            action: action.to_string(),
            reward: out.reward,
        });
        Ok(())
    }

    fn finish(self, seed: u64, fraction: u32, repeat: u32) -> Trajectory {
        Trajectory {
            game: self.state.game.name.clone(),
            seed,
            walkthrough_fraction: fraction,
            repeat,
            final_score: self.steps.iter().map(|s| s.reward).sum(),
            terminal: self.state.reached_end,
            steps: self.steps,
        }
    }
}

/// Number of walkthrough actions followed for a fraction `x` percent.
pub fn prefix_len(walkthrough_len: usize, fraction: u32) -> usize {
    walkthrough_len * fraction as usize / 100
}

/// Follows the first `fraction`% of the walkthrough, then takes up to
/// `random_steps` actions drawn uniformly from the candidate list.
pub fn generate_perturbed<R: Rng>(
    game: &Arc<GameSpec>,
    seed: u64,
    fraction: u32,
    random_steps: u32,
    rng: &mut R,
) -> Result<Trajectory, EngineError> {
    debug_assert!(fraction < 100);
    let mut rec = Recorder::new(game, seed);
    for action in &game.walkthrough[..prefix_len(game.walkthrough.len(), fraction)] {
        if rec.state.done {
            break;
        }
        rec.act(action)?;
    }
    for _ in 0..random_steps {
        if rec.state.done {
            break;
        }
        let Some(action) = rec.obs.candidate_actions.choose(rng).cloned() else {
            break;
        };
        rec.act(&action)?;
    }
    Ok(rec.finish(seed, fraction, 0))
}

/// Replays the full walkthrough under `seed`.
pub fn generate_walkthrough(game: &Arc<GameSpec>, seed: u64) -> Result<Trajectory, EngineError> {
    let mut rec = Recorder::new(game, seed);
    for action in &game.walkthrough {
        if rec.state.done {
            break;
        }
        rec.act(action)?;
    }
    Ok(rec.finish(seed, WALKTHROUGH_FRACTION, 0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub fractions: Vec<u32>,
    pub repeats: u32,
    pub seeds: Vec<u64>,
    pub random_steps: u32,
}

impl DataConfig {
    /// Full-scale collection protocol: 20 fractions, 10 repeats, 5 seeds,
    /// 100 random steps.
    pub fn full_protocol() -> Self {
        DataConfig {
            fractions: (0..20).map(|i| i * 5).collect(),
            repeats: 10,
            seeds: (0..5).collect(),
            random_steps: 100,
        }
    }

    pub fn per_game_count(&self) -> usize {
        self.seeds.len() * (self.fractions.len() * self.repeats as usize + 1)
    }

    fn validate(&self) -> Result<(), DataError> {
        if self.fractions.is_empty() {
            return Err(DataError::Config("fractions must be non-empty".into()));
        }
        if self.repeats == 0 {
            return Err(DataError::Config("repeats must be at least 1".into()));
        }
        if let Some(f) = self.fractions.iter().find(|&&f| f >= 100) {
            return Err(DataError::Config(format!("fraction {f} must be below 100")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub games: Vec<String>,
    pub fractions: Vec<u32>,
    pub repeats_per_fraction: u32,
    pub seeds: Vec<u64>,
    pub random_steps: u32,
    pub master_seed: u64,
    pub trajectory_count: usize,
    pub per_game: BTreeMap<String, usize>,
}

/// Trajectories grouped by game, each group sorted by
/// (seed, fraction, repeat).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryStore {
    pub by_game: BTreeMap<String, Vec<Trajectory>>,
}

impl TrajectoryStore {
    pub fn len(&self) -> usize {
        self.by_game.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &Trajectory> {
        self.by_game.values().flatten()
    }

    fn insert_sorted(&mut self, mut trajectories: Vec<Trajectory>) {
        trajectories.sort_by(|a, b| {
            (&a.game, a.seed, a.walkthrough_fraction, a.repeat)
                .cmp(&(&b.game, b.seed, b.walkthrough_fraction, b.repeat))
        });
        for t in trajectories {
            self.by_game.entry(t.game.clone()).or_default().push(t);
        }
    }

    /// Only the pure walkthrough trajectories.
    pub fn walkthroughs_only(&self) -> TrajectoryStore {
        let mut out = TrajectoryStore::default();
        out.insert_sorted(
            self.iter()
                .filter(|t| t.walkthrough_fraction == WALKTHROUGH_FRACTION)
                .cloned()
                .collect(),
        );
        out
    }
}

/// Generates the full corpus. Output is a pure function of the games, the
/// config and `master_seed`, independent of thread scheduling.
pub fn generate_dataset(
    games: &[Arc<GameSpec>],
    config: &DataConfig,
    master_seed: u64,
) -> Result<(TrajectoryStore, DatasetManifest), DataError> {
    config.validate()?;
    let mut tasks = Vec::new();
    for game in games {
        for &seed in &config.seeds {
            tasks.push((Arc::clone(game), seed, None));
            for &fraction in &config.fractions {
                for repeat in 0..config.repeats {
                    tasks.push((Arc::clone(game), seed, Some((fraction, repeat))));
                }
            }
        }
    }
    let trajectories = tasks
        .into_par_iter()
        .map(|(game, seed, perturb)| match perturb {
            None => generate_walkthrough(&game, seed),
            Some((fraction, repeat)) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(
                    master_seed,
                    &[seeds::label(&game.name), seed, fraction as u64, repeat as u64],
                ));
                let mut t = generate_perturbed(&game, seed, fraction, config.random_steps, &mut rng)?;
                t.repeat = repeat;
                Ok(t)
            }
        })
        .collect::<Result<Vec<_>, EngineError>>()?;

    let mut store = TrajectoryStore::default();
    store.insert_sorted(trajectories);
    let manifest = DatasetManifest {
        games: games.iter().map(|g| g.name.clone()).collect(),
        fractions: config.fractions.clone(),
        repeats_per_fraction: config.repeats,
        seeds: config.seeds.clone(),
        random_steps: config.random_steps,
        master_seed,
        trajectory_count: store.len(),
        per_game: store.by_game.iter().map(|(g, v)| (g.clone(), v.len())).collect(),
    };
    Ok((store, manifest))
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes one JSON-lines file per game plus the manifest.
pub fn write_store(dir: &Path, store: &TrajectoryStore, manifest: &DatasetManifest) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (game, trajectories) in &store.by_game {
        let path = dir.join(format!("{game}.jsonl"));
        let file = fs::File::create(&path).map_err(io_err(&path))?;
        let mut w = BufWriter::new(file);
        for t in trajectories {
            let line = serde_json::to_string(t).expect("trajectory serializes");
            writeln!(w, "{line}").map_err(io_err(&path))?;
        }
        w.flush().map_err(io_err(&path))?;
    }
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(io_err(&path))?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest, DataError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| DataError::Format {
        path: path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })
}

pub fn read_store(dir: &Path) -> Result<(TrajectoryStore, DatasetManifest), DataError> {
    let manifest = read_manifest(dir)?;
    let mut store = TrajectoryStore::default();
    for game in &manifest.games {
        let path = dir.join(format!("{game}.jsonl"));
        let file = fs::File::open(&path).map_err(io_err(&path))?;
        let mut v = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io_err(&path))?;
            if line.trim().is_empty() {
                continue;
            }
            v.push(serde_json::from_str(&line).map_err(|e| DataError::Format {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })?);
        }
        store.by_game.insert(game.clone(), v);
    }
    Ok((store, manifest))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    /// Lower edge of each bin.
    pub edges: Vec<f64>,
    pub proportions: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GameStats {
    pub game: String,
    pub trajectories: usize,
    /// Normalized final score, bins of width 0.1; the last bin holds exactly 1.0.
    pub scores: Histogram,
    /// Trajectory length in steps, bins of width `LENGTH_BIN`.
    pub lengths: Histogram,
}

pub const LENGTH_BIN: usize = 10;

fn histogram(bins: &[usize], n_bins: usize, edge: impl Fn(usize) -> f64) -> Histogram {
    let mut counts = vec![0usize; n_bins];
    for &b in bins {
        counts[b] += 1;
    }
    let total = bins.len() as f64;
    Histogram {
        edges: (0..n_bins).map(edge).collect(),
        proportions: counts.iter().map(|&c| c as f64 / total).collect(),
    }
}

/// Per-game histograms of normalized final score and length.
pub fn dataset_stats(store: &TrajectoryStore, max_scores: &BTreeMap<String, i64>) -> Vec<GameStats> {
    store
        .by_game
        .iter()
        .filter(|(_, v)| !v.is_empty())
        .map(|(game, trajectories)| {
            let max = max_scores[game] as f64;
            let score_bins: Vec<usize> = trajectories
                .iter()
                .map(|t| ((t.final_score as f64 / max * 10.0).floor() as usize).min(10))
                .collect();
            let len_bins: Vec<usize> = trajectories.iter().map(|t| t.len() / LENGTH_BIN).collect();
            let n_len = len_bins.iter().max().copied().unwrap_or(0) + 1;
            GameStats {
                game: game.clone(),
                trajectories: trajectories.len(),
                scores: histogram(&score_bins, 11, |b| b as f64 / 10.0),
                lengths: histogram(&len_bins, n_len, |b| (b * LENGTH_BIN) as f64),
            }
        })
        .collect()
}

/// Writes `score_histogram.csv` and `length_histogram.csv` under `dir`.
pub fn write_stats(dir: &Path, stats: &[GameStats]) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut scores = String::from("game,bin_lower,proportion\n");
    let mut lengths = String::from("game,bin_lower,proportion\n");
    for s in stats {
        for (e, p) in s.scores.edges.iter().zip(&s.scores.proportions) {
            scores.push_str(&format!("{},{e:.1},{p:.6}\n", s.game));
        }
        for (e, p) in s.lengths.edges.iter().zip(&s.lengths.proportions) {
            lengths.push_str(&format!("{},{e},{p:.6}\n", s.game));
        }
    }
    for (name, body) in [("score_histogram.csv", scores), ("length_histogram.csv", lengths)] {
        let path = dir.join(name);
        fs::write(&path, body).map_err(io_err(&path))?;
    }
    Ok(())
}
