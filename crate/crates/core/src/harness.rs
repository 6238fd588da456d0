//! Closed-loop evaluation: rollouts, score aggregation and report tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use num_rational::Rational64;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{encode_context, Vocabulary};
use crate::decode::{decode_step, optimal_goal, DecodePolicy, GoalDistribution, GoalMode};
use crate::engine::{EngineState, GameSpec, Observation};
use crate::goals::optimal_gc_update;
use crate::model::Seq2Seq;
use crate::trajectory::{DataError, Step, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    GameEnd,
    InvalidSequence,
    StepCap,
}

/// What an agent sees before choosing its next action.
pub struct RolloutView<'a> {
    pub game: &'a GameSpec,
    /// `o_0..=o_t`.
    pub observations: &'a [Observation],
    /// Goals chosen at steps `0..t`.
    pub goals: &'a [u8],
    pub actions: &'a [String],
}

impl RolloutView<'_> {
    pub fn current(&self) -> &Observation {
        self.observations.last().expect("at least o_0")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub goal: u8,
    pub action: String,
}

pub trait Agent {
    /// Next goal and action, or `None` when no valid output was produced.
    fn decide(&mut self, view: &RolloutView) -> Option<Decision>;

    /// Called with the reward of each executed action.
    fn observe_reward(&mut self, _reward: i64, _max_score: i64) {}
}

/// Replays a fixed action list, optionally cycling; reports goal 0.
pub struct ScriptAgent {
    actions: Vec<String>,
    cycle: bool,
    next: usize,
}

impl ScriptAgent {
    pub fn new(actions: Vec<String>) -> Self {
        ScriptAgent {
            actions,
            cycle: false,
            next: 0,
        }
    }

    pub fn cycling(actions: Vec<String>) -> Self {
        ScriptAgent {
            cycle: true,
            ..Self::new(actions)
        }
    }
}

impl Agent for ScriptAgent {
    fn decide(&mut self, _view: &RolloutView) -> Option<Decision> {
        if self.actions.is_empty() || (!self.cycle && self.next >= self.actions.len()) {
            return None;
        }
        let action = self.actions[self.next % self.actions.len()].clone();
        self.next += 1;
        Some(Decision { goal: 0, action })
    }
}

/// Uniform choice among the current candidate actions.
pub struct RandomAgent {
    rng: ChaCha8Rng,
}

impl RandomAgent {
    pub fn new(seed: u64) -> Self {
        RandomAgent {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Agent for RandomAgent {
    fn decide(&mut self, view: &RolloutView) -> Option<Decision> {
        let action = view.current().candidate_actions.choose(&mut self.rng)?.clone();
        Some(Decision { goal: 0, action })
    }
}

/// Per-step decoding record of a model agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub context_len: usize,
    pub entropy: Option<f64>,
    pub goal: u8,
    pub action: String,
}

/// Model-driven agent. The context is rebuilt every step exactly as for a
/// training input, using the goals chosen so far.
pub struct ModelAgent<'m> {
    model: &'m Seq2Seq,
    vocab: &'m Vocabulary,
    policy: DecodePolicy,
    running: Rational64,
    pub trace: Vec<DecodeTrace>,
    /// Token inputs fed to the decoder, kept for replay checks.
    pub inputs: Vec<Vec<u32>>,
}

impl<'m> ModelAgent<'m> {
    pub fn new(model: &'m Seq2Seq, vocab: &'m Vocabulary, policy: DecodePolicy) -> Self {
        ModelAgent {
            model,
            vocab,
            policy,
            running: Rational64::from_integer(1),
            trace: Vec::new(),
            inputs: Vec::new(),
        }
    }
}

impl Agent for ModelAgent<'_> {
    fn decide(&mut self, view: &RolloutView) -> Option<Decision> {
        let observations: Vec<&Observation> = view.observations.iter().collect();
        let actions: Vec<&str> = view.actions.iter().map(String::as_str).collect();
        let input = encode_context(
            self.vocab,
            &observations,
            view.goals,
            &actions,
            self.model.config.max_input_tokens,
        )
        .ok()?;
        let given = matches!(self.policy.mode, GoalMode::OptimalManual).then(|| optimal_goal(self.running, view.game.max_score));
        let step = decode_step(
            self.model,
            self.vocab,
            &input,
            &self.policy,
            given,
            &view.current().candidate_actions,
        );
        self.inputs.push(input);
        let step = step.ok()?;
        self.trace.push(DecodeTrace {
            context_len: self.inputs.last().map_or(0, Vec::len),
            entropy: step.distribution.as_ref().map(GoalDistribution::entropy),
            goal: step.goal,
            action: step.action.clone(),
        });
        Some(Decision {
            goal: step.goal,
            action: step.action,
        })
    }

    fn observe_reward(&mut self, reward: i64, max_score: i64) {
        self.running = optimal_gc_update(self.running, reward, max_score);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub score: i64,
    pub reason: TerminationReason,
    pub trajectory: Trajectory,
    /// Goal chosen at each executed step.
    pub goals: Vec<u8>,
}

/// Plays one episode. `step_cap` further limits the game's own cap.
pub fn rollout(agent: &mut dyn Agent, game: &Arc<GameSpec>, seed: u64, step_cap: Option<u32>) -> Rollout {
    let cap = step_cap.map_or(game.step_cap, |c| c.min(game.step_cap));
    let (mut state, obs0) = EngineState::reset(Arc::clone(game), seed);
    let mut observations = vec![obs0];
    let mut goals = Vec::new();
    let mut actions: Vec<String> = Vec::new();
    let mut rewards = Vec::new();
    let reason = loop {
        if actions.len() as u32 >= cap {
            break TerminationReason::StepCap;
        }
        let view = RolloutView {
            game,
            observations: &observations,
            goals: &goals,
            actions: &actions,
        };
        let Some(d) = agent.decide(&view) else {
            break TerminationReason::InvalidSequence;
        };
        let (obs, out) = state.step(&d.action).expect("episode still running");
        agent.observe_reward(out.reward, game.max_score);
        goals.push(d.goal);
        actions.push(d.action);
        rewards.push(out.reward);
        observations.push(obs);
        if out.done {
            break if state.reached_end {
                TerminationReason::GameEnd
            } else {
                TerminationReason::StepCap
            };
        }
    };
    let steps: Vec<Step> = actions
        .into_iter()
        .zip(rewards)
        .zip(observations)
        .map(|((action, reward), observation)| Step {
            observation,
            action,
            reward,
        })
        .collect();
    let score = steps.iter().map(|s| s.reward).sum();
    Rollout {
        score,
        reason,
        trajectory: Trajectory {
            game: game.name.clone(),
            seed,
            walkthrough_fraction: 0,
            repeat: 0,
            steps,
            final_score: score,
            terminal: state.reached_end,
        },
        goals,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub game: String,
    pub seed: u64,
    pub score: i64,
    pub max_score: i64,
    pub length: usize,
    pub reason: TerminationReason,
    pub goals: Vec<u8>,
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameSummary {
    pub game: String,
    pub max_score: i64,
    pub avg: f64,
    /// Population standard deviation over seeds.
    pub stdev: f64,
    pub best: i64,
    pub normalized: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub games: Vec<GameSummary>,
    /// Mean over games of `avg / max_score`.
    pub normalized_average: f64,
    pub episodes: Vec<Episode>,
}

impl EvalReport {
    pub fn game(&self, name: &str) -> Option<&GameSummary> {
        self.games.iter().find(|g| g.game == name)
    }

    /// Normalized average over a subset of games.
    pub fn normalized_over(&self, games: &[&str]) -> f64 {
        let picked: Vec<f64> = self.games.iter().filter(|g| games.contains(&g.game.as_str())).map(|g| g.normalized).collect();
        if picked.is_empty() {
            0.0
        } else {
            picked.iter().sum::<f64>() / picked.len() as f64
        }
    }
}

/// Per-game statistics from episodes, games in first-seen order.
pub fn aggregate(label: &str, episodes: Vec<Episode>) -> EvalReport {
    let mut order: Vec<String> = Vec::new();
    let mut by_game: BTreeMap<&str, Vec<&Episode>> = BTreeMap::new();
    for e in &episodes {
        if !by_game.contains_key(e.game.as_str()) {
            order.push(e.game.clone());
        }
        by_game.entry(&e.game).or_default().push(e);
    }
    let games: Vec<GameSummary> = order
        .iter()
        .map(|name| {
            let eps = &by_game[name.as_str()];
            let n = eps.len() as f64;
            let avg = eps.iter().map(|e| e.score as f64).sum::<f64>() / n;
            let var = eps.iter().map(|e| (e.score as f64 - avg).powi(2)).sum::<f64>() / n;
            let max_score = eps[0].max_score;
            GameSummary {
                game: name.clone(),
                max_score,
                avg,
                stdev: var.sqrt(),
                best: eps.iter().map(|e| e.score).max().unwrap_or(0),
                normalized: avg / max_score as f64,
            }
        })
        .collect();
    let normalized_average = if games.is_empty() {
        0.0
    } else {
        games.iter().map(|g| g.normalized).sum::<f64>() / games.len() as f64
    };
    EvalReport {
        label: label.to_string(),
        games,
        normalized_average,
        episodes,
    }
}

/// One rollout per (game, seed), in parallel; `make_agent` builds a fresh
/// agent for each cell.
pub fn evaluate<'a, F>(label: &str, games: &[Arc<GameSpec>], seeds: &[u64], step_cap: Option<u32>, make_agent: F) -> EvalReport
where
    F: Fn(&GameSpec, u64) -> Box<dyn Agent + 'a> + Sync,
{
    let cells: Vec<(&Arc<GameSpec>, u64)> = games.iter().flat_map(|g| seeds.iter().map(move |&s| (g, s))).collect();
    let episodes = cells
        .par_iter()
        .map(|&(game, seed)| {
            let mut agent = make_agent(game, seed);
            let r = rollout(agent.as_mut(), game, seed, step_cap);
            Episode {
                game: game.name.clone(),
                seed,
                score: r.score,
                max_score: game.max_score,
                length: r.trajectory.len(),
                reason: r.reason,
                goals: r.goals,
                trajectory: r.trajectory,
            }
        })
        .collect();
    aggregate(label, episodes)
}

/// Evaluates a model under a decoding policy.
pub fn evaluate_model<'a>(
    label: &str,
    model: &'a Seq2Seq,
    vocab: &'a Vocabulary,
    policy: DecodePolicy,
    games: &[Arc<GameSpec>],
    seeds: &[u64],
    step_cap: Option<u32>,
) -> EvalReport {
    evaluate(label, games, seeds, step_cap, |_, _| Box::new(ModelAgent::new(model, vocab, policy)))
}

// ---------------------------------------------------------------------------
// Report files

fn write_file(path: &Path, text: &str) -> Result<(), DataError> {
    let io = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io)?;
    }
    fs::File::create(path).and_then(|mut f| f.write_all(text.as_bytes())).map_err(io)
}

/// One JSON line per episode.
pub fn write_traces(path: &Path, episodes: &[Episode]) -> Result<(), DataError> {
    let mut text = String::new();
    for e in episodes {
        text.push_str(&serde_json::to_string(e).expect("episode serializes"));
        text.push('\n');
    }
    write_file(path, &text)
}

pub fn read_traces(path: &Path) -> Result<Vec<Episode>, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| DataError::Format {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Columns: `game,max_score,avg,stdev,best,normalized`, then a
/// `normalized_average` row.
pub fn report_csv(report: &EvalReport) -> String {
    let mut s = String::from("game,max_score,avg,stdev,best,normalized\n");
    for g in &report.games {
        writeln!(s, "{},{},{:.4},{:.4},{},{:.4}", g.game, g.max_score, g.avg, g.stdev, g.best, g.normalized).unwrap();
    }
    writeln!(s, "normalized_average,,,,,{:.4}", report.normalized_average).unwrap();
    s
}

pub fn episodes_csv(episodes: &[Episode]) -> String {
    let mut s = String::from("game,seed,score,max_score,length,reason\n");
    for e in episodes {
        let reason = serde_json::to_value(e.reason).unwrap();
        writeln!(s, "{},{},{},{},{},{}", e.game, e.seed, e.score, e.max_score, e.length, reason.as_str().unwrap()).unwrap();
    }
    s
}

/// Writes `<label>.csv`, `<label>.episodes.csv` and `<label>.traces.jsonl`.
pub fn write_report(dir: &Path, report: &EvalReport) -> Result<(), DataError> {
    write_file(&dir.join(format!("{}.csv", report.label)), &report_csv(report))?;
    write_file(&dir.join(format!("{}.episodes.csv", report.label)), &episodes_csv(&report.episodes))?;
    write_traces(&dir.join(format!("{}.traces.jsonl", report.label)), &report.episodes)
}

/// Grid of normalized averages: one row per checkpoint, one column per
/// policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut s = format!("checkpoint,{}\n", self.columns.join(","));
        for (name, vals) in &self.rows {
            let cells: Vec<String> = vals.iter().map(|v| format!("{v:.4}")).collect();
            writeln!(s, "{name},{}", cells.join(",")).unwrap();
        }
        s
    }

    pub fn cell(&self, row: &str, column: &str) -> Option<f64> {
        let c = self.columns.iter().position(|x| x == column)?;
        self.rows.iter().find(|(r, _)| r == row).map(|(_, v)| v[c])
    }
}

/// Strategy table: one row per game, `avg/stdev/best` per labelled report,
/// plus a normalized-average row.
pub fn strategy_table_csv(reports: &[(&str, &EvalReport)]) -> String {
    let mut s = String::from("game");
    for (name, _) in reports {
        write!(s, ",{name}_avg,{name}_stdev,{name}_best").unwrap();
    }
    s.push('\n');
    let games: Vec<&str> = reports.first().map_or(Vec::new(), |(_, r)| r.games.iter().map(|g| g.game.as_str()).collect());
    for game in games {
        s.push_str(game);
        for (_, r) in reports {
            match r.game(game) {
                Some(g) => write!(s, ",{:.4},{:.4},{}", g.avg, g.stdev, g.best).unwrap(),
                None => s.push_str(",,,"),
            }
        }
        s.push('\n');
    }
    s.push_str("normalized_average");
    for (_, r) in reports {
        write!(s, ",{:.4},,", r.normalized_average).unwrap();
    }
    s.push('\n');
    s
}

/// Pools several reports (e.g. all strategies at one lambda) into one.
pub fn pool(label: &str, reports: &[&EvalReport]) -> EvalReport {
    aggregate(label, reports.iter().flat_map(|r| r.episodes.iter().cloned()).collect())
}

pub fn write_text(path: &Path, text: &str) -> Result<(), DataError> {
    write_file(path, text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::encode_pair;
    use crate::engine::bundled_game;
    use crate::model::{tests::tiny_config, ModelConfig};

    fn episode(game: &str, score: i64, max: i64, seed: u64) -> Episode {
        Episode {
            game: game.into(),
            seed,
            score,
            max_score: max,
            length: 1,
            reason: TerminationReason::GameEnd,
            goals: vec![],
            trajectory: Trajectory {
                game: game.into(),
                seed,
                walkthrough_fraction: 0,
                repeat: 0,
                steps: vec![],
                final_score: score,
                terminal: true,
            },
        }
    }

    #[test]
    fn normalized_average_example() {
        let eps = vec![
            episode("a", 40, 400, 0),
            episode("a", 50, 400, 1),
            episode("b", 70, 100, 0),
            episode("b", 80, 100, 1),
        ];
        let r = aggregate("x", eps);
        assert!((r.normalized_average - 0.43125).abs() < 1e-12);
        let a = r.game("a").unwrap();
        assert_eq!((a.avg, a.stdev, a.best), (45.0, 5.0, 50));
        assert!(r.games.iter().all(|g| g.best as f64 >= g.avg));
    }

    #[test]
    fn singleton_and_zero_statistics() {
        let r = aggregate("x", vec![episode("g", 50, 50, 0)]);
        let g = r.game("g").unwrap();
        assert_eq!((g.avg, g.stdev, g.best), (50.0, 0.0, 50));
        assert_eq!(r.normalized_average, 1.0);
        let z = aggregate("z", vec![episode("g", 0, 50, 0), episode("h", 0, 30, 0)]);
        assert_eq!(z.normalized_average, 0.0);
    }

    #[test]
    fn walkthrough_replay_reaches_game_end() {
        let g = bundled_game("gemhunt").unwrap();
        let mut agent = ScriptAgent::new(g.walkthrough.clone());
        let r = rollout(&mut agent, &g, g.default_seed, None);
        assert_eq!((r.score, r.reason), (50, TerminationReason::GameEnd));
    }

    #[test]
    fn unmatched_action_hits_step_cap() {
        let g = bundled_game("gemhunt").unwrap();
        let mut agent = ScriptAgent::cycling(vec!["dance wildly".into()]);
        let r = rollout(&mut agent, &g, 0, None);
        assert_eq!((r.score, r.reason), (0, TerminationReason::StepCap));
        assert_eq!(r.trajectory.len() as u32, g.step_cap);
        let mut agent = ScriptAgent::cycling(vec!["dance wildly".into()]);
        let short = rollout(&mut agent, &g, 0, Some(7));
        assert_eq!((short.trajectory.len(), short.reason), (7, TerminationReason::StepCap));
    }

    #[test]
    fn exhausted_script_is_invalid_sequence() {
        let g = bundled_game("gemhunt").unwrap();
        let mut agent = ScriptAgent::new(vec!["take key".into()]);
        let r = rollout(&mut agent, &g, 0, None);
        assert_eq!((r.score, r.reason, r.trajectory.len()), (10, TerminationReason::InvalidSequence, 1));
    }

    fn vocab_and_model() -> (Vocabulary, Seq2Seq) {
        let vocab = Vocabulary::for_games(&crate::engine::bundled_games());
        let cfg = ModelConfig {
            max_input_tokens: 512,
            max_output_tokens: 24,
            ..tiny_config(vocab.len())
        };
        (vocab.clone(), Seq2Seq::new(cfg).unwrap())
    }

    #[test]
    fn rollout_context_matches_training_serialization() {
        let (vocab, model) = vocab_and_model();
        let g = bundled_game("labyrinth").unwrap();
        let policy = DecodePolicy {
            mode: GoalMode::PredictedTilt { alpha: 10.0 },
            action_decoding: crate::decode::ActionDecoding::Constrained,
        };
        let mut agent = ModelAgent::new(&model, &vocab, policy);
        let r = rollout(&mut agent, &g, 3, Some(6));
        assert_eq!(r.trajectory.len(), 6);
        for t in 0..r.trajectory.len() {
            let pair = encode_pair(&vocab, &r.trajectory, t, &r.goals, 512, 24).unwrap();
            assert_eq!(pair.input, agent.inputs[t], "step {t}");
        }
    }

    #[test]
    fn evaluation_is_deterministic_and_traces_round_trip() {
        let (vocab, model) = vocab_and_model();
        let games = vec![bundled_game("merchant").unwrap(), bundled_game("gemhunt").unwrap()];
        let policy = DecodePolicy {
            mode: GoalMode::OptimalManual,
            action_decoding: crate::decode::ActionDecoding::Constrained,
        };
        let a = evaluate_model("m", &model, &vocab, policy, &games, &[1, 2], Some(5));
        let b = evaluate_model("m", &model, &vocab, policy, &games, &[1, 2], Some(5));
        assert_eq!(a, b);
        assert_eq!(a.episodes.len(), 4);
        let dir = tempfile::tempdir().unwrap();
        write_report(dir.path(), &a).unwrap();
        let back = read_traces(&dir.path().join("m.traces.jsonl")).unwrap();
        assert_eq!(aggregate("m", back), a);
    }

    #[test]
    fn strategy_table_shape() {
        let r = aggregate("x", vec![episode("a", 1, 2, 0), episode("b", 1, 2, 0)]);
        let csv = strategy_table_csv(&[("RTG", &r), ("ImR", &r), ("FinS", &r), ("AvgRTG", &r)]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + 2 + 1);
        assert_eq!(lines[0].split(',').count(), 1 + 12);
    }

    #[test]
    fn random_agent_picks_candidates() {
        let g = bundled_game("vaultdoor").unwrap();
        let mut agent = RandomAgent::new(9);
        let r = rollout(&mut agent, &g, 0, Some(20));
        for s in &r.trajectory.steps {
            assert!(s.observation.candidate_actions.contains(&s.action));
        }
    }
}
