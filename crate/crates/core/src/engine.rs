//! Miniature text-adventure engine.
//!
//! A game is a declarative [`GameSpec`] loaded from a TOML document. The
//! engine exposes Jericho-style observations (candidate actions, the last
//! engine message, the room description and the inventory) and emits integer
//! rewards. Randomness only enters through stochastic rules at step time, so
//! `reset` is seed-independent while transitions are reproducible per seed.

use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Message emitted for actions that match no applicable rule.
pub const NOTHING_HAPPENS: &str = "nothing happens";
/// Step cap applied when a game does not set one.
pub const DEFAULT_STEP_CAP: u32 = 200;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid game '{game}': {message}")]
    Validation { game: String, message: String },
    #[error("step called on a finished episode")]
    EpisodeDone,
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

// ---------------------------------------------------------------------------
// File schema

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGame {
    meta: RawMeta,
    #[serde(default)]
    rooms: Vec<RawRoom>,
    #[serde(default)]
    items: Vec<RawItem>,
    #[serde(default)]
    rules: Vec<RawRule>,
    #[serde(default)]
    stochastic: Vec<RawStochastic>,
    walkthrough: RawWalkthrough,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMeta {
    name: String,
    max_score: i64,
    start: String,
    intro: String,
    #[serde(default)]
    default_seed: u64,
    #[serde(default)]
    step_cap: Option<u32>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRoom {
    id: String,
    description: String,
    #[serde(default)]
    exits: Vec<RawExit>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExit {
    dir: String,
    to: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawItem {
    id: String,
    name: String,
    location: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRule {
    id: String,
    pattern: String,
    #[serde(default)]
    at: Option<String>,
    #[serde(default)]
    item_here: Vec<String>,
    #[serde(default)]
    has: Vec<String>,
    #[serde(default)]
    not_has: Vec<String>,
    #[serde(default)]
    flags: Vec<String>,
    #[serde(default)]
    not_flags: Vec<String>,
    #[serde(default)]
    take: Vec<String>,
    #[serde(default)]
    drop: Vec<String>,
    #[serde(default)]
    consume: Vec<String>,
    #[serde(default)]
    goto: Option<String>,
    #[serde(default)]
    set: Vec<String>,
    #[serde(default)]
    clear: Vec<String>,
    #[serde(default)]
    end: bool,
    #[serde(default)]
    reward: i64,
    #[serde(default = "default_true")]
    one_shot_reward: bool,
    message: String,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStochastic {
    rule: String,
    failure_probability: f64,
    failure_message: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawWalkthrough {
    actions: Vec<String>,
}

// ---------------------------------------------------------------------------
// Validated game

#[derive(Debug, Clone, PartialEq)]
pub struct Exit {
    pub direction: String,
    pub to: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Room {
    pub id: String,
    pub description: String,
    pub exits: Vec<Exit>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ItemLocation {
    Room(usize),
    Inventory,
    Gone,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub id: String,
    pub name: String,
    pub initial: ItemLocation,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Condition {
    At(usize),
    ItemHere(usize),
    Has(usize),
    NotHas(usize),
    Flag(String),
    NotFlag(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Effect {
    Take(usize),
    Drop(usize),
    Consume(usize),
    MoveTo(usize),
    SetFlag(String),
    ClearFlag(String),
    End,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionRule {
    pub id: String,
    pub pattern: String,
    pub preconditions: Vec<Condition>,
    pub effects: Vec<Effect>,
    pub reward: i64,
    pub message: String,
    pub one_shot_reward: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StochasticRule {
    pub rule: usize,
    pub failure_probability: f64,
    pub failure_message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GameSpec {
    pub name: String,
    pub intro: String,
    pub start: usize,
    pub rooms: Vec<Room>,
    pub items: Vec<Item>,
    pub action_rules: Vec<ActionRule>,
    pub stochastic_rules: Vec<StochasticRule>,
    pub max_score: i64,
    pub walkthrough: Vec<String>,
    pub default_seed: u64,
    pub step_cap: u32,
}

const BUNDLED: [(&str, &str); 4] = [
    ("gemhunt", include_str!("../games/gemhunt.toml")),
    ("vaultdoor", include_str!("../games/vaultdoor.toml")),
    ("merchant", include_str!("../games/merchant.toml")),
    ("labyrinth", include_str!("../games/labyrinth.toml")),
];

/// Names of the games shipped with the crate.
pub fn bundled_names() -> Vec<&'static str> {
    BUNDLED.iter().map(|(name, _)| *name).collect()
}

/// Source text of a bundled game spec.
pub fn bundled_source(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, src)| *src)
}

/// Loads one of the bundled games by name.
pub fn bundled_game(name: &str) -> Result<Arc<GameSpec>, EngineError> {
    let src = bundled_source(name).ok_or_else(|| EngineError::Validation {
        game: name.to_string(),
        message: format!("no bundled game named '{name}'"),
    })?;
    load_game(src).map(Arc::new)
}

/// Loads every bundled game, in a fixed order.
pub fn bundled_games() -> Vec<Arc<GameSpec>> {
    bundled_names()
        .into_iter()
        .map(|n| bundled_game(n).expect("bundled game specs are valid"))
        .collect()
}

pub fn load_game_file(path: &Path) -> Result<GameSpec, EngineError> {
    let text = std::fs::read_to_string(path).map_err(|source| EngineError::Io {
        path: path.display().to_string(),
        source,
    })?;
    load_game(&text)
}

/// Parses and validates a game spec document.
///
/// Validation includes a dry run of the walkthrough from the default seed,
/// which must score exactly `max_score`.
pub fn load_game(spec_text: &str) -> Result<GameSpec, EngineError> {
    let raw: RawGame = toml::from_str(spec_text).map_err(|e| {
        let line = e
            .span()
            .map(|s| spec_text[..s.start.min(spec_text.len())].matches('\n').count() + 1)
            .unwrap_or(0);
        EngineError::Parse {
            line,
            message: e.message().to_string(),
        }
    })?;
    let game = build(raw)?;
    game.validate()?;
    Ok(game)
}

fn build(raw: RawGame) -> Result<GameSpec, EngineError> {
    let name = raw.meta.name.clone();
    let invalid = |message: String| EngineError::Validation {
        game: name.clone(),
        message,
    };

    let mut room_index = HashMap::new();
    for (i, r) in raw.rooms.iter().enumerate() {
        if room_index.insert(r.id.clone(), i).is_some() {
            return Err(invalid(format!("duplicate room '{}'", r.id)));
        }
    }
    let room = |id: &str, ctx: &str| {
        room_index
            .get(id)
            .copied()
            .ok_or_else(|| invalid(format!("{ctx} references unknown room '{id}'")))
    };

    let mut rooms = Vec::with_capacity(raw.rooms.len());
    for r in &raw.rooms {
        let mut exits = Vec::new();
        for e in &r.exits {
            exits.push(Exit {
                direction: e.dir.clone(),
                to: room(&e.to, &format!("exit {} of room '{}'", e.dir, r.id))?,
            });
        }
        rooms.push(Room {
            id: r.id.clone(),
            description: r.description.clone(),
            exits,
        });
    }

    let mut item_index = HashMap::new();
    let mut items = Vec::new();
    for (i, it) in raw.items.iter().enumerate() {
        if item_index.insert(it.id.clone(), i).is_some() {
            return Err(invalid(format!("duplicate item '{}'", it.id)));
        }
        let initial = if it.location == "inventory" {
            ItemLocation::Inventory
        } else {
            ItemLocation::Room(room(&it.location, &format!("item '{}'", it.id))?)
        };
        items.push(Item {
            id: it.id.clone(),
            name: it.name.clone(),
            initial,
        });
    }
    let item = |id: &str, ctx: &str| {
        item_index
            .get(id)
            .copied()
            .ok_or_else(|| invalid(format!("{ctx} references unknown item '{id}'")))
    };

    let mut action_rules = Vec::new();
    let mut rule_index = HashMap::new();
    for (i, r) in raw.rules.iter().enumerate() {
        if rule_index.insert(r.id.clone(), i).is_some() {
            return Err(invalid(format!("duplicate rule '{}'", r.id)));
        }
        let ctx = format!("rule '{}'", r.id);
        let mut pre = Vec::new();
        if let Some(at) = &r.at {
            pre.push(Condition::At(room(at, &ctx)?));
        }
        for i in &r.item_here {
            pre.push(Condition::ItemHere(item(i, &ctx)?));
        }
        for i in &r.has {
            pre.push(Condition::Has(item(i, &ctx)?));
        }
        for i in &r.not_has {
            pre.push(Condition::NotHas(item(i, &ctx)?));
        }
        pre.extend(r.flags.iter().cloned().map(Condition::Flag));
        pre.extend(r.not_flags.iter().cloned().map(Condition::NotFlag));

        let mut eff = Vec::new();
        for i in &r.consume {
            eff.push(Effect::Consume(item(i, &ctx)?));
        }
        for i in &r.take {
            eff.push(Effect::Take(item(i, &ctx)?));
        }
        for i in &r.drop {
            eff.push(Effect::Drop(item(i, &ctx)?));
        }
        if let Some(to) = &r.goto {
            eff.push(Effect::MoveTo(room(to, &ctx)?));
        }
        eff.extend(r.set.iter().cloned().map(Effect::SetFlag));
        eff.extend(r.clear.iter().cloned().map(Effect::ClearFlag));
        if r.end {
            eff.push(Effect::End);
        }
        if r.pattern.trim().is_empty() || r.pattern.trim() != r.pattern {
            return Err(invalid(format!("{ctx} has a blank or padded pattern")));
        }
        action_rules.push(ActionRule {
            id: r.id.clone(),
            pattern: r.pattern.clone(),
            preconditions: pre,
            effects: eff,
            reward: r.reward,
            message: r.message.clone(),
            one_shot_reward: r.one_shot_reward,
        });
    }

    let mut stochastic_rules = Vec::new();
    for s in &raw.stochastic {
        let rule = rule_index
            .get(&s.rule)
            .copied()
            .ok_or_else(|| invalid(format!("stochastic entry references unknown rule '{}'", s.rule)))?;
        if !(0.0..=1.0).contains(&s.failure_probability) {
            return Err(invalid(format!(
                "failure probability {} of rule '{}' outside [0, 1]",
                s.failure_probability, s.rule
            )));
        }
        stochastic_rules.push(StochasticRule {
            rule,
            failure_probability: s.failure_probability,
            failure_message: s.failure_message.clone(),
        });
    }

    Ok(GameSpec {
        start: room(&raw.meta.start, "meta.start")?,
        name: raw.meta.name,
        intro: raw.meta.intro,
        rooms,
        items,
        action_rules,
        stochastic_rules,
        max_score: raw.meta.max_score,
        walkthrough: raw.walkthrough.actions,
        default_seed: raw.meta.default_seed,
        step_cap: raw.meta.step_cap.unwrap_or(DEFAULT_STEP_CAP),
    })
}

impl GameSpec {
    fn invalid(&self, message: String) -> EngineError {
        EngineError::Validation {
            game: self.name.clone(),
            message,
        }
    }

    fn validate(&self) -> Result<(), EngineError> {
        if self.max_score <= 0 {
            return Err(self.invalid(format!("max_score {} must be positive", self.max_score)));
        }
        if self.rooms.is_empty() {
            return Err(self.invalid("no rooms".into()));
        }
        if self.step_cap == 0 {
            return Err(self.invalid("step_cap must be positive".into()));
        }
        let mut total = 0;
        for r in &self.action_rules {
            if r.reward != 0 && !r.one_shot_reward {
                return Err(self.invalid(format!(
                    "rule '{}' carries a reward but is not one-shot",
                    r.id
                )));
            }
            if r.reward < 0 {
                return Err(self.invalid(format!("rule '{}' has a negative reward", r.id)));
            }
            total += r.reward;
        }
        if total > self.max_score {
            return Err(self.invalid(format!(
                "rule rewards sum to {total}, above max_score {}",
                self.max_score
            )));
        }
        if self.walkthrough.is_empty() {
            return Err(self.invalid("empty walkthrough".into()));
        }

        let game = Arc::new(self.clone());
        let (mut state, _) = EngineState::reset(game, self.default_seed);
        for (i, action) in self.walkthrough.iter().enumerate() {
            if state.done {
                return Err(self.invalid(format!(
                    "walkthrough ends the episode at step {i} before action '{action}'"
                )));
            }
            state.step(action)?;
        }
        if state.cumulative_score != self.max_score {
            return Err(self.invalid(format!(
                "walkthrough score {} ≠ max_score {}",
                state.cumulative_score, self.max_score
            )));
        }
        Ok(())
    }

    fn stochastic(&self, rule: usize) -> Option<&StochasticRule> {
        self.stochastic_rules.iter().find(|s| s.rule == rule)
    }

    pub fn is_stochastic(&self) -> bool {
        self.stochastic_rules.iter().any(|s| s.failure_probability > 0.0)
    }

    pub fn room_id(&self, name: &str) -> Option<usize> {
        self.rooms.iter().position(|r| r.id == name)
    }
}

// ---------------------------------------------------------------------------
// Runtime

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Observation {
    pub candidate_actions: Vec<String>,
    pub message: String,
    pub description: String,
    pub inventory: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepOutcome {
    pub reward: i64,
    pub done: bool,
}

/// Live state of one episode.
#[derive(Debug, Clone)]
pub struct EngineState {
    pub game: Arc<GameSpec>,
    pub location: usize,
    /// Item locations, indexed like `game.items`.
    pub items: Vec<ItemLocation>,
    pub flags: BTreeSet<String>,
    pub fired_rewards: BTreeSet<usize>,
    pub cumulative_score: i64,
    pub step_count: u32,
    pub done: bool,
    /// Set when a terminal rule (rather than the step cap) ended the episode.
    pub reached_end: bool,
    message: String,
    rng: ChaCha8Rng,
}

impl EngineState {
    pub fn reset(game: Arc<GameSpec>, seed: u64) -> (EngineState, Observation) {
        let state = EngineState {
            location: game.start,
            items: game.items.iter().map(|i| i.initial).collect(),
            flags: BTreeSet::new(),
            fired_rewards: BTreeSet::new(),
            cumulative_score: 0,
            step_count: 0,
            done: false,
            reached_end: false,
            message: game.intro.clone(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            game,
        };
        let obs = state.observation();
        (state, obs)
    }

    fn holds(&self, c: &Condition) -> bool {
        match c {
            Condition::At(r) => self.location == *r,
            Condition::ItemHere(i) => self.items[*i] == ItemLocation::Room(self.location),
            Condition::Has(i) => self.items[*i] == ItemLocation::Inventory,
            Condition::NotHas(i) => self.items[*i] != ItemLocation::Inventory,
            Condition::Flag(f) => self.flags.contains(f),
            Condition::NotFlag(f) => !self.flags.contains(f),
        }
    }

    fn applicable(&self, rule: &ActionRule) -> bool {
        rule.preconditions.iter().all(|c| self.holds(c))
    }

    /// Actions the engine currently accepts: applicable rules in spec order,
    /// then exits of the current room, without duplicates.
    pub fn candidate_actions(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for rule in &self.game.action_rules {
            if self.applicable(rule) && seen.insert(rule.pattern.clone()) {
                out.push(rule.pattern.clone());
            }
        }
        for exit in &self.game.rooms[self.location].exits {
            let action = format!("go {}", exit.direction);
            if seen.insert(action.clone()) {
                out.push(action);
            }
        }
        out
    }

    pub fn observation(&self) -> Observation {
        let room = &self.game.rooms[self.location];
        let here: Vec<&str> = self
            .game
            .items
            .iter()
            .zip(&self.items)
            .filter(|(_, loc)| **loc == ItemLocation::Room(self.location))
            .map(|(item, _)| item.name.as_str())
            .collect();
        let description = if here.is_empty() {
            room.description.clone()
        } else {
            format!("{} You see: {}.", room.description, here.join(", "))
        };
        let carried: Vec<&str> = self
            .game
            .items
            .iter()
            .zip(&self.items)
            .filter(|(_, loc)| **loc == ItemLocation::Inventory)
            .map(|(item, _)| item.name.as_str())
            .collect();
        let inventory = if carried.is_empty() {
            "You are empty-handed.".to_string()
        } else {
            format!("You carry: {}.", carried.join(", "))
        };
        Observation {
            candidate_actions: self.candidate_actions(),
            message: self.message.clone(),
            description,
            inventory,
        }
    }

    /// Executes one action. The first applicable rule whose pattern equals
    /// the action wins; otherwise an exit of the current room is tried.
    pub fn step(&mut self, action: &str) -> Result<(Observation, StepOutcome), EngineError> {
        if self.done {
            return Err(EngineError::EpisodeDone);
        }
        self.step_count += 1;
        let action = action.trim();
        let game = Arc::clone(&self.game);
        let mut reward = 0;

        let rule_idx = game
            .action_rules
            .iter()
            .position(|r| r.pattern == action && self.applicable(r));
        if let Some(idx) = rule_idx {
            let rule = &game.action_rules[idx];
            let failed = match game.stochastic(idx) {
                Some(s) => self.rng.gen::<f64>() < s.failure_probability,
                None => false,
            };
            if failed {
                self.message = game.stochastic(idx).unwrap().failure_message.clone();
            } else {
                for e in &rule.effects {
                    self.apply(e);
                }
                if rule.reward != 0 && !(rule.one_shot_reward && self.fired_rewards.contains(&idx)) {
                    reward = rule.reward;
                    self.fired_rewards.insert(idx);
                }
                self.message = rule.message.clone();
            }
        } else if let Some(exit) = game.rooms[self.location]
            .exits
            .iter()
            .find(|e| action.strip_prefix("go ") == Some(e.direction.as_str()))
        {
            self.location = exit.to;
            self.message = format!("You go {}.", exit.direction);
        } else {
            self.message = NOTHING_HAPPENS.to_string();
        }

        self.cumulative_score += reward;
        if self.step_count >= game.step_cap {
            self.done = true;
        }
        Ok((
            self.observation(),
            StepOutcome {
                reward,
                done: self.done,
            },
        ))
    }

    fn apply(&mut self, effect: &Effect) {
        match effect {
            Effect::Take(i) => self.items[*i] = ItemLocation::Inventory,
            Effect::Drop(i) => self.items[*i] = ItemLocation::Room(self.location),
            Effect::Consume(i) => self.items[*i] = ItemLocation::Gone,
            Effect::MoveTo(r) => self.location = *r,
            Effect::SetFlag(f) => {
                self.flags.insert(f.clone());
            }
            Effect::ClearFlag(f) => {
                self.flags.remove(f);
            }
            Effect::End => {
                self.done = true;
                self.reached_end = true;
            }
        }
    }

    /// Key identifying the logical game state (ignores rng and counters).
    fn logical_key(&self) -> (usize, Vec<ItemLocation>, BTreeSet<String>, BTreeSet<usize>, bool) {
        (
            self.location,
            self.items.clone(),
            self.flags.clone(),
            self.fired_rewards.clone(),
            self.done,
        )
    }
}

/// Every observation reachable from reset, exploring all candidate actions
/// and both outcomes of stochastic rules. Step caps are ignored.
pub fn reachable_observations(game: &Arc<GameSpec>) -> Vec<Observation> {
    let mut unbounded = (**game).clone();
    unbounded.step_cap = u32::MAX;
    let game = Arc::new(unbounded);
    let (start, obs0) = EngineState::reset(Arc::clone(&game), game.default_seed);

    let mut seen_obs: HashSet<Observation> = HashSet::new();
    let mut out = Vec::new();
    let mut push = |o: Observation, out: &mut Vec<Observation>| {
        if seen_obs.insert(o.clone()) {
            out.push(o);
        }
    };
    push(obs0, &mut out);

    let mut visited = HashSet::new();
    let mut queue = VecDeque::new();
    visited.insert((start.logical_key(), start.message.clone()));
    queue.push_back(start);
    while let Some(state) = queue.pop_front() {
        if state.done {
            continue;
        }
        for action in state.candidate_actions() {
            for outcome in expand(&state, &action) {
                push(outcome.observation(), &mut out);
                if visited.insert((outcome.logical_key(), outcome.message.clone())) {
                    queue.push_back(outcome);
                }
            }
        }
    }
    out
}

/// Successor states of `action`, forcing each outcome of a stochastic rule.
fn expand(state: &EngineState, action: &str) -> Vec<EngineState> {
    let game = &state.game;
    let idx = game
        .action_rules
        .iter()
        .position(|r| r.pattern == action && state.applicable(r));
    let mut outcomes = Vec::new();
    if let Some(s) = idx.and_then(|i| game.stochastic(i)) {
        if s.failure_probability > 0.0 {
            let mut failed = state.clone();
            failed.step_count += 1;
            failed.message = s.failure_message.clone();
            outcomes.push(failed);
        }
        if s.failure_probability < 1.0 {
            let mut ok = state.clone();
            let mut forced = (**game).clone();
            forced.stochastic_rules.clear();
            ok.game = Arc::new(forced);
            ok.step(action).expect("live state");
            ok.game = Arc::clone(game);
            outcomes.push(ok);
        }
    } else {
        let mut next = state.clone();
        next.step(action).expect("live state");
        outcomes.push(next);
    }
    outcomes
}
