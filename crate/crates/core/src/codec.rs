//! Text serialization of trajectories and a closed word-level vocabulary.
//!
//! Observations, goals and actions are rendered with fixed templates joined
//! by the `</s></s>` delimiter. Intermediate observations in a model input
//! are compressed to a single `<STATE>` placeholder. Goal values 0..=100 are
//! dedicated single tokens whose surface form is the numeral itself.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::engine::{reachable_observations, GameSpec, Observation};
use crate::goals::{normalized_goals, GoalError, GoalStrategy};
use crate::trajectory::Trajectory;

pub const DELIM: &str = "</s></s>";
pub const PLACEHOLDER: &str = "<STATE>";
pub const ACTION_MARK: &str = "Action:";
pub const GOAL_MARK: &str = "GC:";
pub const ACTIONS_MARK: &str = "Actions:";
pub const STATE_MARK: &str = "State:";
pub const DESCRIPTION_MARK: &str = "Description:";
pub const INVENTORY_MARK: &str = "Inventory:";
pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const BOS: &str = "<bos>";

/// Special tokens matched inside words, longest first.
const SPECIALS: [&str; 8] = [
    DESCRIPTION_MARK,
    INVENTORY_MARK,
    ACTIONS_MARK,
    DELIM,
    PLACEHOLDER,
    ACTION_MARK,
    STATE_MARK,
    GOAL_MARK,
];

pub const MAX_GOAL: u8 = 100;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("split index {t} out of range for a trajectory of {len} steps")]
    SplitOutOfRange { t: usize, len: usize },
    #[error(transparent)]
    Goal(#[from] GoalError),
    #[error("sequence of {len} tokens exceeds the cap of {cap}")]
    TooLong { len: usize, cap: usize },
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed vocabulary file {path}: {message}")]
    Format { path: String, message: String },
}

// ---------------------------------------------------------------------------
// Templates

pub fn serialize_observation(obs: &Observation) -> String {
    format!(
        "{ACTIONS_MARK} {} {DELIM} {STATE_MARK} {} {DELIM} {DESCRIPTION_MARK} {} {DELIM} {INVENTORY_MARK} {} {DELIM}",
        obs.candidate_actions.join(", "),
        obs.message,
        obs.description,
        obs.inventory
    )
}

pub fn render_goal(g: u8) -> String {
    format!("{GOAL_MARK} {g} {DELIM}")
}

pub fn render_action(action: &str) -> String {
    format!("{ACTION_MARK} {action} {DELIM}")
}

/// Output text `[g_t, a_t, o_{t+1}]`.
pub fn render_output(goal: u8, action: &str, next_observation: Option<&str>) -> String {
    let head = format!("{} {}", render_goal(goal), render_action(action));
    match next_observation {
        Some(o) => format!("{head} {o}"),
        None => head,
    }
}

/// Input text `[o_0, g_0, a_0, <STATE>, ..., g_{t-1}, a_{t-1}, o_t]`.
///
/// `observations` holds `o_0..=o_t`; only the first and last are rendered in
/// full.
pub fn render_input(observations: &[&Observation], goals: &[u8], actions: &[&str]) -> String {
    let t = actions.len();
    assert_eq!(goals.len(), t);
    assert_eq!(observations.len(), t + 1);
    let mut parts = vec![serialize_observation(observations[0])];
    for i in 0..t {
        parts.push(render_goal(goals[i]));
        parts.push(render_action(actions[i]));
        if i + 1 < t {
            parts.push(PLACEHOLDER.to_string());
        }
    }
    if t > 0 {
        parts.push(serialize_observation(observations[t]));
    }
    parts.join(" ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SerializedPair {
    pub input_text: String,
    pub output_text: String,
    pub split_index: usize,
    pub game: String,
}

/// Splits a trajectory after `t` steps. Valid splits are `0..=T` where
/// `T = len - 1`; the last split has no next observation.
pub fn serialize_pair(
    traj: &Trajectory,
    t: usize,
    strategy: GoalStrategy,
    max_score: i64,
) -> Result<SerializedPair, CodecError> {
    let len = traj.len();
    if t >= len {
        return Err(CodecError::SplitOutOfRange { t, len });
    }
    let goals = normalized_goals(&traj.rewards(), strategy, max_score)?;
    let observations: Vec<&Observation> = traj.steps[..=t].iter().map(|s| &s.observation).collect();
    let actions: Vec<&str> = traj.steps[..t].iter().map(|s| s.action.as_str()).collect();
    let next = traj.steps.get(t + 1).map(|s| serialize_observation(&s.observation));
    Ok(SerializedPair {
        input_text: render_input(&observations, &goals[..t], &actions),
        output_text: render_output(goals[t], &traj.steps[t].action, next.as_deref()),
        split_index: t,
        game: traj.game.clone(),
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParsedOutput {
    pub goal: Option<u8>,
    pub action: Option<String>,
    pub observation: Option<String>,
}

/// Extracts `(g, a, o)` from generated text. Missing or malformed fields
/// come back as `None`.
pub fn parse_output(text: &str) -> ParsedOutput {
    let mut out = ParsedOutput::default();
    let mut rest = text;

    if let Some(pos) = find_marker(text, GOAL_MARK) {
        let after = &text[pos + GOAL_MARK.len()..];
        if let Some(end) = after.find(DELIM) {
            let value = after[..end].trim();
            out.goal = value.parse::<u8>().ok().filter(|g| *g <= MAX_GOAL);
            rest = &after[end + DELIM.len()..];
        }
    }
    if let Some(pos) = find_marker(rest, ACTION_MARK) {
        let after = &rest[pos + ACTION_MARK.len()..];
        if let Some(end) = after.find(DELIM) {
            let action = after[..end].trim();
            if !action.is_empty() {
                out.action = Some(action.to_string());
            }
            let tail = &after[end + DELIM.len()..];
            let tail = tail.strip_prefix(' ').unwrap_or(tail);
            if !tail.trim().is_empty() {
                out.observation = Some(tail.to_string());
            }
        }
    }
    out
}

/// Position of a marker that stands as its own word.
fn find_marker(text: &str, marker: &str) -> Option<usize> {
    text.match_indices(marker).map(|(i, _)| i).find(|&i| {
        let before_ok = i == 0 || text[..i].ends_with(char::is_whitespace);
        let after = &text[i + marker.len()..];
        // "Action:" must not be read out of "Actions:"
        before_ok && (after.is_empty() || after.starts_with(char::is_whitespace))
    })
}

// ---------------------------------------------------------------------------
// Vocabulary

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub const BOS_ID: u32 = 2;

    /// Builds a vocabulary over the words of `corpus`. Special tokens and
    /// goal numerals always come first, in a fixed order; corpus words follow
    /// in sorted order.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Vocabulary {
        let mut fixed: Vec<String> = [PAD, UNK, BOS].iter().map(|s| s.to_string()).collect();
        fixed.extend([DELIM, PLACEHOLDER, ACTION_MARK, GOAL_MARK, ACTIONS_MARK, STATE_MARK, DESCRIPTION_MARK, INVENTORY_MARK].map(String::from));
        fixed.extend((0..=MAX_GOAL).map(|g| g.to_string()));
        let reserved: BTreeSet<&str> = fixed.iter().map(String::as_str).collect();
        let mut words = BTreeSet::new();
        for text in corpus {
            for piece in segment(text) {
                if !reserved.contains(piece) {
                    words.insert(piece.to_string());
                }
            }
        }
        let mut tokens = fixed;
        tokens.extend(words);
        Self::from_tokens(tokens)
    }

    /// Vocabulary over every observation reachable in `games` plus their
    /// walkthrough actions.
    pub fn for_games(games: &[Arc<GameSpec>]) -> Vocabulary {
        let mut texts = Vec::new();
        for g in games {
            for o in reachable_observations(g) {
                texts.push(serialize_observation(&o));
            }
            texts.extend(g.walkthrough.iter().cloned());
        }
        Self::build(texts.iter().map(String::as_str))
    }

    fn from_tokens(tokens: Vec<String>) -> Vocabulary {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn pad(&self) -> u32 {
        0
    }

    pub fn unk(&self) -> u32 {
        1
    }

    pub fn bos(&self) -> u32 {
        Self::BOS_ID
    }

    pub fn delim(&self) -> u32 {
        self.index[DELIM]
    }

    pub fn goal_mark(&self) -> u32 {
        self.index[GOAL_MARK]
    }

    pub fn action_mark(&self) -> u32 {
        self.index[ACTION_MARK]
    }

    /// Token id of goal value `g`.
    pub fn goal_token(&self, g: u8) -> u32 {
        assert!(g <= MAX_GOAL);
        self.index[&g.to_string()]
    }

    /// Goal value of a token id, if it is a goal token.
    pub fn goal_value(&self, id: u32) -> Option<u8> {
        let first = self.goal_token(0);
        (first..=first + MAX_GOAL as u32).contains(&id).then(|| (id - first) as u8)
    }

    /// Content hash identifying this token table.
    pub fn version(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        segment(text)
            .map(|piece| self.id(piece).unwrap_or(self.unk()))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| id != self.pad() && id != self.bos())
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<(), CodecError> {
        #[derive(Serialize)]
        struct File<'a> {
            version: String,
            tokens: &'a [String],
        }
        let json = serde_json::to_string_pretty(&File {
            version: self.version(),
            tokens: &self.tokens,
        })
        .expect("vocabulary serializes");
        fs::write(path, json + "\n").map_err(|source| CodecError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Vocabulary, CodecError> {
        #[derive(Deserialize)]
        struct File {
            version: String,
            tokens: Vec<String>,
        }
        let text = fs::read_to_string(path).map_err(|source| CodecError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let file: File = serde_json::from_str(&text).map_err(|e| CodecError::Format {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let vocab = Self::from_tokens(file.tokens);
        if vocab.version() != file.version {
            return Err(CodecError::Format {
                path: path.display().to_string(),
                message: format!("version {} does not match token table {}", file.version, vocab.version()),
            });
        }
        Ok(vocab)
    }
}

/// Whitespace segmentation with special tokens split out of words,
/// longest match first.
fn segment(text: &str) -> impl Iterator<Item = &str> {
    text.split_whitespace().flat_map(split_specials)
}

fn split_specials(word: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < word.len() {
        if let Some(s) = SPECIALS.iter().find(|s| word[i..].starts_with(**s)) {
            if start < i {
                out.push(&word[start..i]);
            }
            out.push(&word[i..i + s.len()]);
            i += s.len();
            start = i;
        } else {
            i += word[i..].chars().next().map_or(1, char::len_utf8);
        }
    }
    if start < word.len() {
        out.push(&word[start..]);
    }
    out
}

// ---------------------------------------------------------------------------
// Token-level examples

/// A tokenized training example. The first `goal_action_len` output tokens
/// form the `[g a]` span; the rest form the next-observation span.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPair {
    pub input: Vec<u32>,
    pub output: Vec<u32>,
    pub goal_action_len: usize,
}

/// Encodes a model input, dropping the oldest goal/action pairs after `o_0`
/// when it exceeds `max_tokens`.
pub fn encode_context(
    vocab: &Vocabulary,
    observations: &[&Observation],
    goals: &[u8],
    actions: &[&str],
    max_tokens: usize,
) -> Result<Vec<u32>, CodecError> {
    let t = actions.len();
    let first = vocab.encode(&serialize_observation(observations[0]));
    if t == 0 {
        return check_len(first, max_tokens);
    }
    let last = vocab.encode(&serialize_observation(observations[t]));
    let chunks: Vec<Vec<u32>> = (0..t)
        .map(|i| {
            let mut c = vocab.encode(&render_goal(goals[i]));
            c.extend(vocab.encode(&render_action(actions[i])));
            if i + 1 < t {
                c.push(vocab.id(PLACEHOLDER).unwrap());
            }
            c
        })
        .collect();
    let mut total = first.len() + last.len() + chunks.iter().map(Vec::len).sum::<usize>();
    let mut skip = 0;
    while total > max_tokens && skip < chunks.len() {
        total -= chunks[skip].len();
        skip += 1;
    }
    let mut out = first;
    for c in &chunks[skip..] {
        out.extend_from_slice(c);
    }
    out.extend(last);
    check_len(out, max_tokens)
}

fn check_len(tokens: Vec<u32>, cap: usize) -> Result<Vec<u32>, CodecError> {
    if tokens.len() > cap {
        Err(CodecError::TooLong { len: tokens.len(), cap })
    } else {
        Ok(tokens)
    }
}

/// Tokenizes split `t` of a trajectory for training. The next-observation
/// span is cut to fit `max_output`.
pub fn encode_pair(
    vocab: &Vocabulary,
    traj: &Trajectory,
    t: usize,
    goals: &[u8],
    max_input: usize,
    max_output: usize,
) -> Result<EncodedPair, CodecError> {
    if t >= traj.len() {
        return Err(CodecError::SplitOutOfRange { t, len: traj.len() });
    }
    let observations: Vec<&Observation> = traj.steps[..=t].iter().map(|s| &s.observation).collect();
    let actions: Vec<&str> = traj.steps[..t].iter().map(|s| s.action.as_str()).collect();
    let input = encode_context(vocab, &observations, &goals[..t], &actions, max_input)?;
    let mut output = vocab.encode(&render_goal(goals[t]));
    output.extend(vocab.encode(&render_action(&traj.steps[t].action)));
    let goal_action_len = output.len();
    if goal_action_len > max_output {
        return Err(CodecError::TooLong {
            len: goal_action_len,
            cap: max_output,
        });
    }
    if let Some(next) = traj.steps.get(t + 1) {
        let o = vocab.encode(&serialize_observation(&next.observation));
        let room = max_output - goal_action_len;
        output.extend_from_slice(&o[..o.len().min(room)]);
    }
    Ok(EncodedPair {
        input,
        output,
        goal_action_len,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{bundled_game, bundled_games, reachable_observations, EngineState};
    use crate::trajectory::generate_walkthrough;
    use std::sync::Arc;

    fn corpus_vocab() -> Vocabulary {
        Vocabulary::for_games(&bundled_games())
    }

    #[test]
    fn gemhunt_start_observation_text() {
        let g = bundled_game("gemhunt").unwrap();
        let (_, obs) = EngineState::reset(g, 0);
        let text = serialize_observation(&obs);
        assert!(text.starts_with("Actions: take key, go north </s></s> State: "), "{text}");
        assert!(text.ends_with("Inventory: You are empty-handed. </s></s>"));
    }

    #[test]
    fn empty_field_keeps_marker() {
        let obs = Observation {
            candidate_actions: vec!["look".into()],
            message: "m".into(),
            description: "d".into(),
            inventory: String::new(),
        };
        assert!(serialize_observation(&obs).ends_with("Inventory:  </s></s>"));
    }

    #[test]
    fn serialization_is_injective_on_gemhunt() {
        let g = bundled_game("gemhunt").unwrap();
        let obs = reachable_observations(&g);
        let texts: BTreeSet<String> = obs.iter().map(serialize_observation).collect();
        assert_eq!(texts.len(), obs.len());
    }

    #[test]
    fn split_zero_is_first_observation() {
        let g = bundled_game("gemhunt").unwrap();
        let traj = generate_walkthrough(&g, 0).unwrap();
        let pair = serialize_pair(&traj, 0, GoalStrategy::ReturnToGo, 50).unwrap();
        assert_eq!(pair.input_text, serialize_observation(&traj.steps[0].observation));
        assert!(!pair.input_text.contains(PLACEHOLDER));
    }

    #[test]
    fn split_two_has_one_placeholder() {
        let g = bundled_game("gemhunt").unwrap();
        let traj = generate_walkthrough(&g, 0).unwrap();
        let pair = serialize_pair(&traj, 2, GoalStrategy::ReturnToGo, 50).unwrap();
        assert_eq!(pair.input_text.matches(PLACEHOLDER).count(), 1);
    }

    #[test]
    fn gemhunt_split_one_rtg_goal() {
        let g = bundled_game("gemhunt").unwrap();
        let traj = generate_walkthrough(&g, 0).unwrap();
        let pair = serialize_pair(&traj, 1, GoalStrategy::ReturnToGo, 50).unwrap();
        assert!(pair.output_text.starts_with("GC: 80 </s></s> Action: go north </s></s> Actions: "));
    }

    #[test]
    fn last_split_has_no_next_observation() {
        let g = bundled_game("gemhunt").unwrap();
        let traj = generate_walkthrough(&g, 0).unwrap();
        let t = traj.len() - 1;
        let pair = serialize_pair(&traj, t, GoalStrategy::ReturnToGo, 50).unwrap();
        assert_eq!(pair.output_text, "GC: 30 </s></s> Action: place gems </s></s>");
        assert!(matches!(
            serialize_pair(&traj, traj.len(), GoalStrategy::ReturnToGo, 50),
            Err(CodecError::SplitOutOfRange { .. })
        ));
    }

    #[test]
    fn parse_examples() {
        let p = parse_output("GC: 80 </s></s> Action: take key </s></s> Actions: ...");
        assert_eq!(p.goal, Some(80));
        assert_eq!(p.action.as_deref(), Some("take key"));
        assert_eq!(p.observation.as_deref(), Some("Actions: ..."));
        assert_eq!(parse_output("garbled ramble with no markers"), ParsedOutput::default());
        let p = parse_output("GC: 80 </s></s>");
        assert_eq!((p.goal, p.action, p.observation), (Some(80), None, None));
        assert_eq!(parse_output("GC: 180 </s></s>").goal, None);
        assert_eq!(parse_output("Action:  </s></s>").action, None);
    }

    #[test]
    fn encode_goal_tokens() {
        let v = corpus_vocab();
        assert_eq!(
            v.encode("GC: 43 </s></s>"),
            vec![v.goal_mark(), v.goal_token(43), v.delim()]
        );
        assert_eq!(v.goal_value(v.goal_token(43)), Some(43));
        assert_eq!(v.goal_value(v.delim()), None);
        assert!(v.encode("xylophone").contains(&v.unk()));
    }

    #[test]
    fn specials_split_longest_first() {
        let v = corpus_vocab();
        assert_eq!(v.encode("Actions:"), vec![v.id(ACTIONS_MARK).unwrap()]);
        assert_eq!(v.encode("key</s></s>"), vec![v.id("key").unwrap(), v.delim()]);
    }

    #[test]
    fn decode_inverts_encode_on_bundled_observations() {
        let v = corpus_vocab();
        for g in bundled_games() {
            for o in reachable_observations(&g) {
                let s = serialize_observation(&o);
                let ids = v.encode(&s);
                assert!(!ids.contains(&v.unk()), "{s}");
                assert_eq!(v.decode(&ids), s);
            }
        }
    }

    #[test]
    fn vocabulary_file_round_trip() {
        let v = corpus_vocab();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.json");
        v.save(&path).unwrap();
        let back = Vocabulary::load(&path).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.version(), v.version());
        // ids are stable for a fixed corpus
        assert_eq!(corpus_vocab().version(), v.version());
    }

    #[test]
    fn context_truncation_drops_oldest_pairs() {
        let v = corpus_vocab();
        let g = bundled_game("labyrinth").unwrap();
        let traj = generate_walkthrough(&g, 0).unwrap();
        let t = traj.len() - 1;
        let goals = normalized_goals(&traj.rewards(), GoalStrategy::ReturnToGo, g.max_score).unwrap();
        let obs: Vec<&Observation> = traj.steps[..=t].iter().map(|s| &s.observation).collect();
        let acts = traj.actions()[..t].to_vec();
        let full = encode_context(&v, &obs, &goals[..t], &acts, 4096).unwrap();
        assert_eq!(v.decode(&full), render_input(&obs, &goals[..t], &acts));
        let cap = full.len() - 10;
        let cut = encode_context(&v, &obs, &goals[..t], &acts, cap).unwrap();
        assert!(cut.len() <= cap);
        let first = v.encode(&serialize_observation(obs[0]));
        let last = v.encode(&serialize_observation(obs[t]));
        assert_eq!(cut[..first.len()], first[..]);
        assert_eq!(cut[cut.len() - last.len()..], last[..]);
        assert!(encode_context(&v, &obs, &goals[..t], &acts, first.len()).is_err());
    }

    #[test]
    fn encoded_pair_spans() {
        let v = corpus_vocab();
        let g: Arc<_> = bundled_game("gemhunt").unwrap();
        let traj = generate_walkthrough(&g, 0).unwrap();
        let goals = normalized_goals(&traj.rewards(), GoalStrategy::ReturnToGo, 50).unwrap();
        let p = encode_pair(&v, &traj, 1, &goals, 512, 128).unwrap();
        assert_eq!(v.decode(&p.output[..p.goal_action_len]), "GC: 80 </s></s> Action: go north </s></s>");
        let text = serialize_pair(&traj, 1, GoalStrategy::ReturnToGo, 50).unwrap();
        assert_eq!(v.decode(&p.output), text.output_text);
        assert_eq!(v.decode(&p.input), text.input_text);
        let short = encode_pair(&v, &traj, 1, &goals, 512, 12).unwrap();
        assert_eq!(short.output.len(), 12);
    }
}
