//! Multi-turn conversations, their turns, and the topic file formats.
//!
//! A [`Turn`] carries the raw utterance together with the optional manual
//! rewrite, the model rewrite and the model-generated answer. Conversations
//! are validated on load: turn numbers must run `1..=n` without gaps or
//! duplicates and every raw utterance must be non-empty.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("malformed turn key {0:?}: expected <conv_id>_<turn_no> with positive integers")]
    TurnKey(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid topic JSON in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}:{line}: {message}")]
    Line {
        path: String,
        line: usize,
        message: String,
    },
    #[error("conversation {conv_id}: duplicate turn {turn_no}")]
    DuplicateTurn { conv_id: u32, turn_no: u32 },
    #[error("conversation {conv_id}: turn numbering has a gap, expected turn {expected} but found {found}")]
    TurnGap {
        conv_id: u32,
        expected: u32,
        found: u32,
    },
    #[error("conversation {conv_id}: {message}")]
    InvalidConversation { conv_id: u32, message: String },
    #[error("duplicate conversation {0}")]
    DuplicateConversation(u32),
    #[error("duplicate key {key} in {path}")]
    DuplicateKey { path: String, key: String },
}

/// Identifier of one conversational turn, printed as `<conv_id>_<turn_no>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TurnKey {
    pub conv_id: u32,
    pub turn_no: u32,
}

impl TurnKey {
    pub fn new(conv_id: u32, turn_no: u32) -> Self {
        Self { conv_id, turn_no }
    }
}

impl fmt::Display for TurnKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}", self.conv_id, self.turn_no)
    }
}

impl FromStr for TurnKey {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_turn_key(s)
    }
}

fn parse_positive(digits: &str) -> Option<u32> {
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse::<u32>().ok().filter(|&n| n > 0)
}

pub fn parse_turn_key(key: &str) -> Result<TurnKey, DataError> {
    let bad = || DataError::TurnKey(key.to_string());
    let (conv, turn) = key.split_once('_').ok_or_else(bad)?;
    let conv_id = parse_positive(conv).ok_or_else(bad)?;
    let turn_no = parse_positive(turn).ok_or_else(bad)?;
    Ok(TurnKey { conv_id, turn_no })
}

pub fn format_turn_key(conv_id: u32, turn_no: u32) -> String {
    TurnKey::new(conv_id, turn_no).to_string()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Turn {
    pub conv_id: u32,
    pub turn_no: u32,
    pub raw: String,
    pub manual: Option<String>,
    pub rewritten: Option<String>,
    pub answer: Option<String>,
}

impl Turn {
    pub fn new(conv_id: u32, turn_no: u32, raw: impl Into<String>) -> Self {
        Self {
            conv_id,
            turn_no,
            raw: raw.into().trim().to_string(),
            manual: None,
            rewritten: None,
            answer: None,
        }
    }

    pub fn with_manual(mut self, manual: impl Into<String>) -> Self {
        self.manual = Some(manual.into().trim().to_string());
        self
    }

    pub fn key(&self) -> TurnKey {
        TurnKey::new(self.conv_id, self.turn_no)
    }

    fn validate(&self) -> Result<(), DataError> {
        let invalid = |message: String| DataError::InvalidConversation {
            conv_id: self.conv_id,
            message,
        };
        if self.conv_id == 0 || self.turn_no == 0 {
            return Err(invalid(format!("turn {} has a zero identifier", self.key())));
        }
        if self.raw.trim().is_empty() {
            return Err(invalid(format!("turn {} has an empty raw utterance", self.key())));
        }
        if self.turn_no == 1 {
            if let Some(rewritten) = &self.rewritten {
                if rewritten != &self.raw {
                    return Err(invalid(format!(
                        "turn {} is a first turn but its rewrite differs from the raw utterance",
                        self.key()
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conversation {
    pub conv_id: u32,
    pub turns: Vec<Turn>,
}

impl Conversation {
    /// Sorts turns by number and checks the conversation invariants.
    pub fn new(conv_id: u32, mut turns: Vec<Turn>) -> Result<Self, DataError> {
        turns.sort_by_key(|t| t.turn_no);
        let conv = Self { conv_id, turns };
        conv.validate()?;
        Ok(conv)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.conv_id == 0 {
            return Err(DataError::InvalidConversation {
                conv_id: 0,
                message: "conversation id must be positive".into(),
            });
        }
        if self.turns.is_empty() {
            return Err(DataError::InvalidConversation {
                conv_id: self.conv_id,
                message: "conversation has no turns".into(),
            });
        }
        for (idx, turn) in self.turns.iter().enumerate() {
            if turn.conv_id != self.conv_id {
                return Err(DataError::InvalidConversation {
                    conv_id: self.conv_id,
                    message: format!("turn {} belongs to conversation {}", turn.key(), turn.conv_id),
                });
            }
            let expected = idx as u32 + 1;
            if turn.turn_no < expected {
                return Err(DataError::DuplicateTurn {
                    conv_id: self.conv_id,
                    turn_no: turn.turn_no,
                });
            }
            if turn.turn_no != expected {
                return Err(DataError::TurnGap {
                    conv_id: self.conv_id,
                    expected,
                    found: turn.turn_no,
                });
            }
            turn.validate()?;
        }
        Ok(())
    }

    pub fn has_all_manual(&self) -> bool {
        self.turns.iter().all(|t| t.manual.is_some())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TopicFormat {
    CastJson,
    Tsv,
}

impl TopicFormat {
    /// Guesses the format from the file extension; anything but `.tsv` is JSON.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("tsv") | Some("txt") => TopicFormat::Tsv,
            _ => TopicFormat::CastJson,
        }
    }
}

impl FromStr for TopicFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cast-json" | "json" => Ok(TopicFormat::CastJson),
            "tsv" => Ok(TopicFormat::Tsv),
            other => Err(format!("unknown topic format {other:?} (expected cast-json or tsv)")),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonTopic {
    number: u32,
    turns: Vec<JsonTurn>,
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonTurn {
    number: u32,
    raw_utterance: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    manual_utterance: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rewritten_utterance: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    answer: Option<String>,
}

fn read_text(path: &Path) -> Result<String, DataError> {
    fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn trimmed_opt(value: Option<String>) -> Option<String> {
    value.map(|v| v.trim().to_string())
}

fn group_turns(
    order: Vec<u32>,
    mut by_conv: BTreeMap<u32, Vec<Turn>>,
) -> Result<Vec<Conversation>, DataError> {
    order
        .into_iter()
        .map(|conv_id| {
            let turns = by_conv.remove(&conv_id).unwrap_or_default();
            let mut seen = HashSet::new();
            for t in &turns {
                if !seen.insert(t.turn_no) {
                    return Err(DataError::DuplicateTurn {
                        conv_id,
                        turn_no: t.turn_no,
                    });
                }
            }
            Conversation::new(conv_id, turns)
        })
        .collect()
}

pub fn parse_topics_json(text: &str, origin: &str) -> Result<Vec<Conversation>, DataError> {
    let topics: Vec<JsonTopic> = serde_json::from_str(text).map_err(|source| DataError::Json {
        path: origin.to_string(),
        source,
    })?;
    let mut order = Vec::new();
    let mut by_conv = BTreeMap::new();
    for topic in topics {
        if by_conv.contains_key(&topic.number) {
            return Err(DataError::DuplicateConversation(topic.number));
        }
        let turns = topic
            .turns
            .into_iter()
            .map(|t| Turn {
                conv_id: topic.number,
                turn_no: t.number,
                raw: t.raw_utterance.trim().to_string(),
                manual: trimmed_opt(t.manual_utterance),
                rewritten: trimmed_opt(t.rewritten_utterance),
                answer: trimmed_opt(t.answer),
            })
            .collect();
        order.push(topic.number);
        by_conv.insert(topic.number, turns);
    }
    group_turns(order, by_conv)
}

/// TSV topics: `<turn_key>\t<raw>[\t<manual>]`, `#` starts a comment line.
pub fn parse_topics_tsv(text: &str, origin: &str) -> Result<Vec<Conversation>, DataError> {
    let mut order = Vec::new();
    let mut by_conv: BTreeMap<u32, Vec<Turn>> = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let line_err = |message: String| DataError::Line {
            path: origin.to_string(),
            line: idx + 1,
            message,
        };
        let mut cols = line.split('\t');
        let key = cols.next().unwrap_or_default();
        let key = parse_turn_key(key.trim()).map_err(|e| line_err(e.to_string()))?;
        let raw = cols
            .next()
            .ok_or_else(|| line_err("missing raw utterance column".into()))?;
        let manual = cols.next().map(str::trim).filter(|m| !m.is_empty());
        if cols.next().is_some() {
            return Err(line_err("too many columns".into()));
        }
        let mut turn = Turn::new(key.conv_id, key.turn_no, raw);
        if let Some(m) = manual {
            turn = turn.with_manual(m);
        }
        if !by_conv.contains_key(&key.conv_id) {
            order.push(key.conv_id);
        }
        by_conv.entry(key.conv_id).or_default().push(turn);
    }
    group_turns(order, by_conv)
}

pub fn load_topics(path: &Path, format: TopicFormat) -> Result<Vec<Conversation>, DataError> {
    let text = read_text(path)?;
    let origin = path.display().to_string();
    match format {
        TopicFormat::CastJson => parse_topics_json(&text, &origin),
        TopicFormat::Tsv => parse_topics_tsv(&text, &origin),
    }
}

pub fn topics_to_json(conversations: &[Conversation]) -> String {
    let topics: Vec<JsonTopic> = conversations
        .iter()
        .map(|c| JsonTopic {
            number: c.conv_id,
            turns: c
                .turns
                .iter()
                .map(|t| JsonTurn {
                    number: t.turn_no,
                    raw_utterance: t.raw.clone(),
                    manual_utterance: t.manual.clone(),
                    rewritten_utterance: t.rewritten.clone(),
                    answer: t.answer.clone(),
                })
                .collect(),
        })
        .collect();
    let mut out = serde_json::to_string_pretty(&topics).expect("topics serialize");
    out.push('\n');
    out
}

/// TSV serialization carries only raw and manual utterances.
pub fn topics_to_tsv(conversations: &[Conversation]) -> String {
    let mut out = String::new();
    for turn in conversations.iter().flat_map(|c| &c.turns) {
        out.push_str(&turn.key().to_string());
        out.push('\t');
        out.push_str(&turn.raw);
        if let Some(m) = &turn.manual {
            out.push('\t');
            out.push_str(m);
        }
        out.push('\n');
    }
    out
}

pub fn save_topics(
    conversations: &[Conversation],
    path: &Path,
    format: TopicFormat,
) -> Result<(), DataError> {
    let text = match format {
        TopicFormat::CastJson => topics_to_json(conversations),
        TopicFormat::Tsv => topics_to_tsv(conversations),
    };
    fs::write(path, text).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Parses `<turn_key>\t<text>` lines. Blank lines and `#` comments are skipped.
pub fn parse_keyed_lines(text: &str, origin: &str) -> Result<BTreeMap<TurnKey, String>, DataError> {
    let mut map = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let line_err = |message: String| DataError::Line {
            path: origin.to_string(),
            line: idx + 1,
            message,
        };
        let (key, value) = line
            .split_once('\t')
            .ok_or_else(|| line_err("expected <turn_key>\\t<text>".into()))?;
        let key = parse_turn_key(key.trim()).map_err(|e| line_err(e.to_string()))?;
        if map.insert(key, value.trim().to_string()).is_some() {
            return Err(DataError::DuplicateKey {
                path: origin.to_string(),
                key: key.to_string(),
            });
        }
    }
    Ok(map)
}

pub fn load_manual_rewrites(path: &Path) -> Result<BTreeMap<TurnKey, String>, DataError> {
    let text = read_text(path)?;
    parse_keyed_lines(&text, &path.display().to_string())
}

/// Applies sidecar manual rewrites; the sidecar wins over inline values.
/// Returns the number of sidecar entries that matched no turn.
pub fn apply_manual_rewrites(
    conversations: &mut [Conversation],
    rewrites: &BTreeMap<TurnKey, String>,
) -> usize {
    let mut matched = 0;
    for turn in conversations.iter_mut().flat_map(|c| c.turns.iter_mut()) {
        if let Some(text) = rewrites.get(&turn.key()) {
            turn.manual = Some(text.clone());
            matched += 1;
        }
    }
    let unmatched = rewrites.len() - matched;
    if unmatched > 0 {
        log::warn!("{unmatched} manual rewrites do not match any loaded turn");
    }
    unmatched
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn turn_keys_parse_and_reject() {
        assert_eq!(parse_turn_key("31_4").unwrap(), TurnKey::new(31, 4));
        assert_eq!(parse_turn_key("1_1").unwrap(), TurnKey::new(1, 1));
        for bad in ["31-4", "31_", "_4", "0_1", "1_0", "a_1", "1_2_3", "", "+1_2"] {
            let err = parse_turn_key(bad).unwrap_err();
            assert!(err.to_string().contains(&format!("{bad:?}")), "{err}");
        }
        assert_eq!(format_turn_key(31, 4), "31_4");
    }

    #[test]
    fn empty_topic_array() {
        assert!(parse_topics_json("[]", "mem").unwrap().is_empty());
    }

    #[test]
    fn gap_and_duplicate_are_reported_with_conversation() {
        let gap = r#"[{"number": 7, "turns": [
            {"number": 1, "raw_utterance": "a"},
            {"number": 3, "raw_utterance": "b"}]}]"#;
        let err = parse_topics_json(gap, "mem").unwrap_err();
        assert!(matches!(err, DataError::TurnGap { conv_id: 7, expected: 2, found: 3 }));

        let dup = "7_1\ta\n7_1\tb\n";
        let err = parse_topics_tsv(dup, "mem").unwrap_err();
        assert!(matches!(err, DataError::DuplicateTurn { conv_id: 7, turn_no: 1 }));
    }

    #[test]
    fn empty_raw_utterance_is_rejected() {
        let err = parse_topics_tsv("3_1\t   \n", "mem").unwrap_err();
        assert!(err.to_string().contains("conversation 3"));
    }

    #[test]
    fn first_turn_rewrite_must_equal_raw() {
        let mut t = Turn::new(1, 1, "What is throat cancer?");
        t.rewritten = Some("something else".into());
        assert!(Conversation::new(1, vec![t]).is_err());
    }

    #[test]
    fn manual_sidecar_overrides_inline() {
        let mut convs = parse_topics_tsv("31_1\tWhat is throat cancer?\n31_2\tIs it treatable?\told\n", "m")
            .unwrap();
        let sidecar = parse_keyed_lines("31_2\tIs throat cancer treatable?\n", "s").unwrap();
        assert_eq!(apply_manual_rewrites(&mut convs, &sidecar), 0);
        assert_eq!(convs[0].turns[1].manual.as_deref(), Some("Is throat cancer treatable?"));
    }

    #[test]
    fn sidecar_duplicates_and_empty() {
        assert!(parse_keyed_lines("", "s").unwrap().is_empty());
        let err = parse_keyed_lines("31_2\ta\n31_2\tb\n", "s").unwrap_err();
        assert!(matches!(err, DataError::DuplicateKey { .. }));
    }

    #[test]
    fn tsv_preserves_conversation_order() {
        let convs = parse_topics_tsv("9_1\ta\n2_1\tb\n9_2\tc\n", "m").unwrap();
        let ids: Vec<u32> = convs.iter().map(|c| c.conv_id).collect();
        assert_eq!(ids, vec![9, 2]);
        assert_eq!(convs[0].turns.len(), 2);
    }
}
