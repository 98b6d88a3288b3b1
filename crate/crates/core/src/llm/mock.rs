use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use super::{BackendError, ChatBackend, CompletionParams};
use crate::conversation::{Conversation, DataError};
use crate::prompt::{ChatMessage, ANSWER_DIRECTIVE, ANSWER_MARKER};

/// Answer emitted by the mock when the request asks for one.
pub const MOCK_ANSWER: &str = "No answer available.";

/// Deterministic backend keyed on the current utterance.
///
/// The utterance is the last line of the final message. It is looked up in
/// a `raw -> rewrite` fixture map and echoed unchanged when absent.
#[derive(Debug, Default)]
pub struct MockBackend {
    fixture: HashMap<String, String>,
    calls: AtomicUsize,
}

impl MockBackend {
    pub fn new(fixture: HashMap<String, String>) -> Self {
        Self {
            fixture,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        Self::new(
            pairs
                .into_iter()
                .map(|(raw, rewrite)| (raw.to_string(), rewrite.to_string()))
                .collect(),
        )
    }

    /// Maps every raw utterance to its manual rewrite.
    pub fn from_manual(conversations: &[Conversation]) -> Self {
        let mut fixture = HashMap::new();
        for turn in conversations.iter().flat_map(|c| &c.turns) {
            if let Some(manual) = &turn.manual {
                if let Some(prev) = fixture.insert(turn.raw.clone(), manual.clone()) {
                    if &prev != manual {
                        log::warn!("mock fixture: conflicting rewrites for {:?}", turn.raw);
                    }
                }
            }
        }
        Self::new(fixture)
    }

    /// Reads `<raw>\t<rewrite>` lines.
    pub fn from_file(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut fixture = HashMap::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (raw, rewrite) = line.split_once('\t').ok_or_else(|| DataError::Line {
                path: path.display().to_string(),
                line: idx + 1,
                message: "expected <raw>\\t<rewrite>".into(),
            })?;
            fixture.insert(raw.trim().to_string(), rewrite.trim().to_string());
        }
        Ok(Self::new(fixture))
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn respond(&self, final_message: &str) -> String {
        let utterance = final_message.rsplit('\n').next().unwrap_or("").trim();
        let rewrite = self
            .fixture
            .get(utterance)
            .cloned()
            .unwrap_or_else(|| utterance.to_string());
        if final_message.contains(ANSWER_DIRECTIVE) {
            format!("{rewrite}\n{ANSWER_MARKER} {MOCK_ANSWER}")
        } else {
            rewrite
        }
    }
}

impl ChatBackend for MockBackend {
    fn complete(
        &self,
        messages: &[ChatMessage],
        _params: &CompletionParams,
    ) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let last = messages.last().map(|m| m.content.as_str()).unwrap_or("");
        Ok(self.respond(last))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::Role;

    #[test]
    fn lookup_and_echo() {
        let mock = MockBackend::from_pairs([("Is it treatable?", "Is throat cancer treatable?")]);
        let params = CompletionParams::default();
        let hit = [ChatMessage::new(Role::User, "Rewrite this.\n\nIs it treatable?")];
        assert_eq!(mock.complete(&hit, &params).unwrap(), "Is throat cancer treatable?");
        let miss = [ChatMessage::new(Role::User, "Rewrite this.\n\nWhat about dogs?")];
        assert_eq!(mock.complete(&miss, &params).unwrap(), "What about dogs?");
        assert_eq!(mock.calls(), 2);
    }

    #[test]
    fn answer_directive_adds_answer_line() {
        let mock = MockBackend::default();
        let msg = format!("x\n\n{ANSWER_DIRECTIVE}\n\nWhy?");
        assert_eq!(mock.respond(&msg), format!("Why?\nAnswer: {MOCK_ANSWER}"));
    }
}
