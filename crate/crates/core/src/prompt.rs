//! Composition of rewriting requests.
//!
//! A request is an ordered list of role-tagged messages: the system scope,
//! an example conversation (raw utterances answered with their manual
//! rewrites), the running context of the current conversation (raw
//! utterances answered with the model's own rewrites, plus generated answers
//! for templates that ask for them), and a final user message holding the
//! per-turn instruction and the current utterance.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conversation::{Conversation, Turn, TurnKey};
use crate::llm::{postprocess, BackendError, ChatBackend, CompletionParams, PostprocessError};

/// Sentence prepended to the instruction to form the system scope.
pub const SCOPE_FRAMING: &str = "You are an assistant that rewrites conversational questions.";

/// Output-format directive appended to the final user message of templates
/// that ask for an answer, so rewrite and answer can be told apart.
pub const ANSWER_DIRECTIVE: &str = "Write the rewritten question on the first line. \
Then write a line starting with \"Answer:\" followed by the answer.";

/// Label that separates a rewrite from its answer in assistant messages.
pub const ANSWER_MARKER: &str = "Answer:";

/// Number of inline example pairs embedded by the pattern-following template.
pub const INLINE_EXAMPLE_PAIRS: usize = 8;

const P1_TEXT: &str = "Rewrite the following question to be clear and complete and then provide an answer. Use the previous questions and answers to rewrite the question.";
const P2_TEXT: &str = "Rewrite the following question adding keywords for a retrieval system. Use the information from the previous questions. Return only the rewritten question.";
const P3_TEXT: &str = "Rephrase the current question into a more concise and context-free form that is suitable for a multi-turn information search dialog using the context of the previous question. Do not add any extra sentences or notes.";
const P4_TEXT: &str = "Reformulate the current question following the examples.";
const P5_TEXT: &str = "In a multi-turn dialog system, rewrite the given sentence to be self-explanatory following the pattern of the previous interactions.";
const E_TEXT: &str = "Reformulate the current question into a de-contextualized rewrite under the multi-turn information-seeking dialog context. Then generate a correct response. Print also the reformulated question.";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("example turn {0} has no manual rewrite")]
    MissingManual(TurnKey),
    #[error("history turn {0} has no model rewrite")]
    MissingRewrite(TurnKey),
    #[error("history turn {0} has no generated answer")]
    MissingAnswer(TurnKey),
    #[error("turn {current} cannot follow {history_len} completed turns")]
    TurnOrder { current: TurnKey, history_len: usize },
    #[error("no eligible example conversation for conversation {0}")]
    NoEligibleExample(u32),
    #[error("backend failed on turn {turn}: {source}")]
    Backend {
        turn: TurnKey,
        #[source]
        source: BackendError,
    },
    #[error("turn {turn}: {source}")]
    Postprocess {
        turn: TurnKey,
        #[source]
        source: PostprocessError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TemplateId {
    P1,
    P2,
    P3,
    P4,
    P5,
    E,
}

impl TemplateId {
    pub const ALL: [TemplateId; 6] = [
        TemplateId::P1,
        TemplateId::P2,
        TemplateId::P3,
        TemplateId::P4,
        TemplateId::P5,
        TemplateId::E,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::P1 => "P1",
            TemplateId::P2 => "P2",
            TemplateId::P3 => "P3",
            TemplateId::P4 => "P4",
            TemplateId::P5 => "P5",
            TemplateId::E => "E",
        }
    }

    pub fn uses_answers(self) -> bool {
        matches!(self, TemplateId::P1 | TemplateId::E)
    }

    pub fn instruction_text(self) -> &'static str {
        match self {
            TemplateId::P1 => P1_TEXT,
            TemplateId::P2 => P2_TEXT,
            TemplateId::P3 => P3_TEXT,
            TemplateId::P4 => P4_TEXT,
            TemplateId::P5 => P5_TEXT,
            TemplateId::E => E_TEXT,
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "P1" => Ok(TemplateId::P1),
            "P2" => Ok(TemplateId::P2),
            "P3" => Ok(TemplateId::P3),
            "P4" => Ok(TemplateId::P4),
            "P5" => Ok(TemplateId::P5),
            "E" => Ok(TemplateId::E),
            other => Err(format!("unknown template {other:?} (expected P1..P5 or E)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: TemplateId,
    pub scope_text: String,
    pub instruction_text: String,
    pub uses_answers: bool,
    pub inline_examples: bool,
    /// Whether generated answers are fed back into the context block.
    /// Always true for P1; configurable for E.
    pub answers_in_context: bool,
}

impl PromptTemplate {
    pub fn builtin(id: TemplateId) -> Self {
        let instruction_text = id.instruction_text().to_string();
        Self {
            id,
            scope_text: format!("{SCOPE_FRAMING} {instruction_text}"),
            instruction_text,
            uses_answers: id.uses_answers(),
            inline_examples: id == TemplateId::P4,
            answers_in_context: id.uses_answers(),
        }
    }

    /// Toggles answer feedback for E. P1 always carries answers in context.
    pub fn with_answers_in_context(mut self, enabled: bool) -> Self {
        if self.id == TemplateId::E {
            self.answers_in_context = enabled;
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewriteRequest {
    pub turn_key: String,
    pub template_id: TemplateId,
    pub messages: Vec<ChatMessage>,
}

/// Picks a random example conversation, never the current one, among
/// conversations whose turns all carry manual rewrites.
pub fn select_example(
    dataset: &[Conversation],
    current_conv: u32,
    seed: u64,
) -> Result<&Conversation, PromptError> {
    let eligible: Vec<&Conversation> = dataset
        .iter()
        .filter(|c| c.conv_id != current_conv && c.has_all_manual())
        .collect();
    if eligible.is_empty() {
        return Err(PromptError::NoEligibleExample(current_conv));
    }
    let stream = seed ^ u64::from(current_conv).rotate_left(32);
    let mut rng = ChaCha8Rng::seed_from_u64(stream);
    Ok(eligible[rng.random_range(0..eligible.len())])
}

fn inline_pairs(example: &Conversation) -> Result<String, PromptError> {
    let mut lines = Vec::with_capacity(INLINE_EXAMPLE_PAIRS);
    for turn in example.turns.iter().cycle().take(INLINE_EXAMPLE_PAIRS) {
        let manual = turn
            .manual
            .as_deref()
            .ok_or(PromptError::MissingManual(turn.key()))?;
        lines.push(format!("Question: {}\nRewritten: {}", turn.raw, manual));
    }
    Ok(lines.join("\n"))
}

fn context_reply(template: &PromptTemplate, turn: &Turn) -> Result<String, PromptError> {
    let rewrite = turn
        .rewritten
        .as_deref()
        .ok_or(PromptError::MissingRewrite(turn.key()))?;
    // First turns are never sent to the backend, so they have no answer.
    if !template.answers_in_context || turn.turn_no == 1 {
        return Ok(rewrite.to_string());
    }
    let answer = turn
        .answer
        .as_deref()
        .ok_or(PromptError::MissingAnswer(turn.key()))?;
    if answer.is_empty() {
        Ok(rewrite.to_string())
    } else {
        Ok(format!("{rewrite}\n{ANSWER_MARKER} {answer}"))
    }
}

pub fn final_user_content(
    template: &PromptTemplate,
    example: &Conversation,
    utterance: &str,
) -> Result<String, PromptError> {
    let mut blocks = vec![template.instruction_text.clone()];
    if template.inline_examples {
        blocks.push(inline_pairs(example)?);
    }
    if template.uses_answers {
        blocks.push(ANSWER_DIRECTIVE.to_string());
    }
    blocks.push(utterance.to_string());
    Ok(blocks.join("\n\n"))
}

pub fn build_request(
    template: &PromptTemplate,
    example: &Conversation,
    history: &[Turn],
    current: &Turn,
) -> Result<RewriteRequest, PromptError> {
    if current.turn_no as usize != history.len() + 1 {
        return Err(PromptError::TurnOrder {
            current: current.key(),
            history_len: history.len(),
        });
    }
    let mut messages = Vec::with_capacity(2 * (example.turns.len() + history.len()) + 2);
    messages.push(ChatMessage::new(Role::System, template.scope_text.clone()));
    for turn in &example.turns {
        let manual = turn
            .manual
            .as_deref()
            .ok_or(PromptError::MissingManual(turn.key()))?;
        messages.push(ChatMessage::new(Role::User, turn.raw.clone()));
        messages.push(ChatMessage::new(Role::Assistant, manual));
    }
    for turn in history {
        let reply = context_reply(template, turn)?;
        messages.push(ChatMessage::new(Role::User, turn.raw.clone()));
        messages.push(ChatMessage::new(Role::Assistant, reply));
    }
    messages.push(ChatMessage::new(
        Role::User,
        final_user_content(template, example, &current.raw)?,
    ));
    Ok(RewriteRequest {
        turn_key: current.key().to_string(),
        template_id: template.id,
        messages,
    })
}

/// Completed turns of one conversation, in order.
#[derive(Debug, Clone, Default)]
pub struct ConversationState {
    pub completed: Vec<Turn>,
}

impl ConversationState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Rewrites one turn and appends it to the conversation state.
///
/// First turns are copied verbatim without contacting the backend. When
/// `transcript` is given, every request sent to the backend is recorded.
pub fn rewrite_turn(
    template: &PromptTemplate,
    example: &Conversation,
    state: &mut ConversationState,
    current: &Turn,
    backend: &dyn ChatBackend,
    params: &CompletionParams,
    transcript: Option<&mut Vec<RewriteRequest>>,
) -> Result<Turn, PromptError> {
    let mut done = current.clone();
    if current.turn_no == 1 {
        done.rewritten = Some(current.raw.clone());
        done.answer = None;
    } else {
        let request = build_request(template, example, &state.completed, current)?;
        let raw_output = backend
            .complete(&request.messages, params)
            .map_err(|source| PromptError::Backend {
                turn: current.key(),
                source,
            })?;
        if let Some(t) = transcript {
            t.push(request);
        }
        let processed = postprocess(&raw_output, template.id).map_err(|source| {
            PromptError::Postprocess {
                turn: current.key(),
                source,
            }
        })?;
        done.rewritten = Some(processed.rewrite);
        if template.uses_answers {
            if processed.answer.is_none() {
                log::warn!("turn {}: no answer found in model output", current.key());
            }
            done.answer = Some(processed.answer.unwrap_or_default());
        }
    }
    state.completed.push(done.clone());
    Ok(done)
}

/// Rewrites every turn of a conversation in order.
pub fn rewrite_conversation(
    template: &PromptTemplate,
    example: &Conversation,
    conversation: &Conversation,
    backend: &dyn ChatBackend,
    params: &CompletionParams,
    mut transcript: Option<&mut Vec<RewriteRequest>>,
) -> Result<Conversation, PromptError> {
    let mut state = ConversationState::new();
    for turn in &conversation.turns {
        rewrite_turn(
            template,
            example,
            &mut state,
            turn,
            backend,
            params,
            transcript.as_deref_mut(),
        )?;
    }
    Ok(Conversation {
        conv_id: conversation.conv_id,
        turns: state.completed,
    })
}
