//! Conversational query rewriting with prompted chat models, and the
//! retrieval and evaluation pipeline used to measure it.

pub mod config;
pub mod conversation;
pub mod index;
pub mod llm;
pub mod metrics;
pub mod pipeline;
pub mod prompt;
pub mod rerank;
pub mod stats;

pub use conversation::{Conversation, DataError, Turn, TurnKey};
pub use index::{Analyzer, InvertedIndex, RankingModel, ScoredDoc};
pub use llm::{BackendError, ChatBackend, CompletionParams};
pub use prompt::{ChatMessage, PromptTemplate, Role, TemplateId};
pub use config::PipelineConfig;
pub use pipeline::PipelineError;
