use std::collections::HashSet;
use std::path::Path;

use super::porter::stem;

const BUNDLED_STOPWORDS: &str = include_str!("../../resources/stopwords.txt");

/// Lowercasing tokenizer with stopword removal and Porter stemming.
///
/// The same analyzer must be used for documents and queries.
#[derive(Debug, Clone)]
pub struct Analyzer {
    stopwords: HashSet<String>,
}

impl Default for Analyzer {
    fn default() -> Self {
        Self::from_word_list(BUNDLED_STOPWORDS)
    }
}

impl Analyzer {
    /// One stopword per line; blank lines and `#` comments are ignored.
    pub fn from_word_list(list: &str) -> Self {
        let stopwords = list
            .lines()
            .map(str::trim)
            .filter(|w| !w.is_empty() && !w.starts_with('#'))
            .map(str::to_lowercase)
            .collect();
        Self { stopwords }
    }

    pub fn from_file(path: &Path) -> std::io::Result<Self> {
        Ok(Self::from_word_list(&std::fs::read_to_string(path)?))
    }

    pub fn stopword_count(&self) -> usize {
        self.stopwords.len()
    }

    pub fn is_stopword(&self, word: &str) -> bool {
        self.stopwords.contains(word)
    }

    pub fn tokenize(&self, text: &str) -> Vec<String> {
        text.to_lowercase()
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty() && !self.stopwords.contains(*w))
            .map(stem)
            .collect()
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    Analyzer::default().tokenize(text)
}
