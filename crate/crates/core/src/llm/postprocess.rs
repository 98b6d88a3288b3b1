use std::sync::OnceLock;

use regex::Regex;
use thiserror::Error;

use crate::prompt::TemplateId;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PostprocessError {
    #[error("model output is empty after post-processing: {raw_output:?}")]
    Empty { raw_output: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Processed {
    pub rewrite: String,
    pub answer: Option<String>,
}

fn label_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)^(?:(?:rewritten|reformulated)(?:\s+question)?|question)\s*:")
            .expect("label regex")
    })
}

const QUOTE_PAIRS: [(char, char); 4] = [('"', '"'), ('\'', '\''), ('\u{201c}', '\u{201d}'), ('\u{2018}', '\u{2019}')];

fn strip_label(text: &str) -> Option<&str> {
    label_re().find(text).map(|m| &text[m.end()..])
}

fn strip_quotes(text: &str) -> Option<&str> {
    let mut chars = text.chars();
    let first = chars.next()?;
    let last = chars.next_back()?;
    QUOTE_PAIRS
        .iter()
        .any(|&(open, close)| first == open && last == close)
        .then(|| &text[first.len_utf8()..text.len() - last.len_utf8()])
}

/// Replaces every whitespace run that contains a line break with one space.
fn collapse_newlines(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut run = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            run.push(ch);
            continue;
        }
        if !run.is_empty() {
            if run.contains(['\n', '\r']) {
                out.push(' ');
            } else {
                out.push_str(&run);
            }
            run.clear();
        }
        out.push(ch);
    }
    out.push_str(&run);
    out
}

fn clean(text: &str) -> String {
    let mut current = text.trim();
    // Labels and quotes may nest ("Rewritten: \"...\""), so peel to a fixed point.
    loop {
        let next = strip_label(current)
            .or_else(|| strip_quotes(current))
            .map(str::trim);
        match next {
            Some(n) if n.len() < current.len() => current = n,
            _ => break,
        }
    }
    collapse_newlines(current).trim().to_string()
}

fn split_answer(raw: &str) -> (String, Option<String>) {
    let lines: Vec<&str> = raw.lines().collect();
    let marker = lines.iter().position(|l| {
        let l = l.trim_start();
        l.len() >= 7 && l[..7].eq_ignore_ascii_case("answer:")
    });
    match marker {
        None => (raw.to_string(), None),
        Some(idx) => {
            let first = lines[idx].trim_start()[7..].to_string();
            let rest = std::iter::once(first.as_str())
                .chain(lines[idx + 1..].iter().copied())
                .collect::<Vec<_>>()
                .join("\n");
            let answer = collapse_newlines(rest.trim()).trim().to_string();
            (lines[..idx].join("\n"), (!answer.is_empty()).then_some(answer))
        }
    }
}

/// Extracts the rewritten utterance (and the answer, for templates that ask
/// for one) from raw model output.
pub fn postprocess(raw_output: &str, template: TemplateId) -> Result<Processed, PostprocessError> {
    let (source, answer) = if template.uses_answers() {
        split_answer(raw_output)
    } else {
        (raw_output.to_string(), None)
    };
    let rewrite = clean(&source);
    if rewrite.is_empty() {
        return Err(PostprocessError::Empty {
            raw_output: raw_output.to_string(),
        });
    }
    Ok(Processed { rewrite, answer })
}
