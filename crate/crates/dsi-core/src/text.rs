//! Text normalization and tokenization shared across the pipeline.
//!
//! Every value string (gold or induced) passes through [`normalize`]
//! exactly once, so downstream fuzzy matching operates on a fixed
//! canonical form.

/// Lowercase, strip leading/trailing punctuation, collapse internal
/// whitespace runs to a single space.
pub fn normalize(s: &str) -> String {
    let lowered = s.to_lowercase();
    let trimmed = lowered.trim_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace());
    let mut out = String::with_capacity(trimmed.len());
    let mut last_ws = false;
    for c in trimmed.chars() {
        if c.is_whitespace() {
            if !last_ws {
                out.push(' ');
            }
            last_ws = true;
        } else {
            out.push(c);
            last_ws = false;
        }
    }
    out
}

/// A token with its byte span in the source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// Split on whitespace, peeling leading/trailing ASCII punctuation into
/// separate tokens. Internal punctuation (e.g. "5:30", "don't") stays
/// attached so times and contractions survive as single tokens.
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        while i < bytes.len() && (bytes[i] as char).is_whitespace() {
            i += 1;
        }
        if i >= bytes.len() {
            break;
        }
        let start = i;
        while i < bytes.len() && !(bytes[i] as char).is_whitespace() {
            i += 1;
        }
        let mut lo = start;
        let mut hi = i;
        while lo < hi && (bytes[lo] as char).is_ascii_punctuation() {
            tokens.push(Token {
                text: text[lo..lo + 1].to_string(),
                start: lo,
                end: lo + 1,
            });
            lo += 1;
        }
        let mut trail = Vec::new();
        while hi > lo && (bytes[hi - 1] as char).is_ascii_punctuation() {
            trail.push(Token {
                text: text[hi - 1..hi].to_string(),
                start: hi - 1,
                end: hi,
            });
            hi -= 1;
        }
        if hi > lo {
            tokens.push(Token {
                text: text[lo..hi].to_string(),
                start: lo,
                end: hi,
            });
        }
        tokens.extend(trail.into_iter().rev());
    }
    tokens
}

/// Turn text fed to annotators and embedding providers: the preceding
/// system utterance followed by the user utterance, space separated.
pub fn turn_text(system_utterance: &str, user_utterance: &str) -> String {
    format!("{} {}", system_utterance, user_utterance)
}
