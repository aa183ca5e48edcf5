//! Sentence splitting and whitespace tokenization for report text.
//!
//! Splitting rules:
//!
//! 1. A sentence ends at `.`, `!` or `?` when the next character is
//!    whitespace or the end of the text.
//! 2. A `.` does not end a sentence when the word it closes is one of
//!    [`ABBREVIATIONS`] (case-insensitive, leading brackets/quotes ignored).
//! 3. Sentences are trimmed and empty sentences are dropped.
//!
//! Decimals such as `1.5` never split because the period is followed by a
//! digit, not whitespace.

use std::ops::Range;

/// Words that end in a period without closing a sentence.
pub const ABBREVIATIONS: &[&str] = &[
    "dr.", "mr.", "mrs.", "ms.", "a.m.", "p.m.", "e.g.", "i.e.", "vs.", "approx.",
];

const TERMINALS: [char; 3] = ['.', '!', '?'];
const TRAILING_PUNCT: [char; 7] = ['.', ',', ';', ':', '!', '?', ')'];

pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut iter = text.char_indices().peekable();
    while let Some((i, ch)) = iter.next() {
        if !TERMINALS.contains(&ch) {
            continue;
        }
        let at_boundary = match iter.peek() {
            None => true,
            Some(&(_, next)) => next.is_whitespace(),
        };
        if !at_boundary {
            continue;
        }
        let end = i + ch.len_utf8();
        if ch == '.' && ends_with_abbreviation(&text[start..end]) {
            continue;
        }
        push_trimmed(&mut out, &text[start..end]);
        start = end;
    }
    push_trimmed(&mut out, &text[start..]);
    out
}

fn push_trimmed(out: &mut Vec<String>, s: &str) {
    let s = s.trim();
    if !s.is_empty() {
        out.push(s.to_string());
    }
}

fn ends_with_abbreviation(chunk: &str) -> bool {
    let word = chunk
        .rsplit(char::is_whitespace)
        .next()
        .unwrap_or("")
        .trim_start_matches(['(', '[', '"', '\'']);
    let word = word.to_ascii_lowercase();
    ABBREVIATIONS.contains(&word.as_str())
}

/// Whitespace tokens with trailing punctuation split off as separate tokens.
pub fn tokenize(sentence: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for word in sentence.split_whitespace() {
        let core = word.trim_end_matches(TRAILING_PUNCT);
        if !core.is_empty() {
            tokens.push(core.to_string());
        }
        tokens.extend(word[core.len()..].chars().map(String::from));
    }
    tokens
}

/// Tokenizes every sentence and returns the concatenated token stream with
/// one span per sentence.
pub fn tokenize_sentences<S: AsRef<str>>(sentences: &[S]) -> (Vec<String>, Vec<Range<usize>>) {
    let mut tokens = Vec::new();
    let mut spans = Vec::with_capacity(sentences.len());
    for s in sentences {
        let start = tokens.len();
        tokens.extend(tokenize(s.as_ref()));
        spans.push(start..tokens.len());
    }
    (tokens, spans)
}
