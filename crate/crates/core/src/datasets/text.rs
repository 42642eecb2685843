//! Tokenisation and sentence splitting over char (Unicode scalar) offsets.

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    /// Lowercased surface form.
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// Half-open char interval `[start, end)` of one sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SentenceSpan {
    pub start: usize,
    pub end: usize,
}

impl SentenceSpan {
    pub fn intersects(&self, start: usize, end: usize) -> bool {
        self.start < end && start < self.end
    }
}

pub fn char_len(s: &str) -> usize {
    s.chars().count()
}

/// Substring by char offsets `[start, end)`.
pub fn char_slice(s: &str, start: usize, end: usize) -> String {
    s.chars().skip(start).take(end.saturating_sub(start)).collect()
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation() || matches!(c, '“' | '”' | '‘' | '’' | '—' | '–' | '…' | '«' | '»' | '¿' | '¡')
}

/// Whitespace split, then leading and trailing punctuation peeled into
/// one-char tokens. Tokens are lowercased; offsets index the original text.
pub fn tokenize(text: &str) -> Vec<Token> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if chars[i].is_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        while i < chars.len() && !chars[i].is_whitespace() {
            i += 1;
        }
        push_word(&chars, start, i, &mut out);
    }
    out
}

fn push_word(chars: &[char], start: usize, end: usize, out: &mut Vec<Token>) {
    let single = |at: usize| Token {
        text: chars[at].to_lowercase().collect(),
        start: at,
        end: at + 1,
    };
    let mut lo = start;
    while lo < end && is_punct(chars[lo]) {
        out.push(single(lo));
        lo += 1;
    }
    if lo == end {
        return;
    }
    let mut hi = end;
    while hi > lo && is_punct(chars[hi - 1]) {
        hi -= 1;
    }
    out.push(Token {
        text: chars[lo..hi].iter().collect::<String>().to_lowercase(),
        start: lo,
        end: hi,
    });
    for at in hi..end {
        out.push(single(at));
    }
}

const ABBREVIATIONS: &[&str] = &[
    "mr.", "mrs.", "dr.", "st.", "vs.", "etc.", "e.g.", "i.e.", "no.", "jr.", "sr.",
];

fn is_terminator(c: char) -> bool {
    matches!(c, '.' | '?' | '!')
}

fn is_closer(c: char) -> bool {
    matches!(c, '"' | '\'' | ')' | ']' | '”' | '’')
}

/// Rule-based sentence boundaries: a run of `.?!` (plus closing quotes or
/// brackets) followed by whitespace and an uppercase letter or digit ends a
/// sentence, unless the word ending in `.` is a known abbreviation. Spans
/// exclude surrounding whitespace and together cover every other char.
pub fn split_sentences(text: &str) -> Result<Vec<SentenceSpan>> {
    let chars: Vec<char> = text.chars().collect();
    if chars.iter().all(|c| c.is_whitespace()) {
        return Err(Error::Domain("cannot split empty text into sentences".into()));
    }
    let n = chars.len();
    let mut spans = Vec::new();
    let mut start: Option<usize> = None;
    let mut i = 0;
    while i < n {
        let c = chars[i];
        if start.is_none() && !c.is_whitespace() {
            start = Some(i);
        }
        if !is_terminator(c) {
            i += 1;
            continue;
        }
        let mut end = i + 1;
        while end < n && (is_terminator(chars[end]) || is_closer(chars[end])) {
            end += 1;
        }
        let next = (end..n).find(|&k| !chars[k].is_whitespace());
        let boundary = end < n
            && chars[end].is_whitespace()
            && next.is_some_and(|k| chars[k].is_uppercase() || chars[k].is_ascii_digit())
            && !(c == '.' && ends_with_abbreviation(&chars, start.unwrap_or(0), i));
        if boundary {
            spans.push(SentenceSpan {
                start: start.take().expect("sentence start set"),
                end,
            });
        }
        i = end;
    }
    if let Some(s) = start {
        let end = (s..n).rev().find(|&k| !chars[k].is_whitespace()).map_or(n, |k| k + 1);
        spans.push(SentenceSpan { start: s, end });
    }
    Ok(spans)
}

/// Does the whitespace-delimited word ending at the `.` at `dot` match the stop-list?
fn ends_with_abbreviation(chars: &[char], floor: usize, dot: usize) -> bool {
    let mut lo = dot;
    while lo > floor && !chars[lo - 1].is_whitespace() {
        lo -= 1;
    }
    while lo < dot && is_punct(chars[lo]) && chars[lo] != '.' {
        lo += 1;
    }
    let word: String = chars[lo..=dot].iter().collect::<String>().to_lowercase();
    ABBREVIATIONS.contains(&word.as_str())
}
