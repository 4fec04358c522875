//! Deterministic token counting and budget trimming.
//!
//! The default tokenizer counts maximal alphanumeric runs: whitespace and
//! every punctuation character separate tokens, so `"a, b c."` has three.
//! The interface is pluggable, but every budget law in this crate is stated
//! and tested against the default rule.

/// A deterministic tokenizer over text.
pub trait Tokenizer {
    /// Byte spans `(start, end)` of each token, in order.
    fn spans(&self, text: &str) -> Vec<(usize, usize)>;

    fn count(&self, text: &str) -> usize {
        self.spans(text).len()
    }
}

/// Maximal-alphanumeric-run tokenizer (the default rule).
#[derive(Clone, Copy, Debug, Default)]
pub struct DefaultTokenizer;

impl Tokenizer for DefaultTokenizer {
    fn spans(&self, text: &str) -> Vec<(usize, usize)> {
        let mut spans = Vec::new();
        let mut start: Option<usize> = None;
        for (i, c) in text.char_indices() {
            if c.is_alphanumeric() {
                if start.is_none() {
                    start = Some(i);
                }
            } else if let Some(s) = start.take() {
                spans.push((s, i));
            }
        }
        if let Some(s) = start {
            spans.push((s, text.len()));
        }
        spans
    }
}

/// Token count of `text` under the default rule.
pub fn count_tokens(text: &str) -> usize {
    DefaultTokenizer.count(text)
}

/// [`trim_to_budget`] under a caller-chosen tokenizer.
///
/// Returns `text` unchanged when it already fits. Otherwise returns the
/// prefix ending at the last sentence boundary (`.`, `!`, or `?` followed
/// by whitespace or end of text) that still fits the budget; if no sentence
/// boundary exists in that window, cuts exactly at the budget'th token
/// boundary. The result always counts ≤ `budget` tokens.
pub fn trim_with(tokenizer: &dyn Tokenizer, text: &str, budget: usize) -> String {
    if budget == 0 {
        return String::new();
    }
    let spans = tokenizer.spans(text);
    if spans.len() <= budget {
        return text.to_string();
    }
    // All bytes strictly before the first over-budget token are fair game.
    let window_end = spans[budget].0;
    if let Some(cut) = last_sentence_end(text, window_end) {
        return text[..cut].to_string();
    }
    text[..spans[budget - 1].1].to_string()
}

/// Trims `text` to at most `budget` tokens under the default rule,
/// preferring a sentence-final cut.
pub fn trim_to_budget(text: &str, budget: usize) -> String {
    trim_with(&DefaultTokenizer, text, budget)
}

/// Byte position just after the last sentence-ending punctuation within
/// `text[..window_end]`. The character following the punctuation (in the
/// *full* text) must be whitespace or end-of-text, so decimals like `3.14`
/// do not count as boundaries.
fn last_sentence_end(text: &str, window_end: usize) -> Option<usize> {
    let mut best = None;
    for (i, c) in text[..window_end].char_indices() {
        if matches!(c, '.' | '!' | '?') {
            let after = i + c.len_utf8();
            let boundary = text[after..]
                .chars()
                .next()
                .is_none_or(char::is_whitespace);
            if boundary {
                best = Some(after);
            }
        }
    }
    best
}
