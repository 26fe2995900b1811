//! Word splitting shared by the pair miner and the vocabulary.
//!
//! A token is either a maximal run of alphanumeric characters or a single
//! non-whitespace, non-alphanumeric character.

/// Byte spans of every token in `s`.
pub fn token_spans(s: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut word_start: Option<usize> = None;
    for (i, c) in s.char_indices() {
        if c.is_alphanumeric() {
            if word_start.is_none() {
                word_start = Some(i);
            }
            continue;
        }
        if let Some(start) = word_start.take() {
            spans.push((start, i));
        }
        if !c.is_whitespace() {
            spans.push((i, i + c.len_utf8()));
        }
    }
    if let Some(start) = word_start {
        spans.push((start, s.len()));
    }
    spans
}

pub fn split_tokens(s: &str) -> Vec<&str> {
    token_spans(s).into_iter().map(|(a, b)| &s[a..b]).collect()
}

/// Lowercased tokens, the form the vocabulary and term matching work on.
pub fn normalized_tokens(s: &str) -> Vec<String> {
    split_tokens(s).into_iter().map(str::to_lowercase).collect()
}
