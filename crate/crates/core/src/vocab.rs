//! Word-level vocabulary and tokenizer.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::text;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const CLS: TokenId = 2;
pub const SEP: TokenId = 3;
pub const MASK: TokenId = 4;

const RESERVED: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Format {
                    what: "vocab",
                    detail: format!("duplicate token {t:?}"),
                });
            }
        }
        Ok(Self { tokens, ids })
    }

    /// Words of frequency at least `min_freq`, most frequent first (ties
    /// broken alphabetically), after the five reserved tokens.
    pub fn build<I, S>(corpus: I, min_freq: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut n_sentences = 0;
        for s in corpus {
            n_sentences += 1;
            for tok in text::normalized_tokens(s.as_ref()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if n_sentences == 0 {
            return Err(Error::invalid("cannot build a vocabulary from an empty corpus"));
        }
        let mut words: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_freq.max(1) && !RESERVED.contains(&w.as_str()))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(|(w, _)| w))
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> TokenId {
        self.ids.get(word).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.ids.contains_key(word)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// `[CLS] words... [SEP]`, truncated to `max_len` (which must be ≥ 2)
    /// while keeping the trailing `[SEP]`.
    pub fn tokenize(&self, sentence: &str, max_len: usize) -> Vec<TokenId> {
        let max_words = max_len.max(2) - 2;
        let mut ids = Vec::with_capacity(max_len.min(64));
        ids.push(CLS);
        ids.extend(
            text::normalized_tokens(sentence)
                .iter()
                .take(max_words)
                .map(|w| self.id(w)),
        );
        ids.push(SEP);
        ids
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut body = self.tokens.join("\n");
        body.push('\n');
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Format {
                what: "vocab",
                detail: format!("{} does not start with the reserved tokens", path.display()),
            });
        }
        Self::from_tokens(tokens)
    }
}

pub fn build_vocab<I, S>(corpus: I, min_freq: usize) -> Result<Vocab>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    Vocab::build(corpus, min_freq)
}

pub fn tokenize(vocab: &Vocab, sentence: &str, max_len: usize) -> Vec<TokenId> {
    vocab.tokenize(sentence, max_len)
}
