//! Lowercase word-level tokenizer over a closed vocabulary.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Split text into lowercase word tokens.
///
/// Runs of ASCII letters/digits form one token; every other non-whitespace
/// character is a token of its own (`"High-End"` becomes `high`, `-`, `end`).
pub fn words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_ascii_alphanumeric() {
            cur.push(ch);
            continue;
        }
        if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_string());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Whitespace-normalized form of `text` (what `decode(encode(text))` yields).
pub fn normalize(text: &str) -> String {
    words(text).join(" ")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    /// Id-ordered token strings, specials first.
    tokens: Vec<String>,
    pub max_len: usize,
    #[serde(skip)]
    lookup: HashMap<String, u32>,
}

impl Tokenizer {
    /// Build a vocabulary from `corpus`, keeping words seen at least
    /// `min_count` times. Regular tokens are ordered lexicographically.
    pub fn build<'a>(
        corpus: impl IntoIterator<Item = &'a str>,
        min_count: usize,
        max_len: usize,
    ) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for text in corpus {
            for w in words(text) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(
                counts
                    .into_iter()
                    .filter(|(_, c)| *c >= min_count)
                    .map(|(w, _)| w),
            )
            .collect();
        Self::from_tokens(tokens, max_len)
    }

    pub fn from_tokens(tokens: Vec<String>, max_len: usize) -> Self {
        let mut t = Self {
            tokens,
            max_len,
            lookup: HashMap::new(),
        };
        t.reindex();
        t
    }

    /// Rebuild the reverse lookup; needed after deserialization.
    pub fn reindex(&mut self) {
        self.lookup = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> u32 {
        self.lookup.get(word).copied().unwrap_or(UNK)
    }

    /// Token ids for `text`, truncated to `max_len`. Never emits PAD.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids: Vec<u32> = words(text).iter().map(|w| self.id(w)).collect();
        ids.truncate(self.max_len);
        ids
    }

    /// Join tokens with single spaces, stopping at EOS and skipping PAD/BOS.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .map(|&i| self.tokens.get(i as usize).map_or("<unk>", String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
