//! Word-level tokenizer with a vocabulary fixed at build time.
//!
//! Text is split into runs of alphanumerics and single punctuation marks.
//! Angle-bracket tags (`<think>`) and bracketed markers (`[Vid]`) are kept
//! whole; everything else is lowercased.

use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};

pub const UNK: &str = "<unk>";
pub const EOS: &str = "<eos>";
pub const VID: &str = "[Vid]";
pub const RECOGNITION: &str = "<recognition>";
pub const REASONING: &str = "<reasoning>";
pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";
pub const ANSWER_OPEN: &str = "<answer>";
pub const ANSWER_CLOSE: &str = "</answer>";

/// Reserved tokens, always at the start of the vocabulary in this order.
pub const SPECIAL_TOKENS: [&str; 9] =
    [UNK, EOS, VID, RECOGNITION, REASONING, THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE];

fn take_marker(chars: &[char], open: char, close: char) -> Option<usize> {
    if chars.first() != Some(&open) {
        return None;
    }
    let end = chars.iter().position(|&c| c == close)?;
    let inner = &chars[1..end];
    let ok = !inner.is_empty()
        && inner.iter().enumerate().all(|(i, &c)| c.is_ascii_alphabetic() || (c == '/' && i == 0 && open == '<'));
    ok.then_some(end + 1)
}

/// Splits text into word pieces.
pub fn split_words(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if let Some(n) = take_marker(&chars[i..], '<', '>').or_else(|| take_marker(&chars[i..], '[', ']')) {
            out.push(chars[i..i + n].iter().collect());
            i += n;
        } else if c.is_alphanumeric() {
            let start = i;
            while i < chars.len() && chars[i].is_alphanumeric() {
                i += 1;
            }
            out.push(chars[start..i].iter().collect::<String>().to_lowercase());
        } else {
            out.push(c.to_string());
            i += 1;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Special tokens followed by every word of `texts`, sorted.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = texts.into_iter().flat_map(split_words).collect();
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(words.into_iter().filter(|w| !SPECIAL_TOKENS.contains(&w.as_str())));
        Self::from_tokens(tokens).expect("unique tokens")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Config(format!("vocabulary must start with the special token {s}")));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    /// Id of a reserved token.
    pub fn special(&self, token: &str) -> u32 {
        self.id(token).expect("special tokens are always present")
    }

    pub fn eos(&self) -> u32 {
        self.special(EOS)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map(String::as_str).unwrap_or(UNK)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let unk = self.special(UNK);
        split_words(text).iter().map(|w| self.id(w).unwrap_or(unk)).collect()
    }

    /// Joins tokens with single spaces, stopping at the first end token.
    pub fn decode(&self, ids: &[u32]) -> String {
        let eos = self.eos();
        ids.iter().take_while(|&&i| i != eos).map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }
}
