//! Whitespace word tokenizer with a byte-level fallback.
//!
//! The word vocabulary is fitted on a corpus (descriptions and templates).
//! Words outside it are spelled out as byte tokens so every string encodes.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

pub const CLS: u32 = 0;
pub const EOT: u32 = 1;
const BYTE_BASE: u32 = 2;
const WORD_BASE: u32 = BYTE_BASE + 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Token<'a> {
    Cls,
    Eot,
    Byte(u8),
    Word(&'a str),
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

/// Lower-cases and strips surrounding punctuation.
pub fn normalize_word(raw: &str) -> String {
    raw.trim_matches(|c: char| !c.is_alphanumeric() && c != '_' && c != '-')
        .to_lowercase()
}

pub fn split_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace()
        .map(normalize_word)
        .filter(|w| !w.is_empty())
}

impl Tokenizer {
    pub fn fit<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = corpus.into_iter().flat_map(split_words).collect();
        Self::from_words(words.into_iter().collect())
    }

    pub fn from_words(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), WORD_BASE + i as u32))
            .collect();
        Self { words, index }
    }

    /// Rebuilds the lookup table after deserialization.
    pub fn reindex(&mut self) {
        *self = Self::from_words(std::mem::take(&mut self.words));
    }

    pub fn vocab_size(&self) -> usize {
        WORD_BASE as usize + self.words.len()
    }

    /// `[CLS] tokens... [EOT]`
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = vec![CLS];
        for word in split_words(text) {
            match self.index.get(&word) {
                Some(&id) => out.push(id),
                None => out.extend(word.bytes().map(|b| BYTE_BASE + b as u32)),
            }
        }
        out.push(EOT);
        out
    }

    pub fn token(&self, id: u32) -> Option<Token<'_>> {
        match id {
            CLS => Some(Token::Cls),
            EOT => Some(Token::Eot),
            b if b < WORD_BASE => Some(Token::Byte((b - BYTE_BASE) as u8)),
            w => self.words.get((w - WORD_BASE) as usize).map(|s| Token::Word(s)),
        }
    }
}
