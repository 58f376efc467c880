//! Token vocabularies. The four specials always occupy ids 0 to 3.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{read_text, write_atomic};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const PAD: usize = 2;
pub const UNK: usize = 3;

pub const SPECIALS: [&str; 4] = ["<bos>", "<eos>", "<pad>", "<unk>"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Specials first, then tokens in order of first appearance.
    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Vocab::specials_only();
        for t in tokens {
            v.insert(t);
        }
        v
    }

    fn specials_only() -> Self {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for s in SPECIALS {
            v.insert(s);
        }
        v
    }

    fn insert(&mut self, token: &str) {
        if !self.index.contains_key(token) {
            self.index.insert(token.to_string(), self.tokens.len());
            self.tokens.push(token.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    /// True when some token carries the BPE end-of-word marker.
    pub fn is_subword(&self) -> bool {
        self.tokens.iter().any(|t| t.ends_with(crate::bpe::END))
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(SPECIALS[UNK], String::as_str)
    }

    pub fn encode(&self, line: &str) -> Vec<usize> {
        line.split_whitespace().map(|t| self.id(t)).collect()
    }

    /// Joins tokens with spaces, dropping specials.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| !matches!(id, BOS | EOS | PAD))
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    /// One token per line, line number = id, specials first.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for (i, line) in text.lines().enumerate() {
            if i < SPECIALS.len() && line != SPECIALS[i] {
                return Err(Error::format(
                    path,
                    format!("line {}: expected special {}", i + 1, SPECIALS[i]),
                ));
            }
            if v.index.contains_key(line) {
                return Err(Error::format(path, format!("duplicate token {line:?}")));
            }
            v.insert(line);
        }
        if v.len() < SPECIALS.len() {
            return Err(Error::format(path, "vocabulary is missing the special tokens"));
        }
        Ok(v)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }
}
