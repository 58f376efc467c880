//! Byte-pair-encoding subword segmentation.
//!
//! Words are split into characters plus a separate end-of-word symbol
//! `</w>`. Learning repeatedly merges the most frequent adjacent pair
//! (counted over word types weighted by their token counts); equal counts go
//! to the lexicographically smallest pair. In segmented output the end
//! marker is attached to the last subword of each word, e.g. `ab c</w>`.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{read_text, write_atomic};

pub const END: &str = "</w>";
const HEADER: &str = "#bpe-v1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
    /// Subwords of the segmented training corpus. Empty for models read from
    /// a file, which carries merges only.
    vocab: BTreeSet<String>,
}

fn split_word(word: &str) -> Vec<String> {
    let mut symbols: Vec<String> = word.chars().map(String::from).collect();
    symbols.push(END.to_string());
    symbols
}

/// Replaces every non-overlapping occurrence of `pair`, scanning left to
/// right.
fn merge_pair(symbols: &mut Vec<String>, pair: (&str, &str)) {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == pair.0 && symbols[i + 1] == pair.1 {
            out.push(format!("{}{}", pair.0, pair.1));
            i += 2;
        } else {
            out.push(std::mem::take(&mut symbols[i]));
            i += 1;
        }
    }
    *symbols = out;
}

/// Folds a standalone trailing `</w>` into the preceding subword.
fn attach_marker(mut symbols: Vec<String>) -> Vec<String> {
    if symbols.len() >= 2 && symbols.last().map(String::as_str) == Some(END) {
        symbols.pop();
        symbols.last_mut().unwrap().push_str(END);
    }
    symbols
}

/// Learns up to `n_merges` merges from whitespace-separated text. Stops early
/// once no adjacent pair occurs at least twice.
pub fn learn_bpe(corpus: &str, n_merges: usize) -> Result<BpeModel> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for w in corpus.split_whitespace() {
        *counts.entry(w).or_default() += 1;
    }
    if counts.is_empty() {
        return Err(Error::invalid("cannot learn BPE from an empty corpus"));
    }
    let mut types: Vec<(&str, usize)> = counts.into_iter().collect();
    types.sort_unstable();
    let mut words: Vec<(Vec<String>, usize)> = types.iter().map(|&(w, c)| (split_word(w), c)).collect();

    let mut merges = Vec::new();
    while merges.len() < n_merges {
        let mut pairs: HashMap<(&str, &str), usize> = HashMap::new();
        for (symbols, count) in &words {
            for w in symbols.windows(2) {
                *pairs.entry((&w[0], &w[1])).or_default() += count;
            }
        }
        let best = pairs
            .into_iter()
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
        let Some(((a, b), count)) = best else { break };
        if count < 2 {
            break;
        }
        let pair = (a.to_string(), b.to_string());
        for (symbols, _) in &mut words {
            merge_pair(symbols, (&pair.0, &pair.1));
        }
        merges.push(pair);
    }

    let mut model = BpeModel::from_merges(merges)?;
    let vocab = types
        .iter()
        .flat_map(|&(w, _)| model.apply(w))
        .collect();
    model.vocab = vocab;
    Ok(model)
}

impl BpeModel {
    pub fn from_merges(merges: Vec<(String, String)>) -> Result<Self> {
        let mut ranks = HashMap::with_capacity(merges.len());
        for (i, pair) in merges.iter().enumerate() {
            if ranks.insert(pair.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate merge {} {}", pair.0, pair.1)));
            }
        }
        Ok(BpeModel {
            merges,
            ranks,
            vocab: BTreeSet::new(),
        })
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn vocab(&self) -> &BTreeSet<String> {
        &self.vocab
    }

    /// Segments one word, applying merges in learned priority order.
    pub fn apply(&self, word: &str) -> Vec<String> {
        let mut symbols = split_word(word);
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())))
                .min();
            let Some(&rank) = best else { break };
            let (a, b) = &self.merges[rank];
            merge_pair(&mut symbols, (a, b));
        }
        attach_marker(symbols)
    }

    /// Segments every whitespace token of `line`; subwords are joined by
    /// single spaces.
    pub fn apply_line(&self, line: &str) -> String {
        line.split_whitespace()
            .flat_map(|w| self.apply(w))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{HEADER} {}\n", self.merges.len());
        for (a, b) in &self.merges {
            s.push_str(a);
            s.push(' ');
            s.push_str(b);
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or("");
        let n: usize = header
            .strip_prefix(HEADER)
            .and_then(|rest| rest.trim().parse().ok())
            .ok_or_else(|| Error::format(path, format!("expected `{HEADER} <n_merges>` header")))?;
        let mut merges = Vec::with_capacity(n);
        for (i, line) in lines.enumerate() {
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                    merges.push((a.to_string(), b.to_string()))
                }
                _ => return Err(Error::format(path, format!("line {}: expected two symbols", i + 2))),
            }
        }
        if merges.len() != n {
            return Err(Error::format(
                path,
                format!("header announces {n} merges, found {}", merges.len()),
            ));
        }
        Self::from_merges(merges).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }
}

/// Joins subwords back into text: markers become word boundaries.
pub fn undo_bpe<S: AsRef<str>>(subwords: &[S]) -> String {
    let mut out = String::new();
    for s in subwords {
        let s = s.as_ref();
        match s.strip_suffix(END) {
            Some(stem) => {
                out.push_str(stem);
                out.push(' ');
            }
            None => out.push_str(s),
        }
    }
    if out.ends_with(' ') {
        out.pop();
    }
    out
}

/// [`undo_bpe`] over a space-separated line of subwords.
pub fn undo_line(line: &str) -> String {
    undo_bpe(&line.split_whitespace().collect::<Vec<_>>())
}
