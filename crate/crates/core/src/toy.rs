//! Synthetic corpora for smoke tests and desk-scale experiments.
//!
//! Sentences are strings of made-up words `w00 w01 …`. In the copy task the
//! target repeats the source; with `noise > 0` each source word is replaced by
//! a random one with that probability. [`copy_task`] pairs sentences with
//! uniform random features. [`noisy_task`] instead encodes the target's bag of
//! words in the features (plus jitter), so the image carries exactly the
//! information that source corruption destroys.

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::io::{write_atomic, write_features, Corpus};
use crate::tensor::Tensor;
use crate::vocab::{Vocab, SPECIALS};
use crate::seeded;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToySpec {
    pub pairs: usize,
    /// Vocabulary size including the four special tokens.
    pub vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub feat_dim: usize,
    /// Probability that a source word is replaced by a random word.
    pub noise: f64,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            pairs: 200,
            vocab: 30,
            min_len: 3,
            max_len: 8,
            feat_dim: 32,
            noise: 0.0,
            seed: 1,
        }
    }
}

impl ToySpec {
    fn validate(&self) -> Result<()> {
        if self.vocab <= SPECIALS.len() {
            return Err(Error::invalid("toy vocabulary must exceed the special tokens"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::invalid("toy sentence lengths must satisfy 1 <= min <= max"));
        }
        if self.pairs == 0 || self.feat_dim == 0 {
            return Err(Error::invalid("toy corpus needs at least one pair and one feature"));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::invalid("noise must lie in [0, 1]"));
        }
        Ok(())
    }

    fn words(&self) -> Vec<String> {
        (0..self.vocab - SPECIALS.len()).map(|i| format!("w{i:02}")).collect()
    }

    /// The vocabulary every toy corpus of this spec shares.
    pub fn vocabulary(&self) -> Vocab {
        let words = self.words();
        Vocab::build(words.iter().map(String::as_str))
    }
}

/// Raw text and features of a toy corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyData {
    pub spec: ToySpec,
    pub src: Vec<String>,
    pub tgt: Vec<String>,
    /// `pairs × feat_dim`
    pub features: Tensor,
}

fn generate(spec: &ToySpec, informative: bool) -> Result<ToyData> {
    spec.validate()?;
    let mut rng = seeded(spec.seed);
    let words = spec.words();
    let mut src = Vec::with_capacity(spec.pairs);
    let mut tgt = Vec::with_capacity(spec.pairs);
    let mut features = Vec::with_capacity(spec.pairs * spec.feat_dim);
    for _ in 0..spec.pairs {
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let ids: Vec<usize> = (0..len).map(|_| rng.random_range(0..words.len())).collect();
        let noisy: Vec<usize> = ids
            .iter()
            .map(|&w| {
                if rng.random::<f64>() < spec.noise {
                    rng.random_range(0..words.len())
                } else {
                    w
                }
            })
            .collect();
        let join = |xs: &[usize]| xs.iter().map(|&i| words[i].as_str()).collect::<Vec<_>>().join(" ");
        src.push(join(&noisy));
        tgt.push(join(&ids));

        let mut row: Vec<f64> = if informative {
            (0..spec.feat_dim).map(|_| rng.random_range(-0.1..0.1)).collect()
        } else {
            (0..spec.feat_dim).map(|_| rng.random_range(-1.0..1.0)).collect()
        };
        if informative {
            for &w in &ids {
                row[w % spec.feat_dim] += 1.0;
            }
        }
        features.extend(row);
    }
    Ok(ToyData {
        spec: *spec,
        src,
        tgt,
        features: Tensor::new(vec![spec.pairs, spec.feat_dim], features)?,
    })
}

/// Copy task with uniform random image features in `[-1, 1)`.
pub fn copy_task(spec: &ToySpec) -> ToyData {
    generate(spec, false).expect("invalid toy spec")
}

/// Copy task whose features hold the target's word counts plus small jitter.
pub fn noisy_task(spec: &ToySpec) -> ToyData {
    generate(spec, true).expect("invalid toy spec")
}

/// Fallible form of [`copy_task`] and [`noisy_task`].
pub fn try_generate(spec: &ToySpec, informative: bool) -> Result<ToyData> {
    generate(spec, informative)
}

impl ToyData {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    pub fn corpus(&self) -> Corpus {
        let v = self.spec.vocabulary();
        Corpus::from_lines(&self.src, &self.tgt, self.tgt.clone(), self.features.clone(), Some((v.clone(), v)))
            .expect("toy data is aligned by construction")
    }

    /// First `len − n_valid` pairs for training, the rest for validation.
    pub fn split(&self, n_valid: usize) -> Result<(ToyData, ToyData)> {
        if n_valid == 0 || n_valid >= self.len() {
            return Err(Error::invalid(format!(
                "cannot hold out {n_valid} of {} pairs",
                self.len()
            )));
        }
        let cut = self.len() - n_valid;
        let part = |range: std::ops::Range<usize>| -> Result<ToyData> {
            let rows: Vec<Vec<f64>> = range.clone().map(|i| self.features.row_slice(i).to_vec()).collect();
            Ok(ToyData {
                spec: ToySpec {
                    pairs: range.len(),
                    ..self.spec
                },
                src: self.src[range.clone()].to_vec(),
                tgt: self.tgt[range].to_vec(),
                features: Tensor::from_rows(&rows)?,
            })
        };
        Ok((part(0..cut)?, part(cut..self.len())?))
    }

    /// Writes `<prefix>.src`, `<prefix>.tgt` and `<prefix>.feat` into `dir`.
    pub fn write(&self, dir: &Path, prefix: &str) -> Result<()> {
        let lines = |xs: &[String]| xs.iter().map(|l| format!("{l}\n")).collect::<String>();
        write_atomic(&dir.join(format!("{prefix}.src")), lines(&self.src).as_bytes())?;
        write_atomic(&dir.join(format!("{prefix}.tgt")), lines(&self.tgt).as_bytes())?;
        write_features(&dir.join(format!("{prefix}.feat")), &self.features)
    }
}
