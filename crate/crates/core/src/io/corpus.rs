use std::path::Path;

use crate::bpe::BpeModel;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::Tensor;
use crate::vocab::Vocab;

use super::{read_features, read_text};

/// Aligned source sentences, target sentences and image feature rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub src: Vec<Vec<usize>>,
    pub tgt: Vec<Vec<usize>>,
    /// `len × feat_dim`
    pub features: Tensor,
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
    /// Target lines as read from disk, before subword segmentation; used as
    /// BLEU references.
    pub references: Vec<String>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    pub fn feat_dim(&self) -> usize {
        self.features.shape()[1]
    }

    /// Builds a corpus from already segmented lines. Vocabularies are built
    /// from the lines when not given.
    pub fn from_lines(
        src_lines: &[String],
        tgt_lines: &[String],
        references: Vec<String>,
        features: Tensor,
        vocabs: Option<(Vocab, Vocab)>,
    ) -> Result<Self> {
        let (rows, _) = features.dims2("features")?;
        if src_lines.len() != tgt_lines.len() {
            return Err(Error::Misaligned(format!(
                "{} source lines but {} target lines",
                src_lines.len(),
                tgt_lines.len()
            )));
        }
        if rows != src_lines.len() {
            return Err(Error::Misaligned(format!(
                "{} sentence pairs but {rows} feature rows",
                src_lines.len()
            )));
        }
        for (i, (s, t)) in src_lines.iter().zip(tgt_lines).enumerate() {
            if s.split_whitespace().next().is_none() || t.split_whitespace().next().is_none() {
                return Err(Error::Misaligned(format!("line {} is empty", i + 1)));
            }
        }
        let (src_vocab, tgt_vocab) = vocabs.unwrap_or_else(|| {
            (
                Vocab::build(src_lines.iter().flat_map(|l| l.split_whitespace())),
                Vocab::build(tgt_lines.iter().flat_map(|l| l.split_whitespace())),
            )
        });
        Ok(Corpus {
            src: src_lines.iter().map(|l| src_vocab.encode(l)).collect(),
            tgt: tgt_lines.iter().map(|l| tgt_vocab.encode(l)).collect(),
            features,
            src_vocab,
            tgt_vocab,
            references,
        })
    }

    /// Checks vocabulary sizes and feature width against a model.
    pub fn check_model(&self, cfg: &ModelConfig) -> Result<()> {
        if self.src_vocab.len() != cfg.src_vocab || self.tgt_vocab.len() != cfg.tgt_vocab {
            return Err(Error::invalid(format!(
                "corpus vocabularies are {}/{} but the model expects {}/{}",
                self.src_vocab.len(),
                self.tgt_vocab.len(),
                cfg.src_vocab,
                cfg.tgt_vocab
            )));
        }
        if self.feat_dim() != cfg.feat_dim {
            return Err(Error::invalid(format!(
                "features have dimension {} but the model expects {}",
                self.feat_dim(),
                cfg.feat_dim
            )));
        }
        Ok(())
    }

    /// The examples at `indices`, sharing this corpus's vocabularies.
    pub fn subset(&self, indices: &[usize]) -> Result<Corpus> {
        let rows: Vec<Vec<f64>> = indices.iter().map(|&i| self.features.row_slice(i).to_vec()).collect();
        Ok(Corpus {
            src: indices.iter().map(|&i| self.src[i].clone()).collect(),
            tgt: indices.iter().map(|&i| self.tgt[i].clone()).collect(),
            features: Tensor::from_rows(&rows)?,
            src_vocab: self.src_vocab.clone(),
            tgt_vocab: self.tgt_vocab.clone(),
            references: indices.iter().map(|&i| self.references[i].clone()).collect(),
        })
    }
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(read_text(path)?.lines().map(str::to_string).collect())
}

/// Reads an aligned triple of files, segments both sides with the given BPE
/// models, and builds vocabularies unless supplied.
pub fn load_corpus(
    src_path: &Path,
    tgt_path: &Path,
    feat_path: &Path,
    bpe: (Option<&BpeModel>, Option<&BpeModel>),
    vocabs: Option<(Vocab, Vocab)>,
) -> Result<Corpus> {
    let src = read_lines(src_path)?;
    let tgt = read_lines(tgt_path)?;
    let features = read_features(feat_path)?;
    let rows = features.shape()[0];
    if tgt.len() != src.len() {
        return Err(Error::Misaligned(format!(
            "{} has {} lines but {} has {}",
            tgt_path.display(),
            tgt.len(),
            src_path.display(),
            src.len()
        )));
    }
    if rows != src.len() {
        return Err(Error::Misaligned(format!(
            "{} has {rows} rows but {} has {} lines",
            feat_path.display(),
            src_path.display(),
            src.len()
        )));
    }
    let segment = |lines: &[String], model: Option<&BpeModel>| -> Vec<String> {
        match model {
            Some(m) => lines.iter().map(|l| m.apply_line(l)).collect(),
            None => lines.to_vec(),
        }
    };
    let references = tgt.clone();
    Corpus::from_lines(&segment(&src, bpe.0), &segment(&tgt, bpe.1), references, features, vocabs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::write_features;
    use std::fs;

    fn files(dir: &Path, lines: usize, rows: usize) -> (std::path::PathBuf, std::path::PathBuf, std::path::PathBuf) {
        let s = dir.join("a.src");
        let t = dir.join("a.tgt");
        let f = dir.join("a.feat");
        let text: String = (0..lines).map(|i| format!("w{i} x\n")).collect();
        fs::write(&s, &text).unwrap();
        fs::write(&t, &text).unwrap();
        write_features(&f, &Tensor::zeros(&[rows, 4])).unwrap();
        (s, t, f)
    }

    #[test]
    fn three_aligned_lines() {
        let dir = tempfile::tempdir().unwrap();
        let (s, t, f) = files(dir.path(), 3, 3);
        let c = load_corpus(&s, &t, &f, (None, None), None).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.src_vocab.len(), 4 + 4);
        assert_eq!(c.src[0], vec![4, 5]);
    }

    #[test]
    fn feature_row_mismatch_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let (s, t, f) = files(dir.path(), 3, 2);
        let err = load_corpus(&s, &t, &f, (None, None), None).unwrap_err();
        assert!(err.to_string().contains("a.feat"), "{err}");
    }

    #[test]
    fn line_count_mismatch_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let (s, t, f) = files(dir.path(), 3, 3);
        fs::write(&t, "one\ntwo\n").unwrap();
        let err = load_corpus(&s, &t, &f, (None, None), None).unwrap_err();
        assert!(err.to_string().contains("a.tgt"), "{err}");
    }
}
