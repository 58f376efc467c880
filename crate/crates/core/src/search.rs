//! Beam search over any step-wise scorer, with probability-level ensembling.
//!
//! A scorer keeps one state row per live hypothesis. Each step it receives
//! the previous token of every hypothesis and returns next-token
//! distributions plus updated states. Hypotheses retire when they emit
//! `<eos>`; the finished hypothesis with the best length-normalised log
//! probability wins.

use rayon::prelude::*;

use crate::bpe::undo_line;
use crate::error::{Error, Result};
use crate::io::Corpus;
use crate::layers::Mode;
use crate::model::{decoder_step, encode, init_decoder, visual_project, Encoded, Model};
use crate::metrics::bleu4;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::vocab::{Vocab, BOS, EOS, PAD};
use crate::DropoutRates;

pub const DEFAULT_BEAM: usize = 12;

pub trait StepScorer {
    fn vocab_size(&self) -> usize;
    /// State of the empty hypothesis, a `1×n` tensor.
    fn initial_state(&self) -> Result<Tensor>;
    /// `prev` holds one token per state row. Returns `K×V` probabilities and
    /// the `K×n` successor states.
    fn step(&self, prev: &[usize], states: &Tensor) -> Result<(Tensor, Tensor)>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Combine {
    /// Mean of the member distributions.
    #[default]
    Arithmetic,
    /// Renormalised geometric mean.
    Geometric,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Emitted tokens, ending in `<eos>` when finished.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Log probability per emitted token, `<eos>` included.
    pub fn score(&self) -> f64 {
        self.log_prob / self.tokens.len().max(1) as f64
    }

    /// Tokens without the closing `<eos>`.
    pub fn words(&self) -> &[usize] {
        match self.tokens.split_last() {
            Some((&EOS, rest)) => rest,
            _ => &self.tokens,
        }
    }
}

/// Combines `K×V` distributions from several models.
pub fn ensemble_step(probs: &[Tensor], combine: Combine) -> Result<Tensor> {
    let first = probs.first().ok_or_else(|| Error::invalid("empty ensemble"))?;
    for p in &probs[1..] {
        if p.shape() != first.shape() {
            return Err(Error::Shape {
                op: "ensemble",
                lhs: first.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
    }
    if probs.len() == 1 {
        return Ok(first.clone());
    }
    let k = probs.len() as f64;
    match combine {
        Combine::Arithmetic => {
            let mut acc = first.clone();
            for p in &probs[1..] {
                acc = acc.add(p)?;
            }
            Ok(acc.scale(1.0 / k))
        }
        Combine::Geometric => {
            let (rows, cols) = first.dims2("ensemble")?;
            let mut out = vec![0.0; rows * cols];
            for (i, o) in out.iter_mut().enumerate() {
                let log: f64 = probs.iter().map(|p| p.data()[i].ln()).sum();
                *o = (log / k).exp();
            }
            for r in 0..rows {
                let row = &mut out[r * cols..(r + 1) * cols];
                let z: f64 = row.iter().sum();
                if z > 0.0 {
                    row.iter_mut().for_each(|x| *x /= z);
                }
            }
            Ok(Tensor::from_parts(vec![rows, cols], out))
        }
    }
}

fn take_rows(t: &Tensor, rows: &[usize]) -> Tensor {
    let cols = t.shape()[1];
    let mut data = Vec::with_capacity(rows.len() * cols);
    for &r in rows {
        data.extend_from_slice(t.row_slice(r));
    }
    Tensor::from_parts(vec![rows.len(), cols], data)
}

struct Live {
    tokens: Vec<usize>,
    log_prob: f64,
}

/// Beam search with `beam` hypotheses for at most `max_len` emitted tokens.
/// Returns every finished hypothesis best first, or the surviving unfinished
/// ones when nothing finished within `max_len`.
pub fn beam_search(
    models: &[&dyn StepScorer],
    beam: usize,
    max_len: usize,
    combine: Combine,
) -> Result<Vec<Hypothesis>> {
    if beam == 0 {
        return Err(Error::invalid("beam size must be at least 1"));
    }
    if max_len == 0 {
        return Err(Error::invalid("maximum length must be at least 1"));
    }
    let first = models.first().ok_or_else(|| Error::invalid("no models to search with"))?;
    let vocab = first.vocab_size();
    if models.iter().any(|m| m.vocab_size() != vocab) {
        return Err(Error::invalid("ensemble members disagree on the target vocabulary"));
    }

    let mut states: Vec<Tensor> = models.iter().map(|m| m.initial_state()).collect::<Result<_>>()?;
    let mut live = vec![Live {
        tokens: Vec::new(),
        log_prob: 0.0,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for _ in 0..max_len {
        let prev: Vec<usize> = live.iter().map(|h| h.tokens.last().copied().unwrap_or(BOS)).collect();
        let mut dists = Vec::with_capacity(models.len());
        let mut next_states = Vec::with_capacity(models.len());
        for (m, s) in models.iter().zip(&states) {
            let (p, s) = m.step(&prev, s)?;
            dists.push(p);
            next_states.push(s);
        }
        let probs = ensemble_step(&dists, combine)?;

        let mut cands: Vec<(f64, usize, usize)> = Vec::with_capacity(live.len() * vocab);
        for (k, h) in live.iter().enumerate() {
            for (v, &p) in probs.row_slice(k).iter().enumerate() {
                if v == PAD || v == BOS || p <= 0.0 {
                    continue;
                }
                cands.push((h.log_prob + p.ln(), v, k));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        cands.truncate(beam - finished.len());

        let mut next = Vec::with_capacity(cands.len());
        let mut parents = Vec::with_capacity(cands.len());
        for (log_prob, v, k) in cands {
            let mut tokens = live[k].tokens.clone();
            tokens.push(v);
            if v == EOS {
                finished.push(Hypothesis {
                    tokens,
                    log_prob,
                    finished: true,
                });
            } else {
                next.push(Live { tokens, log_prob });
                parents.push(k);
            }
        }
        live = next;
        if live.is_empty() || finished.len() >= beam {
            break;
        }
        states = next_states.iter().map(|s| take_rows(s, &parents)).collect();
    }

    let mut out = if finished.is_empty() {
        live.into_iter()
            .map(|h| Hypothesis {
                tokens: h.tokens,
                log_prob: h.log_prob,
                finished: false,
            })
            .collect()
    } else {
        finished
    };
    out.sort_by(|a, b| b.score().total_cmp(&a.score()).then_with(|| a.tokens.cmp(&b.tokens)));
    Ok(out)
}

/// Step scorer for one source sentence and image under a trained model.
/// The encoder runs once; every step replays the decoder on a fresh tape in
/// evaluation mode.
pub struct SentenceDecoder<'a> {
    model: &'a Model,
    annotations: Vec<Tensor>,
    keys: Vec<Tensor>,
    visual: Tensor,
    init: Tensor,
}

fn repeat_row(t: &Tensor, k: usize) -> Tensor {
    take_rows(t, &vec![0; k])
}

impl<'a> SentenceDecoder<'a> {
    pub fn new(model: &'a Model, src: &[usize], features: &[f64]) -> Result<Self> {
        let cfg = &model.config;
        if src.is_empty() {
            return Err(Error::invalid("empty source sentence"));
        }
        if features.len() != cfg.feat_dim {
            return Err(Error::invalid(format!(
                "feature row has {} values, model expects {}",
                features.len(),
                cfg.feat_dim
            )));
        }
        if let Some(&bad) = src.iter().find(|&&id| id >= cfg.src_vocab) {
            return Err(Error::IdOutOfRange {
                id: bad,
                size: cfg.src_vocab,
            });
        }
        let mut tape = Tape::new();
        let w = model.params.bind(&mut tape);
        let mask = vec![true; src.len()];
        let enc = encode(&mut tape, &w, cfg, src, &mask, 1, &mut Mode::Eval, &DropoutRates::NONE)?;
        let init = init_decoder(&mut tape, &w, &enc)?;
        let feats = tape.constant(Tensor::row(features));
        let visual = visual_project(&mut tape, &w, cfg, feats)?;
        Ok(SentenceDecoder {
            model,
            annotations: enc.annotations.iter().map(|&v| tape.value(v).clone()).collect(),
            keys: enc.keys.iter().map(|&v| tape.value(v).clone()).collect(),
            visual: tape.value(visual).clone(),
            init: tape.value(init).clone(),
        })
    }
}

impl StepScorer for SentenceDecoder<'_> {
    fn vocab_size(&self) -> usize {
        self.model.config.tgt_vocab
    }

    fn initial_state(&self) -> Result<Tensor> {
        Ok(self.init.clone())
    }

    fn step(&self, prev: &[usize], states: &Tensor) -> Result<(Tensor, Tensor)> {
        let k = prev.len();
        let mut tape = Tape::new();
        let w = self.model.params.bind(&mut tape);
        let enc = Encoded {
            annotations: self.annotations.iter().map(|a| tape.constant(repeat_row(a, k))).collect(),
            keys: self.keys.iter().map(|a| tape.constant(repeat_row(a, k))).collect(),
            mask: vec![true; k * self.annotations.len()],
            rows: k,
        };
        let visual = tape.constant(repeat_row(&self.visual, k));
        let state = tape.constant(states.clone());
        let out = decoder_step(
            &mut tape,
            &w,
            &self.model.config,
            &enc,
            visual,
            prev,
            state,
            &mut Mode::Eval,
            &DropoutRates::NONE,
        )?;
        Ok((tape.value(out.probs).clone(), tape.value(out.state).clone()))
    }
}

/// Best translation (token ids, no `<eos>`) of one sentence by an ensemble.
pub fn translate(
    models: &[&Model],
    src: &[usize],
    features: &[f64],
    beam: usize,
    max_len: usize,
    combine: Combine,
) -> Result<Vec<usize>> {
    let decoders: Vec<SentenceDecoder> = models
        .iter()
        .map(|m| SentenceDecoder::new(m, src, features))
        .collect::<Result<_>>()?;
    let scorers: Vec<&dyn StepScorer> = decoders.iter().map(|d| d as &dyn StepScorer).collect();
    let hyps = beam_search(&scorers, beam, max_len, combine)?;
    Ok(hyps.first().map(|h| h.words().to_vec()).unwrap_or_default())
}

/// Length cap used for a source of `src_len` tokens.
pub fn max_len_for(src_len: usize) -> usize {
    2 * src_len + 5
}

/// Target ids to text. Subword markers are undone when the vocabulary holds
/// segmented units; plain word vocabularies are joined with spaces.
pub fn detokenize(vocab: &Vocab, ids: &[usize]) -> String {
    let text = vocab.decode(ids);
    if vocab.is_subword() {
        undo_line(&text)
    } else {
        text
    }
}

/// Translates sentences in parallel, keeping input order. Output lines are
/// detokenised (subword markers removed). Without `max_len` each sentence
/// gets [`max_len_for`] of its source length.
pub fn translate_all(
    models: &[&Model],
    src: &[Vec<usize>],
    features: &Tensor,
    tgt_vocab: &Vocab,
    beam: usize,
    max_len: Option<usize>,
    combine: Combine,
) -> Result<Vec<String>> {
    let (rows, _) = features.dims2("features")?;
    if rows != src.len() {
        return Err(Error::Misaligned(format!("{} sentences but {rows} feature rows", src.len())));
    }
    (0..src.len())
        .into_par_iter()
        .map(|i| {
            let cap = max_len.unwrap_or_else(|| max_len_for(src[i].len()));
            let ids = translate(models, &src[i], features.row_slice(i), beam, cap, combine)?;
            Ok(detokenize(tgt_vocab, &ids))
        })
        .collect()
}

/// [`translate_all`] over the source side of a corpus.
pub fn translate_corpus(models: &[&Model], corpus: &Corpus, beam: usize, combine: Combine) -> Result<Vec<String>> {
    translate_all(models, &corpus.src, &corpus.features, &corpus.tgt_vocab, beam, None, combine)
}

/// Greedy-decoding BLEU of `model` on `corpus`, used for early stopping.
pub fn validation_bleu(model: &Model, corpus: &Corpus) -> Result<f64> {
    let hyps = translate_corpus(&[model], corpus, 1, Combine::Arithmetic)?;
    Ok(bleu4(&hyps, &corpus.references)?.bleu)
}
