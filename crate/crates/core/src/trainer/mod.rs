//! Training loop: bucketed minibatches, ADAM with global-norm clipping, and
//! periodic validation with patience-based early stopping.

mod optim;

use std::fmt::Write as _;

use rand::seq::SliceRandom;

pub use optim::{
    clip_grad_norm, global_norm, xavier_bound, xavier_init, AdamConfig, AdamState, ADAM_EPS, BETA1,
    BETA2, CLIP_NORM, LEARNING_RATE,
};

use crate::error::{Error, Result};
use crate::io::Corpus;
use crate::layers::Mode;
use crate::model::{loss_and_grads, Batch, DropoutRates, Example, Model, ModelConfig};
use crate::Prng;

pub const BATCH_SIZE: usize = 32;
pub const EVAL_INTERVAL: usize = 1000;
pub const PATIENCE: usize = 10;

/// Pools of this many batches are sorted by length before batching.
const BUCKET_POOL: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub dropout: DropoutRates,
    pub adam: AdamConfig,
    /// Updates between validations.
    pub eval_interval: usize,
    /// Validations without a new best before stopping.
    pub patience: usize,
    pub max_updates: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            batch_size: BATCH_SIZE,
            clip_norm: CLIP_NORM,
            dropout: DropoutRates::default(),
            adam: AdamConfig::default(),
            eval_interval: EVAL_INTERVAL,
            patience: PATIENCE,
            max_updates: 1_000_000,
            seed: 1234,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 || self.eval_interval == 0 || self.patience == 0 || self.max_updates == 0 {
            return Err(Error::invalid(
                "batch_size, eval_interval, patience and max_updates must be positive",
            ));
        }
        if !(self.clip_norm > 0.0 && self.adam.lr > 0.0) {
            return Err(Error::invalid("clip_norm and lr must be positive"));
        }
        for r in [self.dropout.embeddings, self.dropout.annotations, self.dropout.bottleneck] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::invalid(format!("dropout rate {r} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// One validation point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogEntry {
    pub update: usize,
    /// Mean training loss over the updates since the previous entry.
    pub loss: f64,
    pub val_bleu: f64,
}

/// `update<TAB>loss<TAB>val_bleu`, one line per validation.
pub fn format_log(entries: &[LogEntry]) -> String {
    let mut s = String::new();
    for e in entries {
        let _ = writeln!(s, "{}\t{:.6}\t{:.6}", e.update, e.loss, e.val_bleu);
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters at the best validation score (or the final ones if no
    /// validation ran).
    pub best: Model,
    pub best_score: Option<f64>,
    pub best_adam: AdamState,
    pub last: Model,
    pub updates: usize,
    pub evaluations: usize,
    pub stopped_early: bool,
    /// Training loss of every update, in order.
    pub losses: Vec<f64>,
    pub log: Vec<LogEntry>,
}

/// Splits example indices into batches: shuffle, sort pools by length, cut,
/// then shuffle the batch order.
pub fn make_batches(corpus: &Corpus, batch_size: usize, rng: &mut Prng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(rng);
    let mut batches = Vec::new();
    for pool in order.chunks(batch_size * BUCKET_POOL) {
        let mut pool = pool.to_vec();
        pool.sort_by_key(|&i| (corpus.src[i].len(), corpus.tgt[i].len()));
        batches.extend(pool.chunks(batch_size).map(<[usize]>::to_vec));
    }
    batches.shuffle(rng);
    batches
}

pub fn batch_of(corpus: &Corpus, indices: &[usize]) -> Result<Batch> {
    let examples: Vec<Example> = indices
        .iter()
        .map(|&i| Example {
            src: &corpus.src[i],
            tgt: &corpus.tgt[i],
            features: corpus.features.row_slice(i),
        })
        .collect();
    Batch::new(&examples)
}

/// Runs training from `model` until early stopping or `max_updates`.
///
/// `validate` scores a model (higher is better); `on_improve` is called with
/// each new best model, e.g. to write a checkpoint.
pub fn train(
    cfg: &TrainConfig,
    mut model: Model,
    data: &Corpus,
    rng: &mut Prng,
    validate: &mut dyn FnMut(&Model) -> Result<f64>,
    on_improve: &mut dyn FnMut(&Model, &AdamState, &LogEntry) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("empty training corpus"));
    }
    data.check_model(&model.config)?;

    let mut adam = AdamState::new(cfg.adam, model.params.tensors());
    let names = model.params.names().to_vec();
    let mut losses = Vec::new();
    let mut log = Vec::new();
    let mut best: Option<(f64, Model, AdamState)> = None;
    let mut bad_evals = 0;
    let mut updates = 0;
    let mut since_eval = 0.0;
    let mut stopped_early = false;

    'outer: loop {
        for indices in make_batches(data, cfg.batch_size, rng) {
            let batch = batch_of(data, &indices)?;
            let (loss, mut grads) = loss_and_grads(&model, &batch, &mut Mode::Train(rng), &cfg.dropout)?;
            clip_grad_norm(&mut grads, &names, cfg.clip_norm)?;
            adam.step(model.params.tensors_mut(), &grads)?;
            updates += 1;
            losses.push(loss);
            since_eval += loss;

            if updates % cfg.eval_interval == 0 {
                let score = validate(&model)?;
                let entry = LogEntry {
                    update: updates,
                    loss: since_eval / cfg.eval_interval as f64,
                    val_bleu: score,
                };
                since_eval = 0.0;
                log.push(entry);
                if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
                    bad_evals = 0;
                    on_improve(&model, &adam, &entry)?;
                    best = Some((score, model.clone(), adam.clone()));
                } else {
                    bad_evals += 1;
                    if bad_evals >= cfg.patience {
                        stopped_early = true;
                        break 'outer;
                    }
                }
            }
            if updates >= cfg.max_updates {
                break 'outer;
            }
        }
    }

    let evaluations = log.len();
    let (best_score, best_model, best_adam) = match best {
        Some((s, m, a)) => (Some(s), m, a),
        None => (None, model.clone(), adam.clone()),
    };
    Ok(TrainOutcome {
        best: best_model,
        best_score,
        best_adam,
        last: model,
        updates,
        evaluations,
        stopped_early,
        losses,
        log,
    })
}

/// Mean evaluation-mode loss over a whole corpus, weighted by target tokens.
pub fn corpus_loss(model: &Model, data: &Corpus, batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0.0;
    let order: Vec<usize> = (0..data.len()).collect();
    for chunk in order.chunks(batch_size.max(1)) {
        let batch = batch_of(data, chunk)?;
        let n = batch.num_target_tokens();
        let loss = crate::model::forward_loss(model, &batch, &mut Mode::Eval, &DropoutRates::NONE)?;
        total += loss * n;
        tokens += n;
    }
    Ok(total / tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;
    use crate::seeded;
    use crate::toy::{copy_task, ToySpec};

    fn tiny_corpus() -> Corpus {
        let spec = ToySpec {
            pairs: 40,
            vocab: 12,
            min_len: 2,
            max_len: 4,
            feat_dim: 32,
            noise: 0.0,
            seed: 3,
        };
        copy_task(&spec).corpus()
    }

    fn tiny_cfg(variant: Variant, corpus: &Corpus) -> TrainConfig {
        TrainConfig {
            model: ModelConfig::desk(variant, corpus.src_vocab.len(), corpus.tgt_vocab.len()),
            batch_size: 8,
            eval_interval: 5,
            max_updates: 20,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn defaults_match_published_settings() {
        let c = TrainConfig::default();
        assert_eq!(c.adam.lr, 0.0004);
        assert_eq!(c.batch_size, 32);
        assert_eq!(c.clip_norm, 5.0);
        assert_eq!(c.eval_interval, 1000);
        assert_eq!(c.patience, 10);
        assert_eq!(
            (c.dropout.embeddings, c.dropout.annotations, c.dropout.bottleneck),
            (0.3, 0.5, 0.5)
        );
    }

    #[test]
    fn constant_metric_with_patience_one_stops_after_two_evaluations() {
        let corpus = tiny_corpus();
        let cfg = TrainConfig {
            patience: 1,
            max_updates: 1000,
            ..tiny_cfg(Variant::Baseline, &corpus)
        };
        let mut rng = seeded(cfg.seed);
        let model = Model::init(cfg.model, &mut rng).unwrap();
        let mut improvements = 0;
        let out = train(
            &cfg,
            model,
            &corpus,
            &mut rng,
            &mut |_| Ok(0.25),
            &mut |_, _, _| {
                improvements += 1;
                Ok(())
            },
        )
        .unwrap();
        assert_eq!(out.evaluations, 2);
        assert_eq!(out.updates, 10);
        assert!(out.stopped_early);
        assert_eq!(improvements, 1);
    }

    #[test]
    fn same_seed_same_curve() {
        let corpus = tiny_corpus();
        let cfg = tiny_cfg(Variant::DeepGru, &corpus);
        let run = || {
            let mut rng = seeded(cfg.seed);
            let model = Model::init(cfg.model, &mut rng).unwrap();
            train(&cfg, model, &corpus, &mut rng, &mut |_| Ok(0.0), &mut |_, _, _| Ok(())).unwrap()
        };
        let (a, b) = (run(), run());
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.losses), bits(&b.losses));
        assert_eq!(a.last.params, b.last.params);
    }

    #[test]
    fn batches_cover_every_example_once() {
        let corpus = tiny_corpus();
        let mut rng = seeded(9);
        let mut seen: Vec<usize> = make_batches(&corpus, 7, &mut rng).concat();
        seen.sort_unstable();
        assert_eq!(seen, (0..corpus.len()).collect::<Vec<_>>());
    }

    #[test]
    fn log_format() {
        let s = format_log(&[LogEntry {
            update: 1000,
            loss: 1.5,
            val_bleu: 0.25,
        }]);
        assert_eq!(s, "1000\t1.500000\t0.250000\n");
    }
}
