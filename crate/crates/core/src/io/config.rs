//! `key = value` configuration text. Blank lines and `#` comments are
//! ignored; keys not present keep their defaults.

use crate::error::{Error, Result};
use crate::model::Variant;
use crate::trainer::TrainConfig;

pub fn render_config(cfg: &TrainConfig) -> String {
    let m = &cfg.model;
    let d = &cfg.dropout;
    let a = &cfg.adam;
    format!(
        "variant = {}\n\
         emb_dim = {}\n\
         hidden = {}\n\
         feat_dim = {}\n\
         src_vocab = {}\n\
         tgt_vocab = {}\n\
         biases = {}\n\
         batch_size = {}\n\
         clip_norm = {}\n\
         dropout_embeddings = {}\n\
         dropout_annotations = {}\n\
         dropout_bottleneck = {}\n\
         lr = {}\n\
         beta1 = {}\n\
         beta2 = {}\n\
         adam_eps = {}\n\
         eval_interval = {}\n\
         patience = {}\n\
         max_updates = {}\n\
         seed = {}\n",
        m.variant,
        m.emb_dim,
        m.hidden,
        m.feat_dim,
        m.src_vocab,
        m.tgt_vocab,
        m.biases,
        cfg.batch_size,
        cfg.clip_norm,
        d.embeddings,
        d.annotations,
        d.bottleneck,
        a.lr,
        a.beta1,
        a.beta2,
        a.eps,
        cfg.eval_interval,
        cfg.patience,
        cfg.max_updates,
        cfg.seed,
    )
}

fn value<T: std::str::FromStr>(key: &str, raw: &str, line: usize) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::invalid(format!("config line {line}: bad value `{raw}` for `{key}`")))
}

/// Parses config text over `TrainConfig::default()`.
pub fn parse_config(text: &str) -> Result<TrainConfig> {
    parse_config_over(text, TrainConfig::default())
}

pub fn parse_config_over(text: &str, mut cfg: TrainConfig) -> Result<TrainConfig> {
    for (i, raw) in text.lines().enumerate() {
        let n = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, val) = line
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("config line {n}: expected `key = value`")))?;
        let (key, val) = (key.trim(), val.trim());
        match key {
            "variant" => cfg.model.variant = val.parse::<Variant>()?,
            "emb_dim" => cfg.model.emb_dim = value(key, val, n)?,
            "hidden" => cfg.model.hidden = value(key, val, n)?,
            "feat_dim" => cfg.model.feat_dim = value(key, val, n)?,
            "src_vocab" => cfg.model.src_vocab = value(key, val, n)?,
            "tgt_vocab" => cfg.model.tgt_vocab = value(key, val, n)?,
            "biases" => cfg.model.biases = value(key, val, n)?,
            "batch_size" => cfg.batch_size = value(key, val, n)?,
            "clip_norm" => cfg.clip_norm = value(key, val, n)?,
            "dropout_embeddings" => cfg.dropout.embeddings = value(key, val, n)?,
            "dropout_annotations" => cfg.dropout.annotations = value(key, val, n)?,
            "dropout_bottleneck" => cfg.dropout.bottleneck = value(key, val, n)?,
            "lr" => cfg.adam.lr = value(key, val, n)?,
            "beta1" => cfg.adam.beta1 = value(key, val, n)?,
            "beta2" => cfg.adam.beta2 = value(key, val, n)?,
            "adam_eps" => cfg.adam.eps = value(key, val, n)?,
            "eval_interval" => cfg.eval_interval = value(key, val, n)?,
            "patience" => cfg.patience = value(key, val, n)?,
            "max_updates" => cfg.max_updates = value(key, val, n)?,
            "seed" => cfg.seed = value(key, val, n)?,
            other => {
                return Err(Error::invalid(format!("config line {n}: unknown key `{other}`")));
            }
        }
    }
    Ok(cfg)
}
