use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::layers::{EmbeddingParams, GhtParams, GruParams};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::trainer::xavier_init;
use crate::Prng;

use super::{ModelConfig, Variant};

/// Every trainable tensor of a model, in a fixed order, addressed by name.
///
/// The target embedding `tgt.emb` doubles as the textual output projection
/// (used transposed); there is no separate projection tensor to keep in sync.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

/// Names and shapes of every parameter for `cfg`, in storage order.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.emb_dim;
    let s = cfg.hidden;
    let c = 2 * s;
    let mut out: Vec<(String, Vec<usize>)> = Vec::new();
    let mut push = |name: &str, shape: &[usize]| out.push((name.to_string(), shape.to_vec()));

    push("src.emb", &[cfg.src_vocab, d]);
    push("src.proj", &[d, s]);
    push("tgt.emb", &[cfg.tgt_vocab, d]);
    push("tgt.proj", &[d, s]);

    let gru = |push: &mut dyn FnMut(&str, &[usize]), prefix: &str| {
        for w in ["wz", "wr", "wh"] {
            push(&format!("{prefix}.{w}"), &[s, s]);
        }
        if cfg.biases {
            for b in ["bz", "br", "bh"] {
                push(&format!("{prefix}.{b}"), &[s]);
            }
        }
    };
    gru(&mut push, "enc.fwd");
    gru(&mut push, "enc.bwd");

    push("init.w", &[c, s]);
    if cfg.biases {
        push("init.b", &[s]);
    }
    gru(&mut push, "dec.gru1");
    gru(&mut push, "dec.gru2");

    push("att.ws", &[s, c]);
    push("att.wh", &[c, c]);
    push("att.wa", &[c, 1]);
    if cfg.biases {
        push("att.b", &[c]);
    }
    push("att.wc", &[c, s]);

    match cfg.variant {
        Variant::Baseline => {
            push("img.w", &[cfg.feat_dim, s]);
            push("bot.w", &[d + s + s, d]);
            if cfg.biases {
                push("bot.b", &[d]);
            }
        }
        Variant::DeepGru => {
            push("img.wt", &[cfg.feat_dim, s]);
            push("img.wg", &[cfg.feat_dim, s]);
            push("img.bt", &[s]);
            push("img.bg", &[s]);
            push("dec.gru3.win", &[d + s + s, s]);
            gru(&mut push, "dec.gru3");
            push("bot.t.w", &[s, d]);
            push("bot.v.w", &[s, d]);
            for g in ["ght.t", "ght.v"] {
                push(&format!("{g}.wt"), &[d, d]);
                push(&format!("{g}.wg"), &[d, d]);
                push(&format!("{g}.bt"), &[d]);
                push(&format!("{g}.bg"), &[d]);
            }
            push("proj.v", &[d, cfg.tgt_vocab]);
        }
    }
    out
}

impl ModelParams {
    pub fn from_named(named: Vec<(String, Tensor)>) -> Self {
        let (names, tensors): (Vec<_>, Vec<_>) = named.into_iter().unzip();
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        ModelParams {
            names,
            tensors,
            index,
        }
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self::from_named(
            param_shapes(cfg)
                .into_iter()
                .map(|(n, s)| (n, Tensor::zeros(&s)))
                .collect(),
        )
    }

    /// Xavier-uniform matrices, zero vectors.
    pub fn init(cfg: &ModelConfig, rng: &mut Prng) -> Self {
        Self::from_named(
            param_shapes(cfg)
                .into_iter()
                .map(|(n, s)| {
                    let t = if s.len() == 2 {
                        xavier_init(&s, rng).expect("2-D shape")
                    } else {
                        Tensor::zeros(&s)
                    };
                    (n, t)
                })
                .collect(),
        )
    }

    /// Checks that names and shapes match what `cfg` requires.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let want = param_shapes(cfg);
        for name in &self.names {
            if !want.iter().any(|(n, _)| n == name) {
                return Err(Error::invalid(format!("unknown parameter `{name}`")));
            }
        }
        for (name, shape) in &want {
            match self.get(name) {
                None => return Err(Error::invalid(format!("missing parameter `{name}`"))),
                Some(t) if t.shape() != &shape[..] => {
                    return Err(Error::invalid(format!(
                        "parameter `{name}` has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// The textual output projection `d×|V|`, read through the tied target
    /// embedding table.
    pub fn output_projection(&self) -> TiedProjection<'_> {
        TiedProjection {
            emb: self.get("tgt.emb").expect("tgt.emb always present"),
        }
    }

    /// Puts every tensor on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound<'_> {
        let vars = self.tensors.iter().map(|t| tape.param(t.clone())).collect();
        self.bound(vars)
    }

    /// Wraps variables already on a tape, one per tensor in storage order.
    pub fn bound(&self, vars: Vec<Var>) -> Bound<'_> {
        assert_eq!(vars.len(), self.tensors.len(), "one variable per parameter");
        Bound {
            vars,
            index: &self.index,
        }
    }
}

/// Transposed view of the target embedding table.
#[derive(Debug, Clone, Copy)]
pub struct TiedProjection<'a> {
    emb: &'a Tensor,
}

impl TiedProjection<'_> {
    pub fn shape(&self) -> [usize; 2] {
        [self.emb.shape()[1], self.emb.shape()[0]]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.emb.at(j, i)
    }
}

/// Parameters bound as tape variables, in storage order.
pub struct Bound<'a> {
    pub vars: Vec<Var>,
    index: &'a HashMap<String, usize>,
}

impl Bound<'_> {
    pub fn var(&self, name: &str) -> Var {
        self.vars[self.index[name]]
    }

    fn opt(&self, name: &str) -> Option<Var> {
        self.index.get(name).map(|&i| self.vars[i])
    }

    pub(crate) fn gru(&self, prefix: &str) -> GruParams {
        GruParams {
            wz: self.var(&format!("{prefix}.wz")),
            wr: self.var(&format!("{prefix}.wr")),
            wh: self.var(&format!("{prefix}.wh")),
            bias: self.opt(&format!("{prefix}.bz")).map(|bz| {
                [
                    bz,
                    self.var(&format!("{prefix}.br")),
                    self.var(&format!("{prefix}.bh")),
                ]
            }),
        }
    }

    pub(crate) fn ght(&self, prefix: &str) -> GhtParams {
        GhtParams {
            wt: self.var(&format!("{prefix}.wt")),
            wg: self.var(&format!("{prefix}.wg")),
            bt: self.var(&format!("{prefix}.bt")),
            bg: self.var(&format!("{prefix}.bg")),
        }
    }

    pub(crate) fn embedding(&self, side: &str) -> EmbeddingParams {
        EmbeddingParams {
            table: self.var(&format!("{side}.emb")),
            proj: self.var(&format!("{side}.proj")),
        }
    }

    pub(crate) fn optional(&self, name: &str) -> Option<Var> {
        self.opt(name)
    }
}
