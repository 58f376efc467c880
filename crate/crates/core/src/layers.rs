//! Reusable blocks: the GRU cell, gated hyperbolic tangent, embedding with
//! projection, and inverted dropout.
//!
//! All blocks work on row-major batches: an input of shape `B×n` holds one
//! example per row, and weights multiply on the right (`x·W`).

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::Prng;

/// Whether a forward pass is for training (dropout active) or evaluation.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut Prng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Recurrent weights of one GRU block. Every gate adds the same projected
/// input `x′`, so there is no per-gate input matrix.
#[derive(Debug, Clone)]
pub struct GruParams<T = Var> {
    pub wz: T,
    pub wr: T,
    pub wh: T,
    pub bias: Option<[T; 3]>,
}

#[derive(Debug, Clone)]
pub struct GhtParams<T = Var> {
    pub wt: T,
    pub wg: T,
    pub bt: T,
    pub bg: T,
}

#[derive(Debug, Clone)]
pub struct EmbeddingParams<T = Var> {
    pub table: T,
    pub proj: T,
}

impl GruParams<Tensor> {
    pub fn bind(&self, tape: &mut Tape) -> GruParams {
        GruParams {
            wz: tape.param(self.wz.clone()),
            wr: tape.param(self.wr.clone()),
            wh: tape.param(self.wh.clone()),
            bias: self
                .bias
                .as_ref()
                .map(|b| b.clone().map(|t| tape.param(t))),
        }
    }
}

impl GhtParams<Tensor> {
    pub fn bind(&self, tape: &mut Tape) -> GhtParams {
        GhtParams {
            wt: tape.param(self.wt.clone()),
            wg: tape.param(self.wg.clone()),
            bt: tape.param(self.bt.clone()),
            bg: tape.param(self.bg.clone()),
        }
    }
}

impl EmbeddingParams<Tensor> {
    pub fn bind(&self, tape: &mut Tape) -> EmbeddingParams {
        EmbeddingParams {
            table: tape.param(self.table.clone()),
            proj: tape.param(self.proj.clone()),
        }
    }
}

fn affine(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add_row(y, b),
        None => Ok(y),
    }
}

/// One GRU step:
///
/// ```text
/// z  = σ(x′ + h·Wz)
/// r  = σ(x′ + h·Wr)
/// h̄  = tanh(x′ + r ⊙ (h·Wh))
/// h′ = (1 − z) ⊙ h̄ + z ⊙ h
/// ```
///
/// with optional per-gate biases added inside each nonlinearity.
pub fn gru_cell(tape: &mut Tape, x: Var, h_prev: Var, p: &GruParams) -> Result<Var> {
    let d = tape.value(p.wz).dims2("gru_cell")?;
    if d.0 != d.1 || tape.value(p.wr).shape() != [d.0, d.0] || tape.value(p.wh).shape() != [d.0, d.0] {
        return Err(Error::invalid("GRU recurrent matrices must be square and equal"));
    }
    let [bz, br, bh] = match &p.bias {
        Some(b) => b.map(Some),
        None => [None; 3],
    };
    let hz = affine(tape, h_prev, p.wz, bz)?;
    let z_in = tape.add(x, hz)?;
    let z = tape.sigmoid(z_in);

    let hr = affine(tape, h_prev, p.wr, br)?;
    let r_in = tape.add(x, hr)?;
    let r = tape.sigmoid(r_in);

    let hh = tape.matmul(h_prev, p.wh)?;
    let gated = tape.mul(r, hh)?;
    let mut cand = tape.add(x, gated)?;
    if let Some(bh) = bh {
        cand = tape.add_row(cand, bh)?;
    }
    let cand = tape.tanh(cand);

    // h̄ + z ⊙ (h − h̄)
    let diff = tape.sub(h_prev, cand)?;
    let carry = tape.mul(z, diff)?;
    tape.add(cand, carry)
}

/// `tanh(x·Wt + bt) ⊙ σ(x·Wg + bg)`.
pub fn gated_tanh(tape: &mut Tape, x: Var, p: &GhtParams) -> Result<Var> {
    if tape.value(p.wt).shape() != tape.value(p.wg).shape() {
        return Err(Error::Shape {
            op: "gated_tanh",
            lhs: tape.value(p.wt).shape().to_vec(),
            rhs: tape.value(p.wg).shape().to_vec(),
        });
    }
    let t = affine(tape, x, p.wt, Some(p.bt))?;
    let t = tape.tanh(t);
    let g = affine(tape, x, p.wg, Some(p.bg))?;
    let g = tape.sigmoid(g);
    tape.mul(t, g)
}

/// Looks up `ids` in the embedding table and projects to the recurrent size.
pub fn embed(tape: &mut Tape, ids: &[usize], p: &EmbeddingParams) -> Result<Var> {
    let rows = tape.gather(p.table, ids)?;
    tape.matmul(rows, p.proj)
}

/// Inverted dropout: in training, zeroes each element with probability `rate`
/// and scales survivors by `1/(1 − rate)`. Identity in evaluation.
pub fn dropout(tape: &mut Tape, x: Var, rate: f64, mode: &mut Mode) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
    }
    let rng = match mode {
        Mode::Train(rng) if rate > 0.0 => rng,
        _ => return Ok(x),
    };
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    let shape = tape.value(x).shape().to_vec();
    let n = tape.value(x).len();
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 })
        .collect();
    tape.mark_stochastic();
    tape.mul_const(x, Tensor::from_parts(shape, mask))
}
