use crate::error::{Error, Result};
use crate::layers::{dropout, embed, gated_tanh, gru_cell, Mode};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::params::Bound;
use super::{Batch, DropoutRates, Model, ModelConfig, Variant};

/// Encoder output for a batch: one `B×2S` annotation per source position,
/// their attention keys, and the `B×M` source mask.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub annotations: Vec<Var>,
    pub keys: Vec<Var>,
    pub mask: Vec<bool>,
    pub rows: usize,
}

impl Encoded {
    pub fn len(&self) -> usize {
        self.annotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.annotations.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StepOutput {
    /// `B×|V|` next-token distributions.
    pub probs: Var,
    /// Decoder state carried to the next step.
    pub state: Var,
    /// Attention context `c_t` after fusion (baseline) or projection (DeepGRU).
    pub context: Var,
    /// `B×M` attention weights.
    pub attention: Var,
}

fn mask_column(mask: &[bool], rows: usize, len: usize, t: usize) -> Vec<bool> {
    (0..rows).map(|r| mask[r * len + t]).collect()
}

/// Bidirectional GRU over `src` (row-major `rows×len`, padded where `mask` is
/// false). Padding steps leave the recurrent state untouched and produce
/// all-zero annotation rows, so padding never changes real positions.
#[allow(clippy::too_many_arguments)]
pub fn encode(
    tape: &mut Tape,
    w: &Bound,
    cfg: &ModelConfig,
    src: &[usize],
    mask: &[bool],
    rows: usize,
    mode: &mut Mode,
    rates: &DropoutRates,
) -> Result<Encoded> {
    if rows == 0 || src.is_empty() {
        return Err(Error::invalid("empty source"));
    }
    if !src.len().is_multiple_of(rows) || mask.len() != src.len() {
        return Err(Error::invalid("source ids and mask disagree with row count"));
    }
    let len = src.len() / rows;
    for r in 0..rows {
        if !mask[r * len..(r + 1) * len].iter().any(|&m| m) {
            return Err(Error::invalid(format!("empty source in row {r}")));
        }
    }
    let emb = w.embedding("src");
    let s = cfg.hidden;

    let mut inputs = Vec::with_capacity(len);
    for t in 0..len {
        let ids: Vec<usize> = (0..rows).map(|r| src[r * len + t]).collect();
        let x = embed(tape, &ids, &emb)?;
        inputs.push(dropout(tape, x, rates.embeddings, mode)?);
    }
    let columns: Vec<Vec<bool>> = (0..len).map(|t| mask_column(mask, rows, len, t)).collect();

    let zeros = tape.constant(Tensor::zeros(&[rows, s]));
    let run = |tape: &mut Tape, prefix: &str, order: &mut dyn Iterator<Item = usize>| -> Result<Vec<Var>> {
        let gru = w.gru(prefix);
        let mut h = zeros;
        let mut out = vec![zeros; len];
        for t in order {
            let next = gru_cell(tape, inputs[t], h, &gru)?;
            h = tape.select_rows(&columns[t], next, h)?;
            out[t] = h;
        }
        Ok(out)
    };
    let fwd = run(tape, "enc.fwd", &mut (0..len))?;
    let bwd = run(tape, "enc.bwd", &mut (0..len).rev())?;

    let zero_ann = tape.constant(Tensor::zeros(&[rows, 2 * s]));
    let wh = w.var("att.wh");
    let bias = w.optional("att.b");
    let mut annotations = Vec::with_capacity(len);
    let mut keys = Vec::with_capacity(len);
    for t in 0..len {
        let h = tape.concat(&[fwd[t], bwd[t]])?;
        let h = tape.select_rows(&columns[t], h, zero_ann)?;
        let h = dropout(tape, h, rates.annotations, mode)?;
        let mut k = tape.matmul(h, wh)?;
        if let Some(b) = bias {
            k = tape.add_row(k, b)?;
        }
        annotations.push(h);
        keys.push(k);
    }
    Ok(Encoded {
        annotations,
        keys,
        mask: mask.to_vec(),
        rows,
    })
}

/// Initial decoder state: `tanh(W_init · mean of unmasked annotations)`.
pub fn init_decoder(tape: &mut Tape, w: &Bound, enc: &Encoded) -> Result<Var> {
    if enc.is_empty() {
        return Err(Error::invalid("no annotations"));
    }
    let len = enc.len();
    let mut weights = vec![0.0; enc.rows * len];
    for r in 0..enc.rows {
        let row = &enc.mask[r * len..(r + 1) * len];
        let n = row.iter().filter(|&&m| m).count() as f64;
        for (t, &m) in row.iter().enumerate() {
            if m {
                weights[r * len + t] = 1.0 / n;
            }
        }
    }
    let weights = tape.constant(Tensor::from_parts(vec![enc.rows, len], weights));
    let mean = tape.weighted_sum(weights, &enc.annotations)?;
    let mut pre = tape.matmul(mean, w.var("init.w"))?;
    if let Some(b) = w.optional("init.b") {
        pre = tape.add_row(pre, b)?;
    }
    Ok(tape.tanh(pre))
}

/// Maps pooled image features (`B×F`) to the decoder size: `tanh(I·W_img)` for
/// the baseline, a gated tanh for DeepGRU.
pub fn visual_project(tape: &mut Tape, w: &Bound, cfg: &ModelConfig, features: Var) -> Result<Var> {
    match cfg.variant {
        Variant::Baseline => {
            let v = tape.matmul(features, w.var("img.w"))?;
            Ok(tape.tanh(v))
        }
        Variant::DeepGru => gated_tanh(tape, features, &w.ght("img")),
    }
}

/// Soft attention of `s′` over the annotations. Returns the context and the
/// attention weights. The baseline multiplies the projected context by the
/// visual vector; DeepGRU keeps it textual.
pub fn attention(
    tape: &mut Tape,
    w: &Bound,
    cfg: &ModelConfig,
    s_prime: Var,
    enc: &Encoded,
    visual: Var,
) -> Result<(Var, Var)> {
    let query = tape.matmul(s_prime, w.var("att.ws"))?;
    let wa = w.var("att.wa");
    let mut scores = Vec::with_capacity(enc.len());
    for &key in &enc.keys {
        let e = tape.add(query, key)?;
        let e = tape.tanh(e);
        scores.push(tape.matmul(e, wa)?);
    }
    let scores = tape.concat(&scores)?;
    let alpha = tape.masked_softmax(scores, &enc.mask)?;
    let ctx = tape.weighted_sum(alpha, &enc.annotations)?;
    let c = tape.matmul(ctx, w.var("att.wc"))?;
    let c = match cfg.variant {
        Variant::Baseline => tape.mul(c, visual)?,
        Variant::DeepGru => c,
    };
    Ok((c, alpha))
}

/// One decoder step for every row: previous tokens `y_prev`, carried state,
/// encoder output and projected image vector in, distributions out.
#[allow(clippy::too_many_arguments)]
pub fn decoder_step(
    tape: &mut Tape,
    w: &Bound,
    cfg: &ModelConfig,
    enc: &Encoded,
    visual: Var,
    y_prev: &[usize],
    state: Var,
    mode: &mut Mode,
    rates: &DropoutRates,
) -> Result<StepOutput> {
    let tgt = w.embedding("tgt");
    let y_emb = tape.gather(tgt.table, y_prev)?;
    let y_in = tape.matmul(y_emb, tgt.proj)?;

    let s_prime = gru_cell(tape, y_in, state, &w.gru("dec.gru1"))?;
    let (c, alpha) = attention(tape, w, cfg, s_prime, enc, visual)?;
    let s = gru_cell(tape, c, s_prime, &w.gru("dec.gru2"))?;

    let logits = match cfg.variant {
        Variant::Baseline => {
            let cat = tape.concat(&[y_emb, s, c])?;
            let mut b = tape.matmul(cat, w.var("bot.w"))?;
            if let Some(bias) = w.optional("bot.b") {
                b = tape.add_row(b, bias)?;
            }
            let b = tape.tanh(b);
            let b = dropout(tape, b, rates.bottleneck, mode)?;
            tape.matmul_nt(b, tgt.table)?
        }
        Variant::DeepGru => {
            // Visual path: a GRU over [y, s′, v] seeded with s_t each step.
            let cat = tape.concat(&[y_emb, s_prime, visual])?;
            let x3 = tape.matmul(cat, w.var("dec.gru3.win"))?;
            let h3 = gru_cell(tape, x3, s, &w.gru("dec.gru3"))?;
            let bv = tape.matmul(h3, w.var("bot.v.w"))?;
            let bv = gated_tanh(tape, bv, &w.ght("ght.v"))?;
            let bv = dropout(tape, bv, rates.bottleneck, mode)?;

            let bt = tape.matmul(s, w.var("bot.t.w"))?;
            let bt = gated_tanh(tape, bt, &w.ght("ght.t"))?;
            let bt = dropout(tape, bt, rates.bottleneck, mode)?;

            let lt = tape.matmul_nt(bt, tgt.table)?;
            let lv = tape.matmul(bv, w.var("proj.v"))?;
            tape.add(lt, lv)?
        }
    };
    let probs = tape.softmax(logits)?;
    Ok(StepOutput {
        probs,
        state: s,
        context: c,
        attention: alpha,
    })
}

/// Teacher-forced mean cross-entropy over the unmasked target tokens.
pub fn loss_on_tape(
    tape: &mut Tape,
    w: &Bound,
    cfg: &ModelConfig,
    batch: &Batch,
    mode: &mut Mode,
    rates: &DropoutRates,
) -> Result<Var> {
    if batch.num_target_tokens() == 0.0 {
        return Err(Error::invalid("empty target"));
    }
    let enc = encode(tape, w, cfg, &batch.src, &batch.src_mask, batch.size, mode, rates)?;
    let feats = tape.constant(batch.features.clone());
    let visual = visual_project(tape, w, cfg, feats)?;
    let mut state = init_decoder(tape, w, &enc)?;
    let mut probs = Vec::with_capacity(batch.tgt_len);
    for t in 0..batch.tgt_len {
        let y_prev = batch.tgt_in_column(t);
        let out = decoder_step(tape, w, cfg, &enc, visual, &y_prev, state, mode, rates)?;
        probs.push(out.probs);
        state = out.state;
    }
    // Rows are stacked step-major: row t·B + r is sentence r at step t.
    let all = tape.stack_rows(&probs)?;
    let mut targets = Vec::with_capacity(batch.size * batch.tgt_len);
    let mut mask = Vec::with_capacity(batch.size * batch.tgt_len);
    for t in 0..batch.tgt_len {
        for r in 0..batch.size {
            targets.push(batch.tgt_out[r * batch.tgt_len + t]);
            mask.push(batch.tgt_mask[r * batch.tgt_len + t]);
        }
    }
    tape.cross_entropy(all, &targets, &mask)
}

pub fn forward_loss(model: &Model, batch: &Batch, mode: &mut Mode, rates: &DropoutRates) -> Result<f64> {
    let mut tape = Tape::new();
    let w = model.params.bind(&mut tape);
    let loss = loss_on_tape(&mut tape, &w, &model.config, batch, mode, rates)?;
    Ok(tape.value(loss).item())
}

/// Loss and the gradient of every parameter, in storage order.
pub fn loss_and_grads(
    model: &Model,
    batch: &Batch,
    mode: &mut Mode,
    rates: &DropoutRates,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let w = model.params.bind(&mut tape);
    let loss = loss_on_tape(&mut tape, &w, &model.config, batch, mode, rates)?;
    tape.backward(loss)?;
    let grads = w.vars.iter().map(|&v| tape.grad(v)).collect();
    Ok((tape.value(loss).item(), grads))
}

/// Annotations `H` (`M×2S`) of a single sentence in evaluation mode.
pub fn encode_sentence(model: &Model, ids: &[usize]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let w = model.params.bind(&mut tape);
    let mask = vec![true; ids.len()];
    let enc = encode(
        &mut tape,
        &w,
        &model.config,
        ids,
        &mask,
        1,
        &mut Mode::Eval,
        &DropoutRates::NONE,
    )?;
    let rows: Vec<&Tensor> = enc.annotations.iter().map(|&v| tape.value(v)).collect();
    Tensor::concat_rows(&rows)
}
