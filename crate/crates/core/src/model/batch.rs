use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vocab::{BOS, EOS, PAD};

/// A padded minibatch for teacher-forced training.
///
/// All id matrices are row-major with one sentence per row. The decoder input
/// row is `<bos> y₁ … yₙ` and the output row is `y₁ … yₙ <eos>`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    pub src: Vec<usize>,
    pub src_mask: Vec<bool>,
    pub tgt_in: Vec<usize>,
    pub tgt_out: Vec<usize>,
    pub tgt_mask: Vec<f64>,
    /// `size × feat_dim`
    pub features: Tensor,
}

/// One aligned training triple.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub src: &'a [usize],
    pub tgt: &'a [usize],
    pub features: &'a [f64],
}

impl Batch {
    pub fn new(examples: &[Example<'_>]) -> Result<Self> {
        let m = examples.iter().map(|e| e.src.len()).max().unwrap_or(0);
        let n = examples.iter().map(|e| e.tgt.len()).max().unwrap_or(0) + 1;
        Self::padded(examples, m, n)
    }

    /// Pads sources to `src_len` tokens and decoder rows to `tgt_len` steps
    /// (target tokens plus `<eos>`).
    pub fn padded(examples: &[Example<'_>], src_len: usize, tgt_len: usize) -> Result<Self> {
        let first = examples
            .first()
            .ok_or_else(|| Error::invalid("empty batch"))?;
        let feat_dim = first.features.len();
        let b = examples.len();
        let mut batch = Batch {
            size: b,
            src_len,
            tgt_len,
            src: vec![PAD; b * src_len],
            src_mask: vec![false; b * src_len],
            tgt_in: vec![PAD; b * tgt_len],
            tgt_out: vec![PAD; b * tgt_len],
            tgt_mask: vec![0.0; b * tgt_len],
            features: Tensor::zeros(&[b, feat_dim.max(1)]),
        };
        let mut feats = Vec::with_capacity(b * feat_dim);
        for (r, e) in examples.iter().enumerate() {
            if e.src.is_empty() {
                return Err(Error::invalid(format!("example {r} has an empty source")));
            }
            if e.tgt.is_empty() {
                return Err(Error::invalid(format!("example {r} has an empty target")));
            }
            if e.src.len() > src_len || e.tgt.len() + 1 > tgt_len {
                return Err(Error::invalid(format!("example {r} longer than padding")));
            }
            if e.features.len() != feat_dim {
                return Err(Error::invalid("examples disagree on feature dimension"));
            }
            for (t, &id) in e.src.iter().enumerate() {
                batch.src[r * src_len + t] = id;
                batch.src_mask[r * src_len + t] = true;
            }
            batch.tgt_in[r * tgt_len] = BOS;
            for (t, &id) in e.tgt.iter().enumerate() {
                batch.tgt_in[r * tgt_len + t + 1] = id;
                batch.tgt_out[r * tgt_len + t] = id;
            }
            batch.tgt_out[r * tgt_len + e.tgt.len()] = EOS;
            for t in 0..=e.tgt.len() {
                batch.tgt_mask[r * tgt_len + t] = 1.0;
            }
            feats.extend_from_slice(e.features);
        }
        if feat_dim == 0 {
            return Err(Error::invalid("examples carry no image features"));
        }
        batch.features = Tensor::new(vec![b, feat_dim], feats)?;
        Ok(batch)
    }

    /// Source ids at timestep `t`, one per row.
    pub fn src_column(&self, t: usize) -> Vec<usize> {
        (0..self.size).map(|r| self.src[r * self.src_len + t]).collect()
    }

    pub fn src_mask_column(&self, t: usize) -> Vec<bool> {
        (0..self.size).map(|r| self.src_mask[r * self.src_len + t]).collect()
    }

    pub fn tgt_in_column(&self, t: usize) -> Vec<usize> {
        (0..self.size).map(|r| self.tgt_in[r * self.tgt_len + t]).collect()
    }

    pub fn src_lengths(&self) -> Vec<usize> {
        (0..self.size)
            .map(|r| {
                self.src_mask[r * self.src_len..(r + 1) * self.src_len]
                    .iter()
                    .filter(|&&m| m)
                    .count()
            })
            .collect()
    }

    pub fn num_target_tokens(&self) -> f64 {
        self.tgt_mask.iter().sum()
    }
}
