//! Define-by-run reverse-mode autodiff.
//!
//! Every operation appends a node holding its forward value and the ids of
//! its inputs, so the node list is already in topological order. `backward`
//! sweeps it once in reverse. A tape is rebuilt for every training step.

use crate::error::{Error, Result};
use crate::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Softmax(Var),
    CrossEntropy {
        probs: Var,
        targets: Vec<usize>,
        mask: Vec<f64>,
        count: f64,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    MulConst(Var, Tensor),
    WeightedSum {
        weights: Var,
        items: Vec<Var>,
    },
    SelectRows {
        keep: Vec<bool>,
        on: Var,
        off: Var,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    stochastic: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable leaf; receives a gradient on `backward`.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Records that a random draw (dropout mask) shaped this forward pass.
    pub fn mark_stochastic(&mut self) {
        self.stochastic = true;
    }

    pub fn is_stochastic(&self) -> bool {
        self.stochastic
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn record(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs = self.needs(inputs);
        self.push(value, op, needs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.record(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`; used for the output projection tied to the embedding table.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.record(out, Op::MatMulNT(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.record(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.record(out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.record(out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a bias row to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = self.value(x).add_row(self.value(bias))?;
        Ok(self.record(out, Op::AddRow(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let out = self.value(x).scale(k);
        self.record(out, Op::Scale(x, k), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).tanh();
        self.record(out, Op::Tanh(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).sigmoid();
        self.record(out, Op::Sigmoid(x), &[x])
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat_cols(&values)?;
        Ok(self.record(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Concatenation along the first axis.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat_rows(&values)?;
        Ok(self.record(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).softmax_rows(None)?;
        Ok(self.record(out, Op::Softmax(x), &[x]))
    }

    /// Softmax over the last axis restricted to positions where `mask` holds.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let out = self.value(x).softmax_rows(Some(mask))?;
        Ok(self.record(out, Op::Softmax(x), &[x]))
    }

    /// Mean negative log-likelihood of `targets` under the row distributions
    /// in `probs`, over rows whose mask weight is nonzero.
    pub fn cross_entropy(&mut self, probs: Var, targets: &[usize], mask: &[f64]) -> Result<Var> {
        let p = self.value(probs);
        let (rows, vocab) = p.dims2("cross_entropy")?;
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::invalid(format!(
                "cross_entropy: {rows} rows but {} targets and {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        if let Some(&id) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::IdOutOfRange { id, size: vocab });
        }
        let count: f64 = mask.iter().sum();
        if count <= 0.0 {
            return Err(Error::invalid("cross_entropy over an empty target"));
        }
        let mut total = 0.0;
        for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
            if m != 0.0 {
                total -= m * p.at(r, t).ln();
            }
        }
        let out = Tensor::scalar(total / count);
        let op = Op::CrossEntropy {
            probs,
            targets: targets.to_vec(),
            mask: mask.to_vec(),
            count,
        };
        Ok(self.record(out, op, &[probs]))
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (rows, cols) = t.dims2("gather")?;
        if ids.is_empty() {
            return Err(Error::invalid("gather with no ids"));
        }
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::IdOutOfRange { id, size: rows });
            }
            out.extend_from_slice(t.row_slice(id));
        }
        let out = Tensor::from_parts(vec![ids.len(), cols], out);
        let op = Op::Gather {
            table,
            ids: ids.to_vec(),
        };
        Ok(self.record(out, op, &[table]))
    }

    /// Elementwise product with a constant of the same shape (dropout masks).
    pub fn mul_const(&mut self, x: Var, k: Tensor) -> Result<Var> {
        let out = self.value(x).mul(&k)?;
        Ok(self.record(out, Op::MulConst(x, k), &[x]))
    }

    /// Row `b` of the output is `Σᵢ weights[b,i] · items[i][b,:]`.
    pub fn weighted_sum(&mut self, weights: Var, items: &[Var]) -> Result<Var> {
        let w = self.value(weights);
        let (b, m) = w.dims2("weighted_sum")?;
        if m != items.len() || items.is_empty() {
            return Err(Error::invalid(format!(
                "weighted_sum: {m} weights per row for {} items",
                items.len()
            )));
        }
        let first = self.value(items[0]);
        let (rows, n) = first.dims2("weighted_sum")?;
        if rows != b {
            return Err(Error::Shape {
                op: "weighted_sum",
                lhs: w.shape().to_vec(),
                rhs: first.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; b * n];
        for (i, &item) in items.iter().enumerate() {
            let h = self.value(item);
            if h.shape() != first.shape() {
                return Err(Error::Shape {
                    op: "weighted_sum",
                    lhs: first.shape().to_vec(),
                    rhs: h.shape().to_vec(),
                });
            }
            for r in 0..b {
                let a = w.at(r, i);
                for (o, &x) in out[r * n..(r + 1) * n].iter_mut().zip(h.row_slice(r)) {
                    *o += a * x;
                }
            }
        }
        let mut inputs = items.to_vec();
        inputs.push(weights);
        let out = Tensor::from_parts(vec![b, n], out);
        let op = Op::WeightedSum {
            weights,
            items: items.to_vec(),
        };
        Ok(self.record(out, op, &inputs))
    }

    /// Row `r` comes from `on` where `keep[r]`, otherwise from `off`.
    pub fn select_rows(&mut self, keep: &[bool], on: Var, off: Var) -> Result<Var> {
        let a = self.value(on);
        let b = self.value(off);
        let (rows, n) = a.dims2("select_rows")?;
        if a.shape() != b.shape() || keep.len() != rows {
            return Err(Error::Shape {
                op: "select_rows",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut out = Vec::with_capacity(rows * n);
        for (r, &k) in keep.iter().enumerate() {
            out.extend_from_slice(if k { a.row_slice(r) } else { b.row_slice(r) });
        }
        let out = Tensor::from_parts(vec![rows, n], out);
        let op = Op::SelectRows {
            keep: keep.to_vec(),
            on,
            off,
        };
        Ok(self.record(out, op, &[on, off]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.record(out, Op::Sum(x), &[x])
    }

    /// Propagates d`loss`/d(node) to every node that needs a gradient.
    /// Leaves keep their gradients until the tape is dropped.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::Rank {
                op: "backward",
                expected: "a scalar loss",
                got: root.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last `backward` loss w.r.t. `v`; zeros when `v` did not
    /// influence the loss.
    pub fn grad(&self, v: Var) -> Tensor {
        let shape = self.value(v).shape().to_vec();
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::from_parts(shape.clone(), vec![0.0; shape.iter().product()]),
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let node = &nodes[v.0];
            if !node.needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]);
            f(slot);
        };
        let out = &nodes[i].value;

        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                let (av, bv) = (val(*a).data(), val(*b).data());
                // dA = dC·Bᵀ, dB = Aᵀ·dC
                acc(*a, &mut |ga| matmul_nt_into(g, bv, ga, m, n, k));
                acc(*b, &mut |gb| matmul_tn_into(av, g, gb, m, k, n));
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[0];
                let (av, bv) = (val(*a).data(), val(*b).data());
                // C = A·Bᵀ: dA = dC·B, dB = dCᵀ·A
                acc(*a, &mut |ga| matmul_into(g, bv, ga, m, n, k));
                acc(*b, &mut |gb| matmul_tn_into(g, av, gb, m, n, k));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(o, d)| *o -= d));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |ga| {
                    for ((o, d), y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += d * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, d), x) in gb.iter_mut().zip(g).zip(av) {
                        *o += d * x;
                    }
                });
            }
            Op::AddRow(x, bias) => {
                acc(*x, &mut |gx| add_into(gx, g));
                let n = val(*bias).len();
                acc(*bias, &mut |gb| {
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Scale(x, k) => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(o, d)| *o += k * d));
            }
            Op::Tanh(x) => {
                let y = out.data();
                acc(*x, &mut |gx| {
                    for ((o, d), y) in gx.iter_mut().zip(g).zip(y) {
                        *o += d * (1.0 - y * y);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = out.data();
                acc(*x, &mut |gx| {
                    for ((o, d), y) in gx.iter_mut().zip(g).zip(y) {
                        *o += d * y * (1.0 - y);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let m = out.shape()[0];
                let n = out.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).shape()[1];
                    acc(p, &mut |gp| {
                        for r in 0..m {
                            add_into(&mut gp[r * w..(r + 1) * w], &g[r * n + offset..r * n + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).len();
                    acc(p, &mut |gp| add_into(gp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::Softmax(x) => {
                let n = *out.shape().last().unwrap();
                let y = out.data();
                acc(*x, &mut |gx| {
                    for ((gxr, gr), yr) in gx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(d, y)| d * y).sum();
                        for ((o, d), y) in gxr.iter_mut().zip(gr).zip(yr) {
                            *o += y * (d - dot);
                        }
                    }
                });
            }
            Op::CrossEntropy {
                probs,
                targets,
                mask,
                count,
            } => {
                let p = val(*probs);
                let n = p.shape()[1];
                acc(*probs, &mut |gp| {
                    for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                        if m != 0.0 {
                            gp[r * n + t] -= g[0] * m / (count * p.at(r, t));
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let n = val(*table).shape()[1];
                acc(*table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * n..(id + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::MulConst(x, k) => {
                acc(*x, &mut |gx| {
                    for ((o, d), k) in gx.iter_mut().zip(g).zip(k.data()) {
                        *o += d * k;
                    }
                });
            }
            Op::WeightedSum { weights, items } => {
                let w = val(*weights);
                let b = w.shape()[0];
                let n = out.shape()[1];
                for (i, &item) in items.iter().enumerate() {
                    acc(item, &mut |gi| {
                        for r in 0..b {
                            let a = w.at(r, i);
                            for (o, d) in gi[r * n..(r + 1) * n].iter_mut().zip(&g[r * n..(r + 1) * n]) {
                                *o += a * d;
                            }
                        }
                    });
                }
                let m = items.len();
                acc(*weights, &mut |gw| {
                    for (i, &item) in items.iter().enumerate() {
                        let h = val(item);
                        for r in 0..b {
                            let dot: f64 = g[r * n..(r + 1) * n]
                                .iter()
                                .zip(h.row_slice(r))
                                .map(|(d, x)| d * x)
                                .sum();
                            gw[r * m + i] += dot;
                        }
                    }
                });
            }
            Op::SelectRows { keep, on, off } => {
                let n = out.shape()[1];
                for (target, want) in [(*on, true), (*off, false)] {
                    acc(target, &mut |gt| {
                        for (r, &k) in keep.iter().enumerate() {
                            if k == want {
                                add_into(&mut gt[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                            }
                        }
                    });
                }
            }
            Op::Sum(x) => {
                acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0]));
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
