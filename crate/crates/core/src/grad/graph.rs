//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! Every primitive appends one node to the [`Graph`]; node ids grow in
//! execution order, so the tape is topologically sorted by construction and
//! [`Graph::backward`] walks it once in reverse.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Relu(Var),
    Softmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<S>,
        probs: Vec<S>,
    },
    Entropy {
        logits: Var,
        weights: Vec<S>,
        probs: Vec<S>,
        entropies: Vec<S>,
    },
    Mse(Var, Var),
    Gather {
        x: Var,
        rows: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    Sum(Var),
    StraightThrough {
        z: Var,
    },
    Attention {
        qkv: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<S>,
    },
}

struct Node<S> {
    value: Arc<Tensor<S>>,
    op: Op<S>,
    needs_grad: bool,
}

/// The recording tape.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn row_softmax<S: Scalar>(row: &[S], allowed: Option<&[bool]>, out: &mut [S]) {
    let ok = |j: usize| allowed.map_or(true, |a| a[j]);
    let mut mx = S::neg_infinity();
    for (j, &z) in row.iter().enumerate() {
        if ok(j) && z > mx {
            mx = z;
        }
    }
    let mut total = S::zero();
    for (j, &z) in row.iter().enumerate() {
        let e = if ok(j) { (z - mx).exp() } else { S::zero() };
        out[j] = e;
        total += e;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.push_shared(Arc::new(value), op, needs_grad)
    }

    fn push_shared(&mut self, value: Arc<Tensor<S>>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Arc<Tensor<S>>) -> Var {
        self.push_shared(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf sharing storage with `value`.
    pub fn frozen(&mut self, value: Arc<Tensor<S>>) -> Var {
        self.push_shared(value, Op::Leaf, false)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies `v`'s value into a fresh constant (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = Arc::clone(&self.nodes[v.0].value);
        self.push_shared(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = self.value(v);
        match t.shape().len() {
            2 => Ok((t.shape()[0], t.shape()[1])),
            1 => Ok((1, t.shape()[0])),
            _ => Err(Error::shape(
                op,
                format!("expected a matrix, got {:?}", t.shape()),
            )),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![S::zero(); m * n];
        S::gemm(
            m,
            k,
            n,
            S::one(),
            self.value(a).data(),
            k,
            1,
            self.value(b).data(),
            n,
            1,
            S::zero(),
            &mut out,
            n,
            1,
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), ng))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// Adds a length-`cols` bias to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let cols = self.value(a).cols();
        if self.value(bias).len() != cols {
            return Err(Error::shape(
                "add_row",
                format!("bias {:?} for {} columns", self.value(bias).shape(), cols),
            ));
        }
        let mut out = self.value(a).clone();
        let b = self.value(bias).data().to_vec();
        for row in out.data_mut().chunks_mut(cols) {
            for (x, &y) in row.iter_mut().zip(&b) {
                *x += y;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        Ok(self.push(out, Op::AddRow(a, bias), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(a).clone();
        for (x, y) in out.data_mut().iter_mut().zip(bv) {
            *x *= y;
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let out = self.value(a).map(|x| x * c);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -S::one());
        self.add(a, nb)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .map(|x| if x > S::zero() { x } else { S::zero() });
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let cols = t.cols();
        let mut out = vec![S::zero(); t.len()];
        for (row, o) in t.data().chunks(cols).zip(out.chunks_mut(cols)) {
            row_softmax(row, None, o);
        }
        let shape = t.shape().to_vec();
        let ng = self.ng(x);
        self.push(
            Tensor::new(shape, out).expect("same shape"),
            Op::Softmax { x },
            ng,
        )
    }

    /// Row-wise layer normalisation with learned `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(gain).len() != cols || self.value(bias).len() != cols {
            return Err(Error::shape(
                "layer_norm",
                format!("gain/bias for {cols} columns"),
            ));
        }
        let eps = S::of(1e-5);
        let n = S::of(cols as f64);
        let xt = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![S::zero(); xt.len()];
        let mut out = vec![S::zero(); xt.len()];
        let mut rstd = Vec::with_capacity(xt.rows());
        for (r, row) in xt.data().chunks(cols).enumerate() {
            let mean = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
            let rs = S::one() / (var + eps).sqrt();
            rstd.push(rs);
            for j in 0..cols {
                let h = (row[j] - mean) * rs;
                xhat[r * cols + j] = h;
                out[r * cols + j] = h * g[j] + b[j];
            }
        }
        let shape = xt.shape().to_vec();
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Selects rows `ids` of a `[vocab, width]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, w) = self.dims2(table, "embedding")?;
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * w);
        for &id in ids {
            if id >= v {
                return Err(Error::TokenOutOfRange {
                    token: id,
                    vocab: v,
                });
            }
            out.extend_from_slice(&t[id * w..(id + 1) * w]);
        }
        let ng = self.ng(table);
        Ok(self.push(
            Tensor::matrix(ids.len(), w, out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Weighted negative log-likelihood `sum_i w_i * -log p_i[t_i]` where
    /// `p_i` is the softmax of row `i` restricted to `allowed` (row-major
    /// `[rows, cols]` mask; masked logits act as `-inf`).
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[S],
        allowed: Option<&[bool]>,
    ) -> Result<Var> {
        let (rows, cols) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != rows || weights.len() != rows {
            return Err(Error::shape(
                "cross_entropy",
                format!(
                    "{rows} rows, {} targets, {} weights",
                    targets.len(),
                    weights.len()
                ),
            ));
        }
        if allowed.is_some_and(|a| a.len() != rows * cols) {
            return Err(Error::shape("cross_entropy", "mask size"));
        }
        let lt = self.value(logits).data();
        let mut probs = vec![S::zero(); rows * cols];
        let mut loss = S::zero();
        for r in 0..rows {
            let t = targets[r];
            if t >= cols {
                return Err(Error::TokenOutOfRange {
                    token: t,
                    vocab: cols,
                });
            }
            let mask = allowed.map(|a| &a[r * cols..(r + 1) * cols]);
            row_softmax(
                &lt[r * cols..(r + 1) * cols],
                mask,
                &mut probs[r * cols..(r + 1) * cols],
            );
            if weights[r] != S::zero() {
                loss -= weights[r] * probs[r * cols + t].ln();
            }
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Weighted sum of per-row entropies of the (optionally masked) softmax.
    pub fn entropy(&mut self, logits: Var, weights: &[S], allowed: Option<&[bool]>) -> Result<Var> {
        let (rows, cols) = self.dims2(logits, "entropy")?;
        if weights.len() != rows || allowed.is_some_and(|a| a.len() != rows * cols) {
            return Err(Error::shape("entropy", "weights or mask size"));
        }
        let lt = self.value(logits).data();
        let mut probs = vec![S::zero(); rows * cols];
        let mut entropies = Vec::with_capacity(rows);
        let mut total = S::zero();
        for r in 0..rows {
            let mask = allowed.map(|a| &a[r * cols..(r + 1) * cols]);
            let p = &mut probs[r * cols..(r + 1) * cols];
            row_softmax(&lt[r * cols..(r + 1) * cols], mask, p);
            let h: S = p
                .iter()
                .filter(|&&q| q > S::zero())
                .map(|&q| -q * q.ln())
                .sum();
            entropies.push(h);
            total += weights[r] * h;
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(total),
            Op::Entropy {
                logits,
                weights: weights.to_vec(),
                probs,
                entropies,
            },
            ng,
        ))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let n = S::of(x.len().max(1) as f64);
        let loss = x.iter().zip(y).map(|(&p, &q)| (p - q) * (p - q)).sum::<S>() / n;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::scalar(loss), Op::Mse(a, b), ng))
    }

    /// Selects rows of a matrix (rows may repeat).
    pub fn gather(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(x, "gather")?;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(Error::shape("gather", format!("row {i} of {r}")));
            }
            out.extend_from_slice(&xd[i * c..(i + 1) * c]);
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::matrix(rows.len(), c, out)?,
            Op::Gather {
                x,
                rows: rows.to_vec(),
            },
            ng,
        ))
    }

    /// Concatenates matrices along rows (`axis = 0`) or columns (`axis = 1`).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::shape("concat", "need parts and axis 0 or 1"));
        }
        let dims: Vec<(usize, usize)> = parts
            .iter()
            .map(|&p| self.dims2(p, "concat"))
            .collect::<Result<_>>()?;
        let out = if axis == 0 {
            let c = dims[0].1;
            if dims.iter().any(|d| d.1 != c) {
                return Err(Error::shape("concat", format!("column counts {dims:?}")));
            }
            let mut data = Vec::new();
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            Tensor::matrix(data.len() / c.max(1), c, data)?
        } else {
            let r = dims[0].0;
            if dims.iter().any(|d| d.0 != r) {
                return Err(Error::shape("concat", format!("row counts {dims:?}")));
            }
            let total: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(r * total);
            for i in 0..r {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row(i));
                }
            }
            Tensor::matrix(r, total, data)?
        };
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = Tensor::clone(self.value(x)).reshaped(shape.to_vec())?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, S::one() / S::of(n as f64))
    }

    /// Forward value is `quantized`; the backward pass hands the incoming
    /// gradient to `pre_quant` unchanged and nothing to `quantized`.
    pub fn straight_through(&mut self, quantized: Var, pre_quant: Var) -> Result<Var> {
        self.same_shape(quantized, pre_quant, "straight_through")?;
        let value = Arc::clone(&self.nodes[quantized.0].value);
        let ng = self.ng(pre_quant);
        Ok(self.push_shared(value, Op::StraightThrough { z: pre_quant }, ng))
    }

    /// Causal multi-head self-attention.
    ///
    /// `qkv` is `[batch * seq, 3 * width]` with each row laid out as
    /// `q | k | v`; the result is `[batch * seq, width]`. Position `i` of a
    /// sequence attends to positions `0..=i` of the same sequence.
    pub fn causal_attention(
        &mut self,
        qkv: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var> {
        let (rows, cols3) = self.dims2(qkv, "causal_attention")?;
        if rows != batch * seq || cols3 % 3 != 0 || heads == 0 || (cols3 / 3) % heads != 0 {
            return Err(Error::shape(
                "causal_attention",
                format!("{rows}x{cols3} for batch {batch}, seq {seq}, heads {heads}"),
            ));
        }
        let width = cols3 / 3;
        let dh = width / heads;
        let scale = S::one() / S::of(dh as f64).sqrt();
        let x = self.value(qkv).data();
        let mut out = vec![S::zero(); rows * width];
        let mut probs = vec![S::zero(); batch * heads * seq * seq];
        let mut scores = vec![S::zero(); seq];
        for b in 0..batch {
            for h in 0..heads {
                let (qo, ko, vo) = (h * dh, width + h * dh, 2 * width + h * dh);
                let pbase = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let qi = &x[(b * seq + i) * cols3 + qo..][..dh];
                    let mut mx = S::neg_infinity();
                    for (j, s) in scores.iter_mut().enumerate().take(i + 1) {
                        let kj = &x[(b * seq + j) * cols3 + ko..][..dh];
                        let d: S = qi.iter().zip(kj).map(|(&p, &q)| p * q).sum();
                        *s = d * scale;
                        if *s > mx {
                            mx = *s;
                        }
                    }
                    let mut total = S::zero();
                    for s in scores.iter_mut().take(i + 1) {
                        *s = (*s - mx).exp();
                        total += *s;
                    }
                    let orow = &mut out[(b * seq + i) * width + h * dh..][..dh];
                    for j in 0..=i {
                        let p = scores[j] / total;
                        probs[pbase + i * seq + j] = p;
                        let vj = &x[(b * seq + j) * cols3 + vo..][..dh];
                        for (o, &v) in orow.iter_mut().zip(vj) {
                            *o += p * v;
                        }
                    }
                }
            }
        }
        let ng = self.ng(qkv);
        Ok(self.push(
            Tensor::matrix(rows, width, out)?,
            Op::Attention {
                qkv,
                batch,
                seq,
                heads,
                probs,
            },
            ng,
        ))
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), S::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor<S>>], v: Var, t: Tensor<S>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        }
    }

    fn backprop(&self, node: &Node<S>, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let (m, k) = (at.rows(), at.cols());
                let n = bt.cols();
                if self.ng(*a) {
                    // dA = dC B^T
                    let mut da = vec![S::zero(); m * k];
                    S::gemm(
                        m,
                        n,
                        k,
                        S::one(),
                        gd,
                        n,
                        1,
                        bt.data(),
                        1,
                        n,
                        S::zero(),
                        &mut da,
                        k,
                        1,
                    );
                    self.acc(
                        grads,
                        *a,
                        Tensor::new(at.shape().to_vec(), da).expect("shape"),
                    );
                }
                if self.ng(*b) {
                    // dB = A^T dC
                    let mut db = vec![S::zero(); k * n];
                    S::gemm(
                        k,
                        m,
                        n,
                        S::one(),
                        at.data(),
                        1,
                        k,
                        gd,
                        n,
                        1,
                        S::zero(),
                        &mut db,
                        n,
                        1,
                    );
                    self.acc(
                        grads,
                        *b,
                        Tensor::new(bt.shape().to_vec(), db).expect("shape"),
                    );
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::AddRow(a, bias) => {
                self.acc(grads, *a, g.clone());
                if self.ng(*bias) {
                    let bt = self.value(*bias);
                    let cols = bt.len();
                    let mut db = vec![S::zero(); cols];
                    for row in gd.chunks(cols) {
                        for (d, &x) in db.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    self.acc(
                        grads,
                        *bias,
                        Tensor::new(bt.shape().to_vec(), db).expect("shape"),
                    );
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let d = gd.iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
                    self.acc(
                        grads,
                        *a,
                        Tensor::new(av.shape().to_vec(), d).expect("shape"),
                    );
                }
                if self.ng(*b) {
                    let d = gd.iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                    self.acc(
                        grads,
                        *b,
                        Tensor::new(bv.shape().to_vec(), d).expect("shape"),
                    );
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.acc(grads, *a, g.map(|x| x * c));
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                let d = gd
                    .iter()
                    .zip(av.data())
                    .map(|(&x, &v)| if v > S::zero() { x } else { S::zero() })
                    .collect();
                self.acc(
                    grads,
                    *a,
                    Tensor::new(av.shape().to_vec(), d).expect("shape"),
                );
            }
            Op::Softmax { x } => {
                let p = node.value.data();
                let cols = node.value.cols();
                let mut d = vec![S::zero(); p.len()];
                for ((pr, gr), dr) in p.chunks(cols).zip(gd.chunks(cols)).zip(d.chunks_mut(cols)) {
                    let dot: S = pr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..cols {
                        dr[j] = pr[j] * (gr[j] - dot);
                    }
                }
                self.acc(
                    grads,
                    *x,
                    Tensor::new(node.value.shape().to_vec(), d).expect("shape"),
                );
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let cols = node.value.cols();
                let gv = self.value(*gain).data();
                let n = S::of(cols as f64);
                let mut dx = vec![S::zero(); xhat.len()];
                let mut dg = vec![S::zero(); cols];
                let mut db = vec![S::zero(); cols];
                for (r, &rs) in rstd.iter().enumerate() {
                    let gr = &gd[r * cols..(r + 1) * cols];
                    let hr = &xhat[r * cols..(r + 1) * cols];
                    let mut mean_d = S::zero();
                    let mut mean_dh = S::zero();
                    for j in 0..cols {
                        let dh = gr[j] * gv[j];
                        mean_d += dh;
                        mean_dh += dh * hr[j];
                        dg[j] += gr[j] * hr[j];
                        db[j] += gr[j];
                    }
                    mean_d /= n;
                    mean_dh /= n;
                    for j in 0..cols {
                        let dh = gr[j] * gv[j];
                        dx[r * cols + j] = rs * (dh - mean_d - hr[j] * mean_dh);
                    }
                }
                let xs = self.value(*x).shape().to_vec();
                self.acc(grads, *x, Tensor::new(xs, dx).expect("shape"));
                let gs = self.value(*gain).shape().to_vec();
                self.acc(grads, *gain, Tensor::new(gs, dg).expect("shape"));
                let bs = self.value(*bias).shape().to_vec();
                self.acc(grads, *bias, Tensor::new(bs, db).expect("shape"));
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let w = tv.cols();
                let mut d = Tensor::zeros(tv.shape());
                let dd = d.data_mut();
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..w {
                        dd[id * w + j] += gd[r * w + j];
                    }
                }
                self.acc(grads, *table, d);
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let lv = self.value(*logits);
                let cols = lv.cols();
                let up = gd[0];
                let mut d = vec![S::zero(); probs.len()];
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == S::zero() {
                        continue;
                    }
                    for j in 0..cols {
                        let ind = if j == t { S::one() } else { S::zero() };
                        d[r * cols + j] = up * w * (probs[r * cols + j] - ind);
                    }
                }
                self.acc(
                    grads,
                    *logits,
                    Tensor::new(lv.shape().to_vec(), d).expect("shape"),
                );
            }
            Op::Entropy {
                logits,
                weights,
                probs,
                entropies,
            } => {
                let lv = self.value(*logits);
                let cols = lv.cols();
                let up = gd[0];
                let mut d = vec![S::zero(); probs.len()];
                for (r, (&w, &h)) in weights.iter().zip(entropies).enumerate() {
                    for j in 0..cols {
                        let p = probs[r * cols + j];
                        if p > S::zero() {
                            d[r * cols + j] = -up * w * p * (p.ln() + h);
                        }
                    }
                }
                self.acc(
                    grads,
                    *logits,
                    Tensor::new(lv.shape().to_vec(), d).expect("shape"),
                );
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let c = gd[0] * S::of(2.0) / S::of(av.len().max(1) as f64);
                let diff: Vec<S> = av
                    .data()
                    .iter()
                    .zip(bv.data())
                    .map(|(&x, &y)| c * (x - y))
                    .collect();
                if self.ng(*b) {
                    let neg = diff.iter().map(|&x| -x).collect();
                    self.acc(
                        grads,
                        *b,
                        Tensor::new(bv.shape().to_vec(), neg).expect("shape"),
                    );
                }
                self.acc(
                    grads,
                    *a,
                    Tensor::new(av.shape().to_vec(), diff).expect("shape"),
                );
            }
            Op::Gather { x, rows } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut d = Tensor::zeros(xv.shape());
                let dd = d.data_mut();
                for (r, &i) in rows.iter().enumerate() {
                    for j in 0..c {
                        dd[i * c + j] += gd[r * c + j];
                    }
                }
                self.acc(grads, *x, d);
            }
            Op::Concat { parts, axis } => {
                if *axis == 0 {
                    let mut off = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let n = pv.len();
                        let piece = Tensor::new(pv.shape().to_vec(), gd[off..off + n].to_vec())
                            .expect("shape");
                        off += n;
                        self.acc(grads, p, piece);
                    }
                } else {
                    let total = node.value.cols();
                    let mut col = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let c = pv.cols();
                        let mut d = Vec::with_capacity(pv.len());
                        for row in gd.chunks(total) {
                            d.extend_from_slice(&row[col..col + c]);
                        }
                        col += c;
                        self.acc(
                            grads,
                            p,
                            Tensor::new(pv.shape().to_vec(), d).expect("shape"),
                        );
                    }
                }
            }
            Op::Reshape(x) => {
                let xs = self.value(*x).shape().to_vec();
                self.acc(grads, *x, g.clone().reshaped(xs).expect("shape"));
            }
            Op::Sum(x) => {
                let xs = self.value(*x).shape();
                self.acc(grads, *x, Tensor::filled(xs, gd[0]));
            }
            Op::StraightThrough { z } => {
                self.acc(grads, *z, g.clone());
            }
            Op::Attention {
                qkv,
                batch,
                seq,
                heads,
                probs,
            } => {
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let xv = self.value(*qkv);
                let x = xv.data();
                let cols3 = xv.cols();
                let width = cols3 / 3;
                let dh = width / heads;
                let scale = S::one() / S::of(dh as f64).sqrt();
                let mut dx = vec![S::zero(); x.len()];
                let mut dp = vec![S::zero(); seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let (qo, ko, vo) = (h * dh, width + h * dh, 2 * width + h * dh);
                        let pbase = (b * heads + h) * seq * seq;
                        for i in 0..seq {
                            let go = &gd[(b * seq + i) * width + h * dh..][..dh];
                            let p = &probs[pbase + i * seq..][..seq];
                            let mut dot = S::zero();
                            for j in 0..=i {
                                let vj = &x[(b * seq + j) * cols3 + vo..][..dh];
                                let d: S = go.iter().zip(vj).map(|(&u, &v)| u * v).sum();
                                dp[j] = d;
                                dot += d * p[j];
                                // dV_j += p_ij * dO_i
                                let dvj = &mut dx[(b * seq + j) * cols3 + vo..][..dh];
                                for (t, &u) in dvj.iter_mut().zip(go) {
                                    *t += p[j] * u;
                                }
                            }
                            for j in 0..=i {
                                let ds = p[j] * (dp[j] - dot) * scale;
                                if ds == S::zero() {
                                    continue;
                                }
                                let qrow = (b * seq + i) * cols3;
                                let krow = (b * seq + j) * cols3;
                                for t in 0..dh {
                                    let kv = x[krow + ko + t];
                                    let qv = x[qrow + qo + t];
                                    dx[qrow + qo + t] += ds * kv;
                                    dx[krow + ko + t] += ds * qv;
                                }
                            }
                        }
                    }
                }
                self.acc(
                    grads,
                    *qkv,
                    Tensor::new(xv.shape().to_vec(), dx).expect("shape"),
                );
            }
        }
    }
}
