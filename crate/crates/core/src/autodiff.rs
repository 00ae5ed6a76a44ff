//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only tape: every primitive pushes one node whose
//! inputs are strictly earlier nodes, so the tape is always in topological
//! order and [`Graph::backward`] is a single reverse sweep. A fresh graph is
//! built for every forward pass.

use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Affine(Var, f64),
    AddConstBlocks(Var),
    MulConst(Var, Tensor),
    MulScalar(Var, Var),
    MulRows(Var, Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    SoftmaxRows(Var),
    LogSumExpRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    ConcatRows {
        a: Var,
        b: Var,
        batch: usize,
        shared_a: bool,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Sum(Var),
    SegmentMean {
        x: Var,
        batch: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        smoothing: f64,
        probs: Vec<f64>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`. Nodes that do not require a
    /// gradient, or that are not on a path to the loss, yield zeros.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => Tensor::new(&self.shapes[v.0], g.clone()).expect("grad shape"),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads[v.0].take() {
            Some(g) => Tensor::new(&self.shapes[v.0], g).expect("grad shape"),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

fn check_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Contract(format!(
            "{op} expects a matrix, got shape {s:?}"
        ))),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that participates in differentiation.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        if requires_grad {
            self.param(value)
        } else {
            self.constant(value)
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.batched_matmul(a, b, 1, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.batched_matmul(a, b, 1, true)
    }

    /// Block-wise product: `a` holds `batch` stacked `m×k` blocks, `b` holds
    /// `batch` stacked `k×n` blocks (or `n×k` blocks when `trans_b`). Block
    /// `i` of the output is `a_i · b_i` (or `a_i · b_iᵀ`).
    pub fn batched_matmul(&mut self, a: Var, b: Var, batch: usize, trans_b: bool) -> Result<Var> {
        let (ar, k) = check_matrix("matmul", self.value(a))?;
        let (br, bc) = check_matrix("matmul", self.value(b))?;
        let bad = || Error::dim("matmul", self.value(a).shape(), self.value(b).shape());
        if batch == 0 || ar % batch != 0 || br % batch != 0 {
            return Err(bad());
        }
        let m = ar / batch;
        let (bk, n) = if trans_b { (bc, br / batch) } else { (br / batch, bc) };
        if bk != k {
            return Err(bad());
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for i in 0..batch {
                let ab = &av[i * m * k..(i + 1) * m * k];
                let bb = &bv[i * k * n..(i + 1) * k * n];
                let ob = &mut out[i * m * n..(i + 1) * m * n];
                if trans_b {
                    gemm_nt(ab, bb, ob, m, k, n);
                } else {
                    gemm_nn(ab, bb, ob, m, k, n);
                }
            }
        }
        let value = Tensor::new(&[batch * m, n], out)?;
        Ok(self.push(
            value,
            Op::MatMul {
                a,
                b,
                batch,
                trans_b,
            },
            &[a, b],
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b)).map_err(|_| {
            Error::dim("add", self.value(a).shape(), self.value(b).shape())
        })?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b)).map_err(|_| {
            Error::dim("sub", self.value(a).shape(), self.value(b).shape())
        })?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self
            .value(a)
            .zip_map(self.value(b), |x, y| x * y)
            .map_err(|_| Error::dim("mul", self.value(a).shape(), self.value(b).shape()))?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// Adds the vector `bias` to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(bias));
        let c = at.cols();
        if bt.numel() != c {
            return Err(Error::dim("add_bias", at.shape(), bt.shape()));
        }
        let mut data = at.data().to_vec();
        for row in data.chunks_mut(c) {
            for (x, b) in row.iter_mut().zip(bt.data()) {
                *x += b;
            }
        }
        let value = Tensor::new(at.shape(), data)?;
        Ok(self.push(value, Op::AddBias(a, bias), &[a, bias]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        self.push(value, Op::Scale(a, s), &[a])
    }

    /// `alpha * a + beta`.
    pub fn affine(&mut self, a: Var, alpha: f64, beta: f64) -> Var {
        let value = self.value(a).map(|v| alpha * v + beta);
        self.push(value, Op::Affine(a, alpha), &[a])
    }

    /// Adds a constant `p×q` tensor to each of the stacked `p×q` row blocks of
    /// `a` (masks, fixed positional encodings).
    pub fn add_const_blocks(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let at = self.value(a);
        let (ar, ac) = check_matrix("add_const", at)?;
        let (cr, cc) = check_matrix("add_const", c)?;
        if ac != cc || cr == 0 || ar % cr != 0 {
            return Err(Error::dim("add_const", at.shape(), c.shape()));
        }
        let block = cr * cc;
        let mut data = at.data().to_vec();
        for chunk in data.chunks_mut(block) {
            for (x, y) in chunk.iter_mut().zip(c.data()) {
                *x += y;
            }
        }
        let value = Tensor::new(at.shape(), data)?;
        Ok(self.push(value, Op::AddConstBlocks(a), &[a]))
    }

    /// Element-wise product with a constant (dropout masks).
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        let value = self
            .value(a)
            .zip_map(&c, |x, y| x * y)
            .map_err(|_| Error::dim("mul_const", self.value(a).shape(), c.shape()))?;
        Ok(self.push(value, Op::MulConst(a, c), &[a]))
    }

    /// Multiplies every element of `a` by the single-element tensor `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::dim("mul_scalar", self.value(a).shape(), self.value(s).shape()));
        }
        let sv = self.value(s).item();
        let value = self.value(a).scale(sv);
        Ok(self.push(value, Op::MulScalar(a, s), &[a, s]))
    }

    /// Scales row `i` of `a` by `w[i]`.
    pub fn mul_rows(&mut self, a: Var, w: Var) -> Result<Var> {
        let (at, wt) = (self.value(a), self.value(w));
        let (r, c) = check_matrix("mul_rows", at)?;
        if wt.numel() != r {
            return Err(Error::dim("mul_rows", at.shape(), wt.shape()));
        }
        let mut data = at.data().to_vec();
        for (row, s) in data.chunks_mut(c.max(1)).zip(wt.data()) {
            for x in row {
                *x *= s;
            }
        }
        let value = Tensor::new(at.shape(), data)?;
        Ok(self.push(value, Op::MulRows(a, w), &[a, w]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(value, Op::Relu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp(a), &[a])
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let at = self.value(a);
        let (_, c) = check_matrix("softmax_rows", at)?;
        let mut data = at.data().to_vec();
        if c > 0 {
            for row in data.chunks_mut(c) {
                softmax_in_place(row);
            }
        }
        let value = Tensor::new(at.shape(), data)?;
        Ok(self.push(value, Op::SoftmaxRows(a), &[a]))
    }

    /// Row-wise `log Σ exp`, returning an `r×1` column.
    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var> {
        let at = self.value(a);
        let (r, c) = check_matrix("logsumexp_rows", at)?;
        if c == 0 {
            return Err(Error::Contract("logsumexp over an empty row".into()));
        }
        let data = at.data().chunks(c).map(logsumexp).collect();
        let value = Tensor::new(&[r, 1], data)?;
        Ok(self.push(value, Op::LogSumExpRows(a), &[a]))
    }

    /// Per-row normalization to zero mean and unit variance, then `gain`
    /// and `bias`. A row whose variance plus `eps` is exactly zero maps to
    /// `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xt = self.value(x);
        let (r, d) = check_matrix("layer_norm", xt)?;
        if d == 0 || self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::dim("layer_norm", xt.shape(), self.value(gain).shape()));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; r * d];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * d];
        for i in 0..r {
            let row = &xt.data()[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let denom = var + eps;
            let rs = if denom > 0.0 { 1.0 / denom.sqrt() } else { 0.0 };
            rstd[i] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[i * d + j] = xh;
                out[i * d + j] = xh * g[j] + b[j];
            }
        }
        let value = Tensor::new(&[r, d], out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.batched_concat_rows(a, b, 1, false)
    }

    /// Per-block row concatenation: block `i` of the output is `a_i` stacked
    /// over `b_i`. With `shared_a`, the whole of `a` is prepended to every
    /// block of `b`.
    pub fn batched_concat_rows(
        &mut self,
        a: Var,
        b: Var,
        batch: usize,
        shared_a: bool,
    ) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        let (ar, ac) = check_matrix("concat_rows", at)?;
        let (br, bc) = check_matrix("concat_rows", bt)?;
        if ac != bc || batch == 0 || br % batch != 0 || (!shared_a && ar % batch != 0) {
            return Err(Error::dim("concat_rows", at.shape(), bt.shape()));
        }
        let pa = if shared_a { ar } else { ar / batch };
        let pb = br / batch;
        let c = ac;
        let mut data = Vec::with_capacity(batch * (pa + pb) * c);
        for i in 0..batch {
            let a_start = if shared_a { 0 } else { i * pa * c };
            data.extend_from_slice(&at.data()[a_start..a_start + pa * c]);
            data.extend_from_slice(&bt.data()[i * pb * c..(i + 1) * pb * c]);
        }
        let value = Tensor::new(&[batch * (pa + pb), c], data)?;
        Ok(self.push(
            value,
            Op::ConcatRows {
                a,
                b,
                batch,
                shared_a,
            },
            &[a, b],
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let r = check_matrix("concat_cols", self.value(*first))?.0;
        let mut total = 0;
        for p in parts {
            let (pr, pc) = check_matrix("concat_cols", self.value(*p))?;
            if pr != r {
                return Err(Error::dim("concat_cols", self.value(*first).shape(), self.value(*p).shape()));
            }
            total += pc;
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(i));
            }
        }
        let value = Tensor::new(&[r, total], data)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (_, c) = check_matrix("slice_cols", self.value(x))?;
        if start + width > c {
            return Err(Error::dim("slice_cols", self.value(x).shape(), &[start, width]));
        }
        let value = self.value(x).slice_cols(start, width);
        Ok(self.push(value, Op::SliceCols { x, start }, &[x]))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let (r, _) = check_matrix("slice_rows", self.value(x))?;
        if start + count > r {
            return Err(Error::dim("slice_rows", self.value(x).shape(), &[start, count]));
        }
        let value = self.value(x).slice_rows(start, count);
        Ok(self.push(value, Op::SliceRows { x, start }, &[x]))
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (v, d) = check_matrix("gather_rows", tt)?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::OutOfVocab { id, vocab: v });
            }
            data.extend_from_slice(tt.row(id));
        }
        let value = Tensor::new(&[ids.len(), d], data)?;
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a), &[a])
    }

    /// Mean over each of `batch` equal row blocks: `[batch·n × d] → [batch × d]`.
    pub fn segment_mean(&mut self, x: Var, batch: usize) -> Result<Var> {
        let xt = self.value(x);
        let (r, d) = check_matrix("segment_mean", xt)?;
        if batch == 0 || r % batch != 0 || r == 0 {
            return Err(Error::dim("segment_mean", xt.shape(), &[batch]));
        }
        let n = r / batch;
        let mut data = vec![0.0; batch * d];
        for b in 0..batch {
            for i in 0..n {
                for (o, v) in data[b * d..(b + 1) * d].iter_mut().zip(xt.row(b * n + i)) {
                    *o += v / n as f64;
                }
            }
        }
        let value = Tensor::new(&[batch, d], data)?;
        Ok(self.push(value, Op::SegmentMean { x, batch }, &[x]))
    }

    /// Label-smoothed cross-entropy averaged over rows whose target is
    /// `Some`. The smoothing mass is spread evenly over the non-target
    /// classes, so the target distribution is `1-α` on the target and
    /// `α/(V-1)` elsewhere.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        smoothing: f64,
    ) -> Result<Var> {
        let lt = self.value(logits);
        let (r, v) = check_matrix("cross_entropy", lt)?;
        if targets.len() != r {
            return Err(Error::dim("cross_entropy", lt.shape(), &[targets.len()]));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::Contract(format!(
                "label smoothing must lie in [0, 1), got {smoothing}"
            )));
        }
        let off = if v > 1 { smoothing / (v - 1) as f64 } else { 0.0 };
        let mut probs = vec![0.0; r * v];
        let mut total = 0.0;
        let mut count = 0;
        for (i, t) in targets.iter().enumerate() {
            let row = lt.row(i);
            let lse = logsumexp(row);
            for j in 0..v {
                probs[i * v + j] = (row[j] - lse).exp();
            }
            if let Some(t) = *t {
                if t >= v {
                    return Err(Error::OutOfVocab { id: t, vocab: v });
                }
                count += 1;
                let mut loss = 0.0;
                for (j, &x) in row.iter().enumerate() {
                    let q = if j == t { 1.0 - smoothing } else { off };
                    if q != 0.0 {
                        loss -= q * (x - lse);
                    }
                }
                total += loss;
            }
        }
        let value = Tensor::scalar(if count > 0 { total / count as f64 } else { 0.0 });
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                smoothing,
                probs,
                count,
            },
            &[logits],
        ))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
        })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                batch,
                trans_b,
            } => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let k = at.cols();
                let m = at.rows() / batch;
                let n = out.cols();
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..*batch {
                        let gb = &g[i * m * n..(i + 1) * m * n];
                        let bb = &bt.data()[i * k * n..(i + 1) * k * n];
                        let oa = &mut ga[i * m * k..(i + 1) * m * k];
                        if *trans_b {
                            gemm_nn(gb, bb, oa, m, n, k);
                        } else {
                            gemm_nt(gb, bb, oa, m, n, k);
                        }
                    }
                }
                if let Some(gbv) = self.slot(grads, *b) {
                    for i in 0..*batch {
                        let gb = &g[i * m * n..(i + 1) * m * n];
                        let ab = &at.data()[i * m * k..(i + 1) * m * k];
                        let ob = &mut gbv[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            gemm_tn(gb, ab, ob, m, n, k);
                        } else {
                            gemm_tn(ab, gb, ob, m, k, n);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(s) = self.slot(grads, *v) {
                        add_into(s, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(s) = self.slot(grads, *a) {
                    add_into(s, g);
                }
                if let Some(s) = self.slot(grads, *b) {
                    s.iter_mut().zip(g).for_each(|(o, x)| *o -= x);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(s) = self.slot(grads, *a) {
                    for ((o, x), y) in s.iter_mut().zip(g).zip(bv) {
                        *o += x * y;
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    for ((o, x), y) in s.iter_mut().zip(g).zip(av) {
                        *o += x * y;
                    }
                }
            }
            Op::AddBias(a, bias) => {
                if let Some(s) = self.slot(grads, *a) {
                    add_into(s, g);
                }
                if let Some(s) = self.slot(grads, *bias) {
                    let c = s.len();
                    for row in g.chunks(c) {
                        add_into(s, row);
                    }
                }
            }
            Op::Scale(a, k) | Op::Affine(a, k) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(g).for_each(|(o, x)| *o += k * x);
                }
            }
            Op::AddConstBlocks(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    add_into(s, g);
                }
            }
            Op::MulConst(a, c) => {
                if let Some(s) = self.slot(grads, *a) {
                    for ((o, x), y) in s.iter_mut().zip(g).zip(c.data()) {
                        *o += x * y;
                    }
                }
            }
            Op::MulScalar(a, sv) => {
                let scalar = self.value(*sv).item();
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(g).for_each(|(o, x)| *o += scalar * x);
                }
                let av = self.value(*a).data();
                if let Some(s) = self.slot(grads, *sv) {
                    s[0] += g.iter().zip(av).map(|(x, y)| x * y).sum::<f64>();
                }
            }
            Op::MulRows(a, w) => {
                let at = self.value(*a);
                let c = at.cols().max(1);
                let wv = self.value(*w).data();
                if let Some(s) = self.slot(grads, *a) {
                    for ((srow, grow), k) in s.chunks_mut(c).zip(g.chunks(c)).zip(wv) {
                        srow.iter_mut().zip(grow).for_each(|(o, x)| *o += k * x);
                    }
                }
                if let Some(s) = self.slot(grads, *w) {
                    for ((o, grow), arow) in s.iter_mut().zip(g.chunks(c)).zip(at.data().chunks(c)) {
                        *o += grow.iter().zip(arow).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                if let Some(s) = self.slot(grads, *a) {
                    for ((o, x), v) in s.iter_mut().zip(g).zip(av) {
                        if *v > 0.0 {
                            *o += x;
                        }
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    for ((o, x), y) in s.iter_mut().zip(g).zip(out.data()) {
                        *o += x * (1.0 - y * y);
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    for ((o, x), y) in s.iter_mut().zip(g).zip(out.data()) {
                        *o += x * y;
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let c = out.cols();
                if let Some(s) = self.slot(grads, *a) {
                    if c > 0 {
                        for ((srow, grow), yrow) in
                            s.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c))
                        {
                            let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                            for ((o, x), y) in srow.iter_mut().zip(grow).zip(yrow) {
                                *o += y * (x - dot);
                            }
                        }
                    }
                }
            }
            Op::LogSumExpRows(a) => {
                let at = self.value(*a);
                let c = at.cols();
                if let Some(s) = self.slot(grads, *a) {
                    for (i, (srow, xrow)) in s.chunks_mut(c).zip(at.data().chunks(c)).enumerate() {
                        let lse = out.data()[i];
                        for (o, x) in srow.iter_mut().zip(xrow) {
                            *o += g[i] * (x - lse).exp();
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = out.cols();
                let gv = self.value(*gain).data().to_vec();
                if let Some(s) = self.slot(grads, *gain) {
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((o, a), b) in s.iter_mut().zip(grow).zip(hrow) {
                            *o += a * b;
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *bias) {
                    for grow in g.chunks(d) {
                        add_into(s, grow);
                    }
                }
                if let Some(s) = self.slot(grads, *x) {
                    let mut dxhat = vec![0.0; d];
                    for (i, ((srow, grow), hrow)) in s
                        .chunks_mut(d)
                        .zip(g.chunks(d))
                        .zip(xhat.chunks(d))
                        .enumerate()
                    {
                        for j in 0..d {
                            dxhat[j] = grow[j] * gv[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dh =
                            dxhat.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            srow[j] += rstd[i] * (dxhat[j] - mean_d - hrow[j] * mean_dh);
                        }
                    }
                }
            }
            Op::ConcatRows {
                a,
                b,
                batch,
                shared_a,
            } => {
                let c = out.cols();
                let ar = self.value(*a).rows();
                let pa = if *shared_a { ar } else { ar / batch };
                let pb = self.value(*b).rows() / batch;
                let blk = (pa + pb) * c;
                if let Some(s) = self.slot(grads, *a) {
                    for i in 0..*batch {
                        let src = &g[i * blk..i * blk + pa * c];
                        let dst_start = if *shared_a { 0 } else { i * pa * c };
                        add_into(&mut s[dst_start..dst_start + pa * c], src);
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    for i in 0..*batch {
                        let src = &g[i * blk + pa * c..(i + 1) * blk];
                        add_into(&mut s[i * pb * c..(i + 1) * pb * c], src);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for p in parts {
                    let pc = self.value(*p).cols();
                    if let Some(s) = self.slot(grads, *p) {
                        for (srow, grow) in s.chunks_mut(pc.max(1)).zip(g.chunks(total)) {
                            add_into(srow, &grow[offset..offset + pc]);
                        }
                    }
                    offset += pc;
                }
            }
            Op::SliceCols { x, start } => {
                let c = self.value(*x).cols();
                let w = out.cols();
                if let Some(s) = self.slot(grads, *x) {
                    if w > 0 {
                        for (srow, grow) in s.chunks_mut(c).zip(g.chunks(w)) {
                            add_into(&mut srow[*start..start + w], grow);
                        }
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let c = out.cols();
                if let Some(s) = self.slot(grads, *x) {
                    add_into(&mut s[start * c..start * c + g.len()], g);
                }
            }
            Op::Gather { table, ids } => {
                let d = out.cols();
                if let Some(s) = self.slot(grads, *table) {
                    for (i, &id) in ids.iter().enumerate() {
                        add_into(&mut s[id * d..(id + 1) * d], &g[i * d..(i + 1) * d]);
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::SegmentMean { x, batch } => {
                let d = out.cols();
                let n = self.value(*x).rows() / batch;
                if let Some(s) = self.slot(grads, *x) {
                    for b in 0..*batch {
                        for i in 0..n {
                            let dst = &mut s[(b * n + i) * d..(b * n + i + 1) * d];
                            for (o, x) in dst.iter_mut().zip(&g[b * d..(b + 1) * d]) {
                                *o += x / n as f64;
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                smoothing,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let v = self.value(*logits).cols();
                let off = if v > 1 { smoothing / (v - 1) as f64 } else { 0.0 };
                let k = g[0] / *count as f64;
                if let Some(s) = self.slot(grads, *logits) {
                    for (i, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for j in 0..v {
                            let q = if j == t { 1.0 - smoothing } else { off };
                            s[i * v + j] += k * (probs[i * v + j] - q);
                        }
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (o, x) in dst.iter_mut().zip(src) {
        *o += x;
    }
}

pub(crate) fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Evaluates a graph-building function on a fresh graph with `x` as a
/// constant input and returns the output value.
pub fn eval_with<F>(x: &Tensor, f: F) -> Result<Tensor>
where
    F: FnOnce(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let out = f(&mut g, v)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_forward_examples() {
        let mut g = Graph::new();
        let a = g.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = g.constant(m(&[&[5.0, 6.0], &[7.0, 8.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);

        let i = g.constant(Tensor::eye(2));
        let c = g.matmul(i, b).unwrap();
        assert_eq!(g.value(c), g.value(b));

        let z = g.constant(Tensor::zeros(&[2, 3]));
        let c = g.matmul(a, z).unwrap();
        assert!(g.value(c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 5]));
        match g.matmul(a, b).unwrap_err() {
            Error::Dimension { lhs, rhs, .. } => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 5]);
            }
            e => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let a = g.constant(m(&[&[2.5, 2.5, 2.5, 2.5], &[0.0, 3f64.ln(), 0.0, f64::NEG_INFINITY]]));
        // second row: the -inf entry is an exact zero weight
        let s = g.softmax_rows(a).unwrap();
        let v = g.value(s);
        for j in 0..4 {
            assert!((v.get(0, j) - 0.25).abs() < 1e-15);
        }
        assert!((v.get(1, 1) - 0.6).abs() < 1e-15);

        let a = g.constant(m(&[&[0.0, 3f64.ln()]]));
        let s = g.softmax_rows(a).unwrap();
        assert!((g.value(s).get(0, 0) - 0.25).abs() < 1e-15);
        assert!((g.value(s).get(0, 1) - 0.75).abs() < 1e-15);

        let a = g.constant(m(&[&[-7.0], &[123.0]]));
        let s = g.softmax_rows(a).unwrap();
        assert_eq!(g.value(s).data(), &[1.0, 1.0]);
    }

    #[test]
    fn softmax_is_stable_for_huge_logits() {
        let mut g = Graph::new();
        let a = g.constant(m(&[&[1000.0, 1000.0], &[-1e9, 0.0]]));
        let s = g.softmax_rows(a).unwrap();
        assert!(g.value(s).is_finite());
        assert_eq!(g.value(s).data(), &[0.5, 0.5, 0.0, 1.0]);
    }

    #[test]
    fn relu_examples() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let r = g.relu(a);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let rr = g.relu(r);
        assert_eq!(g.value(rr), g.value(r));
        let n = g.constant(Tensor::full(&[3], -0.5));
        let r = g.relu(n);
        assert!(g.value(r).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let a = g.param(Tensor::vector(vec![0.0, 1.0]));
        let r = g.relu(a);
        let l = g.sum(r);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(a).data(), &[0.0, 1.0]);
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let ones = g.constant(Tensor::ones(&[2]));
        let zeros = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(m(&[&[1.0, 3.0]]));
        let y = g.layer_norm(x, ones, zeros, 0.0).unwrap();
        assert_eq!(g.value(y).data(), &[-1.0, 1.0]);

        let bias = g.constant(Tensor::vector(vec![0.3, -0.7]));
        let c = g.constant(m(&[&[4.0, 4.0]]));
        let y = g.layer_norm(c, ones, bias, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.3, -0.7]);
        let y = g.layer_norm(c, ones, bias, 0.0).unwrap();
        assert_eq!(g.value(y).data(), &[0.3, -0.7]);

        let y = g.layer_norm(x, zeros, bias, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.3, -0.7]);
    }

    #[test]
    fn concat_rows_examples() {
        let mut g = Graph::new();
        let e = g.constant(Tensor::zeros(&[0, 3]));
        let b = g.constant(m(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]));
        let c = g.concat_rows(e, b).unwrap();
        assert_eq!(g.value(c), g.value(b));

        let one = g.constant(m(&[&[1.0]]));
        let two = g.constant(m(&[&[2.0]]));
        let c = g.concat_rows(one, two).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 1]);
        assert_eq!(g.value(c).data(), &[1.0, 2.0]);

        let narrow = g.constant(Tensor::zeros(&[1, 2]));
        assert!(matches!(g.concat_rows(narrow, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn batched_concat_with_shared_prefix() {
        let mut g = Graph::new();
        let p = g.constant(m(&[&[9.0]]));
        let x = g.constant(m(&[&[1.0], &[2.0], &[3.0], &[4.0]]));
        let c = g.batched_concat_rows(p, x, 2, true).unwrap();
        assert_eq!(g.value(c).data(), &[9.0, 1.0, 2.0, 9.0, 3.0, 4.0]);
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let x = g.param(m(&[&[1.0, -2.0], &[0.5, 3.0]]));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).data().iter().all(|&v| v == 1.0));

        let mut g = Graph::new();
        let x = g.param(m(&[&[1.0, -2.0], &[0.5, 3.0]]));
        let off_path = g.param(Tensor::ones(&[3]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let half = g.scale(s, 0.5);
        let grads = g.backward(half).unwrap();
        assert_eq!(grads.get(x), *g.value(x));
        assert!(grads.get(off_path).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn fan_out_accumulates_linearly() {
        let a0 = m(&[&[0.3, -1.2], &[2.0, 0.7]]);
        let w1 = m(&[&[1.0, 2.0], &[-0.5, 0.25]]);
        let w2 = m(&[&[0.1, 0.0], &[3.0, -1.0]]);
        let single = |w: &Tensor| {
            let mut g = Graph::new();
            let a = g.param(a0.clone());
            let wv = g.constant(w.clone());
            let y = g.matmul(a, wv).unwrap();
            let y = g.tanh(y);
            let l = g.sum(y);
            g.backward(l).unwrap().get(a)
        };
        let mut g = Graph::new();
        let a = g.param(a0.clone());
        let wv1 = g.constant(w1.clone());
        let wv2 = g.constant(w2.clone());
        let y1 = g.matmul(a, wv1).unwrap();
        let y1 = g.tanh(y1);
        let y2 = g.matmul(a, wv2).unwrap();
        let y2 = g.tanh(y2);
        let s1 = g.sum(y1);
        let s2 = g.sum(y2);
        let l = g.add(s1, s2).unwrap();
        let both = g.backward(l).unwrap().get(a);
        let expected = single(&w1).add(&single(&w2)).unwrap();
        assert!(both.max_abs_diff(&expected) < 1e-14);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let uniform = g.constant(Tensor::zeros(&[3, 7]));
        for alpha in [0.0, 0.1, 0.5] {
            let l = g.cross_entropy(uniform, &[Some(0), Some(3), Some(6)], alpha).unwrap();
            assert!((g.value(l).item() - 7f64.ln()).abs() < 1e-12);
        }
        let logits = g.constant(m(&[&[3f64.ln(), 0.0]]));
        let l = g.cross_entropy(logits, &[Some(0)], 0.1).unwrap();
        let expected = 0.9 * (4.0f64 / 3.0).ln() + 0.1 * 4f64.ln();
        assert!((g.value(l).item() - expected).abs() < 1e-12);
        assert!((g.value(l).item() - 0.3975).abs() < 5e-5);

        let l = g.cross_entropy(logits, &[Some(0)], 0.0).unwrap();
        assert!((g.value(l).item() - (4.0f64 / 3.0).ln()).abs() < 1e-12);

        // ignored rows do not count toward the mean
        let two = g.constant(m(&[&[3f64.ln(), 0.0], &[50.0, -50.0]]));
        let l = g.cross_entropy(two, &[Some(0), None], 0.0).unwrap();
        assert!((g.value(l).item() - (4.0f64 / 3.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn gather_rejects_out_of_range() {
        let mut g = Graph::new();
        let t = g.constant(Tensor::zeros(&[4, 2]));
        assert!(matches!(
            g.gather_rows(t, &[1, 4]),
            Err(Error::OutOfVocab { id: 4, vocab: 4 })
        ));
    }

    #[test]
    fn identical_inputs_give_bit_identical_outputs() {
        let run = || {
            let mut g = Graph::new();
            let x = g.constant(m(&[&[0.1, 0.2, 0.3], &[1.5, -2.0, 0.0]]));
            let w = g.constant(m(&[&[0.3, 0.1], &[0.2, -0.9], &[1.1, 0.4]]));
            let y = g.matmul(x, w).unwrap();
            let s = g.softmax_rows(y).unwrap();
            g.value(s).to_le_bytes()
        };
        assert_eq!(run(), run());
    }
}
