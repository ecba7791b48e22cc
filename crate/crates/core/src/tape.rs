//! Reverse-mode automatic differentiation on an explicit tape.
//!
//! A [`Tape`] records one forward pass as a flat list of nodes. Node ids are
//! strictly increasing, every operation refers only to earlier nodes, so the
//! graph is acyclic by construction and a reverse sweep over ids is already a
//! reverse topological order. Gradients are recomputed from scratch on every
//! [`Tape::backward`] call; nothing accumulates across calls.
//!
//! Only nodes with a parameter among their ancestors carry gradients. Leaves
//! inserted with [`Tape::leaf`] are constants: no storage is spent on their
//! gradients and whole frozen subgraphs are skipped during the sweep.

use crate::tensor::{Tensor, TensorError};

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    MulElem(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    AddRowBias { mat: NodeId, bias: NodeId },
    Softmax(NodeId),
    SoftmaxRows(NodeId),
    MeanPool(NodeId),
    MaxPool { input: NodeId, argmax: Vec<usize> },
    MaxOver { items: Vec<NodeId>, argmax: Vec<usize> },
    Sum(NodeId),
    Reshape(NodeId),
    SliceRows { input: NodeId, start: usize },
    ConcatRows(NodeId, NodeId),
    StackVecs(Vec<NodeId>),
    RepeatBlocks { input: NodeId, factor: usize },
    PoolGrid { input: NodeId, grid: [usize; 3], factor: usize },
    EmbedRows { table: NodeId, ids: Vec<usize> },
    WeightedSum { weights: NodeId, items: Vec<NodeId> },
    CrossEntropySum { logits: NodeId, targets: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Numerically stable softmax of one slice, written into `out`.
///
/// The normalizer is summed over value-sorted terms, so inputs that are a
/// permutation of each other produce outputs that are exactly the same
/// permutation, bit for bit.
fn softmax_into(values: &[f64], out: &mut [f64]) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for (o, &v) in out.iter_mut().zip(values) {
        *o = (v - max).exp();
    }
    let mut terms: Vec<f64> = out.to_vec();
    terms.sort_unstable_by(f64::total_cmp);
    let norm: f64 = terms.iter().sum();
    for o in out.iter_mut() {
        *o /= norm;
    }
}

fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = values.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Recorded computation graph with per-node values and, after a backward
/// sweep, per-node gradients.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant input. Never receives a gradient.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    /// Trainable input. Gradients w.r.t. this node are available after
    /// [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward root w.r.t. this node, if one was
    /// propagated to it.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn expect_2d(&self, op: &'static str, id: NodeId) -> Result<(usize, usize), TensorError> {
        let s = self.value(id).shape();
        if s.len() != 2 {
            return Err(TensorError::BadShape {
                op,
                shape: s.to_vec(),
                expected: "a 2-d tensor".into(),
            });
        }
        Ok((s[0], s[1]))
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::Add(a, b), Tensor::new(shape, data)?, rg))
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mul_elem",
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::MulElem(a, b), Tensor::new(shape, data)?, rg))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let value = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a).data().iter().map(|x| x * factor).collect(),
        )
        .expect("scale preserves shape");
        let rg = self.any_grad(&[a]);
        self.push(Op::Scale(a, factor), value, rg)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a).data().iter().map(|x| x.tanh()).collect(),
        )
        .expect("tanh preserves shape");
        let rg = self.any_grad(&[a]);
        self.push(Op::Tanh(a), value, rg)
    }

    // ---- linear algebra ----

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (m, ka) = self.expect_2d("matmul", a)?;
        let (kb, n) = self.expect_2d("matmul", b)?;
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: vec![m, ka],
                right: vec![kb, n],
            });
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for k in 0..ka {
                let aik = av[i * ka + k];
                if aik == 0.0 {
                    continue;
                }
                let brow = &bv[k * n..(k + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &bkj) in orow.iter_mut().zip(brow) {
                    *o += aik * bkj;
                }
            }
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::Matmul(a, b), Tensor::new(vec![m, n], out)?, rg))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let (m, n) = self.expect_2d("transpose", a)?;
        let av = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(Op::Transpose(a), Tensor::new(vec![n, m], out)?, rg))
    }

    /// Adds a `[d]` bias vector to every row of a `[m, d]` matrix.
    pub fn add_row_bias(&mut self, mat: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let (m, d) = self.expect_2d("add_row_bias", mat)?;
        let bs = self.value(bias).shape();
        if bs != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_bias",
                left: vec![m, d],
                right: bs.to_vec(),
            });
        }
        let bv = self.value(bias).data().to_vec();
        let data: Vec<f64> = self
            .value(mat)
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(&bv).map(|(x, b)| x + b).collect::<Vec<_>>())
            .collect();
        let rg = self.any_grad(&[mat, bias]);
        Ok(self.push(Op::AddRowBias { mat, bias }, Tensor::new(vec![m, d], data)?, rg))
    }

    /// `x @ w + b` for `x: [m, k]`, `w: [k, n]`, `b: [n]`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let xw = self.matmul(x, w)?;
        self.add_row_bias(xw, b)
    }

    // ---- normalization and reductions ----

    /// Softmax over a 1-d tensor. The output is a probability vector: entries
    /// in (0, 1], summing to 1 up to rounding.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let s = self.value(a).shape();
        if s.len() != 1 {
            return Err(TensorError::BadShape {
                op: "softmax",
                shape: s.to_vec(),
                expected: "a 1-d tensor".into(),
            });
        }
        let n = s[0];
        let mut out = vec![0.0; n];
        softmax_into(self.value(a).data(), &mut out);
        let rg = self.any_grad(&[a]);
        Ok(self.push(Op::Softmax(a), Tensor::new(vec![n], out)?, rg))
    }

    /// Row-wise softmax over the last axis of a `[m, n]` tensor.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let (m, n) = self.expect_2d("softmax_rows", a)?;
        let av = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            softmax_into(&av[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(Op::SoftmaxRows(a), Tensor::new(vec![m, n], out)?, rg))
    }

    /// Mean over axis 0 of a `[m, d]` tensor, yielding `[d]`.
    pub fn mean_pool(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let (m, d) = self.expect_2d("mean_pool", a)?;
        let av = self.value(a).data();
        let mut out = vec![0.0; d];
        for row in av.chunks(d) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        for o in out.iter_mut() {
            *o /= m as f64;
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(Op::MeanPool(a), Tensor::new(vec![d], out)?, rg))
    }

    /// Maximum over axis 0 of a `[m, d]` tensor, yielding `[d]`. Ties resolve
    /// to the lowest row index, and the gradient follows that choice.
    pub fn max_pool(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let (m, d) = self.expect_2d("max_pool", a)?;
        let av = self.value(a).data();
        let mut out = av[..d].to_vec();
        let mut argmax = vec![0usize; d];
        for i in 1..m {
            for j in 0..d {
                let x = av[i * d + j];
                if x > out[j] {
                    out[j] = x;
                    argmax[j] = i;
                }
            }
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(Op::MaxPool { input: a, argmax }, Tensor::new(vec![d], out)?, rg))
    }

    /// Elementwise maximum over several same-shape tensors. Ties resolve to
    /// the earliest operand, and the gradient follows that choice.
    pub fn max_elem_over(&mut self, items: &[NodeId]) -> Result<NodeId, TensorError> {
        if items.is_empty() {
            return Err(TensorError::Empty { op: "max_elem_over" });
        }
        let shape = self.value(items[0]).shape().to_vec();
        for &id in items {
            if self.value(id).shape() != shape.as_slice() {
                return Err(TensorError::ShapeMismatch {
                    op: "max_elem_over",
                    left: shape,
                    right: self.value(id).shape().to_vec(),
                });
            }
        }
        let mut out = self.value(items[0]).data().to_vec();
        let mut argmax = vec![0usize; out.len()];
        for (i, &id) in items.iter().enumerate().skip(1) {
            for (e, &x) in self.value(id).data().iter().enumerate() {
                if x > out[e] {
                    out[e] = x;
                    argmax[e] = i;
                }
            }
        }
        let rg = self.any_grad(items);
        Ok(self.push(
            Op::MaxOver { items: items.to_vec(), argmax },
            Tensor::new(shape, out)?,
            rg,
        ))
    }

    /// Sum of all entries, yielding a scalar of shape `[1]`.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let total: f64 = self.value(a).data().iter().sum();
        let rg = self.any_grad(&[a]);
        self.push(Op::Sum(a), Tensor::scalar(total), rg)
    }

    // ---- structure ----

    /// Same data under a new shape with an equal element count.
    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId, TensorError> {
        let value = self.value(a).reshaped(shape)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(Op::Reshape(a), value, rg))
    }

    /// Rows `[start, start+len)` of a `[m, d]` tensor.
    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, TensorError> {
        let (m, d) = self.expect_2d("slice_rows", a)?;
        if len == 0 {
            return Err(TensorError::Empty { op: "slice_rows" });
        }
        if start + len > m {
            return Err(TensorError::OutOfRange {
                op: "slice_rows",
                what: "row",
                index: start + len - 1,
                bound: m,
            });
        }
        let data = self.value(a).data()[start * d..(start + len) * d].to_vec();
        let rg = self.any_grad(&[a]);
        Ok(self.push(Op::SliceRows { input: a, start }, Tensor::new(vec![len, d], data)?, rg))
    }

    /// Concatenation along axis 0 of two matrices with equal row length.
    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (ma, da) = self.expect_2d("concat_rows", a)?;
        let (mb, db) = self.expect_2d("concat_rows", b)?;
        if da != db {
            return Err(TensorError::ShapeMismatch {
                op: "concat_rows",
                left: vec![ma, da],
                right: vec![mb, db],
            });
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::ConcatRows(a, b), Tensor::new(vec![ma + mb, da], data)?, rg))
    }

    /// Stacks `k` vectors of equal length `d` into a `[k, d]` matrix.
    pub fn stack_vecs(&mut self, items: &[NodeId]) -> Result<NodeId, TensorError> {
        if items.is_empty() {
            return Err(TensorError::Empty { op: "stack_vecs" });
        }
        let d = self.value(items[0]).numel();
        let mut data = Vec::with_capacity(items.len() * d);
        for &id in items {
            let v = self.value(id);
            if v.shape().len() != 1 || v.numel() != d {
                return Err(TensorError::ShapeMismatch {
                    op: "stack_vecs",
                    left: vec![d],
                    right: v.shape().to_vec(),
                });
            }
            data.extend_from_slice(v.data());
        }
        let rg = self.any_grad(items);
        Ok(self.push(
            Op::StackVecs(items.to_vec()),
            Tensor::new(vec![items.len(), d], data)?,
            rg,
        ))
    }

    /// Repeats each row of a `[m, d]` tensor `factor` times, contiguously:
    /// the result row `j` equals the input row `floor(j / factor)`.
    pub fn repeat_blocks(&mut self, a: NodeId, factor: usize) -> Result<NodeId, TensorError> {
        let (m, d) = self.expect_2d("repeat_blocks", a)?;
        if factor == 0 {
            return Err(TensorError::Factor {
                op: "repeat_blocks",
                factor: 0,
                detail: "must be positive".into(),
            });
        }
        let av = self.value(a).data();
        let mut data = Vec::with_capacity(m * factor * d);
        for row in av.chunks(d) {
            for _ in 0..factor {
                data.extend_from_slice(row);
            }
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            Op::RepeatBlocks { input: a, factor },
            Tensor::new(vec![m * factor, d], data)?,
            rg,
        ))
    }

    /// Average-pools tokens laid out on a 3-d grid. The input is `[g0*g1*g2, d]`
    /// with axis order `(g0, g1, g2)` row-major; each output token is the mean
    /// of a `factor^3` block, giving `[(g0/f)*(g1/f)*(g2/f), d]`.
    pub fn pool_grid(
        &mut self,
        a: NodeId,
        grid: [usize; 3],
        factor: usize,
    ) -> Result<NodeId, TensorError> {
        let (m, d) = self.expect_2d("pool_grid", a)?;
        let [g0, g1, g2] = grid;
        if g0 * g1 * g2 != m {
            return Err(TensorError::BadShape {
                op: "pool_grid",
                shape: vec![m, d],
                expected: format!("axis 0 equal to {g0}*{g1}*{g2}"),
            });
        }
        if factor == 0 || g0 % factor != 0 || g1 % factor != 0 || g2 % factor != 0 {
            return Err(TensorError::Factor {
                op: "pool_grid",
                factor,
                detail: format!("must be positive and divide grid {g0}x{g1}x{g2}"),
            });
        }
        let (o0, o1, o2) = (g0 / factor, g1 / factor, g2 / factor);
        let av = self.value(a).data();
        let block = (factor * factor * factor) as f64;
        let mut data = vec![0.0; o0 * o1 * o2 * d];
        for a0 in 0..g0 {
            for a1 in 0..g1 {
                for a2 in 0..g2 {
                    let src = ((a0 * g1 + a1) * g2 + a2) * d;
                    let dst = (((a0 / factor) * o1 + a1 / factor) * o2 + a2 / factor) * d;
                    for j in 0..d {
                        data[dst + j] += av[src + j];
                    }
                }
            }
        }
        for x in data.iter_mut() {
            *x /= block;
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            Op::PoolGrid { input: a, grid, factor },
            Tensor::new(vec![o0 * o1 * o2, d], data)?,
            rg,
        ))
    }

    /// Gathers rows of an embedding table `[v, d]` by token id, giving
    /// `[ids.len(), d]`. The gradient scatter-adds back into the table.
    pub fn embed_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, TensorError> {
        let (v, d) = self.expect_2d("embed_rows", table)?;
        if ids.is_empty() {
            return Err(TensorError::Empty { op: "embed_rows" });
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(TensorError::OutOfRange {
                op: "embed_rows",
                what: "token id",
                index: bad,
                bound: v,
            });
        }
        let tv = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            Op::EmbedRows { table, ids: ids.to_vec() },
            Tensor::new(vec![ids.len(), d], data)?,
            rg,
        ))
    }

    /// Convex-style combination `sum_j weights[j] * items[j]`. Weights is a
    /// 1-d tensor of length `items.len()`; all items share one shape.
    /// Gradients flow into the weights and into every item.
    pub fn weighted_sum(
        &mut self,
        weights: NodeId,
        items: &[NodeId],
    ) -> Result<NodeId, TensorError> {
        let ws = self.value(weights).shape();
        if ws.len() != 1 || ws[0] != items.len() {
            return Err(TensorError::ShapeMismatch {
                op: "weighted_sum",
                left: ws.to_vec(),
                right: vec![items.len()],
            });
        }
        if items.is_empty() {
            return Err(TensorError::Empty { op: "weighted_sum" });
        }
        let shape = self.value(items[0]).shape().to_vec();
        for &id in items {
            if self.value(id).shape() != shape.as_slice() {
                return Err(TensorError::ShapeMismatch {
                    op: "weighted_sum",
                    left: shape,
                    right: self.value(id).shape().to_vec(),
                });
            }
        }
        let wv = self.value(weights).data().to_vec();
        let mut data = vec![0.0; self.value(items[0]).numel()];
        for (&id, &w) in items.iter().zip(&wv) {
            for (o, &x) in data.iter_mut().zip(self.value(id).data()) {
                *o += w * x;
            }
        }
        let rg = self.any_grad(&[weights]) || self.any_grad(items);
        Ok(self.push(
            Op::WeightedSum { weights, items: items.to_vec() },
            Tensor::new(shape, data)?,
            rg,
        ))
    }

    /// Summed cross-entropy of `[m, v]` logits against `m` target ids:
    /// `sum_i (logsumexp(logits_i) - logits_i[target_i])`, a scalar.
    pub fn cross_entropy_sum(
        &mut self,
        logits: NodeId,
        targets: &[usize],
    ) -> Result<NodeId, TensorError> {
        let (m, v) = self.expect_2d("cross_entropy_sum", logits)?;
        if targets.len() != m {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy_sum",
                left: vec![m, v],
                right: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(TensorError::OutOfRange {
                op: "cross_entropy_sum",
                what: "target id",
                index: bad,
                bound: v,
            });
        }
        let lv = self.value(logits).data();
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &lv[i * v..(i + 1) * v];
            total += logsumexp(row) - row[t];
        }
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Op::CrossEntropySum { logits, targets: targets.to_vec() },
            Tensor::scalar(total),
            rg,
        ))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar root. Gradients from any earlier sweep are
    /// discarded first.
    pub fn backward(&mut self, root: NodeId) -> Result<(), TensorError> {
        let root_value = &self.nodes[root.0].value;
        if root_value.numel() != 1 {
            return Err(TensorError::ScalarRequired {
                op: "backward",
                shape: root_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![1.0]);
        }
        for id in (0..=root.0).rev() {
            let Some(gout) = grads[id].take() else { continue };
            self.propagate(id, &gout, &mut grads);
            grads[id] = Some(gout);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, id: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let add_into = |grads: &mut [Option<Vec<f64>>],
                        nodes: &[Node],
                        target: NodeId,
                        contrib: &mut dyn FnMut(&mut [f64])| {
            if !nodes[target.0].requires_grad {
                return;
            }
            let numel = nodes[target.0].value.numel();
            let slot = grads[target.0].get_or_insert_with(|| vec![0.0; numel]);
            contrib(slot);
        };

        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &t in [a, b].iter() {
                    add_into(grads, &self.nodes, *t, &mut |g| {
                        for (gi, &go) in g.iter_mut().zip(gout) {
                            *gi += go;
                        }
                    });
                }
            }
            Op::MulElem(a, b) => {
                let (a, b) = (*a, *b);
                let bv = self.nodes[b.0].value.data();
                add_into(grads, &self.nodes, a, &mut |g| {
                    for ((gi, &go), &y) in g.iter_mut().zip(gout).zip(bv) {
                        *gi += go * y;
                    }
                });
                let av = self.nodes[a.0].value.data();
                add_into(grads, &self.nodes, b, &mut |g| {
                    for ((gi, &go), &x) in g.iter_mut().zip(gout).zip(av) {
                        *gi += go * x;
                    }
                });
            }
            Op::Scale(a, factor) => {
                let factor = *factor;
                add_into(grads, &self.nodes, *a, &mut |g| {
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi += go * factor;
                    }
                });
            }
            Op::Tanh(a) => {
                let yv = self.nodes[id].value.data();
                add_into(grads, &self.nodes, *a, &mut |g| {
                    for ((gi, &go), &y) in g.iter_mut().zip(gout).zip(yv) {
                        *gi += go * (1.0 - y * y);
                    }
                });
            }
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let ash = self.nodes[a.0].value.shape();
                let bsh = self.nodes[b.0].value.shape();
                let (m, k, n) = (ash[0], ash[1], bsh[1]);
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                // dA = G @ B^T
                add_into(grads, &self.nodes, a, &mut |g| {
                    for i in 0..m {
                        for kk in 0..k {
                            let mut acc = 0.0;
                            let grow = &gout[i * n..(i + 1) * n];
                            let brow = &bv[kk * n..(kk + 1) * n];
                            for (&go, &bj) in grow.iter().zip(brow) {
                                acc += go * bj;
                            }
                            g[i * k + kk] += acc;
                        }
                    }
                });
                // dB = A^T @ G
                add_into(grads, &self.nodes, b, &mut |g| {
                    for i in 0..m {
                        let grow = &gout[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let aik = av[i * k + kk];
                            if aik == 0.0 {
                                continue;
                            }
                            let gbrow = &mut g[kk * n..(kk + 1) * n];
                            for (gb, &go) in gbrow.iter_mut().zip(grow) {
                                *gb += aik * go;
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (n, m) = {
                    let s = self.nodes[id].value.shape();
                    (s[0], s[1])
                };
                add_into(grads, &self.nodes, *a, &mut |g| {
                    for i in 0..n {
                        for j in 0..m {
                            g[j * n + i] += gout[i * m + j];
                        }
                    }
                });
            }
            Op::AddRowBias { mat, bias } => {
                let d = self.nodes[bias.0].value.numel();
                add_into(grads, &self.nodes, *mat, &mut |g| {
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi += go;
                    }
                });
                add_into(grads, &self.nodes, *bias, &mut |g| {
                    for row in gout.chunks(d) {
                        for (gi, &go) in g.iter_mut().zip(row) {
                            *gi += go;
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let s = self.nodes[id].value.data();
                add_into(grads, &self.nodes, *a, &mut |g| {
                    let dot: f64 = gout.iter().zip(s).map(|(&go, &si)| go * si).sum();
                    for ((gi, &go), &si) in g.iter_mut().zip(gout).zip(s) {
                        *gi += si * (go - dot);
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let s = self.nodes[id].value.data();
                let n = self.nodes[id].value.shape()[1];
                add_into(grads, &self.nodes, *a, &mut |g| {
                    for ((grow, gorow), srow) in
                        g.chunks_mut(n).zip(gout.chunks(n)).zip(s.chunks(n))
                    {
                        let dot: f64 = gorow.iter().zip(srow).map(|(&go, &si)| go * si).sum();
                        for ((gi, &go), &si) in grow.iter_mut().zip(gorow).zip(srow) {
                            *gi += si * (go - dot);
                        }
                    }
                });
            }
            Op::MeanPool(a) => {
                let m = self.nodes[a.0].value.shape()[0];
                let d = gout.len();
                let inv = 1.0 / m as f64;
                add_into(grads, &self.nodes, *a, &mut |g| {
                    for row in g.chunks_mut(d) {
                        for (gi, &go) in row.iter_mut().zip(gout) {
                            *gi += go * inv;
                        }
                    }
                });
            }
            Op::MaxPool { input, argmax } => {
                let d = gout.len();
                add_into(grads, &self.nodes, *input, &mut |g| {
                    for (j, (&go, &row)) in gout.iter().zip(argmax).enumerate() {
                        g[row * d + j] += go;
                    }
                });
            }
            Op::MaxOver { items, argmax } => {
                for (i, &id) in items.iter().enumerate() {
                    add_into(grads, &self.nodes, id, &mut |g| {
                        for (e, (&go, &winner)) in gout.iter().zip(argmax).enumerate() {
                            if winner == i {
                                g[e] += go;
                            }
                        }
                    });
                }
            }
            Op::Sum(a) => {
                let go = gout[0];
                add_into(grads, &self.nodes, *a, &mut |g| {
                    for gi in g.iter_mut() {
                        *gi += go;
                    }
                });
            }
            Op::Reshape(a) => {
                add_into(grads, &self.nodes, *a, &mut |g| {
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi += go;
                    }
                });
            }
            Op::SliceRows { input, start } => {
                let d = self.nodes[input.0].value.row_len();
                let offset = start * d;
                add_into(grads, &self.nodes, *input, &mut |g| {
                    for (gi, &go) in g[offset..offset + gout.len()].iter_mut().zip(gout) {
                        *gi += go;
                    }
                });
            }
            Op::ConcatRows(a, b) => {
                let asize = self.nodes[a.0].value.numel();
                add_into(grads, &self.nodes, *a, &mut |g| {
                    for (gi, &go) in g.iter_mut().zip(&gout[..asize]) {
                        *gi += go;
                    }
                });
                add_into(grads, &self.nodes, *b, &mut |g| {
                    for (gi, &go) in g.iter_mut().zip(&gout[asize..]) {
                        *gi += go;
                    }
                });
            }
            Op::StackVecs(items) => {
                let d = self.nodes[id].value.shape()[1];
                for (i, &item) in items.iter().enumerate() {
                    add_into(grads, &self.nodes, item, &mut |g| {
                        for (gi, &go) in g.iter_mut().zip(&gout[i * d..(i + 1) * d]) {
                            *gi += go;
                        }
                    });
                }
            }
            Op::RepeatBlocks { input, factor } => {
                let d = self.nodes[input.0].value.row_len();
                let factor = *factor;
                add_into(grads, &self.nodes, *input, &mut |g| {
                    for (r, grow) in g.chunks_mut(d).enumerate() {
                        for rep in 0..factor {
                            let src = (r * factor + rep) * d;
                            for (gi, &go) in grow.iter_mut().zip(&gout[src..src + d]) {
                                *gi += go;
                            }
                        }
                    }
                });
            }
            Op::PoolGrid { input, grid, factor } => {
                let d = self.nodes[input.0].value.row_len();
                let [g0, g1, g2] = *grid;
                let f = *factor;
                let (o1, o2) = (g1 / f, g2 / f);
                let inv = 1.0 / (f * f * f) as f64;
                add_into(grads, &self.nodes, *input, &mut |g| {
                    for a0 in 0..g0 {
                        for a1 in 0..g1 {
                            for a2 in 0..g2 {
                                let src = ((a0 * g1 + a1) * g2 + a2) * d;
                                let dst = (((a0 / f) * o1 + a1 / f) * o2 + a2 / f) * d;
                                for j in 0..d {
                                    g[src + j] += gout[dst + j] * inv;
                                }
                            }
                        }
                    }
                });
            }
            Op::EmbedRows { table, ids } => {
                let d = self.nodes[table.0].value.shape()[1];
                add_into(grads, &self.nodes, *table, &mut |g| {
                    for (i, &tok) in ids.iter().enumerate() {
                        let dst = &mut g[tok * d..(tok + 1) * d];
                        for (gi, &go) in dst.iter_mut().zip(&gout[i * d..(i + 1) * d]) {
                            *gi += go;
                        }
                    }
                });
            }
            Op::WeightedSum { weights, items } => {
                let wv = self.nodes[weights.0].value.data();
                for (j, &item) in items.iter().enumerate() {
                    let w = wv[j];
                    add_into(grads, &self.nodes, item, &mut |g| {
                        for (gi, &go) in g.iter_mut().zip(gout) {
                            *gi += w * go;
                        }
                    });
                }
                let nodes = &self.nodes;
                add_into(grads, nodes, *weights, &mut |g| {
                    for (j, &item) in items.iter().enumerate() {
                        let iv = nodes[item.0].value.data();
                        let mut acc = 0.0;
                        for (&go, &x) in gout.iter().zip(iv) {
                            acc += go * x;
                        }
                        g[j] += acc;
                    }
                });
            }
            Op::CrossEntropySum { logits, targets } => {
                let v = self.nodes[logits.0].value.shape()[1];
                let lv = self.nodes[logits.0].value.data();
                let go = gout[0];
                add_into(grads, &self.nodes, *logits, &mut |g| {
                    let mut probs = vec![0.0; v];
                    for (i, &t) in targets.iter().enumerate() {
                        let row = &lv[i * v..(i + 1) * v];
                        softmax_into(row, &mut probs);
                        let grow = &mut g[i * v..(i + 1) * v];
                        for (gi, &p) in grow.iter_mut().zip(&probs) {
                            *gi += go * p;
                        }
                        grow[t] -= go;
                    }
                });
            }
        }
    }
}
