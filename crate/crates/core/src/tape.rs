//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] is an arena of tensor nodes plus a linear record of the
//! operations that produced them. Running [`Tape::backward`] on a scalar node
//! replays the record in reverse and accumulates exact gradients into every
//! `requires_grad` leaf. The op set is exactly what the transformer forward
//! pass needs; there is no broadcasting beyond the listed ops.
//!
//! Gradients accumulate across repeated `backward` calls until
//! [`Tape::zero_grads`] is called. A tape built with [`Tape::inference`]
//! computes identical values through identical code paths but records
//! nothing, so forward results are bit-identical with and without gradient
//! tracking.
//!
//! Tapes are single-owner: share model parameters immutably across workers,
//! never share a tape.

use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Dense n-dimensional array of 64-bit floats in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Contract(format!(
                "tensor shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], requires_grad: false, grad: None }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor { shape: vec![], data: vec![x], requires_grad: false, grad: None }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Row count of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node in a [`Tape`] arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    /// Leaf flag: gradients are persisted for this node.
    requires_grad: bool,
    /// True when any leaf with `requires_grad` feeds this node; backward
    /// skips subtrees where this is false.
    needs_grad: bool,
    /// Persistent accumulated gradient (leaves only).
    grad: Option<Vec<f64>>,
}

enum Op {
    Add { a: NodeId, b: NodeId, out: NodeId },
    Sub { a: NodeId, b: NodeId, out: NodeId },
    Mul { a: NodeId, b: NodeId, out: NodeId },
    Scale { x: NodeId, c: f64, out: NodeId },
    AddRow { x: NodeId, row: NodeId, out: NodeId, r: usize, c: usize },
    Matmul { a: NodeId, b: NodeId, out: NodeId, m: usize, k: usize, n: usize },
    /// out = a @ b^T with a: [m,k], b: [n,k].
    MatmulNT { a: NodeId, b: NodeId, out: NodeId, m: usize, k: usize, n: usize },
    Transpose { x: NodeId, out: NodeId, r: usize, c: usize },
    Reshape { x: NodeId, out: NodeId },
    SliceCols { x: NodeId, out: NodeId, r: usize, c: usize, from: usize, to: usize },
    ConcatCols { parts: Vec<NodeId>, widths: Vec<usize>, out: NodeId, r: usize },
    RowSoftmax { x: NodeId, out: NodeId, r: usize, c: usize },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, out: NodeId, r: usize, c: usize },
    Gelu { x: NodeId, out: NodeId },
    Tanh { x: NodeId, out: NodeId },
    EmbedGather { table: NodeId, out: NodeId, ids: Vec<usize>, d: usize },
    /// Scalar sum of -log softmax(logits[t])[targets[t]] over rows with
    /// targets[t] >= 0; rows with negative targets contribute exactly zero
    /// to both value and gradient.
    CrossEntropyMasked { logits: NodeId, out: NodeId, targets: Vec<i64>, r: usize, c: usize },
    Sum { x: NodeId, out: NodeId },
}

/// Wengert tape: arena of nodes plus recorded ops.
pub struct Tape {
    nodes: Vec<Node>,
    ops: Vec<Op>,
    recording: bool,
}

impl Tape {
    /// Tape that records ops for backward.
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), ops: Vec::new(), recording: true }
    }

    /// Tape that computes values only; `backward` is unavailable.
    pub fn inference() -> Self {
        Tape { nodes: Vec::new(), ops: Vec::new(), recording: false }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    // ── Leaves and access ───────────────────────────────────────────

    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> NodeId {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, data.len(), "leaf shape/data mismatch");
        let needs = requires_grad && self.recording;
        self.push_node(data, shape, requires_grad, needs)
    }

    pub fn leaf_tensor(&mut self, t: &Tensor, requires_grad: bool) -> NodeId {
        self.leaf(t.data.clone(), t.shape.clone(), requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn numel(&self, id: NodeId) -> usize {
        self.nodes[id.0].data.len()
    }

    /// Scalar value of a one-element node.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.numel(id), 1);
        self.nodes[id.0].data[0]
    }

    /// Accumulated gradient of a `requires_grad` leaf; `None` before the
    /// first backward call.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn to_tensor(&self, id: NodeId) -> Tensor {
        Tensor {
            shape: self.nodes[id.0].shape.clone(),
            data: self.nodes[id.0].data.clone(),
            requires_grad: self.nodes[id.0].requires_grad,
            grad: self.nodes[id.0].grad.clone(),
        }
    }

    /// Clear all persisted leaf gradients.
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push_node(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, needs_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { data, shape, requires_grad, needs_grad, grad: None });
        id
    }

    fn out_node(&mut self, data: Vec<f64>, shape: Vec<usize>, inputs: &[NodeId]) -> NodeId {
        let needs = self.recording && inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.push_node(data, shape, false, needs)
    }

    fn record(&mut self, op: Op) {
        if self.recording {
            self.ops.push(op);
        }
    }

    // ── Elementwise ─────────────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let data: Vec<f64> =
            self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data).map(|(x, y)| x + y).collect();
        let shape = self.nodes[a.0].shape.clone();
        let out = self.out_node(data, shape, &[a, b]);
        self.record(Op::Add { a, b, out });
        out
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let data: Vec<f64> =
            self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data).map(|(x, y)| x - y).collect();
        let shape = self.nodes[a.0].shape.clone();
        let out = self.out_node(data, shape, &[a, b]);
        self.record(Op::Sub { a, b, out });
        out
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let data: Vec<f64> =
            self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data).map(|(x, y)| x * y).collect();
        let shape = self.nodes[a.0].shape.clone();
        let out = self.out_node(data, shape, &[a, b]);
        self.record(Op::Mul { a, b, out });
        out
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v * c).collect();
        let shape = self.nodes[x.0].shape.clone();
        let out = self.out_node(data, shape, &[x]);
        self.record(Op::Scale { x, c, out });
        out
    }

    /// Broadcast-add a length-c row vector to every row of an [r,c] matrix.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> NodeId {
        let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
        assert_eq!(self.numel(row), c, "add_row width mismatch");
        let mut data = self.nodes[x.0].data.clone();
        let rowv = &self.nodes[row.0].data;
        for i in 0..r {
            for (o, &v) in data[i * c..(i + 1) * c].iter_mut().zip(rowv) {
                *o += v;
            }
        }
        let out = self.out_node(data, vec![r, c], &[x, row]);
        self.record(Op::AddRow { x, row, out, r, c });
        out
    }

    // ── Linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
        let (kb, n) = (self.shape(b)[0], self.shape(b)[1]);
        assert_eq!(k, kb, "matmul inner dimension mismatch");
        let data = matmul_new(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        let out = self.out_node(data, vec![m, n], &[a, b]);
        self.record(Op::Matmul { a, b, out, m, k, n });
        out
    }

    /// a @ b^T for a: [m,k], b: [n,k].
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
        let (n, kb) = (self.shape(b)[0], self.shape(b)[1]);
        assert_eq!(k, kb, "matmul_nt inner dimension mismatch");
        let av = &self.nodes[a.0].data;
        let bv = &self.nodes[b.0].data;
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let arow = &av[i * k..(i + 1) * k];
            data.extend((0..n).map(|j| dot_unrolled(arow, &bv[j * k..(j + 1) * k])));
        }
        let out = self.out_node(data, vec![m, n], &[a, b]);
        self.record(Op::MatmulNT { a, b, out, m, k, n });
        out
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
        let xv = &self.nodes[x.0].data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = xv[i * c + j];
            }
        }
        let out = self.out_node(data, vec![c, r], &[x]);
        self.record(Op::Transpose { x, out, r, c });
        out
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> NodeId {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, self.numel(x), "reshape element count mismatch");
        let data = self.nodes[x.0].data.clone();
        let out = self.out_node(data, shape, &[x]);
        self.record(Op::Reshape { x, out });
        out
    }

    /// Columns [from, to) of an [r,c] matrix.
    pub fn slice_cols(&mut self, x: NodeId, from: usize, to: usize) -> NodeId {
        let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
        assert!(from < to && to <= c, "slice_cols out of range");
        let w = to - from;
        let xv = &self.nodes[x.0].data;
        let mut data = vec![0.0; r * w];
        for i in 0..r {
            data[i * w..(i + 1) * w].copy_from_slice(&xv[i * c + from..i * c + to]);
        }
        let out = self.out_node(data, vec![r, w], &[x]);
        self.record(Op::SliceCols { x, out, r, c, from, to });
        out
    }

    /// Concatenate matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let r = self.shape(parts[0])[0];
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                assert_eq!(self.shape(*p)[0], r, "concat_cols row mismatch");
                self.shape(*p)[1]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; r * total];
        let mut off = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let pv = &self.nodes[p.0].data;
            for i in 0..r {
                data[i * total + off..i * total + off + w].copy_from_slice(&pv[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let out = self.out_node(data, vec![r, total], parts);
        self.record(Op::ConcatCols { parts: parts.to_vec(), widths, out, r });
        out
    }

    // ── Nonlinearities ──────────────────────────────────────────────

    /// Row-wise softmax with max-subtraction stabilization.
    pub fn row_softmax(&mut self, x: NodeId) -> NodeId {
        let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
        let xv = &self.nodes[x.0].data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            softmax_row(&xv[i * c..(i + 1) * c], &mut data[i * c..(i + 1) * c]);
        }
        let out = self.out_node(data, vec![r, c], &[x]);
        self.record(Op::RowSoftmax { x, out, r, c });
        out
    }

    /// Row-wise layer norm with learned gain and bias (both length c).
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
        assert_eq!(self.numel(gain), c, "layer_norm gain width mismatch");
        assert_eq!(self.numel(bias), c, "layer_norm bias width mismatch");
        let xv = &self.nodes[x.0].data;
        let gv = &self.nodes[gain.0].data;
        let bv = &self.nodes[bias.0].data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let (mean, inv_std) = row_stats(row);
            for j in 0..c {
                data[i * c + j] = (row[j] - mean) * inv_std * gv[j] + bv[j];
            }
        }
        let out = self.out_node(data, vec![r, c], &[x, gain, bias]);
        self.record(Op::LayerNorm { x, gain, bias, out, r, c });
        out
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| gelu(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let out = self.out_node(data, shape, &[x]);
        self.record(Op::Gelu { x, out });
        out
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v.tanh()).collect();
        let shape = self.nodes[x.0].shape.clone();
        let out = self.out_node(data, shape, &[x]);
        self.record(Op::Tanh { x, out });
        out
    }

    /// Gather rows of a [v,d] table: out[i] = table[ids[i]].
    pub fn embed_gather(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let (v, d) = (self.shape(table)[0], self.shape(table)[1]);
        let tv = &self.nodes[table.0].data;
        let mut data = vec![0.0; ids.len() * d];
        for (i, &id) in ids.iter().enumerate() {
            assert!(id < v, "embed_gather id {} out of range {}", id, v);
            data[i * d..(i + 1) * d].copy_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let out = self.out_node(data, vec![ids.len(), d], &[table]);
        self.record(Op::EmbedGather { table, out, ids: ids.to_vec(), d });
        out
    }

    /// Masked cross-entropy: sum over rows t with targets[t] >= 0 of
    /// -log softmax(logits[t])[targets[t]]. Rows with targets[t] < 0 are
    /// ignored entirely.
    pub fn cross_entropy_masked(&mut self, logits: NodeId, targets: &[i64]) -> NodeId {
        let (r, c) = (self.shape(logits)[0], self.shape(logits)[1]);
        assert_eq!(targets.len(), r, "cross_entropy target length mismatch");
        let lv = &self.nodes[logits.0].data;
        let mut loss = 0.0;
        for (t, &target) in targets.iter().enumerate() {
            if target < 0 {
                continue;
            }
            let row = &lv[t * c..(t + 1) * c];
            let tgt = target as usize;
            assert!(tgt < c, "cross_entropy target out of range");
            loss += log_sum_exp(row) - row[tgt];
        }
        let out = self.out_node(vec![loss], vec![], &[logits]);
        self.record(Op::CrossEntropyMasked { logits, out, targets: targets.to_vec(), r, c });
        out
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.nodes[x.0].data.iter().sum();
        let out = self.out_node(vec![s], vec![], &[x]);
        self.record(Op::Sum { x, out });
        out
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Every `requires_grad` leaf receives
    /// exact reverse-mode gradients (zeros when unreachable from the loss);
    /// repeated calls accumulate until [`Tape::zero_grads`].
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.recording {
            return Err(Error::Contract("backward on an inference tape".into()));
        }
        if self.numel(loss) != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..self.ops.len()).rev() {
            self.backward_op(idx, &mut grads);
        }

        for (i, node) in self.nodes.iter_mut().enumerate() {
            if !node.requires_grad {
                continue;
            }
            let g = node.grad.get_or_insert_with(|| vec![0.0; node.data.len()]);
            if let Some(new) = &grads[i] {
                for (acc, v) in g.iter_mut().zip(new) {
                    *acc += v;
                }
            }
        }
        Ok(())
    }

    fn accum(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, contrib: Vec<f64>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(&contrib) {
                    *a += b;
                }
            }
            None => grads[id.0] = Some(contrib),
        }
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Upstream gradient of an op output. Op outputs are unique to their
    /// producing op and every consumer has already run (reverse order), so
    /// the slot can be stolen instead of cloned.
    fn take_grad(&self, grads: &mut [Option<Vec<f64>>], out: NodeId) -> Option<Vec<f64>> {
        grads[out.0].take()
    }

    fn backward_op(&self, idx: usize, grads: &mut [Option<Vec<f64>>]) {
        match &self.ops[idx] {
            Op::Add { a, b, out } => {
                let Some(d) = self.take_grad(grads, *out) else { return };
                if self.needs(*a) && self.needs(*b) {
                    self.accum(grads, *a, d.clone());
                    self.accum(grads, *b, d);
                } else if self.needs(*a) {
                    self.accum(grads, *a, d);
                } else {
                    self.accum(grads, *b, d);
                }
            }
            Op::Sub { a, b, out } => {
                let Some(d) = self.take_grad(grads, *out) else { return };
                if self.needs(*b) {
                    let neg: Vec<f64> = d.iter().map(|v| -v).collect();
                    self.accum(grads, *b, neg);
                }
                self.accum(grads, *a, d);
            }
            Op::Mul { a, b, out } => {
                let Some(d) = self.take_grad(grads, *out) else { return };
                if self.needs(*a) {
                    let da: Vec<f64> =
                        d.iter().zip(&self.nodes[b.0].data).map(|(g, v)| g * v).collect();
                    self.accum(grads, *a, da);
                }
                if self.needs(*b) {
                    let db: Vec<f64> =
                        d.iter().zip(&self.nodes[a.0].data).map(|(g, v)| g * v).collect();
                    self.accum(grads, *b, db);
                }
            }
            Op::Scale { x, c, out } => {
                let Some(mut d) = self.take_grad(grads, *out) else { return };
                for g in &mut d {
                    *g *= c;
                }
                self.accum(grads, *x, d);
            }
            Op::AddRow { x, row, out, r, c } => {
                let Some(d) = self.take_grad(grads, *out) else { return };
                if self.needs(*row) {
                    let mut drow = vec![0.0; *c];
                    for i in 0..*r {
                        for (o, &v) in drow.iter_mut().zip(&d[i * c..(i + 1) * c]) {
                            *o += v;
                        }
                    }
                    self.accum(grads, *row, drow);
                }
                self.accum(grads, *x, d);
            }
            Op::Matmul { a, b, out, m, k, n } => {
                let Some(d) = self.take_grad(grads, *out) else { return };
                let (m, k, n) = (*m, *k, *n);
                if self.nodes[a.0].needs_grad {
                    // dA[i,p] = sum_j dOut[i,j] B[p,j]
                    let bv = &self.nodes[b.0].data;
                    let mut da = Vec::with_capacity(m * k);
                    for i in 0..m {
                        let drow = &d[i * n..(i + 1) * n];
                        da.extend((0..k).map(|p| dot_unrolled(drow, &bv[p * n..(p + 1) * n])));
                    }
                    self.accum(grads, *a, da);
                }
                if self.nodes[b.0].needs_grad {
                    // dB[p,:] = sum_i A[i,p] dOut[i,:]; the i = 0 pass writes,
                    // later passes accumulate.
                    let av = &self.nodes[a.0].data;
                    let mut db = Vec::with_capacity(k * n);
                    let drow0 = &d[..n];
                    for p in 0..k {
                        let x = av[p];
                        db.extend(drow0.iter().map(|&v| x * v));
                    }
                    for i in 1..m {
                        let drow = &d[i * n..(i + 1) * n];
                        let arow = &av[i * k..(i + 1) * k];
                        for (p, &x) in arow.iter().enumerate() {
                            axpy(x, drow, &mut db[p * n..(p + 1) * n]);
                        }
                    }
                    self.accum(grads, *b, db);
                }
            }
            Op::MatmulNT { a, b, out, m, k, n } => {
                let Some(d) = self.take_grad(grads, *out) else { return };
                let (m, k, n) = (*m, *k, *n);
                if self.nodes[a.0].needs_grad {
                    // dA = dOut @ B
                    let bv = &self.nodes[b.0].data;
                    let da = matmul_new(&d, bv, m, n, k);
                    self.accum(grads, *a, da);
                }
                if self.nodes[b.0].needs_grad {
                    // dB[j,p] = sum_i dOut[i,j] A[i,p]
                    let av = &self.nodes[a.0].data;
                    let mut db = vec![0.0; n * k];
                    for i in 0..m {
                        let arow = &av[i * k..(i + 1) * k];
                        let drow = &d[i * n..(i + 1) * n];
                        for (j, &g) in drow.iter().enumerate() {
                            axpy(g, arow, &mut db[j * k..(j + 1) * k]);
                        }
                    }
                    self.accum(grads, *b, db);
                }
            }
            Op::Transpose { x, out, r, c } => {
                let Some(d) = self.take_grad(grads, *out) else { return };
                let mut dx = vec![0.0; r * c];
                for i in 0..*r {
                    for j in 0..*c {
                        dx[i * c + j] = d[j * r + i];
                    }
                }
                self.accum(grads, *x, dx);
            }
            Op::Reshape { x, out } => {
                let Some(d) = self.take_grad(grads, *out) else { return };
                self.accum(grads, *x, d);
            }
            Op::SliceCols { x, out, r, c, from, to } => {
                let Some(d) = self.take_grad(grads, *out) else { return };
                let w = to - from;
                let mut dx = vec![0.0; r * c];
                for i in 0..*r {
                    dx[i * c + from..i * c + to].copy_from_slice(&d[i * w..(i + 1) * w]);
                }
                self.accum(grads, *x, dx);
            }
            Op::ConcatCols { parts, widths, out, r } => {
                let Some(d) = self.take_grad(grads, *out) else { return };
                let total: usize = widths.iter().sum();
                let mut off = 0;
                for (p, &w) in parts.iter().zip(widths) {
                    if self.nodes[p.0].needs_grad {
                        let mut dp = vec![0.0; r * w];
                        for i in 0..*r {
                            dp[i * w..(i + 1) * w]
                                .copy_from_slice(&d[i * total + off..i * total + off + w]);
                        }
                        self.accum(grads, *p, dp);
                    }
                    off += w;
                }
            }
            Op::RowSoftmax { x, out, r, c } => {
                let Some(d) = self.take_grad(grads, *out) else { return };
                let y = &self.nodes[out.0].data;
                let mut dx = vec![0.0; r * c];
                for i in 0..*r {
                    let base = i * c;
                    let mut dot = 0.0;
                    for j in 0..*c {
                        dot += d[base + j] * y[base + j];
                    }
                    for j in 0..*c {
                        dx[base + j] = y[base + j] * (d[base + j] - dot);
                    }
                }
                self.accum(grads, *x, dx);
            }
            Op::LayerNorm { x, gain, bias, out, r, c } => {
                let Some(d) = self.take_grad(grads, *out) else { return };
                let xv = &self.nodes[x.0].data;
                let gv = &self.nodes[gain.0].data;
                let cf = *c as f64;
                let mut dx = vec![0.0; r * c];
                let mut dg = vec![0.0; *c];
                let mut db = vec![0.0; *c];
                for i in 0..*r {
                    let base = i * c;
                    let row = &xv[base..base + c];
                    let (mean, inv_std) = row_stats(row);
                    // xh = normalized input; dy_g = upstream times gain.
                    let mut sum_dyg = 0.0;
                    let mut sum_dyg_xh = 0.0;
                    for j in 0..*c {
                        let xh = (row[j] - mean) * inv_std;
                        let dyg = d[base + j] * gv[j];
                        sum_dyg += dyg;
                        sum_dyg_xh += dyg * xh;
                        dg[j] += d[base + j] * xh;
                        db[j] += d[base + j];
                    }
                    for j in 0..*c {
                        let xh = (row[j] - mean) * inv_std;
                        let dyg = d[base + j] * gv[j];
                        dx[base + j] = inv_std * (dyg - sum_dyg / cf - xh * sum_dyg_xh / cf);
                    }
                }
                self.accum(grads, *x, dx);
                self.accum(grads, *gain, dg);
                self.accum(grads, *bias, db);
            }
            Op::Gelu { x, out } => {
                let Some(d) = self.take_grad(grads, *out) else { return };
                let dx: Vec<f64> = d
                    .iter()
                    .zip(&self.nodes[x.0].data)
                    .map(|(g, &v)| g * gelu_deriv(v))
                    .collect();
                self.accum(grads, *x, dx);
            }
            Op::Tanh { x, out } => {
                let Some(d) = self.take_grad(grads, *out) else { return };
                let y = &self.nodes[out.0].data;
                let dx: Vec<f64> = d.iter().zip(y).map(|(g, &t)| g * (1.0 - t * t)).collect();
                self.accum(grads, *x, dx);
            }
            Op::EmbedGather { table, out, ids, d } => {
                let Some(g) = self.take_grad(grads, *out) else { return };
                if !self.nodes[table.0].needs_grad {
                    return;
                }
                let mut dt = vec![0.0; self.nodes[table.0].data.len()];
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..*d {
                        dt[id * d + j] += g[i * d + j];
                    }
                }
                self.accum(grads, *table, dt);
            }
            Op::CrossEntropyMasked { logits, out, targets, r, c } => {
                let Some(g) = self.take_grad(grads, *out) else { return };
                let s = g[0];
                let lv = &self.nodes[logits.0].data;
                let mut dl = vec![0.0; r * c];
                let mut probs = vec![0.0; *c];
                for (t, &target) in targets.iter().enumerate() {
                    if target < 0 {
                        continue;
                    }
                    let row = &lv[t * c..(t + 1) * c];
                    softmax_row(row, &mut probs);
                    for j in 0..*c {
                        dl[t * c + j] = s * probs[j];
                    }
                    dl[t * c + target as usize] -= s;
                }
                self.accum(grads, *logits, dl);
            }
            Op::Sum { x, out } => {
                let Some(g) = self.take_grad(grads, *out) else { return };
                let dx = vec![g[0]; self.nodes[x.0].data.len()];
                self.accum(grads, *x, dx);
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

// ── Shared numeric kernels ──────────────────────────────────────────

/// out_row += x * b_row, bounds-check free.
#[inline]
fn axpy(x: f64, brow: &[f64], orow: &mut [f64]) {
    for (o, &b) in orow.iter_mut().zip(brow) {
        *o += x * b;
    }
}

/// a @ b for a: [m,k], b: [k,n]. Rows are built by writing the p = 0 term
/// and accumulating the rest, which skips the zero-initialization pass and
/// produces the same result bit for bit.
fn matmul_new(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let x0 = arow[0];
        out.extend(b[..n].iter().map(|&v| x0 * v));
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &x) in arow.iter().enumerate().skip(1) {
            axpy(x, &b[p * n..(p + 1) * n], orow);
        }
    }
    out
}

/// Dot product with four independent accumulators. The fixed regrouping is
/// deterministic and lets the reduction pipeline instead of serializing on
/// one accumulator.
#[inline]
fn dot_unrolled(a: &[f64], b: &[f64]) -> f64 {
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for (x, y) in (&mut ca).zip(&mut cb) {
        s0 += x[0] * y[0];
        s1 += x[1] * y[1];
        s2 += x[2] * y[2];
        s3 += x[3] * y[3];
    }
    let mut rest = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        rest += x * y;
    }
    ((s0 + s1) + (s2 + s3)) + rest
}

/// Max-stabilized softmax of one row.
pub fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Max-stabilized log(sum(exp(row))).
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

fn row_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LN_EPS).sqrt())
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}
