//! Computation record: eagerly evaluated primitives with reverse replay.
//!
//! Every primitive computes its value immediately and appends one entry to
//! the record. [`Tape::backward`] walks the record once in reverse, so each
//! entry's output gradient is complete before its inputs receive
//! contributions. All buffers are row-major `f64`.

use std::sync::atomic::{AtomicU64, Ordering};

use super::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_SERIAL: AtomicU64 = AtomicU64::new(1);

/// Handle to a tensor stored on one specific [`Tape`].
///
/// Using an id with a tape that did not create it is a provenance error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId {
    tape: u64,
    index: usize,
}

/// Elementwise nonlinearity selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
}

struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
}

impl Node {
    fn dims2(&self) -> (usize, usize) {
        debug_assert_eq!(self.shape.len(), 2);
        (self.shape[0], self.shape[1])
    }
}

/// One recorded primitive. Fields are node indices local to the tape.
#[derive(Clone)]
enum Op {
    /// out = a @ b
    MatMul { a: usize, b: usize, out: usize },
    /// out = a @ b^T
    MatMulNT { a: usize, b: usize, out: usize },
    /// out = a + b (equal shapes)
    Add { a: usize, b: usize, out: usize },
    /// out = a + b with b a single row broadcast over a's rows
    AddRow { a: usize, b: usize, out: usize },
    /// out = a ∘ b (elementwise)
    Mul { a: usize, b: usize, out: usize },
    /// out = scale * x + shift (elementwise)
    Affine { x: usize, out: usize, scale: f64 },
    Sigmoid { x: usize, out: usize },
    Tanh { x: usize, out: usize },
    /// out = max(x, 0); derivative 0 at the kink
    Relu { x: usize, out: usize },
    /// per-row softmax
    RowSoftmax { x: usize, out: usize },
    /// per-row division by the Euclidean norm; zero rows map to zero
    RowUnitNorm { x: usize, out: usize, norms: Vec<f64> },
    /// out = x[row, :]
    SelectRow { x: usize, out: usize, row: usize },
    /// out = x[row, col] as a 1x1 scalar
    SelectEntry {
        x: usize,
        out: usize,
        row: usize,
        col: usize,
    },
    /// out = [a | b] column-wise
    ConcatCols { a: usize, b: usize, out: usize },
    /// out = vertical stack of parts
    ConcatRows { parts: Vec<usize>, out: usize },
    /// out = sum of all entries, 1x1
    SumAll { x: usize, out: usize },
    /// out = -log softmax(logits)[target], 1x1; probs saved for the backward
    NllFromLogits {
        logits: usize,
        out: usize,
        target: usize,
        probs: Vec<f64>,
    },
}

/// Ordered record of executed primitives with their input/output tensors.
pub struct Tape {
    serial: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    ops: Vec<Op>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            serial: NEXT_TAPE_SERIAL.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            ops: Vec::new(),
            backward_done: false,
        }
    }

    /// Copy a tensor onto the tape as a leaf, keeping its `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> TensorId {
        self.push(t.shape().to_vec(), t.values().to_vec(), t.requires_grad())
    }

    /// Non-learnable leaf from raw values.
    pub fn constant(&mut self, shape: &[usize], values: Vec<f64>) -> Result<TensorId> {
        let t = Tensor::from_values(shape, values)?;
        Ok(self.leaf(&t))
    }

    /// Non-learnable 1x1 leaf.
    pub fn constant_scalar(&mut self, v: f64) -> TensorId {
        self.push(vec![1, 1], vec![v], false)
    }

    pub fn shape(&self, id: TensorId) -> Result<&[usize]> {
        Ok(&self.nodes[self.check(id)?].shape)
    }

    pub fn value(&self, id: TensorId) -> Result<&[f64]> {
        Ok(&self.nodes[self.check(id)?].values)
    }

    /// Value of a 1x1 tensor.
    pub fn scalar_value(&self, id: TensorId) -> Result<f64> {
        let node = &self.nodes[self.check(id)?];
        if node.values.len() != 1 {
            return Err(Error::Shape(format!(
                "expected a scalar, got shape {:?}",
                node.shape
            )));
        }
        Ok(node.values[0])
    }

    /// Rows and columns of a rank-2 tensor on the tape.
    pub fn dims2(&self, id: TensorId) -> Result<(usize, usize)> {
        let node = &self.nodes[self.check(id)?];
        match node.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Shape(format!(
                "expected a rank-2 tensor, got shape {other:?}"
            ))),
        }
    }

    /// Gradient of `id` after [`Tape::backward`] has run.
    pub fn grad(&self, id: TensorId) -> Result<&[f64]> {
        let idx = self.check(id)?;
        if !self.backward_done {
            return Err(Error::Contract("backward has not been run".into()));
        }
        self.grads[idx]
            .as_deref()
            .ok_or_else(|| Error::Contract("tensor does not participate in differentiation".into()))
    }

    // ── primitives ──────────────────────────────────────────────────────

    /// Matrix product (m x n) @ (n x p).
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (m, n) = self.require_dims2(ai)?;
        let (n2, p) = self.require_dims2(bi)?;
        if n != n2 {
            return Err(Error::Shape(format!(
                "matmul inner dimensions disagree: left {:?}, right {:?}",
                self.nodes[ai].shape, self.nodes[bi].shape
            )));
        }
        let values = mm(&self.nodes[ai].values, &self.nodes[bi].values, m, n, p);
        let rg = self.any_requires(&[ai, bi]);
        let out = self.push_idx(vec![m, p], values, rg);
        self.ops.push(Op::MatMul { a: ai, b: bi, out });
        Ok(self.id(out))
    }

    /// Matrix product with the right factor transposed: (m x n) @ (p x n)^T.
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (m, n) = self.require_dims2(ai)?;
        let (p, n2) = self.require_dims2(bi)?;
        if n != n2 {
            return Err(Error::Shape(format!(
                "matmul_nt column counts disagree: left {:?}, right {:?}",
                self.nodes[ai].shape, self.nodes[bi].shape
            )));
        }
        let values = mm_nt(&self.nodes[ai].values, &self.nodes[bi].values, m, n, p);
        let rg = self.any_requires(&[ai, bi]);
        let out = self.push_idx(vec![m, p], values, rg);
        self.ops.push(Op::MatMulNT { a: ai, b: bi, out });
        Ok(self.id(out))
    }

    /// Elementwise sum of two tensors with identical shapes.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        if self.nodes[ai].shape != self.nodes[bi].shape {
            return Err(Error::Shape(format!(
                "add requires equal shapes: {:?} vs {:?}",
                self.nodes[ai].shape, self.nodes[bi].shape
            )));
        }
        let values: Vec<f64> = self.nodes[ai]
            .values
            .iter()
            .zip(&self.nodes[bi].values)
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.any_requires(&[ai, bi]);
        let shape = self.nodes[ai].shape.clone();
        let out = self.push_idx(shape, values, rg);
        self.ops.push(Op::Add { a: ai, b: bi, out });
        Ok(self.id(out))
    }

    /// Add a single row `b` (1 x d) to every row of `a` (k x d).
    pub fn add_row(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (k, d) = self.require_dims2(ai)?;
        let (br, bd) = self.require_dims2(bi)?;
        if br != 1 || bd != d {
            return Err(Error::Shape(format!(
                "add_row requires a 1x{d} row, got {:?} against {:?}",
                self.nodes[bi].shape, self.nodes[ai].shape
            )));
        }
        let mut values = self.nodes[ai].values.clone();
        for r in 0..k {
            for c in 0..d {
                values[r * d + c] += self.nodes[bi].values[c];
            }
        }
        let rg = self.any_requires(&[ai, bi]);
        let out = self.push_idx(vec![k, d], values, rg);
        self.ops.push(Op::AddRow { a: ai, b: bi, out });
        Ok(self.id(out))
    }

    /// Hadamard product of two tensors with identical shapes.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        if self.nodes[ai].shape != self.nodes[bi].shape {
            return Err(Error::Shape(format!(
                "mul requires equal shapes: {:?} vs {:?}",
                self.nodes[ai].shape, self.nodes[bi].shape
            )));
        }
        let values: Vec<f64> = self.nodes[ai]
            .values
            .iter()
            .zip(&self.nodes[bi].values)
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.any_requires(&[ai, bi]);
        let shape = self.nodes[ai].shape.clone();
        let out = self.push_idx(shape, values, rg);
        self.ops.push(Op::Mul { a: ai, b: bi, out });
        Ok(self.id(out))
    }

    /// Elementwise `scale * x + shift`.
    pub fn affine(&mut self, x: TensorId, scale: f64, shift: f64) -> Result<TensorId> {
        let xi = self.check(x)?;
        let values: Vec<f64> = self.nodes[xi].values.iter().map(|v| scale * v + shift).collect();
        let rg = self.nodes[xi].requires_grad;
        let shape = self.nodes[xi].shape.clone();
        let out = self.push_idx(shape, values, rg);
        self.ops.push(Op::Affine { x: xi, out, scale });
        Ok(self.id(out))
    }

    /// Elementwise sigmoid or tanh.
    pub fn activation(&mut self, x: TensorId, kind: Activation) -> Result<TensorId> {
        match kind {
            Activation::Sigmoid => self.sigmoid(x),
            Activation::Tanh => self.tanh(x),
        }
    }

    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId> {
        let xi = self.check(x)?;
        let values: Vec<f64> = self.nodes[xi].values.iter().map(|&v| sigmoid(v)).collect();
        let rg = self.nodes[xi].requires_grad;
        let shape = self.nodes[xi].shape.clone();
        let out = self.push_idx(shape, values, rg);
        self.ops.push(Op::Sigmoid { x: xi, out });
        Ok(self.id(out))
    }

    pub fn tanh(&mut self, x: TensorId) -> Result<TensorId> {
        let xi = self.check(x)?;
        let values: Vec<f64> = self.nodes[xi].values.iter().map(|v| v.tanh()).collect();
        let rg = self.nodes[xi].requires_grad;
        let shape = self.nodes[xi].shape.clone();
        let out = self.push_idx(shape, values, rg);
        self.ops.push(Op::Tanh { x: xi, out });
        Ok(self.id(out))
    }

    /// Elementwise hinge `max(x, 0)`.
    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        let xi = self.check(x)?;
        let values: Vec<f64> = self.nodes[xi].values.iter().map(|v| v.max(0.0)).collect();
        let rg = self.nodes[xi].requires_grad;
        let shape = self.nodes[xi].shape.clone();
        let out = self.push_idx(shape, values, rg);
        self.ops.push(Op::Relu { x: xi, out });
        Ok(self.id(out))
    }

    /// Per-row softmax of any rank-2 tensor.
    pub fn row_softmax(&mut self, x: TensorId) -> Result<TensorId> {
        let xi = self.check(x)?;
        let (rows, cols) = self.require_dims2(xi)?;
        let mut values = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &self.nodes[xi].values[r * cols..(r + 1) * cols];
            softmax_into(row, &mut values[r * cols..(r + 1) * cols]);
        }
        let rg = self.nodes[xi].requires_grad;
        let out = self.push_idx(vec![rows, cols], values, rg);
        self.ops.push(Op::RowSoftmax { x: xi, out });
        Ok(self.id(out))
    }

    /// Row-stochastic normalization of a square affinity matrix.
    ///
    /// Raw affinities may be negative, so each row goes through a softmax,
    /// which is total and differentiable; every output row sums to one.
    pub fn row_normalize(&mut self, x: TensorId) -> Result<TensorId> {
        let xi = self.check(x)?;
        let (rows, cols) = self.require_dims2(xi)?;
        if rows != cols {
            return Err(Error::Shape(format!(
                "row_normalize requires a square matrix, got {:?}",
                self.nodes[xi].shape
            )));
        }
        self.row_softmax(x)
    }

    /// Scale every row to unit Euclidean norm; all-zero rows stay zero.
    pub fn row_unit_norm(&mut self, x: TensorId) -> Result<TensorId> {
        let xi = self.check(x)?;
        let (rows, cols) = self.require_dims2(xi)?;
        let mut values = vec![0.0; rows * cols];
        let mut norms = vec![0.0; rows];
        for r in 0..rows {
            let row = &self.nodes[xi].values[r * cols..(r + 1) * cols];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms[r] = norm;
            if norm > 0.0 {
                for c in 0..cols {
                    values[r * cols + c] = row[c] / norm;
                }
            }
        }
        let rg = self.nodes[xi].requires_grad;
        let out = self.push_idx(vec![rows, cols], values, rg);
        self.ops.push(Op::RowUnitNorm { x: xi, out, norms });
        Ok(self.id(out))
    }

    /// Copy one row of a k x d tensor as a 1 x d tensor.
    pub fn select_row(&mut self, x: TensorId, row: usize) -> Result<TensorId> {
        let xi = self.check(x)?;
        let (rows, cols) = self.require_dims2(xi)?;
        if row >= rows {
            return Err(Error::Parameter(format!(
                "row {row} out of range for shape {:?}",
                self.nodes[xi].shape
            )));
        }
        let values = self.nodes[xi].values[row * cols..(row + 1) * cols].to_vec();
        let rg = self.nodes[xi].requires_grad;
        let out = self.push_idx(vec![1, cols], values, rg);
        self.ops.push(Op::SelectRow { x: xi, out, row });
        Ok(self.id(out))
    }

    /// Copy one entry of a rank-2 tensor as a 1x1 scalar.
    pub fn select_entry(&mut self, x: TensorId, row: usize, col: usize) -> Result<TensorId> {
        let xi = self.check(x)?;
        let (rows, cols) = self.require_dims2(xi)?;
        if row >= rows || col >= cols {
            return Err(Error::Parameter(format!(
                "entry ({row}, {col}) out of range for shape {:?}",
                self.nodes[xi].shape
            )));
        }
        let values = vec![self.nodes[xi].values[row * cols + col]];
        let rg = self.nodes[xi].requires_grad;
        let out = self.push_idx(vec![1, 1], values, rg);
        self.ops.push(Op::SelectEntry { x: xi, out, row, col });
        Ok(self.id(out))
    }

    /// Concatenate two tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (ka, da) = self.require_dims2(ai)?;
        let (kb, db) = self.require_dims2(bi)?;
        if ka != kb {
            return Err(Error::Shape(format!(
                "concat_cols requires equal row counts: {:?} vs {:?}",
                self.nodes[ai].shape, self.nodes[bi].shape
            )));
        }
        let mut values = Vec::with_capacity(ka * (da + db));
        for r in 0..ka {
            values.extend_from_slice(&self.nodes[ai].values[r * da..(r + 1) * da]);
            values.extend_from_slice(&self.nodes[bi].values[r * db..(r + 1) * db]);
        }
        let rg = self.any_requires(&[ai, bi]);
        let out = self.push_idx(vec![ka, da + db], values, rg);
        self.ops.push(Op::ConcatCols { a: ai, b: bi, out });
        Ok(self.id(out))
    }

    /// Stack tensors with equal column counts along rows.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Parameter("concat_rows needs at least one part".into()));
        }
        let idxs: Vec<usize> = parts
            .iter()
            .map(|&p| self.check(p))
            .collect::<Result<_>>()?;
        let (_, cols) = self.require_dims2(idxs[0])?;
        let mut rows = 0;
        for &i in &idxs {
            let (r, c) = self.require_dims2(i)?;
            if c != cols {
                return Err(Error::Shape(format!(
                    "concat_rows requires equal column counts: {:?} vs {:?}",
                    self.nodes[idxs[0]].shape, self.nodes[i].shape
                )));
            }
            rows += r;
        }
        let mut values = Vec::with_capacity(rows * cols);
        for &i in &idxs {
            values.extend_from_slice(&self.nodes[i].values);
        }
        let rg = self.any_requires(&idxs);
        let out = self.push_idx(vec![rows, cols], values, rg);
        self.ops.push(Op::ConcatRows { parts: idxs, out });
        Ok(self.id(out))
    }

    /// Sum of all entries as a 1x1 scalar.
    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId> {
        let xi = self.check(x)?;
        let values = vec![self.nodes[xi].values.iter().sum()];
        let rg = self.nodes[xi].requires_grad;
        let out = self.push_idx(vec![1, 1], values, rg);
        self.ops.push(Op::SumAll { x: xi, out });
        Ok(self.id(out))
    }

    /// Negative log-probability of `target` under softmax(logits).
    ///
    /// Computed through a max-shifted log-sum-exp so large logits stay finite.
    pub fn nll_from_logits(&mut self, logits: TensorId, target: usize) -> Result<TensorId> {
        let li = self.check(logits)?;
        let (rows, cols) = self.require_dims2(li)?;
        if rows != 1 {
            return Err(Error::Shape(format!(
                "nll_from_logits expects a 1 x V logit row, got {:?}",
                self.nodes[li].shape
            )));
        }
        if target >= cols {
            return Err(Error::Parameter(format!(
                "target id {target} out of range for {cols} logits"
            )));
        }
        let row = &self.nodes[li].values;
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let loss = max + sum.ln() - row[target];
        let probs: Vec<f64> = row.iter().map(|v| (v - max).exp() / sum).collect();
        let rg = self.nodes[li].requires_grad;
        let out = self.push_idx(vec![1, 1], vec![loss], rg);
        self.ops.push(Op::NllFromLogits {
            logits: li,
            out,
            target,
            probs,
        });
        Ok(self.id(out))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse replay from a scalar loss.
    ///
    /// Afterwards every tensor that participates in differentiation holds the
    /// exact reverse-mode derivative of the loss; participating leaves that do
    /// not influence the loss hold zeros. May be called once per record.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        let li = self.check(loss)?;
        if self.backward_done {
            return Err(Error::Contract(
                "backward may be run only once per computation record".into(),
            ));
        }
        if self.nodes[li].values.len() != 1 {
            return Err(Error::Shape(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[li].shape
            )));
        }
        self.backward_done = true;
        for (i, node) in self.nodes.iter().enumerate() {
            self.grads[i] = node
                .requires_grad
                .then(|| vec![0.0; node.values.len()]);
        }
        if !self.nodes[li].requires_grad {
            // Constant loss: every gradient is zero.
            return Ok(());
        }
        self.grads[li].as_mut().expect("allocated above")[0] = 1.0;
        for i in (0..self.ops.len()).rev() {
            let op = self.ops[i].clone();
            self.backward_op(&op);
        }
        Ok(())
    }

    fn backward_op(&mut self, op: &Op) {
        match *op {
            Op::MatMul { a, b, out } => {
                let Some(g) = self.grads[out].clone() else { return };
                let (m, n) = self.nodes[a].dims2();
                let (_, p) = self.nodes[b].dims2();
                if self.wants_grad(a) {
                    let da = mm_nt(&g, &self.nodes[b].values, m, p, n);
                    self.add_grad(a, &da);
                }
                if self.wants_grad(b) {
                    let db = mm_tn(&self.nodes[a].values, &g, m, n, p);
                    self.add_grad(b, &db);
                }
            }
            Op::MatMulNT { a, b, out } => {
                let Some(g) = self.grads[out].clone() else { return };
                let (m, n) = self.nodes[a].dims2();
                let (p, _) = self.nodes[b].dims2();
                if self.wants_grad(a) {
                    let da = mm(&g, &self.nodes[b].values, m, p, n);
                    self.add_grad(a, &da);
                }
                if self.wants_grad(b) {
                    let db = mm_tn(&g, &self.nodes[a].values, m, p, n);
                    self.add_grad(b, &db);
                }
            }
            Op::Add { a, b, out } => {
                let Some(g) = self.grads[out].clone() else { return };
                if self.wants_grad(a) {
                    self.add_grad(a, &g);
                }
                if self.wants_grad(b) {
                    self.add_grad(b, &g);
                }
            }
            Op::AddRow { a, b, out } => {
                let Some(g) = self.grads[out].clone() else { return };
                if self.wants_grad(a) {
                    self.add_grad(a, &g);
                }
                if self.wants_grad(b) {
                    let (k, d) = self.nodes[a].dims2();
                    let mut db = vec![0.0; d];
                    for r in 0..k {
                        for c in 0..d {
                            db[c] += g[r * d + c];
                        }
                    }
                    self.add_grad(b, &db);
                }
            }
            Op::Mul { a, b, out } => {
                let Some(g) = self.grads[out].clone() else { return };
                if self.wants_grad(a) {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[b].values)
                        .map(|(gi, bi)| gi * bi)
                        .collect();
                    self.add_grad(a, &da);
                }
                if self.wants_grad(b) {
                    let db: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a].values)
                        .map(|(gi, ai)| gi * ai)
                        .collect();
                    self.add_grad(b, &db);
                }
            }
            Op::Affine { x, out, scale } => {
                let Some(g) = self.grads[out].clone() else { return };
                if self.wants_grad(x) {
                    let dx: Vec<f64> = g.iter().map(|gi| gi * scale).collect();
                    self.add_grad(x, &dx);
                }
            }
            Op::Sigmoid { x, out } => {
                let Some(g) = self.grads[out].clone() else { return };
                if self.wants_grad(x) {
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[out].values)
                        .map(|(gi, y)| gi * y * (1.0 - y))
                        .collect();
                    self.add_grad(x, &dx);
                }
            }
            Op::Tanh { x, out } => {
                let Some(g) = self.grads[out].clone() else { return };
                if self.wants_grad(x) {
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[out].values)
                        .map(|(gi, y)| gi * (1.0 - y * y))
                        .collect();
                    self.add_grad(x, &dx);
                }
            }
            Op::Relu { x, out } => {
                let Some(g) = self.grads[out].clone() else { return };
                if self.wants_grad(x) {
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[x].values)
                        .map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 })
                        .collect();
                    self.add_grad(x, &dx);
                }
            }
            Op::RowSoftmax { x, out } => {
                let Some(g) = self.grads[out].clone() else { return };
                if self.wants_grad(x) {
                    let (rows, cols) = self.nodes[x].dims2();
                    let y = &self.nodes[out].values;
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let base = r * cols;
                        let dot: f64 = (0..cols).map(|c| g[base + c] * y[base + c]).sum();
                        for c in 0..cols {
                            dx[base + c] = y[base + c] * (g[base + c] - dot);
                        }
                    }
                    self.add_grad(x, &dx);
                }
            }
            Op::RowUnitNorm { x, out, ref norms } => {
                let Some(g) = self.grads[out].clone() else { return };
                if self.wants_grad(x) {
                    let (rows, cols) = self.nodes[x].dims2();
                    let y = &self.nodes[out].values;
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let norm = norms[r];
                        if norm == 0.0 {
                            continue;
                        }
                        let base = r * cols;
                        let dot: f64 = (0..cols).map(|c| g[base + c] * y[base + c]).sum();
                        for c in 0..cols {
                            dx[base + c] = (g[base + c] - dot * y[base + c]) / norm;
                        }
                    }
                    self.add_grad(x, &dx);
                }
            }
            Op::SelectRow { x, out, row } => {
                let Some(g) = self.grads[out].clone() else { return };
                if self.wants_grad(x) {
                    let (_, cols) = self.nodes[x].dims2();
                    let grad = self.grads[x].as_mut().expect("wants_grad checked");
                    for c in 0..cols {
                        grad[row * cols + c] += g[c];
                    }
                }
            }
            Op::SelectEntry { x, out, row, col } => {
                let Some(g) = self.grads[out].clone() else { return };
                if self.wants_grad(x) {
                    let (_, cols) = self.nodes[x].dims2();
                    let grad = self.grads[x].as_mut().expect("wants_grad checked");
                    grad[row * cols + col] += g[0];
                }
            }
            Op::ConcatCols { a, b, out } => {
                let Some(g) = self.grads[out].clone() else { return };
                let (k, da) = self.nodes[a].dims2();
                let (_, db) = self.nodes[b].dims2();
                let w = da + db;
                if self.wants_grad(a) {
                    let mut ga = vec![0.0; k * da];
                    for r in 0..k {
                        ga[r * da..(r + 1) * da].copy_from_slice(&g[r * w..r * w + da]);
                    }
                    self.add_grad(a, &ga);
                }
                if self.wants_grad(b) {
                    let mut gb = vec![0.0; k * db];
                    for r in 0..k {
                        gb[r * db..(r + 1) * db].copy_from_slice(&g[r * w + da..(r + 1) * w]);
                    }
                    self.add_grad(b, &gb);
                }
            }
            Op::ConcatRows { ref parts, out } => {
                let Some(g) = self.grads[out].clone() else { return };
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p].values.len();
                    if self.wants_grad(p) {
                        let slice = g[offset..offset + n].to_vec();
                        self.add_grad(p, &slice);
                    }
                    offset += n;
                }
            }
            Op::SumAll { x, out } => {
                let Some(g) = self.grads[out].clone() else { return };
                if self.wants_grad(x) {
                    let dx = vec![g[0]; self.nodes[x].values.len()];
                    self.add_grad(x, &dx);
                }
            }
            Op::NllFromLogits {
                logits,
                out,
                target,
                ref probs,
            } => {
                let Some(g) = self.grads[out].clone() else { return };
                if self.wants_grad(logits) {
                    let dx: Vec<f64> = probs
                        .iter()
                        .enumerate()
                        .map(|(j, &p)| g[0] * (p - if j == target { 1.0 } else { 0.0 }))
                        .collect();
                    self.add_grad(logits, &dx);
                }
            }
        }
    }

    // ── internals ───────────────────────────────────────────────────────

    fn check(&self, id: TensorId) -> Result<usize> {
        if id.tape != self.serial {
            return Err(Error::Provenance);
        }
        Ok(id.index)
    }

    fn id(&self, index: usize) -> TensorId {
        TensorId {
            tape: self.serial,
            index,
        }
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> TensorId {
        let index = self.push_idx(shape, values, requires_grad);
        self.id(index)
    }

    fn push_idx(&mut self, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> usize {
        self.nodes.push(Node {
            shape,
            values,
            requires_grad,
        });
        self.grads.push(None);
        self.nodes.len() - 1
    }

    fn require_dims2(&self, idx: usize) -> Result<(usize, usize)> {
        match self.nodes[idx].shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Shape(format!(
                "expected a rank-2 tensor, got shape {other:?}"
            ))),
        }
    }

    fn any_requires(&self, idxs: &[usize]) -> bool {
        idxs.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn wants_grad(&self, idx: usize) -> bool {
        self.nodes[idx].requires_grad
    }

    fn add_grad(&mut self, idx: usize, delta: &[f64]) {
        let grad = self.grads[idx].as_mut().expect("grad allocated for participating node");
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }
}

/// Numerically guarded logistic function: branch on the sign so the
/// exponential argument is never positive.
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// (m x n) @ (n x p)
fn mm(a: &[f64], b: &[f64], m: usize, n: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        for k in 0..n {
            let aik = a[i * n + k];
            for j in 0..p {
                out[i * p + j] += aik * b[k * p + j];
            }
        }
    }
    out
}

/// (m x n) @ (p x n)^T -> m x p
fn mm_nt(a: &[f64], b: &[f64], m: usize, n: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        for j in 0..p {
            let mut acc = 0.0;
            for k in 0..n {
                acc += a[i * n + k] * b[j * n + k];
            }
            out[i * p + j] = acc;
        }
    }
    out
}

/// (m x n)^T @ (m x p) -> n x p
fn mm_tn(a: &[f64], b: &[f64], m: usize, n: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * p];
    for k in 0..m {
        for i in 0..n {
            let aki = a[k * n + i];
            for j in 0..p {
                out[i * p + j] += aki * b[k * p + j];
            }
        }
    }
    out
}
