//! Reverse-mode differentiation over a flat tape.
//!
//! Nodes are appended in construction order and evaluated eagerly; the
//! backward sweep walks them in reverse, accumulating gradients only along
//! paths that can reach a parameter leaf. Sparse and large dense
//! propagation matrices enter products as shared constants (`Arc`), not as
//! nodes, so they are never copied per epoch and never receive gradients.
//!
//! A built tape can be re-run: overwrite a leaf with [`Tape::set_leaf`] and
//! call [`Tape::forward`]. Dropout draws its keep pattern once, at
//! construction, so re-running is deterministic.

use std::sync::Arc;

use super::dense::{matmul, matmul_nt, matmul_tn, DenseMatrix};
use super::optim::{ParamId, ParamStore};
use super::rng::Rng;
use super::sparse::SparseMatrix;
use super::TensorError;

/// Probabilities below this floor are clamped before `ln`.
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf {
        param: Option<ParamId>,
    },
    Matmul(NodeId, NodeId),
    /// Constant sparse left operand; gradient flows to the right only.
    SpmmLeft(Arc<SparseMatrix>, NodeId),
    /// Constant dense left operand; gradient flows to the right only.
    DenseLeft(Arc<DenseMatrix>, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    RowSoftmax(NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    /// Elementwise product with a fixed 0-or-1/(1-p) scale pattern.
    Dropout(NodeId, DenseMatrix),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Adds a 1-row bias node to every row of the input.
    AddRowBroadcast(NodeId, NodeId),
    Scale(NodeId, f64),
    GatherRows(NodeId, Vec<usize>),
    /// Picks scalar entries into an m-by-1 column.
    PickEntries(NodeId, Vec<(usize, usize)>),
    /// ln(max(x, LOG_FLOOR)) elementwise.
    LnClamped(NodeId),
    /// Euclidean norm of each row into an n-by-1 column; gradient 0 at 0.
    L2NormRows(NodeId),
    SumAll(NodeId),
    /// Fixed-weight full contraction to a scalar.
    WeightedSum(NodeId, Arc<DenseMatrix>),
    /// num / den with den a 1x1 node.
    ScalarDiv(NodeId, NodeId),
}

struct Node {
    op: Op,
    value: DenseMatrix,
    grad: Option<DenseMatrix>,
    requires_grad: bool,
}

/// Flat computation tape; see module docs.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a node.
    pub fn value(&self, id: NodeId) -> &DenseMatrix {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward target with respect to this node;
    /// `None` when no gradient reached it (or backward has not run).
    pub fn grad(&self, id: NodeId) -> Option<&DenseMatrix> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Constant leaf: participates in values, never in gradients.
    pub fn constant(&mut self, value: DenseMatrix) -> NodeId {
        self.push(Op::Leaf { param: None }, value, false)
    }

    /// Leaf that tracks gradients without being a stored parameter
    /// (mask logits are optimized through this).
    pub fn variable(&mut self, value: DenseMatrix) -> NodeId {
        self.push(Op::Leaf { param: None }, value, true)
    }

    /// Leaf snapshotting a parameter's current value. After backward,
    /// [`Tape::scatter_param_grads`] adds the leaf gradient into the store.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        let value = store.get(id).value.clone();
        self.push(Op::Leaf { param: Some(id) }, value, true)
    }

    /// Overwrites a leaf value (the node must be a leaf). Call
    /// [`Tape::forward`] afterwards to refresh downstream values.
    pub fn set_leaf(&mut self, id: NodeId, value: DenseMatrix) {
        assert!(
            matches!(self.nodes[id.0].op, Op::Leaf { .. }),
            "set_leaf on non-leaf node"
        );
        assert_eq!(
            self.nodes[id.0].value.shape(),
            value.shape(),
            "set_leaf must preserve shape"
        );
        self.nodes[id.0].value = value;
    }

    // ---- op constructors -------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let value = matmul(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Matmul(a, b), value, req))
    }

    pub fn spmm(&mut self, s: Arc<SparseMatrix>, b: NodeId) -> Result<NodeId, TensorError> {
        let value = s.spmm(&self.nodes[b.0].value)?;
        let req = self.requires(b);
        Ok(self.push(Op::SpmmLeft(s, b), value, req))
    }

    /// Constant dense matrix times a node (dense propagation operators,
    /// fixed mixing weights).
    pub fn dense_left(&mut self, c: Arc<DenseMatrix>, b: NodeId) -> Result<NodeId, TensorError> {
        let value = matmul(&c, &self.nodes[b.0].value)?;
        let req = self.requires(b);
        Ok(self.push(Op::DenseLeft(c, b), value, req))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.0].value.map(|v| if v > 0.0 { v } else { 0.0 });
        let req = self.requires(x);
        self.push(Op::Relu(x), value, req)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.0].value.map(sigmoid_scalar);
        let req = self.requires(x);
        self.push(Op::Sigmoid(x), value, req)
    }

    /// Softmax independently over each row, with the row max subtracted
    /// before exponentiation.
    pub fn row_softmax(&mut self, x: NodeId) -> NodeId {
        let value = row_softmax_values(&self.nodes[x.0].value);
        let req = self.requires(x);
        self.push(Op::RowSoftmax(x), value, req)
    }

    /// Horizontal concatenation; all parts must share a row count.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Invalid {
                op: "concat_cols",
                reason: "no parts".into(),
            });
        }
        let rows = self.nodes[parts[0].0].value.rows();
        let mut cols = 0;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            if v.rows() != rows {
                return Err(TensorError::Invalid {
                    op: "concat_cols",
                    reason: format!("row counts differ: {} vs {}", rows, v.rows()),
                });
            }
            cols += v.cols();
        }
        let mut value = DenseMatrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            for r in 0..rows {
                value.row_mut(r)[off..off + v.cols()].copy_from_slice(v.row(r));
            }
            off += v.cols();
        }
        let req = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value, req))
    }

    /// Vertical concatenation; all parts must share a column count.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Invalid {
                op: "concat_rows",
                reason: "no parts".into(),
            });
        }
        let cols = self.nodes[parts[0].0].value.cols();
        let mut rows = 0;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            if v.cols() != cols {
                return Err(TensorError::Invalid {
                    op: "concat_rows",
                    reason: format!("column counts differ: {} vs {}", cols, v.cols()),
                });
            }
            rows += v.rows();
        }
        let mut values = Vec::with_capacity(rows * cols);
        for &p in parts {
            values.extend_from_slice(self.nodes[p.0].value.values());
        }
        let value = DenseMatrix::from_vec(rows, cols, values)?;
        let req = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(Op::ConcatRows(parts.to_vec()), value, req))
    }

    /// Inverted dropout: keeps entries with probability `1-p`, scaling
    /// survivors by `1/(1-p)` so the expectation is the input. With
    /// `p == 0` or outside training it returns the input node unchanged
    /// and consumes no randomness.
    pub fn dropout(
        &mut self,
        x: NodeId,
        p: f64,
        rng: &mut Rng,
        training: bool,
    ) -> Result<NodeId, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Invalid {
                op: "dropout",
                reason: format!("rate {p} outside [0, 1)"),
            });
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let (rows, cols) = self.nodes[x.0].value.shape();
        let mut scale = DenseMatrix::zeros(rows, cols);
        for v in scale.values_mut() {
            // draw per entry in row-major order
            if rng.next_f64() >= p {
                *v = keep;
            }
        }
        let mut value = self.nodes[x.0].value.clone();
        for (o, s) in value.values_mut().iter_mut().zip(scale.values()) {
            *o *= s;
        }
        let req = self.requires(x);
        Ok(self.push(Op::Dropout(x, scale), value, req))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.elementwise_pair(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.elementwise_pair(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    fn elementwise_pair(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId, TensorError> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        if av.shape() != bv.shape() {
            return Err(TensorError::ShapeMismatch {
                op: name,
                lhs_rows: av.rows(),
                lhs_cols: av.cols(),
                rhs_rows: bv.rows(),
                rhs_cols: bv.cols(),
            });
        }
        let values = av
            .values()
            .iter()
            .zip(bv.values())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = DenseMatrix::from_vec(av.rows(), av.cols(), values)?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(op, value, req))
    }

    /// `x + bias` with `bias` a 1-row node broadcast down the rows.
    pub fn add_row_broadcast(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let xv = &self.nodes[x.0].value;
        let bv = &self.nodes[bias.0].value;
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_broadcast",
                lhs_rows: xv.rows(),
                lhs_cols: xv.cols(),
                rhs_rows: bv.rows(),
                rhs_cols: bv.cols(),
            });
        }
        let mut value = xv.clone();
        let brow = bv.row(0).to_vec();
        for r in 0..value.rows() {
            for (o, b) in value.row_mut(r).iter_mut().zip(&brow) {
                *o += b;
            }
        }
        let req = self.requires(x) || self.requires(bias);
        Ok(self.push(Op::AddRowBroadcast(x, bias), value, req))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let value = self.nodes[x.0].value.map(|v| v * factor);
        let req = self.requires(x);
        self.push(Op::Scale(x, factor), value, req)
    }

    /// Copies the given rows into a new matrix; indices may repeat.
    pub fn gather_rows(&mut self, x: NodeId, indices: &[usize]) -> Result<NodeId, TensorError> {
        let xv = &self.nodes[x.0].value;
        for &i in indices {
            if i >= xv.rows() {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    value: i,
                    rows: xv.rows(),
                    cols: xv.cols(),
                });
            }
        }
        let mut value = DenseMatrix::zeros(indices.len(), xv.cols());
        for (r, &i) in indices.iter().enumerate() {
            value.row_mut(r).copy_from_slice(xv.row(i));
        }
        let req = self.requires(x);
        Ok(self.push(Op::GatherRows(x, indices.to_vec()), value, req))
    }

    /// Picks scalar entries `(row, col)` into an m-by-1 column.
    pub fn pick_entries(
        &mut self,
        x: NodeId,
        coords: &[(usize, usize)],
    ) -> Result<NodeId, TensorError> {
        let xv = &self.nodes[x.0].value;
        for &(r, c) in coords {
            if r >= xv.rows() || c >= xv.cols() {
                return Err(TensorError::IndexOutOfRange {
                    op: "pick_entries",
                    value: r.max(c),
                    rows: xv.rows(),
                    cols: xv.cols(),
                });
            }
        }
        let mut value = DenseMatrix::zeros(coords.len(), 1);
        for (i, &(r, c)) in coords.iter().enumerate() {
            value.set(i, 0, xv.get(r, c));
        }
        let req = self.requires(x);
        Ok(self.push(Op::PickEntries(x, coords.to_vec()), value, req))
    }

    /// Elementwise `ln(max(x, LOG_FLOOR))`.
    pub fn ln_clamped(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.0].value.map(|v| v.max(LOG_FLOOR).ln());
        let req = self.requires(x);
        self.push(Op::LnClamped(x), value, req)
    }

    /// Euclidean norm of each row, as an n-by-1 column.
    pub fn l2_norm_rows(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let mut value = DenseMatrix::zeros(xv.rows(), 1);
        for r in 0..xv.rows() {
            let norm = xv.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            value.set(r, 0, norm);
        }
        let req = self.requires(x);
        self.push(Op::L2NormRows(x), value, req)
    }

    /// Sum of all entries, as a 1x1 node.
    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let total: f64 = self.nodes[x.0].value.values().iter().sum();
        let value = DenseMatrix::from_vec(1, 1, vec![total]).expect("1x1");
        let req = self.requires(x);
        self.push(Op::SumAll(x), value, req)
    }

    /// Fixed-weight contraction `sum(w .* x)` to a 1x1 node.
    pub fn weighted_sum(
        &mut self,
        x: NodeId,
        weights: Arc<DenseMatrix>,
    ) -> Result<NodeId, TensorError> {
        let xv = &self.nodes[x.0].value;
        if weights.shape() != xv.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "weighted_sum",
                lhs_rows: weights.rows(),
                lhs_cols: weights.cols(),
                rhs_rows: xv.rows(),
                rhs_cols: xv.cols(),
            });
        }
        let total: f64 = xv
            .values()
            .iter()
            .zip(weights.values())
            .map(|(a, w)| a * w)
            .sum();
        let value = DenseMatrix::from_vec(1, 1, vec![total]).expect("1x1");
        let req = self.requires(x);
        Ok(self.push(Op::WeightedSum(x, weights), value, req))
    }

    /// `num / den` with `den` a 1x1 node.
    pub fn scalar_div(&mut self, num: NodeId, den: NodeId) -> Result<NodeId, TensorError> {
        let dv = &self.nodes[den.0].value;
        if dv.shape() != (1, 1) {
            return Err(TensorError::Invalid {
                op: "scalar_div",
                reason: format!("denominator must be 1x1, got {}x{}", dv.rows(), dv.cols()),
            });
        }
        let d = dv.get(0, 0);
        let value = self.nodes[num.0].value.map(|v| v / d);
        let req = self.requires(num) || self.requires(den);
        Ok(self.push(Op::ScalarDiv(num, den), value, req))
    }

    // ---- execution -------------------------------------------------------

    /// Recomputes every non-leaf value in tape order. Leaves keep their
    /// current values; dropout reuses its stored pattern.
    pub fn forward(&mut self) {
        for i in 0..self.nodes.len() {
            if let Some(value) = self.eval(i) {
                self.nodes[i].value = value;
            }
        }
    }

    /// Reverse sweep from `loss`, which must be 1x1. Node gradients are
    /// reset first; the sweep visits nodes in reverse construction order.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        if self.nodes[loss.0].value.shape() != (1, 1) {
            return Err(TensorError::Invalid {
                op: "backward",
                reason: "loss node must be 1x1".into(),
            });
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(()); // loss independent of any tracked leaf
        }
        self.nodes[loss.0].grad = Some(DenseMatrix::filled(1, 1, 1.0));
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            self.propagate(i)?;
        }
        Ok(())
    }

    /// Adds each parameter leaf's gradient into the store. Gradients
    /// accumulate; callers zero the store between optimizer steps.
    pub fn scatter_param_grads(&self, store: &mut ParamStore) {
        for node in &self.nodes {
            if let Op::Leaf { param: Some(pid) } = node.op {
                if let Some(g) = &node.grad {
                    store.get_mut(pid).grad.add_assign(g);
                }
            }
        }
    }

    /// Backward plus gradient scatter in one call.
    pub fn backward_params(
        &mut self,
        loss: NodeId,
        store: &mut ParamStore,
    ) -> Result<(), TensorError> {
        self.backward(loss)?;
        self.scatter_param_grads(store);
        Ok(())
    }

    // ---- internals ---------------------------------------------------

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op: Op, value: DenseMatrix, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            grad: None,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Recomputed value for node `i`, or `None` for leaves.
    fn eval(&self, i: usize) -> Option<DenseMatrix> {
        let v = |id: NodeId| &self.nodes[id.0].value;
        let out = match &self.nodes[i].op {
            Op::Leaf { .. } => return None,
            Op::Matmul(a, b) => matmul(v(*a), v(*b)).expect("shape fixed at build"),
            Op::SpmmLeft(s, b) => s.spmm(v(*b)).expect("shape fixed at build"),
            Op::DenseLeft(c, b) => matmul(c, v(*b)).expect("shape fixed at build"),
            Op::Relu(x) => v(*x).map(|a| if a > 0.0 { a } else { 0.0 }),
            Op::Sigmoid(x) => v(*x).map(sigmoid_scalar),
            Op::RowSoftmax(x) => row_softmax_values(v(*x)),
            Op::ConcatCols(parts) => {
                let rows = v(parts[0]).rows();
                let cols = parts.iter().map(|&p| v(p).cols()).sum();
                let mut out = DenseMatrix::zeros(rows, cols);
                let mut off = 0;
                for &p in parts {
                    let pv = v(p);
                    for r in 0..rows {
                        out.row_mut(r)[off..off + pv.cols()].copy_from_slice(pv.row(r));
                    }
                    off += pv.cols();
                }
                out
            }
            Op::ConcatRows(parts) => {
                let cols = v(parts[0]).cols();
                let rows = parts.iter().map(|&p| v(p).rows()).sum();
                let mut values = Vec::with_capacity(rows * cols);
                for &p in parts {
                    values.extend_from_slice(v(p).values());
                }
                DenseMatrix::from_vec(rows, cols, values).expect("shape fixed at build")
            }
            Op::Dropout(x, scale) => {
                let mut out = v(*x).clone();
                for (o, s) in out.values_mut().iter_mut().zip(scale.values()) {
                    *o *= s;
                }
                out
            }
            Op::Add(a, b) => {
                let mut out = v(*a).clone();
                out.add_assign(v(*b));
                out
            }
            Op::Sub(a, b) => {
                let mut out = v(*a).clone();
                for (o, bv) in out.values_mut().iter_mut().zip(v(*b).values()) {
                    *o -= bv;
                }
                out
            }
            Op::AddRowBroadcast(x, bias) => {
                let mut out = v(*x).clone();
                let brow = v(*bias).row(0).to_vec();
                for r in 0..out.rows() {
                    for (o, b) in out.row_mut(r).iter_mut().zip(&brow) {
                        *o += b;
                    }
                }
                out
            }
            Op::Scale(x, f) => v(*x).map(|a| a * f),
            Op::GatherRows(x, indices) => {
                let xv = v(*x);
                let mut out = DenseMatrix::zeros(indices.len(), xv.cols());
                for (r, &idx) in indices.iter().enumerate() {
                    out.row_mut(r).copy_from_slice(xv.row(idx));
                }
                out
            }
            Op::PickEntries(x, coords) => {
                let xv = v(*x);
                let mut out = DenseMatrix::zeros(coords.len(), 1);
                for (i, &(r, c)) in coords.iter().enumerate() {
                    out.set(i, 0, xv.get(r, c));
                }
                out
            }
            Op::LnClamped(x) => v(*x).map(|a| a.max(LOG_FLOOR).ln()),
            Op::L2NormRows(x) => {
                let xv = v(*x);
                let mut out = DenseMatrix::zeros(xv.rows(), 1);
                for r in 0..xv.rows() {
                    out.set(r, 0, xv.row(r).iter().map(|a| a * a).sum::<f64>().sqrt());
                }
                out
            }
            Op::SumAll(x) => {
                DenseMatrix::from_vec(1, 1, vec![v(*x).values().iter().sum()]).expect("1x1")
            }
            Op::WeightedSum(x, w) => {
                let total = v(*x)
                    .values()
                    .iter()
                    .zip(w.values())
                    .map(|(a, b)| a * b)
                    .sum();
                DenseMatrix::from_vec(1, 1, vec![total]).expect("1x1")
            }
            Op::ScalarDiv(num, den) => {
                let d = v(*den).get(0, 0);
                v(*num).map(|a| a / d)
            }
        };
        Some(out)
    }

    /// Pushes node `i`'s gradient into its inputs.
    fn propagate(&mut self, i: usize) -> Result<(), TensorError> {
        let g = self.nodes[i].grad.take().expect("checked by caller");
        match &self.nodes[i].op {
            Op::Leaf { .. } => {}
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                if self.requires(a) {
                    let da = matmul_nt(&g, &self.nodes[b.0].value)?;
                    self.accumulate(a, da);
                }
                if self.requires(b) {
                    let db = matmul_tn(&self.nodes[a.0].value, &g)?;
                    self.accumulate(b, db);
                }
            }
            Op::SpmmLeft(s, b) => {
                let b = *b;
                if self.requires(b) {
                    let db = s.spmm_transpose(&g)?;
                    self.accumulate(b, db);
                }
            }
            Op::DenseLeft(c, b) => {
                let b = *b;
                if self.requires(b) {
                    let db = matmul_tn(c, &g)?;
                    self.accumulate(b, db);
                }
            }
            Op::Relu(x) => {
                let x = *x;
                if self.requires(x) {
                    let mut dx = g.clone();
                    for (d, &v) in dx.values_mut().iter_mut().zip(self.nodes[x.0].value.values())
                    {
                        // subgradient 0 at the kink
                        if v <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    self.accumulate(x, dx);
                }
            }
            Op::Sigmoid(x) => {
                let x = *x;
                if self.requires(x) {
                    let mut dx = g.clone();
                    for (d, &y) in dx.values_mut().iter_mut().zip(self.nodes[i].value.values()) {
                        *d *= y * (1.0 - y);
                    }
                    self.accumulate(x, dx);
                }
            }
            Op::RowSoftmax(x) => {
                let x = *x;
                if self.requires(x) {
                    let y = &self.nodes[i].value;
                    let mut dx = DenseMatrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (d, (&yv, &gv)) in
                            dx.row_mut(r).iter_mut().zip(yr.iter().zip(gr.iter()))
                        {
                            *d = yv * (gv - dot);
                        }
                    }
                    self.accumulate(x, dx);
                }
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let mut off = 0;
                for p in parts {
                    let cols = self.nodes[p.0].value.cols();
                    if self.requires(p) {
                        let rows = self.nodes[p.0].value.rows();
                        let mut dp = DenseMatrix::zeros(rows, cols);
                        for r in 0..rows {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                        }
                        self.accumulate(p, dp);
                    }
                    off += cols;
                }
            }
            Op::ConcatRows(parts) => {
                let parts = parts.clone();
                let mut off = 0;
                for p in parts {
                    let rows = self.nodes[p.0].value.rows();
                    if self.requires(p) {
                        let cols = self.nodes[p.0].value.cols();
                        let mut dp = DenseMatrix::zeros(rows, cols);
                        for r in 0..rows {
                            dp.row_mut(r).copy_from_slice(g.row(off + r));
                        }
                        self.accumulate(p, dp);
                    }
                    off += rows;
                }
            }
            Op::Dropout(x, scale) => {
                let x = *x;
                if self.requires(x) {
                    let mut dx = g.clone();
                    for (d, s) in dx.values_mut().iter_mut().zip(scale.values()) {
                        *d *= s;
                    }
                    self.accumulate(x, dx);
                }
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                if self.requires(a) {
                    self.accumulate(a, g.clone());
                }
                if self.requires(b) {
                    self.accumulate(b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                if self.requires(a) {
                    self.accumulate(a, g.clone());
                }
                if self.requires(b) {
                    let mut db = g.clone();
                    db.scale_in_place(-1.0);
                    self.accumulate(b, db);
                }
            }
            Op::AddRowBroadcast(x, bias) => {
                let (x, bias) = (*x, *bias);
                if self.requires(x) {
                    self.accumulate(x, g.clone());
                }
                if self.requires(bias) {
                    let mut db = DenseMatrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, &gv) in db.row_mut(0).iter_mut().zip(g.row(r)) {
                            *d += gv;
                        }
                    }
                    self.accumulate(bias, db);
                }
            }
            Op::Scale(x, f) => {
                let (x, f) = (*x, *f);
                if self.requires(x) {
                    let mut dx = g.clone();
                    dx.scale_in_place(f);
                    self.accumulate(x, dx);
                }
            }
            Op::GatherRows(x, indices) => {
                let x = *x;
                let indices = indices.clone();
                if self.requires(x) {
                    let (rows, cols) = self.nodes[x.0].value.shape();
                    let mut dx = DenseMatrix::zeros(rows, cols);
                    for (r, &idx) in indices.iter().enumerate() {
                        for (d, &gv) in dx.row_mut(idx).iter_mut().zip(g.row(r)) {
                            *d += gv;
                        }
                    }
                    self.accumulate(x, dx);
                }
            }
            Op::PickEntries(x, coords) => {
                let x = *x;
                let coords = coords.clone();
                if self.requires(x) {
                    let (rows, cols) = self.nodes[x.0].value.shape();
                    let mut dx = DenseMatrix::zeros(rows, cols);
                    for (i, &(r, c)) in coords.iter().enumerate() {
                        let cur = dx.get(r, c);
                        dx.set(r, c, cur + g.get(i, 0));
                    }
                    self.accumulate(x, dx);
                }
            }
            Op::LnClamped(x) => {
                let x = *x;
                if self.requires(x) {
                    let mut dx = g.clone();
                    for (d, &v) in dx.values_mut().iter_mut().zip(self.nodes[x.0].value.values())
                    {
                        // clamped region is flat
                        *d = if v > LOG_FLOOR { *d / v } else { 0.0 };
                    }
                    self.accumulate(x, dx);
                }
            }
            Op::L2NormRows(x) => {
                let x = *x;
                if self.requires(x) {
                    let xv = &self.nodes[x.0].value;
                    let norms = &self.nodes[i].value;
                    let mut dx = DenseMatrix::zeros(xv.rows(), xv.cols());
                    for r in 0..xv.rows() {
                        let n = norms.get(r, 0);
                        if n > 0.0 {
                            let gr = g.get(r, 0);
                            for (d, &v) in dx.row_mut(r).iter_mut().zip(xv.row(r)) {
                                *d = gr * v / n;
                            }
                        }
                        // norm 0: gradient pinned to 0
                    }
                    self.accumulate(x, dx);
                }
            }
            Op::SumAll(x) => {
                let x = *x;
                if self.requires(x) {
                    let (rows, cols) = self.nodes[x.0].value.shape();
                    let dx = DenseMatrix::filled(rows, cols, g.get(0, 0));
                    self.accumulate(x, dx);
                }
            }
            Op::WeightedSum(x, w) => {
                let x = *x;
                let w = w.clone();
                if self.requires(x) {
                    let gv = g.get(0, 0);
                    let dx = w.map(|wv| wv * gv);
                    self.accumulate(x, dx);
                }
            }
            Op::ScalarDiv(num, den) => {
                let (num, den) = (*num, *den);
                let d = self.nodes[den.0].value.get(0, 0);
                if self.requires(num) {
                    let mut dn = g.clone();
                    dn.scale_in_place(1.0 / d);
                    self.accumulate(num, dn);
                }
                if self.requires(den) {
                    let nv = &self.nodes[num.0].value;
                    let dot: f64 = g
                        .values()
                        .iter()
                        .zip(nv.values())
                        .map(|(a, b)| a * b)
                        .sum();
                    let dd = DenseMatrix::filled(1, 1, -dot / (d * d));
                    self.accumulate(den, dd);
                }
            }
        }
        self.nodes[i].grad = Some(g);
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, delta: DenseMatrix) {
        match &mut self.nodes[id.0].grad {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row softmax on plain values (shared by the tape and inference paths).
pub fn row_softmax_values(x: &DenseMatrix) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let row = x.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let orow = out.row_mut(r);
        let mut total = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            total += *o;
        }
        for o in orow.iter_mut() {
            *o /= total;
        }
    }
    out
}
