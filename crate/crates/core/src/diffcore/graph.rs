//! Append-only computation record with reverse-mode differentiation.
//!
//! Every op evaluates eagerly and stores its output. Nodes only reference
//! earlier nodes, so the append order is a topological order and `backward`
//! is a single reverse sweep.

use super::matrix::{gemm, GemmOperand};
use super::{DiffError, Matrix};

/// Handle to a node inside one [`ValueGraph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MulCol(NodeId, NodeId),
    ScalarMul(NodeId, f64),
    AddScalar(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Square(NodeId),
    RowSoftmax(NodeId),
    L2NormalizeRows(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    RowSum(NodeId),
    ConcatCols(Vec<NodeId>),
    Transpose(NodeId),
    GatherRows(NodeId, Vec<usize>),
    SegmentSoftmax(NodeId, Vec<usize>),
    SegmentSum(NodeId, Vec<usize>),
    StopGradient,
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | AddRow(a, b) | Sub(a, b) | Mul(a, b) | MulCol(a, b) => {
                vec![*a, *b]
            }
            ScalarMul(a, _) | AddScalar(a) | Tanh(a) | Relu(a) | Exp(a) | Log(a)
            | Square(a) | RowSoftmax(a) | L2NormalizeRows(a) | Sum(a) | Mean(a)
            | RowSum(a) | Transpose(a) | GatherRows(a, _) | SegmentSoftmax(a, _)
            | SegmentSum(a, _) => vec![*a],
            ConcatCols(parts) => parts.clone(),
            // no gradient flows through
            StopGradient => vec![],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Matrix,
    trainable: bool,
    /// True when some trainable leaf reaches this node through differentiable edges.
    needs_grad: bool,
}

/// Squared-norm guard added under the square root in `l2_normalize_rows`.
pub const NORMALIZE_EPS: f64 = 1e-12;

/// Gradients of a scalar loss with respect to every trainable leaf.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<(NodeId, Matrix)>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads
            .iter()
            .find(|(n, _)| *n == id)
            .map(|(_, g)| g)
    }

    /// Gradients in the order of `ids`; panics if an id is not a trainable leaf.
    pub fn collect(&self, ids: &[NodeId]) -> Vec<Matrix> {
        ids.iter()
            .map(|id| {
                self.get(*id)
                    .unwrap_or_else(|| panic!("node {} is not a trainable leaf", id.0))
                    .clone()
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// The differentiable computation record.
#[derive(Clone, Debug, Default)]
pub struct ValueGraph {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &Matrix, b: &Matrix) -> DiffError {
    DiffError::ShapeMismatch {
        op,
        left: a.shape(),
        right: b.shape(),
    }
}

fn check_segments(op: &'static str, rows: usize, offsets: &[usize]) -> Result<(), DiffError> {
    let ok = offsets.len() >= 2
        && offsets[0] == 0
        && *offsets.last().unwrap() == rows
        && offsets.windows(2).all(|w| w[0] < w[1]);
    if ok {
        Ok(())
    } else {
        Err(DiffError::Domain {
            op,
            detail: format!("invalid segment offsets {offsets:?} for {rows} rows"),
        })
    }
}

impl ValueGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Matrix) -> Result<NodeId, DiffError> {
        if !value.all_finite() {
            return Err(DiffError::NonFinite { op: op_name(&op) });
        }
        let needs_grad = op.inputs().iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            op,
            value,
            trainable: false,
            needs_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            trainable: false,
            needs_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Trainable leaf; `backward` reports a gradient for it.
    pub fn param(&mut self, value: Matrix) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            trainable: true,
            needs_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(shape_err("matmul", va, vb));
        }
        let out = va.matmul(vb)?;
        self.push(Op::MatMul(a, b), out)
    }

    fn zip(
        &mut self,
        op: Op,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId, DiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(name, va, vb));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Matrix::new(va.rows(), va.cols(), data)?;
        self.push(op, out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.zip(Op::Add(a, b), "add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.zip(Op::Sub(a, b), "sub", a, b, |x, y| x - y)
    }

    pub fn elementwise_mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.zip(Op::Mul(a, b), "elementwise_mul", a, b, |x, y| x * y)
    }

    /// Adds a 1×n row to every row of an m×n matrix (bias broadcast).
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId, DiffError> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return Err(shape_err("add_row", va, vr));
        }
        let mut out = va.clone();
        let cols = out.cols();
        for chunk in out.data_mut().chunks_mut(cols.max(1)) {
            for (x, b) in chunk.iter_mut().zip(vr.data()) {
                *x += b;
            }
        }
        self.push(Op::AddRow(a, row), out)
    }

    /// Scales row i of an m×n matrix by entry i of an m×1 column.
    pub fn mul_col(&mut self, a: NodeId, col: NodeId) -> Result<NodeId, DiffError> {
        let (va, vc) = (self.value(a), self.value(col));
        if vc.cols() != 1 || vc.rows() != va.rows() {
            return Err(shape_err("mul_col", va, vc));
        }
        let mut out = va.clone();
        for r in 0..out.rows() {
            let w = vc.data()[r];
            out.row_mut(r).iter_mut().for_each(|x| *x *= w);
        }
        self.push(Op::MulCol(a, col), out)
    }

    pub fn scalar_mul(&mut self, a: NodeId, c: f64) -> Result<NodeId, DiffError> {
        let out = self.value(a).map(|x| x * c);
        self.push(Op::ScalarMul(a, c), out)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId, DiffError> {
        let out = self.value(a).map(|x| x + c);
        self.push(Op::AddScalar(a), out)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let out = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), out)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), out)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let out = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), out)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let va = self.value(a);
        if let Some(bad) = va.data().iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(DiffError::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        let out = va.map(f64::ln);
        self.push(Op::Log(a), out)
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let out = self.value(a).map(|x| x * x);
        self.push(Op::Square(a), out)
    }

    pub fn row_softmax(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        self.push(Op::RowSoftmax(a), out)
    }

    pub fn l2_normalize_rows(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let sq: f64 = row.iter().map(|x| x * x).sum();
            if sq == 0.0 {
                return Err(DiffError::Domain {
                    op: "l2_normalize_rows",
                    detail: format!("row {r} has zero norm"),
                });
            }
            let n = (sq + NORMALIZE_EPS).sqrt();
            row.iter_mut().for_each(|x| *x /= n);
        }
        self.push(Op::L2NormalizeRows(a), out)
    }

    /// Sum of all entries as a 1×1 node.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Matrix::scalar(s))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let va = self.value(a);
        if va.is_empty() {
            return Err(DiffError::Domain {
                op: "mean",
                detail: "empty input".into(),
            });
        }
        let s = va.data().iter().sum::<f64>() / va.len() as f64;
        self.push(Op::Mean(a), Matrix::scalar(s))
    }

    /// Per-row sums, m×n → m×1.
    pub fn row_sum(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let va = self.value(a);
        let data = (0..va.rows()).map(|r| va.row(r).iter().sum()).collect();
        let out = Matrix::new(va.rows(), 1, data)?;
        self.push(Op::RowSum(a), out)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, DiffError> {
        let first = parts.first().ok_or(DiffError::Domain {
            op: "concat_cols",
            detail: "no inputs".into(),
        })?;
        let rows = self.value(*first).rows();
        for p in parts {
            if self.value(*p).rows() != rows {
                return Err(shape_err("concat_cols", self.value(*first), self.value(*p)));
            }
        }
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let v = self.value(*p);
            for r in 0..rows {
                out.row_mut(r)[offset..offset + v.cols()].copy_from_slice(v.row(r));
            }
            offset += v.cols();
        }
        self.push(Op::ConcatCols(parts.to_vec()), out)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let out = self.value(a).transpose();
        self.push(Op::Transpose(a), out)
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId, DiffError> {
        let va = self.value(a);
        let mut out = Matrix::zeros(indices.len(), va.cols());
        for (i, &src) in indices.iter().enumerate() {
            if src >= va.rows() {
                return Err(DiffError::Domain {
                    op: "gather_rows",
                    detail: format!("row {src} out of range for {} rows", va.rows()),
                });
            }
            out.row_mut(i).copy_from_slice(va.row(src));
        }
        self.push(Op::GatherRows(a, indices.to_vec()), out)
    }

    /// Softmax of an m×1 column within each contiguous segment.
    ///
    /// `offsets` are segment boundaries: `[0, o1, ..., m]`, strictly increasing.
    pub fn segment_softmax(&mut self, a: NodeId, offsets: &[usize]) -> Result<NodeId, DiffError> {
        let va = self.value(a);
        if va.cols() != 1 {
            return Err(DiffError::Domain {
                op: "segment_softmax",
                detail: format!("expected a column, got {:?}", va.shape()),
            });
        }
        check_segments("segment_softmax", va.rows(), offsets)?;
        let mut out = va.clone();
        for w in offsets.windows(2) {
            softmax_in_place(&mut out.data_mut()[w[0]..w[1]]);
        }
        self.push(Op::SegmentSoftmax(a, offsets.to_vec()), out)
    }

    /// Sums rows within each contiguous segment, m×n → k×n.
    pub fn segment_sum(&mut self, a: NodeId, offsets: &[usize]) -> Result<NodeId, DiffError> {
        let va = self.value(a);
        check_segments("segment_sum", va.rows(), offsets)?;
        let k = offsets.len() - 1;
        let mut out = Matrix::zeros(k, va.cols());
        for (s, w) in offsets.windows(2).enumerate() {
            let dst = out.row_mut(s);
            for r in w[0]..w[1] {
                for (d, x) in dst.iter_mut().zip(va.row(r)) {
                    *d += x;
                }
            }
        }
        self.push(Op::SegmentSum(a, offsets.to_vec()), out)
    }

    /// Same value; contributes no gradient to its input.
    pub fn stop_gradient(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let out = self.value(a).clone();
        self.push(Op::StopGradient, out)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, DiffError> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(DiffError::NonScalarLoss {
                rows: lv.rows(),
                cols: lv.cols(),
            });
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut adj);
        }

        let grads = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.trainable)
            .map(|(i, n)| {
                let g = adj
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Matrix::zeros(n.value.rows(), n.value.cols()));
                (NodeId(i), g)
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, adj: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut adj[id.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, out: &Matrix, g: &Matrix, adj: &mut [Option<Matrix>]) {
        use Op::*;
        let needs = |id: &NodeId| self.nodes[id.0].needs_grad;
        match op {
            Leaf | StopGradient => {}
            MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if needs(a) {
                    // dA = G · Bᵀ
                    let mut da = Matrix::zeros(m, k);
                    gemm(m, n, k, GemmOperand::plain(g), GemmOperand::transposed(vb), da.data_mut());
                    self.accumulate(adj, *a, da);
                }
                if needs(b) {
                    // dB = Aᵀ · G
                    let mut db = Matrix::zeros(k, n);
                    gemm(k, m, n, GemmOperand::transposed(va), GemmOperand::plain(g), db.data_mut());
                    self.accumulate(adj, *b, db);
                }
            }
            Add(a, b) => {
                self.accumulate(adj, *a, g.clone());
                self.accumulate(adj, *b, g.clone());
            }
            Sub(a, b) => {
                self.accumulate(adj, *a, g.clone());
                self.accumulate(adj, *b, g.map(|x| -x));
            }
            Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if needs(a) {
                    self.accumulate(adj, *a, zip_map(g, vb, |x, y| x * y));
                }
                if needs(b) {
                    self.accumulate(adj, *b, zip_map(g, va, |x, y| x * y));
                }
            }
            AddRow(a, row) => {
                self.accumulate(adj, *a, g.clone());
                if needs(row) {
                    let mut dr = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, x) in dr.data_mut().iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    self.accumulate(adj, *row, dr);
                }
            }
            MulCol(a, col) => {
                let (va, vc) = (self.value(*a), self.value(*col));
                if needs(a) {
                    let mut da = g.clone();
                    for r in 0..da.rows() {
                        let w = vc.data()[r];
                        da.row_mut(r).iter_mut().for_each(|x| *x *= w);
                    }
                    self.accumulate(adj, *a, da);
                }
                if needs(col) {
                    let data = (0..va.rows())
                        .map(|r| g.row(r).iter().zip(va.row(r)).map(|(x, y)| x * y).sum())
                        .collect();
                    self.accumulate(adj, *col, Matrix::new(va.rows(), 1, data).unwrap());
                }
            }
            ScalarMul(a, c) => self.accumulate(adj, *a, g.map(|x| x * c)),
            AddScalar(a) => self.accumulate(adj, *a, g.clone()),
            Tanh(a) => self.accumulate(adj, *a, zip_map(g, out, |d, y| d * (1.0 - y * y))),
            Relu(a) => {
                let va = self.value(*a);
                self.accumulate(adj, *a, zip_map(g, va, |d, x| if x > 0.0 { d } else { 0.0 }));
            }
            Exp(a) => self.accumulate(adj, *a, zip_map(g, out, |d, y| d * y)),
            Log(a) => {
                let va = self.value(*a);
                self.accumulate(adj, *a, zip_map(g, va, |d, x| d / x));
            }
            Square(a) => {
                let va = self.value(*a);
                self.accumulate(adj, *a, zip_map(g, va, |d, x| 2.0 * d * x));
            }
            RowSoftmax(a) => {
                let mut da = g.clone();
                for r in 0..out.rows() {
                    softmax_backward(out.row(r), g.row(r), da.row_mut(r));
                }
                self.accumulate(adj, *a, da);
            }
            SegmentSoftmax(a, offsets) => {
                let mut da = g.clone();
                for w in offsets.windows(2) {
                    let (s, e) = (w[0], w[1]);
                    softmax_backward(&out.data()[s..e], &g.data()[s..e], &mut da.data_mut()[s..e]);
                }
                self.accumulate(adj, *a, da);
            }
            L2NormalizeRows(a) => {
                let va = self.value(*a);
                let mut da = Matrix::zeros(va.rows(), va.cols());
                for r in 0..va.rows() {
                    let x = va.row(r);
                    let y = out.row(r);
                    let dy = g.row(r);
                    let n = (x.iter().map(|v| v * v).sum::<f64>() + NORMALIZE_EPS).sqrt();
                    let ydy: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                    for (j, d) in da.row_mut(r).iter_mut().enumerate() {
                        *d = (dy[j] - y[j] * ydy) / n;
                    }
                }
                self.accumulate(adj, *a, da);
            }
            Sum(a) => {
                let va = self.value(*a);
                self.accumulate(adj, *a, Matrix::filled(va.rows(), va.cols(), g.item()));
            }
            Mean(a) => {
                let va = self.value(*a);
                let d = g.item() / va.len() as f64;
                self.accumulate(adj, *a, Matrix::filled(va.rows(), va.cols(), d));
            }
            RowSum(a) => {
                let va = self.value(*a);
                let mut da = Matrix::zeros(va.rows(), va.cols());
                for r in 0..va.rows() {
                    let d = g.data()[r];
                    da.row_mut(r).iter_mut().for_each(|x| *x = d);
                }
                self.accumulate(adj, *a, da);
            }
            ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let cols = self.value(*p).cols();
                    if needs(p) {
                        let mut dp = Matrix::zeros(g.rows(), cols);
                        for r in 0..g.rows() {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        self.accumulate(adj, *p, dp);
                    }
                    offset += cols;
                }
            }
            Transpose(a) => self.accumulate(adj, *a, g.transpose()),
            GatherRows(a, indices) => {
                let va = self.value(*a);
                let mut da = Matrix::zeros(va.rows(), va.cols());
                for (i, &src) in indices.iter().enumerate() {
                    for (d, x) in da.row_mut(src).iter_mut().zip(g.row(i)) {
                        *d += x;
                    }
                }
                self.accumulate(adj, *a, da);
            }
            SegmentSum(a, offsets) => {
                let va = self.value(*a);
                let mut da = Matrix::zeros(va.rows(), va.cols());
                for (s, w) in offsets.windows(2).enumerate() {
                    for r in w[0]..w[1] {
                        da.row_mut(r).copy_from_slice(g.row(s));
                    }
                }
                self.accumulate(adj, *a, da);
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    use Op::*;
    match op {
        Leaf => "leaf",
        MatMul(..) => "matmul",
        Add(..) => "add",
        AddRow(..) => "add_row",
        Sub(..) => "sub",
        Mul(..) => "elementwise_mul",
        MulCol(..) => "mul_col",
        ScalarMul(..) => "scalar_mul",
        AddScalar(..) => "add_scalar",
        Tanh(..) => "tanh",
        Relu(..) => "relu",
        Exp(..) => "exp",
        Log(..) => "log",
        Square(..) => "square",
        RowSoftmax(..) => "row_softmax",
        L2NormalizeRows(..) => "l2_normalize_rows",
        Sum(..) => "sum",
        Mean(..) => "mean",
        RowSum(..) => "row_sum",
        ConcatCols(..) => "concat_cols",
        Transpose(..) => "transpose",
        GatherRows(..) => "gather_rows",
        SegmentSoftmax(..) => "segment_softmax",
        SegmentSum(..) => "segment_sum",
        StopGradient => "stop_gradient",
    }
}

fn zip_map(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Matrix::new(a.rows(), a.cols(), data).unwrap()
}

/// Max-subtracted softmax over a slice.
pub fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in xs.iter_mut() {
        *x /= total;
    }
}

fn softmax_backward(y: &[f64], dy: &[f64], dx: &mut [f64]) {
    let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
    for ((d, &yi), &gi) in dx.iter_mut().zip(y).zip(dy) {
        *d = yi * (gi - dot);
    }
}
