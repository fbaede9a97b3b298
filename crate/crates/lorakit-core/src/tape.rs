//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! A [`Tape`] records primitive operations as they execute; every node
//! caches its forward value. [`Tape::backward`] then walks the record in
//! reverse, accumulating adjoints only along paths that can reach a
//! trainable leaf. Frozen leaves never receive adjoint storage, and whole
//! subgraphs of frozen inputs are skipped — the gradient of a model where
//! most parameters are frozen costs only the trainable slice.
//!
//! The tape is rebuilt for every forward pass; nothing persists between
//! steps.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::CoreError;
use crate::fmath;
use crate::matrix::Matrix;
use crate::Result;

/// Epsilon inside the layer-norm denominator.
pub const LAYERNORM_EPS: f64 = 1e-5;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    /// `A * B^T`
    MatMulNT(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// Adds a `1 x d` row vector to every row of an `n x d` matrix.
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    SoftmaxRows(NodeId),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId },
    /// Rows of `table` selected by index (embedding lookup).
    Gather { table: NodeId, ids: Vec<usize> },
    SliceCols { x: NodeId, start: usize },
    SliceRows { x: NodeId, start: usize },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    /// Copy of `x` with row `rows[i]` replaced by row `i` of `src`.
    OverwriteRows { x: NodeId, src: NodeId, rows: Vec<usize> },
    /// Mean negative log-likelihood of `class` under row-softmax of the
    /// logits, averaged over the listed `(row, class)` pairs.
    MeanNll { logits: NodeId, targets: Vec<(usize, usize)> },
    Sum(NodeId),
}

/// Node values are owned for computed results and borrowed for leaves, so
/// inserting a large parameter matrix never copies it.
enum Stored<'a> {
    Owned(Matrix),
    Borrowed(&'a Matrix),
}

impl<'a> Stored<'a> {
    fn get(&self) -> &Matrix {
        match self {
            Stored::Owned(m) => m,
            Stored::Borrowed(m) => m,
        }
    }
}

struct Node<'a> {
    op: Op,
    value: Stored<'a>,
    needs_grad: bool,
}

/// Recorded forward pass.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
///
/// Only nodes on a path from a trainable leaf to the loss carry an entry;
/// in particular frozen parameters are absent by construction.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Adjoint of `id`, if one was computed.
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Removes and returns the adjoint of `id`.
    pub fn take(&mut self, id: NodeId) -> Option<Matrix> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }

    /// Total number of scalar gradient entries currently stored.
    pub fn scalar_count(&self) -> usize {
        self.grads.iter().flatten().map(|m| m.len()).sum()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Cached forward value of a node.
    pub fn value(&self, id: NodeId) -> &Matrix {
        self.nodes[id.0].value.get()
    }

    /// Inserts a trainable leaf (adjoints will be computed for it).
    pub fn param(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Leaf, Stored::Owned(value), true)
    }

    /// Inserts a trainable leaf by reference.
    pub fn param_ref(&mut self, value: &'a Matrix) -> NodeId {
        self.push(Op::Leaf, Stored::Borrowed(value), true)
    }

    /// Inserts a frozen leaf (no adjoint storage, gradients do not flow
    /// past it).
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Leaf, Stored::Owned(value), false)
    }

    /// Inserts a frozen leaf by reference.
    pub fn constant_ref(&mut self, value: &'a Matrix) -> NodeId {
        self.push(Op::Leaf, Stored::Borrowed(value), false)
    }

    fn push(&mut self, op: Op, value: Stored<'a>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, op: Op, value: Matrix, needs_grad: bool) -> NodeId {
        self.push(op, Stored::Owned(value), needs_grad)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push_owned(Op::MatMul(a, b), value, needs))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul_nt(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push_owned(Op::MatMulNT(a, b), value, needs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push_owned(Op::Add(a, b), value, needs))
    }

    /// Broadcasts a `1 x d` bias row over every row of `x`.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let bv = self.value(bias);
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(CoreError::shape("add_row", xv.shape(), bv.shape()));
        }
        let mut value = xv.clone();
        for i in 0..value.rows() {
            for (o, b) in value.row_mut(i).iter_mut().zip(bv.row(0)) {
                *o += b;
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push_owned(Op::AddRow(x, bias), value, needs))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let value = self.value(x).scale(factor);
        let needs = self.needs(x);
        self.push_owned(Op::Scale(x, factor), value, needs)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v.max(0.0));
        let needs = self.needs(x);
        self.push_owned(Op::Relu(x), value, needs)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let mut value = self.value(x).clone();
        for i in 0..value.rows() {
            softmax_in_place(value.row_mut(i));
        }
        let needs = self.needs(x);
        self.push_owned(Op::SoftmaxRows(x), value, needs)
    }

    /// Row-wise layer normalization with learned scale and shift
    /// (`gamma`, `beta` are `1 x d`).
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let d = xv.cols();
        let gv = self.value(gamma);
        let bv = self.value(beta);
        if gv.shape() != (1, d) || bv.shape() != (1, d) {
            return Err(CoreError::shape("layer_norm", xv.shape(), gv.shape()));
        }
        let mut value = xv.clone();
        for i in 0..value.rows() {
            let row = value.row_mut(i);
            let (mean, rstd) = row_moments(row);
            for j in 0..d {
                row[j] = gv.get(0, j) * (row[j] - mean) * rstd + bv.get(0, j);
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push_owned(Op::LayerNorm { x, gamma, beta }, value, needs))
    }

    /// Embedding lookup: row `i` of the result is `table[ids[i]]`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let tv = self.value(table);
        if ids.is_empty() {
            return Err(CoreError::Contract("gather of zero rows".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= tv.rows()) {
            return Err(CoreError::Contract(format_args_string(
                "gather index out of range",
                bad,
                tv.rows(),
            )));
        }
        let mut value = Matrix::zeros(ids.len(), tv.cols());
        for (i, &id) in ids.iter().enumerate() {
            value.row_mut(i).copy_from_slice(tv.row(id));
        }
        let needs = self.needs(table);
        Ok(self.push_owned(Op::Gather { table, ids: ids.to_vec() }, value, needs))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let value = self.value(x).slice_cols(start, len);
        let needs = self.needs(x);
        self.push_owned(Op::SliceCols { x, start }, value, needs)
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let value = self.value(x).slice_rows(start, len);
        let needs = self.needs(x);
        self.push_owned(Op::SliceRows { x, start }, value, needs)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let values: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::concat_cols(&values);
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push_owned(Op::ConcatCols(parts.to_vec()), value, needs)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let values: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::concat_rows(&values);
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push_owned(Op::ConcatRows(parts.to_vec()), value, needs)
    }

    /// Returns `x` with row `rows[i]` replaced by row `i` of `src`.
    pub fn overwrite_rows(&mut self, x: NodeId, src: NodeId, rows: &[usize]) -> Result<NodeId> {
        let xv = self.value(x);
        let sv = self.value(src);
        if sv.rows() != rows.len() || sv.cols() != xv.cols() {
            return Err(CoreError::shape("overwrite_rows", xv.shape(), sv.shape()));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= xv.rows()) {
            return Err(CoreError::Contract(format_args_string(
                "overwrite row out of range",
                bad,
                xv.rows(),
            )));
        }
        let mut value = xv.clone();
        for (i, &r) in rows.iter().enumerate() {
            value.row_mut(r).copy_from_slice(sv.row(i));
        }
        let needs = self.needs(x) || self.needs(src);
        Ok(self.push_owned(Op::OverwriteRows { x, src, rows: rows.to_vec() }, value, needs))
    }

    /// Mean negative log-likelihood over the listed `(row, class)` pairs,
    /// computed from logits with a stable log-sum-exp.
    pub fn mean_nll(&mut self, logits: NodeId, targets: &[(usize, usize)]) -> Result<NodeId> {
        let lv = self.value(logits);
        if targets.is_empty() {
            return Err(CoreError::Contract("loss over an empty target span".into()));
        }
        for &(row, class) in targets {
            if row >= lv.rows() || class >= lv.cols() {
                return Err(CoreError::Contract(String::from(
                    "loss target outside the logits matrix",
                )));
            }
        }
        let mut total = 0.0;
        for &(row, class) in targets {
            total -= log_softmax_at(lv.row(row), class);
        }
        let value = Matrix::from_vec(1, 1, vec![total / targets.len() as f64])?;
        let needs = self.needs(logits);
        Ok(self.push_owned(Op::MeanNll { logits, targets: targets.to_vec() }, value, needs))
    }

    /// Sum of all entries, as a `1 x 1` node.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total: f64 = self.value(x).data().iter().sum();
        let value = Matrix::from_vec(1, 1, vec![total]).expect("1x1");
        let needs = self.needs(x);
        self.push_owned(Op::Sum(x), value, needs)
    }

    /// Runs reverse accumulation from a scalar loss node.
    ///
    /// Adjoints are stored for every node that both influences the loss
    /// and depends on a trainable leaf; everything else (frozen leaves
    /// included) is skipped.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.shape() != (1, 1) {
            return Err(CoreError::Contract(String::from(
                "backward requires a scalar (1x1) loss node",
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].needs_grad {
            // Loss does not depend on any trainable leaf.
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Matrix::from_vec(1, 1, vec![1.0])?);

        for idx in (0..=loss.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            // Leaves keep their adjoint; interior adjoints are consumed.
            let upstream = match self.nodes[idx].op {
                Op::Leaf => continue,
                _ => grads[idx].take().expect("adjoint present"),
            };
            self.propagate(idx, &upstream, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn propagate(
        &self,
        idx: usize,
        up: &Matrix,
        grads: &mut Vec<Option<Matrix>>,
    ) -> Result<()> {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    let da = up.matmul_nt(self.value(*b))?;
                    accumulate(grads, *a, da)?;
                }
                if self.needs(*b) {
                    let db = self.value(*a).matmul_tn(up)?;
                    accumulate(grads, *b, db)?;
                }
            }
            Op::MatMulNT(a, b) => {
                if self.needs(*a) {
                    let da = up.matmul(self.value(*b))?;
                    accumulate(grads, *a, da)?;
                }
                if self.needs(*b) {
                    let db = up.matmul_tn(self.value(*a))?;
                    accumulate(grads, *b, db)?;
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, up.clone())?;
                }
                if self.needs(*b) {
                    accumulate(grads, *b, up.clone())?;
                }
            }
            Op::AddRow(x, bias) => {
                if self.needs(*x) {
                    accumulate(grads, *x, up.clone())?;
                }
                if self.needs(*bias) {
                    let mut db = Matrix::zeros(1, up.cols());
                    for i in 0..up.rows() {
                        for (d, u) in db.row_mut(0).iter_mut().zip(up.row(i)) {
                            *d += u;
                        }
                    }
                    accumulate(grads, *bias, db)?;
                }
            }
            Op::Scale(x, factor) => {
                if self.needs(*x) {
                    accumulate(grads, *x, up.scale(*factor))?;
                }
            }
            Op::Relu(x) => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    let mut dx = up.clone();
                    for (d, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                        if v <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    accumulate(grads, *x, dx)?;
                }
            }
            Op::SoftmaxRows(x) => {
                if self.needs(*x) {
                    let p = self.nodes[idx].value.get();
                    let mut dx = Matrix::zeros(up.rows(), up.cols());
                    for i in 0..up.rows() {
                        let dot: f64 =
                            up.row(i).iter().zip(p.row(i)).map(|(u, q)| u * q).sum();
                        for j in 0..up.cols() {
                            dx.set(i, j, p.get(i, j) * (up.get(i, j) - dot));
                        }
                    }
                    accumulate(grads, *x, dx)?;
                }
            }
            Op::LayerNorm { x, gamma, beta } => {
                self.layer_norm_backward(*x, *gamma, *beta, up, grads)?;
            }
            Op::Gather { table, ids } => {
                if self.needs(*table) {
                    let tv = self.value(*table);
                    let mut dt = Matrix::zeros(tv.rows(), tv.cols());
                    for (i, &id) in ids.iter().enumerate() {
                        for (d, u) in dt.row_mut(id).iter_mut().zip(up.row(i)) {
                            *d += u;
                        }
                    }
                    accumulate(grads, *table, dt)?;
                }
            }
            Op::SliceCols { x, start } => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    for i in 0..up.rows() {
                        dx.row_mut(i)[*start..*start + up.cols()].copy_from_slice(up.row(i));
                    }
                    accumulate(grads, *x, dx)?;
                }
            }
            Op::SliceRows { x, start } => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    for i in 0..up.rows() {
                        dx.row_mut(start + i).copy_from_slice(up.row(i));
                    }
                    accumulate(grads, *x, dx)?;
                }
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.needs(p) {
                        accumulate(grads, p, up.slice_cols(at, w))?;
                    }
                    at += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for &p in parts {
                    let h = self.value(p).rows();
                    if self.needs(p) {
                        accumulate(grads, p, up.slice_rows(at, h))?;
                    }
                    at += h;
                }
            }
            Op::OverwriteRows { x, src, rows } => {
                if self.needs(*x) {
                    let mut dx = up.clone();
                    for &r in rows {
                        dx.row_mut(r).fill(0.0);
                    }
                    accumulate(grads, *x, dx)?;
                }
                if self.needs(*src) {
                    let mut ds = Matrix::zeros(rows.len(), up.cols());
                    for (i, &r) in rows.iter().enumerate() {
                        ds.row_mut(i).copy_from_slice(up.row(r));
                    }
                    accumulate(grads, *src, ds)?;
                }
            }
            Op::MeanNll { logits, targets } => {
                if self.needs(*logits) {
                    let g = up.get(0, 0) / targets.len() as f64;
                    let lv = self.value(*logits);
                    let mut dl = Matrix::zeros(lv.rows(), lv.cols());
                    for &(row, class) in targets {
                        let mut probs = lv.row(row).to_vec();
                        softmax_in_place(&mut probs);
                        for (j, p) in probs.iter().enumerate() {
                            let delta = if j == class { p - 1.0 } else { *p };
                            let cur = dl.get(row, j);
                            dl.set(row, j, cur + g * delta);
                        }
                    }
                    accumulate(grads, *logits, dl)?;
                }
            }
            Op::Sum(x) => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    accumulate(grads, *x, Matrix::filled(xv.rows(), xv.cols(), up.get(0, 0)))?;
                }
            }
        }
        Ok(())
    }

    fn layer_norm_backward(
        &self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        up: &Matrix,
        grads: &mut Vec<Option<Matrix>>,
    ) -> Result<()> {
        let xv = self.value(x);
        let gv = self.value(gamma);
        let d = xv.cols();
        let need_x = self.needs(x);
        let need_g = self.needs(gamma);
        let need_b = self.needs(beta);

        let mut dx = if need_x { Some(Matrix::zeros(xv.rows(), d)) } else { None };
        let mut dg = if need_g { Some(Matrix::zeros(1, d)) } else { None };
        let mut db = if need_b { Some(Matrix::zeros(1, d)) } else { None };

        for i in 0..xv.rows() {
            let row = xv.row(i);
            let (mean, rstd) = row_moments(row);
            // g*dy and its moments against the normalized row.
            let mut sum_gdy = 0.0;
            let mut sum_gdy_xhat = 0.0;
            for j in 0..d {
                let xhat = (row[j] - mean) * rstd;
                let gdy = gv.get(0, j) * up.get(i, j);
                sum_gdy += gdy;
                sum_gdy_xhat += gdy * xhat;
                if let Some(dg) = dg.as_mut() {
                    let cur = dg.get(0, j);
                    dg.set(0, j, cur + up.get(i, j) * xhat);
                }
                if let Some(db) = db.as_mut() {
                    let cur = db.get(0, j);
                    db.set(0, j, cur + up.get(i, j));
                }
            }
            if let Some(dx) = dx.as_mut() {
                let inv_d = 1.0 / d as f64;
                for j in 0..d {
                    let xhat = (row[j] - mean) * rstd;
                    let gdy = gv.get(0, j) * up.get(i, j);
                    let v = rstd * (gdy - inv_d * sum_gdy - xhat * inv_d * sum_gdy_xhat);
                    dx.set(i, j, v);
                }
            }
        }
        if let Some(dx) = dx {
            accumulate(grads, x, dx)?;
        }
        if let Some(dg) = dg {
            accumulate(grads, gamma, dg)?;
        }
        if let Some(db) = db {
            accumulate(grads, beta, db)?;
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Matrix>], id: NodeId, delta: Matrix) -> Result<()> {
    match &mut grads[id.0] {
        Some(existing) => existing.axpy(1.0, &delta),
        slot @ None => {
            *slot = Some(delta);
            Ok(())
        }
    }
}

/// Mean and reciprocal standard deviation of a row (population variance,
/// stabilized by [`LAYERNORM_EPS`]).
fn row_moments(row: &[f64]) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / fmath::sqrt(var + LAYERNORM_EPS))
}

/// In-place stable softmax of a slice.
fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = fmath::exp(*v - max);
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `log softmax(row)[class]` via log-sum-exp.
fn log_softmax_at(row: &[f64], class: usize) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = fmath::ln(row.iter().map(|&v| fmath::exp(v - max)).sum::<f64>()) + max;
    row[class] - lse
}

fn format_args_string(what: &str, index: usize, bound: usize) -> String {
    use alloc::format;
    format!("{what}: {index} >= {bound}")
}
