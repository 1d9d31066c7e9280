//! Reverse-mode gradient tape over [`Tensor2`] primitives.
//!
//! Each forward op appends one node recording its inputs; `backward` walks
//! the node list once in reverse order, accumulating gradients into every
//! reachable node. Parameters enter the tape as leaves; a leaf that never
//! feeds the seeded outputs keeps an exactly-zero gradient.

use crate::error::{Error, Result};
use crate::numerics::tensor::{masked_softmax_rows, sigmoid, softmax_rows, Tensor2};
use crate::scalar::Real;

/// Variance stabilizer for layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    /// `a × b`
    MatMul(NodeId, NodeId),
    /// `a × bᵀ`
    MatMulNt(NodeId, NodeId),
    /// Elementwise sum of two same-shape tensors.
    Add(NodeId, NodeId),
    /// `a` plus a `1 × cols` row broadcast over all rows.
    AddRow(NodeId, NodeId),
    Scale(NodeId, F),
    Relu(NodeId),
    Sigmoid(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
    SoftmaxRows(NodeId),
    /// Backward is the plain softmax rule: masked columns carry exactly
    /// zero weight, so their input gradient is zero without consulting
    /// the mask again.
    MaskedSoftmaxRows(NodeId),
    /// Mean over rows, producing `1 × cols`.
    MeanRows(NodeId),
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<NodeId>),
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor2<F>,
    grad: Option<Tensor2<F>>,
    op: Op<F>,
}

/// Ordered record of primitive operations with the inputs needed for backward.
#[derive(Debug, Default)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor2<F>, op: Op<F>) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor2<F>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor2<F> {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient of a node; exactly zero if backward never
    /// reached it.
    pub fn grad(&self, id: NodeId) -> Tensor2<F> {
        let node = &self.nodes[id.0];
        node.grad
            .clone()
            .unwrap_or_else(|| Tensor2::zeros(node.value.rows(), node.value.cols()))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a.0].value.matmul(&self.nodes[b.0].value)?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a.0].value.matmul_nt(&self.nodes[b.0].value)?;
        Ok(self.push(v, Op::MatMulNt(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a.0].value.add(&self.nodes[b.0].value)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let rv = &self.nodes[row.0].value;
        let av = &self.nodes[a.0].value;
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(Error::Dimension(format!(
                "add_row {:?} + {:?}",
                av.shape(),
                rv.shape()
            )));
        }
        let mut v = av.clone();
        for i in 0..v.rows() {
            for j in 0..v.cols() {
                let s = v.get(i, j) + rv.get(0, j);
                v.set(i, j, s);
            }
        }
        Ok(self.push(v, Op::AddRow(a, row)))
    }

    pub fn scale(&mut self, a: NodeId, factor: F) -> NodeId {
        let v = self.nodes[a.0].value.scale(factor);
        self.push(v, Op::Scale(a, factor))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.map(|x| x.max(F::zero()));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        let g = &self.nodes[gain.0].value;
        let b = &self.nodes[bias.0].value;
        if g.rows() != 1 || b.rows() != 1 || g.cols() != xv.cols() || b.cols() != xv.cols() {
            return Err(Error::Dimension(format!(
                "layer_norm x {:?}, gain {:?}, bias {:?}",
                xv.shape(),
                g.shape(),
                b.shape()
            )));
        }
        let v = layer_norm_forward(xv, g, b);
        Ok(self.push(v, Op::LayerNorm { x, gain, bias }))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = softmax_rows(&self.nodes[a.0].value);
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn masked_softmax_rows(&mut self, a: NodeId, mask: &[bool]) -> Result<NodeId> {
        let v = masked_softmax_rows(&self.nodes[a.0].value, mask)?;
        Ok(self.push(v, Op::MaskedSoftmaxRows(a)))
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let av = &self.nodes[a.0].value;
        let n = F::from_usize(av.rows()).unwrap();
        let v = av.col_sums().scale(F::one() / n);
        self.push(v, Op::MeanRows(a))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        if start + len > xv.cols() {
            return Err(Error::Dimension(format!(
                "slice_cols {start}..{} of {} columns",
                start + len,
                xv.cols()
            )));
        }
        let mut v = Tensor2::zeros(xv.rows(), len);
        for i in 0..xv.rows() {
            for j in 0..len {
                v.set(i, j, xv.get(i, start + j));
            }
        }
        Ok(self.push(v, Op::SliceCols { x, start, len }))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Argument("concat_cols of zero parts".into()));
        }
        let rows = self.nodes[parts[0].0].value.rows();
        if parts.iter().any(|p| self.nodes[p.0].value.rows() != rows) {
            return Err(Error::Dimension("concat_cols row mismatch".into()));
        }
        let cols: usize = parts.iter().map(|p| self.nodes[p.0].value.cols()).sum();
        let mut v = Tensor2::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let pv = &self.nodes[p.0].value;
            for i in 0..rows {
                for j in 0..pv.cols() {
                    v.set(i, off + j, pv.get(i, j));
                }
            }
            off += pv.cols();
        }
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    fn accumulate(&mut self, id: NodeId, delta: &Tensor2<F>) -> Result<()> {
        let node = &mut self.nodes[id.0];
        match &mut node.grad {
            Some(g) => g.add_scaled(delta, F::one()),
            None => {
                node.grad = Some(delta.clone());
                Ok(())
            }
        }
    }

    /// Run the backward pass, seeding the given output nodes with the given
    /// cotangents. Visits each recorded op exactly once, in reverse order.
    pub fn backward(&mut self, seeds: &[(NodeId, Tensor2<F>)]) -> Result<()> {
        for (id, seed) in seeds {
            if !self.nodes[id.0].value.same_shape(seed) {
                return Err(Error::Dimension(format!(
                    "seed {:?} vs node {:?}",
                    seed.shape(),
                    self.nodes[id.0].value.shape()
                )));
            }
            self.accumulate(*id, seed)?;
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(dy) = self.nodes[idx].grad.clone() else {
                continue;
            };
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = dy.matmul_nt(&self.nodes[b.0].value)?;
                    let db = self.nodes[a.0].value.matmul_tn(&dy)?;
                    self.accumulate(a, &da)?;
                    self.accumulate(b, &db)?;
                }
                Op::MatMulNt(a, b) => {
                    let da = dy.matmul(&self.nodes[b.0].value)?;
                    let db = dy.matmul_tn(&self.nodes[a.0].value)?;
                    self.accumulate(a, &da)?;
                    self.accumulate(b, &db)?;
                }
                Op::Add(a, b) => {
                    self.accumulate(a, &dy)?;
                    self.accumulate(b, &dy)?;
                }
                Op::AddRow(a, row) => {
                    self.accumulate(a, &dy)?;
                    let drow = dy.col_sums();
                    self.accumulate(row, &drow)?;
                }
                Op::Scale(a, factor) => {
                    self.accumulate(a, &dy.scale(factor))?;
                }
                Op::Relu(a) => {
                    // Subgradient 0 at exactly 0.
                    let x = &self.nodes[a.0].value;
                    let dx = dy.zip_map(x, |d, xv| {
                        if xv > F::zero() {
                            d
                        } else {
                            F::zero()
                        }
                    })?;
                    self.accumulate(a, &dx)?;
                }
                Op::Sigmoid(a) => {
                    let s = &self.nodes[idx].value;
                    let dx = dy.zip_map(s, |d, sv| d * sv * (F::one() - sv))?;
                    self.accumulate(a, &dx)?;
                }
                Op::LayerNorm { x, gain, bias } => {
                    let (dx, dg, db) =
                        layer_norm_backward(&self.nodes[x.0].value, &self.nodes[gain.0].value, &dy);
                    self.accumulate(x, &dx)?;
                    self.accumulate(gain, &dg)?;
                    self.accumulate(bias, &db)?;
                }
                Op::SoftmaxRows(a) | Op::MaskedSoftmaxRows(a) => {
                    // dx = p ⊙ (dy − ⟨dy, p⟩)
                    let p = &self.nodes[idx].value;
                    let mut dx = Tensor2::zeros(p.rows(), p.cols());
                    for i in 0..p.rows() {
                        let dot: F = dy
                            .row(i)
                            .iter()
                            .zip(p.row(i))
                            .map(|(&d, &pv)| d * pv)
                            .sum();
                        for j in 0..p.cols() {
                            dx.set(i, j, p.get(i, j) * (dy.get(i, j) - dot));
                        }
                    }
                    self.accumulate(a, &dx)?;
                }
                Op::MeanRows(a) => {
                    let rows = self.nodes[a.0].value.rows();
                    let inv = F::one() / F::from_usize(rows).unwrap();
                    let mut dx = Tensor2::zeros(rows, dy.cols());
                    for i in 0..rows {
                        for j in 0..dy.cols() {
                            dx.set(i, j, dy.get(0, j) * inv);
                        }
                    }
                    self.accumulate(a, &dx)?;
                }
                Op::SliceCols { x, start, len } => {
                    let xv = &self.nodes[x.0].value;
                    let mut dx = Tensor2::zeros(xv.rows(), xv.cols());
                    for i in 0..dy.rows() {
                        for j in 0..len {
                            dx.set(i, start + j, dy.get(i, j));
                        }
                    }
                    self.accumulate(x, &dx)?;
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let cols = self.nodes[p.0].value.cols();
                        let mut dp = Tensor2::zeros(dy.rows(), cols);
                        for i in 0..dy.rows() {
                            for j in 0..cols {
                                dp.set(i, j, dy.get(i, off + j));
                            }
                        }
                        self.accumulate(p, &dp)?;
                        off += cols;
                    }
                }
            }
        }
        Ok(())
    }
}

fn layer_norm_forward<F: Real>(x: &Tensor2<F>, gain: &Tensor2<F>, bias: &Tensor2<F>) -> Tensor2<F> {
    let eps = F::from_f64_lossy(LAYER_NORM_EPS);
    let n = F::from_usize(x.cols()).unwrap();
    let mut out = Tensor2::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean: F = row.iter().copied().sum::<F>() / n;
        let var: F = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
        let inv = (var + eps).sqrt().recip();
        for j in 0..x.cols() {
            let xhat = (row[j] - mean) * inv;
            out.set(i, j, xhat * gain.get(0, j) + bias.get(0, j));
        }
    }
    out
}

fn layer_norm_backward<F: Real>(
    x: &Tensor2<F>,
    gain: &Tensor2<F>,
    dy: &Tensor2<F>,
) -> (Tensor2<F>, Tensor2<F>, Tensor2<F>) {
    let eps = F::from_f64_lossy(LAYER_NORM_EPS);
    let n = F::from_usize(x.cols()).unwrap();
    let mut dx = Tensor2::zeros(x.rows(), x.cols());
    let mut dg = Tensor2::zeros(1, x.cols());
    let mut db = Tensor2::zeros(1, x.cols());
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean: F = row.iter().copied().sum::<F>() / n;
        let var: F = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
        let inv = (var + eps).sqrt().recip();
        let xhat: Vec<F> = row.iter().map(|&v| (v - mean) * inv).collect();
        let dxhat: Vec<F> = (0..x.cols())
            .map(|j| dy.get(i, j) * gain.get(0, j))
            .collect();
        let mean_dxhat: F = dxhat.iter().copied().sum::<F>() / n;
        let mean_dxhat_xhat: F = dxhat
            .iter()
            .zip(&xhat)
            .map(|(&a, &b)| a * b)
            .sum::<F>()
            / n;
        for j in 0..x.cols() {
            dx.set(
                i,
                j,
                inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat),
            );
            let g = dg.get(0, j) + dy.get(i, j) * xhat[j];
            dg.set(0, j, g);
            let b = db.get(0, j) + dy.get(i, j);
            db.set(0, j, b);
        }
    }
    (dx, dg, db)
}
