//! Reverse-mode tape over whole matrices.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and the backward pass is a single reverse sweep.

use crate::attention::NORM_EPS;
use crate::error::{EgaError, Result};
use crate::tensor::{concat_cols, concat_rows, matmul, matmul_transpose_b, softmax_rows, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    /// `a · bᵀ`
    MatMulTransB(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    SoftmaxRows(NodeId),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    Sum(NodeId),
    SumSquares(NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Matrix>,
    visited: usize,
}

impl Gradients {
    pub fn wrt(&self, id: NodeId) -> &Matrix {
        &self.grads[id.0]
    }

    /// Number of nodes the backward sweep processed.
    pub fn visited(&self) -> usize {
        self.visited
    }
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

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn matmul_transpose_b(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = matmul_transpose_b(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMulTransB(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let v = self.value(a).scale(factor);
        self.push(v, Op::Scale(a, factor))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let v = concat_rows(&parts.iter().map(|&p| self.value(p)).collect::<Vec<_>>())?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let v = concat_cols(&parts.iter().map(|&p| self.value(p)).collect::<Vec<_>>())?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let v = self.value(a).slice_cols(start, end);
        self.push(v, Op::SliceCols(a, start))
    }

    /// Row-wise layer norm; `gain` and `bias` are `1 × c` nodes.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let c = self.value(x).cols();
        for p in [gain, bias] {
            if self.value(p).shape() != (1, c) {
                return Err(EgaError::shape("tape.layer_norm", self.value(p).shape(), (1, c)));
            }
        }
        let (xhat, _) = normalize(self.value(x));
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut v = xhat;
        for i in 0..v.rows() {
            for (j, e) in v.row_mut(i).iter_mut().enumerate() {
                *e = *e * g[j] + b[j];
            }
        }
        Ok(self.push(v, Op::LayerNorm { x, gain, bias }))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Matrix::filled(1, 1, self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn sum_squares(&mut self, a: NodeId) -> NodeId {
        let v = Matrix::filled(1, 1, self.value(a).data().iter().map(|x| x * x).sum());
        self.push(v, Op::SumSquares(a))
    }

    /// Propagates `seed · d(root)` back to every node recorded before `root`.
    ///
    /// Nodes that do not feed `root` keep an exactly-zero gradient.
    pub fn backward(&self, root: NodeId, seed: f64) -> Result<Gradients> {
        let root_shape = self.value(root).shape();
        if root_shape != (1, 1) {
            return Err(EgaError::Usage(format!(
                "backward needs a scalar root, got a {}×{} node",
                root_shape.0, root_shape.1
            )));
        }
        let mut grads: Vec<Matrix> =
            self.nodes.iter().map(|n| Matrix::zeros(n.value.rows(), n.value.cols())).collect();
        grads[root.0] = Matrix::filled(1, 1, seed);
        let mut visited = 0;
        for idx in (0..=root.0).rev() {
            visited += 1;
            let g = std::mem::replace(&mut grads[idx], Matrix::zeros(0, 0));
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = g;
        }
        Ok(Gradients { grads, visited })
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Matrix]) -> Result<()> {
        let accumulate = |grads: &mut [Matrix], id: NodeId, delta: &Matrix| -> Result<()> {
            grads[id.0] = grads[id.0].add(delta)?;
            Ok(())
        };
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                // C = A·B: dA = G·Bᵀ, dB = Aᵀ·G
                let da = matmul_transpose_b(g, self.value(*b))?;
                let db = matmul(&self.value(*a).transpose(), g)?;
                accumulate(grads, *a, &da)?;
                accumulate(grads, *b, &db)?;
            }
            Op::MatMulTransB(a, b) => {
                // C = A·Bᵀ: dA = G·B, dB = Gᵀ·A
                let da = matmul(g, self.value(*b))?;
                let db = matmul(&g.transpose(), self.value(*a))?;
                accumulate(grads, *a, &da)?;
                accumulate(grads, *b, &db)?;
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g)?;
                accumulate(grads, *b, g)?;
            }
            Op::Mul(a, b) => {
                let da = g.hadamard(self.value(*b))?;
                let db = g.hadamard(self.value(*a))?;
                accumulate(grads, *a, &da)?;
                accumulate(grads, *b, &db)?;
            }
            Op::Scale(a, f) => accumulate(grads, *a, &g.scale(*f))?,
            Op::SoftmaxRows(a) => {
                // dx = p ⊙ (g − ⟨g, p⟩) per row
                let p = &self.nodes[idx].value;
                let mut d = Matrix::zeros(p.rows(), p.cols());
                for i in 0..p.rows() {
                    let dot: f64 = p.row(i).iter().zip(g.row(i)).map(|(x, y)| x * y).sum();
                    for (j, out) in d.row_mut(i).iter_mut().enumerate() {
                        *out = p.get(i, j) * (g.get(i, j) - dot);
                    }
                }
                accumulate(grads, *a, &d)?;
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let rows = self.value(*p).rows();
                    accumulate(grads, *p, &g.slice_rows(start, start + rows))?;
                    start += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let cols = self.value(*p).cols();
                    accumulate(grads, *p, &g.slice_cols(start, start + cols))?;
                    start += cols;
                }
            }
            Op::SliceCols(a, start) => {
                let src = self.value(*a);
                let mut d = Matrix::zeros(src.rows(), src.cols());
                for i in 0..g.rows() {
                    d.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                accumulate(grads, *a, &d)?;
            }
            Op::LayerNorm { x, gain, bias } => {
                let (xhat, inv_std) = normalize(self.value(*x));
                let gv = self.value(*gain).data();
                let c = xhat.cols();
                let mut dx = Matrix::zeros(xhat.rows(), c);
                let mut dgain = Matrix::zeros(1, c);
                let mut dbias = Matrix::zeros(1, c);
                for i in 0..xhat.rows() {
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..c {
                        let d = g.get(i, j) * gv[j];
                        mean_d += d;
                        mean_dx += d * xhat.get(i, j);
                        dgain.data_mut()[j] += g.get(i, j) * xhat.get(i, j);
                        dbias.data_mut()[j] += g.get(i, j);
                    }
                    mean_d /= c as f64;
                    mean_dx /= c as f64;
                    for j in 0..c {
                        let d = g.get(i, j) * gv[j];
                        dx.set(i, j, inv_std[i] * (d - mean_d - xhat.get(i, j) * mean_dx));
                    }
                }
                accumulate(grads, *x, &dx)?;
                accumulate(grads, *gain, &dgain)?;
                accumulate(grads, *bias, &dbias)?;
            }
            Op::Sum(a) => {
                let src = self.value(*a);
                accumulate(grads, *a, &Matrix::filled(src.rows(), src.cols(), g.get(0, 0)))?;
            }
            Op::SumSquares(a) => {
                let seed = 2.0 * g.get(0, 0);
                accumulate(grads, *a, &self.value(*a).scale(seed))?;
            }
        }
        Ok(())
    }
}

/// Per-row `(x − μ)/√(σ² + ε)` and the `1/√(σ² + ε)` factors.
fn normalize(x: &Matrix) -> (Matrix, Vec<f64>) {
    let c = x.cols() as f64;
    let mut out = x.clone();
    let mut inv = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = out.row_mut(i);
        let mean = row.iter().sum::<f64>() / c;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
        let s = 1.0 / (var + NORM_EPS).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * s;
        }
        inv.push(s);
    }
    (out, inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_init;

    #[test]
    fn linear_layer_gradient() {
        let f = seeded_init(4, 3, 1, 1.0);
        let mut tape = Tape::new();
        let fi = tape.leaf(f.clone());
        let w = tape.leaf(seeded_init(3, 2, 2, 1.0));
        let q = tape.matmul(fi, w).unwrap();
        let loss = tape.sum(q);
        let grads = tape.backward(loss, 1.0).unwrap();
        let want = matmul(&f.transpose(), &Matrix::filled(4, 2, 1.0)).unwrap();
        assert!(grads.wrt(w).max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn constant_loss_gives_zero_gradients() {
        let mut tape = Tape::new();
        let w = tape.leaf(seeded_init(3, 3, 2, 1.0));
        let c = tape.leaf(Matrix::filled(2, 2, 4.0));
        let loss = tape.sum(c);
        let grads = tape.backward(loss, 1.0).unwrap();
        assert!(grads.wrt(w).data().iter().all(|&v| v == 0.0));
        assert!(grads.wrt(c).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn non_scalar_root_is_usage_error() {
        let mut tape = Tape::new();
        let w = tape.leaf(Matrix::zeros(2, 2));
        assert!(matches!(tape.backward(w, 1.0), Err(EgaError::Usage(_))));
    }

    #[test]
    fn every_node_visited_once() {
        let mut tape = Tape::new();
        let a = tape.leaf(seeded_init(2, 3, 1, 1.0));
        let b = tape.leaf(seeded_init(3, 2, 2, 1.0));
        let c = tape.matmul(a, b).unwrap();
        let d = tape.softmax_rows(c);
        let e = tape.add(d, c).unwrap();
        let loss = tape.sum_squares(e);
        let grads = tape.backward(loss, 1.0).unwrap();
        assert_eq!(grads.visited(), tape.len());
    }
}
