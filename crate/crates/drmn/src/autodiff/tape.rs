//! Reverse-mode autodiff over matrix-valued nodes.
//!
//! A `Tape` records every operation as it evaluates (define-by-run). Values
//! are 64-bit; nodes have rank <= 2. `backward` walks the record once in
//! reverse and scatters leaf gradients into a `GradStore` aligned with the
//! owning `ParamSet`, so embedding-row leaves accumulate into just the rows
//! they gathered.

use crate::matrix::Matrix;
use crate::params::{Binding, GradStore, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// Adds a 1 x n row to every row of an m x n matrix.
    AddRow(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    SoftmaxRows(NodeId),
    ConcatCols(NodeId, NodeId),
    ConcatRows(Vec<NodeId>),
    SliceCols(NodeId, usize),
    SliceRows(NodeId, usize),
    Transpose(NodeId),
    /// Rowwise dot product of two equal-shape matrices, yielding m x 1.
    RowDot(NodeId, NodeId),
    /// Multiplies every element by a 1 x 1 scalar node.
    ScaleBy(NodeId, NodeId),
    /// Appends zero columns on the right.
    PadCols(NodeId),
    /// Scatter-adds the columns of a 1 x n row into a wider 1 x m row:
    /// output[map[i]] += input[i]. Used to pool copy mass per word.
    AggregateCols(NodeId, Vec<usize>),
    /// Row-wise layer normalization with learnable gain and bias (1 x n).
    LayerNormRows(NodeId, NodeId, NodeId),
    /// Extracts one element as a 1 x 1 node.
    PickElem(NodeId, usize, usize),
    ClampMin(NodeId, f64),
    Ln(NodeId),
    MeanAll(NodeId),
}

const LN_EPS: f64 = 1e-6;

struct Node {
    op: Op,
    value: Matrix,
    binding: Option<Binding>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Matrix, binding: Option<Binding>) -> NodeId {
        self.nodes.push(Node { op, value, binding });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf that participates in the graph but owns no parameter slot.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Leaf, value, None)
    }

    /// Leaf bound to a whole parameter.
    pub fn param(&mut self, params: &ParamSet, idx: usize) -> NodeId {
        self.push(Op::Leaf, params.value(idx).clone(), Some(Binding::Full(idx)))
    }

    /// Leaf gathering rows of a parameter (embedding lookup); gradients
    /// scatter back into exactly those rows.
    pub fn param_rows(&mut self, params: &ParamSet, idx: usize, rows: &[usize]) -> NodeId {
        let table = params.value(idx);
        let value = Matrix::from_fn(rows.len(), table.cols, |r, c| table.get(rows[r], c));
        self.push(Op::Leaf, value, Some(Binding::Rows(idx, rows.to_vec())))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), v, None)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).add(self.value(b));
        self.push(Op::Add(a, b), v, None)
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let v = self.value(a).add_row(self.value(row));
        self.push(Op::AddRow(a, row), v, None)
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).hadamard(self.value(b));
        self.push(Op::Hadamard(a, b), v, None)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scale(c);
        self.push(Op::Scale(a, c), v, None)
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        self.push(Op::AddConst(a), v, None)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(Op::Sigmoid(a), v, None)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), v, None)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), v, None)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        assert!(self.value(a).cols >= 1, "softmax over empty row");
        let v = self.value(a).softmax_rows();
        self.push(Op::SoftmaxRows(a), v, None)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).concat_cols(self.value(b));
        self.push(Op::ConcatCols(a, b), v, None)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::concat_rows(&mats);
        self.push(Op::ConcatRows(parts.to_vec()), v, None)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let src = self.value(a);
        assert!(start + len <= src.cols, "slice_cols out of range");
        let v = Matrix::from_fn(src.rows, len, |r, c| src.get(r, start + c));
        self.push(Op::SliceCols(a, start), v, None)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let src = self.value(a);
        assert!(start + len <= src.rows, "slice_rows out of range");
        let v = Matrix::from_fn(len, src.cols, |r, c| src.get(start + r, c));
        self.push(Op::SliceRows(a, start), v, None)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a), v, None)
    }

    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ma, mb) = (self.value(a), self.value(b));
        assert_eq!((ma.rows, ma.cols), (mb.rows, mb.cols), "row_dot shape");
        let v = Matrix::from_fn(ma.rows, 1, |r, _| {
            (0..ma.cols).map(|j| ma.get(r, j) * mb.get(r, j)).sum()
        });
        self.push(Op::RowDot(a, b), v, None)
    }

    pub fn scale_by(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let sv = self.value(s);
        assert_eq!((sv.rows, sv.cols), (1, 1), "scale_by wants a 1x1 scalar");
        let c = sv.get(0, 0);
        let v = self.value(a).scale(c);
        self.push(Op::ScaleBy(a, s), v, None)
    }

    pub fn pad_cols(&mut self, a: NodeId, extra: usize) -> NodeId {
        let src = self.value(a);
        let v = Matrix::from_fn(src.rows, src.cols + extra, |r, c| {
            if c < src.cols {
                src.get(r, c)
            } else {
                0.0
            }
        });
        self.push(Op::PadCols(a), v, None)
    }

    pub fn aggregate_cols(&mut self, a: NodeId, map: Vec<usize>, out_cols: usize) -> NodeId {
        let src = self.value(a);
        assert_eq!(src.rows, 1, "aggregate_cols expects a row");
        assert_eq!(src.cols, map.len(), "aggregate_cols map length");
        let mut v = Matrix::zeros(1, out_cols);
        for (i, &dst) in map.iter().enumerate() {
            assert!(dst < out_cols, "aggregate_cols map out of range");
            v.data_mut()[dst] += src.get(0, i);
        }
        self.push(Op::AggregateCols(a, map), v, None)
    }

    pub fn layer_norm_rows(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let (mx, mg, mb) = (self.value(x), self.value(gain), self.value(bias));
        assert_eq!(mg.rows, 1, "layer norm gain is a row");
        assert_eq!(mb.rows, 1, "layer norm bias is a row");
        assert_eq!(mg.cols, mx.cols, "layer norm gain width");
        assert_eq!(mb.cols, mx.cols, "layer norm bias width");
        let n = mx.cols as f64;
        let mut v = Matrix::zeros(mx.rows, mx.cols);
        for r in 0..mx.rows {
            let row = mx.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for c in 0..mx.cols {
                let xhat = (row[c] - mean) * inv;
                v.set(r, c, xhat * mg.get(0, c) + mb.get(0, c));
            }
        }
        self.push(Op::LayerNormRows(x, gain, bias), v, None)
    }

    pub fn pick(&mut self, a: NodeId, r: usize, c: usize) -> NodeId {
        let v = Matrix::scalar(self.value(a).get(r, c));
        self.push(Op::PickElem(a, r, c), v, None)
    }

    pub fn clamp_min(&mut self, a: NodeId, min: f64) -> NodeId {
        let v = self.value(a).map(|x| x.max(min));
        self.push(Op::ClampMin(a, min), v, None)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::ln);
        self.push(Op::Ln(a), v, None)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let src = self.value(a);
        let n = (src.rows * src.cols) as f64;
        let v = Matrix::scalar(src.data().iter().sum::<f64>() / n);
        self.push(Op::MeanAll(a), v, None)
    }

    /// First node holding a non-finite value, with a short description.
    /// Used by the trainer to turn a NaN loss into a pointed diagnostic.
    pub fn first_nonfinite(&self) -> Option<(usize, String)> {
        self.nodes
            .iter()
            .position(|n| !n.value.is_finite())
            .map(|i| (i, self.describe(NodeId(i))))
    }

    pub fn describe(&self, id: NodeId) -> String {
        let node = &self.nodes[id.0];
        let kind = match (&node.op, &node.binding) {
            (Op::Leaf, Some(Binding::Full(p))) => format!("leaf(param {p})"),
            (Op::Leaf, Some(Binding::Rows(p, _))) => format!("leaf(param {p} rows)"),
            (Op::Leaf, None) => "leaf(const)".to_string(),
            (op, _) => format!("{op:?}").split('(').next().unwrap().to_string(),
        };
        format!("node {} [{}]", id.0, kind)
    }

    /// Reverse sweep from a scalar loss. Every parameter-bound leaf that the
    /// loss reaches contributes to the returned store; unreached parameters
    /// keep zero gradients.
    pub fn backward(&self, loss: NodeId, params: &ParamSet) -> GradStore {
        let lv = self.value(loss);
        assert_eq!((lv.rows, lv.cols), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::scalar(1.0));
        let mut store = GradStore::zeros(params);

        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => match &node.binding {
                    Some(Binding::Full(p)) => {
                        let dst = store.get_mut(*p).data_mut();
                        for (d, s) in dst.iter_mut().zip(g.data()) {
                            *d += s;
                        }
                    }
                    Some(Binding::Rows(p, rows)) => {
                        let dst = store.get_mut(*p);
                        for (r, &row) in rows.iter().enumerate() {
                            for c in 0..g.cols {
                                let cur = dst.get(row, c);
                                dst.set(row, c, cur + g.get(r, c));
                            }
                        }
                    }
                    None => {}
                },
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let ga = g.matmul(&vb.transpose());
                    let gb = va.transpose().matmul(&g);
                    accum(&mut grads, *a, &ga);
                    accum(&mut grads, *b, &gb);
                }
                Op::Add(a, b) => {
                    accum(&mut grads, *a, &g);
                    accum(&mut grads, *b, &g);
                }
                Op::AddRow(a, row) => {
                    accum(&mut grads, *a, &g);
                    let gr = Matrix::from_fn(1, g.cols, |_, c| {
                        (0..g.rows).map(|r| g.get(r, c)).sum()
                    });
                    accum(&mut grads, *row, &gr);
                }
                Op::Hadamard(a, b) => {
                    let ga = g.hadamard(self.value(*b));
                    let gb = g.hadamard(self.value(*a));
                    accum(&mut grads, *a, &ga);
                    accum(&mut grads, *b, &gb);
                }
                Op::Scale(a, c) => {
                    accum(&mut grads, *a, &g.scale(*c));
                }
                Op::AddConst(a) => {
                    accum(&mut grads, *a, &g);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let ga = Matrix::from_fn(y.rows, y.cols, |r, c| {
                        let s = y.get(r, c);
                        g.get(r, c) * s * (1.0 - s)
                    });
                    accum(&mut grads, *a, &ga);
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let ga = Matrix::from_fn(y.rows, y.cols, |r, c| {
                        let t = y.get(r, c);
                        g.get(r, c) * (1.0 - t * t)
                    });
                    accum(&mut grads, *a, &ga);
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let ga = Matrix::from_fn(x.rows, x.cols, |r, c| {
                        if x.get(r, c) > 0.0 {
                            g.get(r, c)
                        } else {
                            0.0
                        }
                    });
                    accum(&mut grads, *a, &ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Matrix::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let dot: f64 = (0..y.cols).map(|c| g.get(r, c) * y.get(r, c)).sum();
                        for c in 0..y.cols {
                            ga.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                        }
                    }
                    accum(&mut grads, *a, &ga);
                }
                Op::ConcatCols(a, b) => {
                    let wa = self.value(*a).cols;
                    let ga = Matrix::from_fn(g.rows, wa, |r, c| g.get(r, c));
                    let gb = Matrix::from_fn(g.rows, g.cols - wa, |r, c| g.get(r, wa + c));
                    accum(&mut grads, *a, &ga);
                    accum(&mut grads, *b, &gb);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let rows = self.value(p).rows;
                        let gp = Matrix::from_fn(rows, g.cols, |r, c| g.get(start + r, c));
                        accum(&mut grads, p, &gp);
                        start += rows;
                    }
                }
                Op::SliceCols(a, start) => {
                    let src = self.value(*a);
                    let mut ga = Matrix::zeros(src.rows, src.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            ga.set(r, start + c, g.get(r, c));
                        }
                    }
                    accum(&mut grads, *a, &ga);
                }
                Op::SliceRows(a, start) => {
                    let src = self.value(*a);
                    let mut ga = Matrix::zeros(src.rows, src.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            ga.set(start + r, c, g.get(r, c));
                        }
                    }
                    accum(&mut grads, *a, &ga);
                }
                Op::Transpose(a) => {
                    accum(&mut grads, *a, &g.transpose());
                }
                Op::RowDot(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let ga = Matrix::from_fn(va.rows, va.cols, |r, c| g.get(r, 0) * vb.get(r, c));
                    let gb = Matrix::from_fn(va.rows, va.cols, |r, c| g.get(r, 0) * va.get(r, c));
                    accum(&mut grads, *a, &ga);
                    accum(&mut grads, *b, &gb);
                }
                Op::ScaleBy(a, s) => {
                    let sval = self.value(*s).get(0, 0);
                    let va = self.value(*a);
                    accum(&mut grads, *a, &g.scale(sval));
                    let gs: f64 = g
                        .data()
                        .iter()
                        .zip(va.data())
                        .map(|(gx, ax)| gx * ax)
                        .sum();
                    accum(&mut grads, *s, &Matrix::scalar(gs));
                }
                Op::PadCols(a) => {
                    let wa = self.value(*a).cols;
                    let ga = Matrix::from_fn(g.rows, wa, |r, c| g.get(r, c));
                    accum(&mut grads, *a, &ga);
                }
                Op::AggregateCols(a, map) => {
                    let ga = Matrix::from_fn(1, map.len(), |_, i| g.get(0, map[i]));
                    accum(&mut grads, *a, &ga);
                }
                Op::LayerNormRows(x, gain, bias) => {
                    let mx = self.value(*x);
                    let mg = self.value(*gain);
                    let n = mx.cols as f64;
                    let mut gx = Matrix::zeros(mx.rows, mx.cols);
                    let mut ggain = Matrix::zeros(1, mx.cols);
                    let mut gbias = Matrix::zeros(1, mx.cols);
                    for r in 0..mx.rows {
                        let row = mx.row(r);
                        let mean = row.iter().sum::<f64>() / n;
                        let var =
                            row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
                        let inv = 1.0 / (var + LN_EPS).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|x| (x - mean) * inv).collect();
                        let dxhat: Vec<f64> =
                            (0..mx.cols).map(|c| g.get(r, c) * mg.get(0, c)).collect();
                        let m1 = dxhat.iter().sum::<f64>() / n;
                        let m2 = dxhat
                            .iter()
                            .zip(&xhat)
                            .map(|(d, x)| d * x)
                            .sum::<f64>()
                            / n;
                        for c in 0..mx.cols {
                            gx.set(r, c, inv * (dxhat[c] - m1 - xhat[c] * m2));
                            let cur_g = ggain.get(0, c);
                            ggain.set(0, c, cur_g + g.get(r, c) * xhat[c]);
                            let cur_b = gbias.get(0, c);
                            gbias.set(0, c, cur_b + g.get(r, c));
                        }
                    }
                    accum(&mut grads, *x, &gx);
                    accum(&mut grads, *gain, &ggain);
                    accum(&mut grads, *bias, &gbias);
                }
                Op::PickElem(a, r, c) => {
                    let src = self.value(*a);
                    let mut ga = Matrix::zeros(src.rows, src.cols);
                    ga.set(*r, *c, g.get(0, 0));
                    accum(&mut grads, *a, &ga);
                }
                Op::ClampMin(a, min) => {
                    let x = self.value(*a);
                    let ga = Matrix::from_fn(x.rows, x.cols, |r, c| {
                        if x.get(r, c) > *min {
                            g.get(r, c)
                        } else {
                            0.0
                        }
                    });
                    accum(&mut grads, *a, &ga);
                }
                Op::Ln(a) => {
                    let x = self.value(*a);
                    let ga = Matrix::from_fn(x.rows, x.cols, |r, c| g.get(r, c) / x.get(r, c));
                    accum(&mut grads, *a, &ga);
                }
                Op::MeanAll(a) => {
                    let src = self.value(*a);
                    let w = g.get(0, 0) / (src.rows * src.cols) as f64;
                    let ga = Matrix::from_fn(src.rows, src.cols, |_, _| w);
                    accum(&mut grads, *a, &ga);
                }
            }
        }
        store
    }
}

fn accum(grads: &mut [Option<Matrix>], id: NodeId, delta: &Matrix) {
    match &mut grads[id.0] {
        Some(g) => {
            assert_eq!((g.rows, g.cols), (delta.rows, delta.cols), "grad shape");
            let d = g.data_mut();
            for (x, y) in d.iter_mut().zip(delta.data()) {
                *x += y;
            }
        }
        slot @ None => {
            *slot = Some(delta.clone());
        }
    }
}
