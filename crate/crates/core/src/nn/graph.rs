//! Reverse-mode automatic differentiation over matrix-valued nodes.
//!
//! A [`Graph`] records every operation of one forward pass as a node on a
//! tape. [`Graph::backward`] walks the tape in reverse, accumulating
//! vector-Jacobian products, and returns the gradient of a scalar node with
//! respect to every parameter leaf. Nodes that no parameter feeds into are
//! never differentiated.

use std::borrow::Cow;

use super::tensor::{gemm_acc, Mat, Real};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Clamp applied before taking the log of a probability.
pub const LOG_FLOOR: f64 = 1e-12;

enum Op<S> {
    Constant,
    Param(usize),
    MatMul { a: Var, b: Var, transpose_b: bool },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    ReverseRows(Var),
    Dropout(Var, Vec<S>),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat<S>,
        inv_std: Vec<S>,
    },
    WeightedNll {
        logits: Var,
        labels: Vec<usize>,
        weights: Vec<S>,
        probs: Mat<S>,
    },
}

struct Node<'p, S: Real> {
    value: Cow<'p, Mat<S>>,
    op: Op<S>,
    needs_grad: bool,
}

pub struct Graph<'p, S: Real> {
    nodes: Vec<Node<'p, S>>,
}

impl<'p, S: Real> Default for Graph<'p, S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, S: Real> Graph<'p, S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat<S> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Mat<S>, op: Op<S>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Mat<S>) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::Constant,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a trainable tensor; `id` keys the returned gradient.
    pub fn param(&mut self, id: usize, value: &'p Mat<S>) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Param(id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul { a, b, transpose_b: false }, &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_t(self.value(b));
        self.push(value, Op::MatMul { a, b, transpose_b: true }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push(value, Op::Add(a, b), &[a, b])
    }

    /// Adds the 1×n row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1);
        assert_eq!(r.cols(), self.value(a).cols());
        let r = r.as_slice().to_vec();
        let mut value = self.value(a).clone();
        let cols = value.cols();
        for chunk in value.as_mut_slice().chunks_mut(cols) {
            for (x, &b) in chunk.iter_mut().zip(&r) {
                *x += b;
            }
        }
        self.push(value, Op::AddRow(a, row), &[a, row])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape());
        let data = x.as_slice().iter().zip(y.as_slice()).map(|(&p, &q)| p * q).collect();
        let value = Mat::from_vec(x.rows(), x.cols(), data);
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: S) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.push(value, Op::Scale(a, s), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.tanh());
        self.push(value, Op::Tanh(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(S::zero()));
        self.push(value, Op::Relu(a), &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols());
        let mut data = Vec::with_capacity(x.rows() * len);
        for r in 0..x.rows() {
            data.extend_from_slice(&x.row(r)[start..start + len]);
        }
        let value = Mat::from_vec(x.rows(), len, data);
        self.push(value, Op::SliceCols(a, start), &[a])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.rows());
        let c = x.cols();
        let value = Mat::from_vec(len, c, x.as_slice()[start * c..(start + len) * c].to_vec());
        self.push(value, Op::SliceRows(a, start), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let m = self.value(p);
                assert_eq!(m.rows(), rows);
                data.extend_from_slice(m.row(r));
            }
        }
        let value = Mat::from_vec(rows, cols, data);
        self.push(value, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn stack_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols(), cols);
            rows += m.rows();
            data.extend_from_slice(m.as_slice());
        }
        let value = Mat::from_vec(rows, cols, data);
        self.push(value, Op::StackRows(parts.to_vec()), parts)
    }

    pub fn reverse_rows(&mut self, a: Var) -> Var {
        let value = reverse_rows(self.value(a));
        self.push(value, Op::ReverseRows(a), &[a])
    }

    /// Elementwise product with a fixed mask (entries 0 or 1/(1-p)).
    pub fn dropout(&mut self, a: Var, mask: Vec<S>) -> Var {
        let x = self.value(a);
        assert_eq!(x.len(), mask.len());
        let data = x.as_slice().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Mat::from_vec(x.rows(), x.cols(), data);
        self.push(value, Op::Dropout(a, mask), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        self.push(value, Op::SoftmaxRows(a), &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = self.value(gain).as_slice();
        let b = self.value(bias).as_slice();
        let n = S::lit(cols as f64);
        let mut xhat = Mat::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
            let is = S::one() / (var + S::lit(eps)).sqrt();
            inv_std.push(is);
            let xh = xhat.row_mut(r);
            for c in 0..cols {
                xh[c] = (row[c] - mean) * is;
            }
            let o = out.row_mut(r);
            for c in 0..cols {
                o[c] = xh[c] * g[c] + b[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    /// Sum over rows of `weights[label] · −log softmax(logits)[label]`,
    /// with the probability clamped at [`LOG_FLOOR`]. Returns a 1×1 node.
    pub fn weighted_nll(&mut self, logits: Var, labels: &[usize], weights: &[S]) -> Var {
        let z = self.value(logits);
        assert_eq!(z.rows(), labels.len());
        assert_eq!(z.cols(), weights.len());
        let probs = softmax_rows(z);
        let floor = S::lit(LOG_FLOOR);
        let mut total = S::zero();
        for (t, &l) in labels.iter().enumerate() {
            let w = weights[l];
            if w != S::zero() {
                total += w * -probs.get(t, l).max(floor).ln();
            }
        }
        self.push(
            Mat::from_vec(1, 1, vec![total]),
            Op::WeightedNll {
                logits,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Gradients of the scalar node `root` with respect to every parameter
    /// leaf reachable from it, as `(param id, gradient)` pairs. Parameters
    /// used more than once have their contributions summed.
    pub fn backward(&self, root: Var) -> Vec<(usize, Mat<S>)> {
        assert_eq!(self.value(root).shape(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Mat<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::filled(1, 1, S::one()));
        let mut out = Vec::new();
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, i, g, &mut grads, &mut out);
        }
        out.sort_by_key(|(id, _)| *id);
        // merge duplicates (a parameter registered as several leaves)
        let mut merged: Vec<(usize, Mat<S>)> = Vec::with_capacity(out.len());
        for (id, g) in out {
            match merged.last_mut() {
                Some((last, acc)) if *last == id => acc.add_assign(&g),
                _ => merged.push((id, g)),
            }
        }
        merged
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(
        &self,
        node: &Node<'p, S>,
        _index: usize,
        g: Mat<S>,
        grads: &mut [Option<Mat<S>>],
        out: &mut Vec<(usize, Mat<S>)>,
    ) {
        let y = &*node.value;
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => out.push((*id, g)),
            Op::MatMul { a, b, transpose_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let da = slot(grads, *a, av.shape());
                    // c = a·b → da += g·bᵀ ; c = a·bᵀ → da += g·b
                    gemm_acc(&g, false, bv, !transpose_b, da, S::one());
                }
                if self.wants(*b) {
                    let db = slot(grads, *b, bv.shape());
                    if *transpose_b {
                        gemm_acc(&g, true, av, false, db, S::one());
                    } else {
                        gemm_acc(av, true, &g, false, db, S::one());
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(*v) {
                        slot(grads, *v, g.shape()).add_assign(&g);
                    }
                }
            }
            Op::AddRow(a, row) => {
                if self.wants(*row) {
                    let dr = slot(grads, *row, (1, g.cols()));
                    for r in 0..g.rows() {
                        for (d, &x) in dr.as_mut_slice().iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                }
                if self.wants(*a) {
                    slot(grads, *a, g.shape()).add_assign(&g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let da = slot(grads, *a, av.shape());
                    zip3(da.as_mut_slice(), g.as_slice(), bv.as_slice(), |d, g, o| *d += g * o);
                }
                if self.wants(*b) {
                    let db = slot(grads, *b, bv.shape());
                    zip3(db.as_mut_slice(), g.as_slice(), av.as_slice(), |d, g, o| *d += g * o);
                }
            }
            Op::Scale(a, s) => {
                let da = slot(grads, *a, g.shape());
                for (d, &x) in da.as_mut_slice().iter_mut().zip(g.as_slice()) {
                    *d += x * *s;
                }
            }
            Op::Sigmoid(a) => {
                let da = slot(grads, *a, g.shape());
                zip3(da.as_mut_slice(), g.as_slice(), y.as_slice(), |d, g, y| {
                    *d += g * y * (S::one() - y)
                });
            }
            Op::Tanh(a) => {
                let da = slot(grads, *a, g.shape());
                zip3(da.as_mut_slice(), g.as_slice(), y.as_slice(), |d, g, y| {
                    *d += g * (S::one() - y * y)
                });
            }
            Op::Relu(a) => {
                let da = slot(grads, *a, g.shape());
                zip3(da.as_mut_slice(), g.as_slice(), y.as_slice(), |d, g, y| {
                    if y > S::zero() {
                        *d += g
                    }
                });
            }
            Op::SliceCols(a, start) => {
                let shape = self.value(*a).shape();
                let da = slot(grads, *a, shape);
                let w = g.cols();
                for r in 0..g.rows() {
                    let dst = &mut da.row_mut(r)[*start..*start + w];
                    for (d, &x) in dst.iter_mut().zip(g.row(r)) {
                        *d += x;
                    }
                }
            }
            Op::SliceRows(a, start) => {
                let shape = self.value(*a).shape();
                let da = slot(grads, *a, shape);
                let c = g.cols();
                let dst = &mut da.as_mut_slice()[start * c..(start + g.rows()) * c];
                for (d, &x) in dst.iter_mut().zip(g.as_slice()) {
                    *d += x;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let shape = self.value(p).shape();
                    if self.wants(p) {
                        let dp = slot(grads, p, shape);
                        for r in 0..g.rows() {
                            let src = &g.row(r)[offset..offset + shape.1];
                            for (d, &x) in dp.row_mut(r).iter_mut().zip(src) {
                                *d += x;
                            }
                        }
                    }
                    offset += shape.1;
                }
            }
            Op::StackRows(parts) => {
                let c = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let shape = self.value(p).shape();
                    if self.wants(p) {
                        let dp = slot(grads, p, shape);
                        let src = &g.as_slice()[offset * c..(offset + shape.0) * c];
                        for (d, &x) in dp.as_mut_slice().iter_mut().zip(src) {
                            *d += x;
                        }
                    }
                    offset += shape.0;
                }
            }
            Op::ReverseRows(a) => {
                slot(grads, *a, g.shape()).add_assign(&reverse_rows(&g));
            }
            Op::Dropout(a, mask) => {
                let da = slot(grads, *a, g.shape());
                zip3(da.as_mut_slice(), g.as_slice(), mask, |d, g, m| *d += g * m);
            }
            Op::SoftmaxRows(a) => {
                let da = slot(grads, *a, g.shape());
                for r in 0..g.rows() {
                    let (gr, yr) = (g.row(r), y.row(r));
                    let s: S = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((d, &gi), &yi) in da.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *d += yi * (gi - s);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = g.shape();
                if self.wants(*gain) {
                    let dg = slot(grads, *gain, (1, cols));
                    for r in 0..rows {
                        for ((d, &gi), &xh) in dg.as_mut_slice().iter_mut().zip(g.row(r)).zip(xhat.row(r)) {
                            *d += gi * xh;
                        }
                    }
                }
                if self.wants(*bias) {
                    let db = slot(grads, *bias, (1, cols));
                    for r in 0..rows {
                        for (d, &gi) in db.as_mut_slice().iter_mut().zip(g.row(r)) {
                            *d += gi;
                        }
                    }
                }
                if self.wants(*x) {
                    let gv = self.value(*gain).as_slice().to_vec();
                    let n = S::lit(cols as f64);
                    let dx = slot(grads, *x, (rows, cols));
                    let mut dxhat = vec![S::zero(); cols];
                    for (r, &is) in inv_std.iter().enumerate().take(rows) {
                        let (gr, xh) = (g.row(r), xhat.row(r));
                        for c in 0..cols {
                            dxhat[c] = gr[c] * gv[c];
                        }
                        let sum: S = dxhat.iter().copied().sum();
                        let dot: S = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum();
                        let k = is / n;
                        for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                            *d += k * (n * dxhat[c] - sum - xh[c] * dot);
                        }
                    }
                }
            }
            Op::WeightedNll {
                logits,
                labels,
                weights,
                probs,
            } => {
                let upstream = g.get(0, 0);
                let floor = S::lit(LOG_FLOOR);
                let dz = slot(grads, *logits, probs.shape());
                for (t, &l) in labels.iter().enumerate() {
                    let w = weights[l];
                    if w == S::zero() || probs.get(t, l) < floor {
                        continue;
                    }
                    let k = upstream * w;
                    let row = dz.row_mut(t);
                    for (c, d) in row.iter_mut().enumerate() {
                        let onehot = if c == l { S::one() } else { S::zero() };
                        *d += k * (probs.get(t, c) - onehot);
                    }
                }
            }
        }
    }
}

fn slot<S: Real>(grads: &mut [Option<Mat<S>>], v: Var, shape: (usize, usize)) -> &mut Mat<S> {
    grads[v.0].get_or_insert_with(|| Mat::zeros(shape.0, shape.1))
}

#[inline]
fn zip3<S: Real>(d: &mut [S], a: &[S], b: &[S], f: impl Fn(&mut S, S, S)) {
    for ((x, &p), &q) in d.iter_mut().zip(a).zip(b) {
        f(x, p, q);
    }
}

#[inline]
pub fn sigmoid<S: Real>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

pub fn softmax_rows<S: Real>(z: &Mat<S>) -> Mat<S> {
    let mut out = z.clone();
    let cols = out.cols();
    for row in out.as_mut_slice().chunks_mut(cols) {
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
    out
}

pub fn reverse_rows<S: Real>(m: &Mat<S>) -> Mat<S> {
    let mut data = Vec::with_capacity(m.len());
    for r in (0..m.rows()).rev() {
        data.extend_from_slice(m.row(r));
    }
    Mat::from_vec(m.rows(), m.cols(), data)
}
