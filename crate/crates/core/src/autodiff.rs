//! Tape-based reverse-mode differentiation over row-major 2-D tensors.
//!
//! Every operation evaluates eagerly when it is recorded, so values are
//! available mid-graph (autoregressive sampling relies on this). Calling
//! [`Graph::backward`] walks the tape in reverse and accumulates exact
//! gradients for every node that feeds the root.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};

use num_traits::{Float, FromPrimitive};

/// Floating-point element type usable by the tape.
pub trait Scalar:
    Float + FromPrimitive + Debug + Default + Send + Sync + Sum + AddAssign + MulAssign + 'static
{
    /// `c = alpha * a @ b + beta * c` with explicit row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    );

    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("representable")
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let max_index = |rows: usize, cols: usize, rs: isize, cs: isize| {
                    if rows == 0 || cols == 0 {
                        0
                    } else {
                        (rows as isize - 1) * rs + (cols as isize - 1) * cs + 1
                    }
                };
                assert!(a.len() as isize >= max_index(m, k, rsa, csa));
                assert!(b.len() as isize >= max_index(k, n, rsb, csb));
                // SAFETY: bounds of all three operands were checked above
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length mismatch");
        Tensor { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn scalar(&self) -> T {
        assert_eq!(self.data.len(), 1, "not a scalar");
        self.data[0]
    }

    fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Input,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Ln(Var),
    GatherRows(Var, Vec<Option<usize>>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    LstmCell(Var, Var),
    /// Per-row cross entropy; keeps the softmax probabilities.
    CrossEntropy(Var, Vec<usize>, Tensor<T>),
    SegmentSum(Var, Vec<usize>),
    SumCols(Var),
    Hinge(Var, T),
    Mean(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn softplus<T: Scalar>(x: T) -> T {
    // log(1 + e^x) without overflow
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Recorded computation.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// A leaf: constant input or trainable parameter.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dimensions {k} vs {k2}");
        let mut out = Tensor::zeros(n, m);
        let (av, bv) = (self.value(a), self.value(b));
        T::gemm(
            n,
            k,
            m,
            T::one(),
            &av.data,
            k as isize,
            1,
            &bv.data,
            m as isize,
            1,
            T::zero(),
            &mut out.data,
        );
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "add shape mismatch");
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_vec(av.rows, av.cols, data);
        self.push(out, Op::Add(a, b))
    }

    /// Broadcast-add a `1 x m` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!((1, av.cols), rv.shape(), "add_row shape mismatch");
        let mut out = av.clone();
        for r in 0..out.rows {
            for (x, &b) in out.row_mut(r).iter_mut().zip(&rv.data) {
                *x += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mul shape mismatch");
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_vec(av.rows, av.cols, data);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x + s);
        self.push(out, Op::AddScalar(a, s))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        self.push(out, Op::Tanh(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        self.push(out, Op::Softplus(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.ln());
        self.push(out, Op::Ln(a))
    }

    /// `out[i] = table[idx[i]]`, or a zero row for `None`.
    pub fn gather_rows(&mut self, table: Var, idx: Vec<Option<usize>>) -> Var {
        let t = self.value(table);
        let mut out = Tensor::zeros(idx.len(), t.cols);
        for (i, &j) in idx.iter().enumerate() {
            if let Some(j) = j {
                out.row_mut(i).copy_from_slice(t.row(j));
            }
        }
        self.push(out, Op::GatherRows(table, idx))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[offset..offset + v.cols].copy_from_slice(v.row(r));
            }
            offset += v.cols;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a);
        assert!(start + len <= v.cols, "slice_cols out of range");
        let mut out = Tensor::zeros(v.rows, len);
        for r in 0..v.rows {
            out.row_mut(r).copy_from_slice(&v.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&v.data);
            rows += v.rows;
        }
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a);
        assert!(start + len <= v.rows, "slice_rows out of range");
        let data = v.data[start * v.cols..(start + len) * v.cols].to_vec();
        self.push(Tensor::from_vec(len, v.cols, data), Op::SliceRows(a, start))
    }

    /// LSTM cell on pre-activation gates `[n x 4H]` (input, forget, cell,
    /// output) and previous cell state `[n x H]`; returns `[h | c]`.
    pub fn lstm_cell(&mut self, gates: Var, c_prev: Var) -> Var {
        let (g, c0) = (self.value(gates), self.value(c_prev));
        let (n, h) = c0.shape();
        assert_eq!(g.shape(), (n, 4 * h), "lstm gate shape");
        let mut out = Tensor::zeros(n, 2 * h);
        for r in 0..n {
            let gr = g.row(r);
            let cr = c0.row(r);
            let o = out.row_mut(r);
            for j in 0..h {
                let i = sigmoid(gr[j]);
                let f = sigmoid(gr[h + j]);
                let cand = gr[2 * h + j].tanh();
                let og = sigmoid(gr[3 * h + j]);
                let c = f * cr[j] + i * cand;
                o[h + j] = c;
                o[j] = og * c.tanh();
            }
        }
        self.push(out, Op::LstmCell(gates, c_prev))
    }

    /// Row-wise `-log softmax(logits)[target]`, shape `[n x 1]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Var {
        let l = self.value(logits);
        assert_eq!(l.rows, targets.len(), "one target per row");
        let mut probs = Tensor::zeros(l.rows, l.cols);
        let mut out = Tensor::zeros(l.rows, 1);
        for r in 0..l.rows {
            let row = l.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let p = probs.row_mut(r);
            let mut total = T::zero();
            for (pi, &x) in p.iter_mut().zip(row) {
                *pi = (x - max).exp();
                total += *pi;
            }
            for pi in p.iter_mut() {
                *pi = *pi / total;
            }
            out.data[r] = total.ln() + max - row[targets[r]];
        }
        self.push(out, Op::CrossEntropy(logits, targets, probs))
    }

    /// Sum rows into `segments` buckets: `out[seg[i]] += a[i]`.
    pub fn segment_sum(&mut self, a: Var, seg: Vec<usize>, segments: usize) -> Var {
        let v = self.value(a);
        assert_eq!(v.rows, seg.len(), "one segment id per row");
        let mut out = Tensor::zeros(segments, v.cols);
        for (r, &s) in seg.iter().enumerate() {
            for (o, &x) in out.row_mut(s).iter_mut().zip(v.row(r)) {
                *o += x;
            }
        }
        self.push(out, Op::SegmentSum(a, seg))
    }

    /// Row sums, shape `[n x 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let data = (0..v.rows).map(|r| v.row(r).iter().copied().sum()).collect();
        self.push(Tensor::from_vec(v.rows, 1, data), Op::SumCols(a))
    }

    /// `max(a - threshold, 0)`; the subgradient at the kink is 0.
    pub fn hinge(&mut self, a: Var, threshold: T) -> Var {
        let out = self.value(a).map(|x| (x - threshold).max(T::zero()));
        self.push(out, Op::Hinge(a, threshold))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let n = T::from_usize(v.data.len()).unwrap();
        let m = v.data.iter().copied().sum::<T>() / n;
        self.push(Tensor::from_vec(1, 1, vec![m]), Op::Mean(a))
    }

    /// Gradients of a scalar root with respect to every node.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.shape(root), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::from_vec(1, 1, vec![T::one()]));
        for idx in (0..=root.0).rev() {
            let Some(grad) = grads[idx].take() else { continue };
            self.backprop_node(idx, &grad, &mut grads);
            grads[idx] = Some(grad);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, idx: usize, grad: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut Tensor<T>)| {
            debug_assert!(v.0 < idx);
            let (r, c) = self.shape(v);
            let g = grads[v.0].get_or_insert_with(|| Tensor::zeros(r, c));
            f(g);
        };
        match &node.op {
            Op::Input => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k) = av.shape();
                let m = bv.cols;
                // dA += dC @ B^T ; dB += A^T @ dC
                acc(*a, &mut |ga| {
                    T::gemm(
                        n,
                        m,
                        k,
                        T::one(),
                        &grad.data,
                        m as isize,
                        1,
                        &bv.data,
                        1,
                        m as isize,
                        T::one(),
                        &mut ga.data,
                    )
                });
                acc(*b, &mut |gb| {
                    T::gemm(
                        k,
                        n,
                        m,
                        T::one(),
                        &av.data,
                        1,
                        k as isize,
                        &grad.data,
                        m as isize,
                        1,
                        T::one(),
                        &mut gb.data,
                    )
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |g| g.add_assign(grad));
                acc(*b, &mut |g| g.add_assign(grad));
            }
            Op::AddRow(a, row) => {
                acc(*a, &mut |g| g.add_assign(grad));
                acc(*row, &mut |g| {
                    for r in 0..grad.rows {
                        for (x, &d) in g.data.iter_mut().zip(grad.row(r)) {
                            *x += d;
                        }
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |g| {
                    for ((x, &d), &y) in g.data.iter_mut().zip(&grad.data).zip(&bv.data) {
                        *x += d * y;
                    }
                });
                acc(*b, &mut |g| {
                    for ((x, &d), &y) in g.data.iter_mut().zip(&grad.data).zip(&av.data) {
                        *x += d * y;
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |g| {
                for (x, &d) in g.data.iter_mut().zip(&grad.data) {
                    *x += d * *s;
                }
            }),
            Op::AddScalar(a, _) => acc(*a, &mut |g| g.add_assign(grad)),
            Op::Sigmoid(a) => acc(*a, &mut |g| {
                for ((x, &d), &y) in g.data.iter_mut().zip(&grad.data).zip(&out.data) {
                    *x += d * y * (T::one() - y);
                }
            }),
            Op::Tanh(a) => acc(*a, &mut |g| {
                for ((x, &d), &y) in g.data.iter_mut().zip(&grad.data).zip(&out.data) {
                    *x += d * (T::one() - y * y);
                }
            }),
            Op::Softplus(a) => {
                let av = self.value(*a);
                acc(*a, &mut |g| {
                    for ((x, &d), &y) in g.data.iter_mut().zip(&grad.data).zip(&av.data) {
                        *x += d * sigmoid(y);
                    }
                })
            }
            Op::Ln(a) => {
                let av = self.value(*a);
                acc(*a, &mut |g| {
                    for ((x, &d), &y) in g.data.iter_mut().zip(&grad.data).zip(&av.data) {
                        *x += d / y;
                    }
                })
            }
            Op::GatherRows(table, idx) => acc(*table, &mut |g| {
                for (i, &j) in idx.iter().enumerate() {
                    if let Some(j) = j {
                        for (x, &d) in g.row_mut(j).iter_mut().zip(grad.row(i)) {
                            *x += d;
                        }
                    }
                }
            }),
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    acc(p, &mut |g| {
                        for r in 0..grad.rows {
                            for (x, &d) in g.row_mut(r).iter_mut().zip(&grad.row(r)[offset..offset + w]) {
                                *x += d;
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => acc(*a, &mut |g| {
                for r in 0..grad.rows {
                    for (x, &d) in g.row_mut(r)[*start..*start + grad.cols].iter_mut().zip(grad.row(r)) {
                        *x += d;
                    }
                }
            }),
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).data.len();
                    acc(p, &mut |g| {
                        for (x, &d) in g.data.iter_mut().zip(&grad.data[offset..offset + len]) {
                            *x += d;
                        }
                    });
                    offset += len;
                }
            }
            Op::SliceRows(a, start) => acc(*a, &mut |g| {
                let off = start * grad.cols;
                for (x, &d) in g.data[off..off + grad.data.len()].iter_mut().zip(&grad.data) {
                    *x += d;
                }
            }),
            Op::LstmCell(gates, c_prev) => {
                let (gv, cv) = (self.value(*gates), self.value(*c_prev));
                let (n, h) = cv.shape();
                let mut dgates = Tensor::zeros(n, 4 * h);
                let mut dc_prev = Tensor::zeros(n, h);
                for r in 0..n {
                    let gr = gv.row(r);
                    let cr = cv.row(r);
                    let or = out.row(r);
                    let dr = grad.row(r);
                    let dg = dgates.row_mut(r);
                    for j in 0..h {
                        let i = sigmoid(gr[j]);
                        let f = sigmoid(gr[h + j]);
                        let cand = gr[2 * h + j].tanh();
                        let og = sigmoid(gr[3 * h + j]);
                        let tc = or[h + j].tanh();
                        let dh = dr[j];
                        let dc = dr[h + j] + dh * og * (T::one() - tc * tc);
                        dg[j] = dc * cand * i * (T::one() - i);
                        dg[h + j] = dc * cr[j] * f * (T::one() - f);
                        dg[2 * h + j] = dc * i * (T::one() - cand * cand);
                        dg[3 * h + j] = dh * tc * og * (T::one() - og);
                        dc_prev.row_mut(r)[j] = dc * f;
                    }
                }
                acc(*gates, &mut |g| g.add_assign(&dgates));
                acc(*c_prev, &mut |g| g.add_assign(&dc_prev));
            }
            Op::CrossEntropy(logits, targets, probs) => acc(*logits, &mut |g| {
                for (r, &t) in targets.iter().enumerate() {
                    let d = grad.data[r];
                    let p = probs.row(r);
                    let gr = g.row_mut(r);
                    for (x, &pi) in gr.iter_mut().zip(p) {
                        *x += d * pi;
                    }
                    gr[t] = gr[t] - d;
                }
            }),
            Op::SegmentSum(a, seg) => acc(*a, &mut |g| {
                for (r, &s) in seg.iter().enumerate() {
                    for (x, &d) in g.row_mut(r).iter_mut().zip(grad.row(s)) {
                        *x += d;
                    }
                }
            }),
            Op::SumCols(a) => acc(*a, &mut |g| {
                for r in 0..g.rows {
                    let d = grad.data[r];
                    for x in g.row_mut(r) {
                        *x += d;
                    }
                }
            }),
            Op::Hinge(a, threshold) => {
                let av = self.value(*a);
                acc(*a, &mut |g| {
                    for ((x, &d), &y) in g.data.iter_mut().zip(&grad.data).zip(&av.data) {
                        if y > *threshold {
                            *x += d;
                        }
                    }
                })
            }
            Op::Mean(a) => {
                let n = T::from_usize(self.value(*a).data.len()).unwrap();
                let d = grad.data[0] / n;
                acc(*a, &mut |g| {
                    for x in g.data.iter_mut() {
                        *x += d;
                    }
                })
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the root with respect to `v`; `None` when `v` does not
    /// influence the root.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].take()
    }
}
