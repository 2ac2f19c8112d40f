//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Every operation appends a node holding its forward value; [`Tape::backward`]
//! walks the nodes in reverse and accumulates exact gradients into every node
//! that depends on a parameter leaf. The op set is exactly what the recommender
//! needs: affine maps, sparse propagation, softmax routing, Top-K renormalization,
//! row gathers/scatters for sparse expert dispatch, and the loss reductions.

use std::rc::Rc;

use crate::scalar::Scalar;
use crate::tensor::{Csr, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    ScaleBy(Var, Var, usize),
    Tanh(Var),
    Softplus(Var),
    SoftmaxRows(Var),
    EntropyRows(Var),
    LogSumExpRows(Var),
    Diag(Var),
    SumRows(Var),
    ColMean(Var),
    SumAll(Var),
    SumSquares(Var),
    Gather(Var, Rc<[usize]>),
    ScatterAdd(Var, Rc<[usize]>),
    GatherCol(Var, Rc<[usize]>, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Spmm(Rc<Csr<T>>, Var),
    TopKRenorm(Var, Rc<[Vec<usize>]>),
    SimplexRows(Var),
    RowNormalize(Var, T),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar output with respect to every node on the tape.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`; `None` when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMulT(a, b), ng)
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Matrix<T> {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "elementwise shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Matrix::from_vec(x.rows(), x.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |p, q| p + q);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |p, q| p - q);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |p, q| p * q);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x * c);
        let ng = self.needs(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x + c);
        let ng = self.needs(a);
        self.push(v, Op::AddScalar(a), ng)
    }

    /// `a + b` with `b` a 1×m row broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (x, bias) = (self.value(a), self.value(b));
        assert_eq!(bias.shape(), (1, x.cols()), "add_row bias shape");
        let mut v = x.clone();
        for r in 0..v.rows() {
            for (o, &bb) in v.row_mut(r).iter_mut().zip(bias.data()) {
                *o += bb;
            }
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::AddRow(a, b), ng)
    }

    /// Scales row r of `a` by `c[r]` for an n×1 column `c`.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Var {
        let (x, col) = (self.value(a), self.value(c));
        assert_eq!(col.shape(), (x.rows(), 1), "mul_col column shape");
        let mut v = x.clone();
        for r in 0..v.rows() {
            let s = col.data()[r];
            for o in v.row_mut(r) {
                *o *= s;
            }
        }
        let ng = self.needs(a) || self.needs(c);
        self.push(v, Op::MulCol(a, c), ng)
    }

    /// Scales all of `a` by the entry `w[k]` of another node.
    pub fn scale_by(&mut self, a: Var, w: Var, k: usize) -> Var {
        let s = self.value(w).data()[k];
        let v = self.value(a).map(|x| x * s);
        let ng = self.needs(a) || self.needs(w);
        self.push(v, Op::ScaleBy(a, w, k), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.tanh());
        let ng = self.needs(a);
        self.push(v, Op::Tanh(a), ng)
    }

    /// `ln(1 + e^x)` evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        let ng = self.needs(a);
        self.push(v, Op::Softplus(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            softmax_in_place(v.row_mut(r));
        }
        let ng = self.needs(a);
        self.push(v, Op::SoftmaxRows(a), ng)
    }

    /// Shannon entropy (nats) of each row, as an n×1 column.
    pub fn entropy_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = (0..x.rows()).map(|r| entropy(x.row(r))).collect();
        let v = Matrix::from_vec(x.rows(), 1, data);
        let ng = self.needs(a);
        self.push(v, Op::EntropyRows(a), ng)
    }

    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = (0..x.rows()).map(|r| logsumexp(x.row(r))).collect();
        let v = Matrix::from_vec(x.rows(), 1, data);
        let ng = self.needs(a);
        self.push(v, Op::LogSumExpRows(a), ng)
    }

    pub fn diag(&mut self, a: Var) -> Var {
        let x = self.value(a);
        assert_eq!(x.rows(), x.cols(), "diag of non-square matrix");
        let data = (0..x.rows()).map(|r| x.get(r, r)).collect();
        let v = Matrix::from_vec(x.rows(), 1, data);
        let ng = self.needs(a);
        self.push(v, Op::Diag(a), ng)
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = (0..x.rows()).map(|r| x.row(r).iter().copied().sum()).collect();
        let v = Matrix::from_vec(x.rows(), 1, data);
        let ng = self.needs(a);
        self.push(v, Op::SumRows(a), ng)
    }

    /// Mean over rows, giving a 1×m row.
    pub fn col_mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        assert!(x.rows() > 0, "col_mean of empty matrix");
        let mut acc = vec![T::zero(); x.cols()];
        for r in 0..x.rows() {
            for (o, &p) in acc.iter_mut().zip(x.row(r)) {
                *o += p;
            }
        }
        let n = T::from_usize(x.rows()).unwrap();
        let v = Matrix::from_vec(1, x.cols(), acc.into_iter().map(|s| s / n).collect());
        let ng = self.needs(a);
        self.push(v, Op::ColMean(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let ng = self.needs(a);
        self.push(Matrix::scalar(s), Op::SumAll(a), ng)
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).sum_squares();
        let ng = self.needs(a);
        self.push(Matrix::scalar(s), Op::SumSquares(a), ng)
    }

    pub fn gather_rows(&mut self, a: Var, idx: Rc<[usize]>) -> Var {
        let x = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * x.cols());
        for &i in idx.iter() {
            data.extend_from_slice(x.row(i));
        }
        let v = Matrix::from_vec(idx.len(), x.cols(), data);
        let ng = self.needs(a);
        self.push(v, Op::Gather(a, idx), ng)
    }

    /// Adds row k of `a` into row `idx[k]` of an `n`-row zero matrix.
    pub fn scatter_add_rows(&mut self, a: Var, idx: Rc<[usize]>, n: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.rows(), idx.len(), "scatter index length");
        let mut v = Matrix::zeros(n, x.cols());
        for (k, &i) in idx.iter().enumerate() {
            for (o, &p) in v.row_mut(i).iter_mut().zip(x.row(k)) {
                *o += p;
            }
        }
        let ng = self.needs(a);
        self.push(v, Op::ScatterAdd(a, idx), ng)
    }

    /// Column of entries `a[idx[k], col]`.
    pub fn gather_col(&mut self, a: Var, idx: Rc<[usize]>, col: usize) -> Var {
        let x = self.value(a);
        let data = idx.iter().map(|&i| x.get(i, col)).collect();
        let v = Matrix::from_vec(idx.len(), 1, data);
        let ng = self.needs(a);
        self.push(v, Op::GatherCol(a, idx, col), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p);
                assert_eq!(src.rows(), rows, "concat_cols row mismatch");
                v.row_mut(r)[off..off + src.cols()].copy_from_slice(src.row(r));
                off += src.cols();
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let src = self.value(p);
            assert_eq!(src.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(src.data());
            rows += src.rows();
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Constant sparse operator applied to `a`.
    pub fn spmm(&mut self, s: Rc<Csr<T>>, a: Var) -> Var {
        let v = s.spmm(self.value(a));
        let ng = self.needs(a);
        self.push(v, Op::Spmm(s, a), ng)
    }

    /// Keeps the entries listed in `selection[r]` for each row and renormalizes
    /// them to sum to one; every other entry is zero. The selection is treated
    /// as a constant.
    pub fn topk_renorm(&mut self, a: Var, selection: Rc<[Vec<usize>]>) -> Var {
        let x = self.value(a);
        assert_eq!(selection.len(), x.rows(), "selection per row");
        let mut v = Matrix::zeros(x.rows(), x.cols());
        for (r, sel) in selection.iter().enumerate() {
            let s: T = sel.iter().map(|&e| x.get(r, e)).sum();
            for &e in sel {
                v.set(r, e, x.get(r, e) / s);
            }
        }
        let ng = self.needs(a);
        self.push(v, Op::TopKRenorm(a, selection), ng)
    }

    /// Euclidean projection of each row onto the probability simplex.
    pub fn simplex_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            let p = project_simplex(v.row(r));
            v.row_mut(r).copy_from_slice(&p);
        }
        let ng = self.needs(a);
        self.push(v, Op::SimplexRows(a), ng)
    }

    /// Divides each row by `max(‖row‖, eps)`.
    pub fn row_normalize(&mut self, a: Var, eps: T) -> Var {
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            let n = v.row(r).iter().map(|&x| x * x).sum::<T>().sqrt().max(eps);
            for o in v.row_mut(r) {
                *o /= n;
            }
        }
        let ng = self.needs(a);
        self.push(v, Op::RowNormalize(a, eps), ng)
    }

    /// Reverse pass from a 1×1 output.
    pub fn backward(&self, out: Var) -> Gradients<T> {
        assert_eq!(self.value(out).shape(), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Matrix<T>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(Matrix::scalar(T::one()));
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_ref() else {
                continue;
            };
            self.backprop_node(node, g, lower);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, node: &Node<T>, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        let mut acc = |v: Var, delta: Matrix<T>| {
            if !self.needs(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(cur) => cur.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.matmul_t(self.value(*b)));
                }
                if self.needs(*b) {
                    acc(*b, self.value(*a).t_matmul(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.matmul(self.value(*b)));
                }
                if self.needs(*b) {
                    acc(*b, g.t_matmul(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (x, z) = (self.value(*a), self.value(*b));
                acc(*a, zip(g, z, |p, q| p * q));
                acc(*b, zip(g, x, |p, q| p * q));
            }
            Op::Scale(a, c) => {
                let c = *c;
                acc(*a, g.map(|x| x * c));
            }
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::AddRow(a, b) => {
                acc(*a, g.clone());
                let mut db = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, &p) in db.data_mut().iter_mut().zip(g.row(r)) {
                        *o += p;
                    }
                }
                acc(*b, db);
            }
            Op::MulCol(a, c) => {
                let (x, col) = (self.value(*a), self.value(*c));
                let mut da = g.clone();
                let mut dc = Matrix::zeros(x.rows(), 1);
                for r in 0..x.rows() {
                    let s = col.data()[r];
                    let mut dot = T::zero();
                    for (o, &xv) in da.row_mut(r).iter_mut().zip(x.row(r)) {
                        dot += *o * xv;
                        *o *= s;
                    }
                    dc.data_mut()[r] = dot;
                }
                acc(*a, da);
                acc(*c, dc);
            }
            Op::ScaleBy(a, w, k) => {
                let wm = self.value(*w);
                let s = wm.data()[*k];
                acc(*a, g.map(|x| x * s));
                if self.needs(*w) {
                    let dot: T = g.data().iter().zip(self.value(*a).data()).map(|(&p, &q)| p * q).sum();
                    let mut dw = Matrix::zeros(wm.rows(), wm.cols());
                    dw.data_mut()[*k] = dot;
                    acc(*w, dw);
                }
            }
            Op::Tanh(a) => acc(*a, zip(g, y, |p, t| p * (T::one() - t * t))),
            Op::Softplus(a) => acc(*a, zip(g, self.value(*a), |p, x| p * sigmoid(x))),
            Op::SoftmaxRows(a) => {
                let mut da = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: T = g.row(r).iter().zip(y.row(r)).map(|(&p, &q)| p * q).sum();
                    for ((o, &p), &q) in da.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = q * (p - dot);
                    }
                }
                acc(*a, da);
            }
            Op::EntropyRows(a) => {
                let x = self.value(*a);
                let mut da = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let gr = g.data()[r];
                    for (o, &p) in da.row_mut(r).iter_mut().zip(x.row(r)) {
                        if p > T::zero() {
                            *o = -gr * (p.ln() + T::one());
                        }
                    }
                }
                acc(*a, da);
            }
            Op::LogSumExpRows(a) => {
                let x = self.value(*a);
                let mut da = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let (gr, lse) = (g.data()[r], y.data()[r]);
                    for (o, &p) in da.row_mut(r).iter_mut().zip(x.row(r)) {
                        *o = gr * (p - lse).exp();
                    }
                }
                acc(*a, da);
            }
            Op::Diag(a) => {
                let n = g.rows();
                let mut da = Matrix::zeros(n, n);
                for r in 0..n {
                    da.set(r, r, g.data()[r]);
                }
                acc(*a, da);
            }
            Op::SumRows(a) => {
                let x = self.value(*a);
                let mut da = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let gr = g.data()[r];
                    da.row_mut(r).iter_mut().for_each(|o| *o = gr);
                }
                acc(*a, da);
            }
            Op::ColMean(a) => {
                let x = self.value(*a);
                let n = T::from_usize(x.rows()).unwrap();
                let mut da = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    for (o, &p) in da.row_mut(r).iter_mut().zip(g.data()) {
                        *o = p / n;
                    }
                }
                acc(*a, da);
            }
            Op::SumAll(a) => {
                let x = self.value(*a);
                acc(*a, Matrix::filled(x.rows(), x.cols(), g.item()));
            }
            Op::SumSquares(a) => {
                let two_g = g.item() + g.item();
                acc(*a, self.value(*a).map(|x| two_g * x));
            }
            Op::Gather(a, idx) => {
                let x = self.value(*a);
                let mut da = Matrix::zeros(x.rows(), x.cols());
                for (k, &i) in idx.iter().enumerate() {
                    for (o, &p) in da.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += p;
                    }
                }
                acc(*a, da);
            }
            Op::ScatterAdd(a, idx) => {
                let mut da = Matrix::zeros(idx.len(), g.cols());
                for (k, &i) in idx.iter().enumerate() {
                    da.row_mut(k).copy_from_slice(g.row(i));
                }
                acc(*a, da);
            }
            Op::GatherCol(a, idx, col) => {
                let x = self.value(*a);
                let mut da = Matrix::zeros(x.rows(), x.cols());
                for (k, &i) in idx.iter().enumerate() {
                    let cur = da.get(i, *col);
                    da.set(i, *col, cur + g.data()[k]);
                }
                acc(*a, da);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.needs(p) {
                        let mut dp = Matrix::zeros(g.rows(), c);
                        for r in 0..g.rows() {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[off..off + c]);
                        }
                        acc(p, dp);
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.value(p).shape();
                    if self.needs(p) {
                        let data = g.data()[off * c..(off + r) * c].to_vec();
                        acc(p, Matrix::from_vec(r, c, data));
                    }
                    off += r;
                }
            }
            Op::Spmm(s, a) => acc(*a, s.t_spmm(g)),
            Op::TopKRenorm(a, selection) => {
                let x = self.value(*a);
                let mut da = Matrix::zeros(x.rows(), x.cols());
                for (r, sel) in selection.iter().enumerate() {
                    let s: T = sel.iter().map(|&e| x.get(r, e)).sum();
                    let dot: T = sel.iter().map(|&e| g.get(r, e) * x.get(r, e)).sum();
                    for &f in sel {
                        da.set(r, f, g.get(r, f) / s - dot / (s * s));
                    }
                }
                acc(*a, da);
            }
            Op::SimplexRows(a) => {
                let mut da = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let support: Vec<usize> = (0..y.cols()).filter(|&c| y.get(r, c) > T::zero()).collect();
                    let n = T::from_usize(support.len()).unwrap();
                    let mean = support.iter().map(|&c| g.get(r, c)).sum::<T>() / n;
                    for &c in &support {
                        da.set(r, c, g.get(r, c) - mean);
                    }
                }
                acc(*a, da);
            }
            Op::RowNormalize(a, eps) => {
                let x = self.value(*a);
                let mut da = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let norm = x.row(r).iter().map(|&v| v * v).sum::<T>().sqrt();
                    if norm > *eps {
                        let dot: T = g.row(r).iter().zip(y.row(r)).map(|(&p, &q)| p * q).sum();
                        for ((o, &p), &q) in da.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *o = (p - q * dot) / norm;
                        }
                    } else {
                        for (o, &p) in da.row_mut(r).iter_mut().zip(g.row(r)) {
                            *o = p / *eps;
                        }
                    }
                }
                acc(*a, da);
            }
        }
    }
}

fn zip<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, f: impl Fn(T, T) -> T) -> Matrix<T> {
    let data = a.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect();
    Matrix::from_vec(a.rows(), a.cols(), data)
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in row.iter_mut() {
        *x /= s;
    }
}

pub fn logsumexp<T: Scalar>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    m + row.iter().map(|&x| (x - m).exp()).sum::<T>().ln()
}

/// Shannon entropy in nats with `0 ln 0 = 0`.
pub fn entropy<T: Scalar>(p: &[T]) -> T {
    -p.iter()
        .filter(|&&x| x > T::zero())
        .map(|&x| x * x.ln())
        .sum::<T>()
}

/// Euclidean projection onto `{w ≥ 0, Σw = 1}` (sort-and-threshold).
pub fn project_simplex<T: Scalar>(v: &[T]) -> Vec<T> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cum = T::zero();
    let mut theta = T::zero();
    for (j, &uj) in u.iter().enumerate() {
        cum += uj;
        let t = (cum - T::one()) / T::from_usize(j + 1).unwrap();
        if uj - t > T::zero() {
            theta = t;
        }
    }
    v.iter().map(|&x| (x - theta).max(T::zero())).collect()
}
