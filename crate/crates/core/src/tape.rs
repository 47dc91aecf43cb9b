//! Reverse-mode automatic differentiation over row-major matrices.
//!
//! The tape records every operation in evaluation order. Gradients are
//! computed with the same scalar type the forward pass used, so a tape on
//! [`Dual`](crate::scalar::Dual) values produces exact directional
//! derivatives of the gradient.

use crate::scalar::Scalar;
use crate::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc, Tensor};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Affine(Var, f64),
    Silu(Var),
    LayerNorm(Var, Vec<T>),
    Softmax(Var),
    Gather(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SegmentMean(Var, Vec<usize>),
    ColumnMean(Var),
    Mae(Var, Tensor<T>),
    Mse(Var, Tensor<T>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::with_capacity(256) }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols, bv.rows, "matmul inner dims");
        let (n, k, m) = (av.rows, av.cols, bv.cols);
        let mut out = Tensor::zeros(n, m);
        matmul_acc(&av.data, &bv.data, &mut out.data, n, k, m);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols, bv.cols, "matmul_bt inner dims");
        let (n, k, m) = (av.rows, av.cols, bv.rows);
        let mut out = Tensor::zeros(n, m);
        matmul_bt_acc(&av.data, &bv.data, &mut out.data, n, k, m);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMulBt(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "add shapes");
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_vec(av.rows, av.cols, data);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    /// Broadcast-add a `1×m` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert!(rv.rows == 1 && rv.cols == av.cols, "add_row shapes {:?} {:?}", av.shape(), rv.shape());
        let mut out = av.clone();
        for r in 0..out.rows {
            for (o, &b) in out.row_mut(r).iter_mut().zip(&rv.data) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::AddRow(a, row), ng)
    }

    /// Broadcast-multiply every row of `a` by a `1×m` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert!(rv.rows == 1 && rv.cols == av.cols, "mul_row shapes");
        let mut out = av.clone();
        for r in 0..out.rows {
            for (o, &b) in out.row_mut(r).iter_mut().zip(&rv.data) {
                *o *= b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::MulRow(a, row), ng)
    }

    /// `scale·a + shift`
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let av = self.value(a);
        let data = av.data.iter().map(|&x| x.scale(scale) + T::from_f64(shift)).collect();
        let out = Tensor::from_vec(av.rows, av.cols, data);
        let ng = self.ng(a);
        self.push(out, Op::Affine(a, scale), ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.affine(a, k, 0.0)
    }

    /// `x·σ(x)`
    pub fn silu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = av.data.iter().map(|&x| x * x.sigmoid()).collect();
        let out = Tensor::from_vec(av.rows, av.cols, data);
        let ng = self.ng(a);
        self.push(out, Op::Silu(a), ng)
    }

    /// Per-row standardization without affine terms.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let m = av.cols;
        let inv_m = 1.0 / m as f64;
        let mut out = Tensor::zeros(av.rows, m);
        let mut rstds = Vec::with_capacity(av.rows);
        for r in 0..av.rows {
            let row = av.row(r);
            let mut mean = T::zero();
            for &x in row {
                mean += x;
            }
            mean = mean.scale(inv_m);
            let mut var = T::zero();
            for &x in row {
                let d = x - mean;
                var += d * d;
            }
            let rstd = (var.scale(inv_m) + T::from_f64(LN_EPS)).sqrt().recip();
            for (o, &x) in out.row_mut(r).iter_mut().zip(row) {
                *o = (x - mean) * rstd;
            }
            rstds.push(rstd);
        }
        let ng = self.ng(a);
        self.push(out, Op::LayerNorm(a, rstds), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = Tensor::zeros(av.rows, av.cols);
        for r in 0..av.rows {
            let row = av.row(r);
            let mx = row.iter().map(|x| x.re()).fold(f64::NEG_INFINITY, f64::max);
            let mx = T::from_f64(mx);
            let mut total = T::zero();
            let orow = out.row_mut(r);
            for (o, &x) in orow.iter_mut().zip(row) {
                *o = (x - mx).exp();
                total += *o;
            }
            let inv = total.recip();
            for o in orow.iter_mut() {
                *o *= inv;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a), ng)
    }

    /// Row gather: output row `i` is `a[idx[i]]`. Covers embedding lookup
    /// and length regulation.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let av = self.value(a);
        let mut out = Tensor::zeros(idx.len(), av.cols);
        for (i, &src) in idx.iter().enumerate() {
            assert!(src < av.rows, "gather index {src} out of {} rows", av.rows);
            out.row_mut(i).copy_from_slice(av.row(src));
        }
        let ng = self.ng(a);
        self.push(out, Op::Gather(a, idx), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let av = self.value(a);
        assert!(start + width <= av.cols);
        let mut out = Tensor::zeros(av.rows, width);
        for r in 0..av.rows {
            out.row_mut(r).copy_from_slice(&av.row(r)[start..start + width]);
        }
        let ng = self.ng(a);
        self.push(out, Op::SliceCols(a, start), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows, rows, "concat rows");
            for r in 0..rows {
                out.row_mut(r)[off..off + pv.cols].copy_from_slice(pv.row(r));
            }
            off += pv.cols;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Mean-pool consecutive row segments of the given lengths.
    pub fn segment_mean(&mut self, a: Var, lens: Vec<usize>) -> Var {
        let av = self.value(a);
        assert_eq!(lens.iter().sum::<usize>(), av.rows, "segment lengths must cover all rows");
        let mut out = Tensor::<T>::zeros(lens.len(), av.cols);
        let mut start = 0;
        for (i, &len) in lens.iter().enumerate() {
            assert!(len > 0, "empty segment");
            let inv = 1.0 / len as f64;
            let orow = out.row_mut(i);
            for r in start..start + len {
                for (o, &x) in orow.iter_mut().zip(av.row(r)) {
                    *o += x;
                }
            }
            for o in orow.iter_mut() {
                *o = o.scale(inv);
            }
            start += len;
        }
        let ng = self.ng(a);
        self.push(out, Op::SegmentMean(a, lens), ng)
    }

    /// Mean over rows, giving a `1×m` row.
    pub fn column_mean(&mut self, a: Var) -> Var {
        let rows = self.value(a).rows;
        self.push_column_mean(a, rows)
    }

    fn push_column_mean(&mut self, a: Var, rows: usize) -> Var {
        let av = self.value(a);
        let inv = 1.0 / rows as f64;
        let mut out = Tensor::<T>::zeros(1, av.cols);
        for r in 0..rows {
            for (o, &x) in out.data.iter_mut().zip(av.row(r)) {
                *o += x;
            }
        }
        for o in out.data.iter_mut() {
            *o = o.scale(inv);
        }
        let ng = self.ng(a);
        self.push(out, Op::ColumnMean(a), ng)
    }

    /// Mean absolute error against a constant target, as a `1×1` node.
    pub fn mae(&mut self, a: Var, target: Tensor<T>) -> Var {
        let av = self.value(a);
        assert_eq!(av.shape(), target.shape(), "mae shapes");
        let mut s = T::zero();
        for (&x, &t) in av.data.iter().zip(&target.data) {
            let d = x - t;
            s += if d.re() < 0.0 { -d } else { d };
        }
        let out = Tensor::from_vec(1, 1, vec![s.scale(1.0 / av.len() as f64)]);
        let ng = self.ng(a);
        self.push(out, Op::Mae(a, target), ng)
    }

    /// Mean squared error against a constant target, as a `1×1` node.
    pub fn mse(&mut self, a: Var, target: Tensor<T>) -> Var {
        let av = self.value(a);
        assert_eq!(av.shape(), target.shape(), "mse shapes");
        let mut s = T::zero();
        for (&x, &t) in av.data.iter().zip(&target.data) {
            let d = x - t;
            s += d * d;
        }
        let out = Tensor::from_vec(1, 1, vec![s.scale(1.0 / av.len() as f64)]);
        let ng = self.ng(a);
        self.push(out, Op::Mse(a, target), ng)
    }

    /// Reverse sweep from a `1×1` output. Every node's gradient (if any
    /// flowed to it) is available through [`Gradients::get`].
    pub fn backward(&self, output: Var) -> Gradients<T> {
        self.backward_seeded(output, T::one())
    }

    pub fn backward_seeded(&self, output: Var, seed: T) -> Gradients<T> {
        let out_v = self.value(output);
        assert_eq!(out_v.shape(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::from_vec(1, 1, vec![seed]));

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (n, k, m) = (av.rows, av.cols, bv.cols);
                    if self.ng(*a) {
                        let ga = grad_slot(&mut grads, *a, n, k);
                        matmul_bt_acc(&g.data, &bv.data, &mut ga.data, n, m, k);
                    }
                    if self.ng(*b) {
                        let gb = grad_slot(&mut grads, *b, k, m);
                        matmul_at_acc(&av.data, &g.data, &mut gb.data, n, k, m);
                    }
                }
                Op::MatMulBt(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (n, k, m) = (av.rows, av.cols, bv.rows);
                    if self.ng(*a) {
                        let ga = grad_slot(&mut grads, *a, n, k);
                        matmul_acc(&g.data, &bv.data, &mut ga.data, n, m, k);
                    }
                    if self.ng(*b) {
                        let gb = grad_slot(&mut grads, *b, m, k);
                        matmul_at_acc(&g.data, &av.data, &mut gb.data, n, m, k);
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if self.ng(v) {
                            grad_slot(&mut grads, v, g.rows, g.cols).accumulate(&g);
                        }
                    }
                }
                Op::AddRow(a, r) => {
                    if self.ng(*a) {
                        grad_slot(&mut grads, *a, g.rows, g.cols).accumulate(&g);
                    }
                    if self.ng(*r) {
                        let gr = grad_slot(&mut grads, *r, 1, g.cols);
                        for row in 0..g.rows {
                            for (o, &x) in gr.data.iter_mut().zip(g.row(row)) {
                                *o += x;
                            }
                        }
                    }
                }
                Op::MulRow(a, r) => {
                    let (av, rv) = (self.value(*a), self.value(*r));
                    if self.ng(*a) {
                        let ga = grad_slot(&mut grads, *a, g.rows, g.cols);
                        for row in 0..g.rows {
                            for ((o, &x), &s) in ga.row_mut(row).iter_mut().zip(g.row(row)).zip(&rv.data) {
                                *o += x * s;
                            }
                        }
                    }
                    if self.ng(*r) {
                        let gr = grad_slot(&mut grads, *r, 1, g.cols);
                        for row in 0..g.rows {
                            for ((o, &x), &y) in gr.data.iter_mut().zip(g.row(row)).zip(av.row(row)) {
                                *o += x * y;
                            }
                        }
                    }
                }
                Op::Affine(a, s) => {
                    let ga = grad_slot(&mut grads, *a, g.rows, g.cols);
                    for (o, &x) in ga.data.iter_mut().zip(&g.data) {
                        *o += x.scale(*s);
                    }
                }
                Op::Silu(a) => {
                    let av = self.value(*a);
                    let ga = grad_slot(&mut grads, *a, g.rows, g.cols);
                    for ((o, &x), &gy) in ga.data.iter_mut().zip(&av.data).zip(&g.data) {
                        let s = x.sigmoid();
                        *o += gy * s * (T::one() + x * (T::one() - s));
                    }
                }
                Op::LayerNorm(a, rstds) => {
                    let y = &node.value;
                    let m = y.cols;
                    let inv_m = 1.0 / m as f64;
                    let ga = grad_slot(&mut grads, *a, g.rows, g.cols);
                    for row in 0..g.rows {
                        let (gy, yr) = (g.row(row), y.row(row));
                        let mut mg = T::zero();
                        let mut mgy = T::zero();
                        for (&gv, &yv) in gy.iter().zip(yr) {
                            mg += gv;
                            mgy += gv * yv;
                        }
                        mg = mg.scale(inv_m);
                        mgy = mgy.scale(inv_m);
                        let rstd = rstds[row];
                        for ((o, &gv), &yv) in ga.row_mut(row).iter_mut().zip(gy).zip(yr) {
                            *o += rstd * (gv - mg - yv * mgy);
                        }
                    }
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let ga = grad_slot(&mut grads, *a, g.rows, g.cols);
                    for row in 0..g.rows {
                        let (gy, yr) = (g.row(row), y.row(row));
                        let mut dot = T::zero();
                        for (&gv, &yv) in gy.iter().zip(yr) {
                            dot += gv * yv;
                        }
                        for ((o, &gv), &yv) in ga.row_mut(row).iter_mut().zip(gy).zip(yr) {
                            *o += yv * (gv - dot);
                        }
                    }
                }
                Op::Gather(a, idx) => {
                    let rows = self.value(*a).rows;
                    let ga = grad_slot(&mut grads, *a, rows, g.cols);
                    for (i, &src) in idx.iter().enumerate() {
                        for (o, &x) in ga.row_mut(src).iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                }
                Op::SliceCols(a, start) => {
                    let cols = self.value(*a).cols;
                    let ga = grad_slot(&mut grads, *a, g.rows, cols);
                    for row in 0..g.rows {
                        for (o, &x) in ga.row_mut(row)[*start..*start + g.cols].iter_mut().zip(g.row(row)) {
                            *o += x;
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).cols;
                        if self.ng(p) {
                            let gp = grad_slot(&mut grads, p, g.rows, w);
                            for row in 0..g.rows {
                                for (o, &x) in gp.row_mut(row).iter_mut().zip(&g.row(row)[off..off + w]) {
                                    *o += x;
                                }
                            }
                        }
                        off += w;
                    }
                }
                Op::SegmentMean(a, lens) => {
                    let rows = self.value(*a).rows;
                    let ga = grad_slot(&mut grads, *a, rows, g.cols);
                    let mut start = 0;
                    for (i, &len) in lens.iter().enumerate() {
                        let inv = 1.0 / len as f64;
                        for r in start..start + len {
                            for (o, &x) in ga.row_mut(r).iter_mut().zip(g.row(i)) {
                                *o += x.scale(inv);
                            }
                        }
                        start += len;
                    }
                }
                Op::ColumnMean(a) => {
                    let rows = self.value(*a).rows;
                    let inv = 1.0 / rows as f64;
                    let ga = grad_slot(&mut grads, *a, rows, g.cols);
                    for r in 0..rows {
                        for (o, &x) in ga.row_mut(r).iter_mut().zip(&g.data) {
                            *o += x.scale(inv);
                        }
                    }
                }
                Op::Mae(a, target) => {
                    let av = self.value(*a);
                    let coef = g.data[0].scale(1.0 / av.len() as f64);
                    let ga = grad_slot(&mut grads, *a, av.rows, av.cols);
                    for ((o, &x), &t) in ga.data.iter_mut().zip(&av.data).zip(&target.data) {
                        let d = (x - t).re();
                        if d > 0.0 {
                            *o += coef;
                        } else if d < 0.0 {
                            *o -= coef;
                        }
                    }
                }
                Op::Mse(a, target) => {
                    let av = self.value(*a);
                    let coef = g.data[0].scale(2.0 / av.len() as f64);
                    let ga = grad_slot(&mut grads, *a, av.rows, av.cols);
                    for ((o, &x), &t) in ga.data.iter_mut().zip(&av.data).zip(&target.data) {
                        *o += coef * (x - t);
                    }
                }
            }
        }
        Gradients { grads }
    }
}

fn grad_slot<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, rows: usize, cols: usize) -> &mut Tensor<T> {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(rows, cols))
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].take()
    }
}
