//! Reverse-mode tape over dense matrices.
//!
//! Every value on the tape is a 2-d matrix (scalars are `1 x 1`). The op set
//! is just large enough to express an MLP forward pass, its tangent (JVP)
//! and adjoint (VJP) passes, and the reductions used by the losses. Because
//! tangent and adjoint passes are themselves recorded as ordinary ops, a
//! single reverse sweep differentiates losses that contain JVPs and VJPs.

use crate::error::{shape_err, Result};
use crate::geometry;
use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    /// `a * b^T`
    MatMulNt(Var, Var),
    /// `a * b`
    MatMul(Var, Var),
    /// `x + 1 b^T` for a row vector `b`
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `scale * x + shift`
    Affine(Var, f64),
    MulConst(Var, Tensor),
    ScaleRows(Var, Vec<f64>),
    Tanh(Var),
    Softplus(Var),
    Sigmoid(Var),
    Sqrt(Var),
    /// per-row sum of squares, `r x 1`
    RowSumSq(Var),
    /// sum of all entries, `1 x 1`
    Sum(Var),
    /// `a / b` for `1 x 1` operands
    DivScalar(Var, Var),
    Gather(Var, Vec<usize>),
    SliceCols(Var, usize, usize),
    ConcatCols(Var, Var),
    /// Adjoint of the inverse stereographic chart, applied row-wise.
    ChartAdjoint(Var, Box<ChartRows>),
}

/// Per-row chart data: stereographic coordinates and radius.
#[derive(Clone, Debug)]
pub struct ChartRows {
    pub z: Tensor,
    pub radii: Vec<f64>,
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients with respect to every node from one reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the swept output with respect to `v`; zeros if `v` did not
    /// influence it.
    pub fn wrt(&self, v: Var, like: &Tensor) -> Tensor {
        self.grads[v.0].clone().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn as2d(t: Tensor) -> Tensor {
    if t.shape().len() == 2 {
        t
    } else {
        let (r, c) = (t.rows(), t.cols());
        t.reshape(vec![r, c]).expect("same element count")
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(as2d(value), Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(as2d(value), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((r, k), (o, kb)) = (self.dims(a), self.dims(b));
        if k != kb {
            return shape_err(format!("matmul_nt {r}x{k} by ({o}x{kb})^T"));
        }
        let mut out = vec![0.0; r * o];
        matmul_nt(self.value(a).data(), self.value(b).data(), &mut out, r, k, o);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::matrix(r, o, out)?, Op::MatMulNt(a, b), ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((r, k), (kb, c)) = (self.dims(a), self.dims(b));
        if k != kb {
            return shape_err(format!("matmul {r}x{k} by {kb}x{c}"));
        }
        let mut out = vec![0.0; r * c];
        matmul_nn(self.value(a).data(), self.value(b).data(), &mut out, r, k, c);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::matrix(r, c, out)?, Op::MatMul(a, b), ng))
    }

    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let ((r, c), (br, bc)) = (self.dims(x), self.dims(b));
        if br != 1 || bc != c {
            return shape_err(format!("add_row {r}x{c} + {br}x{bc}"));
        }
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for i in 0..r {
            for (o, bv) in out.row_mut(i).iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(out, Op::AddRow(x, b), ng))
    }

    fn binary(&mut self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return shape_err(format!("{what}: {:?} vs {:?}", self.dims(a), self.dims(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add")?;
        let out = self.value(a).add(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub")?;
        let out = self.value(a).sub(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        let ng = self.ng(x);
        self.push(out, Op::Affine(x, scale), ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.affine(x, c, 0.0)
    }

    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Result<Var> {
        let c = as2d(c);
        if c.shape() != self.value(x).shape() {
            return shape_err(format!("mul_const {:?} vs {:?}", self.dims(x), c.shape()));
        }
        let out = self.value(x).zip_map(&c, |a, b| a * b);
        let ng = self.ng(x);
        Ok(self.push(out, Op::MulConst(x, c), ng))
    }

    pub fn scale_rows(&mut self, x: Var, s: Vec<f64>) -> Result<Var> {
        let (r, _) = self.dims(x);
        if s.len() != r {
            return shape_err(format!("scale_rows: {} factors for {r} rows", s.len()));
        }
        let mut out = self.value(x).clone();
        for (i, &si) in s.iter().enumerate() {
            out.row_mut(i).iter_mut().for_each(|v| *v *= si);
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::ScaleRows(x, s), ng))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        let ng = self.ng(x);
        self.push(out, Op::Tanh(x), ng)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.value(x).map(softplus);
        let ng = self.ng(x);
        self.push(out, Op::Softplus(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let ng = self.ng(x);
        self.push(out, Op::Sigmoid(x), ng)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::sqrt);
        let ng = self.ng(x);
        self.push(out, Op::Sqrt(x), ng)
    }

    pub fn row_sum_sq(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let sums: Vec<f64> = (0..v.rows()).map(|i| v.row(i).iter().map(|a| a * a).sum()).collect();
        let r = sums.len();
        let out = Tensor::matrix(r, 1, sums).expect("r x 1");
        let ng = self.ng(x);
        self.push(out, Op::RowSumSq(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::matrix(1, 1, vec![self.value(x).sum()]).expect("1 x 1");
        let ng = self.ng(x);
        self.push(out, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn div_scalar(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != (1, 1) || self.dims(b) != (1, 1) {
            return shape_err("div_scalar expects 1x1 operands");
        }
        let out = Tensor::matrix(1, 1, vec![self.scalar(a) / self.scalar(b)])?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::DivScalar(a, b), ng))
    }

    pub fn gather(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let (r, _) = self.dims(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return shape_err(format!("gather index {bad} out of {r} rows"));
        }
        let out = self.value(x).gather_rows(&idx);
        let ng = self.ng(x);
        Ok(self.push(out, Op::Gather(x, idx), ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (_, c) = self.dims(x);
        if start >= end || end > c {
            return shape_err(format!("slice_cols [{start}, {end}) of {c}"));
        }
        let out = self.value(x).slice_cols(start, end);
        let ng = self.ng(x);
        Ok(self.push(out, Op::SliceCols(x, start, end), ng))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).concat_cols(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::ConcatCols(a, b), ng))
    }

    /// Row-wise `J_chart(z_i)^T y_i` for the inverse stereographic chart.
    pub fn chart_adjoint(&mut self, y: Var, chart: ChartRows) -> Result<Var> {
        let (r, c) = self.dims(y);
        if chart.z.rows() != r || chart.radii.len() != r || chart.z.cols() + 1 != c {
            return shape_err(format!(
                "chart_adjoint: y {r}x{c}, z {:?}, {} radii",
                chart.z.shape(),
                chart.radii.len()
            ));
        }
        let d = c - 1;
        let mut out = Vec::with_capacity(r * d);
        for i in 0..r {
            out.extend(geometry::unproject_vjp_raw(
                chart.z.row(i),
                chart.radii[i],
                self.value(y).row(i),
            ));
        }
        let ng = self.ng(y);
        Ok(self.push(Tensor::matrix(r, d, out)?, Op::ChartAdjoint(y, Box::new(chart)), ng))
    }

    /// Reverse sweep from the `1 x 1` node `out`.
    pub fn backward(&self, out: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Tensor::full(self.value(out).shape(), 1.0));
        for idx in (0..=out.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Gradients { grads }
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMulNt(a, b) => {
                let (r, k) = self.dims(*a);
                let (o, _) = self.dims(*b);
                if self.ng(*a) {
                    let mut ga = vec![0.0; r * k];
                    matmul_nn(gout.data(), val(*b).data(), &mut ga, r, o, k);
                    self.accum(grads, *a, Tensor::matrix(r, k, ga).unwrap());
                }
                if self.ng(*b) {
                    let mut gb = vec![0.0; o * k];
                    matmul_tn(gout.data(), val(*a).data(), &mut gb, r, o, k);
                    self.accum(grads, *b, Tensor::matrix(o, k, gb).unwrap());
                }
            }
            Op::MatMul(a, b) => {
                let (r, k) = self.dims(*a);
                let (_, c) = self.dims(*b);
                if self.ng(*a) {
                    let mut ga = vec![0.0; r * k];
                    matmul_nt(gout.data(), val(*b).data(), &mut ga, r, c, k);
                    self.accum(grads, *a, Tensor::matrix(r, k, ga).unwrap());
                }
                if self.ng(*b) {
                    let mut gb = vec![0.0; k * c];
                    matmul_tn(val(*a).data(), gout.data(), &mut gb, r, k, c);
                    self.accum(grads, *b, Tensor::matrix(k, c, gb).unwrap());
                }
            }
            Op::AddRow(x, b) => {
                self.accum(grads, *x, gout.clone());
                if self.ng(*b) {
                    let c = gout.cols();
                    let mut gb = vec![0.0; c];
                    for i in 0..gout.rows() {
                        for (s, g) in gb.iter_mut().zip(gout.row(i)) {
                            *s += g;
                        }
                    }
                    self.accum(grads, *b, Tensor::matrix(1, c, gb).unwrap());
                }
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, gout.clone());
                self.accum(grads, *b, gout.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, gout.clone());
                self.accum(grads, *b, gout.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.accum(grads, *a, gout.zip_map(val(*b), |g, y| g * y));
                }
                if self.ng(*b) {
                    self.accum(grads, *b, gout.zip_map(val(*a), |g, x| g * x));
                }
            }
            Op::Affine(x, s) => self.accum(grads, *x, gout.scale(*s)),
            Op::MulConst(x, c) => self.accum(grads, *x, gout.zip_map(c, |g, k| g * k)),
            Op::ScaleRows(x, s) => {
                let mut g = gout.clone();
                for (i, &si) in s.iter().enumerate() {
                    g.row_mut(i).iter_mut().for_each(|v| *v *= si);
                }
                self.accum(grads, *x, g);
            }
            Op::Tanh(x) => {
                self.accum(grads, *x, gout.zip_map(&node.value, |g, a| g * (1.0 - a * a)))
            }
            Op::Softplus(x) => {
                self.accum(grads, *x, gout.zip_map(val(*x), |g, p| g * sigmoid(p)))
            }
            Op::Sigmoid(x) => {
                self.accum(grads, *x, gout.zip_map(&node.value, |g, s| g * s * (1.0 - s)))
            }
            Op::Sqrt(x) => {
                // d sqrt(u) = 1/(2 sqrt u); zero at u = 0 as a subgradient
                self.accum(
                    grads,
                    *x,
                    gout.zip_map(&node.value, |g, s| if s > 0.0 { g / (2.0 * s) } else { 0.0 }),
                )
            }
            Op::RowSumSq(x) => {
                let mut g = val(*x).scale(2.0);
                for i in 0..g.rows() {
                    let gi = gout.data()[i];
                    g.row_mut(i).iter_mut().for_each(|v| *v *= gi);
                }
                self.accum(grads, *x, g);
            }
            Op::Sum(x) => {
                self.accum(grads, *x, Tensor::full(val(*x).shape(), gout.data()[0]));
            }
            Op::DivScalar(a, b) => {
                let (av, bv, g) = (val(*a).data()[0], val(*b).data()[0], gout.data()[0]);
                self.accum(grads, *a, Tensor::matrix(1, 1, vec![g / bv]).unwrap());
                self.accum(grads, *b, Tensor::matrix(1, 1, vec![-g * av / (bv * bv)]).unwrap());
            }
            Op::Gather(x, idx) => {
                if self.ng(*x) {
                    let mut g = Tensor::zeros(val(*x).shape());
                    for (src, &dst) in idx.iter().enumerate() {
                        for (o, v) in g.row_mut(dst).iter_mut().zip(gout.row(src)) {
                            *o += v;
                        }
                    }
                    self.accum(grads, *x, g);
                }
            }
            Op::SliceCols(x, start, end) => {
                if self.ng(*x) {
                    let mut g = Tensor::zeros(val(*x).shape());
                    for i in 0..g.rows() {
                        g.row_mut(i)[*start..*end].copy_from_slice(gout.row(i));
                    }
                    self.accum(grads, *x, g);
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = self.dims(*a).1;
                let c = gout.cols();
                if self.ng(*a) {
                    self.accum(grads, *a, gout.slice_cols(0, ca));
                }
                if self.ng(*b) {
                    self.accum(grads, *b, gout.slice_cols(ca, c));
                }
            }
            Op::ChartAdjoint(y, chart) => {
                let (r, d1) = self.dims(*y);
                let mut g = Vec::with_capacity(r * d1);
                for i in 0..r {
                    g.extend(geometry::unproject_jvp_raw(chart.z.row(i), chart.radii[i], gout.row(i)));
                }
                self.accum(grads, *y, Tensor::matrix(r, d1, g).unwrap());
            }
        }
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(build: impl Fn(&mut Graph, Var) -> Var, x0: Tensor) {
        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let out = build(&mut g, x);
        let grad = g.backward(out).wrt(x, &x0);
        let h = 1e-6;
        for k in 0..x0.len() {
            let mut xp = x0.clone();
            xp.data_mut()[k] += h;
            let mut xm = x0.clone();
            xm.data_mut()[k] -= h;
            let eval = |t: Tensor| {
                let mut g = Graph::new();
                let x = g.param(t);
                let o = build(&mut g, x);
                g.scalar(o)
            };
            let fd = (eval(xp) - eval(xm)) / (2.0 * h);
            let an = grad.data()[k];
            assert!((fd - an).abs() < 1e-6 * (1.0 + fd.abs()), "k={k}: fd {fd} vs {an}");
        }
    }

    fn input() -> Tensor {
        Tensor::matrix(3, 2, vec![0.3, -0.7, 1.1, 0.2, -0.4, 0.9]).unwrap()
    }

    #[test]
    fn elementwise_and_reduction_ops() {
        fd_check(
            |g, x| {
                let t = g.tanh(x);
                let s = g.softplus(x);
                let m = g.mul(t, s).unwrap();
                let q = g.sigmoid(m);
                let a = g.affine(q, 2.0, 1.0);
                let r = g.row_sum_sq(a);
                let sq = g.sqrt(r);
                g.sum(sq)
            },
            input(),
        );
    }

    #[test]
    fn matrix_ops_and_ratio() {
        let w = Tensor::matrix(4, 2, vec![0.5, -1.0, 0.25, 0.75, -0.3, 0.2, 1.2, 0.1]).unwrap();
        fd_check(
            move |g, x| {
                let wv = g.constant(w.clone());
                let y = g.matmul_nt(x, wv).unwrap();
                let back = g.matmul(y, wv).unwrap();
                let both = g.concat_cols(back, x).unwrap();
                let sl = g.slice_cols(both, 1, 3).unwrap();
                let gath = g.gather(sl, vec![2, 0, 2]).unwrap();
                let sc = g.scale_rows(gath, vec![1.0, -2.0, 0.5]).unwrap();
                let num = g.row_sum_sq(sc);
                let num = g.mean(num);
                let den = g.sum(y);
                let den = g.mul(den, den).unwrap();
                g.div_scalar(num, den).unwrap()
            },
            input(),
        );
    }

    #[test]
    fn bias_and_weight_grads() {
        let x0 = input();
        let mut g = Graph::new();
        let x = g.constant(x0.clone());
        let w = g.param(Tensor::matrix(1, 2, vec![0.4, -0.6]).unwrap());
        let b = g.param(Tensor::matrix(1, 1, vec![0.1]).unwrap());
        let y = g.matmul_nt(x, w).unwrap();
        let y = g.add_row(y, b).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s);
        // d/dw sum(x w^T + b) = column sums of x
        let gw = grads.get(w).unwrap();
        assert!((gw.data()[0] - 1.0).abs() < 1e-15);
        assert!((gw.data()[1] - 0.4).abs() < 1e-15);
        assert_eq!(grads.get(b).unwrap().data(), &[3.0]);
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn chart_adjoint_matches_fd() {
        let z = Tensor::matrix(3, 1, vec![0.3, -1.2, 2.0]).unwrap();
        let rows = ChartRows { z, radii: vec![1.0, 2.0, 0.5] };
        fd_check(
            move |g, y| {
                let w = g.chart_adjoint(y, rows.clone()).unwrap();
                let t = g.tanh(w);
                g.sum(t)
            },
            input(),
        );
    }
}
