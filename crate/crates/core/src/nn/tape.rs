//! Reverse-accumulation tape over [`Tensor2D`] values.
//!
//! A forward pass records every intermediate on the tape; [`Tape::backward`]
//! walks the records in reverse and adds parameter gradients into the
//! [`ParamStore`] the parameters were read from.

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor2D;
use crate::error::{Error, Result};
use crate::evidential::{sigmoid, softplus};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    SoftmaxRows(Var),
    Softplus(Var),
    Tanh(Var),
    Gather(Var, Vec<usize>),
    MeanRows(Var),
    RepeatRows(Var),
    ConcatCols(Var, Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor2D,
    op: Op,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Tensor2D, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor2D {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// A constant: no gradient flows out of it.
    pub fn input(&mut self, t: Tensor2D) -> Var {
        self.push(t, Op::Input)
    }

    /// Copies `v` into a new constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.input(t)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).matmul(self.value(b))?;
        Ok(self.push(y, Op::MatMul(a, b)))
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push(y, Op::MatMulT(a, b)))
    }

    /// Adds a `1 x n` bias row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(bias));
        if bs.0 != 1 || bs.1 != xs.1 {
            return Err(Error::shape("add_bias", xs, bs));
        }
        let mut y = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for r in 0..xs.0 {
            for (o, bv) in y.row_mut(r).iter_mut().zip(&b) {
                *o += bv;
            }
        }
        Ok(self.push(y, Op::AddBias(x, bias)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let y = self.value(x).map(|v| v * s);
        self.push(y, Op::Scale(x, s))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let y = softmax_rows(self.value(x));
        self.push(y, Op::SoftmaxRows(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let y = self.value(x).map(softplus);
        self.push(y, Op::Softplus(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let y = self.value(x).map(f64::tanh);
        self.push(y, Op::Tanh(x))
    }

    /// Selects rows of `x`; an index may repeat.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let rows = self.shape(x).0;
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidInput(format!("gather index {bad} out of range for {rows} rows")));
        }
        let y = self.value(x).select_rows(idx);
        Ok(self.push(y, Op::Gather(x, idx.to_vec())))
    }

    /// Column means as a `1 x n` row.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let mut y = Tensor2D::zeros(1, c);
        let xv = self.value(x);
        for i in 0..r {
            for (o, v) in y.row_mut(0).iter_mut().zip(xv.row(i)) {
                *o += v / r as f64;
            }
        }
        self.push(y, Op::MeanRows(x))
    }

    /// Tiles a `1 x n` row `times` times.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if r != 1 {
            return Err(Error::shape("repeat_rows", (r, c), (1, c)));
        }
        let row = self.value(x).data().to_vec();
        let y = Tensor2D::raw(times, c, row.repeat(times));
        Ok(self.push(y, Op::RepeatRows(x)))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.0 != sb.0 {
            return Err(Error::shape("concat_cols", sa, sb));
        }
        let mut data = Vec::with_capacity(sa.0 * (sa.1 + sb.1));
        for r in 0..sa.0 {
            data.extend_from_slice(self.value(a).row(r));
            data.extend_from_slice(self.value(b).row(r));
        }
        Ok(self.push(Tensor2D::raw(sa.0, sa.1 + sb.1, data), Op::ConcatCols(a, b)))
    }

    /// Propagates the given output gradients back through the tape and adds
    /// every parameter gradient into `store`.
    pub fn backward(&self, seeds: &[(Var, Tensor2D)], store: &mut ParamStore) -> Result<()> {
        let mut grads: Vec<Option<Tensor2D>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            if g.shape() != self.shape(*v) {
                return Err(Error::shape("backward seed", self.shape(*v), g.shape()));
            }
            accumulate(&mut grads, *v, g.clone());
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => store.accumulate_grad(*id, &gy),
                Op::MatMul(a, b) => {
                    let da = gy.matmul_t(self.value(*b))?;
                    let db = self.value(*a).t_matmul(&gy)?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulT(a, b) => {
                    let da = gy.matmul(self.value(*b))?;
                    let db = gy.t_matmul(self.value(*a))?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::AddBias(x, b) => {
                    let mut db = Tensor2D::zeros(1, gy.cols());
                    for r in 0..gy.rows() {
                        for (o, g) in db.row_mut(0).iter_mut().zip(gy.row(r)) {
                            *o += g;
                        }
                    }
                    accumulate(&mut grads, *b, db);
                    accumulate(&mut grads, *x, gy);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, gy.clone());
                    accumulate(&mut grads, *b, gy);
                }
                Op::Scale(x, s) => accumulate(&mut grads, *x, gy.map(|g| g * s)),
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let mut dx = Tensor2D::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), gy.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, yv), gv) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = yv * (gv - dot);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Softplus(x) => {
                    let xv = self.value(*x);
                    let data = xv.data().iter().zip(gy.data()).map(|(&a, g)| g * sigmoid(a)).collect();
                    accumulate(&mut grads, *x, Tensor2D::raw(xv.rows(), xv.cols(), data));
                }
                Op::Tanh(x) => {
                    let y = &node.value;
                    let data = y.data().iter().zip(gy.data()).map(|(t, g)| g * (1.0 - t * t)).collect();
                    accumulate(&mut grads, *x, Tensor2D::raw(y.rows(), y.cols(), data));
                }
                Op::Gather(x, idx) => {
                    let (r, c) = self.shape(*x);
                    let mut dx = Tensor2D::zeros(r, c);
                    for (k, &i) in idx.iter().enumerate() {
                        for (o, g) in dx.row_mut(i).iter_mut().zip(gy.row(k)) {
                            *o += g;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::MeanRows(x) => {
                    let (r, c) = self.shape(*x);
                    let row: Vec<f64> = gy.row(0).iter().map(|g| g / r as f64).collect();
                    accumulate(&mut grads, *x, Tensor2D::raw(r, c, row.repeat(r)));
                }
                Op::RepeatRows(x) => {
                    let mut dx = Tensor2D::zeros(1, gy.cols());
                    for r in 0..gy.rows() {
                        for (o, g) in dx.row_mut(0).iter_mut().zip(gy.row(r)) {
                            *o += g;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.shape(*a).1;
                    let cb = self.shape(*b).1;
                    let mut da = Vec::with_capacity(gy.rows() * ca);
                    let mut db = Vec::with_capacity(gy.rows() * cb);
                    for r in 0..gy.rows() {
                        da.extend_from_slice(&gy.row(r)[..ca]);
                        db.extend_from_slice(&gy.row(r)[ca..]);
                    }
                    accumulate(&mut grads, *a, Tensor2D::raw(gy.rows(), ca, da));
                    accumulate(&mut grads, *b, Tensor2D::raw(gy.rows(), cb, db));
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor2D>], v: Var, g: Tensor2D) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(x: &Tensor2D) -> Tensor2D {
    let mut y = x.clone();
    for r in 0..y.rows() {
        let row = y.row_mut(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    y
}
