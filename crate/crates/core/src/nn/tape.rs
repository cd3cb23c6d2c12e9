//! Reverse-mode automatic differentiation over row-major matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are
//! referenced from a [`ParamStore`] rather than copied, and [`Tape::backward`]
//! accumulates parameter gradients into a caller-owned buffer.

use std::fmt::{Debug, Display};

use ndarray::linalg::general_mat_mul;
use ndarray::{concatenate, s, Array2, ArrayView2, Axis, ScalarOperand, Zip};

use super::params::ParamStore;

/// Element type of the tape.
pub trait Float:
    ndarray::LinalgScalar
    + num_traits::Float
    + num_traits::FromPrimitive
    + ScalarOperand
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::ops::DivAssign
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(v).expect("representable")
    }
}

impl Float for f32 {}
impl Float for f64 {}

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// A deliberately wrong backward rule, used to show that the gradient check
/// catches errors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackwardFault {
    /// `tanh` backward uses `1 - y` instead of `1 - y^2`.
    Tanh,
}

enum Op<T> {
    Input,
    Param(usize),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    /// `a[m, n] + b[1, n]`
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MulConst(Var, Array2<T>),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Array2<T>,
        inv_std: Vec<T>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    Rows(Var, Vec<usize>),
    MeanRows(Var),
    Pick(Var, usize, usize),
    SumScalars(Vec<Var>),
}

enum Value<T> {
    Owned(Array2<T>),
    Param(usize),
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<'a, T: Float> {
    store: &'a ParamStore<T>,
    nodes: Vec<Node<T>>,
    params: Vec<Option<Var>>,
    fault: Option<BackwardFault>,
}

const LN_EPS: f64 = 1e-5;

impl<'a, T: Float> Tape<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Tape<'a, T> {
        Tape {
            store,
            nodes: Vec::new(),
            params: vec![None; store.len()],
            fault: None,
        }
    }

    pub fn with_fault(store: &'a ParamStore<T>, fault: BackwardFault) -> Tape<'a, T> {
        let mut t = Tape::new(store);
        t.fault = Some(fault);
        t
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        match &self.nodes[v.0].value {
            Value::Owned(a) => a,
            Value::Param(id) => self.store.value(*id),
        }
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[[0, 0]]
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input.
    pub fn input(&mut self, value: Array2<T>) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op: Op::Input,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// The parameter with store id `id`, recorded once per tape.
    pub fn param(&mut self, id: usize) -> Var {
        if let Some(v) = self.params[id] {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params[id] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::AddRow(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn mul_const(&mut self, a: Var, mask: Array2<T>) -> Var {
        let v = self.value(a) * &mask;
        self.push(v, Op::MulConst(a, mask), &[a])
    }

    /// `x · w + b`
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .mapv(|x| if x > T::zero() { x } else { T::zero() });
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.tanh());
        self.push(v, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(&self.value(a).view());
        self.push(v, Op::SoftmaxRows(a), &[a])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let v = log_softmax_rows(&self.value(a).view());
        self.push(v, Op::LogSoftmaxRows(a), &[a])
    }

    /// Row-wise layer normalization with learned gain and bias (`[1, n]`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let n = T::of(xv.ncols() as f64);
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().fold(T::zero(), |acc, &v| acc + v * v) / n;
            let is = T::one() / (var + T::of(LN_EPS)).sqrt();
            row.mapv_inplace(|v| v * is);
            inv_std.push(is);
        }
        let y = &xhat * self.value(gain) + self.value(bias);
        self.push(
            y,
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

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<T>> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("row counts agree");
        self.push(v, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<T>> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(0), &views).expect("column counts agree");
        self.push(v, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols(a, start, end), &[a])
    }

    /// Gathers rows by index (repeats allowed); embedding lookup.
    pub fn rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let v = self.value(a).select(Axis(0), idx);
        self.push(v, Op::Rows(a, idx.to_vec()), &[a])
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let v = av.sum_axis(Axis(0)).insert_axis(Axis(0)) / T::of(av.nrows().max(1) as f64);
        self.push(v, Op::MeanRows(a), &[a])
    }

    /// Element `(r, c)` as a `[1, 1]` value.
    pub fn pick(&mut self, a: Var, r: usize, c: usize) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a)[[r, c]]);
        self.push(v, Op::Pick(a, r, c), &[a])
    }

    /// Sum of `[1, 1]` values.
    pub fn sum_scalars(&mut self, parts: &[Var]) -> Var {
        let total = parts.iter().fold(T::zero(), |acc, p| acc + self.scalar(*p));
        self.push(
            Array2::from_elem((1, 1), total),
            Op::SumScalars(parts.to_vec()),
            parts,
        )
    }

    /// Back-propagates from the scalar `loss`, adding each parameter's
    /// gradient into `grads[id]`.
    pub fn backward(&self, loss: Var, grads: &mut [Array2<T>]) {
        let mut g: Vec<Option<Array2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        g[loss.0] = Some(Array2::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            let Some(dy) = g[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backward_node(i, dy, &mut g, grads);
        }
    }

    fn backward_node(
        &self,
        i: usize,
        dy: Array2<T>,
        g: &mut [Option<Array2<T>>],
        grads: &mut [Array2<T>],
    ) {
        let node = &self.nodes[i];
        let out = || match &node.value {
            Value::Owned(a) => a,
            Value::Param(_) => unreachable!(),
        };
        match &node.op {
            Op::Input => {}
            Op::Param(id) => grads[*id] += &dy,
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    self.acc_product(g, *a, dy.view(), self.value(*b).t());
                }
                if self.wants(*b) {
                    self.acc_product(g, *b, self.value(*a).t(), dy.view());
                }
            }
            Op::MatMulT(a, b) => {
                if self.wants(*a) {
                    self.acc_product(g, *a, dy.view(), self.value(*b).view());
                }
                if self.wants(*b) {
                    self.acc_product(g, *b, dy.t(), self.value(*a).view());
                }
            }
            Op::Add(a, b) => {
                self.acc_ref(g, *a, &dy);
                self.acc_ref(g, *b, &dy);
            }
            Op::AddRow(a, b) => {
                self.acc_ref(g, *a, &dy);
                if self.wants(*b) {
                    self.acc(g, *b, dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Sub(a, b) => {
                self.acc_ref(g, *a, &dy);
                if self.wants(*b) {
                    self.acc(g, *b, -dy);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.acc(g, *a, &dy * self.value(*b));
                }
                if self.wants(*b) {
                    self.acc(g, *b, &dy * self.value(*a));
                }
            }
            Op::Scale(a, c) => self.acc(g, *a, dy * *c),
            Op::MulConst(a, m) => self.acc(g, *a, dy * m),
            Op::Relu(a) => {
                let mut d = dy;
                Zip::from(&mut d).and(out()).for_each(|d, &y| {
                    if y <= T::zero() {
                        *d = T::zero()
                    }
                });
                self.acc(g, *a, d);
            }
            Op::Tanh(a) => {
                let mut d = dy;
                let faulty = self.fault == Some(BackwardFault::Tanh);
                Zip::from(&mut d).and(out()).for_each(|d, &y| {
                    *d *= if faulty {
                        T::one() - y
                    } else {
                        T::one() - y * y
                    };
                });
                self.acc(g, *a, d);
            }
            Op::Sigmoid(a) => {
                let mut d = dy;
                Zip::from(&mut d)
                    .and(out())
                    .for_each(|d, &y| *d *= y * (T::one() - y));
                self.acc(g, *a, d);
            }
            Op::SoftmaxRows(a) => {
                let y = out();
                let mut d = &dy * y;
                for (mut row, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                    let dot = row.sum();
                    Zip::from(&mut row)
                        .and(&yrow)
                        .for_each(|d, &y| *d -= y * dot);
                }
                self.acc(g, *a, d);
            }
            Op::LogSoftmaxRows(a) => {
                let y = out();
                let mut d = dy;
                for (mut row, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                    let total = row.sum();
                    Zip::from(&mut row)
                        .and(&yrow)
                        .for_each(|d, &y| *d -= y.exp() * total);
                }
                self.acc(g, *a, d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                if self.wants(*gain) {
                    self.acc(
                        g,
                        *gain,
                        (&dy * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                    );
                }
                if self.wants(*bias) {
                    self.acc(g, *bias, dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.wants(*x) {
                    let mut dxhat = &dy * self.value(*gain);
                    let n = T::of(dxhat.ncols() as f64);
                    for ((mut row, xrow), &is) in
                        dxhat.rows_mut().into_iter().zip(xhat.rows()).zip(inv_std)
                    {
                        let mean = row.sum() / n;
                        let mean_x = row
                            .iter()
                            .zip(xrow.iter())
                            .fold(T::zero(), |acc, (&d, &x)| acc + d * x)
                            / n;
                        Zip::from(&mut row)
                            .and(&xrow)
                            .for_each(|d, &xh| *d = (*d - mean - xh * mean_x) * is);
                    }
                    self.acc(g, *x, dxhat);
                }
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for p in parts {
                    let w = self.value(*p).ncols();
                    if self.wants(*p) {
                        self.acc(g, *p, dy.slice(s![.., at..at + w]).to_owned());
                    }
                    at += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for p in parts {
                    let h = self.value(*p).nrows();
                    if self.wants(*p) {
                        self.acc(g, *p, dy.slice(s![at..at + h, ..]).to_owned());
                    }
                    at += h;
                }
            }
            Op::SliceCols(a, start, end) => {
                if self.wants(*a) {
                    let buf = self.buffer(g, *a);
                    let mut view = buf.slice_mut(s![.., *start..*end]);
                    view += &dy;
                }
            }
            Op::Rows(a, idx) => {
                if self.wants(*a) {
                    let buf = self.buffer(g, *a);
                    for (r, &k) in idx.iter().enumerate() {
                        let mut row = buf.row_mut(k);
                        row += &dy.row(r);
                    }
                }
            }
            Op::MeanRows(a) => {
                if self.wants(*a) {
                    let n = self.value(*a).nrows();
                    let row = dy.row(0).to_owned() / T::of(n.max(1) as f64);
                    let buf = self.buffer(g, *a);
                    for mut r in buf.rows_mut() {
                        r += &row;
                    }
                }
            }
            Op::Pick(a, r, c) => {
                if self.wants(*a) {
                    let buf = self.buffer(g, *a);
                    buf[[*r, *c]] += dy[[0, 0]];
                }
            }
            Op::SumScalars(parts) => {
                for p in parts {
                    self.acc_ref(g, *p, &dy);
                }
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn buffer<'g>(&self, g: &'g mut [Option<Array2<T>>], v: Var) -> &'g mut Array2<T> {
        let shape = self.value(v).raw_dim();
        g[v.0].get_or_insert_with(|| Array2::zeros(shape))
    }

    /// Adds `x · y` into the gradient of `v` without a temporary.
    fn acc_product(&self, g: &mut [Option<Array2<T>>], v: Var, x: ArrayView2<T>, y: ArrayView2<T>) {
        match &mut g[v.0] {
            Some(buf) => general_mat_mul(T::one(), &x, &y, T::one(), buf),
            slot => *slot = Some(x.dot(&y)),
        }
    }

    fn acc(&self, g: &mut [Option<Array2<T>>], v: Var, d: Array2<T>) {
        if !self.wants(v) {
            return;
        }
        match &mut g[v.0] {
            Some(buf) => *buf += &d,
            slot => *slot = Some(d),
        }
    }

    fn acc_ref(&self, g: &mut [Option<Array2<T>>], v: Var, d: &Array2<T>) {
        if !self.wants(v) {
            return;
        }
        match &mut g[v.0] {
            Some(buf) => *buf += d,
            slot => *slot = Some(d.clone()),
        }
    }
}

pub fn sigmoid<T: Float>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn softmax_rows<T: Float>(a: &ArrayView2<T>) -> Array2<T> {
    let mut out = a.to_owned();
    for mut row in out.rows_mut() {
        let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - m).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    out
}

pub fn log_softmax_rows<T: Float>(a: &ArrayView2<T>) -> Array2<T> {
    let mut out = a.to_owned();
    for mut row in out.rows_mut() {
        let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let lse = row
            .iter()
            .fold(T::zero(), |acc, &v| acc + (v - m).exp())
            .ln();
        row.mapv_inplace(|v| (v - m) - lse);
    }
    out
}
