//! Reverse-mode automatic differentiation over row-major batches.
//!
//! Every value is a 2-D array with the batch along rows. The tape records ops
//! in execution order and `backward` walks it once in reverse.

use ndarray::{concatenate, s, Array2, Axis, Zip};

use super::{Params, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Const,
    Param(usize),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Silu(Var),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Softmax { x: Var, classes: usize },
    Concat(Vec<Var>),
    ConcatRows(Vec<Var>),
    Slice { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    SumCols(Var),
    SumAll(Var),
    MaxScalar(Var, T),
    Clamp(Var, T, T),
    Minimum(Var, Var),
}

struct Node<T> {
    value: Array2<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients for one parameter set, index-aligned with `Params::tensors`.
pub type ParamGrads<T> = Vec<Array2<T>>;

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::with_capacity(1024) }
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>) -> Var {
        let needs_grad = match &op {
            Op::Const => false,
            Op::Param(_) => true,
            Op::Concat(parts) | Op::ConcatRows(parts) => parts.iter().any(|p| self.nodes[p.0].needs_grad),
            op => op_inputs(op).iter().flatten().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[[0, 0]]
    }

    /// A constant: gradients stop here.
    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Const)
    }

    /// Records a copy of `v`'s value as a constant (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// Registers every tensor of a parameter set; the returned vars are
    /// index-aligned with `params.tensors`. `tag` distinguishes parameter
    /// sets that share a tape.
    pub fn params(&mut self, params: &Params<T>, tag: usize) -> Vec<Var> {
        params
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| self.push(t.clone(), Op::Param(tag << 32 | i)))
            .collect()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `x + b` with `b` a single row broadcast over the batch.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let v = self.value(x) + self.value(b);
        self.push(v, Op::AddRow(x, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    /// `x * w` with `w` a single column broadcast across features.
    pub fn mul_col(&mut self, x: Var, w: Var) -> Var {
        let v = self.value(x) * self.value(w);
        self.push(v, Op::MulCol(x, w))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let v = self.value(x) * s;
        self.push(v, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        let v = self.value(x) + s;
        self.push(v, Op::AddScalar(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(sigmoid);
        self.push(v, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(T::tanh);
        self.push(v, Op::Tanh(x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|z| z * sigmoid(z));
        self.push(v, Op::Silu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(softplus);
        self.push(v, Op::Softplus(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(T::exp);
        self.push(v, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(T::ln);
        self.push(v, Op::Ln(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|z| z * z);
        self.push(v, Op::Square(x))
    }

    /// Softmax applied independently to each run of `classes` columns.
    pub fn softmax(&mut self, x: Var, classes: usize) -> Var {
        let v = softmax_groups(self.value(x), classes);
        self.push(v, Op::Softmax { x, classes })
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat: row counts differ");
        self.push(v, Op::Concat(parts.to_vec()))
    }

    /// Stacks batches vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let v = self.value(x).slice(s![start..end, ..]).to_owned();
        self.push(v, Op::SliceRows { x, start })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let v = self.value(x).slice(s![.., start..end]).to_owned();
        self.push(v, Op::Slice { x, start })
    }

    /// Row sums, `B x n -> B x 1`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let v = self.value(x).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::SumCols(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(x).sum());
        self.push(v, Op::SumAll(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::from(self.value(x).len()).unwrap();
        let s = self.sum(x);
        self.scale(s, T::one() / n)
    }

    /// Elementwise `max(x, floor)`; gradient flows only where `x > floor`.
    pub fn max_scalar(&mut self, x: Var, floor: T) -> Var {
        let v = self.value(x).mapv(|z| z.max(floor));
        self.push(v, Op::MaxScalar(x, floor))
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let v = self.value(x).mapv(|z| z.max(lo).min(hi));
        self.push(v, Op::Clamp(x, lo, hi))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        Zip::from(&mut v).and(self.value(b)).for_each(|x, &y| *x = x.min(y));
        self.push(v, Op::Minimum(a, b))
    }

    /// Backpropagates from the scalar `loss`. Returns one gradient set per
    /// `(tag, params)` entry, each sized like its parameter set.
    pub fn backward(&self, loss: Var, params: &[(usize, &Params<T>)]) -> Vec<ParamGrads<T>> {
        let mut grads: Vec<Option<Array2<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array2::from_elem(self.value(loss).raw_dim(), T::one()));
        let mut out: Vec<ParamGrads<T>> = params
            .iter()
            .map(|(_, p)| p.tensors.iter().map(|t| Array2::zeros(t.raw_dim())).collect())
            .collect();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let y = &node.value;
            match &node.op {
                Op::Const => {}
                Op::Param(id) => {
                    let (tag, i) = (id >> 32, id & 0xffff_ffff);
                    if let Some(slot) = params.iter().position(|(t, _)| *t == tag) {
                        out[slot][i] += &g;
                    }
                }
                Op::MatMul(a, b) => {
                    if self.needs_grad(*a) {
                        let ga = g.dot(&self.value(*b).t());
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.needs_grad(*b) {
                        let gb = self.value(*a).t().dot(&g);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::AddRow(x, b) => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *b, gb);
                    accumulate(&mut grads, *x, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.mapv(|v| -v));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MulCol(x, w) => {
                    let gx = &g * self.value(*w);
                    let gw = (&g * self.value(*x)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                }
                Op::Scale(x, s) => accumulate(&mut grads, *x, g * *s),
                Op::AddScalar(x) => accumulate(&mut grads, *x, g),
                Op::Sigmoid(x) => {
                    let gx = map2(&g, y, |g, y| g * y * (T::one() - y));
                    accumulate(&mut grads, *x, gx);
                }
                Op::Tanh(x) => {
                    let gx = map2(&g, y, |g, y| g * (T::one() - y * y));
                    accumulate(&mut grads, *x, gx);
                }
                Op::Silu(x) => {
                    let gx = map2(&g, self.value(*x), |g, z| {
                        let s = sigmoid(z);
                        g * (s + z * s * (T::one() - s))
                    });
                    accumulate(&mut grads, *x, gx);
                }
                Op::Softplus(x) => {
                    let gx = map2(&g, self.value(*x), |g, z| g * sigmoid(z));
                    accumulate(&mut grads, *x, gx);
                }
                Op::Exp(x) => accumulate(&mut grads, *x, &g * y),
                Op::Ln(x) => {
                    let gx = map2(&g, self.value(*x), |g, z| g / z);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Square(x) => {
                    let two = T::one() + T::one();
                    let gx = map2(&g, self.value(*x), |g, z| two * g * z);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Softmax { x, classes } => {
                    let mut gx = &g * y;
                    for (mut row, yrow) in gx.rows_mut().into_iter().zip(y.rows()) {
                        let n = row.len();
                        let mut start = 0;
                        while start < n {
                            let end = start + classes;
                            let dot: T = row.slice(s![start..end]).sum();
                            for k in start..end {
                                row[k] -= yrow[k] * dot;
                            }
                            start = end;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        accumulate(&mut grads, *p, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let h = self.value(*p).nrows();
                        accumulate(&mut grads, *p, g.slice(s![start..start + h, ..]).to_owned());
                        start += h;
                    }
                }
                Op::SliceRows { x, start } => {
                    let mut gx = Array2::zeros(self.value(*x).raw_dim());
                    gx.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Slice { x, start } => {
                    let mut gx = Array2::zeros(self.value(*x).raw_dim());
                    gx.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut grads, *x, gx);
                }
                Op::SumCols(x) => {
                    let gx = Array2::from_shape_fn(self.value(*x).raw_dim(), |(r, _)| g[[r, 0]]);
                    accumulate(&mut grads, *x, gx);
                }
                Op::SumAll(x) => {
                    let gx = Array2::from_elem(self.value(*x).raw_dim(), g[[0, 0]]);
                    accumulate(&mut grads, *x, gx);
                }
                Op::MaxScalar(x, floor) => {
                    let gx = map2(&g, self.value(*x), |g, z| if z > *floor { g } else { T::zero() });
                    accumulate(&mut grads, *x, gx);
                }
                Op::Clamp(x, lo, hi) => {
                    let gx = map2(&g, self.value(*x), |g, z| if z > *lo && z < *hi { g } else { T::zero() });
                    accumulate(&mut grads, *x, gx);
                }
                Op::Minimum(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let mut ga = g.clone();
                    let mut gb = g;
                    Zip::from(&mut ga).and(&mut gb).and(va).and(vb).for_each(|ga, gb, &a, &b| {
                        if a <= b {
                            *gb = T::zero();
                        } else {
                            *ga = T::zero();
                        }
                    });
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
            }
        }
        out
    }
}

fn op_inputs<T>(op: &Op<T>) -> [Option<Var>; 2] {
    match *op {
        Op::Const | Op::Param(_) | Op::Concat(_) | Op::ConcatRows(_) => [None, None],
        Op::MatMul(a, b)
        | Op::AddRow(a, b)
        | Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::MulCol(a, b)
        | Op::Minimum(a, b) => [Some(a), Some(b)],
        Op::Scale(x, _)
        | Op::AddScalar(x)
        | Op::Sigmoid(x)
        | Op::Tanh(x)
        | Op::Silu(x)
        | Op::Softplus(x)
        | Op::Exp(x)
        | Op::Ln(x)
        | Op::Square(x)
        | Op::Softmax { x, .. }
        | Op::Slice { x, .. }
        | Op::SliceRows { x, .. }
        | Op::SumCols(x)
        | Op::SumAll(x)
        | Op::MaxScalar(x, _)
        | Op::Clamp(x, _, _) => [Some(x), None],
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Array2<T>>], v: Var, g: Array2<T>) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot => *slot = Some(g),
    }
}

fn map2<T: Real>(a: &Array2<T>, b: &Array2<T>, f: impl Fn(T, T) -> T) -> Array2<T> {
    let mut out = a.clone();
    Zip::from(&mut out).and(b).for_each(|o, &b| *o = f(*o, b));
    out
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn softplus<T: Real>(x: T) -> T {
    // ln(1 + e^x) without overflow
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Group-wise softmax over runs of `classes` columns.
pub fn softmax_groups<T: Real>(x: &Array2<T>, classes: usize) -> Array2<T> {
    let mut out = x.as_standard_layout().into_owned();
    for mut row in out.rows_mut() {
        for chunk in row.as_slice_mut().expect("row-major").chunks_mut(classes) {
            let max = chunk.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut sum = T::zero();
            for v in chunk.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in chunk.iter_mut() {
                *v /= sum;
            }
        }
    }
    out
}
