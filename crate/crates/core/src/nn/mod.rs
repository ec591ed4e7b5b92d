//! Minimal neural-network toolkit: parameter storage, dense/recurrent layers,
//! an Adam optimizer, and the autodiff tape they train through.
//!
//! Each layer has two forward paths. `forward` works on plain arrays and is
//! used for inference (environment interaction, planning). `forward_t`
//! records onto a [`Tape`] for training.

mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{Array2, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub use tape::{sigmoid, softmax_groups, softplus, ParamGrads, Tape, Var};

/// Floating-point element type. Training runs in `f32`; gradient checks in `f64`.
pub trait Real:
    LinalgScalar
    + Float
    + FromPrimitive
    + NumAssign
    + ScalarOperand
    + Debug
    + Display
    + Default
    + Sum
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

/// Converts an `f64` constant into `T`.
#[inline]
pub fn c<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("constant representable")
}

/// Named scalar loss terms from one update.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport(pub std::collections::BTreeMap<String, f64>);

impl LossReport {
    pub fn insert(&mut self, name: impl Into<String>, value: f64) {
        self.0.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.0.get(name).copied()
    }

    /// Copies every term under `prefix/`.
    pub fn merge(&mut self, prefix: &str, other: &LossReport) {
        for (k, v) in &other.0 {
            self.0.insert(format!("{prefix}/{k}"), *v);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.0.values().all(|v| v.is_finite())
    }
}

/// A named, flat list of parameter tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Params<T: Real> {
    pub tensors: Vec<Array2<T>>,
    pub names: Vec<String>,
}

impl<T: Real> Default for Params<T> {
    fn default() -> Self {
        Self { tensors: Vec::new(), names: Vec::new() }
    }
}

impl<T: Real> Params<T> {
    pub fn add(&mut self, name: impl Into<String>, value: Array2<T>) -> usize {
        self.tensors.push(value);
        self.names.push(name.into());
        self.tensors.len() - 1
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// `self <- (1 - fraction) * self + fraction * source`.
    pub fn ema_toward(&mut self, source: &Params<T>, fraction: T) {
        for (dst, src) in self.tensors.iter_mut().zip(&source.tensors) {
            dst.zip_mut_with(src, |d, &s| *d = (T::one() - fraction) * *d + fraction * s);
        }
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            tensors: self.tensors.iter().map(|t| t.mapv(|v| U::from(v).unwrap())).collect(),
            names: self.names.clone(),
        }
    }
}

impl<T: Real> std::ops::Index<usize> for Params<T> {
    type Output = Array2<T>;
    fn index(&self, i: usize) -> &Array2<T> {
        &self.tensors[i]
    }
}

pub fn grads_finite<T: Real>(grads: &[Array2<T>]) -> bool {
    grads.iter().all(|g| g.iter().all(|v| v.is_finite()))
}

pub fn global_norm<T: Real>(grads: &[Array2<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| {
            let v = v.to_f64().unwrap_or(f64::NAN);
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Glorot normal scaled by the given factor.
    Xavier(f64),
    /// He normal, `std = sqrt(2 / fan_in)`.
    He,
    Zeros,
}

fn init_matrix<T: Real, R: Rng + ?Sized>(fan_in: usize, fan_out: usize, init: Init, rng: &mut R) -> Array2<T> {
    let std = match init {
        Init::Xavier(scale) => scale * (2.0 / (fan_in + fan_out) as f64).sqrt(),
        Init::He => (2.0 / fan_in as f64).sqrt(),
        Init::Zeros => return Array2::zeros((fan_in, fan_out)),
    };
    Array2::from_shape_simple_fn((fan_in, fan_out), || {
        let z: f64 = StandardNormal.sample(rng);
        c(z * std)
    })
}

/// Dense layer `y = x W + b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        params: &mut Params<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let w = params.add(format!("{name}.w"), init_matrix(fan_in, fan_out, init, rng));
        let b = params.add(format!("{name}.b"), Array2::zeros((1, fan_out)));
        Self { w, b, fan_in, fan_out }
    }

    pub fn bias_index(&self) -> usize {
        self.b
    }

    pub fn forward<T: Real>(&self, p: &Params<T>, x: &Array2<T>) -> Array2<T> {
        let mut y = x.dot(&p[self.w]);
        y += &p[self.b];
        y
    }

    pub fn forward_t<T: Real>(&self, tape: &mut Tape<T>, vars: &[Var], x: Var) -> Var {
        let y = tape.matmul(x, vars[self.w]);
        tape.add_row(y, vars[self.b])
    }
}

/// Multilayer perceptron with SiLU hidden activations and a linear output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `sizes` lists every width including input and output.
    pub fn new<T: Real, R: Rng + ?Sized>(
        params: &mut Params<T>,
        name: &str,
        sizes: &[usize],
        hidden_init: Init,
        out_init: Init,
        rng: &mut R,
    ) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output widths");
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let init = if i + 1 == n { out_init } else { hidden_init };
                Linear::new(params, &format!("{name}.{i}"), sizes[i], sizes[i + 1], init, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn output_layer(&self) -> &Linear {
        self.layers.last().expect("non-empty")
    }

    pub fn forward<T: Real>(&self, p: &Params<T>, x: &Array2<T>) -> Array2<T> {
        let mut h = self.layers[0].forward(p, x);
        for layer in &self.layers[1..] {
            h.mapv_inplace(silu);
            h = layer.forward(p, &h);
        }
        h
    }

    pub fn forward_t<T: Real>(&self, tape: &mut Tape<T>, vars: &[Var], x: Var) -> Var {
        let mut h = self.layers[0].forward_t(tape, vars, x);
        for layer in &self.layers[1..] {
            h = tape.silu(h);
            h = layer.forward_t(tape, vars, h);
        }
        h
    }
}

#[inline]
pub fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

/// Gated recurrent cell with a single fused projection:
/// `reset, cand, update = split(W [x, h] + b)`,
/// `h' = u * tanh(r * cand) + (1 - u) * h` with `u = sigmoid(update - 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GruCell {
    pub proj: Linear,
    pub size: usize,
}

impl GruCell {
    pub fn new<T: Real, R: Rng + ?Sized>(params: &mut Params<T>, name: &str, input: usize, size: usize, rng: &mut R) -> Self {
        let proj = Linear::new(params, &format!("{name}.proj"), input + size, 3 * size, Init::Xavier(1.0), rng);
        Self { proj, size }
    }

    pub fn forward<T: Real>(&self, p: &Params<T>, x: &Array2<T>, h: &Array2<T>) -> Array2<T> {
        let xh = ndarray::concatenate(ndarray::Axis(1), &[x.view(), h.view()]).expect("batch rows");
        let parts = self.proj.forward(p, &xh);
        let d = self.size;
        let mut out = h.clone();
        for (mut o, prow) in out.rows_mut().into_iter().zip(parts.rows()) {
            for j in 0..d {
                let r = sigmoid(prow[j]);
                let cand = (r * prow[d + j]).tanh();
                let u = sigmoid(prow[2 * d + j] - T::one());
                o[j] = o[j] + u * (cand - o[j]);
            }
        }
        out
    }

    pub fn forward_t<T: Real>(&self, tape: &mut Tape<T>, vars: &[Var], x: Var, h: Var) -> Var {
        let d = self.size;
        let xh = tape.concat(&[x, h]);
        let parts = self.proj.forward_t(tape, vars, xh);
        let r = tape.slice_cols(parts, 0, d);
        let r = tape.sigmoid(r);
        let cand = tape.slice_cols(parts, d, 2 * d);
        let cand = tape.mul(r, cand);
        let cand = tape.tanh(cand);
        let u = tape.slice_cols(parts, 2 * d, 3 * d);
        let u = tape.add_scalar(u, -T::one());
        let u = tape.sigmoid(u);
        // h' = h + u * (cand - h)
        let diff = tape.sub(cand, h);
        let step = tape.mul(u, diff);
        tape.add(h, step)
    }
}

/// Adam with optional global-norm gradient clipping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Adam<T: Real> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: Option<f64>,
    steps: u64,
    m: Vec<Array2<T>>,
    v: Vec<Array2<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &Params<T>, lr: f64, eps: f64, clip: Option<f64>) -> Self {
        let zeros = |p: &Params<T>| p.tensors.iter().map(|t| Array2::zeros(t.raw_dim())).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps, clip, steps: 0, m: zeros(params), v: zeros(params) }
    }

    /// Applies one update and returns the pre-clip gradient norm.
    pub fn step(&mut self, params: &mut Params<T>, grads: &[Array2<T>]) -> f64 {
        let norm = global_norm(grads);
        let scale = match self.clip {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
        let (b1, b2) = (c::<T>(self.beta1), c::<T>(self.beta2));
        let (lr, eps, scale) = (c::<T>(self.lr / bc1), c::<T>(self.eps), c::<T>(scale));
        let sqrt_bc2 = c::<T>(bc2.sqrt());
        for (((p, g), m), v) in params.tensors.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                let g = g * scale;
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *p -= lr * *m / ((*v).sqrt() / sqrt_bc2 + eps);
            });
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences of `f` w.r.t. every parameter entry.
    fn numeric_grad(params: &Params<f64>, f: impl Fn(&Params<f64>) -> f64) -> Vec<Array2<f64>> {
        let eps = 1e-6;
        let mut p = params.clone();
        let mut out = Vec::new();
        for t in 0..p.tensors.len() {
            let mut g = Array2::zeros(p.tensors[t].raw_dim());
            for idx in 0..p.tensors[t].len() {
                let orig = p.tensors[t].as_slice().unwrap()[idx];
                p.tensors[t].as_slice_mut().unwrap()[idx] = orig + eps;
                let up = f(&p);
                p.tensors[t].as_slice_mut().unwrap()[idx] = orig - eps;
                let down = f(&p);
                p.tensors[t].as_slice_mut().unwrap()[idx] = orig;
                g.as_slice_mut().unwrap()[idx] = (up - down) / (2.0 * eps);
            }
            out.push(g);
        }
        out
    }

    fn assert_close(analytic: &[Array2<f64>], numeric: &[Array2<f64>]) {
        for (a, n) in analytic.iter().zip(numeric) {
            for (&x, &y) in a.iter().zip(n) {
                let denom = x.abs().max(y.abs()).max(1e-8);
                assert!((x - y).abs() / denom < 1e-4 || (x - y).abs() < 1e-9, "analytic {x} vs numeric {y}");
            }
        }
    }

    #[test]
    fn every_op_backprops_like_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = Params::<f64>::default();
        let mlp = Mlp::new(&mut params, "mlp", &[3, 5, 6], Init::Xavier(1.0), Init::Xavier(1.0), &mut rng);
        let gru = GruCell::new(&mut params, "gru", 6, 4, &mut rng);
        let x = array![[0.3, -0.2, 0.9], [1.1, 0.4, -0.7]];
        let h0 = array![[0.1, -0.3, 0.2, 0.0], [0.5, 0.2, -0.1, 0.3]];
        let target = array![[0.2, 0.8], [0.6, 0.4]];

        let build = |p: &Params<f64>, tape: &mut Tape<f64>| {
            let vars = tape.params(p, 0);
            let xi = tape.constant(x.clone());
            let hi = tape.constant(h0.clone());
            let e = mlp.forward_t(tape, &vars, xi);
            let h1 = gru.forward_t(tape, &vars, e, hi);
            let h2 = gru.forward_t(tape, &vars, e, h1);
            let probs = tape.softmax(h2, 2);
            let mixed = tape.scale(probs, 0.9);
            let mixed = tape.add_scalar(mixed, 0.05);
            let logp = tape.ln(mixed);
            let tgt = tape.constant(ndarray::concatenate(ndarray::Axis(1), &[target.view(), target.view()]).unwrap());
            let ce = tape.mul(tgt, logp);
            let ce = tape.sum_cols(ce);
            let ce = tape.max_scalar(ce, -2.0);
            let sq = tape.square(h1);
            let sp = tape.softplus(sq);
            let ex = tape.exp(h1);
            let w = tape.slice_cols(ex, 1, 2);
            let top = tape.slice_rows(sp, 0, 1);
            let bottom = tape.slice_rows(sp, 1, 2);
            let sp = tape.concat_rows(&[bottom, top]);
            let weighted = tape.mul_col(sp, w);
            let cl = tape.clamp(weighted, 0.0, 0.8);
            let mn = tape.minimum(cl, sp);
            let th = tape.tanh(mn);
            let s1 = tape.mean(th);
            let s2 = tape.mean(ce);
            let total = tape.sub(s1, s2);
            tape.sigmoid(total)
        };

        let mut tape = Tape::new();
        let loss = build(&params, &mut tape);
        let analytic = tape.backward(loss, &[(0, &params)]).remove(0);
        let numeric = numeric_grad(&params, |p| {
            let mut t = Tape::new();
            let l = build(p, &mut t);
            t.scalar(l)
        });
        assert_close(&analytic, &numeric);
    }

    #[test]
    fn inference_and_tape_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut params = Params::<f64>::default();
        let mlp = Mlp::new(&mut params, "mlp", &[3, 7, 4], Init::He, Init::Xavier(1.0), &mut rng);
        let gru = GruCell::new(&mut params, "gru", 4, 5, &mut rng);
        let x = array![[0.3, -0.2, 0.9]];
        let h = array![[0.1, 0.2, 0.3, 0.4, 0.5]];
        let direct = gru.forward(&params, &mlp.forward(&params, &x), &h);
        let mut tape = Tape::new();
        let vars = tape.params(&params, 0);
        let xi = tape.constant(x);
        let hi = tape.constant(h);
        let e = mlp.forward_t(&mut tape, &vars, xi);
        let out = gru.forward_t(&mut tape, &vars, e, hi);
        for (a, b) in direct.iter().zip(tape.value(out)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_minimizes_quadratic_and_clips() {
        let mut params = Params::<f64>::default();
        params.add("x", array![[3.0, -2.0]]);
        let mut opt = Adam::new(&params, 0.1, 1e-8, Some(1.0));
        for _ in 0..500 {
            let g = vec![params[0].mapv(|v| 2.0 * v)];
            opt.step(&mut params, &g);
        }
        assert!(params[0].iter().all(|v| v.abs() < 1e-2));
        let norm = opt.step(&mut params, &[array![[300.0, 400.0]]]);
        assert_eq!(norm, 500.0);
    }

    #[test]
    fn ema_moves_by_fraction() {
        let mut slow = Params::<f64>::default();
        slow.add("w", array![[1.0]]);
        let mut fast = Params::<f64>::default();
        fast.add("w", array![[2.0]]);
        slow.ema_toward(&fast, 0.02);
        assert!((slow[0][[0, 0]] - 1.02).abs() < 1e-12);
    }

    #[test]
    fn detach_stops_gradient() {
        let mut params = Params::<f64>::default();
        params.add("w", array![[2.0]]);
        let mut tape = Tape::new();
        let v = tape.params(&params, 0);
        let sq = tape.square(v[0]);
        let d = tape.detach(sq);
        let loss = tape.mul(d, v[0]);
        let g = tape.backward(loss, &[(0, &params)]).remove(0);
        assert_eq!(g[0][[0, 0]], 4.0);
    }
}
