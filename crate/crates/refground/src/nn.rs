//! Shared numeric plumbing: named parameter tensors with gradient buffers and
//! the handful of dense-algebra kernels the model is built from.
//!
//! Everything runs in f64. Forward passes cache what their hand-written
//! backward passes need; gradients accumulate into [`Param::grad`] until
//! [`Param::zero_grad`] is called.

use crate::rng::Rng;
use serde::{Deserialize, Serialize};

/// A named (rows x cols) parameter matrix with a gradient buffer. Vectors use
/// cols == 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub value: Vec<f64>,
    #[serde(skip)]
    pub grad: Vec<f64>,
    /// Leading elements excluded from optimizer updates. Used to pin the PAD
    /// embedding row at zero; gradients are still computed so finite
    /// differences stay comparable.
    #[serde(default)]
    pub fixed_prefix: usize,
}

impl Param {
    pub fn zeros(name: &str, rows: usize, cols: usize) -> Self {
        Param {
            name: name.to_string(),
            rows,
            cols,
            value: vec![0.0; rows * cols],
            grad: vec![0.0; rows * cols],
            fixed_prefix: 0,
        }
    }

    /// Uniform init in (-a, a) with a = 1/sqrt(fan_in).
    pub fn uniform(name: &str, rows: usize, cols: usize, fan_in: usize, rng: &mut Rng) -> Self {
        Param::uniform_scaled(name, rows, cols, 1.0 / (fan_in as f64).sqrt(), rng)
    }

    /// Uniform init in (-sqrt(6/fan_in), +sqrt(6/fan_in)); preserves variance
    /// through rectifier stacks, used for layers feeding a leaky rectifier.
    pub fn kaiming(name: &str, rows: usize, cols: usize, fan_in: usize, rng: &mut Rng) -> Self {
        Param::uniform_scaled(name, rows, cols, (6.0 / fan_in as f64).sqrt(), rng)
    }

    /// Uniform init with an explicit half-width.
    pub fn uniform_scaled(name: &str, rows: usize, cols: usize, a: f64, rng: &mut Rng) -> Self {
        let mut p = Param::zeros(name, rows, cols);
        for v in p.value.iter_mut() {
            *v = rng.uniform(-a, a);
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Row view (for embedding lookups).
    pub fn row(&self, r: usize) -> &[f64] {
        &self.value[r * self.cols..(r + 1) * self.cols]
    }

    /// Restore the gradient buffer after deserialization.
    pub fn ensure_grad(&mut self) {
        if self.grad.len() != self.value.len() {
            self.grad = vec![0.0; self.value.len()];
        }
    }
}

/// y = W x, W is rows x cols (row-major), x has cols entries.
pub fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    debug_assert_eq!(y.len(), rows);
    for (r, out) in y.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        *out = dot(row, x);
    }
}

/// y += W x.
pub fn matvec_acc(w: &[f64], rows: usize, cols: usize, x: &[f64], y: &mut [f64]) {
    for (r, out) in y.iter_mut().enumerate().take(rows) {
        let row = &w[r * cols..(r + 1) * cols];
        *out += dot(row, x);
    }
}

/// dx += W^T dy.
pub fn matvec_t_acc(w: &[f64], rows: usize, cols: usize, dy: &[f64], dx: &mut [f64]) {
    debug_assert_eq!(dy.len(), rows);
    debug_assert_eq!(dx.len(), cols);
    for (r, &g) in dy.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let row = &w[r * cols..(r + 1) * cols];
        for (d, &wv) in dx.iter_mut().zip(row) {
            *d += g * wv;
        }
    }
}

/// dW += dy x^T (outer product accumulate).
pub fn outer_acc(dw: &mut [f64], dy: &[f64], x: &[f64]) {
    let cols = x.len();
    for (r, &g) in dy.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let row = &mut dw[r * cols..(r + 1) * cols];
        for (d, &xv) in row.iter_mut().zip(x) {
            *d += g * xv;
        }
    }
}

/// Four-lane dot product. The fixed accumulation order is part of the
/// deterministic-run contract; the independent accumulators let the compiler
/// keep four multiply-add chains in flight.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut rest = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        rest += x * y;
    }
    (acc[0] + acc[2]) + (acc[1] + acc[3]) + rest
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Derivative of sigmoid expressed through its output y.
pub fn dsigmoid_from_y(y: f64) -> f64 {
    y * (1.0 - y)
}

/// Derivative of tanh expressed through its output y.
pub fn dtanh_from_y(y: f64) -> f64 {
    1.0 - y * y
}

pub const LEAKY_SLOPE: f64 = 0.1;

pub fn leaky_relu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        LEAKY_SLOPE * z
    }
}

/// Slope of the leaky rectifier given its (sign-preserving) output.
pub fn dleaky_from_y(y: f64) -> f64 {
    if y > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

/// Numerically stable softmax (max subtraction), writes a probability vector.
pub fn softmax(scores: &[f64], out: &mut [f64]) {
    debug_assert_eq!(scores.len(), out.len());
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &s) in out.iter_mut().zip(scores) {
        let e = (s - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Floor applied to the argument of every cross-entropy logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

/// ln with the argument clamped away from zero.
pub fn ln_clamped(p: f64) -> f64 {
    p.max(LOG_CLAMP).ln()
}
