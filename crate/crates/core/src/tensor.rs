//! Dense n-dimensional arrays, the elementwise/matrix kernels every layer
//! builds on, and the finite-difference gradient checker.
//!
//! Values are `f32` during training; the same code runs in `f64` for the
//! gradient-check oracle, so all kernels are generic over [`Real`].

use crate::error::{Error, Result};
use std::fmt;

/// Scalar element type (`f32` for storage, `f64` for the oracle mode).
pub trait Real:
    Copy
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn max(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
}

macro_rules! impl_real {
    ($t:ty) => {
        impl Real for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn ln(self) -> Self {
                self.ln()
            }
            fn tanh(self) -> Self {
                self.tanh()
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn abs(self) -> Self {
                self.abs()
            }
            fn max(self, other: Self) -> Self {
                if self > other {
                    self
                } else {
                    other
                }
            }
            fn is_finite(self) -> bool {
                self.is_finite()
            }
        }
    };
}

impl_real!(f32);
impl_real!(f64);

/// Dense row-major array with shape metadata.
///
/// Gradients use the same representation: a gradient always has the shape of
/// the value it differentiates, and accumulation is plain addition.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Real> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                context: "Tensor::new",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::ZERO; len],
        }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Identity matrix, used by the degenerate (pooling-equivalent) setup.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::ONE;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn zeros_like(&self) -> Self {
        Tensor::zeros(&self.shape)
    }

    pub fn fill(&mut self, v: T) {
        for x in &mut self.data {
            *x = v;
        }
    }

    /// Rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[0]
    }

    /// Columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[1]
    }

    /// y = W x for a rank-2 `self` and rank-1 `x`.
    pub fn matvec(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape.len() != 2 || x.shape.len() != 1 || self.shape[1] != x.shape[0] {
            return Err(Error::Shape {
                context: "matvec",
                left: self.shape.clone(),
                right: x.shape.clone(),
            });
        }
        let mut y = Tensor::zeros(&[self.shape[0]]);
        matvec_acc(&self.data, self.shape[0], self.shape[1], &x.data, &mut y.data);
        Ok(y)
    }

    pub fn assert_finite(&self, context: &str) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("{context} at flat index {i}: {v}"),
                });
            }
        }
        Ok(())
    }

    /// Widen to f64 (exact for f32 inputs). Used to move a trained model into
    /// the oracle precision.
    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v.to_f64()).collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Slice kernels. The scan loops run on raw slices with preallocated buffers;
// accumulation order is fixed (ascending index) so results are reproducible.
// ---------------------------------------------------------------------------

/// out += W x, with W row-major m x n.
pub fn matvec_acc<T: Real>(w: &[T], m: usize, n: usize, x: &[T], out: &mut [T]) {
    debug_assert_eq!(w.len(), m * n);
    debug_assert_eq!(x.len(), n);
    debug_assert_eq!(out.len(), m);
    for i in 0..m {
        let row = &w[i * n..(i + 1) * n];
        let mut acc = T::ZERO;
        for j in 0..n {
            acc += row[j] * x[j];
        }
        out[i] += acc;
    }
}

/// out += W^T g, with W row-major m x n and g of length m.
pub fn matvec_t_acc<T: Real>(w: &[T], m: usize, n: usize, g: &[T], out: &mut [T]) {
    debug_assert_eq!(w.len(), m * n);
    debug_assert_eq!(g.len(), m);
    debug_assert_eq!(out.len(), n);
    for i in 0..m {
        let row = &w[i * n..(i + 1) * n];
        let gi = g[i];
        for j in 0..n {
            out[j] += gi * row[j];
        }
    }
}

/// dW += g ⊗ x (outer product), the weight gradient of y = W x.
pub fn outer_acc<T: Real>(g: &[T], x: &[T], dw: &mut [T]) {
    debug_assert_eq!(dw.len(), g.len() * x.len());
    let n = x.len();
    for (i, &gi) in g.iter().enumerate() {
        let row = &mut dw[i * n..(i + 1) * n];
        for j in 0..n {
            row[j] += gi * x[j];
        }
    }
}

pub fn add_assign<T: Real>(out: &mut [T], src: &[T]) {
    debug_assert_eq!(out.len(), src.len());
    for (o, s) in out.iter_mut().zip(src) {
        *o += *s;
    }
}

pub fn scale_assign<T: Real>(out: &mut [T], k: T) {
    for o in out.iter_mut() {
        *o *= k;
    }
}

// ---------------------------------------------------------------------------
// Activations and their backward rules. Backward rules take the recorded
// *output* of the forward pass, which determines the derivative for all four.
// ---------------------------------------------------------------------------

pub fn relu<T: Real>(x: T) -> T {
    x.max(T::ZERO)
}

pub fn sigmoid<T: Real>(x: T) -> T {
    T::ONE / (T::ONE + (-x).exp())
}

pub fn relu_slice<T: Real>(xs: &mut [T]) {
    for x in xs.iter_mut() {
        *x = relu(*x);
    }
}

/// d/dx relu at a point where the forward output was `y`.
pub fn relu_grad<T: Real>(y: T) -> T {
    if y > T::ZERO {
        T::ONE
    } else {
        T::ZERO
    }
}

/// d/dx sigmoid expressed through the output y = sigmoid(x).
pub fn sigmoid_grad<T: Real>(y: T) -> T {
    y * (T::ONE - y)
}

/// d/dx tanh expressed through the output y = tanh(x).
pub fn tanh_grad<T: Real>(y: T) -> T {
    T::ONE - y * y
}

/// Numerically stable softmax of a vector (max subtraction before exp).
pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let mut max = logits[0];
    for &v in &logits[1..] {
        max = max.max(v);
    }
    let mut out: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
    let mut sum = T::ZERO;
    for &v in &out {
        sum += v;
    }
    for v in &mut out {
        *v = *v / sum;
    }
    out
}

// ---------------------------------------------------------------------------
// Gradient checking.
// ---------------------------------------------------------------------------

/// Outcome of checking one parameter group against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    /// Worst relative error over all coordinates.
    pub worst_rel: f64,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coords: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.worst_rel <= tol
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: worst rel {:.3e} at [{}] (analytic {:.6e}, numeric {:.6e}, {} coords)",
            self.name, self.worst_rel, self.worst_index, self.analytic_at_worst, self.numeric_at_worst, self.coords
        )
    }
}

/// Relative error between an analytic and a numeric derivative. Differences
/// below an absolute noise floor count as zero so that genuinely-zero
/// gradients do not produce spurious failures.
pub fn grad_rel_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= 1e-8 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs())
}

/// Check an analytic gradient of a scalar function against central
/// differences (f(x+e) - f(x-e)) / 2e, coordinate by coordinate.
///
/// Returns the report; `Err` names the worst coordinate when it exceeds the
/// tolerance.
pub fn gradcheck_fn<F>(
    name: &str,
    mut f: F,
    theta: &[f64],
    analytic: &[f64],
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(theta.len(), analytic.len());
    let mut probe = theta.to_vec();
    let mut report = GradCheckReport {
        name: name.to_string(),
        worst_rel: 0.0,
        worst_index: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        coords: theta.len(),
    };
    for i in 0..theta.len() {
        probe[i] = theta[i] + eps;
        let up = f(&probe);
        probe[i] = theta[i] - eps;
        let down = f(&probe);
        probe[i] = theta[i];
        let numeric = (up - down) / (2.0 * eps);
        let rel = grad_rel_error(analytic[i], numeric);
        if rel > report.worst_rel {
            report.worst_rel = rel;
            report.worst_index = i;
            report.analytic_at_worst = analytic[i];
            report.numeric_at_worst = numeric;
        }
    }
    if report.worst_rel > tol {
        return Err(Error::contract(format!(
            "gradcheck failed for {name}: coordinate {} rel error {:.3e} > {tol:.1e} (analytic {:.6e}, numeric {:.6e})",
            report.worst_index, report.worst_rel, report.analytic_at_worst, report.numeric_at_worst
        )));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_identity_and_zero() {
        let eye = Tensor::<f64>::eye(3);
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
        assert_eq!(eye.matvec(&x).unwrap().data(), &[1.0, 2.0, 3.0]);

        let zero = Tensor::<f64>::zeros(&[2, 3]);
        let x = Tensor::from_vec(vec![5.0, 5.0, 5.0]);
        assert_eq!(zero.matvec(&x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn matvec_hand_computed() {
        let w = Tensor::new(vec![2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let x = Tensor::from_vec(vec![1.0, 1.0]);
        assert_eq!(w.matvec(&x).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matvec_shape_error_reports_both_shapes() {
        let w = Tensor::<f32>::zeros(&[2, 3]);
        let x = Tensor::from_vec(vec![1.0f32, 2.0]);
        match w.matvec(&x) {
            Err(Error::Shape { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    // The library matvec must agree bit for bit with a naive scalar loop: both
    // accumulate in ascending column order with no re-association.
    #[test]
    fn matvec_bit_equals_scalar_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let m = rng.gen_range(1..=8);
            let n = rng.gen_range(1..=8);
            let w: Vec<f64> = (0..m * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let wt = Tensor::new(vec![m, n], w.clone()).unwrap();
            let xt = Tensor::from_vec(x.clone());
            let y = wt.matvec(&xt).unwrap();
            for i in 0..m {
                let mut acc = 0.0f64;
                for j in 0..n {
                    acc += w[i * n + j] * x[j];
                }
                assert_eq!(y.data()[i].to_bits(), acc.to_bits(), "row {i}");
            }
        }
    }

    #[test]
    fn activation_values() {
        assert_eq!(relu(-1.0f32), 0.0);
        assert_eq!(relu(0.0f32), 0.0);
        assert_eq!(relu(2.0f32), 2.0);
        assert_eq!(sigmoid(0.0f64), 0.5);
        let s = softmax(&[1.0f64, 1.0, 1.0]);
        for v in s {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_stable_for_large_inputs() {
        for scale in [1.0f64, 10.0, 100.0, 1000.0] {
            let s = softmax(&[scale, -scale, scale / 2.0, 0.0]);
            let sum: f64 = s.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6, "scale {scale}: sum {sum}");
            assert!(s.iter().all(|v| v.is_finite() && *v >= 0.0));
        }
    }

    #[test]
    fn relu_backward_masks_negative_inputs() {
        // forward outputs at x = (-1, 2) are (0, 2); upstream (1, 1)
        let grads: Vec<f64> = [0.0, 2.0].iter().map(|&y| relu_grad(y) * 1.0).collect();
        assert_eq!(grads, vec![0.0, 1.0]);
    }

    #[test]
    fn gradcheck_sum_of_squares() {
        // f(x) = sum x^2, analytic gradient 2x.
        let theta = [1.0, 2.0];
        let analytic = [2.0, 4.0];
        let f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let report = gradcheck_fn("sum_sq", f, &theta, &analytic, 1e-5, 1e-7).unwrap();
        assert!(report.worst_rel <= 1e-7, "{report}");
    }

    #[test]
    fn gradcheck_flags_wrong_gradient() {
        let theta = [1.0, 2.0];
        let wrong = [2.0, 3.0]; // second coordinate should be 4
        let f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let err = gradcheck_fn("sum_sq", f, &theta, &wrong, 1e-5, 1e-4).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("coordinate 1"), "{msg}");
    }

    #[test]
    fn matvec_backward_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let (m, n) = (3, 4);
        let w: Vec<f64> = (0..m * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let upstream: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();

        // loss = upstream . (W x); dW = upstream ⊗ x, dx = W^T upstream
        let mut dw = vec![0.0; m * n];
        outer_acc(&upstream, &x, &mut dw);
        let mut dx = vec![0.0; n];
        matvec_t_acc(&w, m, n, &upstream, &mut dx);

        let loss_w = |wv: &[f64]| {
            let mut y = vec![0.0; m];
            matvec_acc(wv, m, n, &x, &mut y);
            y.iter().zip(&upstream).map(|(a, b)| a * b).sum::<f64>()
        };
        gradcheck_fn("matvec/dW", loss_w, &w, &dw, 1e-6, 1e-8).unwrap();

        let loss_x = |xv: &[f64]| {
            let mut y = vec![0.0; m];
            matvec_acc(&w, m, n, xv, &mut y);
            y.iter().zip(&upstream).map(|(a, b)| a * b).sum::<f64>()
        };
        gradcheck_fn("matvec/dx", loss_x, &x, &dx, 1e-6, 1e-8).unwrap();
    }
}
