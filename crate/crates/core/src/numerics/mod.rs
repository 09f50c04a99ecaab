//! Minimal dense linear algebra, activations, and a deterministic RNG.
//!
//! Everything downstream (layers, training, decoding) is built on this
//! module. Backward passes are hand-written per layer, so the only gradient
//! machinery here is the central finite-difference oracle used to check them.

mod rng;
mod tensor;

pub use rng::RngState;
pub use tensor::{l1_penalty, l2_penalty, sign, Tensor};

/// stanh scale constant: stanh(x) = 1.7159 * tanh(2x/3).
pub const STANH_SCALE: f64 = 1.7159;

/// Elementwise logistic sigmoid.
pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Elementwise max(0, x).
pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Scaled hyperbolic tangent, 1.7159 * tanh(2x/3). Bounded by 1.7159 in
/// absolute value.
pub fn stanh(x: &Tensor) -> Tensor {
    x.map(stanh_scalar)
}

pub fn stanh_scalar(x: f64) -> f64 {
    STANH_SCALE * (2.0 * x / 3.0).tanh()
}

/// Derivative of stanh expressed in terms of the stanh *output* y:
/// d/dx = (2/3) * 1.7159 * (1 - (y/1.7159)^2).
pub fn stanh_prime_from_output(y: f64) -> f64 {
    let t = y / STANH_SCALE;
    (2.0 / 3.0) * STANH_SCALE * (1.0 - t * t)
}

/// Derivative of ReLU expressed in terms of the output.
pub fn relu_prime_from_output(y: f64) -> f64 {
    if y > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Numerically stable softmax of a 1-D tensor (max subtraction).
pub fn softmax(x: &Tensor) -> Tensor {
    let max = x.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = x.map(|v| (v - max).exp());
    let sum = out.sum();
    for v in out.data_mut() {
        *v /= sum;
    }
    out
}

/// log(softmax(x)), computed without forming the softmax first.
pub fn log_softmax(x: &Tensor) -> Tensor {
    let max = x.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &v in x.data() {
        sum += (v - max).exp();
    }
    let log_z = max + sum.ln();
    x.map(|v| v - log_z)
}

/// Central finite differences: (f(x + eps e_i) - f(x - eps e_i)) / (2 eps)
/// per coordinate. The gradient oracle that every hand-written backward pass
/// is checked against.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, eps: f64) -> Tensor {
    assert!(eps > 0.0, "finite_diff_grad requires eps > 0");
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * eps);
    }
    grad
}

/// Relative error between an analytic gradient and the finite-difference
/// oracle, with a small absolute floor so near-zero gradients do not blow
/// the ratio up on roundoff noise.
pub fn grad_rel_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    let mut worst = 0.0f64;
    for (a, n) in analytic.data().iter().zip(numeric.data()) {
        let denom = (a.abs() + n.abs()).max(1e-3);
        worst = worst.max((a - n).abs() / denom);
    }
    worst
}
