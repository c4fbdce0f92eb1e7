//! Numeric substrate: dense matrices, SVD-based pseudoinverse, seeded
//! sampling, small MLPs with hand-written backprop, and Adam.

mod adam;
mod gaussian;
mod gradcheck;
mod matrix;
mod mlp;
mod rng;
mod svd;

pub use adam::{Adam, AdamConfig, ParamGroup, Trainable};
pub use gaussian::{gaussian_sample, kl_gaussian_diag, GaussianSample};
pub use gradcheck::{finite_diff_check, finite_diff_gradient};
pub use matrix::{dot, matmul, DenseMatrix, DenseVector};
pub use mlp::{Activation, Layer, Mlp};
pub use rng::Rng;
pub use svd::{least_squares, pinv, svd, default_rcond, Svd};

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(x))` without overflow.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

#[inline]
pub fn leaky_relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.01 * x
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}
