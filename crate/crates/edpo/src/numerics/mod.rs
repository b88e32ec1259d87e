//! Minimal dense-tensor math with reverse-mode automatic differentiation and
//! an adaptive-moment optimizer. Everything downstream builds on this module.

mod adam;
mod checkpoint;
mod graph;
mod tensor;

pub use adam::{AdamConfig, AdamState, Optimizer};
pub use checkpoint::{read_checkpoint, read_checkpoint_str, write_checkpoint, write_checkpoint_str};
pub use graph::{Graph, NodeId};
pub use tensor::Tensor;

use crate::{Error, Result};

/// log(sum(exp(v))) with max-subtraction stabilization.
pub fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = v.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// out_i = v_i - log(sum_j exp(v_j)). The outputs satisfy logsumexp(out) = 0.
pub fn log_softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::InvalidArgument("log_softmax of empty vector".into()));
    }
    let lse = logsumexp(v);
    Ok(v.iter().map(|&x| x - lse).collect())
}

/// Softmax with max-subtraction stabilization.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    Ok(log_softmax(v)?.iter().map(|&x| x.exp()).collect())
}

/// log(sigmoid(x)) = -softplus(-x), stable for large |x|.
pub fn logsigmoid(x: f64) -> f64 {
    // softplus(t) = log1p(exp(t)) for t <= 0, t + log1p(exp(-t)) otherwise
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Logistic sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
