//! Composite operations built from the differentiable primitives on [`Var`].
//!
//! Everything here is expressed through recorded primitives, so gradients of
//! any order are available.

use super::graph::Var;
use super::tensor::{ConvGeometry, Tensor};
use crate::error::{Error, Result};

/// Largest supported convolution kernel side.
pub const MAX_KERNEL: usize = 7;

/// 2-D cross-correlation of `x: [B, C, H, W]` with `w: [O, C, k, k]`.
pub fn conv2d(x: &Var, w: &Var, stride: usize, pad: usize) -> Result<Var> {
    let xs = x.shape();
    let ws = w.shape();
    let mismatch = || Error::ShapeMismatch {
        op: "conv2d",
        lhs: xs.clone(),
        rhs: ws.clone(),
    };
    if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] {
        return Err(mismatch());
    }
    let k = ws[2];
    if k == 0 || k > MAX_KERNEL || stride == 0 {
        return Err(Error::invalid(format!(
            "conv2d supports square kernels 1..={MAX_KERNEL} with stride >= 1, got k={k} stride={stride}"
        )));
    }
    if xs[2] + 2 * pad < k || xs[3] + 2 * pad < k {
        return Err(mismatch());
    }
    let geom = ConvGeometry {
        batch: xs[0],
        channels: xs[1],
        height: xs[2],
        width: xs[3],
        kernel: k,
        stride,
        pad,
    };
    let (oh, ow, out_c) = (geom.out_h(), geom.out_w(), ws[0]);
    let cols = x.im2col(geom)?;
    let wm = w.reshape(&[out_c, xs[1] * k * k])?.transpose()?;
    cols.matmul(&wm)?
        .reshape(&[xs[0], oh, ow, out_c])?
        .permute(&[0, 3, 1, 2])
}

/// One-hot matrix `[labels.len(), classes]`.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok(Tensor::from_fn(&[labels.len(), classes], |i| {
        if labels[i / classes] == i % classes {
            1.0
        } else {
            0.0
        }
    }))
}

/// Summed softmax cross-entropy of `logits: [B, N]` against integer labels.
pub fn softmax_cross_entropy(logits: &Var, labels: &[usize]) -> Result<Var> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "softmax_cross_entropy",
            lhs: s,
            rhs: vec![labels.len()],
        });
    }
    if labels.is_empty() {
        return Err(Error::invalid("cross-entropy over an empty batch"));
    }
    let target = logits.graph().constant(one_hot(labels, s[1])?)?;
    logits.log_softmax()?.mul(&target)?.sum()?.neg()
}

/// Euclidean distance matrix `[n, n]` between the rows of `x: [n, d]`.
pub fn pairwise_distance(x: &Var) -> Result<Var> {
    let s = x.shape();
    if s.len() != 2 {
        return Err(Error::invalid(format!("pairwise_distance expects [n, d], got {s:?}")));
    }
    let (n, d) = (s[0], s[1]);
    let diff = x.reshape(&[n, 1, d])?.sub(&x.reshape(&[1, n, d])?)?;
    diff.mul(&diff)?.sum_axes(&[2])?.sqrt()
}

/// Elementwise Huber function: `x²/2` inside `[-δ, δ]`, `δ(|x| - δ/2)` outside.
pub fn huber(x: &Var, delta: f64) -> Result<Var> {
    if !(delta > 0.0) {
        return Err(Error::invalid(format!("huber delta must be > 0, got {delta}")));
    }
    // With c = clamp(x, -δ, δ), c·(x - c/2) equals the Huber function piecewise.
    let c = x.clamp(-delta, delta)?;
    c.mul(&x.sub(&c.scale(0.5)?)?)
}
