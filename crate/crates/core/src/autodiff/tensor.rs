use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Arithmetic precision used by a graph.
///
/// Storage is always `f64`; in `F32` mode every value produced by an op is
/// rounded through `f32`, which reproduces single-precision results for the
/// elementwise and reduction kernels used here.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

impl Precision {
    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            Precision::F64 => v,
            Precision::F32 => v as f32 as f64,
        }
    }
}

/// Dense row-major tensor. Immutable; clones share storage.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<[f64]>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, &self.data[..])
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(format!(
                "shape {:?} holds {} values but {} were given",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data: data.into(),
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: data.into(),
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::from_parts(vec![], vec![v])
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![v; n])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    pub fn eye(n: usize) -> Self {
        Tensor::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::NotScalar {
                shape: self.shape.clone(),
            })
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Elementwise combination of two tensors of identical shape.
    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "zip_map",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Tensor::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0` and NaN payloads.
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        let d = self.zip_map(other, |a, b| (a - b).abs())?;
        Ok(d.data.iter().cloned().fold(0.0, f64::max))
    }

    /// Row-wise argmax over the last axis of a 2-D tensor.
    pub fn argmax_rows(&self) -> Result<Vec<usize>> {
        if self.rank() != 2 {
            return Err(Error::invalid(format!(
                "argmax_rows expects a matrix, got {:?}",
                self.shape
            )));
        }
        let cols = self.shape[1];
        Ok(self
            .data
            .chunks(cols)
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }

    /// Rows `[start, end)` of the leading axis.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        if self.rank() == 0 || end > self.shape[0] || start > end {
            return Err(Error::invalid(format!(
                "row range {start}..{end} out of bounds for {:?}",
                self.shape
            )));
        }
        let row: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Tensor::from_parts(shape, self.data[start * row..end * row].to_vec()))
    }

    pub(crate) fn rounded(self, precision: Precision) -> Tensor {
        match precision {
            Precision::F64 => self,
            Precision::F32 => self.map(|v| precision.round(v)),
        }
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        s[i] = acc;
        acc *= shape[i];
    }
    s
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out` (right-aligned); broadcast axes get 0.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let offset = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

/// Walks every index of `out` and yields the linear offset into a tensor with
/// the given broadcast strides.
fn for_each_offset(out: &[usize], st: &[usize], mut f: impl FnMut(usize, usize)) {
    let n: usize = out.iter().product();
    if n == 0 {
        return;
    }
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for lin in 0..n {
        f(lin, off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += st[d];
            if idx[d] < out[d] {
                break;
            }
            off -= st[d] * out[d];
            idx[d] = 0;
        }
    }
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

pub(crate) fn broadcast_binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape == b.shape {
        return a.zip_map(b, f);
    }
    let out = broadcast_shape(&a.shape, &b.shape).ok_or_else(|| Error::ShapeMismatch {
        op,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    })?;
    let n: usize = out.iter().product();
    let mut data = Vec::with_capacity(n);
    if out == a.shape && is_suffix(&b.shape, &a.shape) {
        let nb = b.numel().max(1);
        for (i, &x) in a.data.iter().enumerate() {
            data.push(f(x, b.data[i % nb]));
        }
    } else if out == b.shape && is_suffix(&a.shape, &b.shape) {
        let na = a.numel().max(1);
        for (i, &y) in b.data.iter().enumerate() {
            data.push(f(a.data[i % na], y));
        }
    } else {
        let sa = broadcast_strides(&a.shape, &out);
        let sb = broadcast_strides(&b.shape, &out);
        let mut offs_a = Vec::with_capacity(n);
        for_each_offset(&out, &sa, |_, o| offs_a.push(o));
        let mut i = 0;
        for_each_offset(&out, &sb, |_, ob| {
            data.push(f(a.data[offs_a[i]], b.data[ob]));
            i += 1;
        });
    }
    Ok(Tensor::from_parts(out, data))
}

/// Sums `x` down to `target`, which must broadcast to `x`'s shape.
pub(crate) fn sum_to(x: &Tensor, target: &[usize]) -> Result<Tensor> {
    if x.shape == target {
        return Ok(x.clone());
    }
    match broadcast_shape(target, &x.shape) {
        Some(ref s) if *s == x.shape => {}
        _ => {
            return Err(Error::ShapeMismatch {
                op: "sum_to",
                lhs: x.shape.clone(),
                rhs: target.to_vec(),
            })
        }
    }
    let nt: usize = target.iter().product();
    let mut out = vec![0.0; nt];
    if nt == 1 {
        out[0] = x.data.iter().sum();
    } else if is_suffix(target, &x.shape) {
        for (i, &v) in x.data.iter().enumerate() {
            out[i % nt] += v;
        }
    } else {
        let st = broadcast_strides(target, &x.shape);
        for_each_offset(&x.shape, &st, |lin, o| out[o] += x.data[lin]);
    }
    Ok(Tensor::from_parts(target.to_vec(), out))
}

pub(crate) fn broadcast_to(x: &Tensor, target: &[usize]) -> Result<Tensor> {
    if x.shape == target {
        return Ok(x.clone());
    }
    match broadcast_shape(&x.shape, target) {
        Some(ref s) if s == target => {}
        _ => {
            return Err(Error::ShapeMismatch {
                op: "broadcast_to",
                lhs: x.shape.clone(),
                rhs: target.to_vec(),
            })
        }
    }
    let st = broadcast_strides(&x.shape, target);
    let mut data = Vec::with_capacity(target.iter().product());
    for_each_offset(target, &st, |_, o| data.push(x.data[o]));
    Ok(Tensor::from_parts(target.to_vec(), data))
}

pub(crate) fn permute(x: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
        return Err(Error::invalid(format!(
            "permute: {axes:?} is not a permutation of {rank} axes"
        )));
    }
    let own = strides(&x.shape);
    let out: Vec<usize> = axes.iter().map(|&a| x.shape[a]).collect();
    let st: Vec<usize> = axes.iter().map(|&a| own[a]).collect();
    let mut data = Vec::with_capacity(x.numel());
    for_each_offset(&out, &st, |_, o| data.push(x.data[o]));
    Ok(Tensor::from_parts(out, data))
}

/// `a @ b` for rank-2 operands or rank-3 operands with a shared batch axis.
pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mismatch = || Error::ShapeMismatch {
        op: "matmul",
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    };
    let (batch, m, k, n) = match (a.shape.as_slice(), b.shape.as_slice()) {
        (&[m, k], &[k2, n]) if k == k2 => (1, m, k, n),
        (&[ba, m, k], &[bb, k2, n]) if ba == bb && k == k2 => (ba, m, k, n),
        _ => return Err(mismatch()),
    };
    let mut c = vec![0.0; batch * m * n];
    for bi in 0..batch {
        let (ao, bo, co) = (bi * m * k, bi * k * n, bi * m * n);
        gemm(
            m,
            k,
            n,
            &a.data[ao..ao + m * k],
            &b.data[bo..bo + k * n],
            &mut c[co..co + m * n],
        );
    }
    let shape = if batch == 1 && a.rank() == 2 {
        vec![m, n]
    } else {
        vec![batch, m, n]
    };
    Ok(Tensor::from_parts(shape, c))
}

fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        return;
    }
    // SAFETY: slices are exactly m*k, k*n and m*n long, row-major with the
    // strides passed below, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let cols = *x
        .shape
        .last()
        .ok_or_else(|| Error::invalid("log_softmax of a 0-dim tensor"))?;
    if cols == 0 {
        return Err(Error::invalid("log_softmax over an empty axis"));
    }
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data.chunks(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|&v| v - lse));
    }
    Ok(Tensor::from_parts(x.shape.clone(), out))
}

/// Geometry of a square-kernel 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn cols_shape(&self) -> Vec<usize> {
        vec![
            self.batch * self.out_h() * self.out_w(),
            self.channels * self.kernel * self.kernel,
        ]
    }

    fn image_shape(&self) -> Vec<usize> {
        vec![self.batch, self.channels, self.height, self.width]
    }

    /// Visits every (column-matrix offset, image offset) pair that lies inside
    /// the unpadded image.
    fn visit(&self, mut f: impl FnMut(usize, usize)) {
        let (oh, ow, k) = (self.out_h(), self.out_w(), self.kernel);
        let ckk = self.channels * k * k;
        for b in 0..self.batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((b * oh + oy) * ow + ox) * ckk;
                    for c in 0..self.channels {
                        for ky in 0..k {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.height as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix < 0 || ix >= self.width as isize {
                                    continue;
                                }
                                let col = row + (c * k + ky) * k + kx;
                                let img =
                                    ((b * self.channels + c) * self.height + iy as usize) * self.width + ix as usize;
                                f(col, img);
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn im2col(x: &Tensor, g: &ConvGeometry) -> Tensor {
    let shape = g.cols_shape();
    let mut out = vec![0.0; shape.iter().product()];
    g.visit(|col, img| out[col] = x.data[img]);
    Tensor::from_parts(shape, out)
}

pub(crate) fn col2im(cols: &Tensor, g: &ConvGeometry) -> Tensor {
    let shape = g.image_shape();
    let mut out = vec![0.0; shape.iter().product()];
    g.visit(|col, img| out[img] += cols.data[col]);
    Tensor::from_parts(shape, out)
}
