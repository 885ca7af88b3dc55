//! Dense n-dimensional tensors: a shape and a contiguous row-major buffer.
//!
//! Plain values only; gradients live on the tape ([`crate::graph`]), not
//! here. Tensors are immutable in spirit: forward ops allocate new buffers,
//! only the optimizer writes in place.

use crate::scalar::Scalar;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dim(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![S::zero(); numel],
        }
    }

    pub fn full(shape: Vec<usize>, value: S) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_f64s(shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        Tensor::new(shape, values.iter().map(|&v| S::of_f64(v)).collect())
    }

    /// n x n identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = S::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Single-element accessor for loss values and the like.
    pub fn item(&self) -> Result<S> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_value(&self) -> S {
        self.data
            .iter()
            .copied()
            .fold(S::neg_infinity(), |a, b| if b > a { b } else { a })
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Dim(format!(
                "reshape {:?} -> {:?}: element count differs",
                self.shape, shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// Broadcast result shape under trailing-alignment rules, or a dimension
/// error if some extent pair is neither equal nor 1.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(Error::Dim(format!(
                "cannot broadcast {a:?} with {b:?}"
            )));
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

/// Maps a flat index in `out_shape` to the flat index in `src_shape`
/// (trailing-aligned, size-1 extents repeat). Precomputed as a stride table.
pub fn broadcast_strides(src_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let n = out_shape.len();
    let pad = n - src_shape.len();
    let src_strides = strides(src_shape);
    let mut out = vec![0usize; n];
    for d in 0..n {
        if d >= pad && src_shape[d - pad] != 1 {
            out[d] = src_strides[d - pad];
        }
    }
    out
}

/// Folds a gradient of `out_shape` back onto `src_shape` by summing over the
/// broadcast extents.
pub fn reduce_to_shape<S: Scalar>(grad: &[S], out_shape: &[usize], src_shape: &[usize]) -> Vec<S> {
    let src_numel: usize = src_shape.iter().product();
    if out_shape == src_shape {
        return grad.to_vec();
    }
    let bstr = broadcast_strides(src_shape, out_shape);
    let ostr = strides(out_shape);
    let mut out = vec![S::zero(); src_numel];
    for (flat, &g) in grad.iter().enumerate() {
        let mut src = 0usize;
        for d in 0..out_shape.len() {
            let coord = (flat / ostr[d]) % out_shape[d];
            src += coord * bstr[d];
        }
        out[src] += g;
    }
    out
}
