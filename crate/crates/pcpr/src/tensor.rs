//! Dense row-major tensors over f64: scalars (rank 0), vectors (rank 1)
//! and matrices (rank 2). This is the value type carried by autodiff nodes.

use crate::error::{Error, Result};
use rayon::prelude::*;

/// Minimum matrix row count and total work before the matmul kernel
/// bothers with rayon.
const PAR_ROWS: usize = 8;
const PAR_WORK: usize = 1 << 17;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn scalar(x: f64) -> Self {
        Tensor { dims: vec![], data: vec![x] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { dims: vec![data.len()], data }
    }

    /// Row-major matrix from a flat buffer; `data.len()` must equal `rows*cols`.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix buffer length mismatch");
        Tensor { dims: vec![rows, cols], data }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let len = dims.iter().product::<usize>().max(1);
        Tensor { dims: dims.to_vec(), data: vec![0.0; len] }
    }

    pub fn ones(dims: &[usize]) -> Self {
        let len = dims.iter().product::<usize>().max(1);
        Tensor { dims: dims.to_vec(), data: vec![1.0; len] }
    }

    pub fn from_dims(dims: Vec<usize>, data: Vec<f64>) -> Self {
        let len = dims.iter().product::<usize>().max(1);
        assert_eq!(data.len(), len, "tensor buffer length mismatch");
        Tensor { dims, data }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.dims.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Scalar value; panics on non-scalars (caller checks rank).
    pub fn scalar_value(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.dims[0]
    }

    pub fn cols(&self) -> usize {
        self.dims[1]
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.dims[1] + c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Elementwise combine of same-shape tensors; shape checked by caller.
    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert_eq!(self.dims, other.dims);
        Tensor {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn transposed(&self) -> Tensor {
        debug_assert_eq!(self.rank(), 2);
        let (r, c) = (self.dims[0], self.dims[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor { dims: vec![c, r], data: out }
    }

    /// C = op_a(A) * op_b(B) where op is an optional transpose.
    pub fn matmul(&self, other: &Tensor, ta: bool, tb: bool) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.dims.clone(),
                rhs: other.dims.clone(),
            });
        }
        let a_owned;
        let a = if ta {
            a_owned = self.transposed();
            &a_owned
        } else {
            self
        };
        let b_owned;
        let b = if tb {
            b_owned = other.transposed();
            &b_owned
        } else {
            other
        };
        let (m, k) = (a.dims[0], a.dims[1]);
        let (k2, n) = (b.dims[0], b.dims[1]);
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a.dims.clone(),
                rhs: b.dims.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        let kernel = |i: usize, row_out: &mut [f64]| {
            let arow = &a.data[i * k..(i + 1) * k];
            for (l, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &b.data[l * n..(l + 1) * n];
                for (o, &bv) in row_out.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        };
        if m >= PAR_ROWS && m * k * n >= PAR_WORK {
            out.par_chunks_mut(n)
                .enumerate()
                .for_each(|(i, row)| kernel(i, row));
        } else {
            for (i, row) in out.chunks_mut(n).enumerate() {
                kernel(i, row);
            }
        }
        Ok(Tensor { dims: vec![m, n], data: out })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let eye = Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        let v = Tensor::matrix(3, 1, vec![2., -1., 5.]);
        let out = eye.matmul(&v, false, false).unwrap();
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn matmul_transpose_flags() {
        let a = Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]);
        let b = Tensor::matrix(2, 3, vec![7., 8., 9., 10., 11., 12.]);
        // a * b^T is 2x2
        let c = a.matmul(&b, false, true).unwrap();
        assert_eq!(c.dims(), &[2, 2]);
        assert_eq!(c.at2(0, 0), 1. * 7. + 2. * 8. + 3. * 9.);
        // a^T * b is 3x3
        let d = a.matmul(&b, true, false).unwrap();
        assert_eq!(d.dims(), &[3, 3]);
        assert_eq!(d.at2(2, 1), 3. * 8. + 6. * 11.);
    }

    #[test]
    fn matmul_rejects_bad_inner_dim() {
        let a = Tensor::matrix(2, 3, vec![0.; 6]);
        let b = Tensor::matrix(2, 2, vec![0.; 4]);
        let err = a.matmul(&b, false, false).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }
}
