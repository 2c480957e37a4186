//! Dense row-major tensors (rank 1 or 2).
//!
//! Values are immutable once created by an operation. Reductions
//! accumulate in index order so identical inputs always produce
//! bit-identical outputs.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A dense tensor of rank 1 or 2 with row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 2 {
            return Err(Error::dimension(
                "tensor",
                format!("rank must be 1 or 2, got shape {shape:?}"),
            ));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dimension(
                "tensor",
                format!("shape {shape:?} implies {expected} elements, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    /// Rank-1 tensor from a vector.
    pub fn vector(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Rank-2 tensor from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// (rows, cols); a rank-1 tensor counts as a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => unreachable!("rank checked at construction"),
        }
    }

    pub fn get(&self, row: usize, col: usize) -> T {
        let (_, cols) = self.dims2();
        self.data[row * cols + col]
    }

    /// True when every element is finite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row `i` as a slice.
    pub fn row(&self, i: usize) -> &[T] {
        let (_, cols) = self.dims2();
        &self.data[i * cols..(i + 1) * cols]
    }
}

impl<T: Scalar> Tensor<T> {
    /// Index of the largest element in a row; ties resolve to the
    /// lowest index so predictions are deterministic.
    pub fn argmax_row(&self, row: usize) -> usize {
        let r = self.row(row);
        let mut best = 0;
        for (j, v) in r.iter().enumerate().skip(1) {
            if *v > r[best] {
                best = j;
            }
        }
        best
    }
}

/// Plain (non-recorded) matrix product, accumulating in index order.
pub fn matmul_value<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::dimension("matmul", "operands must be rank 2"));
    }
    let (m, k) = a.dims2();
    let (k2, n) = b.dims2();
    if k != k2 {
        return Err(Error::dimension(
            "matmul",
            format!("inner dimensions differ: {m}x{k} vs {k2}x{n}"),
        ));
    }
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for kk in 0..k {
            let aik = a.data[i * k + kk];
            for j in 0..n {
                out[i * n + j] = out[i * n + j] + aik * b.data[kk * n + j];
            }
        }
    }
    Tensor::matrix(m, n, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_mismatch_rejected() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![], vec![]).is_err());
        assert!(Tensor::<f64>::new(vec![1, 2, 3], vec![0.0; 6]).is_err());
    }

    #[test]
    fn identity_matmul() {
        let id = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let v = Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap();
        let out = matmul_value(&id, &v).unwrap();
        assert_eq!(out.data(), &[3.0, 4.0]);
    }

    #[test]
    fn hand_computed_matmul() {
        let a = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let b = Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap();
        let out = matmul_value(&a, &b).unwrap();
        assert_eq!(out.data(), &[11.0]);
    }

    #[test]
    fn inner_dim_mismatch_is_error() {
        let a = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        let b = Tensor::matrix(2, 2, vec![0.0; 4]).unwrap();
        assert!(matmul_value(&a, &b).is_err());
    }

    #[test]
    fn argmax_tie_breaks_low() {
        let t = Tensor::matrix(1, 3, vec![2.0, 2.0, 1.0]).unwrap();
        assert_eq!(t.argmax_row(0), 0);
    }
}
