//! Dense row-major `f64` tensors and the handful of kernels the rest of the
//! crate needs.
//!
//! Every reduction runs in a fixed left-to-right order so results are
//! bit-stable across runs and platforms.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `data.len()` equals the product of
    /// `dims` and that every dimension is positive.
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::shape("Tensor::new", format!("invalid dims {:?}", dims)));
        }
        let len: usize = dims.iter().product();
        if len != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("dims {:?} need {} values, got {}", dims, len, data.len()),
            ));
        }
        Ok(Tensor { dims, data })
    }

    /// 2-D constructor; panics on a length mismatch. Intended for literals.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix literal has wrong length");
        Tensor {
            dims: vec![rows, cols],
            data,
        }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Tensor::matrix(rows.len(), cols, data)
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let len = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn filled(dims: &[usize], value: f64) -> Self {
        let len = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn eye(d: usize) -> Self {
        let mut t = Tensor::zeros(&[d, d]);
        for i in 0..d {
            t.data[i * d + i] = 1.0;
        }
        t
    }

    pub fn diag(values: &[f64]) -> Self {
        let d = values.len();
        let mut t = Tensor::zeros(&[d, d]);
        for (i, v) in values.iter().enumerate() {
            t.data[i * d + i] = *v;
        }
        t
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_matrix(&self) -> bool {
        self.dims.len() == 2
    }

    /// Row count of a matrix (leading dim for higher ranks).
    pub fn rows(&self) -> usize {
        self.dims[0]
    }

    /// Trailing extent: product of all dims after the first.
    pub fn cols(&self) -> usize {
        self.dims[1..].iter().product()
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        if dims.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", format!("{:?} -> {:?}", self.dims, dims)));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_dims(&self, other: &Tensor) -> bool {
        self.dims == other.dims
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::matrix(c, r, out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.dims != other.dims {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.dims, other.dims)));
        }
        Ok(Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::shape(
                "add_assign",
                format!("{:?} vs {:?}", self.dims, other.dims),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest elementwise absolute difference.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        Ok(self.sub(other)?.max_abs())
    }

    pub fn frobenius_sq(&self) -> f64 {
        frobenius_sq(self)
    }
}

fn check_matrix(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_matrix() {
        Ok(())
    } else {
        Err(Error::shape(op, format!("expected a matrix, got dims {:?}", t.dims)))
    }
}

/// `a · b` for `a: [m×k]`, `b: [k×p]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_matrix("matmul", a)?;
    check_matrix("matmul", b)?;
    let (m, k) = (a.rows(), a.cols());
    let (k2, p) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::shape("matmul", format!("[{}x{}] · [{}x{}]", m, k, k2, p)));
    }
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * p..(i + 1) * p];
        for (l, &av) in arow.iter().enumerate() {
            let brow = &b.data[l * p..(l + 1) * p];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::matrix(m, p, out))
}

/// `a · bᵀ` for `a: [m×k]`, `b: [p×k]`. This is the linear-layer product
/// `X Wᵀ` with weights stored `[out × in]`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_matrix("matmul_nt", a)?;
    check_matrix("matmul_nt", b)?;
    let (m, k) = (a.rows(), a.cols());
    let (p, k2) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::shape("matmul_nt", format!("[{}x{}] · [{}x{}]ᵀ", m, k, p, k2)));
    }
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..p {
            let brow = &b.data[j * k..(j + 1) * k];
            out[i * p + j] = dot(arow, brow);
        }
    }
    Ok(Tensor::matrix(m, p, out))
}

/// `aᵀ · b` for `a: [k×m]`, `b: [k×p]`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_matrix("matmul_tn", a)?;
    check_matrix("matmul_tn", b)?;
    let (k, m) = (a.rows(), a.cols());
    let (k2, p) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::shape("matmul_tn", format!("[{}x{}]ᵀ · [{}x{}]", k, m, k2, p)));
    }
    let mut out = vec![0.0; m * p];
    for l in 0..k {
        let arow = &a.data[l * m..(l + 1) * m];
        let brow = &b.data[l * p..(l + 1) * p];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * p..(i + 1) * p];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::matrix(m, p, out))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |s, (x, y)| s + x * y)
}

/// Sum of squared elements.
pub fn frobenius_sq(a: &Tensor) -> f64 {
    a.data.iter().fold(0.0, |s, v| s + v * v)
}

/// Row-wise softmax with max subtraction, in place on a row slice.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp(*v - max);
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax_rows(a: &Tensor) -> Tensor {
    let mut out = a.clone();
    let c = out.cols();
    for row in out.data.chunks_mut(c) {
        softmax_in_place(row);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_matmul_is_exact() {
        let m = Tensor::from_rows(&[&[1.5, -2.0, 0.25], &[3.0, 4.0, -7.5]]);
        assert_eq!(matmul(&Tensor::eye(2), &m).unwrap(), m);
        assert_eq!(matmul(&m, &Tensor::eye(3)).unwrap(), m);
    }

    #[test]
    fn matmul_hand_example() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Tensor::from_rows(&[&[0.0], &[1.0]]);
        assert_eq!(matmul(&a, &b).unwrap(), Tensor::from_rows(&[&[2.0], &[4.0]]));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 5]);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape { .. })));
    }

    #[test]
    fn transposed_products_agree_with_matmul() {
        let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 2.0]);
        let b = Tensor::matrix(4, 3, (0..12).map(|v| v as f64 * 0.3 - 1.0).collect());
        let nt = matmul_nt(&a, &b).unwrap();
        assert_eq!(nt, matmul(&a, &b.transpose()).unwrap());
        let c = Tensor::matrix(2, 4, (0..8).map(|v| v as f64).collect());
        let tn = matmul_tn(&a, &c).unwrap();
        assert_eq!(tn, matmul(&a.transpose(), &c).unwrap());
    }

    #[test]
    fn frobenius_examples() {
        assert_eq!(frobenius_sq(&Tensor::zeros(&[3, 2])), 0.0);
        assert_eq!(frobenius_sq(&Tensor::from_rows(&[&[3.0, 4.0]])), 25.0);
    }

    #[test]
    fn new_rejects_bad_lengths() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    }

    proptest! {
        #[test]
        fn frobenius_is_homogeneous(v in proptest::collection::vec(-10.0f64..10.0, 6), c in -5.0f64..5.0) {
            let t = Tensor::matrix(2, 3, v);
            let lhs = frobenius_sq(&t.scale(c));
            let rhs = c * c * frobenius_sq(&t);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1.0));
        }

        #[test]
        fn softmax_rows_are_distributions(v in proptest::collection::vec(-300.0f64..300.0, 12)) {
            let s = softmax_rows(&Tensor::matrix(3, 4, v));
            for i in 0..3 {
                let sum: f64 = s.row(i).iter().sum();
                prop_assert!((sum - 1.0).abs() <= 1e-9);
                prop_assert!(s.row(i).iter().all(|&p| (0.0..=1.0).contains(&p)));
            }
        }
    }
}
