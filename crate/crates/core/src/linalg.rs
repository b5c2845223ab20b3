//! Small dense solvers: power iteration, Cholesky, LU.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{dot, Tensor};

pub const DEFAULT_POWER_ITERS: usize = 1000;
pub const DEFAULT_POWER_TOL: f64 = 1e-10;

/// Result of power iteration on a symmetric PSD matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpectralEstimate {
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn check_square(op: &'static str, m: &Tensor) -> Result<usize> {
    if !m.is_matrix() || m.rows() != m.cols() {
        return Err(Error::shape(op, format!("expected square matrix, got {:?}", m.dims())));
    }
    Ok(m.rows())
}

fn mat_vec(m: &Tensor, v: &[f64], out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = dot(m.row(i), v);
    }
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration, started
/// from the normalized all-ones vector. Converged once successive Rayleigh
/// quotients differ by less than `tol` relative.
pub fn spectral_norm(m: &Tensor, max_iters: usize, tol: f64) -> Result<SpectralEstimate> {
    let d = check_square("spectral_norm", m)?;
    let mut v = vec![1.0 / libm::sqrt(d as f64); d];
    let mut w = vec![0.0; d];
    let mut prev = f64::NAN;
    for it in 1..=max_iters.max(1) {
        mat_vec(m, &v, &mut w);
        let rayleigh = dot(&v, &w);
        let norm = libm::sqrt(dot(&w, &w));
        if norm == 0.0 {
            return Ok(SpectralEstimate {
                value: 0.0,
                iterations: it,
                converged: true,
            });
        }
        if (rayleigh - prev).abs() < tol * rayleigh.abs() {
            return Ok(SpectralEstimate {
                value: rayleigh,
                iterations: it,
                converged: true,
            });
        }
        prev = rayleigh;
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / norm;
        }
    }
    Ok(SpectralEstimate {
        value: prev,
        iterations: max_iters,
        converged: false,
    })
}

/// Lower-triangular `L` with `L Lᵀ = m`. Fails when `m` is not positive definite.
pub fn cholesky(m: &Tensor) -> Result<Tensor> {
    let d = check_square("cholesky", m)?;
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = m.at(i, j);
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return Err(Error::Numeric(format!(
                        "matrix not positive definite (pivot {} = {:e})",
                        i, s
                    )));
                }
                l[i * d + i] = libm::sqrt(s);
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Ok(Tensor::matrix(d, d, l))
}

/// Inverse of a symmetric positive definite matrix through its Cholesky factor.
pub fn spd_inverse(m: &Tensor) -> Result<Tensor> {
    let d = m.rows();
    let l = cholesky(m)?;
    // invert L by forward substitution, then m⁻¹ = L⁻ᵀ L⁻¹
    let mut linv = vec![0.0; d * d];
    for col in 0..d {
        for i in col..d {
            let mut s = if i == col { 1.0 } else { 0.0 };
            for k in col..i {
                s -= l.at(i, k) * linv[k * d + col];
            }
            linv[i * d + col] = s / l.at(i, i);
        }
    }
    let mut inv = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = 0.0;
            for k in i.max(j)..d {
                s += linv[k * d + i] * linv[k * d + j];
            }
            inv[i * d + j] = s;
            inv[j * d + i] = s;
        }
    }
    Ok(Tensor::matrix(d, d, inv))
}

/// LU factorization with partial pivoting.
pub struct Lu {
    lu: Vec<f64>,
    perm: Vec<usize>,
    d: usize,
}

impl Lu {
    pub fn new(m: &Tensor) -> Result<Self> {
        let d = check_square("lu", m)?;
        let mut lu = m.data().to_vec();
        let mut perm: Vec<usize> = (0..d).collect();
        for k in 0..d {
            let mut p = k;
            let mut best = lu[k * d + k].abs();
            for i in k + 1..d {
                let v = lu[i * d + k].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best == 0.0 || !best.is_finite() {
                return Err(Error::Numeric(format!("singular matrix at column {}", k)));
            }
            if p != k {
                for j in 0..d {
                    lu.swap(k * d + j, p * d + j);
                }
                perm.swap(k, p);
            }
            let pivot = lu[k * d + k];
            for i in k + 1..d {
                let f = lu[i * d + k] / pivot;
                lu[i * d + k] = f;
                for j in k + 1..d {
                    lu[i * d + j] -= f * lu[k * d + j];
                }
            }
        }
        Ok(Lu { lu, perm, d })
    }

    pub fn solve_vec(&self, b: &[f64]) -> Vec<f64> {
        let d = self.d;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..d {
            for k in 0..i {
                x[i] -= self.lu[i * d + k] * x[k];
            }
        }
        for i in (0..d).rev() {
            for k in i + 1..d {
                x[i] -= self.lu[i * d + k] * x[k];
            }
            x[i] /= self.lu[i * d + i];
        }
        x
    }

    pub fn inverse(&self) -> Tensor {
        let d = self.d;
        let mut inv = vec![0.0; d * d];
        let mut e = vec![0.0; d];
        for j in 0..d {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            let col = self.solve_vec(&e);
            for i in 0..d {
                inv[i * d + j] = col[i];
            }
        }
        Tensor::matrix(d, d, inv)
    }
}

pub fn inverse(m: &Tensor) -> Result<Tensor> {
    Ok(Lu::new(m)?.inverse())
}
