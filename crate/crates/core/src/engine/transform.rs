//! Learnable per-layer equivalence transforms: a channel-wise scale `s`
//! and an orthogonal rotation `R = (I − A)(I + A)⁻¹` from a skew-symmetric
//! `A`. Inputs become `X · diag(1/s) · R` and weights `W · diag(s) · R`, so
//! the layer product is unchanged before quantization.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::inverse;
use crate::tensor::{matmul, Tensor};

/// Clip factors are kept inside this interval after every update.
pub const CLIP_MIN: f64 = 0.05;
pub const CLIP_MAX: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LayerTransform {
    /// `s = exp(log_scale)`, one entry per input channel.
    pub log_scale: Vec<f64>,
    /// Strict upper triangle of `A`, row-major.
    pub skew: Vec<f64>,
    pub clip_w: f64,
    pub clip_a: f64,
}

pub fn skew_len(d: usize) -> usize {
    d * d.saturating_sub(1) / 2
}

impl LayerTransform {
    /// `s = 1`, `A = 0`, clips at 1.
    pub fn identity(d: usize) -> Self {
        LayerTransform {
            log_scale: vec![0.0; d],
            skew: vec![0.0; skew_len(d)],
            clip_w: 1.0,
            clip_a: 1.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.log_scale.len()
    }

    pub fn scales(&self) -> Vec<f64> {
        self.log_scale.iter().map(|&v| libm::exp(v)).collect()
    }

    pub fn skew_matrix(&self) -> Tensor {
        skew_matrix(&self.skew, self.dim())
    }

    pub fn rotation(&self) -> Result<Rotation> {
        cayley(&self.skew_matrix())
    }

    pub fn clamp_clips(&mut self) {
        self.clip_w = self.clip_w.clamp(CLIP_MIN, CLIP_MAX);
        self.clip_a = self.clip_a.clamp(CLIP_MIN, CLIP_MAX);
    }
}

pub fn skew_matrix(params: &[f64], d: usize) -> Tensor {
    let mut a = Tensor::zeros(&[d, d]);
    let mut idx = 0;
    for i in 0..d {
        for j in i + 1..d {
            a.set(i, j, params[idx]);
            a.set(j, i, -params[idx]);
            idx += 1;
        }
    }
    a
}

/// Gradient on the upper-triangle parameters from a full `dL/dA`.
pub fn skew_grad(d_a: &Tensor) -> Vec<f64> {
    let d = d_a.rows();
    let mut g = Vec::with_capacity(skew_len(d));
    for i in 0..d {
        for j in i + 1..d {
            g.push(d_a.at(i, j) - d_a.at(j, i));
        }
    }
    g
}

/// Rotation plus the `(I + A)⁻¹` factor its differential needs.
#[derive(Clone, Debug)]
pub struct Rotation {
    pub r: Tensor,
    pub inv_i_plus_a: Tensor,
}

/// Cayley map of a skew-symmetric matrix.
pub fn cayley(a: &Tensor) -> Result<Rotation> {
    let d = a.rows();
    let eye = Tensor::eye(d);
    let m = inverse(&eye.add(a)?)?;
    let r = matmul(&eye.sub(a)?, &m)?;
    Ok(Rotation { r, inv_i_plus_a: m })
}

/// `dL/dA = −(I + R)ᵀ · dL/dR · (I + A)⁻ᵀ`.
pub fn cayley_backward(rot: &Rotation, d_r: &Tensor) -> Result<Tensor> {
    let d = rot.r.rows();
    let i_plus_r = Tensor::eye(d).add(&rot.r)?;
    let left = matmul(&i_plus_r.transpose(), d_r)?;
    Ok(matmul(&left, &rot.inv_i_plus_a.transpose())?.scale(-1.0))
}

/// `‖RᵀR − I‖_∞`
pub fn orthogonality_error(r: &Tensor) -> f64 {
    let rtr = crate::tensor::matmul_tn(r, r).expect("square rotation");
    rtr.max_abs_diff(&Tensor::eye(r.rows())).expect("same dims")
}

/// `X · diag(1/s)` and `W · diag(s)`, the pre-rotation halves.
pub fn scale_columns(x: &Tensor, factors: &[f64]) -> Tensor {
    let mut out = x.clone();
    let c = out.cols();
    for row in out.data_mut().chunks_mut(c) {
        for (v, f) in row.iter_mut().zip(factors) {
            *v *= f;
        }
    }
    out
}

/// `(X · diag(1/s) · R, W · diag(s) · R)`.
pub fn apply_transform_fp(x: &Tensor, w: &Tensor, t: &LayerTransform) -> Result<(Tensor, Tensor)> {
    let d = t.dim();
    if x.cols() != d || w.cols() != d {
        return Err(Error::shape(
            "apply_transform_fp",
            alloc::format!("X {:?}, W {:?}, transform width {}", x.dims(), w.dims(), d),
        ));
    }
    let s = t.scales();
    let inv: Vec<f64> = s.iter().map(|v| 1.0 / v).collect();
    let rot = t.rotation()?;
    let xt = matmul(&scale_columns(x, &inv), &rot.r)?;
    let wt = matmul(&scale_columns(w, &s), &rot.r)?;
    Ok((xt, wt))
}
