//! GPTQ: column-by-column weight quantization that pushes each column's
//! rounding error onto the columns not yet quantized, weighted by the
//! inverse activation Hessian.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::{cholesky, spd_inverse};
use crate::quant::{compute_delta, quantize_value, Granularity, QuantSpec, QuantizedTensor};
use crate::tensor::{matmul_nt, matmul_tn, Tensor};

pub const DEFAULT_DAMP_FRAC: f64 = 0.01;

/// Damped Hessian `2 XᵀX + λ I`, `λ = damp_frac · mean(diag(2 XᵀX))`.
pub fn damped_hessian(x: &Tensor, damp_frac: f64) -> Result<Tensor> {
    let mut h = matmul_tn(x, x)?.scale(2.0);
    let d = h.rows();
    let mean_diag = (0..d).map(|i| h.at(i, i)).sum::<f64>() / d as f64;
    let lambda = damp_frac * mean_diag;
    for i in 0..d {
        let v = h.at(i, i) + lambda;
        h.set(i, i, v);
    }
    Ok(h)
}

pub fn gptq_quantize_weight(w: &Tensor, x: &Tensor, spec: &QuantSpec, damp_frac: f64) -> Result<QuantizedTensor> {
    if spec.granularity() != Granularity::PerChannel {
        return Err(Error::Config("GPTQ requires per-channel granularity".into()));
    }
    if !(damp_frac > 0.0) {
        return Err(Error::Config(format!(
            "damping fraction must be positive, got {}",
            damp_frac
        )));
    }
    if !w.is_matrix() || !x.is_matrix() || w.cols() != x.cols() {
        return Err(Error::shape(
            "gptq_quantize_weight",
            format!("W {:?}, X {:?}", w.dims(), x.dims()),
        ));
    }
    if !w.is_finite() || !x.is_finite() {
        return Err(Error::Numeric("non-finite GPTQ input".into()));
    }
    let (rows, d) = (w.rows(), w.cols());
    let h = damped_hessian(x, damp_frac)?;
    let hinv = spd_inverse(&h).map_err(|e| Error::Numeric(format!("damped Hessian is degenerate: {}", e)))?;
    // upper factor U with H⁻¹ = UᵀU
    let u = cholesky(&hinv)?.transpose();

    let deltas = (0..rows)
        .map(|r| compute_delta(w.row(r), spec))
        .collect::<Result<Vec<_>>>()?;
    let mut work = w.clone();
    let mut ints = alloc::vec![0i32; rows * d];
    for q in 0..d {
        let uqq = u.at(q, q);
        let urow = &u.row(q)[q + 1..];
        for r in 0..rows {
            let row = work.row_mut(r);
            let wq = row[q];
            let qi = quantize_value(wq, deltas[r], spec.bits());
            ints[r * d + q] = qi;
            let err = (wq - qi as f64 * deltas[r]) / uqq;
            for (wj, &uj) in row[q + 1..].iter_mut().zip(urow) {
                *wj -= err * uj;
            }
        }
    }
    QuantizedTensor::from_parts(w.dims().to_vec(), ints, deltas, *spec)
}

/// Layer-output reconstruction error `‖X Wᵀ − X Ŵᵀ‖²_F`.
pub fn proxy_loss(x: &Tensor, w: &Tensor, w_hat: &Tensor) -> Result<f64> {
    let diff = w.sub(w_hat)?;
    Ok(matmul_nt(x, &diff)?.frobenius_sq())
}
