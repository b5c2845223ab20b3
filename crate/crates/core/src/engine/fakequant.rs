//! Row-grouped fake quantization with a straight-through backward pass.
//!
//! Forward is exactly `dequantize(quantize(x))` with `Δ = α · max|row| / qmax`.
//! The recorded [`FqContext`] freezes, per element, whether the rounded code
//! landed inside the clamp range and its integer-domain rounding residual
//! `r = round(z) − z`, `z = x / Δ`. With that context frozen the layer output
//! is the smooth surrogate
//!
//! ```text
//! in range:  out = Δ · (z + r) = x + Δ·r
//! clamped:   out = Δ · bound
//! ```
//!
//! whose exact derivative is the straight-through gradient: `∂out/∂x = 1`
//! inside the range, `0` where clamped, and `Δ` carries the dependence on
//! the clip factor `α` and on the row's largest-magnitude element.

use alloc::vec::Vec;

use crate::quant::{qmax, qmin};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
struct GroupInfo {
    /// Index (within the row) of the element defining `max|row|`; `None`
    /// for an all-zero row, whose step size is pinned to 1.
    argmax: Option<usize>,
    delta: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FqContext {
    bits: u8,
    groups: Vec<GroupInfo>,
    in_range: Vec<bool>,
    /// Rounding residual `r` inside the range, clamp bound outside it.
    aux: Vec<f64>,
}

impl FqContext {
    pub fn deltas(&self) -> Vec<f64> {
        self.groups.iter().map(|g| g.delta).collect()
    }

    /// Fraction of elements that hit the clamp range.
    pub fn clamped_fraction(&self) -> f64 {
        let c = self.in_range.iter().filter(|v| !**v).count();
        c as f64 / self.in_range.len().max(1) as f64
    }

    /// Smallest gap between a row's largest and second-largest magnitude,
    /// relative to the largest. Near-ties make the surrogate non-smooth.
    pub fn min_argmax_margin(&self, x: &Tensor) -> f64 {
        let c = x.cols();
        let mut margin = f64::INFINITY;
        for (i, g) in self.groups.iter().enumerate() {
            let Some(am) = g.argmax else { continue };
            let row = &x.data()[i * c..(i + 1) * c];
            let top = row[am].abs();
            let second = row
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != am)
                .fold(0.0f64, |m, (_, v)| m.max(v.abs()));
            if c > 1 {
                margin = margin.min((top - second) / top);
            }
        }
        margin
    }
}

fn row_argmax(row: &[f64]) -> (usize, f64) {
    let mut best = (0, 0.0f64);
    for (j, v) in row.iter().enumerate() {
        if v.abs() > best.1 {
            best = (j, v.abs());
        }
    }
    best
}

/// Real fake-quantization of every row; records the surrogate context.
pub fn fake_quant_record(x: &Tensor, bits: u8, clip: f64) -> (Tensor, FqContext) {
    let (rows, cols) = (x.rows(), x.cols());
    let (lo, hi) = (qmin(bits) as f64, qmax(bits) as f64);
    let mut out = Tensor::zeros(x.dims());
    let mut groups = Vec::with_capacity(rows);
    let mut in_range = Vec::with_capacity(x.len());
    let mut aux = Vec::with_capacity(x.len());
    for i in 0..rows {
        let row = &x.data()[i * cols..(i + 1) * cols];
        let (am, m) = row_argmax(row);
        let (argmax, delta) = if m == 0.0 {
            (None, 1.0)
        } else {
            (Some(am), clip * m / hi)
        };
        groups.push(GroupInfo { argmax, delta });
        let orow = &mut out.data_mut()[i * cols..(i + 1) * cols];
        for (o, &v) in orow.iter_mut().zip(row) {
            let z = v / delta;
            let k = libm::round(z);
            if k >= lo && k <= hi {
                in_range.push(true);
                aux.push(k - z);
                *o = k * delta;
            } else {
                let b = k.clamp(lo, hi);
                in_range.push(false);
                aux.push(b);
                *o = b * delta;
            }
        }
    }
    (
        out,
        FqContext {
            bits,
            groups,
            in_range,
            aux,
        },
    )
}

fn surrogate_delta(row: &[f64], g: &GroupInfo, clip: f64, hi: f64) -> f64 {
    match g.argmax {
        Some(j) => clip * row[j].abs() / hi,
        None => 1.0,
    }
}

/// Surrogate forward with the context frozen. Equal to the real forward at
/// the point the context was recorded.
pub fn fake_quant_frozen(x: &Tensor, clip: f64, ctx: &FqContext) -> Tensor {
    let (rows, cols) = (x.rows(), x.cols());
    let hi = qmax(ctx.bits) as f64;
    let mut out = Tensor::zeros(x.dims());
    for i in 0..rows {
        let row = &x.data()[i * cols..(i + 1) * cols];
        let delta = surrogate_delta(row, &ctx.groups[i], clip, hi);
        let orow = &mut out.data_mut()[i * cols..(i + 1) * cols];
        for j in 0..cols {
            let e = i * cols + j;
            orow[j] = if ctx.in_range[e] {
                row[j] + delta * ctx.aux[e]
            } else {
                delta * ctx.aux[e]
            };
        }
    }
    out
}

/// Straight-through backward. Returns `(dL/dx, dL/dα)`.
pub fn fake_quant_backward(grad: &Tensor, x: &Tensor, clip: f64, ctx: &FqContext) -> (Tensor, f64) {
    let (rows, cols) = (x.rows(), x.cols());
    let hi = qmax(ctx.bits) as f64;
    let mut dx = Tensor::zeros(x.dims());
    let mut dclip = 0.0;
    for i in 0..rows {
        let g = &grad.data()[i * cols..(i + 1) * cols];
        let mut d_delta = 0.0;
        {
            let drow = &mut dx.data_mut()[i * cols..(i + 1) * cols];
            for j in 0..cols {
                let e = i * cols + j;
                d_delta += g[j] * ctx.aux[e];
                if ctx.in_range[e] {
                    drow[j] = g[j];
                }
            }
        }
        if let Some(am) = ctx.groups[i].argmax {
            let v = x.data()[i * cols + am];
            dclip += d_delta * v.abs() / hi;
            dx.data_mut()[i * cols + am] += d_delta * clip * v.signum() / hi;
        }
    }
    (dx, dclip)
}
