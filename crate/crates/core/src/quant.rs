//! Symmetric uniform quantization.
//!
//! `x_int = clamp(round(x / Δ), -2^(N-1), 2^(N-1) - 1)` with
//! `Δ = α · max|x| / (2^(N-1) - 1)` per group. Rounding is half away from
//! zero. A group whose maximum magnitude is zero gets `Δ = 1`.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MIN_BITS: u8 = 2;
pub const MAX_BITS: u8 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Granularity {
    PerTensor,
    /// One step size per output row of a `[out × in]` weight.
    PerChannel,
    /// One step size per token row, recomputed on every call.
    PerToken,
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct QuantSpec {
    bits: u8,
    granularity: Granularity,
    clip: f64,
}

impl QuantSpec {
    pub fn new(bits: u8, granularity: Granularity) -> Result<Self> {
        if !(MIN_BITS..=MAX_BITS).contains(&bits) {
            return Err(Error::Config(format!(
                "bit-width {} outside [{}, {}]",
                bits, MIN_BITS, MAX_BITS
            )));
        }
        Ok(QuantSpec {
            bits,
            granularity,
            clip: 1.0,
        })
    }

    pub fn with_clip(mut self, clip: f64) -> Result<Self> {
        if !(clip > 0.0 && clip <= 1.0) {
            return Err(Error::Config(format!("clip factor {} outside (0, 1]", clip)));
        }
        self.clip = clip;
        Ok(self)
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn clip(&self) -> f64 {
        self.clip
    }

    /// `2^(N-1) - 1`
    pub fn qmax(&self) -> i32 {
        qmax(self.bits)
    }

    /// `-2^(N-1)`
    pub fn qmin(&self) -> i32 {
        qmin(self.bits)
    }

    /// Number of quantization groups and their length for a tensor.
    pub fn groups(&self, x: &Tensor) -> (usize, usize) {
        match self.granularity {
            Granularity::PerTensor => (1, x.len()),
            Granularity::PerChannel | Granularity::PerToken => (x.rows(), x.cols()),
        }
    }
}

pub fn qmax(bits: u8) -> i32 {
    (1 << (bits - 1)) - 1
}

pub fn qmin(bits: u8) -> i32 {
    -(1 << (bits - 1))
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct QuantizedTensor {
    dims: Vec<usize>,
    ints: Vec<i32>,
    deltas: Vec<f64>,
    spec: QuantSpec,
}

impl QuantizedTensor {
    /// Reassembles a quantized tensor, validating ranges and group counts.
    pub fn from_parts(dims: Vec<usize>, ints: Vec<i32>, deltas: Vec<f64>, spec: QuantSpec) -> Result<Self> {
        let len: usize = dims.iter().product();
        if len != ints.len() || dims.is_empty() {
            return Err(Error::shape(
                "QuantizedTensor",
                format!("dims {:?} vs {} ints", dims, ints.len()),
            ));
        }
        let groups = match spec.granularity {
            Granularity::PerTensor => 1,
            _ => dims[0],
        };
        if deltas.len() != groups {
            return Err(Error::shape(
                "QuantizedTensor",
                format!("expected {} step sizes, got {}", groups, deltas.len()),
            ));
        }
        if deltas.iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
            return Err(Error::Numeric("non-positive step size".into()));
        }
        if ints.iter().any(|&q| q < spec.qmin() || q > spec.qmax()) {
            return Err(Error::Numeric("integer payload outside clamp range".into()));
        }
        Ok(QuantizedTensor {
            dims,
            ints,
            deltas,
            spec,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ints(&self) -> &[i32] {
        &self.ints
    }

    pub fn deltas(&self) -> &[f64] {
        &self.deltas
    }

    pub fn spec(&self) -> &QuantSpec {
        &self.spec
    }

    fn group_len(&self) -> usize {
        self.ints.len() / self.deltas.len()
    }

    pub fn dequantize(&self) -> Tensor {
        let g = self.group_len();
        let data = self
            .ints
            .iter()
            .enumerate()
            .map(|(i, &q)| q as f64 * self.deltas[i / g])
            .collect();
        Tensor::new(self.dims.clone(), data).expect("dims validated at construction")
    }
}

/// Step size for one group.
pub fn compute_delta(group: &[f64], spec: &QuantSpec) -> Result<f64> {
    if group.is_empty() {
        return Err(Error::shape("compute_delta", "empty group"));
    }
    let m = group.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(delta_from_max(m, spec.clip, spec.bits))
}

pub(crate) fn delta_from_max(max_abs: f64, clip: f64, bits: u8) -> f64 {
    if max_abs == 0.0 {
        1.0
    } else {
        clip * max_abs / qmax(bits) as f64
    }
}

/// Quantizes one value against a fixed step size.
pub fn quantize_value(x: f64, delta: f64, bits: u8) -> i32 {
    let r = libm::round(x / delta);
    r.clamp(qmin(bits) as f64, qmax(bits) as f64) as i32
}

fn check_finite(x: &Tensor) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric("non-finite value in quantizer input".into()))
    }
}

pub fn quantize(x: &Tensor, spec: &QuantSpec) -> Result<QuantizedTensor> {
    check_finite(x)?;
    let (groups, len) = spec.groups(x);
    let mut deltas = Vec::with_capacity(groups);
    for g in 0..groups {
        deltas.push(compute_delta(&x.data()[g * len..(g + 1) * len], spec)?);
    }
    quantize_with_deltas(x, spec, deltas)
}

/// Quantizes with caller-supplied step sizes (one per group).
pub fn quantize_with_deltas(x: &Tensor, spec: &QuantSpec, deltas: Vec<f64>) -> Result<QuantizedTensor> {
    check_finite(x)?;
    let (groups, len) = spec.groups(x);
    if deltas.len() != groups {
        return Err(Error::shape(
            "quantize_with_deltas",
            format!("expected {} step sizes, got {}", groups, deltas.len()),
        ));
    }
    let ints = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| quantize_value(v, deltas[i / len], spec.bits))
        .collect();
    QuantizedTensor::from_parts(x.dims().to_vec(), ints, deltas, *spec)
}

pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    q.dequantize()
}

/// `dequantize(quantize(x))`.
pub fn fake_quantize(x: &Tensor, spec: &QuantSpec) -> Result<Tensor> {
    Ok(quantize(x, spec)?.dequantize())
}

/// Round-to-nearest weight quantization, one step size per output row.
pub fn rtn_quantize_weight(w: &Tensor, spec: &QuantSpec) -> Result<QuantizedTensor> {
    if spec.granularity != Granularity::PerChannel {
        return Err(Error::Config(
            "weight quantization requires per-channel granularity".into(),
        ));
    }
    if !w.is_matrix() {
        return Err(Error::shape("rtn_quantize_weight", format!("dims {:?}", w.dims())));
    }
    quantize(w, spec)
}
