//! Attention-guided token weighting for the block reconstruction loss.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_LAMBDA_MIN: f64 = 0.5;
pub const DEFAULT_LAMBDA_MAX: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TokenWeights {
    /// Attention mass received by each token, summed over heads and queries.
    pub s: Vec<f64>,
    pub lambda: Vec<f64>,
    pub lambda_min: f64,
    pub lambda_max: f64,
}

impl TokenWeights {
    /// Every token weighted 1.
    pub fn uniform(n: usize) -> Self {
        TokenWeights {
            s: vec![1.0; n],
            lambda: vec![1.0; n],
            lambda_min: 1.0,
            lambda_max: 1.0,
        }
    }
}

/// Column sums `S_j = Σ_{h,i} A[h, i, j]` of `[H × n × n]` attention maps.
pub fn token_attention_mass(attn_maps: &Tensor) -> Result<Vec<f64>> {
    let dims = attn_maps.dims();
    if dims.len() != 3 || dims[1] != dims[2] {
        return Err(Error::shape(
            "token_attention_mass",
            format!("expected [H x n x n], got {:?}", dims),
        ));
    }
    let n = dims[2];
    let mut s = vec![0.0; n];
    for row in attn_maps.data().chunks(n) {
        for (acc, &a) in s.iter_mut().zip(row) {
            *acc += a;
        }
    }
    Ok(s)
}

/// Affine map of `S` onto `[λ_min, λ_max]`; constant `S` maps to `λ_max`.
pub fn token_loss_weights(s: &[f64], lambda_min: f64, lambda_max: f64) -> Result<TokenWeights> {
    if s.is_empty() {
        return Err(Error::shape("token_loss_weights", "no tokens"));
    }
    if !(lambda_min <= lambda_max) || !(lambda_max > 0.0) {
        return Err(Error::Config(format!(
            "invalid token weight range [{}, {}]",
            lambda_min, lambda_max
        )));
    }
    let min = s.iter().copied().fold(f64::INFINITY, f64::min);
    let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lambda = if max == min {
        vec![lambda_max; s.len()]
    } else {
        let span = max - min;
        let range = lambda_max - lambda_min;
        s.iter()
            .map(|&v| ((v - min) / span * range + lambda_min).clamp(lambda_min, lambda_max))
            .collect()
    };
    Ok(TokenWeights {
        s: s.to_vec(),
        lambda,
        lambda_min,
        lambda_max,
    })
}

/// `(1/n) Σ_j λ_j ‖fp_j − q_j‖²` over token rows.
pub fn weighted_token_loss(fp_out: &Tensor, q_out: &Tensor, lambda: &[f64]) -> Result<f64> {
    if !fp_out.same_dims(q_out) || !fp_out.is_matrix() || lambda.len() != fp_out.rows() {
        return Err(Error::shape(
            "weighted_token_loss",
            format!("fp {:?}, q {:?}, {} weights", fp_out.dims(), q_out.dims(), lambda.len()),
        ));
    }
    let n = fp_out.rows();
    let mut total = 0.0;
    for (j, &w) in lambda.iter().enumerate() {
        let row_err = fp_out
            .row(j)
            .iter()
            .zip(q_out.row(j))
            .fold(0.0, |s, (a, b)| s + (a - b) * (a - b));
        total += w * row_err;
    }
    Ok(total / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SparsitySummary {
    pub top_frac: f64,
    pub top_count: usize,
    pub tokens: usize,
    /// Share of total attention mass held by the `top_count` heaviest tokens.
    pub mass_share: f64,
}

pub fn sparsity_report(s: &[f64], top_frac: f64) -> Result<SparsitySummary> {
    if !(top_frac > 0.0 && top_frac <= 1.0) {
        return Err(Error::Config(format!("top fraction {} outside (0, 1]", top_frac)));
    }
    if s.is_empty() {
        return Err(Error::shape("sparsity_report", "no tokens"));
    }
    let n = s.len();
    let top_count = (libm::ceil(top_frac * n as f64) as usize).clamp(1, n);
    let mut sorted = s.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = sorted.iter().sum();
    let top: f64 = sorted[..top_count].iter().sum();
    let mass_share = if total > 0.0 {
        top / total
    } else {
        top_count as f64 / n as f64
    };
    Ok(SparsitySummary {
        top_frac,
        top_count,
        tokens: n,
        mass_share,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mass_examples() {
        let uniform = Tensor::new(vec![2, 4, 4], vec![0.25; 32]).unwrap();
        assert_eq!(token_attention_mass(&uniform).unwrap(), vec![2.0; 4]);
        let a = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(token_attention_mass(&a).unwrap(), vec![2.0, 0.0]);
        assert!(token_attention_mass(&Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn weight_examples() {
        let w = token_loss_weights(&[2.0, 0.0], 0.5, 1.0).unwrap();
        assert_eq!(w.lambda, vec![1.0, 0.5]);
        let w = token_loss_weights(&[3.0, 3.0, 3.0], 0.5, 1.0).unwrap();
        assert_eq!(w.lambda, vec![1.0; 3]);
        let w = token_loss_weights(&[0.1, 5.0, 2.0], 1.0, 1.0).unwrap();
        assert_eq!(w.lambda, vec![1.0; 3]);
        assert!(token_loss_weights(&[1.0], 1.0, 0.5).is_err());
    }

    #[test]
    fn loss_examples() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(weighted_token_loss(&a, &a, &[1.0, 1.0]).unwrap(), 0.0);
        let b = Tensor::from_rows(&[&[0.0, 2.0], &[3.0, 2.0]]);
        assert_eq!(weighted_token_loss(&a, &b, &[1.0, 0.5]).unwrap(), 1.5);
        let uniform = weighted_token_loss(&a, &b, &[1.0, 1.0]).unwrap();
        assert_eq!(uniform, a.sub(&b).unwrap().frobenius_sq() / 2.0);
        assert!(weighted_token_loss(&a, &b, &[1.0]).is_err());
    }

    #[test]
    fn sparsity_examples() {
        let uniform = vec![1.0; 20];
        let r = sparsity_report(&uniform, 0.1).unwrap();
        assert_eq!(r.top_count, 2);
        assert!((r.mass_share - 0.1).abs() < 1e-12);
        let mut peaked = vec![1e-9; 20];
        peaked[7] = 100.0;
        assert!(sparsity_report(&peaked, 0.1).unwrap().mass_share > 0.999);
        assert!(sparsity_report(&uniform, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn weights_are_monotone_and_hit_endpoints(
            s in proptest::collection::vec(0.0f64..10.0, 2..40),
            lo in 0.0f64..1.0,
            width in 0.01f64..2.0,
        ) {
            let hi = lo + width;
            let w = token_loss_weights(&s, lo, hi).unwrap();
            let (mut imin, mut imax) = (0, 0);
            for j in 0..s.len() {
                if s[j] < s[imin] { imin = j; }
                if s[j] > s[imax] { imax = j; }
            }
            if s[imin] < s[imax] {
                prop_assert_eq!(w.lambda[imin], lo);
                prop_assert_eq!(w.lambda[imax], hi);
            }
            for i in 0..s.len() {
                prop_assert!(w.lambda[i] >= lo && w.lambda[i] <= hi);
                for j in 0..s.len() {
                    if s[i] <= s[j] {
                        prop_assert!(w.lambda[i] <= w.lambda[j]);
                    }
                }
            }
        }

        #[test]
        fn weights_ignore_positive_scaling(s in proptest::collection::vec(0.0f64..10.0, 2..30), c in 0.01f64..100.0) {
            let a = token_loss_weights(&s, 0.5, 1.0).unwrap();
            let scaled: Vec<f64> = s.iter().map(|v| v * c).collect();
            let b = token_loss_weights(&scaled, 0.5, 1.0).unwrap();
            for (x, y) in a.lambda.iter().zip(&b.lambda) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }
}
