//! Multi-head scaled-dot-product attention with the per-head maps exposed.

use alloc::format;
use alloc::vec;

use crate::error::{Error, Result};
use crate::tensor::{dot, matmul_nt, softmax_in_place, Tensor};

/// Projection weights of one attention layer, each `[d × d]` stored
/// `[out × in]` so that `Q = X Wqᵀ`.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AttentionWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOutput {
    /// `[n × d]`
    pub output: Tensor,
    /// `[H × n × n]`, row `attn_maps[h, i, :]` is query `i`'s distribution.
    pub attn_maps: Tensor,
}

/// Heads mixed back into `[n × d]` (before the output projection) plus maps.
#[derive(Clone, Debug)]
pub struct HeadMix {
    pub context: Tensor,
    pub attn_maps: Tensor,
}

pub fn check_heads(d: usize, num_heads: usize) -> Result<usize> {
    if num_heads == 0 || !d.is_multiple_of(num_heads) {
        return Err(Error::Config(format!(
            "feature dim {} is not divisible by {} heads",
            d, num_heads
        )));
    }
    Ok(d / num_heads)
}

/// Attention core on already-projected `q, k, v` (each `[n × d]`): per head
/// `softmax(q_h k_hᵀ / √(d/H)) v_h`, heads concatenated along features.
pub fn attention_heads(q: &Tensor, k: &Tensor, v: &Tensor, num_heads: usize) -> Result<HeadMix> {
    if !q.same_dims(k) || !q.same_dims(v) || !q.is_matrix() {
        return Err(Error::shape(
            "attention_heads",
            format!("q {:?}, k {:?}, v {:?}", q.dims(), k.dims(), v.dims()),
        ));
    }
    let (n, d) = (q.rows(), q.cols());
    let hd = check_heads(d, num_heads)?;
    let scale = 1.0 / libm::sqrt(hd as f64);
    let mut maps = Tensor::zeros(&[num_heads, n, n]);
    let mut context = Tensor::zeros(&[n, d]);
    let mut scores = vec![0.0; n];
    for h in 0..num_heads {
        let off = h * hd;
        for i in 0..n {
            let qi = &q.row(i)[off..off + hd];
            for (j, s) in scores.iter_mut().enumerate() {
                *s = dot(qi, &k.row(j)[off..off + hd]) * scale;
            }
            softmax_in_place(&mut scores);
            let base = (h * n + i) * n;
            maps.data_mut()[base..base + n].copy_from_slice(&scores);
            let crow = &mut context.row_mut(i)[off..off + hd];
            for (j, &p) in scores.iter().enumerate() {
                let vj = &v.row(j)[off..off + hd];
                for (c, &vv) in crow.iter_mut().zip(vj) {
                    *c += p * vv;
                }
            }
        }
    }
    Ok(HeadMix {
        context,
        attn_maps: maps,
    })
}

/// Full attention layer: projections, attention core, output projection.
pub fn attention_forward(x: &Tensor, w: &AttentionWeights, num_heads: usize) -> Result<AttentionOutput> {
    if !x.is_matrix() {
        return Err(Error::shape("attention_forward", format!("x dims {:?}", x.dims())));
    }
    check_heads(x.cols(), num_heads)?;
    let q = matmul_nt(x, &w.wq)?;
    let k = matmul_nt(x, &w.wk)?;
    let v = matmul_nt(x, &w.wv)?;
    let mix = attention_heads(&q, &k, &v, num_heads)?;
    let output = matmul_nt(&mix.context, &w.wo)?;
    Ok(AttentionOutput {
        output,
        attn_maps: mix.attn_maps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(rng: &mut impl Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn weights(rng: &mut impl Rng, d: usize) -> AttentionWeights {
        AttentionWeights {
            wq: rand_tensor(rng, d, d),
            wk: rand_tensor(rng, d, d),
            wv: rand_tensor(rng, d, d),
            wo: rand_tensor(rng, d, d),
        }
    }

    #[test]
    fn single_token_attends_to_itself() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let w = weights(&mut rng, 4);
        let x = rand_tensor(&mut rng, 1, 4);
        let out = attention_forward(&x, &w, 2).unwrap();
        assert_eq!(out.attn_maps.dims(), &[2, 1, 1]);
        assert!(out.attn_maps.data().iter().all(|&a| a == 1.0));
    }

    #[test]
    fn zero_query_key_gives_uniform_attention() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let mut w = weights(&mut rng, 4);
        w.wq = Tensor::zeros(&[4, 4]);
        w.wk = Tensor::zeros(&[4, 4]);
        let x = rand_tensor(&mut rng, 5, 4);
        let out = attention_forward(&x, &w, 2).unwrap();
        assert!(out.attn_maps.data().iter().all(|&a| (a - 0.2).abs() < 1e-15));
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let w = weights(&mut rng, 4);
        let x = rand_tensor(&mut rng, 2, 4);
        assert!(matches!(attention_forward(&x, &w, 3), Err(Error::Config(_))));
    }

    /// Per-head recomputation using explicit sub-matrices and exp sums.
    #[test]
    fn matches_per_head_recomputation() {
        let (n, d, heads) = (3, 4, 2);
        let hd = d / heads;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let w = weights(&mut rng, d);
        let x = rand_tensor(&mut rng, n, d);
        let out = attention_forward(&x, &w, heads).unwrap();

        let proj = |m: &Tensor, i: usize, o: usize| -> f64 { (0..d).map(|c| x.at(i, c) * m.at(o, c)).sum() };
        let mut concat = vec![vec![0.0; d]; n];
        for h in 0..heads {
            for i in 0..n {
                let logits: Vec<f64> = (0..n)
                    .map(|j| {
                        (0..hd)
                            .map(|c| proj(&w.wq, i, h * hd + c) * proj(&w.wk, j, h * hd + c))
                            .sum::<f64>()
                            / (hd as f64).sqrt()
                    })
                    .collect();
                let z: f64 = logits.iter().map(|l| l.exp()).sum();
                for j in 0..n {
                    let p = logits[j].exp() / z;
                    assert!((out.attn_maps.data()[(h * n + i) * n + j] - p).abs() < 1e-12);
                    for c in 0..hd {
                        concat[i][h * hd + c] += p * proj(&w.wv, j, h * hd + c);
                    }
                }
            }
        }
        for i in 0..n {
            for o in 0..d {
                let y: f64 = (0..d).map(|c| concat[i][c] * w.wo.at(o, c)).sum();
                assert!((out.output.at(i, o) - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn maps_are_row_stochastic() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let w = weights(&mut rng, 8);
        let x = rand_tensor(&mut rng, 6, 8).scale(20.0);
        let out = attention_forward(&x, &w, 4).unwrap();
        assert_eq!(out.output.dims(), &[6, 8]);
        for row in out.attn_maps.data().chunks(6) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }
}
