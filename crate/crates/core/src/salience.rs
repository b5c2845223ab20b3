//! Calibration data selection by diffusion and quantization salience.
//!
//! Every `(prompt, t ≥ 2)` state of every trajectory is a candidate. Each
//! candidate gets
//!
//! * a diffusion salience `‖x_t − x_{t−1}‖² / ‖x_t‖²`,
//! * a quantization salience `‖x_tᵀ x_t‖₂` (spectral norm by default),
//!
//! both min-max normalized over the whole pool and multiplied. The top-k by
//! that product form the calibration set.

use alloc::format;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{spectral_norm, SpectralEstimate, DEFAULT_POWER_ITERS, DEFAULT_POWER_TOL};
use crate::tensor::{frobenius_sq, matmul, matmul_nt, matmul_tn, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionTrajectory {
    pub prompt_id: usize,
    /// `x_1 .. x_T`, each `[n × d]`.
    states: Vec<Tensor>,
}

impl DiffusionTrajectory {
    pub fn new(prompt_id: usize, states: Vec<Tensor>) -> Result<Self> {
        if states.len() < 2 {
            return Err(Error::Config(format!(
                "trajectory {} has {} states, need at least 2",
                prompt_id,
                states.len()
            )));
        }
        let dims = states[0].dims();
        if dims.len() != 2 || states.iter().any(|s| s.dims() != dims) {
            return Err(Error::shape(
                "DiffusionTrajectory",
                format!("prompt {}: states must share [n x d] dims", prompt_id),
            ));
        }
        Ok(DiffusionTrajectory { prompt_id, states })
    }

    pub fn states(&self) -> &[Tensor] {
        &self.states
    }

    pub fn num_timesteps(&self) -> usize {
        self.states.len()
    }

    /// `x_t` for 1-based `t`.
    pub fn state(&self, t: usize) -> &Tensor {
        &self.states[t - 1]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum NormChoice {
    #[default]
    Spectral,
    Frobenius,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum SelectionMode {
    /// Top-k by combined salience.
    #[default]
    Sds,
    /// k candidates drawn uniformly from the pool.
    Random,
    /// All timesteps of prompt 0.
    Atop,
    /// All timesteps of prompts 0..5, in order, truncated to k.
    Atfp,
    /// k random timesteps from five seeded prompts.
    Rtfp,
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SalienceScore {
    pub prompt_id: usize,
    pub timestep: usize,
    pub c_diff_raw: f64,
    pub c_quant_raw: f64,
    pub c_diff_norm: f64,
    pub c_quant_norm: f64,
    pub c_sample: f64,
    pub power_converged: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationSample {
    pub prompt_id: usize,
    pub timestep: usize,
    pub state: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationSet {
    /// Selected samples in selection order (rank order for SDS).
    pub samples: Vec<CalibrationSample>,
    /// Scores of the selected samples, aligned with `samples`.
    pub scores: Vec<SalienceScore>,
    pub mode: SelectionMode,
    pub norm: NormChoice,
}

impl CalibrationSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn states(&self) -> Vec<Tensor> {
        self.samples.iter().map(|s| s.state.clone()).collect()
    }
}

pub fn diffusion_salience(x_t: &Tensor, x_prev: &Tensor) -> Result<f64> {
    let denom = frobenius_sq(x_t);
    if denom == 0.0 {
        return Err(Error::Numeric("diffusion salience of a zero state".into()));
    }
    Ok(frobenius_sq(&x_t.sub(x_prev)?) / denom)
}

/// Matrix norm of the Gram matrix `x_tᵀ x_t`.
pub fn quantization_salience(x_t: &Tensor, norm: NormChoice) -> Result<SpectralEstimate> {
    let gram = matmul_tn(x_t, x_t)?;
    match norm {
        NormChoice::Spectral => spectral_norm(&gram, DEFAULT_POWER_ITERS, DEFAULT_POWER_TOL),
        NormChoice::Frobenius => Ok(SpectralEstimate {
            value: libm::sqrt(frobenius_sq(&gram)),
            iterations: 0,
            converged: true,
        }),
    }
}

/// Min-max normalization into `[0, 1]`; a constant pool maps to all ones.
pub fn normalize_scores(raw: &[f64]) -> Result<Vec<f64>> {
    if raw.is_empty() {
        return Err(Error::shape("normalize_scores", "empty score list"));
    }
    let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return Ok(alloc::vec![1.0; raw.len()]);
    }
    let span = max - min;
    Ok(raw.iter().map(|&v| (v - min) / span).collect())
}

pub fn combined_salience(c_diff_norm: f64, c_quant_norm: f64) -> f64 {
    c_diff_norm * c_quant_norm
}

/// Scores every candidate in the pool; zero-energy states are dropped.
pub fn score_candidates(trajectories: &[DiffusionTrajectory], norm: NormChoice) -> Result<Vec<SalienceScore>> {
    let mut raw = Vec::new();
    for traj in trajectories {
        for t in 2..=traj.num_timesteps() {
            let x_t = traj.state(t);
            let c_diff = match diffusion_salience(x_t, traj.state(t - 1)) {
                Ok(v) => v,
                Err(Error::Numeric(_)) => continue,
                Err(e) => return Err(e),
            };
            let q = quantization_salience(x_t, norm)?;
            raw.push((traj.prompt_id, t, c_diff, q));
        }
    }
    if raw.is_empty() {
        return Ok(Vec::new());
    }
    let diffs: Vec<f64> = raw.iter().map(|r| r.2).collect();
    let quants: Vec<f64> = raw.iter().map(|r| r.3.value).collect();
    let dn = normalize_scores(&diffs)?;
    let qn = normalize_scores(&quants)?;
    Ok(raw
        .iter()
        .zip(dn.iter().zip(&qn))
        .map(|(&(prompt_id, timestep, c_diff_raw, q), (&d, &qv))| SalienceScore {
            prompt_id,
            timestep,
            c_diff_raw,
            c_quant_raw: q.value,
            c_diff_norm: d,
            c_quant_norm: qv,
            c_sample: combined_salience(d, qv),
            power_converged: q.converged,
        })
        .collect())
}

/// Descending `c_sample`, then ascending timestep, then ascending prompt.
pub fn rank_order(a: &SalienceScore, b: &SalienceScore) -> Ordering {
    b.c_sample
        .total_cmp(&a.c_sample)
        .then(a.timestep.cmp(&b.timestep))
        .then(a.prompt_id.cmp(&b.prompt_id))
}

fn find_trajectory(trajectories: &[DiffusionTrajectory], prompt_id: usize) -> Option<&DiffusionTrajectory> {
    trajectories.iter().find(|t| t.prompt_id == prompt_id)
}

fn assemble(
    trajectories: &[DiffusionTrajectory],
    picked: Vec<SalienceScore>,
    mode: SelectionMode,
    norm: NormChoice,
) -> CalibrationSet {
    let samples = picked
        .iter()
        .map(|s| CalibrationSample {
            prompt_id: s.prompt_id,
            timestep: s.timestep,
            state: find_trajectory(trajectories, s.prompt_id)
                .expect("scored candidate has a trajectory")
                .state(s.timestep)
                .clone(),
        })
        .collect();
    CalibrationSet {
        samples,
        scores: picked,
        mode,
        norm,
    }
}

fn check_pool(pool: usize, k: usize, what: &str) -> Result<()> {
    if k == 0 || k > pool {
        return Err(Error::Config(format!(
            "cannot select {} samples from a {} pool of {} candidates",
            k, what, pool
        )));
    }
    Ok(())
}

/// Top-k salient data selection.
pub fn select_calibration(trajectories: &[DiffusionTrajectory], k: usize, norm: NormChoice) -> Result<CalibrationSet> {
    let mut scores = score_candidates(trajectories, norm)?;
    check_pool(scores.len(), k, "candidate")?;
    scores.sort_by(rank_order);
    scores.truncate(k);
    Ok(assemble(trajectories, scores, SelectionMode::Sds, norm))
}

fn sorted_prompts(scores: &[SalienceScore]) -> Vec<usize> {
    let mut prompts: Vec<usize> = scores.iter().map(|s| s.prompt_id).collect();
    prompts.sort_unstable();
    prompts.dedup();
    prompts
}

/// Selection under any of the supported modes. Scores are computed for the
/// whole pool in every mode so that reports can list them; only SDS ranks by
/// them.
pub fn select_with_mode(
    trajectories: &[DiffusionTrajectory],
    k: usize,
    norm: NormChoice,
    mode: SelectionMode,
    seed: u64,
) -> Result<CalibrationSet> {
    if mode == SelectionMode::Sds {
        return select_calibration(trajectories, k, norm);
    }
    let mut scores = score_candidates(trajectories, norm)?;
    // pool order: ascending prompt, then ascending timestep
    scores.sort_by(|a, b| a.prompt_id.cmp(&b.prompt_id).then(a.timestep.cmp(&b.timestep)));
    let prompts = sorted_prompts(&scores);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked: Vec<SalienceScore> = match mode {
        SelectionMode::Sds => unreachable!(),
        SelectionMode::Random => {
            check_pool(scores.len(), k, "random")?;
            // draw order is kept so any prefix is itself a uniform subset
            index::sample(&mut rng, scores.len(), k)
                .into_iter()
                .map(|i| scores[i])
                .collect()
        }
        SelectionMode::Atop => {
            let first = prompts.first().copied().unwrap_or(0);
            let pool: Vec<_> = scores.iter().filter(|s| s.prompt_id == first).copied().collect();
            check_pool(pool.len(), k, "single-prompt")?;
            pool.into_iter().take(k).collect()
        }
        SelectionMode::Atfp => {
            let chosen: Vec<usize> = prompts.iter().take(5).copied().collect();
            let pool: Vec<_> = scores
                .iter()
                .filter(|s| chosen.contains(&s.prompt_id))
                .copied()
                .collect();
            check_pool(pool.len(), k, "five-prompt")?;
            pool.into_iter().take(k).collect()
        }
        SelectionMode::Rtfp => {
            let take = prompts.len().min(5);
            let chosen: Vec<usize> = index::sample(&mut rng, prompts.len(), take)
                .into_iter()
                .map(|i| prompts[i])
                .collect();
            let pool: Vec<_> = scores
                .iter()
                .filter(|s| chosen.contains(&s.prompt_id))
                .copied()
                .collect();
            check_pool(pool.len(), k, "five-prompt")?;
            index::sample(&mut rng, pool.len(), k)
                .into_iter()
                .map(|i| pool[i])
                .collect()
        }
    };
    Ok(assemble(trajectories, picked, mode, norm))
}

/// `‖X Wᵀ − X Ŵᵀ‖²_F`, the layer error caused by a weight perturbation.
pub fn weight_perturbation_error(x: &Tensor, dw: &Tensor) -> Result<f64> {
    Ok(matmul_nt(x, dw)?.frobenius_sq())
}

/// `trace(ΔW · XᵀX · ΔWᵀ)`, the second-order form of the same error.
pub fn hessian_quadratic_form(x: &Tensor, dw: &Tensor) -> Result<f64> {
    let gram = matmul_tn(x, x)?;
    let m = matmul(dw, &gram)?;
    let full = matmul_nt(&m, dw)?;
    Ok((0..full.rows()).map(|i| full.at(i, i)).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn traj(prompt_id: usize, states: Vec<Tensor>) -> DiffusionTrajectory {
        DiffusionTrajectory::new(prompt_id, states).unwrap()
    }

    #[test]
    fn diffusion_salience_examples() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, -1.0]]);
        assert_eq!(diffusion_salience(&a, &a).unwrap(), 0.0);
        assert_eq!(diffusion_salience(&a, &Tensor::zeros(&[2, 2])).unwrap(), 1.0);
        let x = Tensor::from_rows(&[&[1.0, 0.0]]);
        let p = Tensor::from_rows(&[&[0.0, 1.0]]);
        assert_eq!(diffusion_salience(&x, &p).unwrap(), 2.0);
        assert!(diffusion_salience(&Tensor::zeros(&[1, 2]), &p).is_err());
    }

    #[test]
    fn quantization_salience_examples() {
        let v = quantization_salience(&Tensor::eye(2), NormChoice::Spectral).unwrap();
        assert!((v.value - 1.0).abs() < 1e-12);
        let x = Tensor::from_rows(&[&[1.0, 2.0], &[0.5, -1.0], &[2.0, 0.0]]);
        let base = quantization_salience(&x, NormChoice::Spectral).unwrap().value;
        let scaled = quantization_salience(&x.scale(3.0), NormChoice::Spectral)
            .unwrap()
            .value;
        assert!((scaled - 9.0 * base).abs() < 1e-9 * scaled);
        let f = quantization_salience(&Tensor::eye(2), NormChoice::Frobenius).unwrap();
        assert!((f.value - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn spectral_salience_matches_svd() {
        use rand::{Rng, SeedableRng};
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::matrix(8, 4, (0..32).map(|_| rng.random_range(-1.0..1.0)).collect());
            let s = quantization_salience(&x, NormChoice::Spectral).unwrap().value;
            let m = nalgebra::DMatrix::from_row_slice(8, 4, x.data());
            let sigma = m.singular_values().max();
            assert!((s - sigma * sigma).abs() <= 1e-6 * s);
        }
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_scores(&[1.0, 3.0, 5.0]).unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(normalize_scores(&[7.0, 7.0, 7.0]).unwrap(), vec![1.0, 1.0, 1.0]);
        assert!(normalize_scores(&[]).is_err());
        let n = normalize_scores(&[0.3, 0.1, 0.7, 0.2]).unwrap();
        assert_eq!(n[1], 0.0);
        assert_eq!(n[2], 1.0);
    }

    #[test]
    fn combined_examples() {
        assert_eq!(combined_salience(1.0, 0.0), 0.0);
        assert_eq!(combined_salience(0.5, 0.5), 0.25);
    }

    proptest! {
        #[test]
        fn combined_respects_am_gm(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let m = (a + b) / 2.0;
            prop_assert!(combined_salience(a, b) <= m * m + 1e-12);
        }
    }

    fn simple_pool() -> Vec<DiffusionTrajectory> {
        let s = |v: f64| Tensor::from_rows(&[&[v, 1.0], &[0.5, v]]);
        vec![
            traj(0, vec![s(1.0), s(2.0), s(2.5), s(4.0)]),
            traj(1, vec![s(-1.0), s(1.0), s(1.5), s(1.6)]),
        ]
    }

    #[test]
    fn selecting_everything_from_one_trajectory() {
        let pool = simple_pool();
        let set = select_calibration(&pool[..1], 3, NormChoice::Spectral).unwrap();
        let mut ts: Vec<usize> = set.samples.iter().map(|s| s.timestep).collect();
        ts.sort_unstable();
        assert_eq!(ts, vec![2, 3, 4]);
    }

    #[test]
    fn product_ordering_prefers_joint_salience() {
        // candidate A: large change and large energy; candidate B: same change ratio, small energy
        let a_prev = Tensor::from_rows(&[&[0.0, 0.0]]);
        let a = Tensor::from_rows(&[&[3.0, 0.0]]);
        let b_prev = Tensor::from_rows(&[&[0.0, 0.0]]);
        let b = Tensor::from_rows(&[&[1.0, 0.0]]);
        let c_prev = Tensor::from_rows(&[&[2.0, 0.0]]);
        let c = Tensor::from_rows(&[&[2.0, 0.0]]);
        let pool = vec![
            traj(0, vec![a_prev, a]),
            traj(1, vec![b_prev, b]),
            traj(2, vec![c_prev, c]),
        ];
        let set = select_calibration(&pool, 1, NormChoice::Spectral).unwrap();
        assert_eq!(set.samples[0].prompt_id, 0);
        assert_eq!(set.scores[0].c_sample, 1.0);
    }

    #[test]
    fn zero_states_are_dropped() {
        let z = Tensor::zeros(&[1, 2]);
        let a = Tensor::from_rows(&[&[1.0, 0.0]]);
        let pool = vec![traj(0, vec![a.clone(), z.clone(), a.clone()])];
        let scores = score_candidates(&pool, NormChoice::Spectral).unwrap();
        assert_eq!(scores.len(), 1);
        assert_eq!(scores[0].timestep, 3);
        assert!(matches!(
            select_calibration(&pool, 2, NormChoice::Spectral),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn trajectory_validation() {
        assert!(DiffusionTrajectory::new(0, vec![Tensor::eye(2)]).is_err());
        assert!(DiffusionTrajectory::new(0, vec![Tensor::eye(2), Tensor::eye(3)]).is_err());
    }

    #[test]
    fn ties_break_by_timestep_then_prompt() {
        let x = Tensor::from_rows(&[&[1.0, 0.0]]);
        let pool = vec![
            traj(3, vec![x.clone(), x.clone(), x.clone()]),
            traj(1, vec![x.clone(), x.clone(), x.clone()]),
        ];
        // every candidate is degenerate on both axes, so every c_sample is 1
        let set = select_calibration(&pool, 4, NormChoice::Spectral).unwrap();
        let order: Vec<(usize, usize)> = set.samples.iter().map(|s| (s.timestep, s.prompt_id)).collect();
        assert_eq!(order, vec![(2, 1), (2, 3), (3, 1), (3, 3)]);
    }

    #[test]
    fn baseline_modes() {
        let pool = simple_pool();
        let atop = select_with_mode(&pool, 3, NormChoice::Spectral, SelectionMode::Atop, 0).unwrap();
        assert!(atop.samples.iter().all(|s| s.prompt_id == 0));
        assert!(select_with_mode(&pool, 4, NormChoice::Spectral, SelectionMode::Atop, 0).is_err());
        let r1 = select_with_mode(&pool, 4, NormChoice::Spectral, SelectionMode::Rtfp, 9).unwrap();
        let r2 = select_with_mode(&pool, 4, NormChoice::Spectral, SelectionMode::Rtfp, 9).unwrap();
        assert_eq!(r1, r2);
        let rnd = select_with_mode(&pool, 6, NormChoice::Spectral, SelectionMode::Random, 1).unwrap();
        assert_eq!(rnd.len(), 6);
    }

    #[test]
    fn quadratic_form_is_exact_for_linear_maps() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let x = Tensor::matrix(16, 8, (0..128).map(|_| rng.random_range(-1.0..1.0)).collect());
        let dw = Tensor::matrix(4, 8, (0..32).map(|_| rng.random_range(-0.1..0.1)).collect());
        let a = weight_perturbation_error(&x, &dw).unwrap();
        let b = hessian_quadratic_form(&x, &dw).unwrap();
        assert!((a - b).abs() <= 1e-9 * a);
    }
}
