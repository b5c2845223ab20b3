//! In-memory stages behind the subcommands.

use vdtq_core::distill::{sparsity_report, token_attention_mass};
use vdtq_core::engine::{calibrate_model, ModelCalibration, QuantizedModel};
use vdtq_core::salience::{score_candidates, select_with_mode, DiffusionTrajectory};
use vdtq_core::tensor::dot;
use vdtq_core::toy::{block_forward, build_toy_model, synth_trajectories, ToyModel};
use vdtq_core::Tensor;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::report::{
    BlockSection, CalibrationSection, EvalSample, EvalSection, SampleRef, SelectionSection, SparsityStats,
};

pub fn build_fixture(cfg: &RunConfig) -> Result<(ToyModel, Vec<DiffusionTrajectory>)> {
    let model = build_toy_model(&cfg.model)?;
    let trajs = synth_trajectories(&cfg.model, cfg.seed)?;
    Ok((model, trajs))
}

/// Every state with a predecessor (`t ≥ 2`), ordered by prompt then timestep.
pub fn candidate_pool(trajs: &[DiffusionTrajectory]) -> Vec<(SampleRef, Tensor)> {
    let mut pool: Vec<(SampleRef, Tensor)> = trajs
        .iter()
        .flat_map(|tr| {
            (2..=tr.num_timesteps()).map(move |t| {
                (
                    SampleRef {
                        prompt_id: tr.prompt_id,
                        timestep: t,
                    },
                    tr.state(t).clone(),
                )
            })
        })
        .collect();
    pool.sort_by_key(|(r, _)| *r);
    pool
}

pub fn run_selection(cfg: &RunConfig, trajs: &[DiffusionTrajectory]) -> Result<SelectionSection> {
    let set = select_with_mode(trajs, cfg.k_select, cfg.norm_choice, cfg.selection_mode, cfg.seed)?;
    let mut scores = score_candidates(trajs, cfg.norm_choice)?;
    scores.sort_by_key(|s| (s.prompt_id, s.timestep));
    Ok(SelectionSection {
        mode: cfg.selection_mode,
        norm: cfg.norm_choice,
        k: cfg.k_select,
        selected: set
            .samples
            .iter()
            .map(|s| SampleRef {
                prompt_id: s.prompt_id,
                timestep: s.timestep,
            })
            .collect(),
        scores,
    })
}

/// States of the listed samples, in list order.
pub fn lookup_states(trajs: &[DiffusionTrajectory], refs: &[SampleRef]) -> Result<Vec<Tensor>> {
    refs.iter()
        .map(|r| {
            let tr = trajs
                .iter()
                .find(|t| t.prompt_id == r.prompt_id)
                .ok_or_else(|| CliError::Config(format!("prompt {} not in manifest", r.prompt_id)))?;
            if r.timestep == 0 || r.timestep > tr.num_timesteps() {
                return Err(CliError::Config(format!(
                    "timestep {} outside 1..={} for prompt {}",
                    r.timestep,
                    tr.num_timesteps(),
                    r.prompt_id
                )));
            }
            Ok(tr.state(r.timestep).clone())
        })
        .collect()
}

/// Attention sparsity of every teacher block over the given inputs.
pub fn teacher_sparsity(model: &ToyModel, xs: &[Tensor], top_frac: f64) -> Result<Vec<SparsityStats>> {
    let mut per_block = vec![Vec::with_capacity(xs.len()); model.blocks.len()];
    for x in xs {
        let mut h = x.clone();
        for (l, b) in model.blocks.iter().enumerate() {
            let (out, maps) = block_forward(&h, b)?;
            per_block[l].push(sparsity_report(&token_attention_mass(&maps)?, top_frac)?);
            h = out;
        }
    }
    Ok(per_block
        .iter()
        .enumerate()
        .map(|(l, s)| SparsityStats::from_summaries(l, top_frac, s))
        .collect())
}

/// Splits a selection into its first `train_samples` entries and the rest.
pub fn split_selection(cfg: &RunConfig, selected: &[SampleRef]) -> Result<(Vec<SampleRef>, Vec<SampleRef>)> {
    if selected.len() < cfg.train_samples {
        return Err(CliError::Config(format!(
            "selection holds {} samples, train_samples is {}",
            selected.len(),
            cfg.train_samples
        )));
    }
    let (a, b) = selected.split_at(cfg.train_samples);
    Ok((a.to_vec(), b.to_vec()))
}

pub fn run_calibration(
    cfg: &RunConfig,
    model: &ToyModel,
    trajs: &[DiffusionTrajectory],
    selection: &SelectionSection,
    checkpoint: &str,
) -> Result<(ModelCalibration, CalibrationSection)> {
    let (train, validation) = split_selection(cfg, &selection.selected)?;
    let xs = lookup_states(trajs, &train)?;
    let vs = lookup_states(trajs, &validation)?;
    let scheme = cfg.scheme()?;
    let cal = calibrate_model(model, &xs, &vs, scheme, &cfg.train_config())?;
    let blocks = cal
        .blocks
        .iter()
        .map(|b| BlockSection {
            block: b.block,
            loss_curve: b.loss_curve.clone(),
            initial_loss: b.initial_loss,
            final_loss: b.final_loss,
            baked_loss: b.baked_loss,
            validation_loss: b.validation_loss,
            max_orthogonality_error: b.max_orthogonality_error,
            clip_w: b.quantized.transforms.layers.iter().map(|t| t.clip_w).collect(),
            clip_a: b.quantized.transforms.layers.iter().map(|t| t.clip_a).collect(),
        })
        .collect();
    let section = CalibrationSection {
        scheme,
        selection_mode: selection.mode,
        train,
        validation,
        blocks,
        sparsity: teacher_sparsity(model, &xs, cfg.sparsity_top_frac)?,
        checkpoint: checkpoint.into(),
    };
    Ok((cal, section))
}

fn cosine(a: &Tensor, b: &Tensor) -> f64 {
    let na = dot(a.data(), a.data()).sqrt();
    let nb = dot(b.data(), b.data()).sqrt();
    if na == 0.0 && nb == 0.0 {
        return 1.0;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a.data(), b.data()) / (na * nb)
}

pub fn run_eval(
    fp: &ToyModel,
    q: &QuantizedModel,
    samples: &[(SampleRef, Tensor)],
    top_frac: f64,
) -> Result<EvalSection> {
    if samples.is_empty() {
        return Err(CliError::Config("no evaluation samples".into()));
    }
    let mut rows = Vec::with_capacity(samples.len());
    for (r, x) in samples {
        let teacher = fp
            .forward_all(x)?
            .pop()
            .ok_or_else(|| CliError::Config("model has no blocks".into()))?;
        let student = q.forward(x, fp)?;
        let diff = teacher.sub(&student)?;
        rows.push(EvalSample {
            prompt_id: r.prompt_id,
            timestep: r.timestep,
            mse: diff.frobenius_sq() / diff.len() as f64,
            cosine: cosine(&teacher, &student),
        });
    }
    let n = rows.len() as f64;
    let xs: Vec<Tensor> = samples.iter().map(|(_, x)| x.clone()).collect();
    Ok(EvalSection {
        scheme: q.scheme,
        mean_mse: rows.iter().map(|r| r.mse).sum::<f64>() / n,
        mean_cosine: rows.iter().map(|r| r.cosine).sum::<f64>() / n,
        samples: rows,
        sparsity: teacher_sparsity(fp, &xs, top_frac)?,
    })
}
