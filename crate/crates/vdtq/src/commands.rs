//! Subcommand bodies. Every command writes its report as JSON into the
//! output directory and returns it.

use std::path::Path;

use crate::artifacts::{
    load_fp_model, load_quant_model, save_fp_model, save_quant_model, write_json, Manifest, QuantCheckpoint,
};
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::pipeline::{build_fixture, candidate_pool, run_calibration, run_eval, run_selection};
use crate::report::{GenSection, Report};

pub const MODEL_FILE: &str = "model.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SELECTION_FILE: &str = "selection.json";
pub const QUANT_FILE: &str = "quant.json";
pub const GEN_REPORT: &str = "gen_report.json";
pub const CALIBRATION_REPORT: &str = "calibration_report.json";
pub const EVAL_REPORT: &str = "eval_report.json";

/// Writes the FP model, trajectory tensors and manifest.
pub fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<Report> {
    let (model, trajs) = build_fixture(cfg)?;
    save_fp_model(&out.join(MODEL_FILE), &model)?;
    let manifest = Manifest::write_with_trajectories(&out.join(MANIFEST_FILE), MODEL_FILE, &cfg.model, &trajs)?;
    let mut report = Report::new("gen", cfg);
    report.gen = Some(GenSection {
        manifest: MANIFEST_FILE.into(),
        model: MODEL_FILE.into(),
        prompts: manifest.prompts.len(),
        timesteps: manifest.timesteps,
        files: manifest.prompts.iter().map(|p| p.states.len()).sum(),
    });
    write_json(&out.join(GEN_REPORT), &report)?;
    Ok(report)
}

fn check_manifest(cfg: &RunConfig, manifest: &Manifest, path: &Path) -> Result<()> {
    if manifest.dim != cfg.model.d || manifest.tokens != cfg.model.tokens() {
        return Err(CliError::Config(format!(
            "{} holds [{} x {}] states, config expects [{} x {}]",
            path.display(),
            manifest.tokens,
            manifest.dim,
            cfg.model.tokens(),
            cfg.model.d
        )));
    }
    Ok(())
}

pub fn cmd_select(cfg: &RunConfig, manifest_path: &Path, out: &Path) -> Result<Report> {
    let manifest = Manifest::load(manifest_path)?;
    check_manifest(cfg, &manifest, manifest_path)?;
    let trajs = manifest.load_trajectories(manifest_path)?;
    let mut report = Report::new("select", cfg);
    report.selection = Some(run_selection(cfg, &trajs)?);
    write_json(&out.join(SELECTION_FILE), &report)?;
    Ok(report)
}

pub fn cmd_calibrate(cfg: &RunConfig, manifest_path: &Path, selection_path: &Path, out: &Path) -> Result<Report> {
    let manifest = Manifest::load(manifest_path)?;
    check_manifest(cfg, &manifest, manifest_path)?;
    let model = load_fp_model(&manifest.model_path(manifest_path))?;
    if model.config != cfg.model {
        return Err(CliError::Config(format!(
            "model in {} was built from a different configuration",
            manifest_path.display()
        )));
    }
    let trajs = manifest.load_trajectories(manifest_path)?;
    let sel: Report = crate::artifacts::read_json(selection_path)?;
    let selection = sel
        .selection
        .ok_or_else(|| CliError::Config(format!("{} holds no selection", selection_path.display())))?;
    let (cal, section) = run_calibration(cfg, &model, &trajs, &selection, QUANT_FILE)?;
    save_quant_model(
        &out.join(QUANT_FILE),
        &QuantCheckpoint {
            run: cfg.clone(),
            model: cal.model,
        },
    )?;
    let mut report = Report::new("calibrate", cfg);
    report.calibration = Some(section);
    write_json(&out.join(CALIBRATION_REPORT), &report)?;
    Ok(report)
}

/// Compares FP and quantized model outputs on every candidate state
/// (`t ≥ 2`) of the manifest.
pub fn cmd_eval(model_path: &Path, quant_path: &Path, manifest_path: &Path, out: &Path) -> Result<Report> {
    let model = load_fp_model(model_path)?;
    let ckpt = load_quant_model(quant_path)?;
    if ckpt.run.model != model.config {
        return Err(CliError::Config(format!(
            "{} was calibrated for a different model than {}",
            quant_path.display(),
            model_path.display()
        )));
    }
    let manifest = Manifest::load(manifest_path)?;
    check_manifest(&ckpt.run, &manifest, manifest_path)?;
    let trajs = manifest.load_trajectories(manifest_path)?;
    let pool = candidate_pool(&trajs);
    let mut report = Report::new("eval", &ckpt.run);
    report.eval = Some(run_eval(&model, &ckpt.model, &pool, ckpt.run.sparsity_top_frac)?);
    write_json(&out.join(EVAL_REPORT), &report)?;
    Ok(report)
}
