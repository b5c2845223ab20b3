//! Machine-readable run reports.

use serde::{Deserialize, Serialize};
use vdtq_core::distill::SparsitySummary;
use vdtq_core::engine::QuantScheme;
use vdtq_core::salience::{NormChoice, SalienceScore, SelectionMode};

use crate::config::RunConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleRef {
    pub prompt_id: usize,
    pub timestep: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenSection {
    pub manifest: String,
    pub model: String,
    pub prompts: usize,
    pub timesteps: usize,
    pub files: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionSection {
    pub mode: SelectionMode,
    pub norm: NormChoice,
    pub k: usize,
    /// Selected samples in selection order.
    pub selected: Vec<SampleRef>,
    /// Every candidate of the pool, ordered by prompt then timestep.
    pub scores: Vec<SalienceScore>,
}

/// Attention sparsity of one block, aggregated over samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityStats {
    pub block: usize,
    pub top_frac: f64,
    pub top_count: usize,
    pub tokens: usize,
    pub mean_mass_share: f64,
    pub min_mass_share: f64,
    pub max_mass_share: f64,
}

impl SparsityStats {
    pub fn from_summaries(block: usize, top_frac: f64, s: &[SparsitySummary]) -> Self {
        let shares: Vec<f64> = s.iter().map(|v| v.mass_share).collect();
        SparsityStats {
            block,
            top_frac,
            top_count: s.first().map_or(0, |v| v.top_count),
            tokens: s.first().map_or(0, |v| v.tokens),
            mean_mass_share: shares.iter().sum::<f64>() / shares.len().max(1) as f64,
            min_mass_share: shares.iter().copied().fold(f64::INFINITY, f64::min),
            max_mass_share: shares.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSection {
    pub block: usize,
    pub loss_curve: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub baked_loss: f64,
    pub validation_loss: Option<f64>,
    pub max_orthogonality_error: f64,
    pub clip_w: Vec<f64>,
    pub clip_a: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSection {
    pub scheme: QuantScheme,
    pub selection_mode: SelectionMode,
    pub train: Vec<SampleRef>,
    pub validation: Vec<SampleRef>,
    pub blocks: Vec<BlockSection>,
    pub sparsity: Vec<SparsityStats>,
    pub checkpoint: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSample {
    pub prompt_id: usize,
    pub timestep: usize,
    /// Mean squared error over all output elements.
    pub mse: f64,
    pub cosine: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    pub scheme: QuantScheme,
    pub samples: Vec<EvalSample>,
    pub mean_mse: f64,
    pub mean_cosine: f64,
    pub sparsity: Vec<SparsityStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub command: String,
    pub seed: u64,
    pub config: RunConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gen: Option<GenSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection: Option<SelectionSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<CalibrationSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalSection>,
}

impl Report {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Report {
            command: command.into(),
            seed: config.seed,
            config: config.clone(),
            gen: None,
            selection: None,
            calibration: None,
            eval: None,
        }
    }

    /// Human-readable summary for the `report` subcommand.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let bits = |b: Option<u8>| b.map_or("fp".to_string(), |v| v.to_string());
        out += &format!(
            "{} report  seed {}  W{} A{}\n",
            self.command,
            self.seed,
            bits(self.config.bits_w),
            bits(self.config.bits_a)
        );
        if let Some(g) = &self.gen {
            out += &format!(
                "  {} prompts x {} timesteps, {} tensor files\n",
                g.prompts, g.timesteps, g.files
            );
        }
        if let Some(s) = &self.selection {
            out += &format!("  selection {:?} ({:?} norm), k = {}\n", s.mode, s.norm, s.k);
            for (rank, r) in s.selected.iter().enumerate() {
                let score = s
                    .scores
                    .iter()
                    .find(|c| c.prompt_id == r.prompt_id && c.timestep == r.timestep);
                match score {
                    Some(c) => {
                        out += &format!(
                            "    {:>3}  prompt {:>3}  t {:>3}  c_diff {:.4}  c_quant {:.4}  c {:.4}\n",
                            rank + 1,
                            r.prompt_id,
                            r.timestep,
                            c.c_diff_norm,
                            c.c_quant_norm,
                            c.c_sample
                        )
                    }
                    None => out += &format!("    {:>3}  prompt {:>3}  t {:>3}\n", rank + 1, r.prompt_id, r.timestep),
                }
            }
        }
        if let Some(c) = &self.calibration {
            out += &format!(
                "  calibration on {} samples ({} held out)\n",
                c.train.len(),
                c.validation.len()
            );
            for b in &c.blocks {
                out += &format!(
                    "    block {}  loss {:.6} -> {:.6}  baked {:.6}",
                    b.block, b.initial_loss, b.final_loss, b.baked_loss
                );
                if let Some(v) = b.validation_loss {
                    out += &format!("  held-out {:.6}", v);
                }
                out.push('\n');
            }
            render_sparsity(&mut out, &c.sparsity);
        }
        if let Some(e) = &self.eval {
            out += &format!(
                "  eval on {} samples  mean mse {:.6e}  mean cosine {:.6}\n",
                e.samples.len(),
                e.mean_mse,
                e.mean_cosine
            );
            render_sparsity(&mut out, &e.sparsity);
        }
        out
    }
}

fn render_sparsity(out: &mut String, stats: &[SparsityStats]) {
    for s in stats {
        *out += &format!(
            "    block {} attention: top {} of {} tokens hold {:.1}% of mass (min {:.1}%, max {:.1}%)\n",
            s.block,
            s.top_count,
            s.tokens,
            100.0 * s.mean_mass_share,
            100.0 * s.min_mass_share,
            100.0 * s.max_mass_share
        );
    }
}
