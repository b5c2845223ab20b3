//! JSON run configuration shared by every subcommand.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use vdtq_core::distill::{DEFAULT_LAMBDA_MAX, DEFAULT_LAMBDA_MIN};
use vdtq_core::engine::{DistillMode, QuantScheme, TrainConfig};
use vdtq_core::gptq::DEFAULT_DAMP_FRAC;
use vdtq_core::salience::{NormChoice, SelectionMode};
use vdtq_core::toy::ToyModelConfig;

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// `null` disables weight quantization.
    pub bits_w: Option<u8>,
    /// `null` disables activation quantization.
    pub bits_a: Option<u8>,
    pub k_select: usize,
    pub train_samples: usize,
    pub epochs: usize,
    /// Samples per optimizer step; 0 uses the whole training set.
    pub batch: usize,
    pub lr_transform: f64,
    pub lr_clip: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub damp_frac: f64,
    pub norm_choice: NormChoice,
    pub selection_mode: SelectionMode,
    pub distill_mode: DistillMode,
    /// Fraction of heaviest tokens used in sparsity summaries.
    pub sparsity_top_frac: f64,
    /// Governs every random draw; overrides `model.seed`.
    pub seed: u64,
    pub model: ToyModelConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ToyModelConfig::default();
        RunConfig {
            bits_w: Some(4),
            bits_a: Some(6),
            k_select: 40,
            train_samples: 30,
            epochs: 15,
            batch: 0,
            lr_transform: 5e-3,
            lr_clip: 5e-2,
            lambda_min: DEFAULT_LAMBDA_MIN,
            lambda_max: DEFAULT_LAMBDA_MAX,
            damp_frac: DEFAULT_DAMP_FRAC,
            norm_choice: NormChoice::Spectral,
            selection_mode: SelectionMode::Sds,
            distill_mode: DistillMode::Std,
            sparsity_top_frac: 0.1,
            seed: model.seed,
            model,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {}", path.display(), e)))?;
        cfg.resolved()
    }

    /// Copies the run seed into the model config and checks every field.
    pub fn resolved(mut self) -> Result<Self> {
        self.model.seed = self.seed;
        self.model.validate()?;
        self.scheme()?;
        self.train_config().validate()?;
        if self.k_select == 0 {
            return Err(CliError::Config("k_select must be positive".into()));
        }
        if self.train_samples == 0 || self.train_samples > self.k_select {
            return Err(CliError::Config(format!(
                "train_samples {} must be in 1..={}",
                self.train_samples, self.k_select
            )));
        }
        if !(self.sparsity_top_frac > 0.0 && self.sparsity_top_frac <= 1.0) {
            return Err(CliError::Config(format!(
                "sparsity_top_frac {} outside (0, 1]",
                self.sparsity_top_frac
            )));
        }
        Ok(self)
    }

    pub fn scheme(&self) -> Result<QuantScheme> {
        let check = |bits: Option<u8>, what: &str| match bits {
            Some(b) if !(vdtq_core::quant::MIN_BITS..=vdtq_core::quant::MAX_BITS).contains(&b) => Err(
                CliError::Config(format!("{} = {} outside supported range 2..=8", what, b)),
            ),
            _ => Ok(bits),
        };
        Ok(QuantScheme {
            w_bits: check(self.bits_w, "bits_w")?,
            a_bits: check(self.bits_a, "bits_a")?,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch: self.batch,
            lr_transform: self.lr_transform,
            lr_clip: self.lr_clip,
            damp_frac: self.damp_frac,
            distill: self.distill_mode,
            lambda_min: self.lambda_min,
            lambda_max: self.lambda_max,
        }
    }
}
