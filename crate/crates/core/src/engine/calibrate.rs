//! Block-wise calibration: learn transforms and clips against teacher block
//! outputs, then bake weights with GPTQ and move on to the next block.

use alloc::format;
use alloc::vec::Vec;

use crate::distill::{token_attention_mass, token_loss_weights, weighted_token_loss, TokenWeights};
use crate::error::{Error, Result};
use crate::gptq::{gptq_quantize_weight, DEFAULT_DAMP_FRAC};
use crate::quant::{Granularity, QuantSpec};
use crate::tensor::Tensor;
use crate::toy::{block_forward, LinearKind, ToyModel};

use super::optim::{cosine_lr, AdamW};
use super::qblock::{BakedWeight, BlockObjective, BlockTransforms, QuantScheme, QuantizedBlock};
use super::transform::orthogonality_error;

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum DistillMode {
    /// Attention-weighted token loss.
    Std,
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Samples per optimizer step; 0 means the whole calibration set.
    pub batch: usize,
    pub lr_transform: f64,
    pub lr_clip: f64,
    pub damp_frac: f64,
    pub distill: DistillMode,
    pub lambda_min: f64,
    pub lambda_max: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 15,
            batch: 0,
            lr_transform: 5e-3,
            lr_clip: 5e-2,
            damp_frac: DEFAULT_DAMP_FRAC,
            distill: DistillMode::Std,
            lambda_min: crate::distill::DEFAULT_LAMBDA_MIN,
            lambda_max: crate::distill::DEFAULT_LAMBDA_MAX,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_transform >= 0.0 && self.lr_clip >= 0.0) {
            return Err(Error::Config(format!(
                "learning rates must be non-negative, got {} and {}",
                self.lr_transform, self.lr_clip
            )));
        }
        if !(self.damp_frac > 0.0) {
            return Err(Error::Config(format!(
                "damping fraction {} must be positive",
                self.damp_frac
            )));
        }
        if !(self.lambda_min >= 0.0 && self.lambda_min <= self.lambda_max && self.lambda_max > 0.0) {
            return Err(Error::Config(format!(
                "invalid token weight range [{}, {}]",
                self.lambda_min, self.lambda_max
            )));
        }
        Ok(())
    }

    pub fn token_weights(&self, teacher_maps: &Tensor) -> Result<TokenWeights> {
        match self.distill {
            DistillMode::Std => {
                token_loss_weights(&token_attention_mass(teacher_maps)?, self.lambda_min, self.lambda_max)
            }
            DistillMode::Uniform => Ok(TokenWeights::uniform(teacher_maps.dims()[2])),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BlockCalibrationResult {
    pub block: usize,
    /// Training objective before any update, then after every epoch.
    pub loss_curve: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Same objective with the GPTQ-baked weights.
    pub baked_loss: f64,
    /// Baked objective on held-out samples, when any were given.
    pub validation_loss: Option<f64>,
    pub max_orthogonality_error: f64,
    pub quantized: QuantizedBlock,
}

/// Teacher data for one block: inputs the student sees, FP targets and
/// per-sample token weights.
pub struct BlockBatch<'a> {
    pub inputs: &'a [Tensor],
    pub targets: &'a [Tensor],
    pub token_weights: &'a [Vec<f64>],
}

pub fn calibrate_block(
    block_index: usize,
    fp: &crate::toy::ToyBlock,
    train: &BlockBatch<'_>,
    validation: Option<&BlockBatch<'_>>,
    scheme: QuantScheme,
    cfg: &TrainConfig,
) -> Result<BlockCalibrationResult> {
    cfg.validate()?;
    let obj = BlockObjective {
        block: fp,
        inputs: train.inputs,
        targets: train.targets,
        token_weights: train.token_weights,
        scheme,
    };
    let mut tf = BlockTransforms::identity(fp);
    let mut tp = tf.transform_params();
    let mut cp = tf.clip_params();
    let mut opt_t = AdamW::new(tp.len());
    let mut opt_c = AdamW::new(cp.len());
    let mut curve = Vec::with_capacity(cfg.epochs + 1);
    let mut max_orth = 0.0f64;
    let check = |epoch: usize, loss: f64| -> Result<()> {
        if loss.is_finite() {
            Ok(())
        } else {
            Err(Error::Training {
                block: block_index,
                epoch,
                loss,
            })
        }
    };
    let n = train.inputs.len();
    let batch = if cfg.batch == 0 { n } else { cfg.batch.min(n) };
    let per_epoch = n.div_ceil(batch);
    let total_steps = cfg.epochs * per_epoch;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for start in (0..n).step_by(batch) {
            let end = (start + batch).min(n);
            let part = BlockObjective {
                inputs: &train.inputs[start..end],
                targets: &train.targets[start..end],
                token_weights: &train.token_weights[start..end],
                ..obj
            };
            let lg = part.loss_and_grad(&tf)?;
            check(epoch, lg.loss)?;
            if start == 0 {
                curve.push(if end == n { lg.loss } else { obj.loss(&tf)? });
            }
            let gt = lg.grads.transform_params();
            let gc = lg.grads.clip_params();
            if gt.iter().chain(&gc).any(|g| !g.is_finite()) {
                return Err(Error::Training {
                    block: block_index,
                    epoch,
                    loss: lg.loss,
                });
            }
            opt_t.step(&mut tp, &gt, cosine_lr(step, total_steps, cfg.lr_transform));
            opt_c.step(&mut cp, &gc, cosine_lr(step, total_steps, cfg.lr_clip));
            step += 1;
            tf.set_transform_params(&tp);
            tf.set_clip_params(&cp);
            cp = tf.clip_params();
            for r in tf.rotations()? {
                max_orth = max_orth.max(orthogonality_error(&r.r));
            }
        }
    }
    let last = obj.loss(&tf)?;
    check(cfg.epochs, last)?;
    curve.push(last);

    let quantized = bake(&obj, &tf, scheme, cfg.damp_frac)?;
    let fixed: Vec<Tensor> = quantized.weights.iter().map(|w| w.dequantize()).collect();
    let baked_loss = obj.loss_with_fixed_weights(&tf, &fixed)?;
    let validation_loss = match validation {
        Some(v) if !v.inputs.is_empty() => Some(
            BlockObjective {
                block: fp,
                inputs: v.inputs,
                targets: v.targets,
                token_weights: v.token_weights,
                scheme,
            }
            .loss_with_fixed_weights(&tf, &fixed)?,
        ),
        _ => None,
    };
    Ok(BlockCalibrationResult {
        block: block_index,
        initial_loss: curve[0],
        final_loss: last,
        loss_curve: curve,
        baked_loss,
        validation_loss,
        max_orthogonality_error: max_orth,
        quantized,
    })
}

/// GPTQ on the transformed weights, with the Hessian taken from the
/// transformed (and activation-quantized) layer inputs.
fn bake(obj: &BlockObjective<'_>, tf: &BlockTransforms, scheme: QuantScheme, damp: f64) -> Result<QuantizedBlock> {
    let wts = obj.transformed_weights(tf)?;
    let weights = match scheme.w_bits {
        None => wts.into_iter().map(BakedWeight::Float).collect(),
        Some(bits) => {
            let xs = obj.layer_inputs(tf)?;
            LinearKind::ALL
                .iter()
                .map(|&k| {
                    let spec = QuantSpec::new(bits, Granularity::PerChannel)?.with_clip(tf.layer(k).clip_w)?;
                    Ok(BakedWeight::Int(gptq_quantize_weight(
                        &wts[k.index()],
                        &xs[k.index()],
                        &spec,
                        damp,
                    )?))
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    Ok(QuantizedBlock {
        scheme,
        transforms: tf.clone(),
        weights,
    })
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct QuantizedModel {
    pub scheme: QuantScheme,
    pub blocks: Vec<QuantizedBlock>,
}

impl QuantizedModel {
    /// Output of the last block.
    pub fn forward(&self, x: &Tensor, fp: &ToyModel) -> Result<Tensor> {
        if self.blocks.len() != fp.blocks.len() {
            return Err(Error::shape(
                "QuantizedModel::forward",
                format!(
                    "{} quantized blocks for {} model blocks",
                    self.blocks.len(),
                    fp.blocks.len()
                ),
            ));
        }
        let mut h = x.clone();
        for (q, b) in self.blocks.iter().zip(&fp.blocks) {
            h = q.forward(&h, b)?.0;
        }
        Ok(h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelCalibration {
    pub blocks: Vec<BlockCalibrationResult>,
    pub model: QuantizedModel,
}

/// Sequential calibration. Block `l` is trained on the outputs of the
/// already-baked blocks `0..l`, against full-precision teacher outputs.
pub fn calibrate_model(
    fp: &ToyModel,
    train: &[Tensor],
    validation: &[Tensor],
    scheme: QuantScheme,
    cfg: &TrainConfig,
) -> Result<ModelCalibration> {
    if train.is_empty() {
        return Err(Error::Config("calibration set is empty".into()));
    }
    let teacher = |xs: &[Tensor]| -> Result<(Vec<Vec<Tensor>>, Vec<Vec<Vec<f64>>>)> {
        let depth = fp.blocks.len();
        let mut outs = alloc::vec![Vec::with_capacity(xs.len()); depth];
        let mut weights = alloc::vec![Vec::with_capacity(xs.len()); depth];
        for x in xs {
            let mut h = x.clone();
            for (l, b) in fp.blocks.iter().enumerate() {
                let (o, maps) = block_forward(&h, b)?;
                weights[l].push(cfg.token_weights(&maps)?.lambda);
                outs[l].push(o.clone());
                h = o;
            }
        }
        Ok((outs, weights))
    };
    let (t_out, t_w) = teacher(train)?;
    let (v_out, v_w) = teacher(validation)?;

    let mut s_in: Vec<Tensor> = train.to_vec();
    let mut v_in: Vec<Tensor> = validation.to_vec();
    let mut results = Vec::with_capacity(fp.blocks.len());
    for (l, b) in fp.blocks.iter().enumerate() {
        let tb = BlockBatch {
            inputs: &s_in,
            targets: &t_out[l],
            token_weights: &t_w[l],
        };
        let vb = BlockBatch {
            inputs: &v_in,
            targets: &v_out[l],
            token_weights: &v_w[l],
        };
        let res = calibrate_block(l, b, &tb, Some(&vb), scheme, cfg)?;
        s_in = s_in
            .iter()
            .map(|x| Ok(res.quantized.forward(x, b)?.0))
            .collect::<Result<_>>()?;
        v_in = v_in
            .iter()
            .map(|x| Ok(res.quantized.forward(x, b)?.0))
            .collect::<Result<_>>()?;
        results.push(res);
    }
    let model = QuantizedModel {
        scheme,
        blocks: results.iter().map(|r| r.quantized.clone()).collect(),
    };
    Ok(ModelCalibration { blocks: results, model })
}

/// Mean over samples of the uniform token loss between the full-precision
/// and quantized model outputs.
pub fn output_loss(fp: &ToyModel, q: &QuantizedModel, xs: &[Tensor]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let mut total = 0.0;
    for x in xs {
        let teacher = fp
            .forward_all(x)?
            .pop()
            .ok_or_else(|| Error::Config("model has no blocks".into()))?;
        let student = q.forward(x, fp)?;
        total += weighted_token_loss(&teacher, &student, &alloc::vec![1.0; x.rows()])?;
    }
    Ok(total / xs.len() as f64)
}
