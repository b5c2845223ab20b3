//! Quantized student block: forward with recorded quantizer context and the
//! matching reverse pass for every learnable transform parameter.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::attention::check_heads;
use crate::distill::weighted_token_loss;
use crate::error::{Error, Result};
use crate::quant::{Granularity, QuantSpec, QuantizedTensor};
use crate::tensor::{matmul, matmul_nt, matmul_tn, Tensor};
use crate::toy::{block_forward_with, gelu_grad, BlockTrace, LinearKind, ToyBlock};

use super::fakequant::{fake_quant_backward, fake_quant_frozen, fake_quant_record, FqContext};
use super::transform::{cayley_backward, scale_columns, skew_grad, LayerTransform, Rotation};

/// Bit-widths for weights and activations; `None` disables that side.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct QuantScheme {
    pub w_bits: Option<u8>,
    pub a_bits: Option<u8>,
}

impl QuantScheme {
    pub fn new(w_bits: u8, a_bits: u8) -> Result<Self> {
        QuantSpec::new(w_bits, Granularity::PerChannel)?;
        QuantSpec::new(a_bits, Granularity::PerToken)?;
        Ok(QuantScheme {
            w_bits: Some(w_bits),
            a_bits: Some(a_bits),
        })
    }

    pub fn disabled() -> Self {
        QuantScheme {
            w_bits: None,
            a_bits: None,
        }
    }

    pub fn is_disabled(&self) -> bool {
        self.w_bits.is_none() && self.a_bits.is_none()
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BlockTransforms {
    /// Indexed by [`LinearKind::index`].
    pub layers: Vec<LayerTransform>,
}

impl BlockTransforms {
    pub fn identity(block: &ToyBlock) -> Self {
        BlockTransforms {
            layers: LinearKind::ALL
                .iter()
                .map(|&k| LayerTransform::identity(block.weight(k).cols()))
                .collect(),
        }
    }

    pub fn layer(&self, kind: LinearKind) -> &LayerTransform {
        &self.layers[kind.index()]
    }

    /// Scale and rotation parameters of every layer, concatenated.
    pub fn transform_params(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for l in &self.layers {
            v.extend_from_slice(&l.log_scale);
            v.extend_from_slice(&l.skew);
        }
        v
    }

    pub fn set_transform_params(&mut self, p: &[f64]) {
        let mut off = 0;
        for l in &mut self.layers {
            let n = l.log_scale.len();
            l.log_scale.copy_from_slice(&p[off..off + n]);
            off += n;
            let m = l.skew.len();
            l.skew.copy_from_slice(&p[off..off + m]);
            off += m;
        }
    }

    /// `[clip_w, clip_a]` per layer.
    pub fn clip_params(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| [l.clip_w, l.clip_a]).collect()
    }

    pub fn set_clip_params(&mut self, p: &[f64]) {
        for (l, c) in self.layers.iter_mut().zip(p.chunks(2)) {
            l.clip_w = c[0];
            l.clip_a = c[1];
            l.clamp_clips();
        }
    }

    pub fn rotations(&self) -> Result<Vec<Rotation>> {
        self.layers.iter().map(|l| l.rotation()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub log_scale: Vec<f64>,
    pub skew: Vec<f64>,
    pub clip_w: f64,
    pub clip_a: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockGrads {
    pub layers: Vec<LayerGrad>,
}

impl BlockGrads {
    pub fn transform_params(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for l in &self.layers {
            v.extend_from_slice(&l.log_scale);
            v.extend_from_slice(&l.skew);
        }
        v
    }

    pub fn clip_params(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| [l.clip_w, l.clip_a]).collect()
    }
}

/// Quantizer state recorded during a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct RecordedContext {
    pub weights: Vec<Option<FqContext>>,
    /// `[sample][layer]`
    pub activations: Vec<Vec<Option<FqContext>>>,
}

/// Per-layer quantities shared by every sample of a step.
struct PreparedLayer {
    inv_s: Vec<f64>,
    rot: Rotation,
    /// `W · diag(s)`
    ws: Tensor,
    /// `W · diag(s) · R`
    wt: Tensor,
    /// Weight actually multiplied in the forward pass.
    wq: Tensor,
    wctx: Option<FqContext>,
    clip_a: f64,
    clip_w: f64,
}

enum WeightMode<'a> {
    Record,
    Frozen(&'a [Option<FqContext>]),
    Fixed(&'a [Tensor]),
}

fn prepare(
    block: &ToyBlock,
    tf: &BlockTransforms,
    scheme: QuantScheme,
    mode: WeightMode<'_>,
) -> Result<Vec<PreparedLayer>> {
    LinearKind::ALL
        .iter()
        .map(|&kind| {
            let t = tf.layer(kind);
            let w = block.weight(kind);
            if t.dim() != w.cols() {
                return Err(Error::shape(
                    "prepare",
                    format!("{} transform width {} vs weight {:?}", kind.name(), t.dim(), w.dims()),
                ));
            }
            let s = t.scales();
            let inv_s: Vec<f64> = s.iter().map(|v| 1.0 / v).collect();
            let rot = t.rotation()?;
            let ws = scale_columns(w, &s);
            let wt = matmul(&ws, &rot.r)?;
            let (wq, wctx) = match (&mode, scheme.w_bits) {
                (WeightMode::Fixed(ws_fixed), _) => (ws_fixed[kind.index()].clone(), None),
                (_, None) => (wt.clone(), None),
                (WeightMode::Record, Some(bits)) => {
                    let (q, c) = fake_quant_record(&wt, bits, t.clip_w);
                    (q, Some(c))
                }
                (WeightMode::Frozen(ctx), Some(_)) => {
                    let c = ctx[kind.index()].as_ref().expect("weight context recorded");
                    (fake_quant_frozen(&wt, t.clip_w, c), Some(c.clone()))
                }
            };
            Ok(PreparedLayer {
                inv_s,
                rot,
                ws,
                wt,
                wq,
                wctx,
                clip_a: t.clip_a,
                clip_w: t.clip_w,
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
struct LayerCache {
    /// `X · diag(1/s)`
    us: Tensor,
    /// `X · diag(1/s) · R`
    xt: Tensor,
    xq: Tensor,
    actx: Option<FqContext>,
}

struct StudentTrace {
    trace: BlockTrace,
    layers: Vec<LayerCache>,
}

fn student_forward(
    x: &Tensor,
    block: &ToyBlock,
    prepared: &[PreparedLayer],
    scheme: QuantScheme,
    frozen_acts: Option<&[Option<FqContext>]>,
) -> Result<StudentTrace> {
    let mut caches: Vec<Option<LayerCache>> = vec![None; LinearKind::ALL.len()];
    let trace = block_forward_with(x, block, |kind, input| {
        let p = &prepared[kind.index()];
        let us = scale_columns(input, &p.inv_s);
        let xt = matmul(&us, &p.rot.r)?;
        let (xq, actx) = match (scheme.a_bits, frozen_acts) {
            (None, _) => (xt.clone(), None),
            (Some(bits), None) => {
                let (q, c) = fake_quant_record(&xt, bits, p.clip_a);
                (q, Some(c))
            }
            (Some(_), Some(ctx)) => {
                let c = ctx[kind.index()].as_ref().expect("activation context recorded");
                (fake_quant_frozen(&xt, p.clip_a, c), Some(c.clone()))
            }
        };
        let y = matmul_nt(&xq, &p.wq)?;
        caches[kind.index()] = Some(LayerCache { us, xt, xq, actx });
        Ok(y)
    })?;
    Ok(StudentTrace {
        trace,
        layers: caches.into_iter().map(|c| c.expect("every layer ran")).collect(),
    })
}

struct LayerAccum {
    d_r: Tensor,
    d_log_s: Vec<f64>,
    d_clip_a: f64,
    d_clip_w: f64,
    d_wq: Tensor,
}

impl LayerAccum {
    fn new(p: &PreparedLayer) -> Self {
        let d = p.inv_s.len();
        LayerAccum {
            d_r: Tensor::zeros(&[d, d]),
            d_log_s: vec![0.0; d],
            d_clip_a: 0.0,
            d_clip_w: 0.0,
            d_wq: Tensor::zeros(p.wq.dims()),
        }
    }
}

fn layer_backward(
    p: &PreparedLayer,
    c: &LayerCache,
    dy: &Tensor,
    acc: &mut LayerAccum,
    need_input: bool,
) -> Result<Option<Tensor>> {
    acc.d_wq.add_assign(&matmul_tn(dy, &c.xq)?)?;
    let dxq = matmul(dy, &p.wq)?;
    let dxt = match &c.actx {
        Some(ctx) => {
            let (dxt, dclip) = fake_quant_backward(&dxq, &c.xt, p.clip_a, ctx);
            acc.d_clip_a += dclip;
            dxt
        }
        None => dxq,
    };
    acc.d_r.add_assign(&matmul_tn(&c.us, &dxt)?)?;
    let dus = matmul_nt(&dxt, &p.rot.r)?;
    let cols = dus.cols();
    for (drow, urow) in dus.data().chunks(cols).zip(c.us.data().chunks(cols)) {
        for ((g, &du), &u) in acc.d_log_s.iter_mut().zip(drow).zip(urow) {
            *g -= du * u;
        }
    }
    Ok(if need_input {
        Some(scale_columns(&dus, &p.inv_s))
    } else {
        None
    })
}

fn layer_norm_backward(dy: &Tensor, xhat: &Tensor, inv_std: &[f64], gain: &[f64]) -> Tensor {
    let (n, d) = (dy.rows(), dy.cols());
    let mut dx = Tensor::zeros(&[n, d]);
    for i in 0..n {
        let dyr = dy.row(i);
        let xr = xhat.row(i);
        let dxhat: Vec<f64> = dyr.iter().zip(gain).map(|(a, g)| a * g).collect();
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let out = dx.row_mut(i);
        for j in 0..d {
            out[j] = inv_std[i] * (dxhat[j] - mean_d - xr[j] * mean_dx);
        }
    }
    dx
}

/// Gradients of `q`, `k`, `v` from the gradient of the concatenated context.
fn attention_backward(t: &BlockTrace, d_ctx: &Tensor, heads: usize) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, d) = (t.q.rows(), t.q.cols());
    let hd = check_heads(d, heads)?;
    let scale = 1.0 / libm::sqrt(hd as f64);
    let mut dq = Tensor::zeros(&[n, d]);
    let mut dk = Tensor::zeros(&[n, d]);
    let mut dv = Tensor::zeros(&[n, d]);
    let maps = t.attn_maps.data();
    let mut dp = vec![0.0; n];
    for h in 0..heads {
        let off = h * hd;
        for i in 0..n {
            let p = &maps[(h * n + i) * n..(h * n + i + 1) * n];
            let dci = &d_ctx.row(i)[off..off + hd];
            for j in 0..n {
                let vj = &t.v.row(j)[off..off + hd];
                dp[j] = dci.iter().zip(vj).map(|(a, b)| a * b).sum();
                let dvj = &mut dv.row_mut(j)[off..off + hd];
                for (o, &g) in dvj.iter_mut().zip(dci) {
                    *o += p[j] * g;
                }
            }
            let inner: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
            for j in 0..n {
                let ds = p[j] * (dp[j] - inner) * scale;
                if ds == 0.0 {
                    continue;
                }
                for c in 0..hd {
                    let kv = t.k.at(j, off + c);
                    let qv = t.q.at(i, off + c);
                    dq.data_mut()[i * d + off + c] += ds * kv;
                    dk.data_mut()[j * d + off + c] += ds * qv;
                }
            }
        }
    }
    Ok((dq, dk, dv))
}

/// Block-wise reconstruction objective over a batch of samples:
/// `mean_b (1/n) Σ_j λ_bj ‖teacher_bj − student_bj‖²`.
#[derive(Clone, Copy)]
pub struct BlockObjective<'a> {
    pub block: &'a ToyBlock,
    pub inputs: &'a [Tensor],
    pub targets: &'a [Tensor],
    pub token_weights: &'a [Vec<f64>],
    pub scheme: QuantScheme,
}

/// Loss, gradients and the quantizer context they were taken at.
pub struct LossAndGrad {
    pub loss: f64,
    pub grads: BlockGrads,
    pub context: RecordedContext,
}

impl<'a> BlockObjective<'a> {
    fn check(&self) -> Result<()> {
        if self.inputs.is_empty()
            || self.inputs.len() != self.targets.len()
            || self.inputs.len() != self.token_weights.len()
        {
            return Err(Error::shape(
                "BlockObjective",
                format!(
                    "{} inputs, {} targets, {} weight vectors",
                    self.inputs.len(),
                    self.targets.len(),
                    self.token_weights.len()
                ),
            ));
        }
        Ok(())
    }

    fn batch_loss(&self, outs: impl Iterator<Item = Result<Tensor>>) -> Result<f64> {
        let mut total = 0.0;
        for (i, out) in outs.enumerate() {
            total += weighted_token_loss(&self.targets[i], &out?, &self.token_weights[i])?;
        }
        Ok(total / self.inputs.len() as f64)
    }

    /// Student outputs under the real (rounding) quantizers.
    pub fn outputs(&self, tf: &BlockTransforms) -> Result<Vec<Tensor>> {
        self.check()?;
        let prepared = prepare(self.block, tf, self.scheme, WeightMode::Record)?;
        self.inputs
            .iter()
            .map(|x| Ok(student_forward(x, self.block, &prepared, self.scheme, None)?.trace.out))
            .collect()
    }

    pub fn loss(&self, tf: &BlockTransforms) -> Result<f64> {
        let outs = self.outputs(tf)?;
        self.batch_loss(outs.into_iter().map(Ok))
    }

    /// Loss of the frozen-context surrogate; equals [`Self::loss`] at the
    /// parameters the context was recorded at.
    pub fn surrogate_loss(&self, tf: &BlockTransforms, ctx: &RecordedContext) -> Result<f64> {
        self.check()?;
        let prepared = prepare(self.block, tf, self.scheme, WeightMode::Frozen(&ctx.weights))?;
        self.batch_loss(self.inputs.iter().enumerate().map(|(i, x)| {
            Ok(
                student_forward(x, self.block, &prepared, self.scheme, Some(&ctx.activations[i]))?
                    .trace
                    .out,
            )
        }))
    }

    /// Loss with fixed (already quantized, transformed) weights per layer.
    pub fn loss_with_fixed_weights(&self, tf: &BlockTransforms, weights: &[Tensor]) -> Result<f64> {
        self.check()?;
        let prepared = prepare(self.block, tf, self.scheme, WeightMode::Fixed(weights))?;
        self.batch_loss(
            self.inputs
                .iter()
                .map(|x| Ok(student_forward(x, self.block, &prepared, self.scheme, None)?.trace.out)),
        )
    }

    /// Transformed, activation-quantized inputs of every linear layer,
    /// stacked over samples (`[B·n × d_in]`), for the GPTQ Hessian.
    pub fn layer_inputs(&self, tf: &BlockTransforms) -> Result<Vec<Tensor>> {
        self.check()?;
        let prepared = prepare(self.block, tf, self.scheme, WeightMode::Record)?;
        let mut stacks: Vec<Vec<f64>> = vec![Vec::new(); LinearKind::ALL.len()];
        let mut rows = 0;
        for x in self.inputs {
            let st = student_forward(x, self.block, &prepared, self.scheme, None)?;
            rows += x.rows();
            for (s, c) in stacks.iter_mut().zip(&st.layers) {
                s.extend_from_slice(c.xq.data());
            }
        }
        stacks
            .into_iter()
            .zip(&prepared)
            .map(|(data, p)| Tensor::new(vec![rows, p.inv_s.len()], data))
            .collect()
    }

    /// Transformed full-precision weights `W · diag(s) · R` per layer.
    pub fn transformed_weights(&self, tf: &BlockTransforms) -> Result<Vec<Tensor>> {
        Ok(prepare(self.block, tf, QuantScheme::disabled(), WeightMode::Record)?
            .into_iter()
            .map(|p| p.wt)
            .collect())
    }

    pub fn loss_and_grad(&self, tf: &BlockTransforms) -> Result<LossAndGrad> {
        self.check()?;
        let prepared = prepare(self.block, tf, self.scheme, WeightMode::Record)?;
        let mut accs: Vec<LayerAccum> = prepared.iter().map(LayerAccum::new).collect();
        let batch = self.inputs.len() as f64;
        let mut total = 0.0;
        let mut act_ctx = Vec::with_capacity(self.inputs.len());
        for (b, x) in self.inputs.iter().enumerate() {
            let st = student_forward(x, self.block, &prepared, self.scheme, None)?;
            let lambda = &self.token_weights[b];
            let target = &self.targets[b];
            total += weighted_token_loss(target, &st.trace.out, lambda)?;

            let n = x.rows();
            let mut dout = st.trace.out.sub(target)?;
            let cols = dout.cols();
            for (row, &w) in dout.data_mut().chunks_mut(cols).zip(lambda) {
                let f = 2.0 * w / (n as f64 * batch);
                row.iter_mut().for_each(|v| *v *= f);
            }
            self.backward_sample(&st, &prepared, &mut accs, dout)?;
            act_ctx.push(st.layers.into_iter().map(|c| c.actx).collect());
        }

        let mut grads = Vec::with_capacity(accs.len());
        for (p, mut acc) in prepared.iter().zip(accs) {
            let d_wt = match &p.wctx {
                Some(ctx) => {
                    let (dwt, dclip) = fake_quant_backward(&acc.d_wq, &p.wt, p.clip_w, ctx);
                    acc.d_clip_w += dclip;
                    dwt
                }
                None => acc.d_wq.clone(),
            };
            acc.d_r.add_assign(&matmul_tn(&p.ws, &d_wt)?)?;
            let dws = matmul_nt(&d_wt, &p.rot.r)?;
            let cols = dws.cols();
            for (drow, wrow) in dws.data().chunks(cols).zip(p.ws.data().chunks(cols)) {
                for ((g, &dw), &w) in acc.d_log_s.iter_mut().zip(drow).zip(wrow) {
                    *g += dw * w;
                }
            }
            let d_a = cayley_backward(&p.rot, &acc.d_r)?;
            grads.push(LayerGrad {
                log_scale: acc.d_log_s,
                skew: skew_grad(&d_a),
                clip_w: acc.d_clip_w,
                clip_a: acc.d_clip_a,
            });
        }
        Ok(LossAndGrad {
            loss: total / batch,
            grads: BlockGrads { layers: grads },
            context: RecordedContext {
                weights: prepared.into_iter().map(|p| p.wctx).collect(),
                activations: act_ctx,
            },
        })
    }

    fn backward_sample(
        &self,
        st: &StudentTrace,
        prepared: &[PreparedLayer],
        accs: &mut [LayerAccum],
        dout: Tensor,
    ) -> Result<()> {
        let t = &st.trace;
        let idx = |k: LinearKind| k.index();
        let mut dx1 = dout.clone();
        let d_act = layer_backward(
            &prepared[idx(LinearKind::Down)],
            &st.layers[idx(LinearKind::Down)],
            &dout,
            &mut accs[idx(LinearKind::Down)],
            true,
        )?
        .expect("input gradient requested");
        let mut d_up = d_act;
        for (g, &u) in d_up.data_mut().iter_mut().zip(t.up.data()) {
            *g *= gelu_grad(u);
        }
        let d_h2 = layer_backward(
            &prepared[idx(LinearKind::Up)],
            &st.layers[idx(LinearKind::Up)],
            &d_up,
            &mut accs[idx(LinearKind::Up)],
            true,
        )?
        .expect("input gradient requested");
        dx1.add_assign(&layer_norm_backward(
            &d_h2,
            &t.h2_hat,
            &t.h2_inv_std,
            &self.block.ln2_gain,
        ))?;
        let d_ctx = layer_backward(
            &prepared[idx(LinearKind::O)],
            &st.layers[idx(LinearKind::O)],
            &dx1,
            &mut accs[idx(LinearKind::O)],
            true,
        )?
        .expect("input gradient requested");
        let (dq, dk, dv) = attention_backward(t, &d_ctx, self.block.heads)?;
        for (kind, g) in [(LinearKind::Q, dq), (LinearKind::K, dk), (LinearKind::V, dv)] {
            layer_backward(
                &prepared[idx(kind)],
                &st.layers[idx(kind)],
                &g,
                &mut accs[idx(kind)],
                false,
            )?;
        }
        Ok(())
    }
}

/// A weight stored either as integer codes or, when weight quantization is
/// disabled, as the transformed float matrix.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum BakedWeight {
    Int(QuantizedTensor),
    Float(Tensor),
}

impl BakedWeight {
    pub fn dequantize(&self) -> Tensor {
        match self {
            BakedWeight::Int(q) => q.dequantize(),
            BakedWeight::Float(t) => t.clone(),
        }
    }
}

/// Deployable quantized block: transforms plus baked weights. Layer norms
/// and the attention core come from the full-precision block.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct QuantizedBlock {
    pub scheme: QuantScheme,
    pub transforms: BlockTransforms,
    /// Indexed by [`LinearKind::index`].
    pub weights: Vec<BakedWeight>,
}

impl QuantizedBlock {
    pub fn forward(&self, x: &Tensor, fp: &ToyBlock) -> Result<(Tensor, Tensor)> {
        let fixed: Vec<Tensor> = self.weights.iter().map(|w| w.dequantize()).collect();
        let prepared = prepare(fp, &self.transforms, self.scheme, WeightMode::Fixed(&fixed))?;
        let st = student_forward(x, fp, &prepared, self.scheme, None)?;
        Ok((st.trace.out, st.trace.attn_maps))
    }
}
