//! A miniature video diffusion transformer: pre-LN attention + MLP blocks on
//! `n = spatial × temporal` token sequences, and a synthetic denoising
//! trajectory generator.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::attention::{attention_heads, check_heads, AttentionWeights};
use crate::error::{Error, Result};
use crate::salience::DiffusionTrajectory;
use crate::tensor::{matmul_nt, Tensor};

pub const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct ToyModelConfig {
    pub depth: usize,
    pub d: usize,
    pub heads: usize,
    pub spatial: usize,
    pub temporal: usize,
    pub timesteps: usize,
    pub prompts: usize,
    /// Multiplier on the query/key projections; 0 gives uniform attention.
    pub attn_sharpen: f64,
    /// Channels of the synthetic latents carrying large-magnitude outliers.
    pub outlier_channels: usize,
    pub outlier_gain: f64,
    pub schedule: Schedule,
    pub seed: u64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        ToyModelConfig {
            depth: 2,
            d: 32,
            heads: 4,
            spatial: 16,
            temporal: 4,
            timesteps: 12,
            prompts: 10,
            attn_sharpen: 4.0,
            outlier_channels: 2,
            outlier_gain: 6.0,
            schedule: Schedule::SteepBand {
                center: 6.5,
                width: 0.75,
            },
            seed: 7,
        }
    }
}

impl ToyModelConfig {
    pub fn tokens(&self) -> usize {
        self.spatial * self.temporal
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.d == 0 || self.tokens() == 0 {
            return Err(Error::Config("depth, d and token count must be positive".into()));
        }
        check_heads(self.d, self.heads)?;
        if self.timesteps < 2 {
            return Err(Error::Config(format!("need T >= 2, got {}", self.timesteps)));
        }
        if self.outlier_channels > self.d {
            return Err(Error::Config("more outlier channels than features".into()));
        }
        Ok(())
    }
}

/// Noise fraction `γ_t` of state `x_t = (1 − γ_t)·signal + γ_t·noise`.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case", tag = "kind"))]
pub enum Schedule {
    Constant {
        gamma: f64,
    },
    /// From pure noise at `t = 1` to pure signal at `t = T`.
    Linear,
    /// Logistic drop from noise to signal centred on `center` (in timestep
    /// units) with the given width.
    SteepBand {
        center: f64,
        width: f64,
    },
}

impl Schedule {
    pub fn gamma(&self, t: usize, total: usize) -> f64 {
        match *self {
            Schedule::Constant { gamma } => gamma,
            Schedule::Linear => (total - t) as f64 / (total - 1) as f64,
            Schedule::SteepBand { center, width } => 1.0 / (1.0 + libm::exp((t as f64 - center) / width)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum LinearKind {
    Q,
    K,
    V,
    O,
    Up,
    Down,
}

impl LinearKind {
    pub const ALL: [LinearKind; 6] = [
        LinearKind::Q,
        LinearKind::K,
        LinearKind::V,
        LinearKind::O,
        LinearKind::Up,
        LinearKind::Down,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            LinearKind::Q => "q",
            LinearKind::K => "k",
            LinearKind::V => "v",
            LinearKind::O => "o",
            LinearKind::Up => "up",
            LinearKind::Down => "down",
        }
    }

    pub fn index(&self) -> usize {
        *self as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ToyBlock {
    pub attn: AttentionWeights,
    /// `[4d × d]`
    pub w_up: Tensor,
    /// `[d × 4d]`
    pub w_down: Tensor,
    pub ln1_gain: Vec<f64>,
    pub ln1_bias: Vec<f64>,
    pub ln2_gain: Vec<f64>,
    pub ln2_bias: Vec<f64>,
    pub heads: usize,
}

impl ToyBlock {
    pub fn dim(&self) -> usize {
        self.attn.wq.cols()
    }

    pub fn weight(&self, kind: LinearKind) -> &Tensor {
        match kind {
            LinearKind::Q => &self.attn.wq,
            LinearKind::K => &self.attn.wk,
            LinearKind::V => &self.attn.wv,
            LinearKind::O => &self.attn.wo,
            LinearKind::Up => &self.w_up,
            LinearKind::Down => &self.w_down,
        }
    }

    pub fn weight_mut(&mut self, kind: LinearKind) -> &mut Tensor {
        match kind {
            LinearKind::Q => &mut self.attn.wq,
            LinearKind::K => &mut self.attn.wk,
            LinearKind::V => &mut self.attn.wv,
            LinearKind::O => &mut self.attn.wo,
            LinearKind::Up => &mut self.w_up,
            LinearKind::Down => &mut self.w_down,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        check_heads(d, self.heads)?;
        let expect = [
            (LinearKind::Q, [d, d]),
            (LinearKind::K, [d, d]),
            (LinearKind::V, [d, d]),
            (LinearKind::O, [d, d]),
            (LinearKind::Up, [4 * d, d]),
            (LinearKind::Down, [d, 4 * d]),
        ];
        for (kind, dims) in expect {
            if self.weight(kind).dims() != dims {
                return Err(Error::shape(
                    "ToyBlock",
                    format!(
                        "{} weight has dims {:?}, expected {:?}",
                        kind.name(),
                        self.weight(kind).dims(),
                        dims
                    ),
                ));
            }
        }
        for v in [&self.ln1_gain, &self.ln1_bias, &self.ln2_gain, &self.ln2_bias] {
            if v.len() != d {
                return Err(Error::shape("ToyBlock", "layer-norm parameter length"));
            }
        }
        Ok(())
    }

    /// Every weight and layer-norm parameter zero.
    pub fn zeros(d: usize, heads: usize) -> Self {
        let sq = Tensor::zeros(&[d, d]);
        ToyBlock {
            attn: AttentionWeights {
                wq: sq.clone(),
                wk: sq.clone(),
                wv: sq.clone(),
                wo: sq,
            },
            w_up: Tensor::zeros(&[4 * d, d]),
            w_down: Tensor::zeros(&[d, 4 * d]),
            ln1_gain: vec![0.0; d],
            ln1_bias: vec![0.0; d],
            ln2_gain: vec![0.0; d],
            ln2_bias: vec![0.0; d],
            heads,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ToyModel {
    pub config: ToyModelConfig,
    pub blocks: Vec<ToyBlock>,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Tensor::matrix(rows, cols, data)
}

pub fn build_toy_model(cfg: &ToyModelConfig) -> Result<ToyModel> {
    cfg.validate()?;
    let d = cfg.d;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let std_d = 1.0 / libm::sqrt(d as f64);
    let std_4d = 1.0 / libm::sqrt(4.0 * d as f64);
    let blocks = (0..cfg.depth)
        .map(|_| ToyBlock {
            attn: AttentionWeights {
                wq: gaussian(&mut rng, d, d, std_d * cfg.attn_sharpen),
                wk: gaussian(&mut rng, d, d, std_d * cfg.attn_sharpen),
                wv: gaussian(&mut rng, d, d, std_d),
                wo: gaussian(&mut rng, d, d, std_d),
            },
            w_up: gaussian(&mut rng, 4 * d, d, std_d),
            w_down: gaussian(&mut rng, d, 4 * d, std_4d),
            ln1_gain: vec![1.0; d],
            ln1_bias: vec![0.0; d],
            ln2_gain: vec![1.0; d],
            ln2_bias: vec![0.0; d],
            heads: cfg.heads,
        })
        .collect();
    Ok(ToyModel {
        config: cfg.clone(),
        blocks,
    })
}

/// Row-wise layer norm. Returns the output, the normalized rows `x̂` and
/// each row's `1/σ`.
pub fn layer_norm(x: &Tensor, gain: &[f64], bias: &[f64]) -> (Tensor, Tensor, Vec<f64>) {
    let (n, d) = (x.rows(), x.cols());
    let mut y = Tensor::zeros(&[n, d]);
    let mut xhat = Tensor::zeros(&[n, d]);
    let mut inv_std = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / libm::sqrt(var + LN_EPS);
        inv_std.push(r);
        for j in 0..d {
            let h = (row[j] - mean) * r;
            xhat.set(i, j, h);
            y.set(i, j, h * gain[j] + bias[j]);
        }
    }
    (y, xhat, inv_std)
}

/// tanh-approximated GELU.
pub fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + libm::tanh(GELU_C * (u + 0.044715 * u * u * u)))
}

pub fn gelu_grad(u: f64) -> f64 {
    let inner = GELU_C * (u + 0.044715 * u * u * u);
    let th = libm::tanh(inner);
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * u * u);
    0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * dinner
}

/// Every intermediate of one block forward pass.
#[derive(Clone, Debug)]
pub struct BlockTrace {
    pub x: Tensor,
    pub h1: Tensor,
    pub h1_hat: Tensor,
    pub h1_inv_std: Vec<f64>,
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub attn_maps: Tensor,
    pub context: Tensor,
    pub attn_out: Tensor,
    pub x1: Tensor,
    pub h2: Tensor,
    pub h2_hat: Tensor,
    pub h2_inv_std: Vec<f64>,
    pub up: Tensor,
    pub act: Tensor,
    pub mlp_out: Tensor,
    pub out: Tensor,
}

/// Block forward with a pluggable linear layer: `linear(kind, input)` must
/// return `input · W_kindᵀ` or its quantized stand-in.
pub fn block_forward_with<F>(x: &Tensor, block: &ToyBlock, mut linear: F) -> Result<BlockTrace>
where
    F: FnMut(LinearKind, &Tensor) -> Result<Tensor>,
{
    let d = block.dim();
    if !x.is_matrix() || x.cols() != d {
        return Err(Error::shape(
            "block_forward",
            format!("input {:?} does not match block width {}", x.dims(), d),
        ));
    }
    let (h1, h1_hat, h1_inv_std) = layer_norm(x, &block.ln1_gain, &block.ln1_bias);
    let q = linear(LinearKind::Q, &h1)?;
    let k = linear(LinearKind::K, &h1)?;
    let v = linear(LinearKind::V, &h1)?;
    let mix = attention_heads(&q, &k, &v, block.heads)?;
    let attn_out = linear(LinearKind::O, &mix.context)?;
    let x1 = x.add(&attn_out)?;
    let (h2, h2_hat, h2_inv_std) = layer_norm(&x1, &block.ln2_gain, &block.ln2_bias);
    let up = linear(LinearKind::Up, &h2)?;
    let act = up.map(gelu);
    let mlp_out = linear(LinearKind::Down, &act)?;
    let out = x1.add(&mlp_out)?;
    Ok(BlockTrace {
        x: x.clone(),
        h1,
        h1_hat,
        h1_inv_std,
        q,
        k,
        v,
        attn_maps: mix.attn_maps,
        context: mix.context,
        attn_out,
        x1,
        h2,
        h2_hat,
        h2_inv_std,
        up,
        act,
        mlp_out,
        out,
    })
}

/// Full-precision block forward.
pub fn block_forward(x: &Tensor, block: &ToyBlock) -> Result<(Tensor, Tensor)> {
    let trace = block_forward_with(x, block, |kind, input| matmul_nt(input, block.weight(kind)))?;
    Ok((trace.out, trace.attn_maps))
}

impl ToyModel {
    /// Runs all blocks; returns each block's output.
    pub fn forward_all(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut outs = Vec::with_capacity(self.blocks.len());
        let mut h = x.clone();
        for b in &self.blocks {
            h = block_forward(&h, b)?.0;
            outs.push(h.clone());
        }
        Ok(outs)
    }
}

/// Deterministic trajectory for one prompt. Signal and noise are drawn from
/// a ChaCha stream keyed by `(seed, prompt_id)`; the signal carries a
/// per-prompt energy scale and a few outlier channels.
pub fn synth_trajectory(prompt_id: usize, cfg: &ToyModelConfig, seed: u64) -> Result<DiffusionTrajectory> {
    cfg.validate()?;
    let (n, d, t_total) = (cfg.tokens(), cfg.d, cfg.timesteps);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(prompt_id as u64 + 1);
    let scale = 0.5 + 1.5 * rand::Rng::random::<f64>(&mut rng);
    let mut signal = gaussian(&mut rng, n, d, scale);
    let noise = gaussian(&mut rng, n, d, 1.0);
    for c in 0..cfg.outlier_channels {
        let ch = (c * 7 + 3) % d;
        for i in 0..n {
            let v = signal.at(i, ch) * cfg.outlier_gain;
            signal.set(i, ch, v);
        }
    }
    let states = (1..=t_total)
        .map(|t| {
            let g = cfg.schedule.gamma(t, t_total);
            signal.scale(1.0 - g).add(&noise.scale(g))
        })
        .collect::<Result<Vec<_>>>()?;
    DiffusionTrajectory::new(prompt_id, states)
}

pub fn synth_trajectories(cfg: &ToyModelConfig, seed: u64) -> Result<Vec<DiffusionTrajectory>> {
    (0..cfg.prompts).map(|p| synth_trajectory(p, cfg, seed)).collect()
}
