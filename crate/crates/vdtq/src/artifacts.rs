//! Manifest and checkpoint files. JSON indexes point at tensor files by
//! paths relative to the index file's directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use vdtq_core::engine::{BakedWeight, BlockTransforms, LayerTransform, QuantScheme, QuantizedBlock, QuantizedModel};
use vdtq_core::quant::{Granularity, QuantSpec, QuantizedTensor};
use vdtq_core::salience::DiffusionTrajectory;
use vdtq_core::toy::{LinearKind, ToyBlock, ToyModel, ToyModelConfig};
use vdtq_core::Tensor;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::tensor_file;

pub const MANIFEST_FORMAT: &str = "vdtq-manifest";
pub const FP_FORMAT: &str = "vdtq-fp-model";
pub const QUANT_FORMAT: &str = "vdtq-quant-model";

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::format(path, e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::format(path, e.to_string()))
}

fn base_dir(index: &Path) -> PathBuf {
    index.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn check_format(path: &Path, found: &str, expected: &str) -> Result<()> {
    if found != expected {
        return Err(CliError::format(
            path,
            format!("expected format {}, found {}", expected, found),
        ));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptEntry {
    pub prompt_id: usize,
    /// One file per timestep, `t = 1..=T` in order.
    pub states: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub seed: u64,
    pub model: String,
    pub tokens: usize,
    pub dim: usize,
    pub timesteps: usize,
    pub prompts: Vec<PromptEntry>,
}

impl Manifest {
    pub fn write_with_trajectories(
        path: &Path,
        model_file: &str,
        cfg: &ToyModelConfig,
        trajs: &[DiffusionTrajectory],
    ) -> Result<Self> {
        let base = base_dir(path);
        let mut prompts = Vec::with_capacity(trajs.len());
        for tr in trajs {
            let mut states = Vec::with_capacity(tr.num_timesteps());
            for t in 1..=tr.num_timesteps() {
                let rel = format!("trajectories/p{:03}/t{:03}.vdtq", tr.prompt_id, t);
                tensor_file::write(&base.join(&rel), tr.state(t))?;
                states.push(rel);
            }
            prompts.push(PromptEntry {
                prompt_id: tr.prompt_id,
                states,
            });
        }
        let m = Manifest {
            format: MANIFEST_FORMAT.into(),
            seed: cfg.seed,
            model: model_file.into(),
            tokens: cfg.tokens(),
            dim: cfg.d,
            timesteps: cfg.timesteps,
            prompts,
        };
        write_json(path, &m)?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: Manifest = read_json(path)?;
        check_format(path, &m.format, MANIFEST_FORMAT)?;
        Ok(m)
    }

    pub fn model_path(&self, manifest_path: &Path) -> PathBuf {
        base_dir(manifest_path).join(&self.model)
    }

    pub fn load_trajectories(&self, manifest_path: &Path) -> Result<Vec<DiffusionTrajectory>> {
        let base = base_dir(manifest_path);
        self.prompts
            .iter()
            .map(|p| {
                if p.states.len() != self.timesteps {
                    return Err(CliError::format(
                        manifest_path,
                        format!(
                            "prompt {} lists {} states, expected {}",
                            p.prompt_id,
                            p.states.len(),
                            self.timesteps
                        ),
                    ));
                }
                let states = p
                    .states
                    .iter()
                    .map(|rel| {
                        let path = base.join(rel);
                        let t = tensor_file::read(&path)?;
                        if t.dims() != [self.tokens, self.dim] {
                            return Err(CliError::format(
                                &path,
                                format!("dims {:?}, expected [{}, {}]", t.dims(), self.tokens, self.dim),
                            ));
                        }
                        Ok(t)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(DiffusionTrajectory::new(p.prompt_id, states)?)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct FpBlockEntry {
    weights: Vec<String>,
    ln1_gain: String,
    ln1_bias: String,
    ln2_gain: String,
    ln2_bias: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct FpIndex {
    format: String,
    config: ToyModelConfig,
    blocks: Vec<FpBlockEntry>,
}

fn vec_tensor(v: &[f64]) -> Tensor {
    Tensor::new(vec![v.len()], v.to_vec()).expect("1-d tensor")
}

fn read_vec(path: &Path, len: usize) -> Result<Vec<f64>> {
    let t = tensor_file::read(path)?;
    if t.dims() != [len] {
        return Err(CliError::format(
            path,
            format!("dims {:?}, expected [{}]", t.dims(), len),
        ));
    }
    Ok(t.into_data())
}

pub fn save_fp_model(path: &Path, model: &ToyModel) -> Result<()> {
    let base = base_dir(path);
    let mut blocks = Vec::with_capacity(model.blocks.len());
    for (l, b) in model.blocks.iter().enumerate() {
        let put = |name: &str, t: &Tensor| -> Result<String> {
            let rel = format!("model/b{}_{}.vdtq", l, name);
            tensor_file::write(&base.join(&rel), t)?;
            Ok(rel)
        };
        let weights = LinearKind::ALL
            .iter()
            .map(|&k| put(k.name(), b.weight(k)))
            .collect::<Result<Vec<_>>>()?;
        blocks.push(FpBlockEntry {
            weights,
            ln1_gain: put("ln1_gain", &vec_tensor(&b.ln1_gain))?,
            ln1_bias: put("ln1_bias", &vec_tensor(&b.ln1_bias))?,
            ln2_gain: put("ln2_gain", &vec_tensor(&b.ln2_gain))?,
            ln2_bias: put("ln2_bias", &vec_tensor(&b.ln2_bias))?,
        });
    }
    write_json(
        path,
        &FpIndex {
            format: FP_FORMAT.into(),
            config: model.config.clone(),
            blocks,
        },
    )
}

pub fn load_fp_model(path: &Path) -> Result<ToyModel> {
    let idx: FpIndex = read_json(path)?;
    check_format(path, &idx.format, FP_FORMAT)?;
    idx.config.validate()?;
    if idx.blocks.len() != idx.config.depth {
        return Err(CliError::format(
            path,
            format!("{} blocks for depth {}", idx.blocks.len(), idx.config.depth),
        ));
    }
    let base = base_dir(path);
    let d = idx.config.d;
    let mut blocks = Vec::with_capacity(idx.blocks.len());
    for e in &idx.blocks {
        if e.weights.len() != LinearKind::ALL.len() {
            return Err(CliError::format(
                path,
                format!("{} weight files per block, expected 6", e.weights.len()),
            ));
        }
        let mut b = ToyBlock::zeros(d, idx.config.heads);
        for (&k, rel) in LinearKind::ALL.iter().zip(&e.weights) {
            let p = base.join(rel);
            let w = tensor_file::read(&p)?;
            if !w.same_dims(b.weight(k)) {
                return Err(CliError::format(
                    &p,
                    format!("dims {:?}, expected {:?}", w.dims(), b.weight(k).dims()),
                ));
            }
            *b.weight_mut(k) = w;
        }
        b.ln1_gain = read_vec(&base.join(&e.ln1_gain), d)?;
        b.ln1_bias = read_vec(&base.join(&e.ln1_bias), d)?;
        b.ln2_gain = read_vec(&base.join(&e.ln2_gain), d)?;
        b.ln2_bias = read_vec(&base.join(&e.ln2_bias), d)?;
        b.validate()?;
        blocks.push(b);
    }
    Ok(ToyModel {
        config: idx.config,
        blocks,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum WeightEntry {
    /// Integer codes stored as float64 plus one step size per output row.
    Int {
        ints: String,
        deltas: String,
    },
    Float {
        weight: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct QuantLayerEntry {
    kind: String,
    log_scale: Vec<f64>,
    skew: Vec<f64>,
    clip_w: f64,
    clip_a: f64,
    a_bits: Option<u8>,
    w_bits: Option<u8>,
    weight: WeightEntry,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct QuantIndex {
    format: String,
    run: RunConfig,
    scheme: QuantScheme,
    blocks: Vec<Vec<QuantLayerEntry>>,
}

/// Quantized model plus the run configuration that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantCheckpoint {
    pub run: RunConfig,
    pub model: QuantizedModel,
}

pub fn save_quant_model(path: &Path, ckpt: &QuantCheckpoint) -> Result<()> {
    let base = base_dir(path);
    let mut blocks = Vec::with_capacity(ckpt.model.blocks.len());
    for (l, qb) in ckpt.model.blocks.iter().enumerate() {
        let mut layers = Vec::with_capacity(LinearKind::ALL.len());
        for &k in &LinearKind::ALL {
            let t = qb.transforms.layer(k);
            let prefix = format!("quant/b{}_{}", l, k.name());
            let weight = match &qb.weights[k.index()] {
                BakedWeight::Int(q) => {
                    let ints = Tensor::new(q.dims().to_vec(), q.ints().iter().map(|&v| v as f64).collect())?;
                    let deltas = vec_tensor(q.deltas());
                    let (ip, dp) = (format!("{}_ints.vdtq", prefix), format!("{}_deltas.vdtq", prefix));
                    tensor_file::write(&base.join(&ip), &ints)?;
                    tensor_file::write(&base.join(&dp), &deltas)?;
                    WeightEntry::Int { ints: ip, deltas: dp }
                }
                BakedWeight::Float(w) => {
                    let wp = format!("{}_weight.vdtq", prefix);
                    tensor_file::write(&base.join(&wp), w)?;
                    WeightEntry::Float { weight: wp }
                }
            };
            layers.push(QuantLayerEntry {
                kind: k.name().into(),
                log_scale: t.log_scale.clone(),
                skew: t.skew.clone(),
                clip_w: t.clip_w,
                clip_a: t.clip_a,
                a_bits: qb.scheme.a_bits,
                w_bits: qb.scheme.w_bits,
                weight,
            });
        }
        blocks.push(layers);
    }
    write_json(
        path,
        &QuantIndex {
            format: QUANT_FORMAT.into(),
            run: ckpt.run.clone(),
            scheme: ckpt.model.scheme,
            blocks,
        },
    )
}

pub fn load_quant_model(path: &Path) -> Result<QuantCheckpoint> {
    let idx: QuantIndex = read_json(path)?;
    check_format(path, &idx.format, QUANT_FORMAT)?;
    let base = base_dir(path);
    let mut blocks = Vec::with_capacity(idx.blocks.len());
    for layers in &idx.blocks {
        if layers.len() != LinearKind::ALL.len() {
            return Err(CliError::format(
                path,
                format!("{} layers per block, expected 6", layers.len()),
            ));
        }
        let mut transforms = Vec::with_capacity(layers.len());
        let mut weights = Vec::with_capacity(layers.len());
        for (&k, e) in LinearKind::ALL.iter().zip(layers) {
            if e.kind != k.name() {
                return Err(CliError::format(
                    path,
                    format!("layer {} where {} was expected", e.kind, k.name()),
                ));
            }
            if e.a_bits != idx.scheme.a_bits || e.w_bits != idx.scheme.w_bits {
                return Err(CliError::format(
                    path,
                    format!("layer {} bit-widths disagree with the scheme", e.kind),
                ));
            }
            transforms.push(LayerTransform {
                log_scale: e.log_scale.clone(),
                skew: e.skew.clone(),
                clip_w: e.clip_w,
                clip_a: e.clip_a,
            });
            weights.push(match (&e.weight, idx.scheme.w_bits) {
                (WeightEntry::Int { ints, deltas }, Some(bits)) => {
                    let it = tensor_file::read(&base.join(ints))?;
                    let dt = tensor_file::read(&base.join(deltas))?;
                    let codes = it
                        .data()
                        .iter()
                        .map(|&v| {
                            if v.fract() == 0.0 && v.abs() <= i32::MAX as f64 {
                                Ok(v as i32)
                            } else {
                                Err(CliError::format(&base.join(ints), format!("non-integer code {}", v)))
                            }
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let spec = QuantSpec::new(bits, Granularity::PerChannel)?.with_clip(e.clip_w)?;
                    BakedWeight::Int(QuantizedTensor::from_parts(
                        it.dims().to_vec(),
                        codes,
                        dt.into_data(),
                        spec,
                    )?)
                }
                (WeightEntry::Float { weight }, None) => BakedWeight::Float(tensor_file::read(&base.join(weight))?),
                _ => {
                    return Err(CliError::format(
                        path,
                        format!("layer {} weight storage does not match the scheme", e.kind),
                    ));
                }
            });
        }
        blocks.push(QuantizedBlock {
            scheme: idx.scheme,
            transforms: BlockTransforms { layers: transforms },
            weights,
        });
    }
    Ok(QuantCheckpoint {
        run: idx.run,
        model: QuantizedModel {
            scheme: idx.scheme,
            blocks,
        },
    })
}
