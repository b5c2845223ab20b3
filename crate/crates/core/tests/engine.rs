use vdtq_core::engine::transform::apply_transform_fp;
use vdtq_core::engine::{
    calibrate_block, calibrate_model, BakedWeight, BlockBatch, BlockTransforms, DistillMode, QuantScheme,
    QuantizedBlock, TrainConfig,
};
use vdtq_core::quant::{fake_quantize, rtn_quantize_weight, Granularity, QuantSpec};
use vdtq_core::salience::DiffusionTrajectory;
use vdtq_core::tensor::matmul_nt;
use vdtq_core::toy::{
    block_forward, block_forward_with, build_toy_model, synth_trajectories, LinearKind, ToyModel, ToyModelConfig,
};
use vdtq_core::Tensor;

fn fixture(cfg: &ToyModelConfig) -> (ToyModel, Vec<Tensor>) {
    let model = build_toy_model(cfg).unwrap();
    let states = synth_trajectories(cfg, cfg.seed)
        .unwrap()
        .iter()
        .flat_map(|t: &DiffusionTrajectory| t.states()[1..].to_vec())
        .collect();
    (model, states)
}

fn small_cfg() -> ToyModelConfig {
    ToyModelConfig {
        d: 16,
        heads: 2,
        spatial: 8,
        temporal: 2,
        timesteps: 6,
        prompts: 4,
        ..ToyModelConfig::default()
    }
}

#[test]
fn quantized_block_matches_step_by_step_composition() {
    let cfg = small_cfg();
    let (model, xs) = fixture(&cfg);
    let block = &model.blocks[0];
    let mut tf = BlockTransforms::identity(block);
    for (i, l) in tf.layers.iter_mut().enumerate() {
        l.log_scale
            .iter_mut()
            .enumerate()
            .for_each(|(j, v)| *v = 0.1 * ((i + j) as f64).sin());
        l.skew
            .iter_mut()
            .enumerate()
            .for_each(|(j, v)| *v = 0.05 * ((i * 7 + j) as f64).cos());
        l.clip_w = 0.9;
        l.clip_a = 0.8;
    }
    let weights: Vec<BakedWeight> = LinearKind::ALL
        .iter()
        .map(|&k| {
            let t = tf.layer(k);
            let (_, wt) = apply_transform_fp(&Tensor::zeros(&[1, t.dim()]), block.weight(k), t).unwrap();
            let spec = QuantSpec::new(4, Granularity::PerChannel)
                .unwrap()
                .with_clip(t.clip_w)
                .unwrap();
            BakedWeight::Int(rtn_quantize_weight(&wt, &spec).unwrap())
        })
        .collect();
    let qb = QuantizedBlock {
        scheme: QuantScheme::new(4, 6).unwrap(),
        transforms: tf.clone(),
        weights: weights.clone(),
    };
    for x in xs.iter().take(3) {
        let (ours, _) = qb.forward(x, block).unwrap();
        let oracle = block_forward_with(x, block, |kind, input| {
            let t = tf.layer(kind);
            let (xt, _) = apply_transform_fp(input, block.weight(kind), t).unwrap();
            let spec = QuantSpec::new(6, Granularity::PerToken)
                .unwrap()
                .with_clip(t.clip_a)
                .unwrap();
            let xq = fake_quantize(&xt, &spec).unwrap();
            matmul_nt(&xq, &weights[kind.index()].dequantize())
        })
        .unwrap()
        .out;
        assert!(ours.max_abs_diff(&oracle).unwrap() < 1e-10);
    }
}

#[test]
fn error_accumulates_across_blocks_at_w4a4() {
    let cfg = ToyModelConfig::default();
    let (model, xs) = fixture(&cfg);
    let train = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let r = calibrate_model(&model, &xs[..30], &[], QuantScheme::new(4, 4).unwrap(), &train).unwrap();
    assert!(r.blocks[1].initial_loss > r.blocks[0].initial_loss);
}

#[test]
fn single_block_model_equals_calibrate_block() {
    let cfg = ToyModelConfig {
        depth: 1,
        ..small_cfg()
    };
    let (model, xs) = fixture(&cfg);
    let train = TrainConfig {
        epochs: 3,
        ..TrainConfig::default()
    };
    let scheme = QuantScheme::new(4, 4).unwrap();
    let seq = calibrate_model(&model, &xs[..6], &[], scheme, &train).unwrap();
    let mut targets = Vec::new();
    let mut lambdas = Vec::new();
    for x in &xs[..6] {
        let (out, maps) = block_forward(x, &model.blocks[0]).unwrap();
        targets.push(out);
        lambdas.push(train.token_weights(&maps).unwrap().lambda);
    }
    let batch = BlockBatch {
        inputs: &xs[..6],
        targets: &targets,
        token_weights: &lambdas,
    };
    let direct = calibrate_block(0, &model.blocks[0], &batch, None, scheme, &train).unwrap();
    assert_eq!(seq.blocks[0], direct);
}

#[test]
fn unit_token_weights_reproduce_uniform_run_bit_for_bit() {
    let cfg = small_cfg();
    let (model, xs) = fixture(&cfg);
    let scheme = QuantScheme::new(4, 4).unwrap();
    let collapsed = TrainConfig {
        epochs: 4,
        lambda_min: 1.0,
        lambda_max: 1.0,
        ..TrainConfig::default()
    };
    let uniform = TrainConfig {
        distill: DistillMode::Uniform,
        ..collapsed
    };
    let a = calibrate_model(&model, &xs, &[], scheme, &collapsed).unwrap();
    let b = calibrate_model(&model, &xs, &[], scheme, &uniform).unwrap();
    assert_eq!(a, b);
}

#[test]
fn disabled_quantization_has_zero_loss_in_every_block() {
    let cfg = small_cfg();
    let (model, xs) = fixture(&cfg);
    let r = calibrate_model(&model, &xs[..4], &[], QuantScheme::disabled(), &TrainConfig::default()).unwrap();
    for b in &r.blocks {
        assert!(b.loss_curve.iter().all(|&l| l < 1e-20));
        assert!(b.baked_loss < 1e-20);
    }
}

#[test]
fn default_block_at_w4a6_strictly_improves() {
    let cfg = ToyModelConfig {
        depth: 1,
        ..ToyModelConfig::default()
    };
    let (model, xs) = fixture(&cfg);
    let r = calibrate_model(
        &model,
        &xs[..30],
        &[],
        QuantScheme::new(4, 6).unwrap(),
        &TrainConfig::default(),
    )
    .unwrap();
    let b = &r.blocks[0];
    assert_eq!(b.loss_curve.len(), 16);
    assert!(b.final_loss < b.initial_loss);
}

#[test]
fn divergence_reports_block_and_epoch() {
    let cfg = small_cfg();
    let (model, xs) = fixture(&cfg);
    let wild = TrainConfig {
        epochs: 5,
        lr_transform: 1e3,
        ..TrainConfig::default()
    };
    match calibrate_model(&model, &xs[..4], &[], QuantScheme::new(4, 4).unwrap(), &wild) {
        Err(vdtq_core::Error::Training { block, epoch, .. }) => {
            assert_eq!(block, 0);
            assert!((1..5).contains(&epoch));
        }
        other => panic!("expected a training error, got {:?}", other.map(|r| r.blocks.len())),
    }
}
