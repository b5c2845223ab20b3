use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use vdtq::artifacts::{load_fp_model, load_quant_model, read_json, Manifest};
use vdtq::commands::{cmd_calibrate, cmd_eval, cmd_gen, cmd_select, QUANT_FILE, SELECTION_FILE};
use vdtq::pipeline::build_fixture;
use vdtq::{tensor_file, Report, RunConfig, OUT_DIR_ENV};
use vdtq_core::engine::{BakedWeight, BlockObjective, BlockTransforms, QuantScheme};
use vdtq_core::gptq::gptq_quantize_weight;
use vdtq_core::quant::{Granularity, QuantSpec};
use vdtq_core::salience::SelectionMode;
use vdtq_core::toy::{block_forward, LinearKind};

fn vdtq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vdtq"))
        .args(args)
        .env_remove(OUT_DIR_ENV)
        .output()
        .unwrap()
}

fn small() -> RunConfig {
    let mut cfg = RunConfig {
        k_select: 12,
        train_samples: 8,
        epochs: 3,
        ..RunConfig::default()
    };
    cfg.model.prompts = 4;
    cfg.model.timesteps = 6;
    cfg.model.d = 16;
    cfg.model.heads = 2;
    cfg.model.spatial = 8;
    cfg.resolved().unwrap()
}

fn write_cfg(dir: &Path, cfg: &RunConfig) -> String {
    let p = dir.join("config.json");
    fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn gen_writes_manifest_and_bit_exact_tensors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small();
    cmd_gen(&cfg, dir.path()).unwrap();
    let manifest_path = dir.path().join("manifest.json");
    let m = Manifest::load(&manifest_path).unwrap();
    let files: usize = m.prompts.iter().map(|p| p.states.len()).sum();
    assert_eq!(files, cfg.model.prompts * cfg.model.timesteps);
    let (model, trajs) = build_fixture(&cfg).unwrap();
    let loaded = m.load_trajectories(&manifest_path).unwrap();
    for (a, b) in trajs.iter().zip(&loaded) {
        for (x, y) in a.states().iter().zip(b.states()) {
            assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }
    assert_eq!(load_fp_model(&m.model_path(&manifest_path)).unwrap(), model);
    let raw = fs::read(dir.path().join(&m.prompts[1].states[2])).unwrap();
    assert_eq!(&raw[..4], b"VDTQ");
    assert_eq!(tensor_file::decode(&raw).unwrap(), trajs[1].state(3).clone());
}

#[test]
fn quant_checkpoint_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small();
    cmd_gen(&cfg, dir.path()).unwrap();
    let manifest = dir.path().join("manifest.json");
    cmd_select(&cfg, &manifest, dir.path()).unwrap();
    for (bw, ba) in [(Some(4), Some(6)), (None, Some(8)), (None, None)] {
        let run = RunConfig {
            bits_w: bw,
            bits_a: ba,
            ..cfg.clone()
        };
        let out = dir.path().join(format!("{:?}{:?}", bw, ba));
        cmd_calibrate(&run, &manifest, &dir.path().join(SELECTION_FILE), &out).unwrap();
        let ckpt = load_quant_model(&out.join(QUANT_FILE)).unwrap();
        assert_eq!(ckpt.run, run);
        let (model, trajs) = build_fixture(&cfg).unwrap();
        let sel: Report = read_json(&dir.path().join(SELECTION_FILE)).unwrap();
        let (cal, _) =
            vdtq::pipeline::run_calibration(&run, &model, &trajs, &sel.selection.unwrap(), QUANT_FILE).unwrap();
        assert_eq!(ckpt.model, cal.model);
    }
}

#[test]
fn zero_epochs_bakes_identity_transforms_with_gptq() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig { epochs: 0, ..small() };
    cmd_gen(&cfg, dir.path()).unwrap();
    let manifest = dir.path().join("manifest.json");
    let sel = cmd_select(&cfg, &manifest, dir.path()).unwrap().selection.unwrap();
    cmd_calibrate(&cfg, &manifest, &dir.path().join(SELECTION_FILE), dir.path()).unwrap();
    let ckpt = load_quant_model(&dir.path().join(QUANT_FILE)).unwrap();

    let (model, trajs) = build_fixture(&cfg).unwrap();
    let mut xs = vdtq::pipeline::lookup_states(&trajs, &sel.selected[..cfg.train_samples]).unwrap();
    let scheme = cfg.scheme().unwrap();
    for (l, block) in model.blocks.iter().enumerate() {
        let qb = &ckpt.model.blocks[l];
        assert_eq!(qb.transforms, BlockTransforms::identity(block));
        let targets: Vec<_> = xs.iter().map(|x| block_forward(x, block).unwrap().0).collect();
        let lambdas = vec![vec![1.0; cfg.model.tokens()]; xs.len()];
        let obj = BlockObjective {
            block,
            inputs: &xs,
            targets: &targets,
            token_weights: &lambdas,
            scheme,
        };
        let hs = obj.layer_inputs(&qb.transforms).unwrap();
        for &k in &LinearKind::ALL {
            let spec = QuantSpec::new(4, Granularity::PerChannel).unwrap();
            let expect = gptq_quantize_weight(block.weight(k), &hs[k.index()], &spec, cfg.damp_frac).unwrap();
            assert_eq!(qb.weights[k.index()], BakedWeight::Int(expect));
        }
        xs = xs.iter().map(|x| qb.forward(x, block).unwrap().0).collect();
    }
}

#[test]
fn disabled_quantization_evaluates_as_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        bits_w: None,
        bits_a: None,
        ..small()
    };
    cmd_gen(&cfg, dir.path()).unwrap();
    let manifest = dir.path().join("manifest.json");
    cmd_select(&cfg, &manifest, dir.path()).unwrap();
    cmd_calibrate(&cfg, &manifest, &dir.path().join(SELECTION_FILE), dir.path()).unwrap();
    let r = cmd_eval(
        &dir.path().join("model.json"),
        &dir.path().join(QUANT_FILE),
        &manifest,
        dir.path(),
    )
    .unwrap();
    assert_eq!(r.config, cfg);
    assert_eq!(r.seed, cfg.seed);
    let e = r.eval.unwrap();
    assert_eq!(e.samples.len(), cfg.model.prompts * (cfg.model.timesteps - 1));
    for s in &e.samples {
        assert!(s.mse <= 1e-12);
        assert!(s.cosine >= 1.0 - 1e-12);
    }
    assert_eq!(e.sparsity.len(), cfg.model.depth);
}

#[test]
fn selection_modes_follow_their_definitions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small();
    cmd_gen(&cfg, dir.path()).unwrap();
    let manifest = dir.path().join("manifest.json");
    let t = cfg.model.timesteps;
    let atop = RunConfig {
        selection_mode: SelectionMode::Atop,
        k_select: t - 1,
        train_samples: t - 1,
        ..cfg.clone()
    };
    let sel = cmd_select(&atop, &manifest, dir.path()).unwrap().selection.unwrap();
    assert!(sel.selected.iter().all(|r| r.prompt_id == 0));
    assert_eq!(
        sel.selected.iter().map(|r| r.timestep).collect::<Vec<_>>(),
        (2..=t).collect::<Vec<_>>()
    );
    assert_eq!(sel.scores.len(), cfg.model.prompts * (t - 1));

    let rtfp = RunConfig {
        selection_mode: SelectionMode::Rtfp,
        ..cfg.clone()
    };
    let a = cmd_select(&rtfp, &manifest, &dir.path().join("r1")).unwrap();
    let b = cmd_select(&rtfp, &manifest, &dir.path().join("r2")).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        fs::read(dir.path().join("r1").join(SELECTION_FILE)).unwrap(),
        fs::read(dir.path().join("r2").join(SELECTION_FILE)).unwrap()
    );
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();

    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"bits_w\": 4, \"unknown\": 1}").unwrap();
    assert_eq!(
        vdtq(&["gen", "--config", bad.to_str().unwrap(), "--out", d])
            .status
            .code(),
        Some(2)
    );

    let missing = format!("{}/nope/manifest.json", d);
    assert_eq!(
        vdtq(&["select", "--manifest", &missing, "--out", d]).status.code(),
        Some(4)
    );

    let cfg = write_cfg(dir.path(), &small());
    assert!(vdtq(&["gen", "--config", &cfg, "--out", d]).status.success());
    let manifest = format!("{}/manifest.json", d);
    let out = vdtq(&[
        "select",
        "--config",
        &cfg,
        "--manifest",
        &manifest,
        "--k",
        "1000",
        "--out",
        d,
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("20 candidates"));

    assert!(vdtq(&["select", "--config", &cfg, "--manifest", &manifest, "--out", d])
        .status
        .success());
    let mut wild = small();
    wild.lr_transform = 1e3;
    let wild_cfg = dir.path().join("wild.json");
    fs::write(&wild_cfg, serde_json::to_string(&wild).unwrap()).unwrap();
    let sel = format!("{}/selection.json", d);
    let out = vdtq(&[
        "calibrate",
        "--config",
        wild_cfg.to_str().unwrap(),
        "--manifest",
        &manifest,
        "--selection",
        &sel,
        "--out",
        d,
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("block 0"));
}

#[test]
fn eval_rejects_mismatched_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small();
    let other = RunConfig {
        seed: cfg.seed + 1,
        ..cfg.clone()
    }
    .resolved()
    .unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    cmd_gen(&cfg, &a).unwrap();
    cmd_gen(&other, &b).unwrap();
    cmd_select(&other, &b.join("manifest.json"), &b).unwrap();
    cmd_calibrate(&other, &b.join("manifest.json"), &b.join(SELECTION_FILE), &b).unwrap();
    let err = cmd_eval(&a.join("model.json"), &b.join(QUANT_FILE), &a.join("manifest.json"), &a).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn env_var_sets_output_dir_and_flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), &small());
    let out_dir = dir.path().join("from-env");
    let status = Command::new(env!("CARGO_BIN_EXE_vdtq"))
        .args(["gen", "--config", &cfg, "--seed", "3"])
        .env(OUT_DIR_ENV, &out_dir)
        .status()
        .unwrap();
    assert!(status.success());
    let r: Report = read_json(&out_dir.join("gen_report.json")).unwrap();
    assert_eq!(r.seed, 3);
    assert_eq!(r.config.model.seed, 3);

    let shown = vdtq(&["report", out_dir.join("gen_report.json").to_str().unwrap()]);
    assert!(shown.status.success());
    assert!(String::from_utf8_lossy(&shown.stdout).starts_with("gen report  seed 3"));
}

#[test]
fn calibrate_flags_override_bits() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let cfg = write_cfg(dir.path(), &small());
    let manifest = format!("{}/manifest.json", d);
    assert!(vdtq(&["gen", "--config", &cfg, "--out", d]).status.success());
    assert!(vdtq(&["select", "--config", &cfg, "--manifest", &manifest, "--out", d])
        .status
        .success());
    let sel = format!("{}/selection.json", d);
    let out = vdtq(&[
        "calibrate",
        "--config",
        &cfg,
        "--manifest",
        &manifest,
        "--selection",
        &sel,
        "--bits-w",
        "none",
        "--bits-a",
        "8",
        "--epochs",
        "1",
        "--out",
        d,
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r: Report = read_json(&dir.path().join("calibration_report.json")).unwrap();
    assert_eq!(r.config.bits_w, None);
    assert_eq!(r.config.epochs, 1);
    let c = r.calibration.unwrap();
    assert_eq!(
        c.scheme,
        QuantScheme {
            w_bits: None,
            a_bits: Some(8)
        }
    );
    assert!(c.blocks.iter().all(|b| b.loss_curve.len() == 2));
}
