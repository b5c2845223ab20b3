use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use vdtq::commands::{cmd_calibrate, cmd_eval, cmd_gen, cmd_select};
use vdtq::{Report, Result, RunConfig, OUT_DIR_ENV};
use vdtq_core::engine::DistillMode;
use vdtq_core::salience::{NormChoice, SelectionMode};

#[derive(Parser)]
#[command(
    name = "vdtq",
    version,
    about = "Post-training quantization toolkit for toy video diffusion transformers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, env = OUT_DIR_ENV, default_value = ".")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the toy model and its denoising trajectories.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Score candidate states and pick the calibration set.
    Select {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, value_enum)]
        norm: Option<Norm>,
    },
    /// Calibrate every block and write the quantized checkpoint.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        selection: PathBuf,
        /// Weight bit-width, or `none` to keep weights in float.
        #[arg(long, value_parser = parse_bits)]
        bits_w: Option<Bits>,
        /// Activation bit-width, or `none`.
        #[arg(long, value_parser = parse_bits)]
        bits_a: Option<Bits>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        train_samples: Option<usize>,
        #[arg(long, value_enum)]
        distill: Option<Distill>,
    },
    /// Compare full-precision and quantized model outputs.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        quant: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, env = OUT_DIR_ENV, default_value = ".")]
        out: PathBuf,
    },
    /// Pretty-print a report file.
    Report { path: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Sds,
    Random,
    Atop,
    Atfp,
    Rtfp,
}

#[derive(Clone, Copy, ValueEnum)]
enum Norm {
    Spectral,
    Frobenius,
}

#[derive(Clone, Copy, ValueEnum)]
enum Distill {
    Std,
    Uniform,
}

#[derive(Clone, Copy)]
struct Bits(Option<u8>);

fn parse_bits(s: &str) -> std::result::Result<Bits, String> {
    if s.eq_ignore_ascii_case("none") {
        return Ok(Bits(None));
    }
    s.parse::<u8>()
        .map(|b| Bits(Some(b)))
        .map_err(|e| format!("{}: {}", s, e))
}

fn load_config(common: &Common, edit: impl FnOnce(&mut RunConfig)) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    edit(&mut cfg);
    cfg.resolved()
}

fn run(cli: Cli) -> Result<Option<Report>> {
    let report = match cli.command {
        Command::Gen { common } => {
            let cfg = load_config(&common, |_| {})?;
            cmd_gen(&cfg, &common.out)?
        }
        Command::Select {
            common,
            manifest,
            mode,
            k,
            norm,
        } => {
            let cfg = load_config(&common, |c| {
                if let Some(m) = mode {
                    c.selection_mode = match m {
                        Mode::Sds => SelectionMode::Sds,
                        Mode::Random => SelectionMode::Random,
                        Mode::Atop => SelectionMode::Atop,
                        Mode::Atfp => SelectionMode::Atfp,
                        Mode::Rtfp => SelectionMode::Rtfp,
                    };
                }
                if let Some(k) = k {
                    c.k_select = k;
                }
                if let Some(n) = norm {
                    c.norm_choice = match n {
                        Norm::Spectral => NormChoice::Spectral,
                        Norm::Frobenius => NormChoice::Frobenius,
                    };
                }
            })?;
            cmd_select(&cfg, &manifest, &common.out)?
        }
        Command::Calibrate {
            common,
            manifest,
            selection,
            bits_w,
            bits_a,
            epochs,
            train_samples,
            distill,
        } => {
            let cfg = load_config(&common, |c| {
                if let Some(b) = bits_w {
                    c.bits_w = b.0;
                }
                if let Some(b) = bits_a {
                    c.bits_a = b.0;
                }
                if let Some(e) = epochs {
                    c.epochs = e;
                }
                if let Some(t) = train_samples {
                    c.train_samples = t;
                }
                if let Some(d) = distill {
                    c.distill_mode = match d {
                        Distill::Std => DistillMode::Std,
                        Distill::Uniform => DistillMode::Uniform,
                    };
                }
            })?;
            cmd_calibrate(&cfg, &manifest, &selection, &common.out)?
        }
        Command::Eval {
            model,
            quant,
            manifest,
            out,
        } => cmd_eval(&model, &quant, &manifest, &out)?,
        Command::Report { path } => {
            let r: Report = vdtq::artifacts::read_json(&path)?;
            print!("{}", r.render());
            return Ok(None);
        }
    };
    Ok(Some(report))
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(Some(report)) => {
            print!("{}", report.render());
            ExitCode::SUCCESS
        }
        Ok(None) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("vdtq: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
