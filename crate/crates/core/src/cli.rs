//! Command-line surface. Every subcommand is a thin orchestration over
//! the library and runs through [`run`], which takes the full argv and a
//! writer, so tests can drive it in process and capture bytes exactly.
//!
//! Exit codes: 0 success, 1 for runtime failures (bad files, invalid
//! configurations, gradient checks over tolerance), 2 for argument
//! errors. The random seed for commands that initialize weights comes
//! from `--seed` when given, else the `FCVIT_SEED` environment variable,
//! else 0.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::analysis;
use crate::data::{generate, ToyDatasetSpec};
use crate::error::{Error, Result};
use crate::gradcheck;
use crate::io::{load_tensor, save_tensor, DynTensor};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;
use crate::train::{evaluate_accuracy, train_toy, TrainConfig};

pub const SEED_ENV: &str = "FCVIT_SEED";

#[derive(Parser)]
#[command(name = "fcvit", about = "FCViT reference models: counts, forwards, training, analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Built-in configuration name (tiny, b12, b24, b48, iso-256-12, iso-384-16, micro).
    #[arg(long, group = "model_source")]
    preset: Option<String>,
    /// JSON configuration file mirroring the ModelConfig fields.
    #[arg(long, group = "model_source")]
    config: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self, default_preset: Option<&str>) -> Result<ModelConfig> {
        let config = if let Some(name) = &self.preset {
            ModelConfig::preset(name).ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "unknown preset {name:?}, expected one of {}",
                    crate::model::PRESET_NAMES.join(", ")
                ))
            })?
        } else if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str(&text)
                .map_err(|e| Error::format(&path.display().to_string(), format!("bad config: {e}")))?
        } else if let Some(name) = default_preset {
            ModelConfig::preset(name).expect("default preset must exist")
        } else {
            return Err(Error::InvalidConfig(
                "pass --preset NAME or --config FILE".to_string(),
            ));
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Print the learnable parameter count.
    Params {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Print per-sample multiply-accumulates at a resolution.
    Flops {
        #[command(flatten)]
        config: ConfigArgs,
        /// Square input resolution.
        #[arg(long, default_value_t = 224)]
        res: usize,
        /// Print the full per-section breakdown as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Run a forward pass and write the logits as a tensor file.
    Forward {
        #[command(flatten)]
        config: ConfigArgs,
        /// Weight file; omitted means seeded random initialization.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Input tensor file, [N, C, H, W] f32.
        #[arg(long)]
        input: PathBuf,
        /// Destination for the [N, classes] logits tensor file.
        #[arg(long)]
        output: PathBuf,
        /// Initialization seed (falls back to FCVIT_SEED, then 0).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare analytic gradients against finite differences.
    Gradcheck {
        #[command(flatten)]
        config: ConfigArgs,
        /// Model parameter coordinates to sample (at least 50).
        #[arg(long, default_value_t = 60)]
        coords: usize,
    },
    /// Train on the procedural toy dataset, logging JSON per step.
    TrainToy {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0.05)]
        weight_decay: f64,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        /// Samples generated per class.
        #[arg(long, default_value_t = 128)]
        per_class: usize,
        /// Pixel noise standard deviation.
        #[arg(long, default_value_t = 0.1)]
        noise_std: f64,
        /// Dataset generation seed.
        #[arg(long, default_value_t = 0)]
        data_seed: u64,
        /// Model initialization seed (falls back to FCVIT_SEED, then 0).
        #[arg(long)]
        seed: Option<u64>,
        /// Save the trained weights here.
        #[arg(long)]
        save: Option<PathBuf>,
    },
    /// Print attention statistics (histogram, consistency) as JSON.
    Analyze {
        /// Attention tensor file; the last axis holds one row of weights.
        #[arg(long)]
        attn: PathBuf,
    },
    /// Write one block's normalized similarity maps as a tensor file.
    ExportSim {
        #[command(flatten)]
        config: ConfigArgs,
        /// Weight file; omitted means seeded random initialization.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Input tensor file, [C, H, W] or [N, C, H, W] f32.
        #[arg(long)]
        input: PathBuf,
        /// Block index, counted consecutively across stages.
        #[arg(long)]
        block: usize,
        /// Mixer repetition; defaults to the final one.
        #[arg(long)]
        rep: Option<usize>,
        /// Destination for the [groups, H, W] maps tensor file.
        #[arg(long)]
        output: PathBuf,
        /// Initialization seed (falls back to FCVIT_SEED, then 0).
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn resolve_seed(flag: Option<u64>) -> Result<u64> {
    if let Some(seed) = flag {
        return Ok(seed);
    }
    match std::env::var(SEED_ENV) {
        Ok(text) => text.parse().map_err(|_| {
            Error::InvalidConfig(format!("{SEED_ENV} must be an unsigned integer, got {text:?}"))
        }),
        Err(_) => Ok(0),
    }
}

fn load_model(
    config: ModelConfig,
    weights: Option<&Path>,
    seed: Option<u64>,
) -> Result<Model<f32>> {
    match weights {
        Some(path) => Model::load(config, path),
        None => Model::init(config, resolve_seed(seed)?),
    }
}

fn load_f32_tensor(path: &Path) -> Result<Tensor<f32>> {
    let dyn_t = load_tensor(path)?;
    let dtype = dyn_t.dtype();
    dyn_t.into_typed::<f32>().ok_or_else(|| {
        Error::format(
            &path.display().to_string(),
            format!("expected an f32 tensor, found {}", dtype.name()),
        )
    })
}

fn execute(command: Command, out: &mut dyn Write) -> Result<i32> {
    match command {
        Command::Params { config } => {
            let config = config.resolve(None)?;
            writeln!(out, "{}", config.count_params())?;
            Ok(0)
        }
        Command::Flops { config, res, json } => {
            let config = config.resolve(None)?;
            let report = config.count_flops(res, res)?;
            if json {
                writeln!(out, "{}", serde_json::to_string(&report)?)?;
            } else {
                writeln!(out, "{}", report.total)?;
            }
            Ok(0)
        }
        Command::Forward { config, weights, input, output, seed } => {
            let config = config.resolve(None)?;
            let model = load_model(config, weights.as_deref(), seed)?;
            let x = load_f32_tensor(&input)?;
            if x.rank() != 4 {
                return Err(Error::shape(
                    "forward",
                    format!("input must be [N, C, H, W], got {:?}", x.shape()),
                ));
            }
            let logits = model.forward_logits(&x)?;
            save_tensor(&output, &logits)?;
            writeln!(
                out,
                "wrote logits {:?} to {}",
                logits.shape(),
                output.display()
            )?;
            Ok(0)
        }
        Command::Gradcheck { config, coords } => {
            let config = config.resolve(Some("micro"))?;
            if config.name != "micro" {
                return Err(Error::InvalidConfig(
                    "gradient checking runs on the micro configuration only".to_string(),
                ));
            }
            let coords = coords.max(50);
            let checks = gradcheck::run_all(coords)?;
            let mut worst: f64 = 0.0;
            for check in &checks {
                writeln!(
                    out,
                    "{}: max rel err {:.3e} over {} coords",
                    check.name, check.max_rel_err, check.checked
                )?;
                worst = worst.max(check.max_rel_err);
            }
            writeln!(out, "max relative error: {worst:.3e}")?;
            Ok(if worst < gradcheck::REL_TOL { 0 } else { 1 })
        }
        Command::TrainToy {
            config,
            steps,
            lr,
            weight_decay,
            batch,
            per_class,
            noise_std,
            data_seed,
            seed,
            save,
        } => {
            let config = config.resolve(Some("micro"))?;
            let mut model = Model::<f32>::init(config, resolve_seed(seed)?)?;
            let data = generate::<f32>(&ToyDatasetSpec { per_class, noise_std, seed: data_seed })?;
            let cfg = TrainConfig { steps, lr, weight_decay, batch_size: batch };
            train_toy(&mut model, &data, &cfg, Some(out))?;
            let accuracy = evaluate_accuracy(&model, &data, cfg.batch_size)?;
            writeln!(
                out,
                "{}",
                serde_json::json!({ "final_train_accuracy": accuracy, "samples": data.len() })
            )?;
            if let Some(path) = save {
                model.save(&path)?;
            }
            Ok(0)
        }
        Command::Analyze { attn } => {
            let stats = match load_tensor(&attn)? {
                DynTensor::F32(t) => analysis::attention_stats(&t)?,
                DynTensor::F64(t) => analysis::attention_stats(&t)?,
            };
            writeln!(out, "{}", serde_json::to_string(&stats)?)?;
            Ok(0)
        }
        Command::ExportSim { config, weights, input, block, rep, output, seed } => {
            let config = config.resolve(None)?;
            let model = load_model(config, weights.as_deref(), seed)?;
            let image = load_f32_tensor(&input)?;
            let export = analysis::export_similarity_maps(&model, &image, block, rep)?;
            save_tensor(&output, &export.maps)?;
            let shape = export.maps.shape();
            writeln!(
                out,
                "{}",
                serde_json::json!({
                    "stage": export.stage,
                    "block_in_stage": export.block_in_stage,
                    "rep": export.rep,
                    "groups": shape[0],
                    "height": shape[1],
                    "width": shape[2],
                    "group_consistency": export.group_consistency,
                    "output": output.display().to_string(),
                })
            )?;
            Ok(0)
        }
    }
}

/// Parses argv (program name included) and runs one subcommand, writing
/// all output to `out`. Returns the process exit code.
pub fn run(args: &[String], out: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = write!(out, "{}", e.render());
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(out, "error: {e}");
            1
        }
    }
}
