//! `bdfw` — train, attack, purify, and evaluate from the command line.

use anyhow::{bail, Context, Result};
use bdfw_core::config::{RunConfig, DATA_DIR_ENV};
use bdfw_core::data::Dataset;
use bdfw_core::decleaner::{purify_stage2, train_decleaner, DecleanerLossWeights, DecleanerNet};
use bdfw_core::diffusion::{
    default_schedule, purify_stage3, purify_stage3_ddim, train_predictor, DdpmTrainConfig,
    NoisePredictor,
};
use bdfw_core::harness::{
    ablate, benchmark_inference, prepare_experiment, run_experiment, AblationMode,
    ExperimentOptions,
};
use bdfw_core::inpainter::{compose_stage1, train_inpainter, InpainterNet};
use bdfw_core::locator::{
    locate, train_locator, LocatorLossWeights, LocatorNet, SurrogateTrainConfig,
};
use bdfw_core::pipeline::{purify_stream, PipelineModels};
use bdfw_core::rng::RngStream;
use bdfw_core::tensor::{clamp01, ImageTensor};
use bdfw_core::victim::{poison_dataset, train_victim, PoisonPlan, TrainConfig, VictimConfig};
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "bdfw", version, about = "Black-box backdoor purification toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Run configuration TOML.
    #[arg(long, default_value = "run.toml")]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Dataset utilities.
    Data {
        #[command(subcommand)]
        cmd: DataCmd,
    },
    /// Victim model utilities.
    Victim {
        #[command(subcommand)]
        cmd: VictimCmd,
    },
    /// Stage I: trigger localization and inpainting.
    Stage1 {
        #[command(subcommand)]
        cmd: Stage1Cmd,
    },
    /// Stage II: trigger reconstruction and subtraction.
    Stage2 {
        #[command(subcommand)]
        cmd: Stage2Cmd,
    },
    /// Stage III: diffusion purification.
    Stage3 {
        #[command(subcommand)]
        cmd: Stage3Cmd,
    },
    /// Run the configured pipeline over a directory of PNGs.
    Purify {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Input directory of PNG images.
        #[arg(long = "in")]
        input: PathBuf,
        /// Output directory for purified PNGs.
        #[arg(long = "out")]
        output: PathBuf,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
    },
    /// Train/load everything and report CA/PA/ASR.
    Eval {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Export masks, reconstructions, and purified samples as PNGs.
        #[arg(long)]
        dump_artifacts: bool,
    },
    /// Evaluate stage orderings or toggle subsets.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long, value_parser = ["orders", "toggles"])]
        mode: String,
    },
    /// Median purification wall time per batch size.
    Bench {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 64, 128])]
        batch_sizes: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        runs: usize,
    },
}

#[derive(Subcommand)]
enum DataCmd {
    /// Materialize the configured dataset and write a summary.
    Prepare {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Also export the first N images per split as PNGs.
        #[arg(long, default_value_t = 0)]
        samples: usize,
    },
}

#[derive(Subcommand)]
enum VictimCmd {
    /// Poison the train split and train the victim classifier.
    Train {
        #[command(flatten)]
        cfg: ConfigArg,
    },
}

#[derive(Subcommand)]
enum Stage1Cmd {
    /// Train the trigger locator on surrogate patches.
    TrainLocator {
        #[command(flatten)]
        cfg: ConfigArg,
    },
    /// Train the inpainter on surrogate patches.
    TrainInpainter {
        #[command(flatten)]
        cfg: ConfigArg,
    },
    /// Predict the clean mask for one image.
    Locate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long = "out")]
        output: PathBuf,
    },
    /// Locate, inpaint, and recompose one image.
    Inpaint {
        #[arg(long)]
        locator: PathBuf,
        #[arg(long)]
        inpainter: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long = "out")]
        output: PathBuf,
    },
}

#[derive(Subcommand)]
enum Stage2Cmd {
    /// Train the de-cleaner on surrogate blends.
    Train {
        #[command(flatten)]
        cfg: ConfigArg,
    },
    /// Subtract the reconstructed trigger from one image.
    Purify {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long = "out")]
        output: PathBuf,
        /// Also write the reconstructed trigger, 3x amplified.
        #[arg(long)]
        dump_trigger: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum Stage3Cmd {
    /// Train the diffusion noise predictor on clean data.
    TrainDdpm {
        #[command(flatten)]
        cfg: ConfigArg,
    },
    /// Noise-and-denoise one image.
    Purify {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long = "out")]
        output: PathBuf,
        #[arg(long, default_value_t = 20)]
        steps: usize,
        #[arg(long, value_parser = ["ddpm", "ddim"], default_value = "ddpm")]
        sampler: String,
        #[arg(long, default_value_t = 5)]
        ddim_steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path).with_context(|| format!("loading config {}", path.display()))
}

fn ckpt_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.output_dir.join("checkpoints");
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn train_split(cfg: &RunConfig) -> Result<Dataset> {
    let (train, _) = cfg.data.load()?;
    Ok(train)
}

fn surrogate_cfg(cfg: &RunConfig, epochs: usize) -> SurrogateTrainConfig {
    SurrogateTrainConfig {
        epochs,
        batch_size: cfg.defense.batch_size,
        lr: cfg.defense.lr,
        weight_decay: 0.0,
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Data { cmd } => match cmd {
            DataCmd::Prepare { cfg, samples } => {
                let cfg = load_config(&cfg.config)?;
                let (train, test) = cfg.data.load()?;
                let summary = serde_json::json!({
                    "train": train.len(),
                    "test": test.len(),
                    "num_classes": train.num_classes,
                    "image_shape": train.image_shape(),
                    "class_counts": train.class_counts(),
                    "data_dir_env": std::env::var(DATA_DIR_ENV).ok(),
                });
                std::fs::create_dir_all(&cfg.output_dir)?;
                let path = cfg.output_dir.join("dataset.json");
                std::fs::write(&path, serde_json::to_string_pretty(&summary)?)?;
                for (split, ds) in [("train", &train), ("test", &test)] {
                    for (i, r) in ds.records.iter().take(samples).enumerate() {
                        r.image
                            .save_png(&cfg.output_dir.join(format!("{split}{i}.png")))?;
                    }
                }
                println!("{summary}");
                println!("wrote {}", path.display());
            }
        },
        Command::Victim { cmd } => match cmd {
            VictimCmd::Train { cfg } => {
                let cfg = load_config(&cfg.config)?;
                let train = train_split(&cfg)?;
                let (_, h, w) = train.image_shape();
                let plan = PoisonPlan {
                    trigger: cfg.attack.to_spec(h, w)?,
                    poison_rate: cfg.attack.poison_rate,
                };
                let seed = cfg.data.seed;
                let poisoned =
                    poison_dataset(&train, &plan, &mut RngStream::new(seed, "poison"))?;
                let mut model = train_victim(
                    &poisoned,
                    &VictimConfig {
                        num_classes: cfg.data.num_classes,
                        width: cfg.victim.width,
                        blocks_per_stage: cfg.victim.blocks_per_stage,
                    },
                    &TrainConfig {
                        epochs: cfg.victim.epochs,
                        batch_size: cfg.victim.batch_size,
                        lr: cfg.victim.lr,
                        weight_decay: cfg.victim.weight_decay,
                        augment_noise: cfg.victim.augment_noise,
                    },
                    &mut RngStream::new(seed, "victim"),
                )?;
                let path = ckpt_dir(&cfg)?.join("victim.ckpt");
                model.save(&path)?;
                println!("wrote {}", path.display());
            }
        },
        Command::Stage1 { cmd } => match cmd {
            Stage1Cmd::TrainLocator { cfg } => {
                let cfg = load_config(&cfg.config)?;
                let train = train_split(&cfg)?;
                let mut net = train_locator(
                    &train,
                    &surrogate_cfg(&cfg, cfg.defense.stage1_epochs),
                    LocatorLossWeights::default(),
                    cfg.defense.locator_width,
                    &mut RngStream::new(cfg.data.seed, "locator"),
                )?;
                let path = ckpt_dir(&cfg)?.join("locator.ckpt");
                net.save(&path)?;
                println!("wrote {}", path.display());
            }
            Stage1Cmd::TrainInpainter { cfg } => {
                let cfg = load_config(&cfg.config)?;
                let train = train_split(&cfg)?;
                let mut net = train_inpainter(
                    &train,
                    &surrogate_cfg(&cfg, cfg.defense.stage1_epochs),
                    cfg.defense.inpainter_width,
                    &mut RngStream::new(cfg.data.seed, "inpainter"),
                )?;
                let path = ckpt_dir(&cfg)?.join("inpainter.ckpt");
                net.save(&path)?;
                println!("wrote {}", path.display());
            }
            Stage1Cmd::Locate { ckpt, image, output } => {
                let mut net = LocatorNet::load(&ckpt)?;
                let x = ImageTensor::load_png(&image)?;
                let mask = locate(&mut net, &x);
                mask.save_png(&output)?;
                println!(
                    "clean mask: {} of {} pixels flagged as trigger",
                    mask.complement().sum() as usize,
                    mask.height() * mask.width()
                );
            }
            Stage1Cmd::Inpaint {
                locator,
                inpainter,
                image,
                output,
            } => {
                let mut loc = LocatorNet::load(&locator)?;
                let mut inp = InpainterNet::load(&inpainter)?;
                let x = ImageTensor::load_png(&image)?;
                let mask = locate(&mut loc, &x);
                let out = compose_stage1(&x, &mask, &mut inp)?;
                out.save_png(&output)?;
                println!("wrote {}", output.display());
            }
        },
        Command::Stage2 { cmd } => match cmd {
            Stage2Cmd::Train { cfg } => {
                let cfg = load_config(&cfg.config)?;
                let train = train_split(&cfg)?;
                let mut net = train_decleaner(
                    &train,
                    &surrogate_cfg(&cfg, cfg.defense.stage2_epochs),
                    DecleanerLossWeights::default(),
                    cfg.defense.decleaner_width,
                    &mut RngStream::new(cfg.data.seed, "decleaner"),
                )?;
                let path = ckpt_dir(&cfg)?.join("decleaner.ckpt");
                net.save(&path)?;
                println!("wrote {}", path.display());
            }
            Stage2Cmd::Purify {
                ckpt,
                image,
                output,
                dump_trigger,
            } => {
                let mut net = DecleanerNet::load(&ckpt)?;
                let x = ImageTensor::load_png(&image)?;
                if let Some(path) = dump_trigger {
                    let rec = net.reconstruct(&x);
                    let amplified =
                        clamp01(&ImageTensor::new(rec.data.mapv(|v| 3.0 * v.abs())))?;
                    amplified.save_png(&path)?;
                    println!("wrote {}", path.display());
                }
                let out = purify_stage2(&mut net, &x)?;
                out.save_png(&output)?;
                println!("wrote {}", output.display());
            }
        },
        Command::Stage3 { cmd } => match cmd {
            Stage3Cmd::TrainDdpm { cfg } => {
                let cfg = load_config(&cfg.config)?;
                let train = train_split(&cfg)?;
                let mut net = train_predictor(
                    &train,
                    &default_schedule(),
                    &DdpmTrainConfig {
                        epochs: cfg.defense.ddpm_epochs,
                        batch_size: cfg.defense.batch_size,
                        lr: cfg.defense.lr,
                        width: cfg.defense.predictor_width,
                    },
                    &mut RngStream::new(cfg.data.seed, "ddpm"),
                )?;
                let path = ckpt_dir(&cfg)?.join("ddpm.ckpt");
                net.save(&path)?;
                println!("wrote {}", path.display());
            }
            Stage3Cmd::Purify {
                ckpt,
                image,
                output,
                steps,
                sampler,
                ddim_steps,
                seed,
            } => {
                let mut net = NoisePredictor::load(&ckpt)?;
                let schedule = default_schedule();
                let x = ImageTensor::load_png(&image)?;
                let mut rng = RngStream::new(seed, "stage3/img0");
                let out = match sampler.as_str() {
                    "ddpm" => purify_stage3(&x, steps, &mut net, &schedule, &mut rng)?,
                    "ddim" => {
                        purify_stage3_ddim(&x, steps, ddim_steps, &mut net, &schedule, &mut rng)?
                    }
                    other => bail!("unknown sampler {other}"),
                };
                clamp01(&out)?.save_png(&output)?;
                println!("wrote {}", output.display());
            }
        },
        Command::Purify {
            cfg,
            input,
            output,
            batch_size,
        } => {
            let cfg = load_config(&cfg.config)?;
            let dir = cfg.output_dir.join("checkpoints");
            let mut models = PipelineModels {
                locator: Some(LocatorNet::load(&dir.join("locator.ckpt"))?),
                inpainter: Some(InpainterNet::load(&dir.join("inpainter.ckpt"))?),
                decleaner: Some(DecleanerNet::load(&dir.join("decleaner.ckpt"))?),
                predictor: Some(NoisePredictor::load(&dir.join("ddpm.ckpt"))?),
                schedule: default_schedule(),
            };
            let mut names: Vec<PathBuf> = std::fs::read_dir(&input)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "png"))
                .collect();
            names.sort();
            if names.is_empty() {
                bail!("no .png files in {}", input.display());
            }
            let imgs: Vec<ImageTensor> = names
                .iter()
                .map(|p| ImageTensor::load_png(p))
                .collect::<bdfw_core::Result<_>>()?;
            let (purified, batches) =
                purify_stream(&mut models, &cfg.pipeline, &imgs, batch_size)?;
            std::fs::create_dir_all(&output)?;
            for (name, img) in names.iter().zip(purified.iter()) {
                img.save_png(&output.join(name.file_name().unwrap()))?;
            }
            let total: f64 = batches.iter().map(|b| b.seconds).sum();
            println!(
                "purified {} images in {} batches ({total:.2}s)",
                imgs.len(),
                batches.len()
            );
        }
        Command::Eval { cfg, dump_artifacts } => {
            let cfg = load_config(&cfg.config)?;
            let report = run_experiment(
                &cfg,
                &ExperimentOptions {
                    dump_artifacts,
                    train_missing: true,
                },
            )?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Ablate { cfg, mode } => {
            let cfg = load_config(&cfg.config)?;
            let mode = match mode.as_str() {
                "orders" => AblationMode::Orders,
                _ => AblationMode::Toggles,
            };
            let rows = ablate(&cfg, &ExperimentOptions::default(), mode)?;
            println!("{:<10} {:>7} {:>7} {:>7}", "order", "CA", "PA", "ASR");
            for (label, ca, pa, asr) in rows {
                println!("{label:<10} {ca:>7.2} {pa:>7.2} {asr:>7.2}");
            }
        }
        Command::Bench {
            cfg,
            batch_sizes,
            runs,
        } => {
            let cfg = load_config(&cfg.config)?;
            let mut exp = prepare_experiment(&cfg, &ExperimentOptions::default())?;
            let sample = exp
                .clean_test
                .records
                .first()
                .map(|r| r.image.clone())
                .context("empty test set")?;
            let rows = benchmark_inference(
                &mut exp.models,
                &cfg.pipeline,
                &sample,
                &batch_sizes,
                runs,
            )?;
            println!("{:<8} {:>10}  per-stage", "batch", "median(s)");
            for row in rows {
                let stages: Vec<String> = row
                    .stage_seconds
                    .iter()
                    .map(|(k, v)| format!("{k}={v:.3}s"))
                    .collect();
                println!(
                    "{:<8} {:>10.3}  {}",
                    row.batch_size,
                    row.median_seconds,
                    stages.join(" ")
                );
            }
        }
    }
    Ok(())
}
