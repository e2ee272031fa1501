//! Experiment harness: trains (or loads) the victim and defense models for
//! a run config, evaluates CA/PA/ASR through the pipeline, and writes
//! reports, ablation matrices, and timing benchmarks.

use crate::config::RunConfig;
use crate::data::Dataset;
use crate::decleaner::{train_decleaner, DecleanerLossWeights, DecleanerNet};
use crate::diffusion::{train_predictor, DdpmTrainConfig, NoisePredictor};
use crate::error::{BdfwError, Result};
use crate::inpainter::{train_inpainter, InpainterNet};
use crate::locator::{locate, train_locator, LocatorLossWeights, LocatorNet, SurrogateTrainConfig};
use crate::metrics::{build_poisoned_eval_set, config_hash, PurifyReport};
use crate::pipeline::{purify_indexed, PipelineConfig, PipelineModels, StageTiming};
use crate::rng::RngStream;
use crate::tensor::{clamp01, ImageTensor};
use crate::trigger::TriggerSpec;
use crate::victim::{poison_dataset, train_victim, PoisonPlan, TrainConfig, VictimConfig, VictimModel};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Debug, Clone, Copy)]
pub struct ExperimentOptions {
    /// Export masks, amplified trigger reconstructions, and purified
    /// images as PNGs next to the report.
    pub dump_artifacts: bool,
    /// Train any model whose checkpoint is absent; error otherwise.
    pub train_missing: bool,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        ExperimentOptions {
            dump_artifacts: false,
            train_missing: true,
        }
    }
}

/// Everything a purification experiment needs at evaluation time.
pub struct Experiment {
    pub victim: VictimModel,
    pub models: PipelineModels,
    pub trigger: TriggerSpec,
    pub clean_test: Dataset,
    pub poisoned_test: Dataset,
    pub ckpt_dir: PathBuf,
}

fn ckpt_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.ckpt"))
}

fn load_or_train<T>(
    path: &Path,
    opts: &ExperimentOptions,
    load: impl FnOnce(&Path) -> Result<T>,
    train: impl FnOnce() -> Result<T>,
    save: impl FnOnce(&mut T, &Path) -> Result<()>,
) -> Result<T> {
    if path.exists() {
        return load(path);
    }
    if !opts.train_missing {
        return Err(BdfwError::InvalidParam(format!(
            "missing checkpoint {} and training is disabled",
            path.display()
        )));
    }
    let mut model = train()?;
    save(&mut model, path)?;
    Ok(model)
}

/// Train or load all five models for `cfg` and assemble the evaluation
/// sets. Checkpoints live in `<output_dir>/checkpoints`.
pub fn prepare_experiment(cfg: &RunConfig, opts: &ExperimentOptions) -> Result<Experiment> {
    cfg.validate()?;
    let (train_set, test_set) = cfg.data.load()?;
    let (_, h, w) = train_set.image_shape();
    let trigger = cfg.attack.to_spec(h, w)?;

    let ckpt_dir = cfg.output_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;
    let seed = cfg.data.seed;

    let plan = PoisonPlan {
        trigger: trigger.clone(),
        poison_rate: cfg.attack.poison_rate,
    };
    let victim = load_or_train(
        &ckpt_path(&ckpt_dir, "victim"),
        opts,
        VictimModel::load,
        || {
            let mut rng = RngStream::new(seed, "poison");
            let poisoned_train = poison_dataset(&train_set, &plan, &mut rng)?;
            let vcfg = VictimConfig {
                num_classes: cfg.data.num_classes,
                width: cfg.victim.width,
                blocks_per_stage: cfg.victim.blocks_per_stage,
            };
            let tcfg = TrainConfig {
                epochs: cfg.victim.epochs,
                batch_size: cfg.victim.batch_size,
                lr: cfg.victim.lr,
                weight_decay: cfg.victim.weight_decay,
                augment_noise: cfg.victim.augment_noise,
            };
            train_victim(&poisoned_train, &vcfg, &tcfg, &mut RngStream::new(seed, "victim"))
        },
        |m, p| m.save(p),
    )?;

    let surrogate_cfg = SurrogateTrainConfig {
        epochs: cfg.defense.stage1_epochs,
        batch_size: cfg.defense.batch_size,
        lr: cfg.defense.lr,
        weight_decay: 0.0,
    };
    let locator = load_or_train(
        &ckpt_path(&ckpt_dir, "locator"),
        opts,
        LocatorNet::load,
        || {
            train_locator(
                &train_set,
                &surrogate_cfg,
                LocatorLossWeights::default(),
                cfg.defense.locator_width,
                &mut RngStream::new(seed, "locator"),
            )
        },
        |m, p| m.save(p),
    )?;
    let inpainter = load_or_train(
        &ckpt_path(&ckpt_dir, "inpainter"),
        opts,
        InpainterNet::load,
        || {
            train_inpainter(
                &train_set,
                &surrogate_cfg,
                cfg.defense.inpainter_width,
                &mut RngStream::new(seed, "inpainter"),
            )
        },
        |m, p| m.save(p),
    )?;
    let decleaner = load_or_train(
        &ckpt_path(&ckpt_dir, "decleaner"),
        opts,
        DecleanerNet::load,
        || {
            let dcfg = SurrogateTrainConfig {
                epochs: cfg.defense.stage2_epochs,
                ..surrogate_cfg
            };
            train_decleaner(
                &train_set,
                &dcfg,
                DecleanerLossWeights::default(),
                cfg.defense.decleaner_width,
                &mut RngStream::new(seed, "decleaner"),
            )
        },
        |m, p| m.save(p),
    )?;
    let schedule = crate::diffusion::default_schedule();
    let predictor = load_or_train(
        &ckpt_path(&ckpt_dir, "ddpm"),
        opts,
        NoisePredictor::load,
        || {
            let pcfg = DdpmTrainConfig {
                epochs: cfg.defense.ddpm_epochs,
                batch_size: cfg.defense.batch_size,
                lr: cfg.defense.lr,
                width: cfg.defense.predictor_width,
            };
            train_predictor(&train_set, &schedule, &pcfg, &mut RngStream::new(seed, "ddpm"))
        },
        |m, p| m.save(p),
    )?;

    let poisoned_test = build_poisoned_eval_set(&test_set, &trigger)?;
    Ok(Experiment {
        victim,
        models: PipelineModels {
            locator: Some(locator),
            inpainter: Some(inpainter),
            decleaner: Some(decleaner),
            predictor: Some(predictor),
            schedule,
        },
        trigger,
        clean_test: test_set,
        poisoned_test,
        ckpt_dir,
    })
}

const PURIFY_BATCH: usize = 64;

/// CA/PA/ASR for one pipeline configuration, with per-stage timing summed
/// over every evaluated batch.
pub fn evaluate(
    exp: &mut Experiment,
    pcfg: &PipelineConfig,
) -> Result<(f64, f64, f64, BTreeMap<String, f64>)> {
    let mut stage_seconds: BTreeMap<String, f64> = BTreeMap::new();
    let models = &mut exp.models;
    let victim = &mut exp.victim;

    let mut run_set = |records: &Dataset| -> Result<Vec<usize>> {
        let mut preds = Vec::with_capacity(records.len());
        let mut base = 0usize;
        for chunk in records.records.chunks(PURIFY_BATCH) {
            let imgs: Vec<ImageTensor> = chunk.iter().map(|r| r.image.clone()).collect();
            let mut timings: Vec<StageTiming> = Vec::new();
            let purified = purify_indexed(models, pcfg, &imgs, base, &mut timings)?;
            for t in timings {
                *stage_seconds.entry(format!("stage{}", t.stage)).or_insert(0.0) += t.seconds;
            }
            let (p, _) = victim.predict(&purified)?;
            preds.extend(p);
            base += chunk.len();
        }
        Ok(preds)
    };

    let clean_preds = run_set(&exp.clean_test)?;
    let ca = 100.0
        * clean_preds
            .iter()
            .zip(exp.clean_test.records.iter())
            .filter(|(p, r)| **p == r.label)
            .count() as f64
        / exp.clean_test.records.len() as f64;
    let poison_preds = run_set(&exp.poisoned_test)?;
    let n_poison = exp.poisoned_test.records.len() as f64;
    let pa = 100.0
        * poison_preds
            .iter()
            .zip(exp.poisoned_test.records.iter())
            .filter(|(p, r)| **p == r.original_label)
            .count() as f64
        / n_poison;
    let target = exp.trigger.target_class();
    let asr = 100.0 * poison_preds.iter().filter(|p| **p == target).count() as f64 / n_poison;
    Ok((ca, pa, asr, stage_seconds))
}

fn dump_artifacts(exp: &mut Experiment, cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let dir = cfg.output_dir.join("artifacts");
    std::fs::create_dir_all(&dir)?;
    let mut paths = Vec::new();
    let n = exp.poisoned_test.records.len().min(4);
    for i in 0..n {
        let x = exp.poisoned_test.records[i].image.clone();
        let orig = dir.join(format!("poisoned{i}.png"));
        x.save_png(&orig)?;
        paths.push(orig);
        if let Some(loc) = exp.models.locator.as_mut() {
            let mask = locate(loc, &x);
            let p = dir.join(format!("clean_mask{i}.png"));
            mask.save_png(&p)?;
            paths.push(p);
        }
        if let Some(dc) = exp.models.decleaner.as_mut() {
            // 3x enhancement makes faint reconstructions visible
            let rec = dc.reconstruct(&x);
            let amplified = clamp01(&ImageTensor::new(rec.data.mapv(|v| 3.0 * v.abs())))?;
            let p = dir.join(format!("trigger_recon_x3_{i}.png"));
            amplified.save_png(&p)?;
            paths.push(p);
        }
        let purified = purify_indexed(
            &mut exp.models,
            &cfg.pipeline,
            std::slice::from_ref(&x),
            i,
            &mut Vec::new(),
        )?;
        let p = dir.join(format!("purified{i}.png"));
        purified[0].save_png(&p)?;
        paths.push(p);
    }
    Ok(paths)
}

/// Full protocol: prepare models, evaluate the configured pipeline, stamp
/// the config hash, and write `report.json` plus a `report.csv` row.
pub fn run_experiment(cfg: &RunConfig, opts: &ExperimentOptions) -> Result<PurifyReport> {
    let started = Instant::now();
    let mut exp = prepare_experiment(cfg, opts)
        .map_err(|e| e.in_stage(&format!("prepare({})", config_hash(cfg))))?;
    let (ca, pa, asr, stage_seconds) = evaluate(&mut exp, &cfg.pipeline)
        .map_err(|e| e.in_stage(&format!("evaluate({})", config_hash(cfg))))?;
    let artifact_paths = if opts.dump_artifacts {
        dump_artifacts(&mut exp, cfg)?
    } else {
        Vec::new()
    };
    let report = PurifyReport {
        ca,
        pa,
        asr,
        stage_seconds,
        total_seconds: started.elapsed().as_secs_f64(),
        n_clean: exp.clean_test.records.len(),
        n_poisoned: exp.poisoned_test.records.len(),
        config_hash: config_hash(cfg),
        artifact_paths,
    };
    report.validate()?;
    write_report(&report, &cfg.output_dir)?;
    Ok(report)
}

fn write_report(report: &PurifyReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(report)?;
    std::fs::write(dir.join("report.json"), json)?;
    let csv_path = dir.join("report.csv");
    let fresh = !csv_path.exists();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&csv_path)?;
    if fresh {
        writeln!(f, "{}", PurifyReport::csv_header())?;
    }
    writeln!(f, "{}", report.csv_row())?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationMode {
    /// All 6 orderings of the full three-stage pipeline.
    Orders,
    /// All 8 stage subsets in ascending order.
    Toggles,
}

pub fn ablation_orders() -> Vec<Vec<u8>> {
    vec![
        vec![1, 2, 3],
        vec![1, 3, 2],
        vec![2, 1, 3],
        vec![2, 3, 1],
        vec![3, 1, 2],
        vec![3, 2, 1],
    ]
}

pub fn ablation_toggles() -> Vec<Vec<u8>> {
    vec![
        vec![],
        vec![1],
        vec![2],
        vec![3],
        vec![1, 2],
        vec![1, 3],
        vec![2, 3],
        vec![1, 2, 3],
    ]
}

fn order_label(order: &[u8]) -> String {
    if order.is_empty() {
        "none".to_string()
    } else {
        order
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// Evaluate every pipeline variant of the chosen mode against one shared
/// set of trained models. Returns (label, CA, PA, ASR) rows and writes
/// them to `ablation.csv`.
pub fn ablate(
    cfg: &RunConfig,
    opts: &ExperimentOptions,
    mode: AblationMode,
) -> Result<Vec<(String, f64, f64, f64)>> {
    let mut exp = prepare_experiment(cfg, opts)?;
    let orders = match mode {
        AblationMode::Orders => ablation_orders(),
        AblationMode::Toggles => ablation_toggles(),
    };
    let mut rows = Vec::new();
    for order in orders {
        let pcfg = PipelineConfig {
            order: order.clone(),
            ..cfg.pipeline.clone()
        };
        let (ca, pa, asr, _) = evaluate(&mut exp, &pcfg)?;
        rows.push((order_label(&order), ca, pa, asr));
    }
    std::fs::create_dir_all(&cfg.output_dir)?;
    let mut f = std::fs::File::create(cfg.output_dir.join("ablation.csv"))?;
    writeln!(f, "order,ca,pa,asr")?;
    for (label, ca, pa, asr) in &rows {
        writeln!(f, "\"{label}\",{ca:.4},{pa:.4},{asr:.4}")?;
    }
    Ok(rows)
}

/// One row of the timing benchmark.
#[derive(Debug, Clone)]
pub struct BenchRow {
    pub batch_size: usize,
    pub median_seconds: f64,
    pub stage_seconds: BTreeMap<String, f64>,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Median-of-`runs` wall time per batch size, with a per-stage breakdown.
/// One warm-up pass runs first.
pub fn benchmark_inference(
    models: &mut PipelineModels,
    pcfg: &PipelineConfig,
    sample: &ImageTensor,
    batch_sizes: &[usize],
    runs: usize,
) -> Result<Vec<BenchRow>> {
    if runs == 0 {
        return Err(BdfwError::InvalidParam("need at least one run".into()));
    }
    let _ = purify_indexed(
        models,
        pcfg,
        std::slice::from_ref(sample),
        0,
        &mut Vec::new(),
    )?;
    let mut rows = Vec::new();
    for &bs in batch_sizes {
        let batch: Vec<ImageTensor> = vec![sample.clone(); bs];
        let mut totals = Vec::with_capacity(runs);
        let mut per_stage: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for _ in 0..runs {
            let mut timings = Vec::new();
            let started = Instant::now();
            purify_indexed(models, pcfg, &batch, 0, &mut timings)?;
            totals.push(started.elapsed().as_secs_f64());
            for t in timings {
                per_stage
                    .entry(format!("stage{}", t.stage))
                    .or_default()
                    .push(t.seconds);
            }
        }
        rows.push(BenchRow {
            batch_size: bs,
            median_seconds: median(totals),
            stage_seconds: per_stage
                .into_iter()
                .map(|(k, v)| (k, median(v)))
                .collect(),
        });
    }
    Ok(rows)
}
