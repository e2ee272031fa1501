//! Three-stage purification pipeline: patch removal, trigger subtraction,
//! diffusion denoising — in any order or subset, for ablation.

use crate::decleaner::{purify_stage2, DecleanerNet};
use crate::diffusion::{
    purify_stage3_batch, purify_stage3_ddim_batch, NoisePredictor, NoiseSchedule,
};
use crate::error::{BdfwError, Result};
use crate::inpainter::{compose_stage1, InpainterNet};
use crate::locator::{locate, LocatorNet};
use crate::nn::conv::stack_images;
use crate::rng::RngStream;
use crate::tensor::{clamp01, ImageTensor};
use ndarray::s;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Sampler {
    Ddpm,
    Ddim { steps: usize },
}

/// Which stages run, in what order, and with what randomness.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Permutation of a subset of {1,2,3}; empty means identity.
    pub order: Vec<u8>,
    /// Diffusion entry step for stage 3.
    pub t_steps: usize,
    pub sampler: Sampler,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            order: vec![1, 2, 3],
            t_steps: crate::diffusion::DEFAULT_PURIFY_T,
            sampler: Sampler::Ddpm,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let mut seen = [false; 4];
        for &st in &self.order {
            if !(1..=3).contains(&st) {
                return Err(BdfwError::InvalidParam(format!("unknown stage {st}")));
            }
            if seen[st as usize] {
                return Err(BdfwError::InvalidParam(format!("duplicate stage {st}")));
            }
            seen[st as usize] = true;
        }
        if self.order.contains(&3) && self.t_steps == 0 {
            return Err(BdfwError::InvalidParam("stage 3 requires t_steps ≥ 1".into()));
        }
        Ok(())
    }
}

/// Checkpoint paths for the four defense models.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PipelineCheckpoints {
    pub locator: Option<PathBuf>,
    pub inpainter: Option<PathBuf>,
    pub decleaner: Option<PathBuf>,
    pub predictor: Option<PathBuf>,
}

/// Loaded defense models; any subset may be present, but a stage fails
/// loudly if asked to run without its models.
pub struct PipelineModels {
    pub locator: Option<LocatorNet>,
    pub inpainter: Option<InpainterNet>,
    pub decleaner: Option<DecleanerNet>,
    pub predictor: Option<NoisePredictor>,
    pub schedule: NoiseSchedule,
}

impl PipelineModels {
    pub fn empty() -> Self {
        PipelineModels {
            locator: None,
            inpainter: None,
            decleaner: None,
            predictor: None,
            schedule: crate::diffusion::default_schedule(),
        }
    }

    pub fn load(paths: &PipelineCheckpoints) -> Result<Self> {
        let mut m = PipelineModels::empty();
        if let Some(p) = paths.locator.as_deref() {
            m.locator = Some(LocatorNet::load(p).map_err(|e| e.in_stage("stage1"))?);
        }
        if let Some(p) = paths.inpainter.as_deref() {
            m.inpainter = Some(InpainterNet::load(p).map_err(|e| e.in_stage("stage1"))?);
        }
        if let Some(p) = paths.decleaner.as_deref() {
            m.decleaner = Some(DecleanerNet::load(p).map_err(|e| e.in_stage("stage2"))?);
        }
        if let Some(p) = paths.predictor.as_deref() {
            m.predictor = Some(NoisePredictor::load(p).map_err(|e| e.in_stage("stage3"))?);
        }
        Ok(m)
    }
}

/// Wall-clock seconds spent in one stage over one batch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: u8,
    pub seconds: f64,
}

fn check_batch_shapes(imgs: &[ImageTensor]) -> Result<()> {
    if let Some(first) = imgs.first() {
        let shape = first.shape();
        if shape.0 != 3 {
            return Err(BdfwError::ShapeMismatch {
                expected: "3 channels".into(),
                got: format!("{}", shape.0),
            });
        }
        for img in imgs.iter().skip(1) {
            if img.shape() != shape {
                return Err(BdfwError::ShapeMismatch {
                    expected: format!("{shape:?}"),
                    got: format!("{:?}", img.shape()),
                });
            }
        }
    }
    Ok(())
}

/// Core purifier. `base_index` offsets the per-image stage-3 noise keys so
/// re-batching or stage re-ordering never changes a given image's draws.
pub fn purify_indexed(
    models: &mut PipelineModels,
    cfg: &PipelineConfig,
    imgs: &[ImageTensor],
    base_index: usize,
    timings: &mut Vec<StageTiming>,
) -> Result<Vec<ImageTensor>> {
    cfg.validate()?;
    check_batch_shapes(imgs)?;
    let mut cur: Vec<ImageTensor> = imgs.to_vec();
    for &stage in &cfg.order {
        let start = Instant::now();
        cur = match stage {
            1 => {
                let (loc, inp) = match (&mut models.locator, &mut models.inpainter) {
                    (Some(l), Some(i)) => (l, i),
                    _ => {
                        return Err(BdfwError::InvalidParam(
                            "locator/inpainter checkpoints not loaded".into(),
                        )
                        .in_stage("stage1"))
                    }
                };
                let mut out = Vec::with_capacity(cur.len());
                for x in &cur {
                    let mask = locate(loc, x);
                    out.push(
                        compose_stage1(x, &mask, inp).map_err(|e| e.in_stage("stage1"))?,
                    );
                }
                out
            }
            2 => {
                let dc = models.decleaner.as_mut().ok_or_else(|| {
                    BdfwError::InvalidParam("decleaner checkpoint not loaded".into())
                        .in_stage("stage2")
                })?;
                let mut out = Vec::with_capacity(cur.len());
                for x in &cur {
                    out.push(purify_stage2(dc, x).map_err(|e| e.in_stage("stage2"))?);
                }
                out
            }
            3 => {
                let pred = models.predictor.as_mut().ok_or_else(|| {
                    BdfwError::InvalidParam("predictor checkpoint not loaded".into())
                        .in_stage("stage3")
                })?;
                let batch = stack_images(
                    &cur.iter().map(|i| i.data.clone()).collect::<Vec<_>>(),
                );
                let mut rngs: Vec<RngStream> = (0..cur.len())
                    .map(|i| RngStream::new(cfg.seed, &format!("stage3/img{}", base_index + i)))
                    .collect();
                let out = match cfg.sampler {
                    Sampler::Ddpm => purify_stage3_batch(
                        &batch,
                        cfg.t_steps,
                        pred,
                        &models.schedule,
                        &mut rngs,
                    ),
                    Sampler::Ddim { steps } => purify_stage3_ddim_batch(
                        &batch,
                        cfg.t_steps,
                        steps,
                        pred,
                        &models.schedule,
                        &mut rngs,
                    ),
                }
                .map_err(|e| e.in_stage("stage3"))?;
                (0..cur.len())
                    .map(|i| ImageTensor::new(out.slice(s![i, .., .., ..]).to_owned()))
                    .collect()
            }
            _ => unreachable!("validated above"),
        };
        // inter-stage handoff stays in [0,1]
        for img in cur.iter_mut() {
            *img = clamp01(img)?;
        }
        timings.push(StageTiming {
            stage,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(cur)
}

/// Purify one batch with image indices starting at 0.
pub fn purify(
    models: &mut PipelineModels,
    cfg: &PipelineConfig,
    imgs: &[ImageTensor],
) -> Result<Vec<ImageTensor>> {
    let mut timings = Vec::new();
    purify_indexed(models, cfg, imgs, 0, &mut timings)
}

/// Per-batch result from the streaming purifier.
#[derive(Debug, Clone)]
pub struct StreamBatch {
    pub start_index: usize,
    pub seconds: f64,
    pub stage_timings: Vec<StageTiming>,
}

/// Chunk a stream of images, preserving order and global image indices.
/// Returns the purified images and per-batch wall-time bookkeeping.
pub fn purify_stream(
    models: &mut PipelineModels,
    cfg: &PipelineConfig,
    imgs: &[ImageTensor],
    batch_size: usize,
) -> Result<(Vec<ImageTensor>, Vec<StreamBatch>)> {
    if batch_size == 0 {
        return Err(BdfwError::InvalidParam("batch_size must be ≥ 1".into()));
    }
    let mut out = Vec::with_capacity(imgs.len());
    let mut batches = Vec::new();
    for (bi, chunk) in imgs.chunks(batch_size).enumerate() {
        let start_index = bi * batch_size;
        let started = Instant::now();
        let mut stage_timings = Vec::new();
        let purified = purify_indexed(models, cfg, chunk, start_index, &mut stage_timings)
            .map_err(|e| e.in_stage(&format!("batch{bi}")))?;
        out.extend(purified);
        batches.push(StreamBatch {
            start_index,
            seconds: started.elapsed().as_secs_f64(),
            stage_timings,
        });
    }
    Ok((out, batches))
}
