//! Backdoored victim classifiers: dataset poisoning, cross-entropy
//! training, and batched prediction.
//!
//! Everything downstream treats a trained [`VictimModel`] as a black box:
//! the purification stages never read its parameters or query it.

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::data::{Dataset, Split};
use crate::error::{BdfwError, Result};
use crate::nn::conv::{stack_images, Conv2d};
use crate::nn::layers::{cross_entropy_with_grad, softmax, GlobalAvgPool, Linear, Relu};
use crate::nn::optim::AdamW;
use crate::nn::{params_from_checkpoint, params_to_checkpoint, Param, Tensor4};
use crate::rng::RngStream;
use crate::tensor::ImageTensor;
use crate::trigger::{apply_trigger, TriggerSpec};
use ndarray::Array2;
use std::path::Path;

/// How to poison a training set.
#[derive(Debug, Clone)]
pub struct PoisonPlan {
    pub trigger: TriggerSpec,
    pub poison_rate: f64,
}

impl PoisonPlan {
    /// Plan with the default 10% poison rate.
    pub fn new(trigger: TriggerSpec) -> Self {
        PoisonPlan {
            trigger,
            poison_rate: 0.10,
        }
    }

    pub fn target_class(&self) -> usize {
        self.trigger.target_class()
    }
}

/// Apply a trigger to exactly ⌊rate·N⌋ uniformly chosen records and relabel
/// them to the plan's target class. Untouched records keep their flags.
pub fn poison_dataset(ds: &Dataset, plan: &PoisonPlan, rng: &mut RngStream) -> Result<Dataset> {
    if !(plan.poison_rate > 0.0 && plan.poison_rate < 1.0) {
        return Err(BdfwError::InvalidParam(format!(
            "poison_rate must lie in (0,1), got {}",
            plan.poison_rate
        )));
    }
    plan.trigger.validate()?;
    let n = ds.records.len();
    let count = (plan.poison_rate * n as f64).floor() as usize;
    if count < 1 {
        return Err(BdfwError::InvalidParam(format!(
            "poison_rate {} on {n} records poisons nothing",
            plan.poison_rate
        )));
    }
    let target = plan.target_class();
    if target >= ds.num_classes {
        return Err(BdfwError::InvalidParam(format!(
            "target class {target} outside {} classes",
            ds.num_classes
        )));
    }
    let chosen = rng.choose_indices(n, count);
    let mut out = ds.clone();
    for &i in &chosen {
        let rec = &mut out.records[i];
        rec.image = apply_trigger(&rec.image, &plan.trigger)?;
        rec.original_label = rec.label;
        rec.label = target;
        rec.is_poisoned = true;
    }
    Ok(out)
}

/// Pre-activation residual block; downsamples and widens when asked.
struct ResBlock {
    r1: Relu,
    c1: Conv2d,
    r2: Relu,
    c2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(in_ch: usize, out_ch: usize, stride: usize, rng: &mut RngStream) -> Self {
        let skip = if stride != 1 || in_ch != out_ch {
            Some(Conv2d::new(in_ch, out_ch, 1, stride, 0, rng))
        } else {
            None
        };
        ResBlock {
            r1: Relu::new(),
            c1: Conv2d::new(in_ch, out_ch, 3, stride, 1, rng),
            r2: Relu::new(),
            c2: Conv2d::new(out_ch, out_ch, 3, 1, 1, rng),
            skip,
        }
    }

    fn forward(&mut self, x: &Tensor4, train: bool) -> Tensor4 {
        let h = self.r1.forward(x, train);
        let a = self.c1.forward(&h, train);
        let a = self.r2.forward(&a, train);
        let a = self.c2.forward(&a, train);
        let s = match &mut self.skip {
            Some(sc) => sc.forward(&h, train),
            None => x.clone(),
        };
        a + s
    }

    fn backward(&mut self, dy: &Tensor4) -> Tensor4 {
        let da = self.c2.backward(dy);
        let da = self.r2.backward(&da);
        let dh_main = self.c1.backward(&da);
        match &mut self.skip {
            Some(sc) => {
                let dh = dh_main + sc.backward(dy);
                self.r1.backward(&dh)
            }
            None => self.r1.backward(&dh_main) + dy,
        }
    }
}

/// Small pre-activation residual CNN for 32×32-ish inputs.
struct VictimNet {
    stem: Conv2d,
    stages: Vec<Vec<ResBlock>>,
    tail: Relu,
    gap: GlobalAvgPool,
    fc: Linear,
}

impl VictimNet {
    fn new(cfg: &VictimConfig, rng: &mut RngStream) -> Self {
        let w = cfg.width;
        let widths = [w, 2 * w, 4 * w];
        let mut stages = Vec::new();
        let mut in_ch = w;
        for (si, &out_ch) in widths.iter().enumerate() {
            let mut blocks = Vec::new();
            for bi in 0..cfg.blocks_per_stage {
                let stride = if si > 0 && bi == 0 { 2 } else { 1 };
                blocks.push(ResBlock::new(in_ch, out_ch, stride, rng));
                in_ch = out_ch;
            }
            stages.push(blocks);
        }
        VictimNet {
            stem: Conv2d::new(3, w, 3, 1, 1, rng),
            stages,
            tail: Relu::new(),
            gap: GlobalAvgPool::new(),
            fc: Linear::new(4 * w, cfg.num_classes, rng),
        }
    }

    fn forward(&mut self, x: &Tensor4, train: bool) -> Array2<f64> {
        let mut h = self.stem.forward(x, train);
        for stage in &mut self.stages {
            for block in stage {
                h = block.forward(&h, train);
            }
        }
        let h = self.tail.forward(&h, train);
        let pooled = self.gap.forward(&h);
        self.fc.forward(&pooled, train)
    }

    fn backward(&mut self, dlogits: &Array2<f64>) {
        let dpooled = self.fc.backward(dlogits);
        let dh = self.gap.backward(&dpooled);
        let mut dh = self.tail.backward(&dh);
        for stage in self.stages.iter_mut().rev() {
            for block in stage.iter_mut().rev() {
                dh = block.backward(&dh);
            }
        }
        self.stem.backward(&dh);
    }

    fn param_entries(&mut self) -> Vec<(String, &mut Param)> {
        let mut out: Vec<(String, &mut Param)> = vec![
            ("stem.w".into(), &mut self.stem.w),
            ("stem.b".into(), &mut self.stem.b),
        ];
        for (si, stage) in self.stages.iter_mut().enumerate() {
            for (bi, block) in stage.iter_mut().enumerate() {
                let p = format!("s{si}b{bi}");
                out.push((format!("{p}.c1.w"), &mut block.c1.w));
                out.push((format!("{p}.c1.b"), &mut block.c1.b));
                out.push((format!("{p}.c2.w"), &mut block.c2.w));
                out.push((format!("{p}.c2.b"), &mut block.c2.b));
                if let Some(sc) = &mut block.skip {
                    out.push((format!("{p}.skip.w"), &mut sc.w));
                    out.push((format!("{p}.skip.b"), &mut sc.b));
                }
            }
        }
        out.push(("fc.w".into(), &mut self.fc.w));
        out.push(("fc.b".into(), &mut self.fc.b));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.param_entries().into_iter().map(|(_, p)| p).collect()
    }
}

/// Victim architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VictimConfig {
    pub num_classes: usize,
    /// Base channel count; stages use width, 2·width, 4·width.
    pub width: usize,
    pub blocks_per_stage: usize,
}

impl VictimConfig {
    pub fn small(num_classes: usize) -> Self {
        VictimConfig {
            num_classes,
            width: 8,
            blocks_per_stage: 1,
        }
    }
}

/// Training schedule for [`train_victim`].
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Upper bound on the per-image Gaussian noise std added during
    /// training (each image draws its own std uniformly from
    /// [0, augment_noise]). Zero disables the augmentation. A classifier
    /// trained without it is brittle to the residual noise that
    /// diffusion-based purification leaves behind.
    pub augment_noise: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 12,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 1e-4,
            augment_noise: 0.1,
        }
    }
}

/// A trained (possibly backdoored) classifier.
pub struct VictimModel {
    net: VictimNet,
    pub config: VictimConfig,
}

impl VictimModel {
    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Predicted class indices plus full softmax rows.
    pub fn predict(&mut self, batch: &[ImageTensor]) -> Result<(Vec<usize>, Array2<f64>)> {
        if batch.is_empty() {
            return Err(BdfwError::EmptySet);
        }
        let shape0 = batch[0].shape();
        for img in batch {
            if img.shape() != shape0 {
                return Err(BdfwError::ShapeMismatch {
                    expected: format!("{shape0:?}"),
                    got: format!("{:?}", img.shape()),
                });
            }
        }
        let imgs: Vec<_> = batch.iter().map(|i| i.data.clone()).collect();
        let x = stack_images(&imgs);
        let logits = self.net.forward(&x, false);
        let probs = softmax(&logits);
        let preds = probs
            .outer_iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0
            })
            .collect();
        Ok((preds, probs))
    }

    pub fn to_checkpoint(&mut self) -> Checkpoint {
        let cfg = self.config.clone();
        let mut ckpt = params_to_checkpoint("victim", self.net.param_entries());
        ckpt.metadata
            .insert("num_classes".into(), cfg.num_classes.to_string());
        ckpt.metadata.insert("width".into(), cfg.width.to_string());
        ckpt.metadata
            .insert("blocks_per_stage".into(), cfg.blocks_per_stage.to_string());
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<VictimModel> {
        let meta = |key: &str| -> Result<usize> {
            ckpt.metadata
                .get(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| BdfwError::BadCheckpoint(format!("missing metadata '{key}'")))
        };
        let config = VictimConfig {
            num_classes: meta("num_classes")?,
            width: meta("width")?,
            blocks_per_stage: meta("blocks_per_stage")?,
        };
        let mut seed_rng = RngStream::new(0, "victim-load-placeholder");
        let mut net = VictimNet::new(&config, &mut seed_rng);
        params_from_checkpoint(ckpt, net.param_entries())?;
        Ok(VictimModel { net, config })
    }

    pub fn save(&mut self, path: &Path) -> Result<()> {
        save_checkpoint(&self.to_checkpoint(), path)
    }

    pub fn load(path: &Path) -> Result<VictimModel> {
        VictimModel::from_checkpoint(&load_checkpoint(path)?)
    }
}

/// Train a victim classifier with AdamW on cross-entropy. The learning
/// rate steps down 10× over the last quarter of the epochs.
pub fn train_victim(
    ds: &Dataset,
    cfg: &VictimConfig,
    tcfg: &TrainConfig,
    rng: &mut RngStream,
) -> Result<VictimModel> {
    if ds.split != Split::Train {
        return Err(BdfwError::Dataset("train_victim needs the train split".into()));
    }
    if ds.records.is_empty() {
        return Err(BdfwError::EmptySet);
    }
    if ds.num_classes != cfg.num_classes {
        return Err(BdfwError::InvalidParam(format!(
            "dataset has {} classes, config expects {}",
            ds.num_classes, cfg.num_classes
        )));
    }
    let mut init_rng = rng.fork("init");
    let mut net = VictimNet::new(cfg, &mut init_rng);
    let mut opt = AdamW::new(tcfg.lr, tcfg.weight_decay);
    let n = ds.records.len();
    let decay_at = tcfg.epochs - tcfg.epochs / 4;
    for epoch in 0..tcfg.epochs {
        if epoch == decay_at {
            opt.lr = tcfg.lr * 0.1;
        }
        let mut order: Vec<usize> = (0..n).collect();
        rng.fork(&format!("epoch{epoch}")).shuffle(&mut order);
        let mut aug_rng = rng.fork(&format!("aug{epoch}"));
        for chunk in order.chunks(tcfg.batch_size) {
            let imgs: Vec<_> = chunk
                .iter()
                .map(|&i| {
                    let mut img = ds.records[i].image.data.clone();
                    if tcfg.augment_noise > 0.0 {
                        let std = aug_rng.uniform() * tcfg.augment_noise;
                        img.mapv_inplace(|v| {
                            (v + std * aug_rng.normal()).clamp(0.0, 1.0)
                        });
                    }
                    img
                })
                .collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| ds.records[i].label).collect();
            let x = stack_images(&imgs);
            let logits = net.forward(&x, true);
            let (loss, dlogits) = cross_entropy_with_grad(&logits, &labels);
            if !loss.is_finite() {
                return Err(BdfwError::Diverged(format!(
                    "cross-entropy became non-finite at epoch {epoch}"
                )));
            }
            AdamW::zero_grad(&mut net.params_mut());
            net.backward(&dlogits);
            opt.step(&mut net.params_mut());
        }
    }
    Ok(VictimModel {
        net,
        config: cfg.clone(),
    })
}

/// Fraction of records whose prediction matches their stored label.
pub fn accuracy_on(model: &mut VictimModel, ds: &Dataset, batch_size: usize) -> Result<f64> {
    if ds.records.is_empty() {
        return Err(BdfwError::EmptySet);
    }
    let mut correct = 0usize;
    for chunk in ds.records.chunks(batch_size) {
        let imgs: Vec<_> = chunk.iter().map(|r| r.image.clone()).collect();
        let (preds, _) = model.predict(&imgs)?;
        correct += preds
            .iter()
            .zip(chunk)
            .filter(|(p, r)| **p == r.label)
            .count();
    }
    Ok(correct as f64 / ds.records.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_shapes_dataset;
    use crate::rng::seeded_rng;
    use crate::trigger::badnets_spec;

    fn tiny_dataset(n: usize, seed: u64) -> Dataset {
        make_shapes_dataset(n, 4, seed).unwrap()
    }

    #[test]
    fn poison_count_exact_and_labels_retargeted() {
        let ds = tiny_dataset(60, 1);
        let plan = PoisonPlan::new(badnets_spec(32, 32, 0));
        let mut rng = seeded_rng(2, "poison");
        let out = poison_dataset(&ds, &plan, &mut rng).unwrap();
        let poisoned: Vec<_> = out.records.iter().filter(|r| r.is_poisoned).collect();
        assert_eq!(poisoned.len(), 6);
        assert!(poisoned.iter().all(|r| r.label == 0));
        for (orig, new) in ds.records.iter().zip(&out.records) {
            if new.is_poisoned {
                assert_eq!(new.original_label, orig.label);
            } else {
                assert_eq!(new.image.data, orig.image.data);
                assert_eq!(new.label, orig.label);
            }
        }
    }

    #[test]
    fn poison_rate_bounds() {
        let ds = tiny_dataset(10, 3);
        let mut rng = seeded_rng(3, "poison");
        for bad in [0.0, 1.0, 1.2, -0.1] {
            let plan = PoisonPlan {
                trigger: badnets_spec(32, 32, 0),
                poison_rate: bad,
            };
            assert!(poison_dataset(&ds, &plan, &mut rng).is_err());
        }
        // floor contract: N=10, rate=0.1 -> exactly one record
        let plan = PoisonPlan::new(badnets_spec(32, 32, 0));
        let out = poison_dataset(&ds, &plan, &mut rng).unwrap();
        assert_eq!(out.records.iter().filter(|r| r.is_poisoned).count(), 1);
    }

    #[test]
    fn hvt_poison_changes_trigger_support_only() {
        let ds = tiny_dataset(20, 4);
        let spec = badnets_spec(32, 32, 0);
        let mask = match &spec {
            TriggerSpec::HvtPatch { mask, .. } => mask.clone(),
            _ => unreachable!(),
        };
        let plan = PoisonPlan::new(spec);
        let mut rng = seeded_rng(5, "poison");
        let out = poison_dataset(&ds, &plan, &mut rng).unwrap();
        for (orig, new) in ds.records.iter().zip(&out.records) {
            if !new.is_poisoned {
                continue;
            }
            for c in 0..3 {
                for i in 0..32 {
                    for j in 0..32 {
                        if mask.data[[i, j]] == 0.0 {
                            assert_eq!(new.image.data[[c, i, j]], orig.image.data[[c, i, j]]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn one_class_dataset_collapses_to_perfect_accuracy() {
        let mut ds = tiny_dataset(32, 6);
        for r in &mut ds.records {
            r.label = 0;
            r.original_label = 0;
        }
        let cfg = VictimConfig {
            num_classes: 4,
            width: 4,
            blocks_per_stage: 1,
        };
        let tcfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            lr: 0.02,
            ..TrainConfig::default()
        };
        let mut rng = seeded_rng(7, "collapse");
        let mut model = train_victim(&ds, &cfg, &tcfg, &mut rng).unwrap();
        assert_eq!(accuracy_on(&mut model, &ds, 16).unwrap(), 1.0);
    }

    #[test]
    fn training_is_bit_deterministic() {
        let ds = tiny_dataset(24, 8);
        let cfg = VictimConfig {
            num_classes: 4,
            width: 4,
            blocks_per_stage: 1,
        };
        let tcfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let run = || {
            let mut rng = seeded_rng(9, "det");
            let mut m = train_victim(&ds, &cfg, &tcfg, &mut rng).unwrap();
            m.to_checkpoint()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn checkpoint_round_trip_preserves_predictions() {
        let ds = tiny_dataset(24, 10);
        let cfg = VictimConfig {
            num_classes: 4,
            width: 4,
            blocks_per_stage: 1,
        };
        let tcfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let mut rng = seeded_rng(11, "ckpt");
        let mut model = train_victim(&ds, &cfg, &tcfg, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("victim.ckpt");
        model.save(&path).unwrap();
        let mut back = VictimModel::load(&path).unwrap();
        let imgs: Vec<_> = ds.records.iter().take(8).map(|r| r.image.clone()).collect();
        let (p1, probs1) = model.predict(&imgs).unwrap();
        let (p2, probs2) = back.predict(&imgs).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(probs1, probs2);
    }

    #[test]
    fn predict_rows_are_distributions() {
        let ds = tiny_dataset(16, 12);
        let cfg = VictimConfig {
            num_classes: 4,
            width: 4,
            blocks_per_stage: 1,
        };
        let mut rng = seeded_rng(13, "pred");
        let mut model = train_victim(
            &ds,
            &cfg,
            &TrainConfig {
                epochs: 1,
                ..TrainConfig::default()
            },
            &mut rng,
        )
        .unwrap();
        // duplicate one image so identical inputs must give identical rows
        let mut imgs: Vec<_> = ds.records.iter().take(6).map(|r| r.image.clone()).collect();
        imgs.push(imgs[0].clone());
        let (preds, probs) = model.predict(&imgs).unwrap();
        for row in probs.outer_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-5);
        }
        assert_eq!(probs.row(0), probs.row(6));
        assert_eq!(preds[0], preds[6]);
        // batching equivalence against a one-at-a-time loop
        for (i, img) in imgs.iter().enumerate() {
            let (p, _) = model.predict(std::slice::from_ref(img)).unwrap();
            assert_eq!(p[0], preds[i], "sample {i}");
        }
        // shape mismatch and empty batch error
        assert!(model.predict(&[]).is_err());
        let odd = ImageTensor::zeros(3, 16, 16);
        assert!(model.predict(&[imgs[0].clone(), odd]).is_err());
    }
}
