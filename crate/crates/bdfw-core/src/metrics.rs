//! Post-purification evaluation metrics: clean accuracy, poisoned
//! accuracy against original labels, and attack success rate.

use crate::data::Dataset;
use crate::error::{BdfwError, Result};
use crate::tensor::{ImageTensor, LabeledImage};
use crate::trigger::{apply_trigger, TriggerSpec};
use crate::victim::VictimModel;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::PathBuf;

const EVAL_BATCH: usize = 64;

/// Batch image transform applied before the model sees anything.
pub type Purifier<'a> = dyn FnMut(&[ImageTensor]) -> Result<Vec<ImageTensor>> + 'a;

/// The do-nothing purifier (the undefended baseline).
pub fn identity_purifier() -> impl FnMut(&[ImageTensor]) -> Result<Vec<ImageTensor>> {
    |imgs: &[ImageTensor]| Ok(imgs.to_vec())
}

fn predictions(
    model: &mut VictimModel,
    purifier: &mut Purifier,
    records: &[LabeledImage],
) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(records.len());
    for chunk in records.chunks(EVAL_BATCH) {
        let imgs: Vec<ImageTensor> = chunk.iter().map(|r| r.image.clone()).collect();
        let purified = purifier(&imgs)?;
        let (p, _) = model.predict(&purified)?;
        preds.extend(p);
    }
    Ok(preds)
}

/// CA: fraction of clean inputs still classified correctly after
/// purification, ×100.
pub fn clean_accuracy(
    model: &mut VictimModel,
    purifier: &mut Purifier,
    clean: &Dataset,
) -> Result<f64> {
    if clean.records.is_empty() {
        return Err(BdfwError::EmptySet);
    }
    let preds = predictions(model, purifier, &clean.records)?;
    let hits = preds
        .iter()
        .zip(clean.records.iter())
        .filter(|(p, r)| **p == r.label)
        .count();
    Ok(100.0 * hits as f64 / clean.records.len() as f64)
}

/// PA: fraction of poisoned inputs classified as their original
/// (pre-attack) class after purification, ×100.
pub fn poisoned_accuracy(
    model: &mut VictimModel,
    purifier: &mut Purifier,
    poisoned: &Dataset,
) -> Result<f64> {
    if poisoned.records.is_empty() {
        return Err(BdfwError::EmptySet);
    }
    if let Some(r) = poisoned.records.iter().find(|r| !r.is_poisoned) {
        return Err(BdfwError::Dataset(format!(
            "poisoned-accuracy set contains an unpoisoned record (label {})",
            r.label
        )));
    }
    let preds = predictions(model, purifier, &poisoned.records)?;
    let hits = preds
        .iter()
        .zip(poisoned.records.iter())
        .filter(|(p, r)| **p == r.original_label)
        .count();
    Ok(100.0 * hits as f64 / poisoned.records.len() as f64)
}

/// ASR: fraction of poisoned inputs still classified as the attacker's
/// target after purification, ×100.
pub fn attack_success_rate(
    model: &mut VictimModel,
    purifier: &mut Purifier,
    poisoned: &Dataset,
    target_class: usize,
) -> Result<f64> {
    if poisoned.records.is_empty() {
        return Err(BdfwError::EmptySet);
    }
    let preds = predictions(model, purifier, &poisoned.records)?;
    let hits = preds.iter().filter(|p| **p == target_class).count();
    Ok(100.0 * hits as f64 / poisoned.records.len() as f64)
}

/// Stamp the trigger onto every test record whose ground truth is not the
/// target class, so ASR and PA are unambiguous.
pub fn build_poisoned_eval_set(clean_test: &Dataset, trigger: &TriggerSpec) -> Result<Dataset> {
    let target = trigger.target_class();
    let mut records = Vec::new();
    for r in &clean_test.records {
        if r.label == target {
            continue;
        }
        let image = apply_trigger(&r.image, trigger)?;
        records.push(LabeledImage {
            image,
            label: target,
            is_poisoned: true,
            original_label: r.label,
        });
    }
    if records.is_empty() {
        return Err(BdfwError::EmptySet);
    }
    Ok(Dataset {
        records,
        num_classes: clean_test.num_classes,
        split: clean_test.split,
    })
}

/// One experiment's evaluation summary plus bookkeeping.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PurifyReport {
    pub ca: f64,
    pub pa: f64,
    pub asr: f64,
    /// Seconds per pipeline stage, summed over all evaluation batches.
    pub stage_seconds: BTreeMap<String, f64>,
    pub total_seconds: f64,
    pub n_clean: usize,
    pub n_poisoned: usize,
    pub config_hash: String,
    pub artifact_paths: Vec<PathBuf>,
}

impl PurifyReport {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("CA", self.ca), ("PA", self.pa), ("ASR", self.asr)] {
            if !(0.0..=100.0).contains(&v) {
                return Err(BdfwError::InvalidParam(format!("{name} = {v} out of range")));
            }
        }
        Ok(())
    }

    pub fn csv_header() -> &'static str {
        "config_hash,ca,pa,asr,n_clean,n_poisoned,total_seconds"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.4},{:.4},{:.4},{},{},{:.3}",
            self.config_hash,
            self.ca,
            self.pa,
            self.asr,
            self.n_clean,
            self.n_poisoned,
            self.total_seconds
        )
    }
}

/// Deterministic short hash of any serializable config.
pub fn config_hash<T: Serialize>(cfg: &T) -> String {
    use sha2::{Digest, Sha256};
    let json = serde_json::to_string(cfg).expect("config serializes");
    let digest = Sha256::digest(json.as_bytes());
    hex::encode(&digest[..8])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_shapes_dataset, Dataset};
    use crate::rng::seeded_rng;
    use crate::trigger::badnets_spec;
    use crate::victim::{train_victim, TrainConfig, VictimConfig};

    fn tiny_model(num_classes: usize) -> VictimModel {
        // single fast-trained model reused across metric tests
        let ds = make_shapes_dataset(24, num_classes, 920).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 0.0,
            augment_noise: 0.0,
        };
        let mut rng = seeded_rng(921, "victim");
        train_victim(&ds, &VictimConfig::small(num_classes), &cfg, &mut rng).unwrap()
    }

    fn relabel(ds: &mut Dataset, model: &mut VictimModel) -> Vec<usize> {
        // ground the tests in whatever the model actually predicts
        let imgs: Vec<ImageTensor> = ds.records.iter().map(|r| r.image.clone()).collect();
        let (preds, _) = model.predict(&imgs).unwrap();
        preds
    }

    #[test]
    fn clean_accuracy_hand_counts() {
        let mut model = tiny_model(3);
        let mut ds = make_shapes_dataset(3, 3, 922).unwrap();
        let preds = relabel(&mut ds, &mut model);
        // all labels match predictions -> 100
        for (r, p) in ds.records.iter_mut().zip(preds.iter()) {
            r.label = *p;
        }
        let mut ident = identity_purifier();
        assert_eq!(clean_accuracy(&mut model, &mut ident, &ds).unwrap(), 100.0);
        // all labels wrong -> 0
        for (r, p) in ds.records.iter_mut().zip(preds.iter()) {
            r.label = (*p + 1) % 3;
        }
        assert_eq!(clean_accuracy(&mut model, &mut ident, &ds).unwrap(), 0.0);
        // {right, wrong, right} -> 66.67
        ds.records[0].label = preds[0];
        ds.records[1].label = (preds[1] + 1) % 3;
        ds.records[2].label = preds[2];
        let got = clean_accuracy(&mut model, &mut ident, &ds).unwrap();
        assert!((got - 200.0 / 3.0).abs() < 1e-9);
        let empty = Dataset {
            records: vec![],
            ..ds
        };
        assert!(clean_accuracy(&mut model, &mut ident, &empty).is_err());
    }

    #[test]
    fn poisoned_accuracy_hand_counts() {
        let mut model = tiny_model(4);
        let mut ds = make_shapes_dataset(4, 4, 923).unwrap();
        let preds = relabel(&mut ds, &mut model);
        for r in ds.records.iter_mut() {
            r.is_poisoned = true;
            r.label = 0;
        }
        // originals {pred, pred, other, other} -> 50.0
        ds.records[0].original_label = preds[0];
        ds.records[1].original_label = preds[1];
        ds.records[2].original_label = (preds[2] + 1) % 4;
        ds.records[3].original_label = (preds[3] + 2) % 4;
        let mut ident = identity_purifier();
        let got = poisoned_accuracy(&mut model, &mut ident, &ds).unwrap();
        assert_eq!(got, 50.0);
        // an unpoisoned record is rejected
        ds.records[1].is_poisoned = false;
        assert!(poisoned_accuracy(&mut model, &mut ident, &ds).is_err());
    }

    #[test]
    fn asr_hand_counts_and_pa_asr_bound() {
        let mut model = tiny_model(4);
        let mut ds = make_shapes_dataset(4, 4, 924).unwrap();
        let preds = relabel(&mut ds, &mut model);
        for (r, p) in ds.records.iter_mut().zip(preds.iter()) {
            r.is_poisoned = true;
            r.label = 9; // target marker, unused by ASR math
            r.original_label = (*p + 1) % 4; // never equals the prediction
        }
        // exactly one record's prediction counted as the target
        let target = preds[2];
        let hits = preds.iter().filter(|p| **p == target).count();
        let mut ident = identity_purifier();
        let asr = attack_success_rate(&mut model, &mut ident, &ds, target).unwrap();
        assert_eq!(asr, 100.0 * hits as f64 / 4.0);
        // model never outputs class 99 -> 0
        assert_eq!(
            attack_success_rate(&mut model, &mut ident, &ds, 99).unwrap(),
            0.0
        );
        // targets differ from all originals: PA + ASR ≤ 100
        for r in ds.records.iter_mut() {
            r.original_label = 3;
        }
        let eval_target = 1;
        for r in ds.records.iter_mut() {
            assert_ne!(r.original_label, eval_target);
        }
        let pa = poisoned_accuracy(&mut model, &mut ident, &ds).unwrap();
        let asr = attack_success_rate(&mut model, &mut ident, &ds, eval_target).unwrap();
        assert!(pa + asr <= 100.0 + 1e-9);
    }

    #[test]
    fn poisoned_eval_set_excludes_target_class() {
        let ds = make_shapes_dataset(40, 4, 925).unwrap();
        let spec = badnets_spec(32, 32, 2);
        let poisoned = build_poisoned_eval_set(&ds, &spec).unwrap();
        assert!(!poisoned.records.is_empty());
        for r in &poisoned.records {
            assert!(r.is_poisoned);
            assert_eq!(r.label, 2);
            assert_ne!(r.original_label, 2);
        }
        let n_target = ds.records.iter().filter(|r| r.label == 2).count();
        assert_eq!(poisoned.records.len(), ds.records.len() - n_target);
    }

    #[test]
    fn report_round_trip_and_validation() {
        let mut report = PurifyReport {
            ca: 87.5,
            pa: 80.0,
            asr: 3.25,
            stage_seconds: [("stage1".to_string(), 0.5), ("stage3".to_string(), 4.0)]
                .into_iter()
                .collect(),
            total_seconds: 5.0,
            n_clean: 200,
            n_poisoned: 180,
            config_hash: "deadbeef".into(),
            artifact_paths: vec![PathBuf::from("artifacts/mask0.png")],
        };
        report.validate().unwrap();
        let json = serde_json::to_string(&report).unwrap();
        let back: PurifyReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
        assert!(report.csv_row().starts_with("deadbeef,87.5"));
        report.asr = 101.0;
        assert!(report.validate().is_err());
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let a = crate::pipeline::PipelineConfig::default();
        let h1 = config_hash(&a);
        let h2 = config_hash(&a);
        assert_eq!(h1, h2);
        assert_eq!(h1.len(), 16);
        let mut b = crate::pipeline::PipelineConfig::default();
        b.seed = 7;
        assert_ne!(h1, config_hash(&b));
    }
}
