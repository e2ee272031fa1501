//! Run configuration: one TOML file describes the data, the attack, the
//! victim, the defense training budgets, and the purification pipeline.

use crate::data::{load_cifar_binary, make_shapes_dataset, Dataset};
use crate::error::{BdfwError, Result};
use crate::pipeline::PipelineConfig;
use crate::trigger::{
    badnets_spec, blended_default_pattern, make_sig_pattern, TriggerSpec,
};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const DATA_DIR_ENV: &str = "BDFW_DATA_DIR";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    /// Procedural shapes corpus; no files needed.
    Shapes,
    /// CIFAR-10 binary batches under the data directory.
    Cifar10,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub kind: DataKind,
    pub n_train: usize,
    pub n_test: usize,
    pub num_classes: usize,
    pub seed: u64,
    /// Overridden by the BDFW_DATA_DIR environment variable.
    pub dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            kind: DataKind::Shapes,
            n_train: 2000,
            n_test: 500,
            num_classes: 4,
            seed: 7,
            dir: None,
        }
    }
}

impl DataConfig {
    pub fn data_dir(&self) -> Option<PathBuf> {
        std::env::var_os(DATA_DIR_ENV)
            .map(PathBuf::from)
            .or_else(|| self.dir.clone())
    }

    /// Materialize (train, test) splits.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self.kind {
            DataKind::Shapes => {
                let train = make_shapes_dataset(self.n_train, self.num_classes, self.seed)?;
                let mut test =
                    make_shapes_dataset(self.n_test, self.num_classes, self.seed ^ 0x5EED)?;
                test.split = crate::data::Split::Test;
                Ok((train, test))
            }
            DataKind::Cifar10 => {
                let dir = self.data_dir().ok_or_else(|| {
                    BdfwError::Dataset(format!(
                        "cifar10 requires a data directory ({DATA_DIR_ENV} or data.dir)"
                    ))
                })?;
                let (train, test) = load_cifar_binary(&dir)?;
                let mut rng = crate::rng::RngStream::new(self.seed, "cifar-subset");
                let train = train.stratified_subset(self.n_train, &mut rng);
                let test = test.stratified_subset(self.n_test, &mut rng);
                Ok((train, test))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    /// 3×3 checkerboard corner patch (high visibility).
    Badnets,
    /// Full-image blend at a fixed alpha (semi visibility).
    Blended,
    /// Additive sinusoidal stripes (semi visibility).
    Sig,
    /// Imperceptible ±ε pattern (low visibility).
    Lvt,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub target_class: usize,
    pub poison_rate: f64,
    /// Blend weight for `blended`.
    pub alpha: f64,
    /// Stripe magnitude for `sig` (pixel scale).
    pub sig_delta: f64,
    /// Stripe frequency for `sig` (cycles per image width).
    pub sig_freq: f64,
    /// Perturbation amplitude for `lvt` (pixel scale).
    pub lvt_amplitude: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            kind: AttackKind::Badnets,
            target_class: 0,
            poison_rate: 0.10,
            alpha: 0.2,
            sig_delta: 0.08,
            sig_freq: 6.0,
            lvt_amplitude: 8.0 / 255.0,
        }
    }
}

impl AttackConfig {
    /// Concrete trigger for a given image geometry.
    pub fn to_spec(&self, height: usize, width: usize) -> Result<TriggerSpec> {
        let spec = match self.kind {
            AttackKind::Badnets => badnets_spec(height, width, self.target_class),
            AttackKind::Blended => TriggerSpec::SvtBlend {
                pattern: blended_default_pattern(height, width),
                blend_weight: self.alpha,
                target_class: self.target_class,
            },
            AttackKind::Sig => TriggerSpec::SvtAdditive {
                pattern: make_sig_pattern(height, width, self.sig_delta, self.sig_freq),
                target_class: self.target_class,
            },
            AttackKind::Lvt => TriggerSpec::LvtAdditive {
                amplitude: self.lvt_amplitude,
                target_class: self.target_class,
            },
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct VictimSection {
    pub width: usize,
    pub blocks_per_stage: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Upper bound of the per-image Gaussian noise std used as training
    /// augmentation (see `TrainConfig::augment_noise`).
    pub augment_noise: f64,
}

impl Default for VictimSection {
    fn default() -> Self {
        VictimSection {
            width: 8,
            blocks_per_stage: 1,
            epochs: 30,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 1e-4,
            augment_noise: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DefenseSection {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub ddpm_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub locator_width: usize,
    pub inpainter_width: usize,
    pub decleaner_width: usize,
    pub predictor_width: usize,
}

impl Default for DefenseSection {
    fn default() -> Self {
        DefenseSection {
            stage1_epochs: 10,
            stage2_epochs: 8,
            ddpm_epochs: 24,
            batch_size: 16,
            lr: 1e-3,
            locator_width: 8,
            inpainter_width: 8,
            decleaner_width: 8,
            predictor_width: 8,
        }
    }
}

/// Top-level experiment description, loadable from TOML.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub attack: AttackConfig,
    pub victim: VictimSection,
    pub defense: DefenseSection,
    pub pipeline: PipelineConfig,
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(s)
            .map_err(|e| BdfwError::InvalidParam(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        if !(self.attack.poison_rate > 0.0 && self.attack.poison_rate < 1.0) {
            return Err(BdfwError::InvalidParam(format!(
                "poison_rate {} outside (0,1)",
                self.attack.poison_rate
            )));
        }
        if self.attack.target_class >= self.data.num_classes {
            return Err(BdfwError::InvalidParam(format!(
                "target_class {} out of range for {} classes",
                self.attack.target_class, self.data.num_classes
            )));
        }
        Ok(())
    }
}
