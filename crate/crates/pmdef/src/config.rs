//! Experiment configuration: one JSON document per experiment.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use pmdef_core::attacks::{AttackConfig, AttackKind, LabelSource, TargetMode};
use pmdef_core::data::{synth_dataset, Dataset, SynthKind};
use pmdef_core::defence::{EnsembleSpec, DEFAULT_FPR};
use pmdef_core::eval::{CorruptionKind, ALL_CORRUPTIONS};
use pmdef_core::nn::{ModelSpec, Preprocessing};
use pmdef_core::train::{DefenceLoss, OptimizerConfig, OptimizerKind};

use crate::error::{Error, Result};
use crate::{idx, io};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetRef {
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        limit: Option<usize>,
    },
    Cifar {
        files: Vec<PathBuf>,
        #[serde(default)]
        limit: Option<usize>,
    },
    Synth {
        pattern: SynthKind,
        n: usize,
        size: usize,
        classes: usize,
        seed: u64,
    },
}

impl DatasetRef {
    fn files_mut(&mut self) -> Vec<&mut PathBuf> {
        match self {
            DatasetRef::Idx { images, labels, .. } => vec![images, labels],
            DatasetRef::Cifar { files, .. } => files.iter_mut().collect(),
            DatasetRef::Synth { .. } => Vec::new(),
        }
    }

    pub fn load(&self) -> Result<Dataset> {
        let (d, limit) = match self {
            DatasetRef::Idx { images, labels, limit } => (idx::parse_idx(images, labels)?, *limit),
            DatasetRef::Cifar { files, limit } => (idx::parse_cifar_binary(files)?, *limit),
            DatasetRef::Synth {
                pattern,
                n,
                size,
                classes,
                seed,
            } => (synth_dataset(*pattern, *n, *size, *classes, *seed)?, None),
        };
        Ok(match limit {
            Some(k) => d.head(k),
            None => d,
        })
    }
}

/// Built-in architectures; input shape and class count come from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case", deny_unknown_fields)]
pub enum Preset {
    MnistCnn,
    Mlp {
        hidden: Vec<usize>,
    },
    DenseAutoencoder {
        hidden: usize,
        latent: usize,
        #[serde(default = "yes")]
        sigmoid_output: bool,
    },
    ConvAutoencoder {
        filters: Vec<usize>,
        latent: usize,
        hidden: usize,
        #[serde(default = "yes")]
        sigmoid_output: bool,
    },
    CifarDenseAutoencoder,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelRef {
    Preset(Preset),
    Inline { spec: ModelSpec },
}

impl ModelRef {
    pub fn resolve(&self, name: &str, input_shape: &[usize], classes: usize) -> Result<ModelSpec> {
        let spec = match self {
            ModelRef::Inline { spec } => spec.clone(),
            ModelRef::Preset(Preset::MnistCnn) => ModelSpec::mnist_classifier(),
            ModelRef::Preset(Preset::Mlp { hidden }) => ModelSpec::mlp_classifier(name, input_shape, hidden, classes),
            ModelRef::Preset(Preset::DenseAutoencoder {
                hidden,
                latent,
                sigmoid_output,
            }) => ModelSpec::dense_autoencoder(name, input_shape, *hidden, *latent, *sigmoid_output),
            ModelRef::Preset(Preset::ConvAutoencoder {
                filters,
                latent,
                hidden,
                sigmoid_output,
            }) => ModelSpec::conv_autoencoder(name, input_shape, filters, *latent, *hidden, *sigmoid_output),
            ModelRef::Preset(Preset::CifarDenseAutoencoder) => ModelSpec::cifar_dense_autoencoder(),
        };
        if spec.input_shape != input_shape {
            return Err(Error::Config(format!(
                "model {:?} expects input {:?} but the dataset provides {input_shape:?}",
                spec.name, spec.input_shape
            )));
        }
        spec.shapes()?;
        Ok(spec)
    }
}

/// Optimiser settings; the seed is derived from the experiment seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    #[serde(default = "OptimizerKind::adam")]
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub lr_schedule: Vec<(usize, f64)>,
}

impl TrainSettings {
    pub fn optimizer(&self, seed: u64) -> OptimizerConfig {
        OptimizerConfig {
            optimizer: self.optimizer,
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed,
            lr_schedule: self.lr_schedule.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierSection {
    pub model: ModelRef,
    pub train: TrainSettings,
    #[serde(default)]
    pub standardize: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoencoderSection {
    pub model: ModelRef,
    pub train: TrainSettings,
    /// Save an intermediate checkpoint every this many epochs (0: never).
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
}

fn default_checkpoint_every() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenceEntry {
    pub name: String,
    pub loss: DefenceLoss,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackEntry {
    pub name: String,
    pub attack: AttackKind,
    #[serde(default)]
    pub target: TargetMode,
    /// Defence attacked through in white-box mode.
    #[serde(default)]
    pub defence: Option<String>,
    #[serde(default)]
    pub labels: LabelSource,
    /// Attack only the first `limit` test instances.
    #[serde(default)]
    pub limit: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSection {
    pub defence: String,
    /// Training epochs whose checkpoints vote.
    pub epochs: Vec<usize>,
    /// Member weights; defaults to an even split of the ensemble share.
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
}

impl EnsembleSection {
    pub fn spec(&self) -> Result<EnsembleSpec> {
        Ok(match &self.weights {
            Some(w) => EnsembleSpec::new(w.clone())?,
            None => EnsembleSpec::uniform(self.epochs.len())?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftSection {
    #[serde(default = "all_corruptions")]
    pub kinds: Vec<CorruptionKind>,
    #[serde(default = "all_severities")]
    pub severities: Vec<usize>,
}

fn all_corruptions() -> Vec<CorruptionKind> {
    ALL_CORRUPTIONS.to_vec()
}

fn all_severities() -> Vec<usize> {
    (0..=5).collect()
}

impl Default for DriftSection {
    fn default() -> Self {
        DriftSection {
            kinds: all_corruptions(),
            severities: all_severities(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub train: DatasetRef,
    pub test: DatasetRef,
    /// Normal data for threshold calibration; the training set when absent.
    #[serde(default)]
    pub calibration: Option<DatasetRef>,
    pub classifier: ClassifierSection,
    pub autoencoder: AutoencoderSection,
    pub defences: Vec<DefenceEntry>,
    #[serde(default)]
    pub attacks: Vec<AttackEntry>,
    #[serde(default = "default_fpr")]
    pub fpr: f64,
    #[serde(default)]
    pub ensemble: Option<EnsembleSection>,
    #[serde(default)]
    pub drift: DriftSection,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
}

fn default_fpr() -> f64 {
    DEFAULT_FPR
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    /// Parses a config; relative paths resolve against `base`.
    pub fn from_json(text: &str, base: &Path) -> Result<ExperimentConfig> {
        let mut cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for d in [Some(&mut cfg.train), Some(&mut cfg.test), cfg.calibration.as_mut()].into_iter().flatten() {
            d.files_mut().into_iter().for_each(join);
        }
        join(&mut cfg.out_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = String::from_utf8(io::read(path)?).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_json(&text, base)
    }

    pub fn validate(&self) -> Result<()> {
        for d in [Some(&self.train), Some(&self.test), self.calibration.as_ref()].into_iter().flatten() {
            let mut d = d.clone();
            for f in d.files_mut() {
                io::require(f)?;
            }
        }
        if !(0.0..=1.0).contains(&self.fpr) {
            return Err(Error::Config(format!("fpr must lie in [0, 1], got {}", self.fpr)));
        }
        if self.defences.is_empty() {
            return Err(Error::Config("at least one defence is required".into()));
        }
        unique("defence", self.defences.iter().map(|d| &d.name))?;
        unique("attack", self.attacks.iter().map(|a| &a.name))?;
        for d in &self.defences {
            check_name(&d.name)?;
            d.loss.validate()?;
        }
        for a in &self.attacks {
            check_name(&a.name)?;
            a.attack.validate()?;
            match (&a.target, &a.defence) {
                (TargetMode::WhiteBox, None) => {
                    return Err(Error::Config(format!("white-box attack {:?} names no defence", a.name)));
                }
                (_, Some(d)) if self.defence(d).is_none() => {
                    return Err(Error::Config(format!("attack {:?} names unknown defence {d:?}", a.name)));
                }
                _ => {}
            }
        }
        if let Some(e) = &self.ensemble {
            if self.defence(&e.defence).is_none() {
                return Err(Error::Config(format!("ensemble names unknown defence {:?}", e.defence)));
            }
            let every = self.autoencoder.checkpoint_every;
            if let Some(&bad) = e.epochs.iter().find(|&&ep| every == 0 || ep == 0 || ep % every != 0) {
                return Err(Error::Config(format!("ensemble epoch {bad} is not a multiple of checkpoint_every {every}")));
            }
            e.spec()?;
        }
        for s in &self.drift.severities {
            if *s > 5 {
                return Err(Error::Config(format!("drift severity {s} outside 0..=5")));
            }
        }
        Ok(())
    }

    pub fn defence(&self, name: &str) -> Option<&DefenceEntry> {
        self.defences.iter().find(|d| d.name == name)
    }

    pub fn attack_config(&self, entry: &AttackEntry, seed: u64) -> AttackConfig {
        AttackConfig {
            attack: entry.attack.clone(),
            target: entry.target,
            labels: entry.labels,
            seed,
        }
    }

    pub fn classifier_preprocessing(&self) -> Preprocessing {
        Preprocessing {
            standardize: self.classifier.standardize,
        }
    }
}

fn unique<'a>(what: &str, names: impl Iterator<Item = &'a String>) -> Result<()> {
    let mut seen = BTreeSet::new();
    for n in names {
        if !seen.insert(n) {
            return Err(Error::Config(format!("duplicate {what} name {n:?}")));
        }
    }
    Ok(())
}

/// Names become file-name components.
fn check_name(name: &str) -> Result<()> {
    if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
        return Err(Error::Config(format!("name {name:?} must be non-empty ASCII letters, digits, '-' or '_'")));
    }
    Ok(())
}
