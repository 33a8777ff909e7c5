use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Modality, ModalityWidths, SynthSpec};
use crate::nn::{Architecture, FusionConfig};
use crate::objectives::{LossWeights, MatchMode};
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config value `{key}` = {value}: {reason}")]
    Invalid { key: String, value: String, reason: String },
    #[error("config section `{0}` is required for this command")]
    Missing(String),
}

fn invalid(key: &str, value: impl std::fmt::Display, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        value: value.to_string(),
        reason: reason.into(),
    }
}

/// Exactly one of `path` or `spec`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub path: Option<PathBuf>,
    pub spec: Option<SynthSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub folds: usize,
    pub stratified: bool,
    pub match_mode: MatchMode,
    pub alignment: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            folds: 5,
            stratified: true,
            match_mode: t.match_mode,
            alignment: t.alignment,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// Modality subsets: unimodal direct, bimodal cross-attention pair,
    /// trimodal full model.
    Modality,
    /// Aggregation and cross-attention switched on and off.
    Modules,
    /// Sweep of the alignment mixing weight plus an `α = 0` row.
    Lambda,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModuleSwitch {
    pub ima: bool,
    pub tcaf: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub protocols: Vec<Protocol>,
    pub modality_subsets: Vec<Vec<Modality>>,
    pub module_grid: Vec<ModuleSwitch>,
    pub lambdas: Vec<f64>,
    /// Adds the `α = 0` row to the λ sweep.
    pub baseline: bool,
}

impl Default for AblationSection {
    fn default() -> Self {
        use Modality::*;
        Self {
            protocols: vec![Protocol::Modality, Protocol::Modules, Protocol::Lambda],
            modality_subsets: vec![
                vec![Vision],
                vec![Radiomics],
                vec![Clinical],
                vec![Vision, Radiomics],
                vec![Vision, Clinical],
                vec![Radiomics, Clinical],
                vec![Vision, Radiomics, Clinical],
            ],
            module_grid: [(false, false), (true, false), (false, true), (true, true)]
                .map(|(ima, tcaf)| ModuleSwitch { ima, tcaf })
                .to_vec(),
            lambdas: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
            baseline: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckSection {
    pub step: f64,
    pub tolerance: f64,
    pub magnitude_floor: f64,
    pub batch: usize,
    pub widths: ModalityWidths,
    pub model: FusionConfig,
    /// Operation whose backward rule is scaled by `fault_factor`, e.g.
    /// `"softmax"`; used to confirm the checker catches a wrong rule.
    pub inject_fault: Option<String>,
    pub fault_factor: f64,
}

impl Default for GradCheckSection {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-4,
            magnitude_floor: 1e-6,
            batch: 3,
            widths: ModalityWidths {
                vision: 12,
                radiomics: 10,
                clinical: 6,
            },
            model: FusionConfig::micro(),
            inject_fault: None,
            fault_factor: 1.5,
        }
    }
}

/// Everything a command needs, parsed from one TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds initialization, shuffling and fold assignment.
    pub seed: u64,
    pub out: PathBuf,
    pub workers: usize,
    pub dataset: DatasetSection,
    pub model: FusionConfig,
    pub architecture: Architecture,
    pub train: TrainSection,
    pub loss: LossWeights,
    pub ablation: AblationSection,
    pub gradcheck: GradCheckSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("."),
            workers: 1,
            dataset: DatasetSection::default(),
            model: FusionConfig::default(),
            architecture: Architecture::full(),
            train: TrainSection::default(),
            loss: LossWeights::default(),
            ablation: AblationSection::default(),
            gradcheck: GradCheckSection::default(),
        }
    }
}

/// Command-line values that replace config scalars.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    pub lambda: Option<f64>,
    pub alpha: Option<f64>,
    pub epochs: Option<usize>,
    pub batch: Option<usize>,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    /// Reads a config file; relative paths inside it stay relative to the
    /// working directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// `--seed` also reseeds an inline dataset spec so one flag changes the
    /// whole run.
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
            if let Some(spec) = &mut self.dataset.spec {
                spec.seed = seed;
            }
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        if let Some(w) = o.workers {
            self.workers = w;
        }
        if let Some(l) = o.lambda {
            self.loss.lambda = l;
        }
        if let Some(a) = o.alpha {
            self.loss.alpha = a;
        }
        if let Some(e) = o.epochs {
            self.train.epochs = e;
        }
        if let Some(b) = o.batch {
            self.train.batch_size = b;
        }
    }

    /// Checks every section; no command starts on a partially valid config.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.workers == 0 {
            return Err(invalid("workers", 0, "must be at least 1"));
        }
        match (&self.dataset.path, &self.dataset.spec) {
            (Some(p), Some(_)) => {
                return Err(invalid(
                    "dataset.path",
                    p.display(),
                    "give either dataset.path or dataset.spec, not both",
                ))
            }
            (None, Some(spec)) => spec
                .validate()
                .map_err(|e| invalid("dataset.spec", "{..}", e.to_string()))?,
            _ => {}
        }
        self.model
            .validate()
            .map_err(|e| invalid("model", format!("{:?}", self.model), e.to_string()))?;
        if self.architecture.modalities.is_empty() {
            return Err(invalid("architecture.modalities", "[]", "must name at least one modality"));
        }
        Architecture::new(
            self.architecture.modalities.clone(),
            self.architecture.ima,
            self.architecture.tcaf,
        )
        .map_err(|e| invalid("architecture.modalities", format!("{:?}", self.architecture.modalities), e.to_string()))?;

        let t = &self.train;
        if t.epochs == 0 {
            return Err(invalid("train.epochs", t.epochs, "must be at least 1"));
        }
        if t.batch_size < 2 {
            return Err(invalid("train.batch_size", t.batch_size, "must be at least 2"));
        }
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return Err(invalid("train.learning_rate", t.learning_rate, "must be positive"));
        }
        if t.folds < 2 {
            return Err(invalid("train.folds", t.folds, "must be at least 2"));
        }

        let l = &self.loss;
        if !(0.0..=1.0).contains(&l.lambda) {
            return Err(invalid("loss.lambda", l.lambda, "must be in [0, 1]"));
        }
        if !(l.alpha >= 0.0 && l.alpha.is_finite()) {
            return Err(invalid("loss.alpha", l.alpha, "must be >= 0"));
        }
        if !(l.tau > 0.0 && l.tau.is_finite()) {
            return Err(invalid("loss.tau", l.tau, "must be > 0"));
        }
        if !(l.epsilon > 0.0 && l.epsilon.is_finite()) {
            return Err(invalid("loss.epsilon", l.epsilon, "must be > 0"));
        }

        let a = &self.ablation;
        for (i, &lambda) in a.lambdas.iter().enumerate() {
            if !(0.0..=1.0).contains(&lambda) {
                return Err(invalid(&format!("ablation.lambdas[{i}]"), lambda, "must be in [0, 1]"));
            }
        }
        for (i, subset) in a.modality_subsets.iter().enumerate() {
            Architecture::new(subset.clone(), true, true).map_err(|e| {
                invalid(
                    &format!("ablation.modality_subsets[{i}]"),
                    format!("{subset:?}"),
                    if subset.is_empty() {
                        "must be nonempty".to_string()
                    } else {
                        e.to_string()
                    },
                )
            })?;
        }

        let g = &self.gradcheck;
        if !(1e-7..=1e-3).contains(&g.step) {
            return Err(invalid("gradcheck.step", g.step, "must lie in [1e-7, 1e-3]"));
        }
        if !(g.tolerance > 0.0 && g.tolerance.is_finite()) {
            return Err(invalid("gradcheck.tolerance", g.tolerance, "must be > 0"));
        }
        if !(g.magnitude_floor > 0.0 && g.magnitude_floor.is_finite()) {
            return Err(invalid("gradcheck.magnitude_floor", g.magnitude_floor, "must be > 0"));
        }
        if g.batch < 2 {
            return Err(invalid("gradcheck.batch", g.batch, "must be at least 2"));
        }
        if Modality::ALL.iter().any(|&m| g.widths.get(m) == 0) {
            return Err(invalid("gradcheck.widths", format!("{:?}", g.widths), "widths must be positive"));
        }
        g.model
            .validate()
            .map_err(|e| invalid("gradcheck.model", format!("{:?}", g.model), e.to_string()))?;
        if let Some(op) = &g.inject_fault {
            if crate::autodiff::OpKind::parse(op).is_none() {
                return Err(invalid("gradcheck.inject_fault", op, "unknown operation"));
            }
        }
        Ok(())
    }

    /// Training configuration for the main architecture.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            seed: self.seed,
            match_mode: self.train.match_mode,
            alignment: self.train.alignment,
            loss: self.loss,
            model: self.model,
            architecture: self.architecture.clone(),
        }
    }
}
