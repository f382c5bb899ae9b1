//! Run configuration: one JSON document covering every subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::control::{ControlConfig, ControlScenario};
use crate::data::{make_dataset_with, Sample, Split, Task, TemplateId};
use crate::diagnostics::{LandscapeSpec, SweepSpec};
use crate::error::{MrtError, Result};
use crate::model::{EditPlan, ToyModelConfig};
use crate::pretrain::PretrainConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub task: Task,
    /// Defaults to the task's own template.
    pub template: Option<TemplateId>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            task: Task::Classify,
            template: None,
            train_per_class: 200,
            test_per_class: 50,
            seed: 1,
        }
    }
}

impl DataConfig {
    pub fn template(&self) -> TemplateId {
        self.template.unwrap_or(self.task.default_template())
    }

    pub fn split(&self, split: Split) -> Result<Vec<Sample>> {
        let n = match split {
            Split::Train => self.train_per_class,
            Split::Test => self.test_per_class,
        };
        make_dataset_with(self.task, self.template(), n, self.seed, split, None)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Frozen base checkpoint consumed by training, control and sweeps.
    pub base_checkpoint: Option<PathBuf>,
    /// Trained checkpoint consumed by eval, control-eval and landscape.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds base initialization and pretraining.
    pub seed: u64,
    pub model: ToyModelConfig,
    pub pretrain: PretrainConfig,
    pub plan: EditPlan,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub scenario: ControlScenario,
    pub control: ControlConfig,
    pub sweep: SweepSpec,
    pub landscape: LandscapeSpec,
    /// Samples from the training split used for landscape losses.
    pub landscape_samples: usize,
    pub paths: Paths,
    /// Worker threads; `MRT_THREADS` overrides when set.
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            model: ToyModelConfig::default(),
            pretrain: PretrainConfig::default(),
            plan: EditPlan::default(),
            // the toy task gets a few hundred steps, far fewer than full-scale runs
            train: TrainConfig {
                learning_rate: 1e-2,
                ..TrainConfig::default()
            },
            data: DataConfig::default(),
            scenario: ControlScenario::misclassification(3),
            control: ControlConfig::default(),
            sweep: SweepSpec::default(),
            landscape: LandscapeSpec::default(),
            landscape_samples: 32,
            paths: Paths::default(),
            threads: None,
        }
    }
}

fn at<T>(section: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        MrtError::Config(m) => MrtError::Config(format!("{section}: {m}")),
        other => other,
    })
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| MrtError::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| MrtError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            MrtError::Config(m) => MrtError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        at("model", self.model.validate())?;
        at("plan", self.plan.validate(&self.model))?;
        at("train", self.train.validate())?;
        at("pretrain", self.pretrain.validate())?;
        at("scenario", self.scenario.validate())?;
        at("control.train", self.control.train.validate())?;
        at("sweep", self.sweep.validate(&self.model))?;
        if self.data.train_per_class == 0 || self.data.test_per_class == 0 {
            return Err(MrtError::Config(
                "data: train_per_class and test_per_class must be positive".into(),
            ));
        }
        let prompt = self.data.template().template().prompt_tokens(Some(0))?.len();
        at("plan", self.plan.validate_prompt(prompt))?;
        if self.landscape_samples == 0 {
            return Err(MrtError::Config("landscape_samples must be positive".into()));
        }
        if self.threads == Some(0) {
            return Err(MrtError::Config("threads must be positive".into()));
        }
        Ok(())
    }
}
