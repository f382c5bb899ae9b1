//! Full-parameter pretraining of the base model. The result is then frozen.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::TaskMix;
use crate::editor::EditorSet;
use crate::error::{MrtError, Result};
use crate::model::{EditPlan, ToyModel, ToyModelConfig, Trainable};
use crate::parallel::Execution;
use crate::train::{batch_gradients, lr_at, Adam, RunMetrics, StepRecord, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub mix: TaskMix,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub warmup_ratio: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            mix: TaskMix::default(),
            epochs: 12,
            learning_rate: 3e-3,
            batch_size: 32,
            warmup_ratio: 0.05,
        }
    }
}

impl PretrainConfig {
    pub fn competent() -> Self {
        Self {
            mix: TaskMix::competent(),
            ..Self::default()
        }
    }

    /// Zero epochs is allowed and yields the untrained initialization.
    pub fn validate(&self) -> Result<()> {
        TrainConfig {
            epochs: self.epochs.max(1),
            ..self.as_train_config(0, Execution::Sequential)
        }
        .validate()
    }

    fn as_train_config(&self, seed: u64, execution: Execution) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            warmup_ratio: self.warmup_ratio,
            seed,
            execution,
            ..TrainConfig::default()
        }
    }
}

/// Pretrains a base model on `task_mix` with the default schedule.
pub fn pretrain_base(config: ToyModelConfig, seed: u64, task_mix: &TaskMix) -> Result<ToyModel> {
    let pcfg = PretrainConfig {
        mix: task_mix.clone(),
        ..PretrainConfig::default()
    };
    Ok(pretrain_base_with(config, seed, &pcfg, Execution::Parallel)?.0)
}

/// Pretrains every base weight with Adam; zero epochs returns the random init.
pub fn pretrain_base_with(
    config: ToyModelConfig,
    seed: u64,
    pcfg: &PretrainConfig,
    execution: Execution,
) -> Result<(ToyModel, RunMetrics)> {
    let mut model = ToyModel::init(config, seed)?;
    let data = pcfg.mix.build(seed)?;
    pcfg.validate()?;
    let tcfg = pcfg.as_train_config(seed, execution);
    let plan = EditPlan::none();
    let editors = EditorSet::new();
    let mut opt = Adam::new(&model.weights.tensors.iter().collect::<Vec<_>>(), &tcfg);
    let total = tcfg.total_steps(data.len());
    let mut metrics = RunMetrics::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ba5e);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    for _ in 0..pcfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(tcfg.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| &data[i]).collect();
            let (loss, grads) =
                batch_gradients(&model, &editors, &plan, &batch, Trainable::Base, execution)?;
            if !loss.is_finite() {
                return Err(MrtError::Diverged { step, loss });
            }
            let lr = lr_at(step, total, &tcfg);
            opt.step(&mut model.weights.tensors.iter_mut().collect::<Vec<_>>(), &grads, lr);
            metrics.steps.push(StepRecord { step, loss, lr });
            step += 1;
        }
    }
    Ok((model, metrics))
}
