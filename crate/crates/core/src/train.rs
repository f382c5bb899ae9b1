//! Editor-only fine-tuning: Adam, linear warmup/decay, evaluation.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::editor::EditorSet;
use crate::error::{MrtError, Result};
use crate::model::{loss_and_grads, response_correct, EditPlan, ToyModel, Trainable};
use crate::parallel::{self, Execution};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; off when `None`.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Evaluate on the held-out set every this many steps (0 = only at the end).
    pub eval_every: usize,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 6e-4,
            batch_size: 32,
            epochs: 3,
            warmup_ratio: 0.03,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: None,
            seed: 0,
            eval_every: 0,
            execution: Execution::Parallel,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MrtError::Config(m.to_string()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return bad("warmup_ratio must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 || self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("weight_decay must be >= 0 and grad_clip > 0");
        }
        Ok(())
    }

    pub fn total_steps(&self, n_samples: usize) -> usize {
        self.epochs * n_samples.div_ceil(self.batch_size)
    }

    fn warmup_steps(&self, total: usize) -> usize {
        (self.warmup_ratio * total as f64).ceil() as usize
    }
}

/// Linear warmup from 0 to the peak rate, then linear decay to 0 at `total`.
pub fn lr_at(step: usize, total: usize, cfg: &TrainConfig) -> f64 {
    let warm = cfg.warmup_steps(total);
    if step >= total {
        return 0.0;
    }
    if step < warm {
        return cfg.learning_rate * step as f64 / warm as f64;
    }
    cfg.learning_rate * (total - step) as f64 / (total - warm) as f64
}

/// Adam with optional decoupled weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl Adam {
    pub fn new(params: &[&Tensor], cfg: &TrainConfig) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        }
    }

    /// Scalars under this optimizer's control.
    pub fn scalar_count(&self) -> usize {
        self.m.iter().map(Tensor::len).sum()
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    pub fn state(&self) -> crate::checkpoint::OptimizerState {
        crate::checkpoint::OptimizerState {
            step: self.t,
            m: self.m.clone(),
            v: self.v.clone(),
        }
    }

    /// Resumes from saved moments; they must match the parameter shapes.
    pub fn restore(&mut self, state: crate::checkpoint::OptimizerState) -> Result<()> {
        let same = |a: &[Tensor], b: &[Tensor]| {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.shape() == y.shape())
        };
        if !same(&state.m, &self.m) || !same(&state.v, &self.v) {
            return Err(MrtError::Dimension("optimizer state does not match the parameters".into()));
        }
        self.t = state.step;
        self.m = state.m;
        self.v = state.v;
        Ok(())
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, p) in params.iter_mut().enumerate() {
            let g = grads[k].data();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *w -= lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * *w);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub steps: Vec<StepRecord>,
    /// (step, accuracy) pairs on the held-out set.
    pub evals: Vec<(usize, f64)>,
    pub trainable_fraction: f64,
    pub trainable_params: usize,
    /// Scalars registered with the optimizer.
    pub optimizer_scalars: usize,
    /// Tensor names whose values changed during the run.
    pub updated_tensors: Vec<String>,
    pub wall_clock_secs: f64,
}

impl RunMetrics {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.evals.last().map(|e| e.1)
    }

    /// Mean loss over the first and last `window` steps.
    pub fn smoothed_endpoints(&self, window: usize) -> Option<(f64, f64)> {
        let n = self.steps.len();
        if n == 0 {
            return None;
        }
        let w = window.min(n);
        let mean = |s: &[StepRecord]| s.iter().map(|r| r.loss).sum::<f64>() / s.len() as f64;
        Some((mean(&self.steps[..w]), mean(&self.steps[n - w..])))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,lr\n");
        for r in &self.steps {
            s.push_str(&format!("{},{:.17e},{:.17e}\n", r.step, r.loss, r.lr));
        }
        s
    }
}

/// Mean loss and mean gradients over a batch, reduced in sample order.
pub fn batch_gradients(
    model: &ToyModel,
    editors: &EditorSet,
    plan: &EditPlan,
    batch: &[&Sample],
    which: Trainable,
    exec: Execution,
) -> Result<(f64, Vec<Tensor>)> {
    let results = parallel::map(exec, batch, |s| loss_and_grads(model, editors, plan, s, which));
    let mut loss = 0.0;
    let mut acc: Option<Vec<Tensor>> = None;
    for r in results {
        let (l, g) = r?;
        loss += l;
        match acc.as_mut() {
            None => acc = Some(g),
            Some(a) => {
                for (x, y) in a.iter_mut().zip(&g) {
                    x.add_scaled(y, 1.0);
                }
            }
        }
    }
    let n = batch.len() as f64;
    let mut grads = acc.unwrap_or_default();
    for g in &mut grads {
        for v in g.data_mut() {
            *v /= n;
        }
    }
    Ok((loss / n, grads))
}

fn clip(grads: &mut [Tensor], max_norm: Option<f64>) {
    if let Some(c) = max_norm {
        let norm = grads.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
        if norm > c {
            for g in grads.iter_mut() {
                for v in g.data_mut() {
                    *v *= c / norm;
                }
            }
        }
    }
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x2545_F491_4F6C_DD1D));
    order.shuffle(&mut rng);
    order
}

/// Options beyond [`TrainConfig`] for a training run.
#[derive(Default)]
pub struct TrainHooks<'a> {
    pub eval_set: Option<&'a [Sample]>,
    /// Called after every optimizer step with the step index and current editors.
    pub on_step: Option<&'a mut dyn FnMut(usize, &EditorSet)>,
}

/// Trains fresh editors for `plan`, seeded by `cfg.seed`.
pub fn train_editors(
    model: &ToyModel,
    plan: &EditPlan,
    dataset: &[Sample],
    cfg: &TrainConfig,
    eval_set: Option<&[Sample]>,
) -> Result<(EditorSet, RunMetrics)> {
    let editors = plan.init_editors(&model.config, cfg.seed)?;
    train_editors_from(
        model,
        plan,
        editors,
        dataset,
        cfg,
        TrainHooks {
            eval_set,
            on_step: None,
        },
    )
}

/// Trains the given editors; the base model is only read.
pub fn train_editors_from(
    model: &ToyModel,
    plan: &EditPlan,
    mut editors: EditorSet,
    dataset: &[Sample],
    cfg: &TrainConfig,
    mut hooks: TrainHooks<'_>,
) -> Result<(EditorSet, RunMetrics)> {
    cfg.validate()?;
    plan.validate(&model.config)?;
    if dataset.is_empty() {
        return Err(MrtError::Precondition("training dataset is empty".into()));
    }
    for s in dataset {
        plan.validate_prompt(s.prompt_len)?;
    }
    let start = Instant::now();
    let initial = editors.clone();
    let mut opt = Adam::new(&editors.tensors(), cfg);
    let total = cfg.total_steps(dataset.len());
    let mut metrics = RunMetrics {
        trainable_fraction: model.trainable_fraction(&editors),
        trainable_params: editors.param_count(),
        optimizer_scalars: opt.scalar_count(),
        ..Default::default()
    };
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(dataset.len(), cfg.seed, epoch);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &dataset[i]).collect();
            let (loss, mut grads) =
                batch_gradients(model, &editors, plan, &batch, Trainable::Editors, cfg.execution)?;
            if !loss.is_finite() {
                return Err(MrtError::Diverged { step, loss });
            }
            clip(&mut grads, cfg.grad_clip);
            let lr = lr_at(step, total, cfg);
            opt.step(&mut editors.tensors_mut(), &grads, lr);
            metrics.steps.push(StepRecord { step, loss, lr });
            step += 1;
            if let Some(f) = hooks.on_step.as_mut() {
                f(step, &editors);
            }
            if let Some(ev) = hooks.eval_set {
                if cfg.eval_every > 0 && step % cfg.eval_every == 0 && step < total {
                    metrics.evals.push((step, evaluate(model, &editors, plan, ev, cfg.execution)?));
                }
            }
        }
    }
    if let Some(ev) = hooks.eval_set {
        metrics.evals.push((step, evaluate(model, &editors, plan, ev, cfg.execution)?));
    }
    metrics.updated_tensors = editors
        .tensor_names()
        .into_iter()
        .zip(editors.tensors().into_iter().zip(initial.tensors()))
        .filter(|(_, (a, b))| a != b)
        .map(|(n, _)| n)
        .collect();
    metrics.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok((editors, metrics))
}

/// Fraction of samples whose greedy answer matches the gold response exactly.
pub fn evaluate(
    model: &ToyModel,
    editors: &EditorSet,
    plan: &EditPlan,
    dataset: &[Sample],
    exec: Execution,
) -> Result<f64> {
    if dataset.is_empty() {
        return Ok(0.0);
    }
    let hits = parallel::map(exec, dataset, |s| response_correct(model, s, editors, plan));
    let mut correct = 0usize;
    for h in hits {
        correct += h? as usize;
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Mean loss over a dataset (no gradients).
pub fn mean_loss(
    model: &ToyModel,
    editors: &EditorSet,
    plan: &EditPlan,
    dataset: &[Sample],
    exec: Execution,
) -> Result<f64> {
    let losses = parallel::map(exec, dataset, |s| crate::model::forward_loss(model, s, editors, plan));
    let mut sum = 0.0;
    for l in losses {
        sum += l?;
    }
    Ok(sum / dataset.len() as f64)
}
