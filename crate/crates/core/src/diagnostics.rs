//! Diagnostic sweeps over editor rank, depth, span length and edited segments,
//! plus loss-landscape grids around a trained editor set.
//!
//! Every cell trains from scratch with its own seed and shares nothing with
//! other cells, so cells run in any order (or in parallel) with identical results.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{make_dataset_with, Sample, Split, Task, TemplateId};
use crate::editor::EditorSet;
use crate::error::{MrtError, Result};
use crate::model::{EditPlan, ToyModel, ToyModelConfig};
use crate::parallel::{self, Execution};
use crate::tensor::Tensor;
use crate::train::{evaluate, mean_loss, train_editors, TrainConfig};

/// Editing-depth settings: first layer, alternating layers, first half,
/// latter half, all eligible layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthSetting {
    A,
    B,
    C,
    D,
    E,
}

impl DepthSetting {
    pub const ALL: [DepthSetting; 5] = [Self::A, Self::B, Self::C, Self::D, Self::E];

    pub fn parse(id: &str) -> Result<Self> {
        Ok(match id {
            "a" => Self::A,
            "b" => Self::B,
            "c" => Self::C,
            "d" => Self::D,
            "e" => Self::E,
            other => return Err(MrtError::Config(format!("unknown depth setting '{other}' (expected a-e)"))),
        })
    }

    pub fn id(self) -> &'static str {
        match self {
            Self::A => "a",
            Self::B => "b",
            Self::C => "c",
            Self::D => "d",
            Self::E => "e",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::A => "first layer",
            Self::B => "alternating layers",
            Self::C => "first half",
            Self::D => "latter half",
            Self::E => "all layers",
        }
    }
}

/// Which alternating index set setting (b) uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternation {
    #[default]
    Even,
    Odd,
}

/// Vision and decoder layer sets for a depth setting. The final vision layer
/// is never included. Half boundaries share their middle layer, as the
/// full-scale index lists do.
pub fn depth_setting(
    id: DepthSetting,
    model_cfg: &ToyModelConfig,
    alternation: Alternation,
) -> (BTreeSet<usize>, BTreeSet<usize>) {
    let eligible = model_cfg.eligible_vision_layers();
    let lv = model_cfg.vision_layers;
    let lt = model_cfg.decoder_layers;
    let parity = |l: &usize| match alternation {
        Alternation::Even => l % 2 == 0,
        Alternation::Odd => l % 2 == 1,
    };
    let (v, t): (BTreeSet<usize>, BTreeSet<usize>) = match id {
        DepthSetting::A => ([1].into(), [1].into()),
        DepthSetting::B => (
            eligible.iter().copied().filter(parity).collect(),
            (1..=lt).filter(parity).collect(),
        ),
        DepthSetting::C => ((1..=(lv / 2).max(1)).collect(), (1..=(lt / 2).max(1)).collect()),
        DepthSetting::D => (((lv / 2).max(1)..lv).collect(), ((lt / 2).max(1)..=lt).collect()),
        DepthSetting::E => (eligible.clone(), model_cfg.all_decoder_layers()),
    };
    (v.intersection(&eligible).copied().collect(), t)
}

/// How textual positions are edited in the segment ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentMode {
    PrefixOnly,
    SuffixOnly,
    Both,
    All,
}

impl SegmentMode {
    pub const ALL: [SegmentMode; 4] = [Self::PrefixOnly, Self::SuffixOnly, Self::Both, Self::All];

    pub fn id(self) -> &'static str {
        match self {
            Self::PrefixOnly => "prefix_only",
            Self::SuffixOnly => "suffix_only",
            Self::Both => "both",
            Self::All => "all",
        }
    }

    pub fn apply(self, plan: &EditPlan) -> EditPlan {
        let mut p = plan.clone();
        match self {
            Self::PrefixOnly => p.suffix_len = 0,
            Self::SuffixOnly => p.prefix_len = 0,
            Self::Both => {}
            Self::All => p.edit_all_text = true,
        }
        p
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    pub visual_ranks: Vec<usize>,
    pub multimodal_ranks: Vec<usize>,
    pub depth_settings: Vec<DepthSetting>,
    pub alternation: Alternation,
    pub lengths: Vec<usize>,
    pub segments: Vec<SegmentMode>,
    pub seeds: Vec<u64>,
    pub task: Task,
    pub template: TemplateId,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub data_seed: u64,
    /// Plan every cell starts from before its axis is applied.
    pub base_plan: EditPlan,
    pub train: TrainConfig,
    pub execution: Execution,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            visual_ranks: vec![2, 4, 6, 8],
            multimodal_ranks: vec![2, 4, 6, 8],
            depth_settings: DepthSetting::ALL.to_vec(),
            alternation: Alternation::Even,
            lengths: vec![2, 4, 6, 8, 10],
            segments: SegmentMode::ALL.to_vec(),
            seeds: vec![0, 1, 2],
            task: Task::Classify,
            template: TemplateId::Classify,
            train_per_class: 60,
            test_per_class: 20,
            data_seed: 5,
            base_plan: EditPlan::default(),
            train: TrainConfig {
                learning_rate: 1e-2,
                ..TrainConfig::default()
            },
            execution: Execution::Parallel,
        }
    }
}

impl SweepSpec {
    pub fn validate(&self, model_cfg: &ToyModelConfig) -> Result<()> {
        let bad = |m: String| Err(MrtError::Config(m));
        for (name, empty) in [
            ("visual_ranks", self.visual_ranks.is_empty()),
            ("multimodal_ranks", self.multimodal_ranks.is_empty()),
            ("depth_settings", self.depth_settings.is_empty()),
            ("lengths", self.lengths.is_empty()),
            ("segments", self.segments.is_empty()),
            ("seeds", self.seeds.is_empty()),
        ] {
            if empty {
                return bad(format!("sweep axis '{name}' is empty"));
            }
        }
        let max = model_cfg.d_v.min(model_cfg.d_t);
        if let Some(r) = self
            .visual_ranks
            .iter()
            .chain(&self.multimodal_ranks)
            .find(|&&r| r == 0 || r > max)
        {
            return bad(format!("sweep rank {r} outside 1..={max}"));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return bad("train_per_class and test_per_class must be positive".into());
        }
        self.train.validate()
    }

    pub fn datasets(&self) -> Result<(Vec<Sample>, Vec<Sample>)> {
        let tr = make_dataset_with(self.task, self.template, self.train_per_class, self.data_seed, Split::Train, None)?;
        let te = make_dataset_with(self.task, self.template, self.test_per_class, self.data_seed, Split::Test, None)?;
        Ok((tr, te))
    }

    fn prompt_len(&self) -> Result<usize> {
        Ok(self.template.template().prompt_tokens(Some(0))?.len())
    }
}

/// Mean test accuracy of one plan over the spec's seeds.
fn run_cell(
    model: &ToyModel,
    plan: &EditPlan,
    spec: &SweepSpec,
    train: &[Sample],
    test: &[Sample],
) -> Result<(Vec<f64>, f64)> {
    let mut accs = Vec::with_capacity(spec.seeds.len());
    for &seed in &spec.seeds {
        let cfg = TrainConfig {
            seed,
            eval_every: 0,
            ..spec.train.clone()
        };
        let (editors, _) = train_editors(model, plan, train, &cfg, None)?;
        accs.push(evaluate(model, &editors, plan, test, cfg.execution)?);
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    Ok((accs, mean))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankCell {
    pub visual_rank: usize,
    pub multimodal_rank: usize,
    pub accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    pub trainable_fraction: f64,
    pub best: bool,
}

pub fn rank_sweep(model: &ToyModel, spec: &SweepSpec) -> Result<Vec<RankCell>> {
    spec.validate(&model.config)?;
    let (train, test) = spec.datasets()?;
    let cells: Vec<(usize, usize)> = spec
        .visual_ranks
        .iter()
        .flat_map(|&v| spec.multimodal_ranks.iter().map(move |&m| (v, m)))
        .collect();
    let results = parallel::map(spec.execution, &cells, |&(v, m)| -> Result<RankCell> {
        let plan = EditPlan {
            visual_rank: v,
            multimodal_rank: m,
            ..spec.base_plan.clone()
        };
        let frac = model.trainable_fraction(&plan.init_editors(&model.config, 0)?);
        let (accuracies, mean_accuracy) = run_cell(model, &plan, spec, &train, &test)?;
        Ok(RankCell {
            visual_rank: v,
            multimodal_rank: m,
            accuracies,
            mean_accuracy,
            trainable_fraction: frac,
            best: false,
        })
    });
    let mut rows = results.into_iter().collect::<Result<Vec<_>>>()?;
    if let Some(best) = rows
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.mean_accuracy.total_cmp(&b.1.mean_accuracy).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
    {
        rows[best].best = true;
    }
    Ok(rows)
}

pub fn rank_csv(rows: &[RankCell]) -> String {
    let mut s = String::from("visual_rank,multimodal_rank,accuracy,trainable_fraction,best\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.visual_rank, r.multimodal_rank, r.mean_accuracy, r.trainable_fraction, r.best
        );
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthRow {
    pub setting: DepthSetting,
    pub visual_layers: BTreeSet<usize>,
    pub decoder_layers: BTreeSet<usize>,
    pub accuracies: Vec<f64>,
    pub mean_accuracy: f64,
}

pub fn depth_sweep(model: &ToyModel, spec: &SweepSpec) -> Result<Vec<DepthRow>> {
    spec.validate(&model.config)?;
    let (train, test) = spec.datasets()?;
    let results = parallel::map(spec.execution, &spec.depth_settings, |&id| -> Result<DepthRow> {
        let (v, t) = depth_setting(id, &model.config, spec.alternation);
        let plan = EditPlan {
            visual_layers: v.clone(),
            decoder_layers: t.clone(),
            ..spec.base_plan.clone()
        };
        let (accuracies, mean_accuracy) = run_cell(model, &plan, spec, &train, &test)?;
        Ok(DepthRow {
            setting: id,
            visual_layers: v,
            decoder_layers: t,
            accuracies,
            mean_accuracy,
        })
    });
    results.into_iter().collect()
}

fn layer_list(s: &BTreeSet<usize>) -> String {
    s.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(" ")
}

pub fn depth_csv(rows: &[DepthRow]) -> String {
    let mut s = String::from("setting,label,visual_layers,decoder_layers,accuracy\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.setting.id(),
            r.setting.label(),
            layer_list(&r.visual_layers),
            layer_list(&r.decoder_layers),
            r.mean_accuracy
        );
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthRow {
    pub length: usize,
    pub mean_accuracy: Option<f64>,
    pub skipped: Option<String>,
}

/// Ties prefix and suffix length to each value in `spec.lengths`.
pub fn length_sweep(model: &ToyModel, spec: &SweepSpec) -> Result<Vec<LengthRow>> {
    spec.validate(&model.config)?;
    let (train, test) = spec.datasets()?;
    let n = spec.prompt_len()?;
    let results = parallel::map(spec.execution, &spec.lengths, |&len| -> Result<LengthRow> {
        let plan = EditPlan {
            prefix_len: len,
            suffix_len: len,
            ..spec.base_plan.clone()
        };
        if let Err(e) = plan.validate_prompt(n) {
            return Ok(LengthRow {
                length: len,
                mean_accuracy: None,
                skipped: Some(e.to_string()),
            });
        }
        let (_, mean) = run_cell(model, &plan, spec, &train, &test)?;
        Ok(LengthRow {
            length: len,
            mean_accuracy: Some(mean),
            skipped: None,
        })
    });
    results.into_iter().collect()
}

pub fn length_csv(rows: &[LengthRow]) -> String {
    let mut s = String::from("length,accuracy,skipped\n");
    for r in rows {
        let acc = r.mean_accuracy.map(|a| a.to_string()).unwrap_or_default();
        let why = r.skipped.as_deref().unwrap_or("").replace(',', ";");
        let _ = writeln!(s, "{},{},{}", r.length, acc, why);
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentRow {
    pub mode: SegmentMode,
    pub trainable_params: usize,
    /// Textual positions edited per decoder layer on a task prompt.
    pub edited_positions: usize,
    pub mean_accuracy: f64,
}

pub fn segment_ablation(model: &ToyModel, spec: &SweepSpec) -> Result<Vec<SegmentRow>> {
    spec.validate(&model.config)?;
    let (train, test) = spec.datasets()?;
    let n = spec.prompt_len()?;
    let text_len = train.first().map(|s| s.token_ids.len() - 1).unwrap_or(n);
    let m = model.config.m();
    let results = parallel::map(spec.execution, &spec.segments, |&mode| -> Result<SegmentRow> {
        let plan = mode.apply(&spec.base_plan);
        let editors = plan.init_editors(&model.config, 0)?;
        let edited: BTreeSet<usize> = [crate::editor::Site::Prefix, crate::editor::Site::Suffix]
            .into_iter()
            .filter(|site| editors.keys().any(|k| k.site == *site))
            .flat_map(|site| plan.text_rows(site, m, n, text_len))
            .collect();
        let (_, mean) = run_cell(model, &plan, spec, &train, &test)?;
        Ok(SegmentRow {
            mode,
            trainable_params: editors.param_count(),
            edited_positions: edited.len(),
            mean_accuracy: mean,
        })
    });
    results.into_iter().collect()
}

pub fn segment_csv(rows: &[SegmentRow]) -> String {
    let mut s = String::from("segment,trainable_params,edited_positions,accuracy\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            r.mode.id(),
            r.trainable_params,
            r.edited_positions,
            r.mean_accuracy
        );
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LandscapeSpec {
    /// Points per axis; odd so the grid contains the unperturbed center.
    pub grid: usize,
    pub span: f64,
    pub seed: u64,
    pub execution: Execution,
}

impl Default for LandscapeSpec {
    fn default() -> Self {
        Self {
            grid: 21,
            span: 1.0,
            seed: 0,
            execution: Execution::Parallel,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeGrid {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    /// `losses[i][j]` is the loss at `(alphas[i], betas[j])`.
    pub losses: Vec<Vec<f64>>,
    pub center_loss: f64,
}

impl LandscapeGrid {
    pub fn all_finite(&self) -> bool {
        self.losses.iter().flatten().all(|l| l.is_finite())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("alpha,beta,loss\n");
        for (i, a) in self.alphas.iter().enumerate() {
            for (j, b) in self.betas.iter().enumerate() {
                let _ = writeln!(s, "{a},{b},{}", self.losses[i][j]);
            }
        }
        s
    }

    /// Whitespace-separated matrix, one line per beta, one column per alpha.
    pub fn to_matrix(&self) -> String {
        let mut s = String::new();
        for j in 0..self.betas.len() {
            let line: Vec<String> = (0..self.alphas.len()).map(|i| self.losses[i][j].to_string()).collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
        s
    }
}

/// Grid coordinates in `[-span, span]`; the middle point is exactly zero.
pub fn axis(grid: usize, span: f64) -> Vec<f64> {
    let c = (grid - 1) as f64 / 2.0;
    (0..grid).map(|i| (i as f64 - c) / c * span).collect()
}

/// Two random directions in editor-parameter space, each tensor rescaled to
/// the norm of the matching trained tensor.
pub fn landscape_directions(editors: &EditorSet, seed: u64) -> (Vec<Tensor>, Vec<Tensor>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || -> Vec<Tensor> {
        editors
            .tensors()
            .into_iter()
            .map(|t| {
                let raw: Vec<f64> = (0..t.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
                let mut d = Tensor::new(t.shape().to_vec(), raw).expect("shape from tensor");
                let (dn, tn) = (d.norm(), t.norm());
                let k = if dn > 0.0 { tn / dn } else { 0.0 };
                d.data_mut().iter_mut().for_each(|v| *v *= k);
                d
            })
            .collect()
    };
    let d1 = draw();
    let d2 = draw();
    (d1, d2)
}

/// `θ + α·δ₁ + β·δ₂`, evaluated left to right per element.
pub fn perturb(editors: &EditorSet, d1: &[Tensor], d2: &[Tensor], alpha: f64, beta: f64) -> EditorSet {
    let mut out = editors.clone();
    for ((t, a), b) in out.tensors_mut().into_iter().zip(d1).zip(d2) {
        for ((v, x), y) in t.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
            *v = *v + alpha * x + beta * y;
        }
    }
    out
}

/// Mean loss on `dataset` over a 2-D grid of editor perturbations.
/// Non-finite cells are kept as they are.
pub fn loss_landscape(
    model: &ToyModel,
    editors: &EditorSet,
    plan: &EditPlan,
    dataset: &[Sample],
    spec: &LandscapeSpec,
) -> Result<LandscapeGrid> {
    if spec.grid < 3 || spec.grid % 2 == 0 {
        return Err(MrtError::Config(format!("landscape grid must be odd and >= 3, got {}", spec.grid)));
    }
    if !(spec.span > 0.0 && spec.span.is_finite()) {
        return Err(MrtError::Config(format!("landscape span must be positive, got {}", spec.span)));
    }
    if dataset.is_empty() {
        return Err(MrtError::Precondition("landscape dataset is empty".into()));
    }
    let (d1, d2) = landscape_directions(editors, spec.seed);
    let alphas = axis(spec.grid, spec.span);
    let betas = alphas.clone();
    let cells: Vec<(usize, usize)> = (0..spec.grid).flat_map(|i| (0..spec.grid).map(move |j| (i, j))).collect();
    let values = parallel::map(spec.execution, &cells, |&(i, j)| {
        let e = perturb(editors, &d1, &d2, alphas[i], betas[j]);
        match mean_loss(model, &e, plan, dataset, Execution::Sequential) {
            Ok(l) => Ok(l),
            // a numerically broken cell is data, not a failure
            Err(MrtError::Degenerate { .. }) | Err(MrtError::Numeric(_)) => Ok(f64::NAN),
            Err(e) => Err(e),
        }
    });
    let mut losses = vec![vec![0.0; spec.grid]; spec.grid];
    for (&(i, j), v) in cells.iter().zip(values) {
        losses[i][j] = v?;
    }
    let c = spec.grid / 2;
    Ok(LandscapeGrid {
        center_loss: losses[c][c],
        alphas,
        betas,
        losses,
    })
}
