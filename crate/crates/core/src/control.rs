//! Token-wise counterfactual control: a reduced editor set (one RoI-restricted
//! visual editor, the RoI-restricted cross-modality editor, and one decoder
//! editor on the indicator token) trained on relabeled data.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::{self, make_dataset_with, Sample, Split, Task, TemplateId, CLASS_WORDS, NUM_CLASSES};
use crate::editor::EditorSet;
use crate::error::{MrtError, Result};
use crate::model::{generate, EditPlan, ToyModel, ToyModelConfig};
use crate::parallel;
use crate::train::{evaluate, train_editors, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlKind {
    Misclassification,
    Misalignment,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlScenario {
    pub kind: ControlKind,
    pub target_class: usize,
    /// Class whose word replaces the target's answer; misalignment only.
    #[serde(default)]
    pub misalign_target: Option<usize>,
    #[serde(default = "default_template")]
    pub template: TemplateId,
}

fn default_template() -> TemplateId {
    TemplateId::YesNo
}

impl ControlScenario {
    pub fn misclassification(target: usize) -> Self {
        Self {
            kind: ControlKind::Misclassification,
            target_class: target,
            misalign_target: None,
            template: TemplateId::YesNo,
        }
    }

    pub fn misalignment(target: usize, to: usize) -> Self {
        Self {
            kind: ControlKind::Misalignment,
            target_class: target,
            misalign_target: Some(to),
            template: TemplateId::Classify,
        }
    }

    pub fn with_template(self, template: TemplateId) -> Self {
        Self { template, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MrtError::Config(m));
        if self.target_class >= NUM_CLASSES {
            return bad(format!("target_class {} out of range", self.target_class));
        }
        match (self.kind, self.misalign_target) {
            (ControlKind::Misclassification, Some(_)) => {
                return bad("misalign_target is only valid for misalignment".into())
            }
            (ControlKind::Misalignment, None) => {
                return bad("misalignment requires misalign_target".into())
            }
            (ControlKind::Misalignment, Some(to)) if to == self.target_class || to >= NUM_CLASSES => {
                return bad(format!(
                    "misalign_target {to} must be a class other than {}",
                    self.target_class
                ))
            }
            _ => {}
        }
        let wants_yesno = self.kind == ControlKind::Misclassification;
        if wants_yesno != self.template.is_yesno() {
            return bad(format!(
                "template {:?} does not fit a {:?} scenario",
                self.template, self.kind
            ));
        }
        Ok(())
    }

    /// Counterfactually relabeled task.
    pub fn task(&self) -> Task {
        match self.kind {
            ControlKind::Misclassification => Task::CounterfactualMisclass {
                target: self.target_class,
            },
            ControlKind::Misalignment => Task::CounterfactualMisalign {
                target: self.target_class,
                to: self.misalign_target.unwrap_or(self.target_class),
            },
        }
    }

    /// Task with truthful labels on the same prompts.
    pub fn clean_task(&self) -> Task {
        match self.kind {
            ControlKind::Misclassification => Task::YesNo,
            ControlKind::Misalignment => Task::Classify,
        }
    }

    pub fn indicator_index(&self) -> usize {
        self.template.template().indicator_position
    }
}

/// One visual editor on layer 1 and the cross-modality editor, both on RoI
/// patches only, plus a decoder-layer-1 editor on the indicator token.
pub fn build_control_plan(model_cfg: &ToyModelConfig, scenario: &ControlScenario, cfg: &ControlConfig) -> EditPlan {
    EditPlan {
        visual_layers: BTreeSet::from([1]),
        visual_rank: cfg.visual_rank.min(model_cfg.d_v.min(model_cfg.d_t)),
        cross_modality: true,
        decoder_layers: BTreeSet::from([1]),
        multimodal_rank: cfg.multimodal_rank.min(model_cfg.d_t),
        prefix_len: 0,
        suffix_len: 0,
        control_token_index: Some(scenario.indicator_index()),
        roi_only: true,
        edit_all_text: false,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlConfig {
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub visual_rank: usize,
    pub multimodal_rank: usize,
    pub data_seed: u64,
    /// Minimum clean yes/no accuracy the frozen base must reach.
    pub min_base_accuracy: f64,
    pub train: TrainConfig,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            train_per_class: 100,
            test_per_class: 40,
            visual_rank: 4,
            multimodal_rank: 4,
            data_seed: 17,
            min_base_accuracy: 0.9,
            train: TrainConfig {
                epochs: 1,
                learning_rate: 1e-2,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class: usize,
    pub word: String,
    pub evaluated: usize,
    /// Counterfactual answers for the target class; changed answers otherwise.
    pub flipped: usize,
    pub rate: f64,
    /// Editor-free accuracy on the clean labels for this class.
    pub base_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlReport {
    pub scenario: ControlScenario,
    pub counterfact_rate_on_e: f64,
    pub other_class_disruption: f64,
    pub per_class: Vec<ClassRow>,
}

impl ControlReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn per_class_csv(&self) -> String {
        let mut s = String::from("class,word,evaluated,flipped,rate,base_accuracy\n");
        for r in &self.per_class {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.class, r.word, r.evaluated, r.flipped, r.rate, r.base_accuracy
            ));
        }
        s
    }
}

/// One row per report: `class,counterfact_rate,other_disruption`.
pub fn reports_csv(reports: &[ControlReport]) -> String {
    let mut s = String::from("class,counterfact_rate,other_disruption\n");
    for r in reports {
        s.push_str(&format!(
            "{},{},{}\n",
            CLASS_WORDS[r.scenario.target_class], r.counterfact_rate_on_e, r.other_class_disruption
        ));
    }
    s
}

/// Clean yes/no accuracy of the editor-free base on held-out data.
pub fn base_yesno_accuracy(model: &ToyModel, cfg: &ControlConfig, template: TemplateId) -> Result<f64> {
    let template = if template.is_yesno() { template } else { TemplateId::YesNo };
    let test = make_dataset_with(Task::YesNo, template, cfg.test_per_class, cfg.data_seed, Split::Test, None)?;
    evaluate(model, &EditorSet::new(), &EditPlan::none(), &test, cfg.train.execution)
}

pub fn control_dataset(scenario: &ControlScenario, cfg: &ControlConfig, split: Split) -> Result<Vec<Sample>> {
    scenario.validate()?;
    let n = match split {
        Split::Train => cfg.train_per_class,
        Split::Test => cfg.test_per_class,
    };
    make_dataset_with(scenario.task(), scenario.template, n, cfg.data_seed, split, None)
}

/// Trains a fresh control editor set on the counterfactual training split.
pub fn run_control_training(
    model: &ToyModel,
    scenario: &ControlScenario,
    cfg: &ControlConfig,
) -> Result<(EditorSet, ControlReport)> {
    scenario.validate()?;
    let clean = base_yesno_accuracy(model, cfg, scenario.template)?;
    if clean < cfg.min_base_accuracy {
        return Err(MrtError::Precondition(format!(
            "frozen base reaches clean yes/no accuracy {clean:.3}, below the required {:.3}",
            cfg.min_base_accuracy
        )));
    }
    let plan = build_control_plan(&model.config, scenario, cfg);
    let train = control_dataset(scenario, cfg, Split::Train)?;
    let (editors, _) = train_editors(model, &plan, &train, &cfg.train, None)?;
    let report = eval_counterfact(model, &editors, scenario, cfg, &train)?;
    Ok((editors, report))
}

fn answer_of(out: &[usize]) -> &[usize] {
    match out.iter().position(|&t| t == data::EOS) {
        Some(i) => &out[..i],
        None => out,
    }
}

/// Counterfact rate on the target class and answer changes elsewhere.
///
/// Target-class samples count only where the counterfactual answer differs
/// from the truthful one (for misclassification: matched-indicator prompts).
pub fn eval_counterfact(
    model: &ToyModel,
    editors: &EditorSet,
    scenario: &ControlScenario,
    cfg: &ControlConfig,
    test_set: &[Sample],
) -> Result<ControlReport> {
    scenario.validate()?;
    let plan = build_control_plan(&model.config, scenario, cfg);
    let none = EditPlan::none();
    let empty = EditorSet::new();
    let clean_word = |s: &Sample| -> Result<Vec<usize>> {
        Ok(match scenario.clean_task() {
            Task::Classify => vec![data::class_token(s.class_id())],
            _ => {
                let yes = s.indicator_class == Some(s.class_id());
                vec![data::word_id(if yes { "Yes" } else { "No" })?]
            }
        })
    };
    let outputs = parallel::map(cfg.train.execution, test_set, |s| -> Result<(Vec<usize>, Vec<usize>)> {
        let edited = generate(model, &s.image, s.prompt(), editors, &plan, 3)?;
        let base = generate(model, &s.image, s.prompt(), &empty, &none, 3)?;
        Ok((edited, base))
    });
    let mut rows: Vec<ClassRow> = (0..NUM_CLASSES)
        .map(|c| ClassRow {
            class: c,
            word: CLASS_WORDS[c].to_string(),
            evaluated: 0,
            flipped: 0,
            rate: 0.0,
            base_accuracy: 0.0,
        })
        .collect();
    let mut base_hits = [0usize; NUM_CLASSES];
    let mut seen = [0usize; NUM_CLASSES];
    for (s, out) in test_set.iter().zip(outputs) {
        let (edited, base) = out?;
        let c = s.class_id();
        let truthful = clean_word(s)?;
        seen[c] += 1;
        base_hits[c] += (answer_of(&base) == truthful.as_slice()) as usize;
        let row = &mut rows[c];
        if c == scenario.target_class {
            if s.answer == truthful {
                continue;
            }
            row.evaluated += 1;
            row.flipped += (answer_of(&edited) == s.answer.as_slice()) as usize;
        } else {
            row.evaluated += 1;
            row.flipped += (answer_of(&edited) != answer_of(&base)) as usize;
        }
    }
    for (c, row) in rows.iter_mut().enumerate() {
        row.rate = if row.evaluated > 0 { row.flipped as f64 / row.evaluated as f64 } else { 0.0 };
        row.base_accuracy = if seen[c] > 0 { base_hits[c] as f64 / seen[c] as f64 } else { 0.0 };
    }
    let target = &rows[scenario.target_class];
    if target.evaluated == 0 {
        return Err(MrtError::Precondition(format!(
            "no counterfactual samples of class {} in the evaluation set",
            CLASS_WORDS[scenario.target_class]
        )));
    }
    let (others_eval, others_flip) = rows
        .iter()
        .filter(|r| r.class != scenario.target_class)
        .fold((0, 0), |(e, f), r| (e + r.evaluated, f + r.flipped));
    if others_eval == 0 {
        return Err(MrtError::Precondition("no non-target samples in the evaluation set".into()));
    }
    Ok(ControlReport {
        scenario: scenario.clone(),
        counterfact_rate_on_e: target.rate,
        other_class_disruption: others_flip as f64 / others_eval as f64,
        per_class: rows,
    })
}
