//! Synthetic image/instruction tasks.
//!
//! Images are 16×16 grayscale grids holding one of ten 8×8 procedural glyphs on
//! a noisy background; the glyph is placed on the 4×4 patch lattice so its
//! region of interest is known exactly. Prompts use a closed word vocabulary.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MrtError, Result};

pub const NUM_CLASSES: usize = 10;
pub const PATCH: usize = 4;
pub const GRID: usize = 4;
pub const SIDE: usize = PATCH * GRID;
pub const GLYPH: usize = 8;

pub const CLASS_WORDS: [&str; NUM_CLASSES] = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
];

const VOCAB: &[&str] = &[
    "<pad>", "<eos>", "Yes", "No", "Not", "sure", "airplane", "automobile", "bird", "cat", "deer",
    "dog", "frog", "horse", "ship", "truck", "is", "the", "object", "an", "a", "in", "image", "?",
    "what", "answer", "with", "one", "word", ".", "this", "picture", "shown", "class", "does",
    "contain", "which", "please", "look", "at", "and", "tell", "me", "it", "of", "type", "category",
    "photo", "kind", "zero", "two", "three", "four", "five", "six", "seven", "eight",
    "nine",
];

pub const PAD: usize = 0;
pub const EOS: usize = 1;

fn word_index() -> &'static HashMap<&'static str, usize> {
    static INDEX: OnceLock<HashMap<&'static str, usize>> = OnceLock::new();
    INDEX.get_or_init(|| VOCAB.iter().enumerate().map(|(i, w)| (*w, i)).collect())
}

pub fn vocab_len() -> usize {
    VOCAB.len()
}

pub fn word(id: usize) -> Option<&'static str> {
    VOCAB.get(id).copied()
}

pub fn word_id(w: &str) -> Result<usize> {
    word_index()
        .get(w)
        .copied()
        .ok_or_else(|| MrtError::Config(format!("word '{w}' is not in the vocabulary")))
}

pub fn class_token(class: usize) -> usize {
    word_id(CLASS_WORDS[class]).expect("class words are in the vocabulary")
}

/// Whitespace word-level tokenization over the closed vocabulary.
pub fn tokenize(text: &str) -> Result<Vec<usize>> {
    text.split_whitespace().map(word_id).collect()
}

pub fn detokenize(ids: &[usize]) -> Result<String> {
    let words: Option<Vec<&str>> = ids.iter().map(|&i| word(i)).collect();
    words
        .map(|w| w.join(" "))
        .ok_or_else(|| MrtError::Config(format!("token ids {ids:?} outside the vocabulary")))
}

const GLYPHS: [[&str; GLYPH]; NUM_CLASSES] = [
    [
        "...##...", "...##...", "########", "########", "...##...", "...##...", "..####..",
        "..####..",
    ],
    [
        "........", "..####..", ".######.", "########", "########", "########", ".##..##.",
        ".##..##.",
    ],
    [
        "#......#", "##....##", ".##..##.", "..####..", "...##...", "...##...", "..#..#..",
        ".#....#.",
    ],
    [
        "########", "#......#", "#......#", "#......#", "#......#", "#......#", "#......#",
        "########",
    ],
    [
        "#......#", ".#....#.", "..#..#..", "...##...", "...##...", "..#..#..", ".#....#.",
        "#......#",
    ],
    [
        "########", "........", "########", "........", "########", "........", "########",
        "........",
    ],
    [
        "##..##..", "##..##..", "..##..##", "..##..##", "##..##..", "##..##..", "..##..##",
        "..##..##",
    ],
    [
        "#.#.#.#.", "#.#.#.#.", "#.#.#.#.", "#.#.#.#.", "#.#.#.#.", "#.#.#.#.", "#.#.#.#.",
        "#.#.#.#.",
    ],
    [
        "...##...", "..####..", ".######.", "########", "........", "########", ".######.",
        "..####..",
    ],
    [
        "########", "########", "########", "########", "########", "########", "........",
        "........",
    ],
];

/// Pixels above this value belong to a glyph; background noise stays below it.
pub const GLYPH_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthImage {
    /// `SIDE × SIDE` row-major grayscale values in `[0, 1]`.
    pub pixels: Vec<f64>,
    pub class_id: usize,
    /// Patch indices (row-major over the patch grid) that contain glyph pixels.
    pub roi_patches: Vec<usize>,
    pub seed: u64,
}

impl SynthImage {
    /// Patch vectors, one row per patch, each `PATCH × PATCH` pixels row-major.
    pub fn patches(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(SIDE * SIDE);
        for pr in 0..GRID {
            for pc in 0..GRID {
                for y in 0..PATCH {
                    let row = (pr * PATCH + y) * SIDE + pc * PATCH;
                    out.extend_from_slice(&self.pixels[row..row + PATCH]);
                }
            }
        }
        out
    }
}

pub fn gen_image(class_id: usize, seed: u64) -> Result<SynthImage> {
    if class_id >= NUM_CLASSES {
        return Err(MrtError::Config(format!("class id {class_id} outside [0, {NUM_CLASSES})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slots = (SIDE - GLYPH) / PATCH + 1;
    let oy = rng.gen_range(0..slots) * PATCH;
    let ox = rng.gen_range(0..slots) * PATCH;
    let mut pixels: Vec<f64> = (0..SIDE * SIDE).map(|_| rng.gen_range(0.0..0.3)).collect();
    let mut roi = vec![false; GRID * GRID];
    for (gy, line) in GLYPHS[class_id].iter().enumerate() {
        for (gx, ch) in line.bytes().enumerate() {
            if ch == b'#' {
                let (y, x) = (oy + gy, ox + gx);
                pixels[y * SIDE + x] = rng.gen_range(0.7..1.0);
                roi[(y / PATCH) * GRID + x / PATCH] = true;
            }
        }
    }
    let roi_patches = roi.iter().enumerate().filter(|(_, &on)| on).map(|(i, _)| i).collect();
    Ok(SynthImage {
        pixels,
        class_id,
        roi_patches,
        seed,
    })
}

/// Prompt wordings. The indicator is the token the control editor targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    /// "is the object an {class} in the image ?"
    YesNo,
    /// "is the object in the image an {class} ?"
    YesNoAlt,
    /// "what is the object in the image ? answer with one word ."
    Classify,
    /// "what class is the object shown in this picture ? answer with one word ."
    ClassifyAlt,
}

#[derive(Clone, Copy, Debug)]
pub struct PromptTemplate {
    pub id: TemplateId,
    pub text: &'static str,
    /// 0-based index of the indicator token in the tokenized prompt.
    pub indicator_position: usize,
}

impl TemplateId {
    pub fn template(self) -> PromptTemplate {
        let (text, indicator_position) = match self {
            TemplateId::YesNo => ("is the object an {} in the image ?", 4),
            TemplateId::YesNoAlt => ("is the object in the image an {} ?", 7),
            TemplateId::Classify => ("what is the object in the image ? answer with one word .", 3),
            TemplateId::ClassifyAlt => (
                "what class is the object shown in this picture ? answer with one word .",
                4,
            ),
        };
        PromptTemplate {
            id: self,
            text,
            indicator_position,
        }
    }

    pub fn is_yesno(self) -> bool {
        matches!(self, TemplateId::YesNo | TemplateId::YesNoAlt)
    }
}

impl PromptTemplate {
    pub fn render(&self, class: Option<usize>) -> String {
        match class {
            Some(c) => self.text.replace("{}", CLASS_WORDS[c]),
            None => self.text.to_string(),
        }
    }

    pub fn prompt_tokens(&self, class: Option<usize>) -> Result<Vec<usize>> {
        tokenize(&self.render(class))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Task {
    Classify,
    YesNo,
    CounterfactualMisclass { target: usize },
    CounterfactualMisalign { target: usize, to: usize },
}

impl Task {
    pub fn parse(tag: &str, target: Option<usize>, to: Option<usize>) -> Result<Self> {
        let need = |v: Option<usize>, what: &str| {
            v.ok_or_else(|| MrtError::Config(format!("task '{tag}' requires {what}")))
        };
        Ok(match tag {
            "classify" => Task::Classify,
            "yesno" => Task::YesNo,
            "counterfactual_misclass" => Task::CounterfactualMisclass {
                target: need(target, "a target class")?,
            },
            "counterfactual_misalign" => Task::CounterfactualMisalign {
                target: need(target, "a target class")?,
                to: need(to, "a misalignment class")?,
            },
            other => return Err(MrtError::Config(format!("unknown task tag '{other}'"))),
        })
    }

    pub fn default_template(self) -> TemplateId {
        match self {
            Task::Classify | Task::CounterfactualMisalign { .. } => TemplateId::Classify,
            Task::YesNo | Task::CounterfactualMisclass { .. } => TemplateId::YesNo,
        }
    }

    fn validate(self, template: TemplateId) -> Result<()> {
        let yesno_task = matches!(self, Task::YesNo | Task::CounterfactualMisclass { .. });
        if yesno_task != template.is_yesno() {
            return Err(MrtError::Config(format!(
                "template {template:?} does not fit task {self:?}"
            )));
        }
        match self {
            Task::CounterfactualMisclass { target } if target >= NUM_CLASSES => {
                Err(MrtError::Config(format!("target class {target} out of range")))
            }
            Task::CounterfactualMisalign { target, to }
                if target >= NUM_CLASSES || to >= NUM_CLASSES || target == to =>
            {
                Err(MrtError::Config(format!(
                    "misalignment {target} -> {to} must map between two distinct classes"
                )))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub image: SynthImage,
    /// Prompt followed by the response (answer tokens then `<eos>`).
    pub token_ids: Vec<usize>,
    pub prompt_len: usize,
    /// True exactly on response tokens.
    pub mask: Vec<bool>,
    /// Answer tokens without the trailing `<eos>`.
    pub answer: Vec<usize>,
    pub task: Task,
    pub template: TemplateId,
    /// Class named by a yes/no prompt's indicator slot.
    pub indicator_class: Option<usize>,
}

impl Sample {
    pub fn prompt(&self) -> &[usize] {
        &self.token_ids[..self.prompt_len]
    }

    pub fn response(&self) -> &[usize] {
        &self.token_ids[self.prompt_len..]
    }

    pub fn class_id(&self) -> usize {
        self.image.class_id
    }

    fn build(
        image: SynthImage,
        template: TemplateId,
        indicator: Option<usize>,
        answer: Vec<usize>,
        task: Task,
    ) -> Result<Self> {
        let mut token_ids = template.template().prompt_tokens(indicator)?;
        let prompt_len = token_ids.len();
        token_ids.extend_from_slice(&answer);
        token_ids.push(EOS);
        let mask = (0..token_ids.len()).map(|i| i >= prompt_len).collect();
        Ok(Self {
            image,
            token_ids,
            prompt_len,
            mask,
            answer,
            task,
            template,
            indicator_class: indicator,
        })
    }
}

/// Image seed for sample `i` of `class`; the split bit keeps train and test disjoint.
pub fn image_seed(seed: u64, split: Split, class: usize, i: usize) -> u64 {
    let split_bit = match split {
        Split::Train => 0u64,
        Split::Test => 1u64,
    };
    (seed << 32) ^ (split_bit << 31) ^ ((class as u64) << 24) ^ i as u64
}

pub fn make_dataset(task: Task, n_per_class: usize, seed: u64, split: Split) -> Result<Vec<Sample>> {
    make_dataset_with(task, task.default_template(), n_per_class, seed, split, None)
}

/// Builds a dataset; `classes` restricts which image classes appear (all by default).
pub fn make_dataset_with(
    task: Task,
    template: TemplateId,
    n_per_class: usize,
    seed: u64,
    split: Split,
    classes: Option<&[usize]>,
) -> Result<Vec<Sample>> {
    task.validate(template)?;
    let all: Vec<usize> = (0..NUM_CLASSES).collect();
    let classes = classes.unwrap_or(&all);
    let yes = word_id("Yes")?;
    let no = word_id("No")?;
    let mut out = Vec::with_capacity(classes.len() * n_per_class);
    let mut k = 0usize;
    for &class in classes {
        for i in 0..n_per_class {
            let img_seed = image_seed(seed, split, class, i);
            let image = gen_image(class, img_seed)?;
            let sample = if template.is_yesno() {
                let matched = k % 2 == 0;
                let indicator = if matched {
                    class
                } else {
                    let mut rng = ChaCha8Rng::seed_from_u64(img_seed ^ 0x5eed);
                    let others: Vec<usize> = (0..NUM_CLASSES).filter(|&c| c != class).collect();
                    *others.choose(&mut rng).expect("nine other classes")
                };
                let truthful = if matched { yes } else { no };
                let answer = match task {
                    Task::CounterfactualMisclass { target } if class == target => no,
                    _ => truthful,
                };
                Sample::build(image, template, Some(indicator), vec![answer], task)?
            } else {
                let shown = match task {
                    Task::CounterfactualMisalign { target, to } if class == target => to,
                    _ => class,
                };
                Sample::build(image, template, None, vec![class_token(shown)], task)?
            };
            out.push(sample);
            k += 1;
        }
    }
    Ok(out)
}

/// Composition of a pretraining corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskMix {
    pub yesno_per_class: usize,
    pub classify_per_class: usize,
    /// Image classes that appear in the classify portion.
    pub classify_classes: Vec<usize>,
}

impl Default for TaskMix {
    /// Yes/no over every class, classification over half of them: recognition
    /// is learned for all classes but naming only for some.
    fn default() -> Self {
        Self {
            yesno_per_class: 120,
            classify_per_class: 120,
            classify_classes: (0..NUM_CLASSES / 2).collect(),
        }
    }
}

impl TaskMix {
    /// A mix that teaches every task on every class.
    pub fn competent() -> Self {
        Self {
            classify_classes: (0..NUM_CLASSES).collect(),
            ..Self::default()
        }
    }

    pub fn build(&self, seed: u64) -> Result<Vec<Sample>> {
        let mut out = make_dataset_with(
            Task::YesNo,
            TemplateId::YesNo,
            self.yesno_per_class,
            seed,
            Split::Train,
            None,
        )?;
        // the alternate wording keeps both yes/no templates in the base's repertoire
        out.extend(make_dataset_with(
            Task::YesNo,
            TemplateId::YesNoAlt,
            self.yesno_per_class / 2,
            seed ^ 0xa17,
            Split::Train,
            None,
        )?);
        for t in [TemplateId::Classify, TemplateId::ClassifyAlt] {
            out.extend(make_dataset_with(
                Task::Classify,
                t,
                if t == TemplateId::Classify {
                    self.classify_per_class
                } else {
                    self.classify_per_class / 2
                },
                seed ^ if t == TemplateId::Classify { 0xc1a } else { 0xc1b },
                Split::Train,
                Some(&self.classify_classes),
            )?);
        }
        Ok(out)
    }
}

#[derive(Serialize)]
struct DumpRow<'a> {
    class: usize,
    seed: u64,
    pixels: &'a [f64],
    tokens: &'a [usize],
    label: String,
    roi: &'a [usize],
}

/// Writes one JSON object per line: `{class, seed, pixels, tokens, label, roi}`.
pub fn dump_jsonl(samples: &[Sample], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in samples {
        let row = DumpRow {
            class: s.class_id(),
            seed: s.image.seed,
            pixels: &s.image.pixels,
            tokens: &s.token_ids,
            label: detokenize(&s.answer)?,
            roi: &s.image.roi_patches,
        };
        serde_json::to_writer(&mut f, &row)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}
