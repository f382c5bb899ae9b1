//! Frozen toy vision-text transformer with editor attachment points.
//!
//! Pipeline: patch embedding → pre-LN vision encoder (output read from the
//! second-to-last layer) → linear projector → concatenation with token
//! embeddings → causal pre-LN decoder → vocabulary head.
//!
//! Editors hook in after vision layers, after the projector, and after decoder
//! layers on textual positions only.

use std::collections::{BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::data::{self, Sample, SynthImage, EOS};
use crate::editor::{editor_seed, init_editor, BoundEditor, EditorKey, EditorSet, Site};
use crate::error::{dim_err, MrtError, Result};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;
const MASK_NEG: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyModelConfig {
    pub d_v: usize,
    pub d_t: usize,
    pub vision_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub patch_grid: usize,
    pub patch_size: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    /// MLP hidden width as a multiple of the model width.
    pub mlp_ratio: usize,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            d_v: 32,
            d_t: 48,
            vision_layers: 4,
            decoder_layers: 4,
            heads: 4,
            patch_grid: data::GRID,
            patch_size: data::PATCH,
            vocab_size: 64,
            max_seq: 32,
            mlp_ratio: 8,
        }
    }
}

impl ToyModelConfig {
    /// Number of visual tokens.
    pub fn m(&self) -> usize {
        self.patch_grid * self.patch_grid
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(MrtError::Config(msg));
        if self.heads == 0 || self.d_v % self.heads != 0 || self.d_t % self.heads != 0 {
            return bad(format!(
                "d_v ({}) and d_t ({}) must be divisible by heads ({})",
                self.d_v, self.d_t, self.heads
            ));
        }
        if self.vision_layers < 2 {
            return bad("vision_layers must be >= 2 (output is read from the second-to-last layer)".into());
        }
        if self.decoder_layers == 0 || self.mlp_ratio == 0 {
            return bad("decoder_layers and mlp_ratio must be positive".into());
        }
        if self.vocab_size < data::vocab_len() {
            return bad(format!(
                "vocab_size {} smaller than the task vocabulary ({})",
                self.vocab_size,
                data::vocab_len()
            ));
        }
        if self.patch_grid != data::GRID || self.patch_size != data::PATCH {
            return bad(format!(
                "image geometry is fixed at a {}x{} grid of {}-pixel patches",
                data::GRID,
                data::GRID,
                data::PATCH
            ));
        }
        if self.max_seq <= self.m() {
            return bad(format!("max_seq {} leaves no room for text", self.max_seq));
        }
        Ok(())
    }

    /// Vision layers eligible for editing (the final layer's output is never used).
    pub fn eligible_vision_layers(&self) -> BTreeSet<usize> {
        (1..self.vision_layers).collect()
    }

    pub fn all_decoder_layers(&self) -> BTreeSet<usize> {
        (1..=self.decoder_layers).collect()
    }
}

/// Which layers and token spans receive editors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EditPlan {
    /// 1-based vision layers whose outputs are edited.
    pub visual_layers: BTreeSet<usize>,
    /// Rank of visual editors; the cross-modality editor shares it.
    pub visual_rank: usize,
    pub cross_modality: bool,
    /// 1-based decoder layers whose textual outputs are edited.
    pub decoder_layers: BTreeSet<usize>,
    pub multimodal_rank: usize,
    pub prefix_len: usize,
    pub suffix_len: usize,
    /// Edit only this prompt position (0-based) with a single editor per decoder layer.
    pub control_token_index: Option<usize>,
    /// Visual and cross-modality editors touch only region-of-interest patches.
    pub roi_only: bool,
    /// Prefix editors cover every textual position instead of a prefix span.
    pub edit_all_text: bool,
}

impl Default for EditPlan {
    fn default() -> Self {
        Self::full(&ToyModelConfig::default())
    }
}

impl EditPlan {
    /// Every eligible layer, visual rank 6, multimodal rank 4, prefix = suffix = 4.
    pub fn full(cfg: &ToyModelConfig) -> Self {
        Self {
            visual_layers: cfg.eligible_vision_layers(),
            visual_rank: 6,
            cross_modality: true,
            decoder_layers: cfg.all_decoder_layers(),
            multimodal_rank: 4,
            prefix_len: 4,
            suffix_len: 4,
            control_token_index: None,
            roi_only: false,
            edit_all_text: false,
        }
    }

    /// No editors anywhere: the frozen base model.
    pub fn none() -> Self {
        Self {
            visual_layers: BTreeSet::new(),
            visual_rank: 1,
            cross_modality: false,
            decoder_layers: BTreeSet::new(),
            multimodal_rank: 1,
            prefix_len: 0,
            suffix_len: 0,
            control_token_index: None,
            roi_only: false,
            edit_all_text: false,
        }
    }

    pub fn cross_rank(&self) -> usize {
        self.visual_rank
    }

    pub fn validate(&self, cfg: &ToyModelConfig) -> Result<()> {
        let bad = |msg: String| Err(MrtError::Config(msg));
        if let Some(&l) = self.visual_layers.iter().find(|&&l| l == 0 || l > cfg.vision_layers) {
            return bad(format!("visual layer {l} outside 1..={}", cfg.vision_layers));
        }
        if self.visual_layers.contains(&cfg.vision_layers) {
            return bad(format!(
                "visual layer {} is the final vision layer, whose output is never used",
                cfg.vision_layers
            ));
        }
        if let Some(&l) = self.decoder_layers.iter().find(|&&l| l == 0 || l > cfg.decoder_layers) {
            return bad(format!("decoder layer {l} outside 1..={}", cfg.decoder_layers));
        }
        let uses_visual = !self.visual_layers.is_empty() || self.cross_modality;
        if uses_visual && (self.visual_rank == 0 || self.visual_rank > cfg.d_v.min(cfg.d_t)) {
            return bad(format!(
                "visual_rank {} outside 1..={}",
                self.visual_rank,
                cfg.d_v.min(cfg.d_t)
            ));
        }
        if !self.decoder_layers.is_empty()
            && (self.multimodal_rank == 0 || self.multimodal_rank > cfg.d_t)
        {
            return bad(format!(
                "multimodal_rank {} outside 1..={}",
                self.multimodal_rank, cfg.d_t
            ));
        }
        Ok(())
    }

    /// Checks the textual spans against a prompt of `prompt_len` tokens.
    pub fn validate_prompt(&self, prompt_len: usize) -> Result<()> {
        if !self.edit_all_text && self.prefix_len + self.suffix_len > prompt_len {
            return Err(MrtError::Config(format!(
                "prefix ({}) and suffix ({}) spans overlap in a {}-token prompt",
                self.prefix_len, self.suffix_len, prompt_len
            )));
        }
        if let Some(i) = self.control_token_index {
            if i >= prompt_len {
                return Err(MrtError::Config(format!(
                    "control token index {i} outside a {prompt_len}-token prompt"
                )));
            }
        }
        Ok(())
    }

    /// Fresh editors for every slot this plan uses.
    pub fn init_editors(&self, cfg: &ToyModelConfig, seed: u64) -> Result<EditorSet> {
        self.validate(cfg)?;
        let mut set = EditorSet::new();
        let mut add = |key: EditorKey, rank: usize, dim: usize| -> Result<()> {
            set.insert(key, init_editor(rank, dim, editor_seed(seed, key))?);
            Ok(())
        };
        for &l in &self.visual_layers {
            add(EditorKey::new(Site::Visual, l), self.visual_rank, cfg.d_v)?;
        }
        if self.cross_modality {
            add(EditorKey::new(Site::CrossModality, 0), self.cross_rank(), cfg.d_t)?;
        }
        for &l in &self.decoder_layers {
            if self.control_token_index.is_some() {
                add(EditorKey::new(Site::ControlTarget, l), self.multimodal_rank, cfg.d_t)?;
            }
            if self.edit_all_text || self.prefix_len > 0 {
                add(EditorKey::new(Site::Prefix, l), self.multimodal_rank, cfg.d_t)?;
            }
            if !self.edit_all_text && self.suffix_len > 0 {
                add(EditorKey::new(Site::Suffix, l), self.multimodal_rank, cfg.d_t)?;
            }
        }
        Ok(set)
    }

    /// Fused-sequence rows edited by `site` when the prompt has `prompt_len`
    /// tokens and the sequence holds `text_len` textual tokens after `m` visual ones.
    pub fn text_rows(&self, site: Site, m: usize, prompt_len: usize, text_len: usize) -> Vec<usize> {
        match site {
            Site::Prefix if self.edit_all_text => (m..m + text_len).collect(),
            Site::Prefix => (m..m + self.prefix_len.min(prompt_len)).collect(),
            Site::Suffix if self.edit_all_text => Vec::new(),
            Site::Suffix => {
                let s = self.suffix_len.min(prompt_len);
                (m + prompt_len - s..m + prompt_len).collect()
            }
            Site::ControlTarget => self
                .control_token_index
                .filter(|&i| i < prompt_len)
                .map(|i| vec![m + i])
                .unwrap_or_default(),
            Site::Visual | Site::CrossModality => Vec::new(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BlockIdx {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Positions of each weight inside [`FrozenWeights::tensors`].
#[derive(Clone, Debug)]
pub struct Layout {
    pub patch_w: usize,
    pub patch_b: usize,
    pub vis_pos: usize,
    pub vision: Vec<BlockIdx>,
    pub proj_w: usize,
    pub proj_b: usize,
    pub tok_emb: usize,
    pub txt_pos: usize,
    pub decoder: Vec<BlockIdx>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub head_w: usize,
    pub head_b: usize,
}

#[derive(Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    Normal(f64),
    Uniform(f64),
}

struct WeightSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn weight_specs(cfg: &ToyModelConfig) -> (Layout, Vec<WeightSpec>) {
    let mut specs: Vec<WeightSpec> = Vec::new();
    let mut add = |name: String, shape: Vec<usize>, init: Init| {
        specs.push(WeightSpec { name, shape, init });
        specs.len() - 1
    };
    let pix = cfg.patch_size * cfg.patch_size;
    let patch_w = add("vision.patch_w".into(), vec![pix, cfg.d_v], Init::Uniform(1.0 / (pix as f64).sqrt()));
    let patch_b = add("vision.patch_b".into(), vec![cfg.d_v], Init::Zeros);
    let vis_pos = add("vision.pos".into(), vec![cfg.m(), cfg.d_v], Init::Normal(0.02));
    let block = |prefix: &str, d: usize, add: &mut dyn FnMut(String, Vec<usize>, Init) -> usize| {
        let h = d * cfg.mlp_ratio;
        let lin = |fan_in: usize| Init::Uniform(1.0 / (fan_in as f64).sqrt());
        BlockIdx {
            ln1_g: add(format!("{prefix}.ln1_g"), vec![d], Init::Ones),
            ln1_b: add(format!("{prefix}.ln1_b"), vec![d], Init::Zeros),
            wq: add(format!("{prefix}.wq"), vec![d, d], lin(d)),
            bq: add(format!("{prefix}.bq"), vec![d], Init::Zeros),
            wk: add(format!("{prefix}.wk"), vec![d, d], lin(d)),
            bk: add(format!("{prefix}.bk"), vec![d], Init::Zeros),
            wv: add(format!("{prefix}.wv"), vec![d, d], lin(d)),
            bv: add(format!("{prefix}.bv"), vec![d], Init::Zeros),
            wo: add(format!("{prefix}.wo"), vec![d, d], lin(d)),
            bo: add(format!("{prefix}.bo"), vec![d], Init::Zeros),
            ln2_g: add(format!("{prefix}.ln2_g"), vec![d], Init::Ones),
            ln2_b: add(format!("{prefix}.ln2_b"), vec![d], Init::Zeros),
            w1: add(format!("{prefix}.w1"), vec![d, h], lin(d)),
            b1: add(format!("{prefix}.b1"), vec![h], Init::Zeros),
            w2: add(format!("{prefix}.w2"), vec![h, d], lin(h)),
            b2: add(format!("{prefix}.b2"), vec![d], Init::Zeros),
        }
    };
    let vision = (1..=cfg.vision_layers)
        .map(|i| block(&format!("vision.{i}"), cfg.d_v, &mut add))
        .collect();
    let proj_w = add("projector.w".into(), vec![cfg.d_v, cfg.d_t], Init::Uniform(1.0 / (cfg.d_v as f64).sqrt()));
    let proj_b = add("projector.b".into(), vec![cfg.d_t], Init::Zeros);
    let tok_emb = add("decoder.tok_emb".into(), vec![cfg.vocab_size, cfg.d_t], Init::Normal(0.5));
    let txt_pos = add("decoder.pos".into(), vec![cfg.max_seq, cfg.d_t], Init::Normal(0.02));
    let decoder = (1..=cfg.decoder_layers)
        .map(|j| block(&format!("decoder.{j}"), cfg.d_t, &mut add))
        .collect();
    let lnf_g = add("decoder.lnf_g".into(), vec![cfg.d_t], Init::Ones);
    let lnf_b = add("decoder.lnf_b".into(), vec![cfg.d_t], Init::Zeros);
    let head_w = add("decoder.head_w".into(), vec![cfg.d_t, cfg.vocab_size], Init::Uniform(1.0 / (cfg.d_t as f64).sqrt()));
    let head_b = add("decoder.head_b".into(), vec![cfg.vocab_size], Init::Zeros);
    let layout = Layout {
        patch_w,
        patch_b,
        vis_pos,
        vision,
        proj_w,
        proj_b,
        tok_emb,
        txt_pos,
        decoder,
        lnf_g,
        lnf_b,
        head_w,
        head_b,
    };
    (layout, specs)
}

/// Base-model weights as a flat, named list. Never updated by editor training.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenWeights {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl FrozenWeights {
    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.names.iter().zip(&self.tensors) {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Debug)]
pub struct ToyModel {
    pub config: ToyModelConfig,
    pub weights: FrozenWeights,
    pub layout: Layout,
}

impl ToyModel {
    /// Randomly initialized (untrained) base model.
    pub fn init(config: ToyModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = weight_specs(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for s in specs {
            let n: usize = s.shape.iter().product();
            let data: Vec<f64> = match s.init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Normal(sd) => {
                    let dist = Normal::new(0.0, sd).expect("positive std");
                    (0..n).map(|_| dist.sample(&mut rng)).collect()
                }
                Init::Uniform(b) => (0..n).map(|_| rng.gen_range(-b..b)).collect(),
            };
            names.push(s.name);
            tensors.push(Tensor::new(s.shape, data)?);
        }
        Ok(Self {
            config,
            weights: FrozenWeights { names, tensors },
            layout,
        })
    }

    /// Assembles a model from stored weights, checking every name and shape.
    pub fn from_weights(config: ToyModelConfig, weights: FrozenWeights) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = weight_specs(&config);
        if specs.len() != weights.tensors.len() || weights.names.len() != weights.tensors.len() {
            return dim_err(format!(
                "expected {} weight tensors, found {}",
                specs.len(),
                weights.tensors.len()
            ));
        }
        for (s, (name, t)) in specs.iter().zip(weights.names.iter().zip(&weights.tensors)) {
            if &s.name != name || s.shape != t.shape() {
                return dim_err(format!(
                    "tensor '{name}' has shape {:?}; config expects '{}' with shape {:?}",
                    t.shape(),
                    s.name,
                    s.shape
                ));
            }
        }
        Ok(Self {
            config,
            weights,
            layout,
        })
    }

    pub fn param_count(&self) -> usize {
        self.weights.param_count()
    }

    /// Editor parameters as a fraction of base + editor parameters.
    pub fn trainable_fraction(&self, editors: &EditorSet) -> f64 {
        let e = editors.param_count() as f64;
        e / (self.param_count() as f64 + e)
    }
}

/// Model and editor tensors placed on a tape.
pub struct Bound {
    w: Vec<Var>,
    editors: HashMap<EditorKey, BoundEditor>,
}

impl Bound {
    pub fn bind<'a>(
        tape: &mut Tape<'a>,
        model: &'a ToyModel,
        editors: &'a EditorSet,
        train_base: bool,
        train_editors: bool,
    ) -> Result<Self> {
        let w = model
            .weights
            .tensors
            .iter()
            .map(|t| tape.leaf_ref(t, train_base))
            .collect();
        let mut bound = HashMap::new();
        for (k, e) in editors.iter() {
            bound.insert(*k, BoundEditor::bind(tape, e, train_editors)?);
        }
        Ok(Self { w, editors: bound })
    }

    pub fn weight_vars(&self) -> &[Var] {
        &self.w
    }

    pub fn editor(&self, key: EditorKey) -> Option<&BoundEditor> {
        self.editors.get(&key)
    }

    fn edit(
        &self,
        tape: &mut Tape<'_>,
        key: EditorKey,
        x: Var,
        rows: Option<&[usize]>,
    ) -> Result<Var> {
        match (self.editors.get(&key), rows) {
            (None, _) => Ok(x),
            (Some(e), None) => e.apply(tape, x),
            (Some(e), Some(r)) => e.apply_rows(tape, x, r),
        }
    }
}

fn linear(tape: &mut Tape<'_>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

fn block(
    tape: &mut Tape<'_>,
    w: &[Var],
    idx: &BlockIdx,
    x: Var,
    heads: usize,
    mask: Option<&Tensor>,
) -> Result<Var> {
    let d = tape.value(x).cols();
    let hd = d / heads;
    let h = tape.layernorm(x, w[idx.ln1_g], w[idx.ln1_b], LN_EPS)?;
    let q = linear(tape, h, w[idx.wq], w[idx.bq])?;
    let k = linear(tape, h, w[idx.wk], w[idx.bk])?;
    let v = linear(tape, h, w[idx.wv], w[idx.bv])?;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for head in 0..heads {
        let (s, e) = (head * hd, (head + 1) * hd);
        let qh = tape.slice_cols(q, s, e)?;
        let kh = tape.slice_cols(k, s, e)?;
        let vh = tape.slice_cols(v, s, e)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let mut scores = tape.scale(scores, scale);
        if let Some(m) = mask {
            scores = tape.add_const(scores, m)?;
        }
        let att = tape.softmax_rows(scores);
        outs.push(tape.matmul(att, vh)?);
    }
    let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    let attn = linear(tape, cat, w[idx.wo], w[idx.bo])?;
    let x = tape.add(x, attn)?;
    let h2 = tape.layernorm(x, w[idx.ln2_g], w[idx.ln2_b], LN_EPS)?;
    let hid = linear(tape, h2, w[idx.w1], w[idx.b1])?;
    let hid = tape.gelu(hid);
    let mlp = linear(tape, hid, w[idx.w2], w[idx.b2])?;
    tape.add(x, mlp)
}

fn causal_mask(n: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in i + 1..n {
            t.data_mut()[i * n + j] = MASK_NEG;
        }
    }
    t
}

/// Graph-building forward pieces shared by inference and training.
pub struct Graph<'m> {
    pub model: &'m ToyModel,
    pub plan: &'m EditPlan,
}

impl<'m> Graph<'m> {
    pub fn new(model: &'m ToyModel, plan: &'m EditPlan) -> Self {
        Self { model, plan }
    }

    /// Vision tokens `T_v` (m×d_v) read from the second-to-last vision layer.
    pub fn encode(&self, tape: &mut Tape<'_>, b: &Bound, img: &SynthImage) -> Result<Var> {
        let cfg = &self.model.config;
        let lay = &self.model.layout;
        let w = b.weight_vars();
        let pix = cfg.patch_size * cfg.patch_size;
        let patches = tape.leaf(Tensor::new(vec![cfg.m(), pix], img.patches())?, false);
        let mut x = linear(tape, patches, w[lay.patch_w], w[lay.patch_b])?;
        x = tape.add(x, w[lay.vis_pos])?;
        let rows = self.plan.roi_only.then_some(img.roi_patches.as_slice());
        for i in 1..cfg.vision_layers {
            x = block(tape, w, &lay.vision[i - 1], x, cfg.heads, None)?;
            if self.plan.visual_layers.contains(&i) {
                x = b.edit(tape, EditorKey::new(Site::Visual, i), x, rows)?;
            }
        }
        Ok(x)
    }

    /// Projected visual tokens `X_v` (m×d_t), with the cross-modality edit when planned.
    pub fn project(&self, tape: &mut Tape<'_>, b: &Bound, tv: Var, roi: &[usize]) -> Result<Var> {
        let lay = &self.model.layout;
        let w = b.weight_vars();
        let xv = linear(tape, tv, w[lay.proj_w], w[lay.proj_b])?;
        if !self.plan.cross_modality {
            return Ok(xv);
        }
        let rows = self.plan.roi_only.then_some(roi);
        b.edit(tape, EditorKey::new(Site::CrossModality, 0), xv, rows)
    }

    /// Logits over the fused sequence `[X_v; embed(tokens)]`.
    pub fn decode(
        &self,
        tape: &mut Tape<'_>,
        b: &Bound,
        xv: Var,
        tokens: &[usize],
        prompt_len: usize,
    ) -> Result<Var> {
        let cfg = &self.model.config;
        let lay = &self.model.layout;
        let w = b.weight_vars();
        let m = tape.value(xv).rows();
        let total = m + tokens.len();
        if total > cfg.max_seq {
            return dim_err(format!(
                "fused sequence of {total} tokens exceeds max_seq {}",
                cfg.max_seq
            ));
        }
        self.plan.validate_prompt(prompt_len)?;
        let xt = tape.gather_rows(w[lay.tok_emb], tokens)?;
        let mut x = tape.concat_rows(&[xv, xt])?;
        let positions: Vec<usize> = (0..total).collect();
        let pos = tape.gather_rows(w[lay.txt_pos], &positions)?;
        x = tape.add(x, pos)?;
        let mask = causal_mask(total);
        for j in 1..=cfg.decoder_layers {
            x = block(tape, w, &lay.decoder[j - 1], x, cfg.heads, Some(&mask))?;
            if self.plan.decoder_layers.contains(&j) {
                for site in [Site::Prefix, Site::Suffix, Site::ControlTarget] {
                    let rows = self.plan.text_rows(site, m, prompt_len, tokens.len());
                    x = b.edit(tape, EditorKey::new(site, j), x, Some(&rows))?;
                }
            }
        }
        let x = tape.layernorm(x, w[lay.lnf_g], w[lay.lnf_b], LN_EPS)?;
        linear(tape, x, w[lay.head_w], w[lay.head_b])
    }

    /// Full forward on a sample's teacher-forced input; returns logits.
    pub fn logits(&self, tape: &mut Tape<'_>, b: &Bound, sample: &Sample) -> Result<Var> {
        let tv = self.encode(tape, b, &sample.image)?;
        let xv = self.project(tape, b, tv, &sample.image.roi_patches)?;
        let input = &sample.token_ids[..sample.token_ids.len() - 1];
        self.decode(tape, b, xv, input, sample.prompt_len)
    }

    /// Mean cross-entropy over response tokens.
    pub fn loss(&self, tape: &mut Tape<'_>, b: &Bound, sample: &Sample) -> Result<Var> {
        let logits = self.logits(tape, b, sample)?;
        let (positions, targets) = supervised_positions(sample, self.model.config.m());
        tape.cross_entropy(logits, &positions, &targets)
    }
}

/// Logit rows and targets for every masked (response) token.
pub fn supervised_positions(sample: &Sample, m: usize) -> (Vec<usize>, Vec<usize>) {
    sample
        .mask
        .iter()
        .enumerate()
        .filter(|&(t, &on)| on && t > 0)
        .map(|(t, _)| (m + t - 1, sample.token_ids[t]))
        .unzip()
}

pub fn encode_image(model: &ToyModel, img: &SynthImage, editors: &EditorSet, plan: &EditPlan) -> Result<Tensor> {
    plan.validate(&model.config)?;
    let mut tape = Tape::new();
    let b = Bound::bind(&mut tape, model, editors, false, false)?;
    let tv = Graph::new(model, plan).encode(&mut tape, &b, img)?;
    Ok(tape.value(tv).clone())
}

pub fn project_cross_modality(
    model: &ToyModel,
    tv: &Tensor,
    roi: &[usize],
    editors: &EditorSet,
    plan: &EditPlan,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let b = Bound::bind(&mut tape, model, editors, false, false)?;
    let t = tape.leaf(tv.clone(), false);
    let xv = Graph::new(model, plan).project(&mut tape, &b, t, roi)?;
    Ok(tape.value(xv).clone())
}

pub fn fuse_and_decode(
    model: &ToyModel,
    xv: &Tensor,
    tokens: &[usize],
    prompt_len: usize,
    editors: &EditorSet,
    plan: &EditPlan,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let b = Bound::bind(&mut tape, model, editors, false, false)?;
    let x = tape.leaf(xv.clone(), false);
    let logits = Graph::new(model, plan).decode(&mut tape, &b, x, tokens, prompt_len)?;
    Ok(tape.value(logits).clone())
}

pub fn forward_logits(model: &ToyModel, sample: &Sample, editors: &EditorSet, plan: &EditPlan) -> Result<Tensor> {
    let mut tape = Tape::new();
    let b = Bound::bind(&mut tape, model, editors, false, false)?;
    let logits = Graph::new(model, plan).logits(&mut tape, &b, sample)?;
    Ok(tape.value(logits).clone())
}

pub fn forward_loss(model: &ToyModel, sample: &Sample, editors: &EditorSet, plan: &EditPlan) -> Result<f64> {
    if !sample.mask.iter().skip(1).any(|&m| m) {
        return Err(MrtError::Numeric("sample has no supervised positions".into()));
    }
    let mut tape = Tape::new();
    let b = Bound::bind(&mut tape, model, editors, false, false)?;
    let l = Graph::new(model, plan).loss(&mut tape, &b, sample)?;
    Ok(tape.value(l).item())
}

/// What receives gradients in [`loss_and_grads`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    Editors,
    Base,
}

/// Loss on one sample and gradients for the trainable tensors, in the order of
/// `editors.tensors()` or `model.weights.tensors`. Untouched tensors get zeros.
pub fn loss_and_grads(
    model: &ToyModel,
    editors: &EditorSet,
    plan: &EditPlan,
    sample: &Sample,
    which: Trainable,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let b = Bound::bind(
        &mut tape,
        model,
        editors,
        which == Trainable::Base,
        which == Trainable::Editors,
    )?;
    let loss = Graph::new(model, plan).loss(&mut tape, &b, sample)?;
    let value = tape.value(loss).item();
    let mut grads = tape.backward(loss)?;
    let mut take = |v: Var| grads.take(v).unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()));
    let out = match which {
        Trainable::Base => b.weight_vars().iter().map(|&v| take(v)).collect(),
        Trainable::Editors => editors
            .keys()
            .flat_map(|k| {
                let e = b.editor(*k).expect("every editor is bound");
                [e.raw_u, e.w, e.bias]
            })
            .map(take)
            .collect(),
    };
    Ok((value, out))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding; stops after `<eos>` or `max_new` tokens.
pub fn generate(
    model: &ToyModel,
    img: &SynthImage,
    prompt_ids: &[usize],
    editors: &EditorSet,
    plan: &EditPlan,
    max_new: usize,
) -> Result<Vec<usize>> {
    let m = model.config.m();
    if m + prompt_ids.len() > model.config.max_seq {
        return dim_err(format!(
            "prompt of {} tokens does not fit max_seq {}",
            prompt_ids.len(),
            model.config.max_seq
        ));
    }
    let tv = encode_image(model, img, editors, plan)?;
    let xv = project_cross_modality(model, &tv, &img.roi_patches, editors, plan)?;
    let mut tokens = prompt_ids.to_vec();
    let mut out = Vec::new();
    while out.len() < max_new && m + tokens.len() < model.config.max_seq {
        let logits = fuse_and_decode(model, &xv, &tokens, prompt_ids.len(), editors, plan)?;
        let next = argmax(logits.row(logits.rows() - 1));
        out.push(next);
        tokens.push(next);
        if next == EOS {
            break;
        }
    }
    Ok(out)
}

/// Whether greedy decoding reproduces the sample's response exactly.
///
/// Uses one teacher-forced pass: greedy output equals the gold response iff the
/// argmax at every response position equals the gold token.
pub fn response_correct(model: &ToyModel, sample: &Sample, editors: &EditorSet, plan: &EditPlan) -> Result<bool> {
    let logits = forward_logits(model, sample, editors, plan)?;
    let (positions, targets) = supervised_positions(sample, model.config.m());
    Ok(positions
        .iter()
        .zip(&targets)
        .all(|(&p, &t)| argmax(logits.row(p)) == t))
}

#[cfg(test)]
mod tests;
