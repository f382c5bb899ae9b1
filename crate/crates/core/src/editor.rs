//! Low-rank representation editors.
//!
//! An editor rewrites the component of a hidden vector that lies in a learned
//! `rank`-dimensional subspace:
//!
//! ```text
//! edit(x) = x + Uᵀ (W x + bias − U x)
//! ```
//!
//! `U` (rank×dim) has orthonormal rows. It is never stored directly: the
//! trainable matrix is `raw_u`, and `U = orthonormalize(raw_u)` is recomputed on
//! every forward pass, so orthonormality holds exactly after any update.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{gram_schmidt, Tape, Var};
use crate::error::{dim_err, MrtError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct EditorParams {
    pub rank: usize,
    pub dim: usize,
    pub raw_u: Tensor,
    pub w: Tensor,
    pub bias: Tensor,
}

/// Orthogonal start for `raw_u`; default linear-layer init for `W` and `bias`.
pub fn init_editor(rank: usize, dim: usize, seed: u64) -> Result<EditorParams> {
    if rank == 0 || rank > dim {
        return Err(MrtError::Config(format!(
            "editor rank must satisfy 1 <= rank <= dim, got rank {rank}, dim {dim}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss: Vec<f64> = (0..rank * dim).map(|_| rng.sample(StandardNormal)).collect();
    let (raw_u, _) = gram_schmidt(&Tensor::new(vec![rank, dim], gauss)?)?;
    let bound = 1.0 / (dim as f64).sqrt();
    let w = (0..rank * dim).map(|_| rng.gen_range(-bound..bound)).collect();
    let bias = (0..rank).map(|_| rng.gen_range(-bound..bound)).collect();
    Ok(EditorParams {
        rank,
        dim,
        raw_u,
        w: Tensor::new(vec![rank, dim], w)?,
        bias: Tensor::vector(bias),
    })
}

/// Orthonormal basis (as rows) for the row space of `raw`.
pub fn orthonormalize(raw: &Tensor) -> Result<Tensor> {
    gram_schmidt(raw).map(|(u, _)| u)
}

impl EditorParams {
    /// `W := U`, `bias := 0`: the editor becomes the identity map.
    pub fn identity(rank: usize, dim: usize, seed: u64) -> Result<Self> {
        let mut e = init_editor(rank, dim, seed)?;
        e.w = orthonormalize(&e.raw_u)?;
        e.bias = Tensor::zeros(&[rank]);
        Ok(e)
    }

    pub fn subspace(&self) -> Result<Tensor> {
        orthonormalize(&self.raw_u)
    }

    pub fn param_count(&self) -> usize {
        self.rank * (2 * self.dim + 1)
    }

    pub fn tensors(&self) -> [&Tensor; 3] {
        [&self.raw_u, &self.w, &self.bias]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 3] {
        [&mut self.raw_u, &mut self.w, &mut self.bias]
    }

    /// Applies the edit independently to every row of `x` (`[..., dim]`).
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = BoundEditor::bind(&mut tape, self, false)?;
        let shape = x.shape().to_vec();
        let flat = x.clone().reshape(vec![x.rows(), x.cols()])?;
        let xv = tape.leaf(flat, false);
        let out = bound.apply(&mut tape, xv)?;
        tape.value(out).clone().reshape(shape)
    }
}

pub fn param_count(e: &EditorParams) -> usize {
    e.param_count()
}

pub fn apply_editor(e: &EditorParams, x: &Tensor) -> Result<Tensor> {
    e.apply(x)
}

/// Editor tensors placed on a tape, with `U` already orthonormalized.
#[derive(Clone, Copy, Debug)]
pub struct BoundEditor {
    pub raw_u: Var,
    pub w: Var,
    pub bias: Var,
    pub u: Var,
    pub dim: usize,
}

impl BoundEditor {
    pub fn bind<'a>(tape: &mut Tape<'a>, e: &'a EditorParams, trainable: bool) -> Result<Self> {
        let raw_u = tape.leaf_ref(&e.raw_u, trainable);
        let w = tape.leaf_ref(&e.w, trainable);
        let bias = tape.leaf_ref(&e.bias, trainable);
        let u = tape.orthonormalize(raw_u)?;
        Ok(Self {
            raw_u,
            w,
            bias,
            u,
            dim: e.dim,
        })
    }

    /// `x + (x Wᵀ + bias − x Uᵀ) U` for a row-matrix `x`.
    pub fn apply(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        if tape.value(x).cols() != self.dim {
            return dim_err(format!(
                "editor of dim {} applied to vectors of dim {}",
                self.dim,
                tape.value(x).cols()
            ));
        }
        let proj = tape.matmul_nt(x, self.u)?;
        let target = tape.matmul_nt(x, self.w)?;
        let target = tape.add_bias(target, self.bias)?;
        let delta = tape.sub(target, proj)?;
        let back = tape.matmul(delta, self.u)?;
        tape.add(x, back)
    }

    /// Edits only the listed rows of `x`; all other rows pass through untouched.
    pub fn apply_rows(&self, tape: &mut Tape<'_>, x: Var, rows: &[usize]) -> Result<Var> {
        if rows.is_empty() {
            return Ok(x);
        }
        if rows.len() == tape.value(x).rows() && rows.iter().enumerate().all(|(i, &r)| i == r) {
            return self.apply(tape, x);
        }
        let picked = tape.gather_rows(x, rows)?;
        let edited = self.apply(tape, picked)?;
        tape.replace_rows(x, edited, rows)
    }
}

/// Where in the model an editor is attached.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    Visual,
    CrossModality,
    Prefix,
    Suffix,
    ControlTarget,
}

impl Site {
    pub fn as_str(self) -> &'static str {
        match self {
            Site::Visual => "visual",
            Site::CrossModality => "cross_modality",
            Site::Prefix => "prefix",
            Site::Suffix => "suffix",
            Site::ControlTarget => "control_target",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "visual" => Site::Visual,
            "cross_modality" => Site::CrossModality,
            "prefix" => Site::Prefix,
            "suffix" => Site::Suffix,
            "control_target" => Site::ControlTarget,
            other => return Err(MrtError::Config(format!("unknown editor site '{other}'"))),
        })
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

/// One editor slot. The cross-modality editor uses layer 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EditorKey {
    pub site: Site,
    pub layer: usize,
}

impl EditorKey {
    pub fn new(site: Site, layer: usize) -> Self {
        Self { site, layer }
    }
}

impl fmt::Display for EditorKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.site.as_str(), self.layer)
    }
}

/// All editors attached to a model, at most one per (site, layer).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EditorSet {
    editors: BTreeMap<EditorKey, EditorParams>,
}

impl EditorSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: EditorKey, e: EditorParams) -> Option<EditorParams> {
        self.editors.insert(key, e)
    }

    pub fn get(&self, key: &EditorKey) -> Option<&EditorParams> {
        self.editors.get(key)
    }

    pub fn get_mut(&mut self, key: &EditorKey) -> Option<&mut EditorParams> {
        self.editors.get_mut(key)
    }

    pub fn len(&self) -> usize {
        self.editors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.editors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&EditorKey, &EditorParams)> {
        self.editors.iter()
    }

    pub fn keys(&self) -> impl Iterator<Item = &EditorKey> {
        self.editors.keys()
    }

    pub fn param_count(&self) -> usize {
        self.editors.values().map(EditorParams::param_count).sum()
    }

    /// Every trainable tensor, in a fixed (key, raw_u/w/bias) order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.editors.values().flat_map(|e| e.tensors()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.editors.values_mut().flat_map(|e| e.tensors_mut()).collect()
    }

    /// Names matching [`EditorSet::tensors`].
    pub fn tensor_names(&self) -> Vec<String> {
        self.editors
            .keys()
            .flat_map(|k| ["raw_u", "w", "bias"].map(|t| format!("editor.{k}.{t}")))
            .collect()
    }

    /// Replaces every editor with its identity configuration (`W = U`, `bias = 0`).
    pub fn to_identity(&self) -> Result<Self> {
        let mut out = self.clone();
        for e in out.editors.values_mut() {
            e.w = e.subspace()?;
            e.bias = Tensor::zeros(&[e.rank]);
        }
        Ok(out)
    }

    /// Largest `|U Uᵀ − I|` entry across editors.
    pub fn max_orthonormality_error(&self) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for e in self.editors.values() {
            let u = e.subspace()?;
            let gram = u.matmul(&u.transpose())?;
            worst = worst.max(gram.max_abs_diff(&Tensor::eye(e.rank)));
        }
        Ok(worst)
    }
}

/// Per-editor seed derived from a run seed and the editor's slot.
pub fn editor_seed(seed: u64, key: EditorKey) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(key.site.tag() << 32)
        .wrapping_add(key.layer as u64);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
