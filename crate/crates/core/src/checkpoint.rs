//! Length-prefixed binary checkpoints with a trailing SHA-256 checksum.
//!
//! Layout: magic, format version (u32), payload length (u64), payload,
//! SHA-256 of everything before it. All integers and floats are little-endian,
//! so arrays round-trip bit-exactly.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::editor::{EditorKey, EditorParams, EditorSet, Site};
use crate::error::{dim_err, MrtError, Result};
use crate::model::{EditPlan, FrozenWeights, ToyModel, ToyModelConfig};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"MRTCKPT\0";
const HEADER: usize = 8 + 4 + 8;
const CHECKSUM: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

/// Seed and completed steps of the training data order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_config: ToyModelConfig,
    pub weights: FrozenWeights,
    pub plan: Option<EditPlan>,
    pub editors: EditorSet,
    pub optimizer: Option<OptimizerState>,
    pub rng: RngState,
    pub config_hash: String,
}

impl Checkpoint {
    pub fn new(model: &ToyModel, plan: Option<&EditPlan>, editors: &EditorSet) -> Self {
        Self {
            model_config: model.config.clone(),
            weights: model.weights.clone(),
            plan: plan.cloned(),
            editors: editors.clone(),
            optimizer: None,
            rng: RngState::default(),
            config_hash: String::new(),
        }
    }

    /// Rebuilds the model under `config`; a shape disagreement names the tensor.
    pub fn model_with(&self, config: ToyModelConfig) -> Result<ToyModel> {
        ToyModel::from_weights(config, self.weights.clone())
    }

    pub fn model(&self) -> Result<ToyModel> {
        self.model_with(self.model_config.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut p = Writer::default();
        p.str(&serde_json::to_string(&self.model_config)?);
        p.str(&self.config_hash);
        match &self.plan {
            Some(plan) => p.str(&serde_json::to_string(plan)?),
            None => p.str(""),
        }
        p.u64(self.weights.tensors.len() as u64);
        for (name, t) in self.weights.names.iter().zip(&self.weights.tensors) {
            p.str(name);
            p.tensor(t);
        }
        p.u64(self.editors.len() as u64);
        for (key, e) in self.editors.iter() {
            p.str(key.site.as_str());
            p.u64(key.layer as u64);
            p.u64(e.rank as u64);
            p.u64(e.dim as u64);
            p.tensor(&e.raw_u);
            p.tensor(&e.w);
            p.tensor(&e.bias);
        }
        match &self.optimizer {
            None => p.u8(0),
            Some(o) => {
                p.u8(1);
                p.u64(o.step);
                p.u64(o.m.len() as u64);
                for t in o.m.iter().chain(&o.v) {
                    p.tensor(t);
                }
            }
        }
        p.u64(self.rng.seed);
        p.u64(self.rng.step);

        let payload = p.0;
        let mut out = Vec::with_capacity(HEADER + payload.len() + CHECKSUM);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let integrity = |m: String| Err(MrtError::Integrity(m));
        if bytes.len() < HEADER + CHECKSUM {
            return integrity(format!("checkpoint truncated to {} bytes", bytes.len()));
        }
        if &bytes[..8] != MAGIC {
            return integrity("not a checkpoint file (bad magic)".into());
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        if bytes.len() != HEADER + len + CHECKSUM {
            return integrity(format!(
                "checkpoint length {} does not match declared payload of {len} bytes",
                bytes.len()
            ));
        }
        let (body, sum) = bytes.split_at(HEADER + len);
        if Sha256::digest(body).as_slice() != sum {
            return integrity("checkpoint checksum mismatch".into());
        }
        if version != FORMAT_VERSION {
            return integrity(format!(
                "checkpoint format version {version} is not supported (expected {FORMAT_VERSION})"
            ));
        }
        let mut r = Reader { buf: &body[HEADER..], pos: 0 };
        let model_config: ToyModelConfig = serde_json::from_str(&r.str()?)?;
        let config_hash = r.str()?;
        let plan_json = r.str()?;
        let plan = if plan_json.is_empty() {
            None
        } else {
            Some(serde_json::from_str(&plan_json)?)
        };
        let n = r.u64()? as usize;
        let mut names = Vec::with_capacity(n);
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n {
            names.push(r.str()?);
            tensors.push(r.tensor()?);
        }
        let mut editors = EditorSet::new();
        for _ in 0..r.u64()? {
            let site = Site::parse(&r.str()?)?;
            let key = EditorKey::new(site, r.u64()? as usize);
            let rank = r.u64()? as usize;
            let dim = r.u64()? as usize;
            let (raw_u, w, bias) = (r.tensor()?, r.tensor()?, r.tensor()?);
            for (what, t, want) in [
                ("raw_u", &raw_u, vec![rank, dim]),
                ("w", &w, vec![rank, dim]),
                ("bias", &bias, vec![rank]),
            ] {
                if t.shape() != want.as_slice() {
                    return dim_err(format!(
                        "tensor 'editor.{key}.{what}' has shape {:?}, expected {want:?}",
                        t.shape()
                    ));
                }
            }
            editors.insert(key, EditorParams { rank, dim, raw_u, w, bias });
        }
        let optimizer = match r.u8()? {
            0 => None,
            _ => {
                let step = r.u64()?;
                let k = r.u64()? as usize;
                let m = (0..k).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
                let v = (0..k).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
                Some(OptimizerState { step, m, v })
            }
        };
        let rng = RngState {
            seed: r.u64()?,
            step: r.u64()?,
        };
        if r.pos != r.buf.len() {
            return integrity(format!("{} trailing bytes in checkpoint payload", r.buf.len() - r.pos));
        }
        Ok(Self {
            model_config,
            weights: FrozenWeights { names, tensors },
            plan,
            editors,
            optimizer,
            rng,
            config_hash,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    // write-then-rename so a crash never leaves a half-written file at `path`
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }

    fn tensor(&mut self, t: &Tensor) {
        self.u64(t.shape().len() as u64);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if n > self.buf.len() - self.pos {
            return Err(MrtError::Integrity("checkpoint payload ends early".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u64()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| MrtError::Integrity("invalid UTF-8 in checkpoint string".into()))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let nd = self.u64()? as usize;
        if nd > 8 {
            return Err(MrtError::Integrity(format!("implausible tensor rank {nd}")));
        }
        let shape = (0..nd).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| MrtError::Integrity("tensor size overflows".into()))?;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| MrtError::Integrity("tensor size overflows".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Tensor::new(shape, data)
    }
}
