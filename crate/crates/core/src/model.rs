//! Toy detection/sequence encoders, the match-affinity head and the optional
//! identity classifier, plus STU1 checkpoint serialization.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::features::FeatureVector;
use crate::tape::{Tape, Tensor, Var};

/// Which network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    DetectionEncoder,
    SequenceEncoder,
    MatchHead,
    IdentityHead,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub input: usize,
    pub hidden: usize,
    pub dim: usize,
    /// Identity classes; 0 disables the identity head.
    pub classes: usize,
}

impl ModelDims {
    /// Hidden widths of the match head: input 2D, then 2D/16, then 32.
    pub fn head_widths(&self) -> [usize; 4] {
        let two_d = 2 * self.dim;
        [two_d, (two_d / 16).max(1), 32, 2]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub value: Tensor,
}

/// All trainable parameters with a fixed layout:
/// detection encoder (4), sequence encoder (4), match head (6), identity head (0 or 2).
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub dims: ModelDims,
    pub attention: bool,
    pub params: Vec<Param>,
}

const DET: usize = 0;
const SEQ: usize = 4;
const HEAD: usize = 8;
const IDENT: usize = 14;

/// Index of the match class in the head's 2-way output.
pub const MATCH: usize = 1;

/// Leaves for one forward pass.
#[derive(Debug, Clone)]
pub struct ParamVars(pub Vec<Var>);

impl Model {
    /// Parameter layout with every value zero.
    pub fn zeros(dims: ModelDims, attention: bool) -> Self {
        let mut params = Vec::new();
        let mut linear = |name: &str, group: Group, fan_in: usize, fan_out: usize| {
            params.push(Param {
                name: format!("{name}.weight"),
                group,
                value: Tensor::zeros(fan_in, fan_out),
            });
            params.push(Param {
                name: format!("{name}.bias"),
                group,
                value: Tensor::zeros(1, fan_out),
            });
        };
        for (prefix, group) in [("det", Group::DetectionEncoder), ("seq", Group::SequenceEncoder)] {
            linear(&format!("{prefix}.fc1"), group, dims.input, dims.hidden);
            linear(&format!("{prefix}.fc2"), group, dims.hidden, dims.dim);
        }
        let w = dims.head_widths();
        for k in 0..3 {
            linear(&format!("head.fc{}", k + 1), Group::MatchHead, w[k], w[k + 1]);
        }
        if dims.classes > 0 {
            linear("ident.fc", Group::IdentityHead, dims.dim, dims.classes);
        }
        Self {
            dims,
            attention,
            params,
        }
    }

    /// He-style Gaussian weights, zero biases.
    pub fn init(dims: ModelDims, attention: bool, rng: &mut impl Rng) -> Self {
        let mut model = Self::zeros(dims, attention);
        for p in model.params.iter_mut().filter(|p| p.name.ends_with(".weight")) {
            let normal = Normal::new(0.0, (2.0 / p.value.rows as f64).sqrt()).expect("finite std");
            p.value.data.iter_mut().for_each(|w| *w = normal.sample(rng));
        }
        model
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.data.len()).sum()
    }

    pub fn group_of(&self, index: usize) -> Group {
        self.params[index].group
    }

    pub fn bind(&self, tape: &mut Tape) -> ParamVars {
        ParamVars(self.params.iter().map(|p| tape.leaf(p.value.clone())).collect())
    }

    fn encoder(tape: &mut Tape, vars: &ParamVars, base: usize, x: Var) -> Var {
        let v = &vars.0;
        let h = tape.matmul(x, v[base]);
        let h = tape.add_row_bias(h, v[base + 1]);
        let h = tape.relu(h);
        let o = tape.matmul(h, v[base + 2]);
        tape.add_row_bias(o, v[base + 3])
    }

    /// Detection features for each input row.
    pub fn encode_detections(&self, tape: &mut Tape, vars: &ParamVars, x: Var) -> Var {
        Self::encoder(tape, vars, DET, x)
    }

    /// Per-frame sequence-encoder features for each input row.
    pub fn encode_frames(&self, tape: &mut Tape, vars: &ParamVars, x: Var) -> Var {
        Self::encoder(tape, vars, SEQ, x)
    }

    /// Pools `frames`-row blocks of per-frame features into one row each.
    pub fn pool_blocks(&self, tape: &mut Tape, per_frame: Var, frames: usize) -> Var {
        let n = tape.value(per_frame).rows / frames;
        let scale = 1.0 / (self.dims.dim as f64).sqrt();
        let pooled: Vec<Var> = (0..n)
            .map(|i| {
                let blk = tape.slice_rows(per_frame, i * frames, frames);
                let mixed = if self.attention {
                    let scores = tape.matmul_t(blk, blk);
                    let scores = tape.scale(scores, scale);
                    let weights = tape.softmax_rows(scores);
                    let attended = tape.matmul(weights, blk);
                    tape.add(attended, blk)
                } else {
                    blk
                };
                tape.mean_rows(mixed)
            })
            .collect();
        tape.concat_rows(&pooled)
    }

    /// Match-head logits for rows of `[f_S, d]` concatenations.
    pub fn head_logits(&self, tape: &mut Tape, vars: &ParamVars, pair: Var) -> Var {
        let v = &vars.0;
        let mut h = pair;
        for k in 0..3 {
            h = tape.matmul(h, v[HEAD + 2 * k]);
            h = tape.add_row_bias(h, v[HEAD + 2 * k + 1]);
            if k < 2 {
                h = tape.relu(h);
            }
        }
        h
    }

    pub fn identity_logits(&self, tape: &mut Tape, vars: &ParamVars, features: Var) -> Option<Var> {
        if self.dims.classes == 0 {
            return None;
        }
        let h = tape.matmul(features, vars.0[IDENT]);
        Some(tape.add_row_bias(h, vars.0[IDENT + 1]))
    }

    /// Detection encoder applied to one raw row.
    pub fn embed_detection(&self, raw: &[f64]) -> Result<FeatureVector> {
        self.check_input(raw.len())?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let x = tape.leaf(Tensor::from_rows(&[raw]));
        let f = self.encode_detections(&mut tape, &vars, x);
        Ok(FeatureVector(tape.value(f).data.clone()))
    }

    /// Sequence encoder and pooling applied to raw frames.
    pub fn embed_sequence(&self, frames: &[&[f64]]) -> Result<FeatureVector> {
        if frames.is_empty() {
            return Err(Error::Contract("sequence embedding needs at least one frame".into()));
        }
        for f in frames {
            self.check_input(f.len())?;
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let x = tape.leaf(Tensor::from_rows(frames));
        let per_frame = self.encode_frames(&mut tape, &vars, x);
        let pooled = self.pool_blocks(&mut tape, per_frame, frames.len());
        Ok(FeatureVector(tape.value(pooled).data.clone()))
    }

    /// Probability that detection feature `det` continues sequence feature `seq`.
    pub fn match_probability(&self, seq: &FeatureVector, det: &FeatureVector) -> Result<f64> {
        for f in [seq, det] {
            if f.dim() != self.dims.dim {
                return Err(Error::DimensionMismatch {
                    expected: self.dims.dim,
                    actual: f.dim(),
                });
            }
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let mut row = seq.0.clone();
        row.extend_from_slice(&det.0);
        let x = tape.leaf(Tensor::from_vec(1, row.len(), row));
        let logits = self.head_logits(&mut tape, &vars, x);
        let p = crate::features::softmax(tape.value(logits).row(0));
        Ok(p[MATCH])
    }

    fn check_input(&self, len: usize) -> Result<()> {
        if len != self.dims.input {
            return Err(Error::DimensionMismatch {
                expected: self.dims.input,
                actual: len,
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        for v in [
            CHECKPOINT_VERSION,
            self.dims.input as u32,
            self.dims.hidden as u32,
            self.dims.dim as u32,
            self.dims.classes as u32,
            u32::from(self.attention),
            self.params.len() as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for p in &self.params {
            out.extend_from_slice(&(p.value.rows as u32).to_le_bytes());
            out.extend_from_slice(&(p.value.cols as u32).to_le_bytes());
            for &x in &p.value.data {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("magic mismatch: expected STU1".into()));
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let dims = ModelDims {
            input: cur.u32()? as usize,
            hidden: cur.u32()? as usize,
            dim: cur.u32()? as usize,
            classes: cur.u32()? as usize,
        };
        let attention = cur.u32()? != 0;
        let count = cur.u32()? as usize;
        let mut model = Model::zeros(dims, attention);
        if count != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {count}",
                model.params.len()
            )));
        }
        for p in &mut model.params {
            let (rows, cols) = (cur.u32()? as usize, cur.u32()? as usize);
            if (rows, cols) != (p.value.rows, p.value.cols) {
                return Err(Error::Checkpoint(format!(
                    "{}: expected {}x{}, found {rows}x{cols}",
                    p.name, p.value.rows, p.value.cols
                )));
            }
            for x in &mut p.value.data {
                *x = f32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as f64;
            }
        }
        if cur.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"STU1";
const CHECKPOINT_VERSION: u32 = 1;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        let s = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Embedder backed by a trained detection encoder over raw descriptor rows.
#[derive(Debug, Clone)]
pub struct MlpEmbedder {
    pub model: Model,
}

impl crate::features::Embedder for MlpEmbedder {
    fn dim(&self) -> usize {
        self.model.dims.dim
    }

    fn embed(&self, input: &crate::features::DetectionInput<'_>) -> Result<FeatureVector> {
        let raw = input
            .raw
            .ok_or_else(|| Error::Embedding(format!("detection {} has no raw descriptor", input.index)))?;
        self.model.embed_detection(raw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{DetectionInput, Embedder};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims() -> ModelDims {
        ModelDims {
            input: 6,
            hidden: 5,
            dim: 8,
            classes: 3,
        }
    }

    #[test]
    fn head_widths_scale_with_dim() {
        let d = ModelDims {
            input: 1,
            hidden: 1,
            dim: 2048,
            classes: 0,
        };
        assert_eq!(d.head_widths(), [4096, 256, 32, 2]);
        assert_eq!(dims().head_widths(), [16, 1, 32, 2]);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let m = Model::init(dims(), true, &mut ChaCha8Rng::seed_from_u64(3));
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..4], b"STU1");
        let back = Model::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.params.len(), 16);
        let mut bad = bytes.clone();
        bad.truncate(bytes.len() - 3);
        assert!(Model::from_bytes(&bad).is_err());
    }

    #[test]
    fn zero_weights_give_zero_embedding() {
        let mut m = Model::init(dims(), true, &mut ChaCha8Rng::seed_from_u64(3));
        for p in &mut m.params {
            p.value.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let e = MlpEmbedder { model: m.clone() };
        let raw = [1.0, -2.0, 3.0, 0.5, 0.0, 9.0];
        let input = DetectionInput {
            index: 0,
            identity: None,
            raw: Some(&raw),
        };
        assert_eq!(e.embed(&input).unwrap(), FeatureVector::zeros(8));
        let p = m.match_probability(&FeatureVector::zeros(8), &FeatureVector::zeros(8)).unwrap();
        assert_eq!(p, 0.5);
    }

    #[test]
    fn dimension_errors() {
        let m = Model::init(dims(), false, &mut ChaCha8Rng::seed_from_u64(3));
        assert!(matches!(m.embed_detection(&[1.0; 5]), Err(Error::DimensionMismatch { .. })));
        assert!(m.match_probability(&FeatureVector::zeros(7), &FeatureVector::zeros(8)).is_err());
        assert!(m.embed_sequence(&[]).is_err());
    }
}
