//! Feature vectors, temporal pooling and the embedder interface.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mot_io::EmbeddingMatrix;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dot(&self, other: &FeatureVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn distance(&self, other: &FeatureVector) -> f64 {
        euclidean(&self.0, &other.0)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl From<Vec<f64>> for FeatureVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn check_frames(per_frame: &[FeatureVector]) -> Result<usize> {
    let first = per_frame
        .first()
        .ok_or_else(|| Error::Contract("temporal pooling needs at least one frame".into()))?;
    let dim = first.dim();
    if let Some(bad) = per_frame.iter().find(|f| f.dim() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: bad.dim(),
        });
    }
    Ok(dim)
}

/// Temporal average pooling: coordinate-wise mean over frames.
pub fn tap_pool(per_frame: &[FeatureVector]) -> Result<FeatureVector> {
    let dim = check_frames(per_frame)?;
    let mut acc = vec![0.0; dim];
    for f in per_frame {
        for (a, v) in acc.iter_mut().zip(&f.0) {
            *a += v;
        }
    }
    let n = per_frame.len() as f64;
    Ok(FeatureVector(acc.into_iter().map(|a| a / n).collect()))
}

/// Single dot-product self-attention layer over frames with a residual
/// connection: `out_t = sum_s softmax_s(<x_t, x_s> / sqrt(D)) x_s + x_t`.
pub fn temporal_attention_pool(per_frame: &[FeatureVector]) -> Result<Vec<FeatureVector>> {
    let dim = check_frames(per_frame)?;
    let scale = 1.0 / (dim as f64).sqrt();
    let out = per_frame
        .iter()
        .map(|xt| {
            let scores: Vec<f64> = per_frame.iter().map(|xs| xt.dot(xs) * scale).collect();
            let weights = softmax(&scores);
            let mut row = xt.0.clone();
            for (w, xs) in weights.iter().zip(per_frame) {
                for (r, v) in row.iter_mut().zip(&xs.0) {
                    *r += w * v;
                }
            }
            FeatureVector(row)
        })
        .collect();
    Ok(out)
}

pub(crate) fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Per-frame features together with their pooled sequence representation.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceFeature {
    pub per_frame: Vec<FeatureVector>,
    pub pooled: FeatureVector,
}

/// Attention (optional) followed by TAP.
pub fn pool_sequence(per_frame: Vec<FeatureVector>, attention: bool) -> Result<SequenceFeature> {
    let pooled = if attention {
        tap_pool(&temporal_attention_pool(&per_frame)?)?
    } else {
        tap_pool(&per_frame)?
    };
    Ok(SequenceFeature { per_frame, pooled })
}

/// What an embedder may look at for one detection.
#[derive(Debug, Clone, Copy)]
pub struct DetectionInput<'a> {
    /// Row of the detection in its source det file.
    pub index: usize,
    /// Identity label, when the source carries one (synthetic data).
    pub identity: Option<i64>,
    /// Raw descriptor row, for learned embedders.
    pub raw: Option<&'a [f64]>,
}

impl<'a> DetectionInput<'a> {
    pub fn indexed(index: usize) -> Self {
        Self {
            index,
            identity: None,
            raw: None,
        }
    }
}

pub trait Embedder {
    fn dim(&self) -> usize;
    fn embed(&self, input: &DetectionInput<'_>) -> Result<FeatureVector>;
}

pub fn embed_detection(embedder: &dyn Embedder, input: &DetectionInput<'_>, run_dim: usize) -> Result<FeatureVector> {
    if embedder.dim() != run_dim {
        return Err(Error::DimensionMismatch {
            expected: run_dim,
            actual: embedder.dim(),
        });
    }
    let f = embedder.embed(input)?;
    if f.dim() != run_dim {
        return Err(Error::DimensionMismatch {
            expected: run_dim,
            actual: f.dim(),
        });
    }
    Ok(f)
}

pub fn embed_sequence(embedder: &dyn Embedder, frames: &[DetectionInput<'_>], attention: bool) -> Result<SequenceFeature> {
    let per_frame = frames
        .iter()
        .map(|f| embed_detection(embedder, f, embedder.dim()))
        .collect::<Result<Vec<_>>>()?;
    pool_sequence(per_frame, attention)
}

/// Looks rows up in a precomputed EMB1 matrix.
#[derive(Debug, Clone)]
pub struct FileEmbedder {
    matrix: EmbeddingMatrix,
}

impl FileEmbedder {
    pub fn new(matrix: EmbeddingMatrix) -> Self {
        Self { matrix }
    }

    pub fn rows(&self) -> usize {
        self.matrix.rows
    }
}

impl Embedder for FileEmbedder {
    fn dim(&self) -> usize {
        self.matrix.dim
    }

    fn embed(&self, input: &DetectionInput<'_>) -> Result<FeatureVector> {
        if input.index >= self.matrix.rows {
            return Err(Error::Embedding(format!(
                "detection {} has no embedding row ({} rows)",
                input.index, self.matrix.rows
            )));
        }
        Ok(FeatureVector(self.matrix.row(input.index).to_vec()))
    }
}

/// Perfect-information embedder: one-hot of the identity plus seeded Gaussian noise.
#[derive(Debug, Clone)]
pub struct OracleEmbedder {
    pub dim: usize,
    pub noise: f64,
    pub seed: u64,
}

impl OracleEmbedder {
    pub fn new(dim: usize, noise: f64, seed: u64) -> Self {
        Self { dim, noise, seed }
    }
}

impl Embedder for OracleEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, input: &DetectionInput<'_>) -> Result<FeatureVector> {
        let id = input
            .identity
            .filter(|&id| id >= 0)
            .ok_or_else(|| Error::Embedding(format!("oracle embedder: detection {} has no identity", input.index)))?;
        let mut v = vec![0.0; self.dim];
        v[id as usize % self.dim] = 1.0;
        if self.noise > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (input.index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let normal = Normal::new(0.0, self.noise).expect("finite noise");
            for x in &mut v {
                *x += normal.sample(&mut rng);
            }
        }
        Ok(FeatureVector(v))
    }
}
