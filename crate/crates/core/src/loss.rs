//! Objective terms of mutual detection/sequence representation learning:
//! cross-sample difference matrices and the cross loss, hardest-mining
//! modality triplet losses, the identity cross-entropy and their sum.
//!
//! These are the reference (non-differentiable) evaluations. The trainer
//! builds the same quantities on its gradient tape and is tested against
//! these functions.

use crate::error::{Error, Result};
use crate::features::{euclidean, FeatureVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixKind {
    Sequence,
    Detection,
}

/// Square `(N*T) x (N*T)` matrix of pairwise Euclidean distances.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossSampleMatrix {
    pub size: usize,
    pub data: Vec<f64>,
    pub kind: MatrixKind,
}

impl CrossSampleMatrix {
    pub fn get(&self, g: usize, h: usize) -> f64 {
        self.data[g * self.size + h]
    }
}

/// Normalisation applied outside the square root of the cross loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CrossNorm {
    /// `1 / (G H)`.
    #[default]
    PerEntry,
    /// `1 / sqrt(G H)`, i.e. an RMS difference.
    Rms,
}

/// Identity of every (sequence, frame) slot of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLabels {
    pub sequences: usize,
    pub frames: usize,
    slots: Vec<i64>,
}

impl BatchLabels {
    /// One identity per sequence, repeated over its frames.
    pub fn from_sequences(seq_labels: &[i64], frames: usize) -> Self {
        let slots = seq_labels
            .iter()
            .flat_map(|&l| std::iter::repeat_n(l, frames))
            .collect();
        Self {
            sequences: seq_labels.len(),
            frames,
            slots,
        }
    }

    pub fn sequence(&self, n: usize) -> i64 {
        self.slots[n * self.frames]
    }

    pub fn slot(&self, g: usize) -> i64 {
        self.slots[g]
    }

    pub fn sequence_labels(&self) -> Vec<i64> {
        (0..self.sequences).map(|n| self.sequence(n)).collect()
    }

    pub fn slots(&self) -> &[i64] {
        &self.slots
    }

    pub fn distinct_identities(&self) -> usize {
        let mut ids = self.sequence_labels();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }
}

fn check_dims(features: &[FeatureVector]) -> Result<usize> {
    let dim = features.first().map_or(0, FeatureVector::dim);
    if let Some(bad) = features.iter().find(|f| f.dim() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: bad.dim(),
        });
    }
    Ok(dim)
}

/// Sequence-side matrix: every `T x T` tile `(i, j)` holds `|f_Si - f_Sj|`.
pub fn seq_cross_matrix(pooled: &[FeatureVector], frames: usize) -> Result<CrossSampleMatrix> {
    if pooled.is_empty() || frames == 0 {
        return Err(Error::Contract("sequence cross matrix needs N >= 1 and T >= 1".into()));
    }
    check_dims(pooled)?;
    let n = pooled.len();
    let size = n * frames;
    let mut data = vec![0.0; size * size];
    for g in 0..size {
        for h in 0..size {
            data[g * size + h] = pooled[g / frames].distance(&pooled[h / frames]);
        }
    }
    Ok(CrossSampleMatrix {
        size,
        data,
        kind: MatrixKind::Sequence,
    })
}

/// Detection-side matrix: `c_gh = |d_g - d_h|` over the flattened batch.
pub fn det_cross_matrix(flat: &[FeatureVector]) -> Result<CrossSampleMatrix> {
    if flat.is_empty() {
        return Err(Error::Contract("detection cross matrix needs at least one feature".into()));
    }
    check_dims(flat)?;
    let size = flat.len();
    let mut data = vec![0.0; size * size];
    for g in 0..size {
        for h in 0..size {
            data[g * size + h] = flat[g].distance(&flat[h]);
        }
    }
    Ok(CrossSampleMatrix {
        size,
        data,
        kind: MatrixKind::Detection,
    })
}

pub fn cross_loss(m_seq: &CrossSampleMatrix, m_det: &CrossSampleMatrix, norm: CrossNorm) -> Result<f64> {
    if m_seq.size != m_det.size {
        return Err(Error::Shape(format!(
            "cross loss needs equal shapes, got {0}x{0} and {1}x{1}",
            m_seq.size, m_det.size
        )));
    }
    let gh = (m_seq.size * m_det.size) as f64;
    let frob = m_seq
        .data
        .iter()
        .zip(&m_det.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(match norm {
        CrossNorm::PerEntry => frob / gh,
        CrossNorm::Rms => frob / gh.sqrt(),
    })
}

pub fn triplet_hinge(hardest_positive: f64, hardest_negative: f64, margin: f64) -> f64 {
    (hardest_positive - hardest_negative + margin).max(0.0)
}

/// Cross- and within-modality components of the modality loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModalityTerms {
    pub cross: f64,
    pub within: f64,
}

impl ModalityTerms {
    pub fn total(&self) -> f64 {
        self.cross + self.within
    }
}

/// Hardest-positive / hardest-negative hinge for one anchor against a gallery.
fn mined_hinge(anchor: &[f64], anchor_label: i64, gallery: &[FeatureVector], labels: impl Fn(usize) -> i64, margin: f64) -> f64 {
    let mut pos = f64::NEG_INFINITY;
    let mut neg = f64::INFINITY;
    for (k, g) in gallery.iter().enumerate() {
        let d = euclidean(anchor, g.as_slice());
        if labels(k) == anchor_label {
            pos = pos.max(d);
        } else {
            neg = neg.min(d);
        }
    }
    triplet_hinge(pos, neg, margin)
}

/// Modality loss split into its two components. Each component averages
/// over all anchors, sequences and detections together.
pub fn modality_terms(pooled: &[FeatureVector], flat: &[FeatureVector], labels: &BatchLabels, margin: f64) -> Result<ModalityTerms> {
    if pooled.len() != labels.sequences || flat.len() != labels.sequences * labels.frames {
        return Err(Error::Shape(format!(
            "modality loss: {} sequences / {} detections do not match labels {}x{}",
            pooled.len(),
            flat.len(),
            labels.sequences,
            labels.frames
        )));
    }
    if labels.distinct_identities() < 2 {
        return Err(Error::Contract(
            "modality loss needs at least 2 identities per batch (sample P >= 2 identities)".into(),
        ));
    }
    let dim = check_dims(pooled)?;
    if check_dims(flat)? != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: flat[0].dim(),
        });
    }
    let seq_label = |j: usize| labels.sequence(j);
    let det_label = |g: usize| labels.slot(g);
    let anchors = (pooled.len() + flat.len()) as f64;

    let mut cross = 0.0;
    let mut within = 0.0;
    for (i, s) in pooled.iter().enumerate() {
        cross += mined_hinge(s.as_slice(), seq_label(i), flat, det_label, margin);
        within += mined_hinge(s.as_slice(), seq_label(i), pooled, seq_label, margin);
    }
    for (g, d) in flat.iter().enumerate() {
        cross += mined_hinge(d.as_slice(), det_label(g), pooled, seq_label, margin);
        within += mined_hinge(d.as_slice(), det_label(g), flat, det_label, margin);
    }
    Ok(ModalityTerms {
        cross: cross / anchors,
        within: within / anchors,
    })
}

pub fn modality_loss(pooled: &[FeatureVector], flat: &[FeatureVector], labels: &BatchLabels, margin: f64) -> Result<f64> {
    modality_terms(pooled, flat, labels, margin).map(|t| t.total())
}

/// Mean negative log-likelihood of the true class under a softmax.
pub fn similarity_loss(logits: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if logits.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    if logits.is_empty() {
        return Err(Error::Contract("similarity loss over an empty batch".into()));
    }
    let mut total = 0.0;
    for (row, &label) in logits.iter().zip(labels) {
        if label >= row.len() {
            return Err(Error::Contract(format!(
                "label {label} out of range for {} classes",
                row.len()
            )));
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        total += lse - row[label];
    }
    Ok(total / logits.len() as f64)
}

pub fn total_loss(cross: f64, modality: f64, similarity: f64) -> f64 {
    cross + modality + similarity
}
