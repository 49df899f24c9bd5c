//! Detection-to-sequence association for drifting tracks.

use crate::assignment::hungarian;
use crate::error::{Error, Result};
use crate::features::{cosine, pool_sequence, FeatureVector};
use crate::geometry::{iou, BoundingBox};
use crate::model::Model;

/// A detection admitted by a drifting track's gate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub detection: usize,
    pub bbox: BoundingBox,
    /// Center distance to the predicted position, in pixels.
    pub gate_distance: f64,
}

/// Detections whose center lies within `tau_d` track-box diagonals of the
/// predicted center and which overlap no tracked box by more than `tau_o`.
pub fn gate_candidates(
    predicted: &BoundingBox,
    detections: &[BoundingBox],
    tracked_boxes: &[BoundingBox],
    tau_d: f64,
    tau_o: f64,
) -> Vec<Candidate> {
    let center = predicted.center();
    let radius = tau_d * predicted.diagonal();
    detections
        .iter()
        .enumerate()
        .filter_map(|(detection, b)| {
            let gate_distance = b.center().distance(&center);
            let free = tracked_boxes.iter().all(|t| iou(t, b) <= tau_o);
            (gate_distance <= radius && free).then_some(Candidate {
                detection,
                bbox: *b,
                gate_distance,
            })
        })
        .collect()
}

/// How a track history and a candidate descriptor become an affinity.
#[derive(Debug, Clone, Copy)]
pub enum AffinityMode<'a> {
    /// Learned encoders plus the match head's MATCH probability.
    Head(&'a Model),
    /// Cosine similarity clamped to `[0, 1]`, in the learned space when a
    /// model is given and on the raw descriptors otherwise.
    Cosine { model: Option<&'a Model>, attention: bool },
}

/// Affinity between a track's stored descriptors (oldest first) and one
/// candidate descriptor. Only the `seq_len` most recent entries are pooled.
pub fn score_affinity(history: &[&[f64]], candidate: &[f64], mode: AffinityMode<'_>, seq_len: usize) -> Result<f64> {
    if history.is_empty() {
        return Err(Error::Contract("affinity needs a non-empty track history".into()));
    }
    if let Some(bad) = history.iter().find(|h| h.len() != candidate.len()) {
        return Err(Error::DimensionMismatch {
            expected: candidate.len(),
            actual: bad.len(),
        });
    }
    let recent = &history[history.len().saturating_sub(seq_len.max(1))..];
    match mode {
        AffinityMode::Head(model) => {
            let seq = model.embed_sequence(recent)?;
            let det = model.embed_detection(candidate)?;
            model.match_probability(&seq, &det)
        }
        AffinityMode::Cosine { model: Some(model), .. } => {
            let seq = model.embed_sequence(recent)?;
            let det = model.embed_detection(candidate)?;
            Ok(cosine(seq.as_slice(), det.as_slice()).clamp(0.0, 1.0))
        }
        AffinityMode::Cosine { model: None, attention } => {
            let frames = recent.iter().map(|h| FeatureVector(h.to_vec())).collect();
            let seq = pool_sequence(frames, attention)?;
            Ok(cosine(seq.pooled.as_slice(), candidate).clamp(0.0, 1.0))
        }
    }
}

/// Affinities of drifting tracks (rows, keyed by track id) against
/// detections (columns, keyed by detection index). `None` marks a pair the
/// gate rejected.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AffinityTable {
    pub tracks: Vec<u64>,
    pub detections: Vec<usize>,
    pub values: Vec<Vec<Option<f64>>>,
}

impl AffinityTable {
    pub fn new(tracks: Vec<u64>, detections: Vec<usize>) -> Self {
        let values = vec![vec![None; detections.len()]; tracks.len()];
        Self {
            tracks,
            detections,
            values,
        }
    }

    pub fn set(&mut self, row: usize, col: usize, affinity: f64) {
        self.values[row][col] = Some(affinity);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AssignMethod {
    #[default]
    Greedy,
    Hungarian,
}

/// `(track id, detection index)` pairs with affinity at least `tau_a`.
pub fn assign(table: &AffinityTable, tau_a: f64, method: AssignMethod) -> Vec<(u64, usize)> {
    match method {
        AssignMethod::Greedy => assign_greedy(table, tau_a),
        AssignMethod::Hungarian => assign_hungarian(table, tau_a),
    }
}

fn admissible(table: &AffinityTable, tau_a: f64) -> Vec<(f64, usize, usize)> {
    let mut entries = Vec::new();
    for (r, row) in table.values.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            if let Some(a) = v.filter(|a| *a >= tau_a) {
                entries.push((a, r, c));
            }
        }
    }
    entries
}

/// Repeatedly fixes the global maximum; ties go to the lower track id, then
/// the lower detection index.
pub fn assign_greedy(table: &AffinityTable, tau_a: f64) -> Vec<(u64, usize)> {
    let mut entries = admissible(table, tau_a);
    entries.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then(table.tracks[a.1].cmp(&table.tracks[b.1]))
            .then(table.detections[a.2].cmp(&table.detections[b.2]))
    });
    let mut row_used = vec![false; table.tracks.len()];
    let mut col_used = vec![false; table.detections.len()];
    let mut out = Vec::new();
    for (_, r, c) in entries {
        if !row_used[r] && !col_used[c] {
            row_used[r] = true;
            col_used[c] = true;
            out.push((table.tracks[r], table.detections[c]));
        }
    }
    out.sort_unstable();
    out
}

/// Maximum total affinity over admissible pairs.
pub fn assign_hungarian(table: &AffinityTable, tau_a: f64) -> Vec<(u64, usize)> {
    let cost: Vec<Vec<f64>> = table
        .values
        .iter()
        .map(|row| {
            row.iter()
                .map(|v| match v {
                    Some(a) if *a >= tau_a => 1.0 - a,
                    _ => f64::INFINITY,
                })
                .collect()
        })
        .collect();
    let mut out: Vec<(u64, usize)> = hungarian(&cost)
        .into_iter()
        .enumerate()
        .filter_map(|(r, c)| c.map(|c| (table.tracks[r], table.detections[c])))
        .collect();
    out.sort_unstable();
    out
}
