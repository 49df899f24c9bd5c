//! Mutual training of the detection and sequence encoders.
//!
//! A batch holds `P` identities x `Q` tracklets x `T` frames. The sequence
//! encoder sees the (optionally noise-augmented) tracklets and pools each to
//! one feature; the detection encoder sees the same `N*T` frames one by one.
//! The objective is `L_C + L_M + L_S`: cross-sample matrix agreement, the
//! hardest-mining modality triplets, and the match head's 2-way cross-entropy
//! (plus an optional identity cross-entropy). With selective
//! back-propagation the cross loss reaches only the detection encoder.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::{tap_pool, FeatureVector};
use crate::loss::{BatchLabels, CrossNorm};
use crate::model::{Model, ModelDims, ParamVars, MATCH};
use crate::mot_io::{fmt_real, parse_ini};
use crate::tape::{Tape, Tensor, Var};

/// Frames of one identity observed over consecutive time steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Tracklet {
    pub identity: i64,
    pub frames: Vec<Vec<f64>>,
    /// Frames with the target partly hidden; empty when none are.
    pub occluded: Vec<bool>,
}

impl Tracklet {
    pub fn new(identity: i64, frames: Vec<Vec<f64>>) -> Self {
        Self {
            identity,
            frames,
            occluded: Vec::new(),
        }
    }

    pub fn is_occluded(&self, frame: usize) -> bool {
        self.occluded.get(frame).copied().unwrap_or(false)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackletDataset {
    pub input_dim: usize,
    pub tracklets: Vec<Tracklet>,
}

impl TrackletDataset {
    /// Tracklet indices grouped by identity, identities ascending.
    pub fn by_identity(&self) -> BTreeMap<i64, Vec<usize>> {
        let mut map: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
        for (i, t) in self.tracklets.iter().enumerate() {
            map.entry(t.identity).or_default().push(i);
        }
        map
    }

    pub fn identities(&self) -> Vec<i64> {
        self.by_identity().into_keys().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatchPair {
    pub seq: usize,
    pub det: usize,
    pub is_match: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledBatch {
    pub p: usize,
    pub q: usize,
    pub t: usize,
    pub seq_labels: Vec<i64>,
    /// `N*T` rows fed to the sequence encoder, sequence-major.
    pub seq_frames: Vec<Vec<f64>>,
    /// The same `N*T` frames as independent detections.
    pub det_frames: Vec<Vec<f64>>,
    pub pairs: Vec<MatchPair>,
}

impl SampledBatch {
    pub fn n(&self) -> usize {
        self.seq_labels.len()
    }

    pub fn labels(&self) -> BatchLabels {
        BatchLabels::from_sequences(&self.seq_labels, self.t)
    }
}

/// Draws `P` identities, `Q` tracklets each (equal probability per tracklet)
/// and a `T`-frame window from the `M` most recent frames of each. Short
/// tracklets are padded by uniform resampling of their own frames.
pub fn sample_batch(dataset: &TrackletDataset, p: usize, q: usize, t: usize, m: usize, rng: &mut impl Rng) -> Result<SampledBatch> {
    let groups = dataset.by_identity();
    if groups.len() < 2 {
        return Err(Error::Sampling(format!(
            "need at least 2 identities for negatives, dataset has {}",
            groups.len()
        )));
    }
    if p < 2 || p > groups.len() {
        return Err(Error::Sampling(format!(
            "P = {p} identities requested, dataset has {} (need 2 <= P <= identities)",
            groups.len()
        )));
    }
    if q == 0 || t == 0 || m == 0 {
        return Err(Error::Sampling("Q, T and M must be positive".into()));
    }
    let ids: Vec<i64> = groups.keys().copied().collect();
    let chosen: Vec<i64> = ids.choose_multiple(rng, p).copied().collect();

    let mut seq_labels = Vec::with_capacity(p * q);
    let mut frames = Vec::with_capacity(p * q * t);
    for id in chosen {
        let pool = &groups[&id];
        let picks: Vec<usize> = if pool.len() >= q {
            pool.choose_multiple(rng, q).copied().collect()
        } else {
            (0..q).map(|_| *pool.choose(rng).expect("identity has tracklets")).collect()
        };
        for ti in picks {
            let tracklet = &dataset.tracklets[ti];
            let start = tracklet.frames.len().saturating_sub(m);
            let preserved = &tracklet.frames[start..];
            if preserved.is_empty() {
                return Err(Error::Sampling(format!("tracklet {ti} has no frames")));
            }
            for idx in window_indices(preserved.len(), t, rng) {
                frames.push(preserved[idx].clone());
            }
            seq_labels.push(id);
        }
    }
    let labels = BatchLabels::from_sequences(&seq_labels, t);
    let pairs = build_match_pairs(&labels, rng);
    Ok(SampledBatch {
        p,
        q,
        t,
        seq_labels,
        seq_frames: frames.clone(),
        det_frames: frames,
        pairs,
    })
}

/// `t` frame indices in temporal order out of `len` preserved frames.
fn window_indices(len: usize, t: usize, rng: &mut impl Rng) -> Vec<usize> {
    if len >= t {
        let start = rng.gen_range(0..=len - t);
        (start..start + t).collect()
    } else {
        let mut idx: Vec<usize> = (0..len).collect();
        idx.extend((len..t).map(|_| rng.gen_range(0..len)));
        idx.sort_unstable();
        idx
    }
}

/// For each sequence: its own `T` detections as matches, and `T` detections
/// of other identities (without replacement where possible) as non-matches.
pub fn build_match_pairs(labels: &BatchLabels, rng: &mut impl Rng) -> Vec<MatchPair> {
    let nt = labels.sequences * labels.frames;
    let mut pairs = Vec::with_capacity(2 * nt);
    for n in 0..labels.sequences {
        let own = labels.sequence(n);
        for k in 0..labels.frames {
            pairs.push(MatchPair {
                seq: n,
                det: n * labels.frames + k,
                is_match: true,
            });
        }
        let others: Vec<usize> = (0..nt).filter(|&g| labels.slot(g) != own).collect();
        let negs: Vec<usize> = if others.len() >= labels.frames {
            others.choose_multiple(rng, labels.frames).copied().collect()
        } else {
            (0..labels.frames).map(|_| *others.choose(rng).expect("two identities")).collect()
        };
        pairs.extend(negs.into_iter().map(|det| MatchPair {
            seq: n,
            det,
            is_match: false,
        }));
    }
    pairs
}

/// Replaces each sequence slot, with probability `noise_rate`, by a frame of
/// a different identity from the same batch. Labels and the detection view
/// are untouched.
pub fn augment(batch: &SampledBatch, noise_rate: f64, rng: &mut impl Rng) -> SampledBatch {
    let mut out = batch.clone();
    if noise_rate <= 0.0 {
        return out;
    }
    let labels = batch.labels();
    let nt = batch.det_frames.len();
    for g in 0..nt {
        if rng.gen::<f64>() >= noise_rate {
            continue;
        }
        let others: Vec<usize> = (0..nt).filter(|&h| labels.slot(h) != labels.slot(g)).collect();
        if let Some(&h) = others.choose(rng) {
            out.seq_frames[g] = batch.det_frames[h].clone();
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOptions {
    pub margin: f64,
    pub cross_norm: CrossNorm,
    pub identity_loss: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            margin: 0.3,
            cross_norm: CrossNorm::PerEntry,
            identity_loss: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Losses {
    pub cross: f64,
    pub modality: f64,
    pub similarity: f64,
}

impl Losses {
    pub fn total(&self) -> f64 {
        self.cross + self.modality + self.similarity
    }
}

/// Which objective a backward pass differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// `L_C + L_M + L_S` with every gradient path open.
    Full,
    /// Same value; `L_C` sees the sequence features as constants.
    Selective,
    /// `L_M + L_S` only.
    WithoutCross,
}

/// Recorded forward computation, kept for the backward pass.
#[derive(Debug)]
pub struct ForwardPass {
    pub tape: Tape,
    pub vars: ParamVars,
    pub losses: Losses,
    pub det_features: Var,
    pub seq_features: Var,
    full: Var,
    selective: Var,
    without_cross: Var,
}

impl ForwardPass {
    pub fn root(&self, objective: Objective) -> Var {
        match objective {
            Objective::Full => self.full,
            Objective::Selective => self.selective,
            Objective::WithoutCross => self.without_cross,
        }
    }

    pub fn kink_margin(&self) -> f64 {
        self.tape.kink_margin()
    }
}

pub fn forward_losses(batch: &SampledBatch, model: &Model, opts: &LossOptions) -> Result<ForwardPass> {
    let n = batch.n();
    let t = batch.t;
    let nt = n * t;
    if batch.det_frames.len() != nt || batch.seq_frames.len() != nt {
        return Err(Error::Shape(format!("batch holds {} frames, expected {nt}", batch.det_frames.len())));
    }
    if let Some(bad) = batch.det_frames.iter().chain(&batch.seq_frames).find(|f| f.len() != model.dims.input) {
        return Err(Error::DimensionMismatch {
            expected: model.dims.input,
            actual: bad.len(),
        });
    }
    let labels = batch.labels();
    if labels.distinct_identities() < 2 {
        return Err(Error::Contract(
            "modality loss needs at least 2 identities per batch (sample P >= 2 identities)".into(),
        ));
    }

    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let rows = |f: &[Vec<f64>]| Tensor::from_rows(&f.iter().map(Vec::as_slice).collect::<Vec<_>>());
    let x_det = tape.leaf(rows(&batch.det_frames));
    let x_seq = tape.leaf(rows(&batch.seq_frames));

    let det = model.encode_detections(&mut tape, &vars, x_det);
    let per_frame = model.encode_frames(&mut tape, &vars, x_seq);
    let seq = model.pool_blocks(&mut tape, per_frame, t);

    // cross loss, once through the live sequence features and once through a detached copy
    let det_dist = tape.pairwise_dist(det, det);
    let gh = (nt * nt) as f64;
    let norm = match opts.cross_norm {
        CrossNorm::PerEntry => 1.0 / gh,
        CrossNorm::Rms => 1.0 / gh.sqrt(),
    };
    let cross_through = |tape: &mut Tape, s: Var| {
        let sd = tape.pairwise_dist(s, s);
        let m_seq = tape.tile_expand(sd, t);
        let f = tape.frob_diff(m_seq, det_dist);
        tape.scale(f, norm)
    };
    let cross_live = cross_through(&mut tape, seq);
    let seq_const = tape.detach(seq);
    let cross_sel = cross_through(&mut tape, seq_const);

    // modality loss
    let seq_lab = labels.sequence_labels();
    let det_lab = labels.slots().to_vec();
    let s2d = tape.pairwise_dist(seq, det);
    let d2s = tape.pairwise_dist(det, seq);
    let s2s = tape.pairwise_dist(seq, seq);
    let m = opts.margin;
    let h_s2d = tape.mined_hinge(s2d, |i, j| seq_lab[i] == det_lab[j], m);
    let h_d2s = tape.mined_hinge(d2s, |i, j| det_lab[i] == seq_lab[j], m);
    let h_s2s = tape.mined_hinge(s2s, |i, j| seq_lab[i] == seq_lab[j], m);
    let h_d2d = tape.mined_hinge(det_dist, |i, j| det_lab[i] == det_lab[j], m);
    let anchors = 1.0 / (n + nt) as f64;
    let cross_modal = tape.add(h_s2d, h_d2s);
    let cross_modal = tape.scale(cross_modal, anchors);
    let within = tape.add(h_s2s, h_d2d);
    let within = tape.scale(within, anchors);
    let modality = tape.add(cross_modal, within);

    // similarity loss over match / non-match pairs
    let seq_idx: Vec<usize> = batch.pairs.iter().map(|p| p.seq).collect();
    let det_idx: Vec<usize> = batch.pairs.iter().map(|p| p.det).collect();
    let pair_labels: Vec<usize> = batch
        .pairs
        .iter()
        .map(|p| if p.is_match { MATCH } else { 1 - MATCH })
        .collect();
    let gs = tape.gather_rows(seq, &seq_idx);
    let gd = tape.gather_rows(det, &det_idx);
    let pair = tape.concat_cols(gs, gd);
    let logits = model.head_logits(&mut tape, &vars, pair);
    let mut similarity = tape.softmax_ce(logits, &pair_labels);
    if opts.identity_loss {
        let classes = model.dims.classes;
        let class_of = |id: i64| -> Result<usize> {
            usize::try_from(id)
                .ok()
                .filter(|&c| c < classes)
                .ok_or_else(|| Error::Contract(format!("identity {id} outside the {classes}-class identity head")))
        };
        let both = tape.concat_rows(&[seq, det]);
        if let Some(id_logits) = model.identity_logits(&mut tape, &vars, both) {
            let targets = seq_lab
                .iter()
                .chain(&det_lab)
                .map(|&id| class_of(id))
                .collect::<Result<Vec<_>>>()?;
            let ce = tape.softmax_ce(id_logits, &targets);
            similarity = tape.add(similarity, ce);
        }
    }

    let rest = tape.add(modality, similarity);
    let full = tape.add(cross_live, rest);
    let selective = tape.add(cross_sel, rest);
    let without_cross = rest;

    let losses = Losses {
        cross: tape.value(cross_live).item(),
        modality: tape.value(modality).item(),
        similarity: tape.value(similarity).item(),
    };
    Ok(ForwardPass {
        tape,
        vars,
        losses,
        det_features: det,
        seq_features: seq,
        full,
        selective,
        without_cross,
    })
}

/// Exact gradients of the chosen objective, one tensor per model parameter.
pub fn backward(pass: &ForwardPass, model: &Model, objective: Objective) -> Vec<Tensor> {
    let grads = pass.tape.backward(pass.root(objective));
    pass.vars
        .0
        .iter()
        .zip(&model.params)
        .map(|(&v, p)| grads.of(v, &p.value))
        .collect()
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(model: &Model, lr: f64) -> Self {
        let zeros: Vec<Tensor> = model.params.iter().map(|p| Tensor::zeros(p.value.rows, p.value.cols)).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, model: &mut Model, grads: &[Tensor]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in model.params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for k in 0..g.data.len() {
                let gk = g.data[k];
                m.data[k] = self.beta1 * m.data[k] + (1.0 - self.beta1) * gk;
                v.data[k] = self.beta2 * v.data[k] + (1.0 - self.beta2) * gk * gk;
                let mh = m.data[k] / bc1;
                let vh = v.data[k] / bc2;
                p.value.data[k] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub p: usize,
    pub q: usize,
    pub t: usize,
    pub dim: usize,
    pub hidden: usize,
    pub max_history: usize,
    pub margin: f64,
    pub lr: f64,
    pub epochs: usize,
    /// 0 picks `ceil(tracklets / N)`.
    pub batches_per_epoch: usize,
    pub noise_rate: f64,
    pub selective: bool,
    pub attention: bool,
    pub cross_norm: CrossNorm,
    pub identity_loss: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            p: 4,
            q: 2,
            t: 8,
            dim: 32,
            hidden: 32,
            max_history: 100,
            margin: 0.3,
            lr: 1e-4,
            epochs: 80,
            batches_per_epoch: 0,
            noise_rate: 0.0,
            selective: true,
            attention: true,
            cross_norm: CrossNorm::PerEntry,
            identity_loss: false,
            seed: 1,
        }
    }
}

const TRAIN_KEYS: &[&str] = &[
    "P",
    "Q",
    "T",
    "D",
    "hidden",
    "M",
    "margin",
    "lr",
    "epochs",
    "batches_per_epoch",
    "noise_rate",
    "selective",
    "attention",
    "cross_norm",
    "identity_loss",
    "seed",
];

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |message: String| Error::BadValue {
            key: key.to_string(),
            message,
        };
        let int = || value.parse::<usize>().map_err(|_| bad(format!("expected a non-negative integer, got `{value}`")));
        let real = || value.parse::<f64>().map_err(|_| bad(format!("expected a number, got `{value}`")));
        let flag = || match value {
            "true" | "1" | "yes" | "on" => Ok(true),
            "false" | "0" | "no" | "off" => Ok(false),
            _ => Err(bad(format!("expected true/false, got `{value}`"))),
        };
        match key {
            "P" => self.p = int()?,
            "Q" => self.q = int()?,
            "T" => self.t = int()?,
            "D" => self.dim = int()?,
            "hidden" => self.hidden = int()?,
            "M" => self.max_history = int()?,
            "margin" => self.margin = real()?,
            "lr" => self.lr = real()?,
            "epochs" => self.epochs = int()?,
            "batches_per_epoch" => self.batches_per_epoch = int()?,
            "noise_rate" => self.noise_rate = real()?,
            "selective" => self.selective = flag()?,
            "attention" => self.attention = flag()?,
            "identity_loss" => self.identity_loss = flag()?,
            "cross_norm" => {
                self.cross_norm = match value {
                    "per_entry" => CrossNorm::PerEntry,
                    "rms" => CrossNorm::Rms,
                    _ => return Err(bad(format!("expected per_entry or rms, got `{value}`"))),
                }
            }
            "seed" => self.seed = value.parse().map_err(|_| bad(format!("expected an integer, got `{value}`")))?,
            _ => {
                return Err(Error::UnknownKey {
                    key: key.to_string(),
                    valid: TRAIN_KEYS.join(", "),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        for (key, v) in [("P", self.p), ("Q", self.q), ("T", self.t), ("D", self.dim), ("hidden", self.hidden), ("M", self.max_history)] {
            if v == 0 {
                return Err(Error::BadValue {
                    key: key.into(),
                    message: "must be positive".into(),
                });
            }
        }
        if self.p < 2 {
            return Err(Error::BadValue {
                key: "P".into(),
                message: "needs at least 2 identities per batch".into(),
            });
        }
        if !(self.margin > 0.0) || !(self.lr > 0.0) {
            return Err(Error::BadValue {
                key: if self.margin > 0.0 { "lr" } else { "margin" }.into(),
                message: "must be positive".into(),
            });
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return Err(Error::BadValue {
                key: "noise_rate".into(),
                message: "must lie in [0, 1)".into(),
            });
        }
        Ok(())
    }

    pub fn from_ini_str(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        for (_, key, value, _) in parse_ini(text, path)? {
            cfg.set(&key, &value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_ini_str(&text, path)
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            margin: self.margin,
            cross_norm: self.cross_norm,
            identity_loss: self.identity_loss,
        }
    }

    pub fn objective(&self) -> Objective {
        if self.selective {
            Objective::Selective
        } else {
            Objective::Full
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub losses: Losses,
}

pub fn telemetry_csv(stats: &[EpochStats]) -> String {
    let mut out = String::from("epoch,L_C,L_M,L_S,total\n");
    for s in stats {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            s.epoch,
            fmt_sci(s.losses.cross),
            fmt_sci(s.losses.modality),
            fmt_sci(s.losses.similarity),
            fmt_sci(s.losses.total())
        );
    }
    out
}

fn fmt_sci(v: f64) -> String {
    if v != 0.0 && v.abs() < 1e-3 {
        format!("{v:.6e}")
    } else {
        fmt_real(v)
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: Adam,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub telemetry: Vec<EpochStats>,
    /// Epoch at which a non-finite loss stopped training; `state` then
    /// holds the parameters from before that epoch.
    pub diverged_at: Option<usize>,
}

pub fn initial_model(dataset: &TrackletDataset, config: &TrainConfig) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    Model::init(model_dims(dataset, config), config.attention, &mut rng)
}

fn model_dims(dataset: &TrackletDataset, config: &TrainConfig) -> ModelDims {
    let classes = if config.identity_loss {
        dataset.identities().iter().max().map_or(0, |&m| (m + 1).max(0) as usize)
    } else {
        0
    };
    ModelDims {
        input: dataset.input_dim,
        hidden: config.hidden,
        dim: config.dim,
        classes,
    }
}

/// Runs Adam over sampled batches; one RNG seeded from `config.seed` drives
/// initialisation, sampling and augmentation.
pub fn train(dataset: &TrackletDataset, config: &TrainConfig, mut on_epoch: impl FnMut(&EpochStats)) -> Result<TrainOutcome> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = Model::init(model_dims(dataset, config), config.attention, &mut rng);
    let mut optimizer = Adam::new(&model, config.lr);
    let n = config.p * config.q;
    let batches = if config.batches_per_epoch > 0 {
        config.batches_per_epoch
    } else {
        dataset.tracklets.len().div_ceil(n).max(1)
    };
    let opts = config.loss_options();
    let mut telemetry = Vec::with_capacity(config.epochs);
    let mut diverged_at = None;

    for epoch in 1..=config.epochs {
        let snapshot = (model.clone(), optimizer.clone());
        let mut sum = Losses::default();
        let mut finite = true;
        for _ in 0..batches {
            let batch = sample_batch(dataset, config.p, config.q, config.t, config.max_history, &mut rng)?;
            let batch = augment(&batch, config.noise_rate, &mut rng);
            let pass = forward_losses(&batch, &model, &opts)?;
            if !pass.losses.total().is_finite() {
                finite = false;
                break;
            }
            let grads = backward(&pass, &model, config.objective());
            optimizer.update(&mut model, &grads);
            sum.cross += pass.losses.cross;
            sum.modality += pass.losses.modality;
            sum.similarity += pass.losses.similarity;
        }
        let params_finite = model.params.iter().all(|p| p.value.data.iter().all(|v| v.is_finite()));
        if !finite || !params_finite {
            (model, optimizer) = snapshot;
            diverged_at = Some(epoch);
            break;
        }
        let k = batches as f64;
        let stats = EpochStats {
            epoch,
            losses: Losses {
                cross: sum.cross / k,
                modality: sum.modality / k,
                similarity: sum.similarity / k,
            },
        };
        on_epoch(&stats);
        telemetry.push(stats);
    }
    Ok(TrainOutcome {
        state: TrainState {
            model,
            optimizer,
            seed: config.seed,
        },
        telemetry,
        diverged_at,
    })
}

/// Feature space used for retrieval and association.
#[derive(Debug, Clone, Copy)]
pub enum FeatureSpace<'a> {
    Learned(&'a Model),
    /// Raw descriptors, sequences pooled by plain averaging.
    Raw,
}

impl FeatureSpace<'_> {
    pub fn detection(&self, raw: &[f64]) -> Result<FeatureVector> {
        match self {
            FeatureSpace::Learned(m) => m.embed_detection(raw),
            FeatureSpace::Raw => Ok(FeatureVector(raw.to_vec())),
        }
    }

    pub fn sequence(&self, frames: &[&[f64]]) -> Result<FeatureVector> {
        match self {
            FeatureSpace::Learned(m) => m.embed_sequence(frames),
            FeatureSpace::Raw => tap_pool(&frames.iter().map(|f| FeatureVector(f.to_vec())).collect::<Vec<_>>()),
        }
    }
}

/// Detection-to-sequence top-1 retrieval. The gallery holds the first `t`
/// frames of each identity's first tracklet; every unoccluded frame of the
/// remaining tracklets is a query.
pub fn retrieval_accuracy(space: FeatureSpace<'_>, dataset: &TrackletDataset, t: usize) -> Result<f64> {
    let groups = dataset.by_identity();
    let mut gallery = Vec::new();
    for (&id, idx) in &groups {
        let frames: Vec<&[f64]> = dataset.tracklets[idx[0]].frames.iter().take(t).map(Vec::as_slice).collect();
        gallery.push((id, space.sequence(&frames)?));
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    for (&id, idx) in &groups {
        for &ti in &idx[1..] {
            let tracklet = &dataset.tracklets[ti];
            for (k, f) in tracklet.frames.iter().enumerate() {
                if tracklet.is_occluded(k) {
                    continue;
                }
                let q = space.detection(f)?;
                let best = gallery
                    .iter()
                    .min_by(|a, b| q.distance(&a.1).total_cmp(&q.distance(&b.1)))
                    .map(|g| g.0);
                hits += usize::from(best == Some(id));
                total += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::Contract("retrieval needs at least two tracklets per identity".into()));
    }
    Ok(hits as f64 / total as f64)
}
