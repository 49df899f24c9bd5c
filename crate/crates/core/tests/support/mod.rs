//! Checks shared by the core integration tests and the acceptance suite.
#![allow(dead_code)]

use mutrack::features::FeatureVector;
use mutrack::loss::{cross_loss, det_cross_matrix, modality_loss, seq_cross_matrix, similarity_loss, BatchLabels, CrossNorm};
use mutrack::model::{Group, Model, ModelDims, MATCH};
use mutrack::synthetic::{generate_dataset, DatasetSpec};
use mutrack::tape::{Tape, Tensor};
use mutrack::trainer::{backward, forward_losses, initial_model, sample_batch, Adam, LossOptions, Objective, SampledBatch, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const LOSS_TOL: f64 = 1e-9;

fn dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += (a[k] - b[k]) * (a[k] - b[k]);
    }
    s.sqrt()
}

pub fn cross_oracle(seq: &[Vec<f64>], det: &[Vec<f64>], t: usize, rms: bool) -> f64 {
    let g = det.len();
    let mut acc = 0.0;
    for a in 0..g {
        for b in 0..g {
            let diff = dist(&seq[a / t], &seq[b / t]) - dist(&det[a], &det[b]);
            acc += diff * diff;
        }
    }
    let entries = (g * g) as f64;
    if rms {
        acc.sqrt() / entries.sqrt()
    } else {
        acc.sqrt() / entries
    }
}

fn hinge(anchor: &[f64], label: i64, gallery: &[Vec<f64>], labels: &[i64], margin: f64) -> f64 {
    let mut pos = f64::NEG_INFINITY;
    let mut neg = f64::INFINITY;
    for k in 0..gallery.len() {
        let d = dist(anchor, &gallery[k]);
        if labels[k] == label {
            if d > pos {
                pos = d;
            }
        } else if d < neg {
            neg = d;
        }
    }
    let v = pos - neg + margin;
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

pub fn modality_oracle(seq: &[Vec<f64>], det: &[Vec<f64>], seq_lab: &[i64], det_lab: &[i64], margin: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..seq.len() {
        total += hinge(&seq[i], seq_lab[i], det, det_lab, margin);
        total += hinge(&seq[i], seq_lab[i], seq, seq_lab, margin);
    }
    for g in 0..det.len() {
        total += hinge(&det[g], det_lab[g], seq, seq_lab, margin);
        total += hinge(&det[g], det_lab[g], det, det_lab, margin);
    }
    total / (seq.len() + det.len()) as f64
}

pub fn similarity_oracle(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for r in 0..logits.len() {
        let mut z = 0.0;
        for v in &logits[r] {
            z += v.exp();
        }
        total += z.ln() - logits[r][labels[r]];
    }
    total / logits.len() as f64
}

fn gauss_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.5..1.5)).collect()).collect()
}

fn fvs(rows: &[Vec<f64>]) -> Vec<FeatureVector> {
    rows.iter().cloned().map(FeatureVector).collect()
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows).map(|r| t.row(r).to_vec()).collect()
}

fn close(what: &str, case: usize, got: f64, want: f64) -> Result<(), String> {
    if (got - want).abs() <= LOSS_TOL {
        Ok(())
    } else {
        Err(format!("{what}, case {case}: got {got}, oracle {want}"))
    }
}

/// Reference loss functions on random features (N <= 4, T <= 4, D <= 8).
pub fn reference_losses(cases: usize, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let n = rng.gen_range(2..=4);
        let t = rng.gen_range(1..=4);
        let d = rng.gen_range(1..=8);
        let mut seq_labels: Vec<i64> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        seq_labels[0] = 0;
        seq_labels[1] = 1;
        let seq = gauss_rows(&mut rng, n, d);
        let det = gauss_rows(&mut rng, n * t, d);
        let labels = BatchLabels::from_sequences(&seq_labels, t);

        let ms = seq_cross_matrix(&fvs(&seq), t).map_err(|e| e.to_string())?;
        let md = det_cross_matrix(&fvs(&det)).map_err(|e| e.to_string())?;
        for (norm, rms) in [(CrossNorm::PerEntry, false), (CrossNorm::Rms, true)] {
            let got = cross_loss(&ms, &md, norm).map_err(|e| e.to_string())?;
            close("cross", case, got, cross_oracle(&seq, &det, t, rms))?;
        }

        let margin = rng.gen_range(0.0..1.0);
        let got = modality_loss(&fvs(&seq), &fvs(&det), &labels, margin).map_err(|e| e.to_string())?;
        close("modality", case, got, modality_oracle(&seq, &det, &seq_labels, labels.slots(), margin))?;

        let classes = rng.gen_range(2..=4);
        let logits = gauss_rows(&mut rng, n * t, classes);
        let targets: Vec<usize> = (0..n * t).map(|_| rng.gen_range(0..classes)).collect();
        let got = similarity_loss(&logits, &targets).map_err(|e| e.to_string())?;
        close("similarity", case, got, similarity_oracle(&logits, &targets))?;
    }
    Ok(())
}

fn small_dataset(input: usize, seed: u64) -> mutrack::trainer::TrackletDataset {
    let spec = DatasetSpec {
        identities: 3,
        sequences: 2,
        frames: 6,
        input_dim: input,
        signal_dim: 1.max(input / 2),
        seed,
        ..DatasetSpec::default()
    };
    generate_dataset(&spec).expect("valid spec")
}

/// Losses recorded on the training tape for random small models and batches.
pub fn tape_losses(cases: usize, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let input = rng.gen_range(2..=8);
        let ds = small_dataset(input, case as u64);
        let q = rng.gen_range(1..=2);
        let t = rng.gen_range(1..=4);
        let batch = sample_batch(&ds, 2, q, t, 100, &mut rng).map_err(|e| e.to_string())?;
        let dims = ModelDims {
            input,
            hidden: rng.gen_range(2..=8),
            dim: rng.gen_range(1..=8),
            classes: 0,
        };
        let model = Model::init(dims, rng.gen(), &mut rng);
        let rms = rng.gen::<bool>();
        let opts = LossOptions {
            margin: 0.3,
            cross_norm: if rms { CrossNorm::Rms } else { CrossNorm::PerEntry },
            identity_loss: false,
        };
        let pass = forward_losses(&batch, &model, &opts).map_err(|e| e.to_string())?;
        let det = rows_of(pass.tape.value(pass.det_features));
        let seq = rows_of(pass.tape.value(pass.seq_features));
        let labels = batch.labels();

        close("tape cross", case, pass.losses.cross, cross_oracle(&seq, &det, t, rms))?;
        let m = modality_oracle(&seq, &det, &labels.sequence_labels(), labels.slots(), 0.3);
        close("tape modality", case, pass.losses.modality, m)?;

        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let pair_rows: Vec<Vec<f64>> = batch
            .pairs
            .iter()
            .map(|p| seq[p.seq].iter().chain(&det[p.det]).copied().collect())
            .collect();
        let x = tape.leaf(Tensor::from_rows(&pair_rows.iter().map(Vec::as_slice).collect::<Vec<_>>()));
        let logits = model.head_logits(&mut tape, &vars, x);
        let targets: Vec<usize> = batch.pairs.iter().map(|p| if p.is_match { MATCH } else { 1 - MATCH }).collect();
        let s = similarity_oracle(&rows_of(tape.value(logits)), &targets);
        close("tape similarity", case, pass.losses.similarity, s)?;
    }
    Ok(())
}

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_REL_TOL: f64 = 1e-4;
// gradients smaller than this are compared absolutely
const GRAD_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, Copy)]
pub struct GradientSummary {
    pub configs: usize,
    pub checked: usize,
    pub within: usize,
    pub nonzero: usize,
}

impl GradientSummary {
    pub fn fraction(&self) -> f64 {
        self.within as f64 / self.checked as f64
    }
}

fn total(batch: &SampledBatch, model: &Model, opts: &LossOptions) -> f64 {
    forward_losses(batch, model, opts).expect("forward").losses.total()
}

/// Tape gradients of the total loss against central differences over every
/// scalar parameter, for `configs` random configurations away from kinks.
pub fn gradient_check(configs: usize, seed: u64) -> GradientSummary {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = GradientSummary {
        configs: 0,
        checked: 0,
        within: 0,
        nonzero: 0,
    };
    let mut attempts = 0;
    while s.configs < configs {
        attempts += 1;
        assert!(attempts < 10 * configs + 100, "too many configurations sat on a kink");
        let input = rng.gen_range(2..=6);
        let ds = small_dataset(input, rng.gen());
        let t = rng.gen_range(1..=3);
        let batch = sample_batch(&ds, 2, rng.gen_range(1..=2), t, 100, &mut rng).expect("batch");
        let identity_loss = rng.gen::<bool>();
        let dims = ModelDims {
            input,
            hidden: rng.gen_range(2..=6),
            dim: rng.gen_range(2..=6),
            classes: if identity_loss { 3 } else { 0 },
        };
        let mut model = Model::init(dims, rng.gen(), &mut rng);
        let opts = LossOptions {
            margin: rng.gen_range(0.1..0.5),
            cross_norm: if rng.gen() { CrossNorm::Rms } else { CrossNorm::PerEntry },
            identity_loss,
        };
        let pass = forward_losses(&batch, &model, &opts).expect("forward");
        if pass.kink_margin() < 1e-3 {
            continue;
        }
        s.configs += 1;
        let grads = backward(&pass, &model, Objective::Full);
        for p in 0..model.params.len() {
            for k in 0..model.params[p].value.data.len() {
                let orig = model.params[p].value.data[k];
                model.params[p].value.data[k] = orig + FD_STEP;
                let up = total(&batch, &model, &opts);
                model.params[p].value.data[k] = orig - FD_STEP;
                let down = total(&batch, &model, &opts);
                model.params[p].value.data[k] = orig;
                let numeric = (up - down) / (2.0 * FD_STEP);
                let analytic = grads[p].data[k];
                let scale = analytic.abs().max(numeric.abs()).max(GRAD_FLOOR);
                s.checked += 1;
                s.nonzero += usize::from(scale > GRAD_FLOOR);
                s.within += usize::from((analytic - numeric).abs() / scale <= GRAD_REL_TOL);
            }
        }
    }
    s
}

fn one_step(objective: Objective, seed: u64) -> (Model, Model) {
    let ds = generate_dataset(&DatasetSpec { seed, ..DatasetSpec::default() }).expect("dataset");
    let cfg = TrainConfig { seed, ..TrainConfig::default() };
    let model = initial_model(&ds, &cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = sample_batch(&ds, cfg.p, cfg.q, cfg.t, cfg.max_history, &mut rng).expect("batch");
    let pass = forward_losses(&batch, &model, &cfg.loss_options()).expect("forward");
    let grads = backward(&pass, &model, objective);
    let mut stepped = model.clone();
    Adam::new(&model, 1e-3).update(&mut stepped, &grads);
    (model, stepped)
}

fn group_values(model: &Model, group: Group) -> Vec<f64> {
    model
        .params
        .iter()
        .filter(|p| p.group == group)
        .flat_map(|p| p.value.data.iter().copied())
        .collect()
}

/// One Adam step with the selective objective against one without the
/// cross loss: bitwise-equal sequence encoder, different detection encoder.
pub fn selective_step(seed: u64) -> Result<(), String> {
    let (init, selective) = one_step(Objective::Selective, seed);
    let (_, without) = one_step(Objective::WithoutCross, seed);
    let (_, full) = one_step(Objective::Full, seed);
    let seq_sel = group_values(&selective, Group::SequenceEncoder);
    if seq_sel == group_values(&init, Group::SequenceEncoder) {
        return Err("sequence encoder did not move".into());
    }
    if !seq_sel.iter().zip(group_values(&without, Group::SequenceEncoder)).all(|(a, b)| a.to_bits() == b.to_bits()) {
        return Err("sequence encoder differs from the step without the cross loss".into());
    }
    if seq_sel == group_values(&full, Group::SequenceEncoder) {
        return Err("cross loss has no effect on the sequence encoder even unmasked".into());
    }
    if group_values(&selective, Group::DetectionEncoder) == group_values(&without, Group::DetectionEncoder) {
        return Err("detection encoder ignored the cross loss".into());
    }
    if group_values(&selective, Group::DetectionEncoder) != group_values(&full, Group::DetectionEncoder) {
        return Err("detection encoder step differs from the full objective".into());
    }
    Ok(())
}
