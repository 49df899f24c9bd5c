//! Browser bindings: synthetic tracking, a training run and metric evaluation,
//! each returning JSON for `www/index.html`.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use mutrack::associator::{AffinityMode, AssignMethod};
use mutrack::metrics::{evaluate, MetricsReport, REPORT_COLUMNS};
use mutrack::mot_io::{parse_detections_str, DetectionRecord, EmbeddingMatrix};
use mutrack::synthetic::{generate_dataset, tracking_scenario, DatasetSpec, ScenarioSpec};
use mutrack::tracker::{run_sequence_untimed, RunOptions, SequenceInput, SotKind, TrackerConfig};
use mutrack::trainer::{retrieval_accuracy, train, FeatureSpace, TrainConfig};

#[derive(Serialize)]
struct Box2 {
    id: i64,
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

impl From<&DetectionRecord> for Box2 {
    fn from(r: &DetectionRecord) -> Self {
        Self {
            id: r.track_id,
            x: r.bb_left,
            y: r.bb_top,
            w: r.bb_width,
            h: r.bb_height,
        }
    }
}

#[derive(Serialize)]
struct Report {
    columns: Vec<&'static str>,
    cells: Vec<String>,
}

impl From<&MetricsReport> for Report {
    fn from(r: &MetricsReport) -> Self {
        Self {
            columns: REPORT_COLUMNS.to_vec(),
            cells: r.cells(),
        }
    }
}

#[derive(Serialize)]
struct Simulation {
    width: u32,
    height: u32,
    frames: Vec<Vec<Box2>>,
    gt: Vec<Vec<Box2>>,
    hidden: Vec<(i64, u32, u32)>,
    report: Option<Report>,
}

fn per_frame(records: &[DetectionRecord], frames: u32) -> Vec<Vec<Box2>> {
    let mut out: Vec<Vec<Box2>> = (0..frames).map(|_| Vec::new()).collect();
    for r in records {
        out[(r.frame - 1) as usize].push(r.into());
    }
    out
}

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// Tracks the synthetic crossing scenario and returns boxes per frame plus
/// the metrics report.
#[wasm_bindgen]
pub fn simulate_tracking(identities: usize, occlusion: u32, noise: f64, oracle_sot: bool, attention: bool) -> Result<String, JsError> {
    let sc = tracking_scenario(&ScenarioSpec {
        identities,
        occlusion,
        noise,
        ..ScenarioSpec::default()
    })
    .map_err(js_err)?;
    let input = SequenceInput {
        info: sc.info.clone(),
        detections: sc.detections.clone(),
        embeddings: Some(EmbeddingMatrix {
            rows: sc.embeddings.len(),
            dim: sc.embeddings.first().map_or(0, Vec::len),
            data: sc.embeddings.iter().flatten().copied().collect(),
        }),
        gt: Some(sc.gt.clone()),
    };
    let options = RunOptions {
        sot: if oracle_sot { SotKind::Oracle } else { SotKind::ConstantVelocity },
        affinity: AffinityMode::Cosine { model: None, attention },
        assign: AssignMethod::Greedy,
    };
    let out = run_sequence_untimed(&input, &TrackerConfig::for_frame_rate(sc.info.frame_rate), options).map_err(js_err)?;
    let sim = Simulation {
        width: sc.info.img_width,
        height: sc.info.img_height,
        frames: per_frame(&out.records, sc.info.seq_length),
        gt: per_frame(&sc.gt, sc.info.seq_length),
        hidden: sc.occlusions.clone(),
        report: out.report.as_ref().map(Report::from),
    };
    serde_json::to_string(&sim).map_err(js_err)
}

#[derive(Serialize)]
struct Epoch {
    cross: f64,
    modality: f64,
    similarity: f64,
}

#[derive(Serialize)]
struct Curve {
    epochs: Vec<Epoch>,
    learned: f64,
    raw: f64,
}

/// Trains on the default synthetic tracklet dataset and returns per-epoch
/// losses and retrieval accuracy of learned vs raw features.
#[wasm_bindgen]
pub fn train_curve(epochs: usize, lr: f64, attention: bool, seed: u64) -> Result<String, JsError> {
    let dataset = generate_dataset(&DatasetSpec { seed, ..DatasetSpec::default() }).map_err(js_err)?;
    let cfg = TrainConfig {
        epochs,
        lr,
        attention,
        seed,
        ..TrainConfig::default()
    };
    let outcome = train(&dataset, &cfg, |_| {}).map_err(js_err)?;
    let curve = Curve {
        epochs: outcome
            .telemetry
            .iter()
            .map(|s| Epoch {
                cross: s.losses.cross,
                modality: s.losses.modality,
                similarity: s.losses.similarity,
            })
            .collect(),
        learned: retrieval_accuracy(FeatureSpace::Learned(&outcome.state.model), &dataset, cfg.t).map_err(js_err)?,
        raw: retrieval_accuracy(FeatureSpace::Raw, &dataset, cfg.t).map_err(js_err)?,
    };
    serde_json::to_string(&curve).map_err(js_err)
}

/// Evaluates pasted MOTChallenge text (ground truth and results).
#[wasm_bindgen]
pub fn evaluate_text(gt: &str, results: &str) -> Result<String, JsError> {
    let path = std::path::Path::new("input");
    let gt: Vec<DetectionRecord> = parse_detections_str(gt, path)
        .map_err(js_err)?
        .into_iter()
        .filter(|r| r.confidence != 0.0)
        .collect();
    let hyp = parse_detections_str(results, path).map_err(js_err)?;
    serde_json::to_string(&Report::from(&evaluate(&gt, &hyp))).map_err(js_err)
}
