use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use mutrack::associator::{AffinityMode, AssignMethod};
use mutrack::features::FeatureVector;
use mutrack::metrics::{evaluate, MetricsReport};
use mutrack::model::Model;
use mutrack::mot_io::{fmt_real, format_results, load_config, parse_detections, parse_seqinfo, read_embeddings, DetectionRecord};
use mutrack::synthetic::{generate_dataset, tracking_scenario, write_scenario, DatasetSpec, ScenarioSpec};
use mutrack::tracker::{self, run_sequence, RunOptions, RunOutput, SequenceInput, SotKind, TrackerConfig};
use mutrack::trainer::{self, train, FeatureSpace, TrainConfig};

use crate::staging::Staging;
use crate::Failure;

const LAYOUT: &str = "expected <seq>/seqinfo.ini and <seq>/det/det.txt, optionally <seq>/det/det.emb and <seq>/gt/gt.txt";

#[derive(Parser)]
#[command(name = "mutrack", version, about = "Online multi-object tracking with mutual detection/sequence representations")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Track MOTChallenge-layout sequences and evaluate them when gt is present.
    Track(TrackArgs),
    /// Train the detection and sequence encoders on a synthetic tracklet dataset.
    Train(TrainArgs),
    /// Evaluate a result file against ground truth.
    Eval(EvalArgs),
    /// Export learned (or raw) embeddings of a synthetic dataset as CSV.
    ExportEmbeddings(ExportArgs),
    /// Track the synthetic scenario for several sequence lengths T.
    Sweep(SweepArgs),
    /// Write a synthetic tracking scenario in MOTChallenge layout.
    Synth(SynthArgs),
}

#[derive(Args)]
struct Common {
    /// Output directory, created atomically.
    #[arg(long)]
    out: PathBuf,
    /// Replace an existing output directory.
    #[arg(long)]
    force: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum SotArg {
    Cv,
    Oracle,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum AssignArg {
    Greedy,
    Hungarian,
}

#[derive(Args)]
struct Association {
    /// STU1 checkpoint; without one, association uses raw embeddings.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Cosine similarity of learned features instead of the match head.
    #[arg(long)]
    cosine_fallback: bool,
    /// Average-pool sequences instead of temporal attention.
    #[arg(long)]
    no_attention: bool,
    /// Associate on the raw embeddings even when a checkpoint is given.
    #[arg(long)]
    no_sture: bool,
    #[arg(long, value_enum, default_value = "cv")]
    sot: SotArg,
    #[arg(long, value_enum, default_value = "greedy")]
    assign: AssignArg,
}

#[derive(Args)]
struct TrackArgs {
    /// Sequence directories.
    #[arg(required = true)]
    sequences: Vec<PathBuf>,
    /// Tracker configuration (key = value).
    #[arg(long)]
    config: Option<PathBuf>,
    /// EMB1 file for a single sequence; defaults to <seq>/det/det.emb.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Sequences processed in parallel.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[command(flatten)]
    assoc: Association,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct TrainArgs {
    /// Training configuration (key = value).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Synthetic dataset specification (key = value).
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    no_attention: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    results: PathBuf,
    /// Row label in the report; defaults to the result file stem.
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long, required_unless_present = "no_sture")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Frames pooled into each sequence row.
    #[arg(long, default_value_t = 8)]
    frames: usize,
    /// Export raw descriptors instead of learned features.
    #[arg(long)]
    no_sture: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SweepArgs {
    /// Sequence lengths to sweep.
    #[arg(long, value_delimiter = ',', default_value = "2,4,8,16")]
    values: Vec<usize>,
    /// Embedding noise of the scenario.
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    assoc: Association,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 3)]
    identities: usize,
    #[arg(long, default_value_t = 40)]
    frames: u32,
    /// Hidden frames per identity.
    #[arg(long, default_value_t = 5)]
    occlusion: u32,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[command(flatten)]
    common: Common,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    subcommand: &'a str,
    inputs: Vec<String>,
    config: Option<String>,
    seed: Option<u64>,
    out: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    flags: Vec<String>,
}

impl RunManifest<'_> {
    fn json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }
}

fn show(p: &Path) -> String {
    p.display().to_string()
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Track(a) => cmd_track(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::ExportEmbeddings(a) => cmd_export(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

fn load_model(path: &Path, no_attention: bool) -> Result<Model, Failure> {
    if !path.exists() {
        return Err(Failure::Usage(format!("checkpoint {} not found", path.display())));
    }
    let mut model = Model::load(path)?;
    if no_attention {
        model.attention = false;
    }
    Ok(model)
}

impl Association {
    fn model(&self) -> Result<Option<Model>, Failure> {
        if self.cosine_fallback && self.checkpoint.is_none() {
            return Err(Failure::Usage("--cosine-fallback needs --checkpoint".into()));
        }
        match &self.checkpoint {
            Some(p) if !self.no_sture => load_model(p, self.no_attention).map(Some),
            _ => Ok(None),
        }
    }

    fn options<'a>(&self, model: Option<&'a Model>) -> RunOptions<'a> {
        let affinity = match model {
            Some(m) if !self.cosine_fallback => AffinityMode::Head(m),
            model => AffinityMode::Cosine {
                model,
                attention: !self.no_attention,
            },
        };
        RunOptions {
            sot: match self.sot {
                SotArg::Cv => SotKind::ConstantVelocity,
                SotArg::Oracle => SotKind::Oracle,
            },
            affinity,
            assign: match self.assign {
                AssignArg::Greedy => AssignMethod::Greedy,
                AssignArg::Hungarian => AssignMethod::Hungarian,
            },
        }
    }

    fn flags(&self) -> Vec<String> {
        let mut f = Vec::new();
        if let Some(p) = &self.checkpoint {
            f.push(format!("checkpoint={}", show(p)));
        }
        for (on, name) in [(self.cosine_fallback, "cosine-fallback"), (self.no_attention, "no-attention"), (self.no_sture, "no-sture")] {
            if on {
                f.push(name.to_string());
            }
        }
        f.push(format!("sot={}", serde_json::to_value(self.sot).expect("enum").as_str().unwrap_or_default()));
        f.push(format!("assign={}", serde_json::to_value(self.assign).expect("enum").as_str().unwrap_or_default()));
        f
    }
}

fn tracker_config(path: Option<&Path>, frame_rate: f64, seed: Option<u64>) -> Result<TrackerConfig, Failure> {
    let mut cfg = match path {
        Some(p) => load_config(p, frame_rate)?,
        None => TrackerConfig::for_frame_rate(frame_rate),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

struct Job {
    name: String,
    input: SequenceInput,
    config: TrackerConfig,
}

fn load_sequence(dir: &Path, embeddings: Option<&Path>, config: Option<&Path>, seed: Option<u64>) -> Result<Job, Failure> {
    let seqinfo = dir.join("seqinfo.ini");
    let det = dir.join("det/det.txt");
    for p in [&seqinfo, &det] {
        if !p.is_file() {
            return Err(Failure::Usage(format!("missing {}; {LAYOUT}", p.display())));
        }
    }
    let info = parse_seqinfo(&seqinfo)?;
    let detections = parse_detections(&det)?;
    let emb_path = embeddings.map(Path::to_path_buf).unwrap_or_else(|| dir.join("det/det.emb"));
    let embeddings = if emb_path.is_file() {
        Some(read_embeddings(&emb_path)?)
    } else if embeddings.is_some() {
        return Err(Failure::Usage(format!("missing {}", emb_path.display())));
    } else {
        None
    };
    let gt_path = dir.join("gt/gt.txt");
    let gt = if gt_path.is_file() { Some(parse_detections(&gt_path)?) } else { None };
    let config = tracker_config(config, info.frame_rate, seed)?;
    Ok(Job {
        name: info.name.clone(),
        input: SequenceInput {
            info,
            detections,
            embeddings,
            gt,
        },
        config,
    })
}

fn run_jobs(jobs: &[Job], options: RunOptions<'_>, threads: usize) -> Vec<mutrack::Result<RunOutput>> {
    let threads = threads.clamp(1, jobs.len().max(1));
    if threads == 1 {
        return jobs.iter().map(|j| run_sequence(&j.input, &j.config, options)).collect();
    }
    let chunk = jobs.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = jobs
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|j| run_sequence(&j.input, &j.config, options)).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("tracking thread panicked")).collect()
    })
}

// All sequences as one: frames and ids shifted so nothing collides.
fn overall(runs: &[(&Job, &RunOutput)]) -> MetricsReport {
    let mut gt = Vec::new();
    let mut hyp = Vec::new();
    let mut frame_offset = 0u32;
    let mut frames = 0u32;
    let mut secs = 0.0;
    for (k, (job, out)) in runs.iter().enumerate() {
        let id_offset = (k as i64) << 32;
        let shift = |r: &DetectionRecord| DetectionRecord {
            frame: r.frame + frame_offset,
            track_id: r.track_id + id_offset,
            ..r.clone()
        };
        if let Some(g) = &job.input.gt {
            gt.extend(g.iter().filter(|r| r.confidence != 0.0).map(shift));
        }
        hyp.extend(out.records.iter().map(shift));
        frame_offset += job.input.info.seq_length;
        frames += job.input.info.seq_length;
        secs += out.elapsed.as_secs_f64();
    }
    let mut report = evaluate(&gt, &hyp);
    report.hz = Some(if secs > 0.0 { f64::from(frames) / secs } else { f64::INFINITY });
    report
}

fn cmd_track(a: TrackArgs) -> Result<(), Failure> {
    if a.embeddings.is_some() && a.sequences.len() > 1 {
        return Err(Failure::Usage("--embeddings applies to a single sequence; place det/det.emb in each sequence instead".into()));
    }
    let model = a.assoc.model()?;
    let jobs = a
        .sequences
        .iter()
        .map(|d| load_sequence(d, a.embeddings.as_deref(), a.config.as_deref(), a.common.seed))
        .collect::<Result<Vec<_>, _>>()?;
    let mut names: Vec<&str> = jobs.iter().map(|j| j.name.as_str()).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(Failure::Usage("two sequences share a name".into()));
    }

    let stage = Staging::new(&a.common.out, a.common.force)?;
    let outputs = run_jobs(&jobs, a.assoc.options(model.as_ref()), a.jobs)
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let mut rows = Vec::new();
    for (job, out) in jobs.iter().zip(&outputs) {
        stage.write(&format!("{}.txt", job.name), format_results(&out.records)?)?;
        stage.write(&format!("{}.telemetry.csv", job.name), tracker::telemetry_csv(&out.telemetry))?;
        if let Some(r) = &out.report {
            rows.push((job.name.clone(), r.clone()));
        }
    }
    if rows.len() > 1 {
        let evaluated: Vec<(&Job, &RunOutput)> = jobs.iter().zip(&outputs).filter(|(_, o)| o.report.is_some()).collect();
        rows.push(("OVERALL".into(), overall(&evaluated)));
    }
    if !rows.is_empty() {
        let view: Vec<(&str, &MetricsReport)> = rows.iter().map(|(n, r)| (n.as_str(), r)).collect();
        stage.write("report.csv", MetricsReport::to_csv(&view))?;
        stage.write("report.txt", MetricsReport::to_table(&view))?;
    }
    let manifest = RunManifest {
        subcommand: "track",
        inputs: a.sequences.iter().map(|p| show(p)).chain(a.embeddings.iter().map(|p| show(p))).collect(),
        config: a.config.as_deref().map(show),
        seed: a.common.seed,
        out: show(&a.common.out),
        flags: a.assoc.flags(),
    };
    stage.write("manifest.json", manifest.json())?;
    stage.commit()?;
    if let Some(last) = rows.last() {
        eprint!("{}", MetricsReport::to_table(&[(last.0.as_str(), &last.1)]));
    }
    Ok(())
}

fn dataset_spec(path: Option<&Path>, seed: Option<u64>) -> Result<DatasetSpec, Failure> {
    let mut spec = match path {
        Some(p) => DatasetSpec::load(p)?,
        None => DatasetSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    Ok(spec)
}

fn cmd_train(a: TrainArgs) -> Result<(), Failure> {
    let spec = dataset_spec(a.spec.as_deref(), a.common.seed)?;
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.common.seed {
        cfg.seed = s;
    }
    if a.no_attention {
        cfg.attention = false;
    }
    cfg.validate()?;
    let dataset = generate_dataset(&spec)?;
    let stage = Staging::new(&a.common.out, a.common.force)?;
    let outcome = train(&dataset, &cfg, |s| {
        eprintln!("epoch {:>3}  L_C {:.5}  L_M {:.5}  L_S {:.5}", s.epoch, s.losses.cross, s.losses.modality, s.losses.similarity);
    })?;
    stage.write("model.stu1", outcome.state.model.to_bytes())?;
    stage.write("telemetry.csv", trainer::telemetry_csv(&outcome.telemetry))?;
    let manifest = RunManifest {
        subcommand: "train",
        inputs: a.spec.iter().map(|p| show(p)).collect(),
        config: a.config.as_deref().map(show),
        seed: Some(cfg.seed),
        out: show(&a.common.out),
        flags: if a.no_attention { vec!["no-attention".into()] } else { vec![] },
    };
    stage.write("manifest.json", manifest.json())?;
    stage.commit()?;
    match outcome.diverged_at {
        Some(epoch) => Err(Failure::Runtime(format!(
            "training diverged at epoch {epoch}; kept the checkpoint from epoch {} in {}",
            epoch - 1,
            a.common.out.display()
        ))),
        None => Ok(()),
    }
}

fn cmd_eval(a: EvalArgs) -> Result<(), Failure> {
    for p in [&a.gt, &a.results] {
        if !p.is_file() {
            return Err(Failure::Usage(format!("missing {}", p.display())));
        }
    }
    let gt: Vec<DetectionRecord> = parse_detections(&a.gt)?.into_iter().filter(|r| r.confidence != 0.0).collect();
    let hyp = parse_detections(&a.results)?;
    let span = |rs: &[DetectionRecord]| (rs.iter().map(|r| r.frame).min(), rs.iter().map(|r| r.frame).max());
    let (g, h) = (span(&gt), span(&hyp));
    if let (Some(gmin), Some(gmax), Some(hmin), Some(hmax)) = (g.0, g.1, h.0, h.1) {
        if hmin < gmin || hmax > gmax {
            eprintln!("warning: result frames {hmin}..={hmax} extend beyond ground-truth frames {gmin}..={gmax}");
        }
    }
    let report = evaluate(&gt, &hyp);
    let name = a.name.clone().unwrap_or_else(|| {
        a.results.file_stem().map_or_else(|| "results".into(), |s| s.to_string_lossy().into_owned())
    });
    let stage = Staging::new(&a.out, a.force)?;
    let view = [(name.as_str(), &report)];
    stage.write("report.csv", MetricsReport::to_csv(&view))?;
    stage.write("report.txt", MetricsReport::to_table(&view))?;
    stage.commit()?;
    eprint!("{}", MetricsReport::to_table(&view));
    Ok(())
}

fn cmd_export(a: ExportArgs) -> Result<(), Failure> {
    let spec = dataset_spec(a.spec.as_deref(), a.common.seed)?;
    let dataset = generate_dataset(&spec)?;
    let model = match (&a.checkpoint, a.no_sture) {
        (Some(p), false) => Some(load_model(p, false)?),
        _ => None,
    };
    if let Some(m) = &model {
        if m.dims.input != dataset.input_dim {
            return Err(Failure::Runtime(format!(
                "checkpoint expects {}-dim inputs but the dataset has {}",
                m.dims.input, dataset.input_dim
            )));
        }
    }
    if a.frames == 0 {
        return Err(Failure::Usage("--frames must be positive".into()));
    }
    let space = model.as_ref().map_or(FeatureSpace::Raw, FeatureSpace::Learned);
    let mut csv = String::new();
    let mut header_dim = None;
    let mut push = |csv: &mut String, id: i64, split: &str, index: usize, f: &FeatureVector| {
        if header_dim.is_none() {
            let cols: Vec<String> = (0..f.dim()).map(|k| format!("e{k}")).collect();
            let _ = writeln!(csv, "id,split,index,{}", cols.join(","));
            header_dim = Some(f.dim());
        }
        let vals: Vec<String> = f.0.iter().map(|v| fmt_real(*v)).collect();
        let _ = writeln!(csv, "{id},{split},{index},{}", vals.join(","));
    };
    for (id, tracklets) in dataset.by_identity() {
        let mut index = 0;
        for &t in &tracklets {
            for frame in &dataset.tracklets[t].frames {
                push(&mut csv, id, "detection", index, &space.detection(frame)?);
                index += 1;
            }
        }
        for (k, &t) in tracklets.iter().enumerate() {
            let frames: Vec<&[f64]> = dataset.tracklets[t].frames.iter().take(a.frames).map(Vec::as_slice).collect();
            push(&mut csv, id, "sequence", k, &space.sequence(&frames)?);
        }
    }
    let stage = Staging::new(&a.common.out, a.common.force)?;
    stage.write("embeddings.csv", csv)?;
    let manifest = RunManifest {
        subcommand: "export-embeddings",
        inputs: a.checkpoint.iter().chain(a.spec.iter()).map(|p| show(p)).collect(),
        config: None,
        seed: Some(spec.seed),
        out: show(&a.common.out),
        flags: if a.no_sture { vec!["no-sture".into()] } else { vec![] },
    };
    stage.write("manifest.json", manifest.json())?;
    stage.commit()
}

fn cmd_sweep(a: SweepArgs) -> Result<(), Failure> {
    if a.values.is_empty() || a.values.contains(&0) {
        return Err(Failure::Usage("--values needs positive sequence lengths".into()));
    }
    let model = a.assoc.model()?;
    let scenario = tracking_scenario(&ScenarioSpec {
        noise: a.noise,
        seed: a.common.seed.unwrap_or(1),
        ..ScenarioSpec::default()
    })?;
    let input = SequenceInput {
        info: scenario.info.clone(),
        detections: scenario.detections.clone(),
        embeddings: Some(mutrack::mot_io::decode_embeddings(&mutrack::mot_io::encode_embeddings(&scenario.embeddings)?)?),
        gt: Some(scenario.gt.clone()),
    };
    let base = tracker_config(a.config.as_deref(), scenario.info.frame_rate, a.common.seed)?;
    let mut csv = format!("T,{}\n", mutrack::metrics::REPORT_COLUMNS.join(","));
    for &t in &a.values {
        let cfg = TrackerConfig { seq_len: t, ..base.clone() };
        let out = run_sequence(&input, &cfg, a.assoc.options(model.as_ref()))?;
        let report = out.report.expect("scenario has gt");
        let _ = writeln!(csv, "{t},{}", report.cells().join(","));
    }
    let stage = Staging::new(&a.common.out, a.common.force)?;
    stage.write("sweep.csv", &csv)?;
    let manifest = RunManifest {
        subcommand: "sweep",
        inputs: vec![],
        config: a.config.as_deref().map(show),
        seed: a.common.seed,
        out: show(&a.common.out),
        flags: a.assoc.flags(),
    };
    stage.write("manifest.json", manifest.json())?;
    stage.commit()?;
    eprint!("{csv}");
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<(), Failure> {
    let spec = ScenarioSpec {
        identities: a.identities,
        frames: a.frames,
        occlusion: a.occlusion,
        noise: a.noise,
        dim: a.dim,
        seed: a.common.seed.unwrap_or(1),
        ..ScenarioSpec::default()
    };
    let scenario = tracking_scenario(&spec)?;
    let stage = Staging::new(&a.common.out, a.common.force)?;
    write_scenario(&scenario, &stage.path(""))?;
    stage.commit()
}
