//! The online loop: single-object tracking, tracked/drifting status,
//! drifting recovery through the associator, births and retirement.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use crate::associator::{assign, gate_candidates, score_affinity, AffinityMode, AffinityTable, AssignMethod};
use crate::error::{Error, Result};
use crate::geometry::{iou, max_iou, mean_overlap, overlap_indicator, BoundingBox, MotionState, Point};
use crate::metrics::{evaluate, MetricsReport};
use crate::mot_io::{DetectionRecord, EmbeddingMatrix, SequenceInfo};

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerConfig {
    /// Frames a potential object must persist before it becomes a track.
    pub tau_i: usize,
    /// Drifting frames tolerated before termination.
    pub tau_t: usize,
    /// `L`: velocity window.
    pub window: usize,
    /// `I`: overlap-indicator history length.
    pub overlap_window: usize,
    pub tau_a: f64,
    pub tau_s: f64,
    pub tau_o: f64,
    pub tau_d: f64,
    /// `T`: history entries pooled for association.
    pub seq_len: usize,
    /// `M`: stored descriptors per track.
    pub max_history: usize,
    /// `D`: embedding width of generated descriptors.
    pub dim: usize,
    pub seed: u64,
}

const CONFIG_KEYS: &[&str] = &["tau_i", "tau_t", "tau_a", "tau_s", "tau_o", "tau_d", "L", "I", "T", "M", "D", "seed"];

impl TrackerConfig {
    /// Defaults relative to the sequence frame rate `f`.
    pub fn for_frame_rate(f: f64) -> Self {
        let frames = |k: f64| ((k * f).round() as usize).max(1);
        let window = frames(0.3);
        Self {
            tau_i: frames(0.2),
            tau_t: frames(2.0),
            window,
            overlap_window: window,
            tau_a: 0.8,
            tau_s: 0.2,
            tau_o: 0.5,
            tau_d: 2.0,
            seq_len: 8,
            max_history: 100,
            dim: 32,
            seed: 0,
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let int = || {
            value.parse::<usize>().map_err(|_| Error::BadValue {
                key: key.to_string(),
                message: format!("expected a non-negative integer, got `{value}`"),
            })
        };
        let real = || {
            value.parse::<f64>().map_err(|_| Error::BadValue {
                key: key.to_string(),
                message: format!("expected a number, got `{value}`"),
            })
        };
        match key {
            "tau_i" => self.tau_i = int()?,
            "tau_t" => self.tau_t = int()?,
            "L" => self.window = int()?,
            "I" => self.overlap_window = int()?,
            "T" => self.seq_len = int()?,
            "M" => self.max_history = int()?,
            "D" => self.dim = int()?,
            "tau_a" => self.tau_a = real()?,
            "tau_s" => self.tau_s = real()?,
            "tau_o" => self.tau_o = real()?,
            "tau_d" => self.tau_d = real()?,
            "seed" => self.seed = int()? as u64,
            _ => {
                return Err(Error::UnknownKey {
                    key: key.to_string(),
                    valid: CONFIG_KEYS.join(", "),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let ints = [
            ("tau_i", self.tau_i),
            ("tau_t", self.tau_t),
            ("L", self.window),
            ("I", self.overlap_window),
            ("T", self.seq_len),
            ("M", self.max_history),
            ("D", self.dim),
        ];
        for (key, v) in ints {
            if v == 0 {
                return Err(Error::BadValue {
                    key: key.into(),
                    message: "must be positive".into(),
                });
            }
        }
        for (key, v) in [("tau_a", self.tau_a), ("tau_s", self.tau_s), ("tau_o", self.tau_o)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::BadValue {
                    key: key.into(),
                    message: format!("must lie in (0, 1), got {v}"),
                });
            }
        }
        if !(self.tau_d > 0.0 && self.tau_d.is_finite()) {
            return Err(Error::BadValue {
                key: "tau_d".into(),
                message: "must be positive".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrackState {
    Tracked,
    Drifting,
    Terminated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub id: u64,
    pub state: TrackState,
    /// Last box confirmed by the SOT or by association.
    pub bbox: BoundingBox,
    pub score: f64,
    pub motion: MotionState,
    pub drift_age: usize,
    descriptors: VecDeque<Vec<f64>>,
    overlaps: VecDeque<u8>,
}

impl Track {
    pub fn descriptors(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.descriptors.iter()
    }

    pub fn overlaps(&self) -> impl Iterator<Item = &u8> {
        self.overlaps.iter()
    }

    /// Extrapolated box for the current frame while drifting.
    pub fn predicted_box(&self) -> BoundingBox {
        let v = self.motion.velocity();
        let steps = (self.drift_age + 1) as f64;
        let last = self.motion.last().unwrap_or_else(|| self.bbox.center());
        self.bbox.recentered(Point::new(last.x + v.x * steps, last.y + v.y * steps))
    }

    fn push_descriptor(&mut self, d: Option<&Vec<f64>>, cap: usize) {
        if let Some(d) = d {
            if self.descriptors.len() == cap {
                self.descriptors.pop_front();
            }
            self.descriptors.push_back(d.clone());
        }
    }

    fn push_overlap(&mut self, o: u8, cap: usize) -> f64 {
        if self.overlaps.len() == cap {
            self.overlaps.pop_front();
        }
        self.overlaps.push_back(o);
        let v: Vec<u8> = self.overlaps.iter().copied().collect();
        mean_overlap(&v).expect("just pushed")
    }
}

/// What a single-object tracker sees for one frame.
#[derive(Debug, Clone, Copy)]
pub struct FrameContext<'a> {
    pub frame: u32,
    pub detections: &'a [BoundingBox],
    /// Ground-truth boxes, for the oracle tracker only.
    pub gt: &'a [BoundingBox],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SotOutput {
    pub bbox: BoundingBox,
    pub score: f64,
}

pub trait SingleObjectTracker {
    fn step(&self, previous: &BoundingBox, velocity: Point, ctx: &FrameContext<'_>) -> SotOutput;
}

fn snap(previous: &BoundingBox, velocity: Point, boxes: &[BoundingBox]) -> SotOutput {
    let predicted = previous.recentered(previous.center() + velocity);
    let best = boxes
        .iter()
        .map(|b| (iou(&predicted, b), b))
        .fold(None::<(f64, &BoundingBox)>, |acc, (o, b)| match acc {
            Some((best, _)) if best >= o => acc,
            _ => Some((o, b)),
        });
    match best {
        Some((o, b)) if o > 0.0 => SotOutput { bbox: *b, score: o },
        _ => SotOutput {
            bbox: predicted,
            score: 0.0,
        },
    }
}

/// Moves the box by the track velocity and snaps it to the best-overlapping
/// detection; the score is that overlap.
#[derive(Debug, Clone, Copy, Default)]
pub struct ConstantVelocitySot;

impl SingleObjectTracker for ConstantVelocitySot {
    fn step(&self, previous: &BoundingBox, velocity: Point, ctx: &FrameContext<'_>) -> SotOutput {
        snap(previous, velocity, ctx.detections)
    }
}

/// Reads the ground truth: snaps to the best-overlapping gt box with score 1.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleSot;

impl SingleObjectTracker for OracleSot {
    fn step(&self, previous: &BoundingBox, velocity: Point, ctx: &FrameContext<'_>) -> SotOutput {
        let out = snap(previous, velocity, ctx.gt);
        SotOutput {
            score: if out.score > 0.0 { 1.0 } else { 0.0 },
            ..out
        }
    }
}

/// One frame of tracker input. `descriptors`, when present, is aligned
/// with `detections`.
#[derive(Debug, Clone, Copy)]
pub struct FrameInput<'a> {
    pub frame: u32,
    pub detections: &'a [BoundingBox],
    pub confidences: &'a [f64],
    pub descriptors: Option<&'a [Vec<f64>]>,
    pub gt: &'a [BoundingBox],
}

/// A state change; `from == None` is a birth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transition {
    pub track: u64,
    pub from: Option<TrackState>,
    pub to: TrackState,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameOutput {
    /// Records for this frame plus records backfilled for newly confirmed tracks.
    pub records: Vec<DetectionRecord>,
    pub transitions: Vec<Transition>,
    pub telemetry: FrameTelemetry,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FrameTelemetry {
    pub frame: u32,
    pub tracked: usize,
    pub drifting: usize,
    pub pending: usize,
    pub births: usize,
    pub recoveries: usize,
    pub terminations: usize,
}

#[derive(Debug, Clone)]
struct PendingLink {
    frame: u32,
    bbox: BoundingBox,
    confidence: f64,
    descriptor: Option<Vec<f64>>,
}

#[derive(Clone, Copy)]
pub struct TrackerOptions<'a> {
    pub sot: &'a dyn SingleObjectTracker,
    pub affinity: AffinityMode<'a>,
    pub assign: AssignMethod,
}

pub struct Tracker<'a> {
    config: TrackerConfig,
    options: TrackerOptions<'a>,
    img_width: f64,
    img_height: f64,
    tracks: Vec<Track>,
    pending: Vec<Vec<PendingLink>>,
    next_id: u64,
}

impl<'a> Tracker<'a> {
    pub fn new(config: TrackerConfig, options: TrackerOptions<'a>, img_width: f64, img_height: f64) -> Self {
        Self {
            config,
            options,
            img_width,
            img_height,
            tracks: Vec::new(),
            pending: Vec::new(),
            next_id: 1,
        }
    }

    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.config
    }

    pub fn step_frame(&mut self, input: &FrameInput<'_>) -> Result<FrameOutput> {
        let dets = input.detections;
        if let Some(d) = input.descriptors {
            if d.len() != dets.len() {
                return Err(Error::Embedding(format!(
                    "frame {}: {} descriptors for {} detections",
                    input.frame,
                    d.len(),
                    dets.len()
                )));
            }
        }
        let cfg = self.config.clone();
        let ctx = FrameContext {
            frame: input.frame,
            detections: dets,
            gt: input.gt,
        };
        let descriptor = |i: usize| input.descriptors.map(|d| &d[i]);
        let mut out = FrameOutput::default();
        let mut claimed = vec![false; dets.len()];

        // single-object tracking and status
        for track in self.tracks.iter_mut().filter(|t| t.state == TrackState::Tracked) {
            let sot = self.options.sot.step(&track.bbox, track.motion.velocity(), &ctx);
            let o_a = track.push_overlap(overlap_indicator(&sot.bbox, dets, cfg.tau_o), cfg.overlap_window);
            if sot.score > cfg.tau_s && o_a > cfg.tau_o {
                track.bbox = sot.bbox;
                track.score = sot.score;
                track.motion.push(sot.bbox.center());
                let best = (0..dets.len())
                    .filter(|&i| !claimed[i])
                    .map(|i| (iou(&sot.bbox, &dets[i]), i))
                    .filter(|(o, _)| *o >= cfg.tau_o)
                    .fold(None::<(f64, usize)>, |acc, c| match acc {
                        Some(a) if a.0 >= c.0 => Some(a),
                        _ => Some(c),
                    });
                if let Some((_, i)) = best {
                    claimed[i] = true;
                    track.push_descriptor(descriptor(i), cfg.max_history);
                }
            } else {
                track.state = TrackState::Drifting;
                track.drift_age = 0;
                out.transitions.push(Transition {
                    track: track.id,
                    from: Some(TrackState::Tracked),
                    to: TrackState::Drifting,
                });
            }
        }

        // drifting recovery
        let tracked_boxes: Vec<BoundingBox> =
            self.tracks.iter().filter(|t| t.state == TrackState::Tracked).map(|t| t.bbox).collect();
        let drifting: Vec<usize> = (0..self.tracks.len())
            .filter(|&k| self.tracks[k].state == TrackState::Drifting)
            .collect();
        let mut gated: Vec<(usize, Vec<(usize, f64)>)> = Vec::new();
        for &k in &drifting {
            let track = &self.tracks[k];
            if track.descriptors.is_empty() || input.descriptors.is_none() {
                continue;
            }
            let history: Vec<&[f64]> = track.descriptors.iter().map(Vec::as_slice).collect();
            let mut scored = Vec::new();
            for c in gate_candidates(&track.predicted_box(), dets, &tracked_boxes, cfg.tau_d, cfg.tau_o) {
                if claimed[c.detection] {
                    continue;
                }
                let d = descriptor(c.detection).expect("descriptors present");
                scored.push((c.detection, score_affinity(&history, d, self.options.affinity, cfg.seq_len)?));
            }
            gated.push((k, scored));
        }
        let mut columns: Vec<usize> = gated.iter().flat_map(|(_, s)| s.iter().map(|(d, _)| *d)).collect();
        columns.sort_unstable();
        columns.dedup();
        let mut table = AffinityTable::new(gated.iter().map(|(k, _)| self.tracks[*k].id).collect(), columns.clone());
        for (row, (_, scored)) in gated.iter().enumerate() {
            for &(d, a) in scored {
                table.set(row, columns.binary_search(&d).expect("column present"), a);
            }
        }
        let matches = assign(&table, cfg.tau_a, self.options.assign);
        for &k in &drifting {
            let track = &mut self.tracks[k];
            if let Some(&(_, d)) = matches.iter().find(|(id, _)| *id == track.id) {
                claimed[d] = true;
                // fill the gap so the velocity window stays per-frame
                if let Some(last) = track.motion.last() {
                    let target = dets[d].center();
                    let gap = track.drift_age + 1;
                    for s in 1..gap {
                        let f = s as f64 / gap as f64;
                        track.motion.push(Point::new(last.x + (target.x - last.x) * f, last.y + (target.y - last.y) * f));
                    }
                }
                track.motion.push(dets[d].center());
                track.bbox = dets[d];
                track.score = input.confidences.get(d).copied().unwrap_or(1.0);
                track.state = TrackState::Tracked;
                track.drift_age = 0;
                track.push_descriptor(descriptor(d), cfg.max_history);
                track.push_overlap(1, cfg.overlap_window);
                out.telemetry.recoveries += 1;
                out.transitions.push(Transition {
                    track: track.id,
                    from: Some(TrackState::Drifting),
                    to: TrackState::Tracked,
                });
            } else {
                track.drift_age += 1;
            }
        }

        // retirement
        for track in self.tracks.iter_mut().filter(|t| t.state == TrackState::Drifting) {
            if retire(track, &cfg, self.img_width, self.img_height) {
                track.state = TrackState::Terminated;
                out.telemetry.terminations += 1;
                out.transitions.push(Transition {
                    track: track.id,
                    from: Some(TrackState::Drifting),
                    to: TrackState::Terminated,
                });
            }
        }

        // births
        let tracked_boxes: Vec<BoundingBox> =
            self.tracks.iter().filter(|t| t.state == TrackState::Tracked).map(|t| t.bbox).collect();
        let potential: Vec<usize> = (0..dets.len())
            .filter(|&i| !claimed[i] && max_iou(&dets[i], &tracked_boxes) < cfg.tau_o)
            .collect();
        let links = link_pending(&self.pending, &potential, dets, cfg.tau_o);
        let mut next_pending = Vec::new();
        let mut linked = vec![false; dets.len()];
        for (chain, det) in std::mem::take(&mut self.pending).into_iter().zip(links) {
            let Some(i) = det else { continue };
            let mut chain = chain;
            linked[i] = true;
            chain.push(PendingLink {
                frame: input.frame,
                bbox: dets[i],
                confidence: input.confidences.get(i).copied().unwrap_or(1.0),
                descriptor: descriptor(i).cloned(),
            });
            next_pending.push(chain);
        }
        for &i in potential.iter().filter(|&&i| !linked[i]) {
            next_pending.push(vec![PendingLink {
                frame: input.frame,
                bbox: dets[i],
                confidence: input.confidences.get(i).copied().unwrap_or(1.0),
                descriptor: descriptor(i).cloned(),
            }]);
        }
        for chain in next_pending {
            if chain.len() < cfg.tau_i {
                self.pending.push(chain);
                continue;
            }
            let id = self.next_id;
            self.next_id += 1;
            let mut track = Track {
                id,
                state: TrackState::Tracked,
                bbox: chain.last().expect("non-empty chain").bbox,
                score: chain.last().expect("non-empty chain").confidence,
                motion: MotionState::new(cfg.window),
                drift_age: 0,
                descriptors: VecDeque::new(),
                overlaps: VecDeque::new(),
            };
            for link in &chain {
                track.motion.push(link.bbox.center());
                track.push_descriptor(link.descriptor.as_ref(), cfg.max_history);
                track.push_overlap(1, cfg.overlap_window);
            }
            for link in &chain[..chain.len() - 1] {
                if let Some(b) = link.bbox.clamp_to_image(self.img_width, self.img_height) {
                    out.records.push(DetectionRecord::new(link.frame, id as i64, b, link.confidence));
                }
            }
            out.telemetry.births += 1;
            out.transitions.push(Transition {
                track: id,
                from: None,
                to: TrackState::Tracked,
            });
            self.tracks.push(track);
        }

        for track in self.tracks.iter().filter(|t| t.state == TrackState::Tracked) {
            if let Some(b) = track.bbox.clamp_to_image(self.img_width, self.img_height) {
                out.records.push(DetectionRecord::new(input.frame, track.id as i64, b, track.score));
            }
        }

        out.telemetry.frame = input.frame;
        out.telemetry.tracked = self.tracks.iter().filter(|t| t.state == TrackState::Tracked).count();
        out.telemetry.drifting = self.tracks.iter().filter(|t| t.state == TrackState::Drifting).count();
        out.telemetry.pending = self.pending.len();
        Ok(out)
    }
}

/// Termination rule for a drifting track.
pub fn retire(track: &Track, config: &TrackerConfig, img_width: f64, img_height: f64) -> bool {
    track.state == TrackState::Drifting
        && (track.drift_age > config.tau_t || track.predicted_box().outside_image(img_width, img_height))
}

/// Extends each pending chain with at most one potential detection
/// (IoU >= `tau_o` with the chain's last box), best overlaps first.
fn link_pending(pending: &[Vec<PendingLink>], potential: &[usize], dets: &[BoundingBox], tau_o: f64) -> Vec<Option<usize>> {
    let mut pairs = Vec::new();
    for (c, chain) in pending.iter().enumerate() {
        let last = &chain.last().expect("non-empty chain").bbox;
        for &i in potential {
            let o = iou(last, &dets[i]);
            if o >= tau_o {
                pairs.push((o, c, i));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut out = vec![None; pending.len()];
    let mut used = vec![false; dets.len()];
    for (_, c, i) in pairs {
        if out[c].is_none() && !used[i] {
            out[c] = Some(i);
            used[i] = true;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SotKind {
    #[default]
    ConstantVelocity,
    Oracle,
}

#[derive(Debug, Clone)]
pub struct SequenceInput {
    pub info: SequenceInfo,
    pub detections: Vec<DetectionRecord>,
    /// Row `i` belongs to `detections[i]` (frame-sorted file order).
    pub embeddings: Option<EmbeddingMatrix>,
    pub gt: Option<Vec<DetectionRecord>>,
}

#[derive(Debug, Clone, Copy)]
pub struct RunOptions<'a> {
    pub sot: SotKind,
    pub affinity: AffinityMode<'a>,
    pub assign: AssignMethod,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<DetectionRecord>,
    pub report: Option<MetricsReport>,
    pub telemetry: Vec<FrameTelemetry>,
    pub transitions: Vec<(u32, Transition)>,
    pub elapsed: Duration,
}

impl RunOutput {
    pub fn hz(&self, frames: u32) -> f64 {
        let s = self.elapsed.as_secs_f64();
        if s > 0.0 {
            f64::from(frames) / s
        } else {
            f64::INFINITY
        }
    }
}

pub fn telemetry_csv(rows: &[FrameTelemetry]) -> String {
    let mut out = String::from("frame,tracked,drifting,pending,births,recoveries,terminations\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.frame, r.tracked, r.drifting, r.pending, r.births, r.recoveries, r.terminations
        );
    }
    out
}

/// Tracks a whole sequence and evaluates against gt when one is given.
pub fn run_sequence(input: &SequenceInput, config: &TrackerConfig, options: RunOptions<'_>) -> Result<RunOutput> {
    drive(input, config, options, true)
}

/// [`run_sequence`] without reading the clock: `elapsed` is zero and the
/// report has no Hz. For targets without a monotonic clock (wasm).
pub fn run_sequence_untimed(input: &SequenceInput, config: &TrackerConfig, options: RunOptions<'_>) -> Result<RunOutput> {
    drive(input, config, options, false)
}

fn drive(input: &SequenceInput, config: &TrackerConfig, options: RunOptions<'_>, timed: bool) -> Result<RunOutput> {
    config.validate()?;
    if let Some(e) = &input.embeddings {
        if e.rows != input.detections.len() {
            return Err(Error::Embedding(format!(
                "embedding file has {} rows for {} detections",
                e.rows,
                input.detections.len()
            )));
        }
    }
    let gt_live: Vec<DetectionRecord> = input
        .gt
        .iter()
        .flatten()
        .filter(|r| r.confidence != 0.0)
        .cloned()
        .collect();
    if options.sot == SotKind::Oracle && input.gt.is_none() {
        return Err(Error::Contract("the oracle SOT needs ground truth".into()));
    }
    let sot: &dyn SingleObjectTracker = match options.sot {
        SotKind::ConstantVelocity => &ConstantVelocitySot,
        SotKind::Oracle => &OracleSot,
    };
    let mut tracker = Tracker::new(
        config.clone(),
        TrackerOptions {
            sot,
            affinity: options.affinity,
            assign: options.assign,
        },
        f64::from(input.info.img_width),
        f64::from(input.info.img_height),
    );

    let started = timed.then(Instant::now);
    let mut records = Vec::new();
    let mut telemetry = Vec::new();
    let mut transitions = Vec::new();
    let mut cursor = 0;
    let mut gt_cursor = 0;
    let mut gt_sorted = gt_live.clone();
    gt_sorted.sort_by_key(|r| r.frame);
    for frame in 1..=input.info.seq_length {
        let start = cursor;
        while cursor < input.detections.len() && input.detections[cursor].frame <= frame {
            cursor += 1;
        }
        let slice = &input.detections[start..cursor];
        let rows: Vec<usize> = (start..cursor).filter(|&i| input.detections[i].frame == frame).collect();
        let boxes: Vec<BoundingBox> = rows.iter().map(|&i| input.detections[i].bbox()).collect();
        let conf: Vec<f64> = rows.iter().map(|&i| input.detections[i].confidence).collect();
        debug_assert!(slice.iter().all(|r| r.frame <= frame));
        let descriptors: Option<Vec<Vec<f64>>> =
            input.embeddings.as_ref().map(|e| rows.iter().map(|&i| e.row(i).to_vec()).collect());

        let gt_start = gt_cursor;
        while gt_cursor < gt_sorted.len() && gt_sorted[gt_cursor].frame <= frame {
            gt_cursor += 1;
        }
        let gt_boxes: Vec<BoundingBox> = gt_sorted[gt_start..gt_cursor]
            .iter()
            .filter(|r| r.frame == frame)
            .map(DetectionRecord::bbox)
            .collect();

        let out = tracker.step_frame(&FrameInput {
            frame,
            detections: &boxes,
            confidences: &conf,
            descriptors: descriptors.as_deref(),
            gt: &gt_boxes,
        })?;
        records.extend(out.records);
        telemetry.push(out.telemetry);
        transitions.extend(out.transitions.into_iter().map(|t| (frame, t)));
    }
    let elapsed = started.map_or(Duration::ZERO, |t| t.elapsed());
    records.sort_by_key(|r| (r.frame, r.track_id));
    let mut output = RunOutput {
        records,
        report: None,
        telemetry,
        transitions,
        elapsed,
    };
    if input.gt.is_some() {
        let mut report = evaluate(&gt_live, &output.records);
        report.hz = timed.then(|| output.hz(input.info.seq_length));
        output.report = Some(report);
    }
    Ok(output)
}
