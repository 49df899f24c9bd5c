//! Synthetic tracklet datasets and tracking scenarios.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::features::{DetectionInput, Embedder, OracleEmbedder};
use crate::geometry::{BoundingBox, Point};
use crate::mot_io::{encode_embeddings, format_detections, format_seqinfo, parse_ini, DetectionRecord, SequenceInfo};
use crate::trainer::{Tracklet, TrackletDataset};

/// Tracklet descriptors: an identity prototype in the first `signal_dim`
/// coordinates, a per-tracklet nuisance offset (lighting, camera, pose) in
/// the remaining ones and i.i.d. frame noise everywhere. With probability
/// `occlusion` a frame is partly hidden and keeps only `visibility` (drawn
/// uniformly from `[0, max_visibility)`) of its identity signal.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub identities: usize,
    pub sequences: usize,
    pub frames: usize,
    pub input_dim: usize,
    pub signal_dim: usize,
    pub noise: f64,
    pub nuisance: f64,
    pub occlusion: f64,
    pub max_visibility: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            identities: 10,
            sequences: 4,
            frames: 16,
            input_dim: 32,
            signal_dim: 8,
            noise: 0.3,
            nuisance: 1.5,
            occlusion: 0.0,
            max_visibility: 0.3,
            seed: 1,
        }
    }
}

const SPEC_KEYS: &[&str] = &["identities", "sequences", "frames", "input_dim", "signal_dim", "noise", "nuisance", "occlusion", "max_visibility", "seed"];

impl DatasetSpec {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::BadValue {
            key: key.to_string(),
            message: format!("cannot parse `{value}`"),
        };
        match key {
            "identities" => self.identities = value.parse().map_err(|_| bad())?,
            "sequences" => self.sequences = value.parse().map_err(|_| bad())?,
            "frames" => self.frames = value.parse().map_err(|_| bad())?,
            "input_dim" => self.input_dim = value.parse().map_err(|_| bad())?,
            "signal_dim" => self.signal_dim = value.parse().map_err(|_| bad())?,
            "noise" => self.noise = value.parse().map_err(|_| bad())?,
            "nuisance" => self.nuisance = value.parse().map_err(|_| bad())?,
            "occlusion" => self.occlusion = value.parse().map_err(|_| bad())?,
            "max_visibility" => self.max_visibility = value.parse().map_err(|_| bad())?,
            "seed" => self.seed = value.parse().map_err(|_| bad())?,
            _ => {
                return Err(Error::UnknownKey {
                    key: key.to_string(),
                    valid: SPEC_KEYS.join(", "),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.identities < 2 {
            return Err(Error::BadValue {
                key: "identities".into(),
                message: "need at least 2".into(),
            });
        }
        for (key, v) in [("sequences", self.sequences), ("frames", self.frames), ("input_dim", self.input_dim)] {
            if v == 0 {
                return Err(Error::BadValue {
                    key: key.into(),
                    message: "must be positive".into(),
                });
            }
        }
        if self.signal_dim == 0 || self.signal_dim > self.input_dim {
            return Err(Error::BadValue {
                key: "signal_dim".into(),
                message: format!("must lie in 1..={}", self.input_dim),
            });
        }
        if !(0.0..1.0).contains(&self.occlusion) || !(0.0..=1.0).contains(&self.max_visibility) {
            return Err(Error::BadValue {
                key: "occlusion".into(),
                message: "occlusion must lie in [0, 1) and max_visibility in [0, 1]".into(),
            });
        }
        if !(self.noise >= 0.0 && self.nuisance >= 0.0) {
            return Err(Error::BadValue {
                key: "noise".into(),
                message: "noise and nuisance must be non-negative".into(),
            });
        }
        Ok(())
    }

    pub fn from_ini_str(text: &str, path: &Path) -> Result<Self> {
        let mut spec = Self::default();
        for (_, key, value, _) in parse_ini(text, path)? {
            spec.set(&key, &value)?;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_ini_str(&text, path)
    }
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<TrackletDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut tracklets = Vec::with_capacity(spec.identities * spec.sequences);
    let prototypes: Vec<Vec<f64>> = (0..spec.identities)
        .map(|_| (0..spec.signal_dim).map(|_| unit.sample(&mut rng)).collect())
        .collect();
    for (id, proto) in prototypes.iter().enumerate() {
        for _ in 0..spec.sequences {
            let offset: Vec<f64> = (spec.signal_dim..spec.input_dim)
                .map(|_| spec.nuisance * unit.sample(&mut rng))
                .collect();
            let mut frames = Vec::with_capacity(spec.frames);
            let mut occluded = Vec::with_capacity(spec.frames);
            for _ in 0..spec.frames {
                let hidden = spec.occlusion > 0.0 && rng.gen::<f64>() < spec.occlusion;
                let visibility = if hidden { spec.max_visibility * rng.gen::<f64>() } else { 1.0 };
                let signal = proto.iter().map(|&p| p * visibility);
                frames.push(
                    signal
                        .chain(offset.iter().copied())
                        .map(|base| base + spec.noise * unit.sample(&mut rng))
                        .collect(),
                );
                occluded.push(hidden);
            }
            tracklets.push(Tracklet {
                identity: id as i64,
                frames,
                occluded,
            });
        }
    }
    Ok(TrackletDataset {
        input_dim: spec.input_dim,
        tracklets,
    })
}

/// Pedestrians crossing a frame on straight lines, each hidden for one
/// contiguous stretch of frames.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub identities: usize,
    pub frames: u32,
    pub occlusion: u32,
    /// Embedding noise sigma.
    pub noise: f64,
    pub dim: usize,
    pub frame_rate: f64,
    pub seed: u64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            identities: 3,
            frames: 40,
            occlusion: 5,
            noise: 0.0,
            dim: 32,
            frame_rate: 30.0,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub info: SequenceInfo,
    pub detections: Vec<DetectionRecord>,
    pub gt: Vec<DetectionRecord>,
    /// Aligned with `detections`.
    pub embeddings: Vec<Vec<f64>>,
    /// Per identity, the first and last hidden frame.
    pub occlusions: Vec<(i64, u32, u32)>,
}

const IMG_W: u32 = 1920;
const IMG_H: u32 = 1080;

/// Deterministic scenario; only the embedding noise depends on the seed.
pub fn tracking_scenario(spec: &ScenarioSpec) -> Result<Scenario> {
    if spec.identities == 0 || spec.frames == 0 {
        return Err(Error::Contract("scenario needs identities and frames".into()));
    }
    let lanes = spec.identities as f64;
    let lane_h = f64::from(IMG_H) / lanes;
    let mut gt = Vec::new();
    let mut occlusions = Vec::new();
    for k in 0..spec.identities {
        let id = k as i64 + 1;
        let (w, h) = (60.0, (lane_h * 0.6).min(150.0));
        let start = Point::new(150.0 + 40.0 * k as f64, lane_h * (k as f64 + 0.5));
        let velocity = Point::new(8.0 + 2.0 * k as f64, if k % 2 == 0 { 1.0 } else { -1.0 });
        let hide_from = 10 + 8 * k as u32;
        let hide_to = hide_from + spec.occlusion.saturating_sub(1);
        if spec.occlusion > 0 && hide_to < spec.frames {
            occlusions.push((id, hide_from, hide_to));
        }
        for f in 1..=spec.frames {
            if spec.occlusion > 0 && (hide_from..=hide_to).contains(&f) {
                continue;
            }
            let t = f64::from(f - 1);
            let c = Point::new(start.x + velocity.x * t, start.y + velocity.y * t);
            gt.push(DetectionRecord::new(f, id, BoundingBox::from_center(c, w, h), 1.0));
        }
    }
    gt.sort_by_key(|r| (r.frame, r.track_id));

    let embedder = OracleEmbedder::new(spec.dim, spec.noise, spec.seed);
    let mut detections = Vec::with_capacity(gt.len());
    let mut embeddings = Vec::with_capacity(gt.len());
    for (index, g) in gt.iter().enumerate() {
        let v = embedder.embed(&DetectionInput {
            index,
            identity: Some(g.track_id),
            raw: None,
        })?;
        embeddings.push(v.0);
        detections.push(DetectionRecord {
            track_id: -1,
            ..g.clone()
        });
    }
    Ok(Scenario {
        info: SequenceInfo {
            name: format!("SYN-{:02}", spec.identities),
            frame_rate: spec.frame_rate,
            seq_length: spec.frames,
            img_width: IMG_W,
            img_height: IMG_H,
        },
        detections,
        gt,
        embeddings,
        occlusions,
    })
}

/// Writes the MOTChallenge layout: `seqinfo.ini`, `det/det.txt`,
/// `det/det.emb` and `gt/gt.txt`.
pub fn write_scenario(scenario: &Scenario, dir: &Path) -> Result<()> {
    let mkdir = |p: &Path| fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    let write = |p: &Path, bytes: &[u8]| fs::write(p, bytes).map_err(|e| Error::io(p, e));
    mkdir(&dir.join("det"))?;
    mkdir(&dir.join("gt"))?;
    write(&dir.join("seqinfo.ini"), format_seqinfo(&scenario.info).as_bytes())?;
    write(&dir.join("det/det.txt"), format_detections(&scenario.detections).as_bytes())?;
    write(&dir.join("det/det.emb"), &encode_embeddings(&scenario.embeddings)?)?;
    write(&dir.join("gt/gt.txt"), format_detections(&scenario.gt).as_bytes())?;
    Ok(())
}

/// Replaces each frame, with probability `rate`, by a frame of another
/// identity. Used to contaminate retrieval galleries.
pub fn contaminate(frames: &[Vec<f64>], identity: i64, dataset: &TrackletDataset, rate: f64, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let donors: Vec<&Tracklet> = dataset.tracklets.iter().filter(|t| t.identity != identity).collect();
    frames
        .iter()
        .map(|f| {
            if donors.is_empty() || rng.gen::<f64>() >= rate {
                return f.clone();
            }
            let t = donors[rng.gen_range(0..donors.len())];
            t.frames[rng.gen_range(0..t.frames.len())].clone()
        })
        .collect()
}
