//! MOTChallenge text files, the EMB1 embedding sidecar and INI configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::tracker::TrackerConfig;

/// One line of a det/gt/result file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub frame: u32,
    pub track_id: i64,
    pub bb_left: f64,
    pub bb_top: f64,
    pub bb_width: f64,
    pub bb_height: f64,
    pub confidence: f64,
    pub world_x: f64,
    pub world_y: f64,
    pub world_z: f64,
}

impl DetectionRecord {
    pub fn new(frame: u32, track_id: i64, bbox: BoundingBox, confidence: f64) -> Self {
        Self {
            frame,
            track_id,
            bb_left: bbox.left,
            bb_top: bbox.top,
            bb_width: bbox.width,
            bb_height: bbox.height,
            confidence,
            world_x: -1.0,
            world_y: -1.0,
            world_z: -1.0,
        }
    }

    pub fn bbox(&self) -> BoundingBox {
        BoundingBox {
            left: self.bb_left,
            top: self.bb_top,
            width: self.bb_width,
            height: self.bb_height,
        }
    }
}

/// Contents of `seqinfo.ini`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceInfo {
    pub name: String,
    pub frame_rate: f64,
    pub seq_length: u32,
    pub img_width: u32,
    pub img_height: u32,
}

pub fn parse_detections(path: impl AsRef<Path>) -> Result<Vec<DetectionRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_detections_str(&text, path)
}

/// Parses CSV text. Records come back stably sorted by frame.
pub fn parse_detections_str(text: &str, path: &Path) -> Result<Vec<DetectionRecord>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 7 || fields.len() > 10 {
            return Err(parse_err(format!("expected 7 to 10 fields, found {}", fields.len())));
        }
        let mut vals = [-1.0f64; 10];
        for (slot, field) in vals.iter_mut().zip(&fields) {
            *slot = field
                .parse::<f64>()
                .map_err(|_| parse_err(format!("not a number: `{field}`")))?;
        }
        let frame = integral(vals[0]).filter(|&f| f >= 1 && f <= u32::MAX as i64);
        let frame = frame.ok_or_else(|| parse_err(format!("frame must be a positive integer, got `{}`", fields[0])))?;
        let track_id = integral(vals[1]).ok_or_else(|| parse_err(format!("id must be an integer, got `{}`", fields[1])))?;
        let rec = DetectionRecord {
            frame: frame as u32,
            track_id,
            bb_left: vals[2],
            bb_top: vals[3],
            bb_width: vals[4],
            bb_height: vals[5],
            confidence: vals[6],
            world_x: vals[7],
            world_y: vals[8],
            world_z: vals[9],
        };
        if !(rec.bb_width > 0.0 && rec.bb_height > 0.0) {
            return Err(Error::Validation {
                line: line_no,
                message: format!(
                    "frame {} id {}: bb_width and bb_height must be > 0 (got {} x {})",
                    rec.frame, rec.track_id, rec.bb_width, rec.bb_height
                ),
            });
        }
        out.push(rec);
    }
    out.sort_by_key(|r| r.frame);
    Ok(out)
}

fn integral(v: f64) -> Option<i64> {
    (v.is_finite() && v.fract() == 0.0).then_some(v as i64)
}

/// Up to six decimals, trailing zeros trimmed.
pub fn fmt_real(v: f64) -> String {
    let mut s = format!("{v:.6}");
    if s.contains('.') {
        let trimmed = s.trim_end_matches('0').trim_end_matches('.').len();
        s.truncate(trimmed);
    }
    if s == "-0" {
        s = "0".into();
    }
    s
}

/// Serializes result records ordered by (frame, id).
pub fn format_results(records: &[DetectionRecord]) -> Result<String> {
    if let Some(bad) = records.iter().find(|r| r.track_id < 1) {
        return Err(Error::Contract(format!(
            "result record at frame {} has unassigned id {}",
            bad.frame, bad.track_id
        )));
    }
    let mut sorted: Vec<&DetectionRecord> = records.iter().collect();
    sorted.sort_by_key(|r| (r.frame, r.track_id));
    let mut out = String::new();
    for r in sorted {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.frame,
            r.track_id,
            fmt_real(r.bb_left),
            fmt_real(r.bb_top),
            fmt_real(r.bb_width),
            fmt_real(r.bb_height),
            fmt_real(r.confidence),
            fmt_real(r.world_x),
            fmt_real(r.world_y),
            fmt_real(r.world_z),
        );
    }
    Ok(out)
}

pub fn write_results(records: &[DetectionRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = format_results(records)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes any records (including unassigned ids) in input order; used for det files.
pub fn format_detections(records: &[DetectionRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.frame,
            r.track_id,
            fmt_real(r.bb_left),
            fmt_real(r.bb_top),
            fmt_real(r.bb_width),
            fmt_real(r.bb_height),
            fmt_real(r.confidence),
            fmt_real(r.world_x),
            fmt_real(r.world_y),
            fmt_real(r.world_z),
        );
    }
    out
}

/// Row-major `rows x dim` matrix decoded from an EMB1 file.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

pub const EMB_MAGIC: &[u8; 4] = b"EMB1";

pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingMatrix> {
    if bytes.len() < 12 {
        return Err(Error::Embedding("truncated header".into()));
    }
    if &bytes[..4] != EMB_MAGIC {
        return Err(Error::Embedding(format!(
            "magic mismatch: expected EMB1, found {:?}",
            String::from_utf8_lossy(&bytes[..4])
        )));
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if count == 0 || dim == 0 {
        return Err(Error::Embedding("empty embedding file".into()));
    }
    let expected = count * dim * 4;
    let payload = &bytes[12..];
    if payload.len() < expected {
        return Err(Error::Embedding(format!(
            "truncated payload: expected {expected} bytes, found {}",
            payload.len()
        )));
    }
    if payload.len() > expected {
        return Err(Error::Embedding(format!(
            "trailing data: expected {expected} payload bytes, found {}",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(EmbeddingMatrix { rows: count, dim, data })
}

pub fn encode_embeddings(rows: &[Vec<f64>]) -> Result<Vec<u8>> {
    let dim = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || dim == 0 {
        return Err(Error::Embedding("empty embedding file".into()));
    }
    let mut out = Vec::with_capacity(12 + rows.len() * dim * 4);
    out.extend_from_slice(EMB_MAGIC);
    out.extend_from_slice(&(rows.len() as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for row in rows {
        if row.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: row.len(),
            });
        }
        for &v in row {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embeddings(&bytes)
}

pub fn write_embeddings(rows: &[Vec<f64>], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_embeddings(rows)?).map_err(|e| Error::io(path, e))
}

/// Minimal INI reader: `[section]` headers, `key=value` pairs, `;`/`#` comments.
/// Returns `(section, key, value, line)` tuples in file order.
pub(crate) fn parse_ini(text: &str, path: &Path) -> Result<Vec<(String, String, String, usize)>> {
    let mut section = String::new();
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with(';') || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name.trim().to_string();
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                message: format!("expected key=value, found `{line}`"),
            });
        };
        out.push((section.clone(), k.trim().to_string(), v.trim().to_string(), idx + 1));
    }
    Ok(out)
}

pub fn parse_seqinfo(path: impl AsRef<Path>) -> Result<SequenceInfo> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_seqinfo_str(&text, path)
}

pub fn parse_seqinfo_str(text: &str, path: &Path) -> Result<SequenceInfo> {
    let mut name = None;
    let mut frame_rate = None;
    let mut seq_length = None;
    let mut img_width = None;
    let mut img_height = None;
    for (section, key, value, _) in parse_ini(text, path)? {
        if !section.eq_ignore_ascii_case("Sequence") {
            continue;
        }
        let bad = |message: &str| Error::BadValue {
            key: key.clone(),
            message: message.to_string(),
        };
        match key.as_str() {
            "name" => name = Some(value.clone()),
            "frameRate" => frame_rate = Some(value.parse::<f64>().map_err(|_| bad("expected a number"))?),
            "seqLength" => seq_length = Some(value.parse::<u32>().map_err(|_| bad("expected an integer"))?),
            "imWidth" => img_width = Some(value.parse::<u32>().map_err(|_| bad("expected an integer"))?),
            "imHeight" => img_height = Some(value.parse::<u32>().map_err(|_| bad("expected an integer"))?),
            _ => {}
        }
    }
    let missing = |key: &str| Error::BadValue {
        key: key.into(),
        message: "missing from [Sequence]".into(),
    };
    let info = SequenceInfo {
        name: name.ok_or_else(|| missing("name"))?,
        frame_rate: frame_rate.ok_or_else(|| missing("frameRate"))?,
        seq_length: seq_length.ok_or_else(|| missing("seqLength"))?,
        img_width: img_width.ok_or_else(|| missing("imWidth"))?,
        img_height: img_height.ok_or_else(|| missing("imHeight"))?,
    };
    if !(info.frame_rate > 0.0 && info.frame_rate.is_finite()) {
        return Err(Error::BadValue {
            key: "frameRate".into(),
            message: "must be positive".into(),
        });
    }
    if info.seq_length < 1 {
        return Err(Error::BadValue {
            key: "seqLength".into(),
            message: "must be at least 1".into(),
        });
    }
    Ok(info)
}

pub fn format_seqinfo(info: &SequenceInfo) -> String {
    format!(
        "[Sequence]\nname={}\nimDir=img1\nframeRate={}\nseqLength={}\nimWidth={}\nimHeight={}\nimExt=.jpg\n",
        info.name,
        fmt_real(info.frame_rate),
        info.seq_length,
        info.img_width,
        info.img_height
    )
}

/// Loads tracker configuration; unset keys take the frame-rate-relative defaults.
pub fn load_config(path: impl AsRef<Path>, frame_rate: f64) -> Result<TrackerConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    load_config_str(&text, path, frame_rate)
}

pub fn load_config_str(text: &str, path: &Path, frame_rate: f64) -> Result<TrackerConfig> {
    let mut cfg = TrackerConfig::for_frame_rate(frame_rate);
    for (_, key, value, _) in parse_ini(text, path)? {
        cfg.set(&key, &value)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p() -> &'static Path {
        Path::new("test.txt")
    }

    #[test]
    fn parses_full_line() {
        let recs = parse_detections_str("1,-1,10.0,20.0,30.0,60.0,0.9,-1,-1,-1\n", p()).unwrap();
        assert_eq!(recs.len(), 1);
        let r = &recs[0];
        assert_eq!((r.frame, r.track_id), (1, -1));
        assert_eq!((r.bb_left, r.bb_top, r.bb_width, r.bb_height), (10.0, 20.0, 30.0, 60.0));
        assert_eq!(r.confidence, 0.9);
    }

    #[test]
    fn empty_file_gives_no_records() {
        assert!(parse_detections_str("", p()).unwrap().is_empty());
    }

    #[test]
    fn missing_trailing_fields_default() {
        let r = &parse_detections_str("4,2,1,2,3,4,0.5", p()).unwrap()[0];
        assert_eq!((r.world_x, r.world_y, r.world_z), (-1.0, -1.0, -1.0));
    }

    #[test]
    fn negative_width_is_validation_error() {
        let err = parse_detections_str("1,-1,10,20,-5,60,0.9", p()).unwrap_err();
        assert!(matches!(err, Error::Validation { line: 1, .. }), "{err}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse_detections_str("1,-1,1,1,1,1,1\n2,x,1,1,1,1,1\n", p()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = parse_detections_str("1,2,3\n", p()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        let err = parse_detections_str("0,1,1,1,1,1,1\n", p()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn sorted_by_frame_then_input_order() {
        let recs = parse_detections_str("3,1,0,0,1,1,1\n1,5,0,0,1,1,1\n3,0,0,0,1,1,1\n1,2,0,0,1,1,1\n", p()).unwrap();
        let keys: Vec<_> = recs.iter().map(|r| (r.frame, r.track_id)).collect();
        assert_eq!(keys, vec![(1, 5), (1, 2), (3, 1), (3, 0)]);
    }

    #[test]
    fn result_serialization() {
        let bb = BoundingBox::new(1.0, 2.0, 3.0, 4.0).unwrap();
        let s = format_results(&[DetectionRecord::new(3, 7, bb, 1.0)]).unwrap();
        assert_eq!(s, "3,7,1,2,3,4,1,-1,-1,-1\n");
    }

    #[test]
    fn result_ordering_by_id() {
        let bb = BoundingBox::new(1.0, 2.0, 3.0, 4.0).unwrap();
        let s = format_results(&[DetectionRecord::new(1, 9, bb, 1.0), DetectionRecord::new(1, 2, bb, 1.0)]).unwrap();
        let ids: Vec<&str> = s.lines().map(|l| l.split(',').nth(1).unwrap()).collect();
        assert_eq!(ids, vec!["2", "9"]);
    }

    #[test]
    fn unassigned_id_rejected() {
        let bb = BoundingBox::new(1.0, 2.0, 3.0, 4.0).unwrap();
        assert!(format_results(&[DetectionRecord::new(1, -1, bb, 1.0)]).is_err());
    }

    #[test]
    fn fmt_real_trims() {
        assert_eq!(fmt_real(0.5), "0.5");
        assert_eq!(fmt_real(-1.0), "-1");
        assert_eq!(fmt_real(1.0 / 3.0), "0.333333");
        assert_eq!(fmt_real(-0.0000001), "0");
        assert_eq!(fmt_real(12.125), "12.125");
    }

    #[test]
    fn embedding_decode() {
        let bytes = encode_embeddings(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
        assert_eq!(&bytes[..4], b"EMB1");
        let m = decode_embeddings(&bytes).unwrap();
        assert_eq!((m.rows, m.dim), (2, 3));
        assert_eq!(m.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(m.row(1), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn embedding_errors() {
        let mut empty = b"EMB1".to_vec();
        empty.extend_from_slice(&0u32.to_le_bytes());
        empty.extend_from_slice(&3u32.to_le_bytes());
        let err = decode_embeddings(&empty).unwrap_err().to_string();
        assert!(err.contains("empty embedding file"), "{err}");

        let mut bytes = encode_embeddings(&[vec![1.0, 2.0]]).unwrap();
        bytes.pop();
        assert!(decode_embeddings(&bytes).unwrap_err().to_string().contains("truncated"));

        let mut bad = encode_embeddings(&[vec![1.0, 2.0]]).unwrap();
        bad[0] = b'X';
        assert!(decode_embeddings(&bad).unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn config_defaults_at_30_fps() {
        let cfg = load_config_str("", p(), 30.0).unwrap();
        assert_eq!(cfg.tau_i, 6);
        assert_eq!(cfg.tau_t, 60);
        assert_eq!(cfg.window, 9);
        assert_eq!(cfg.overlap_window, 9);
        assert_eq!(cfg.tau_a, 0.8);
        assert_eq!(cfg.tau_s, 0.2);
        assert_eq!(cfg.tau_o, 0.5);
        assert_eq!(cfg.tau_d, 2.0);
        assert_eq!(cfg.seq_len, 8);
        assert_eq!(cfg.max_history, 100);
    }

    #[test]
    fn config_override_and_errors() {
        let cfg = load_config_str("tau_a=0.5\n", p(), 30.0).unwrap();
        let base = TrackerConfig::for_frame_rate(30.0);
        assert_eq!(cfg, TrackerConfig { tau_a: 0.5, ..base });

        assert!(matches!(load_config_str("tau_o=-1", p(), 30.0), Err(Error::BadValue { .. })));
        let err = load_config_str("tau_x=1", p(), 30.0).unwrap_err();
        assert!(matches!(err, Error::UnknownKey { .. }));
        assert!(err.to_string().contains("tau_a"));
        let err = load_config_str("L=abc", p(), 30.0).unwrap_err();
        assert!(err.to_string().contains("`L`"));
    }

    #[test]
    fn seqinfo_roundtrip() {
        let info = SequenceInfo {
            name: "SYN-01".into(),
            frame_rate: 30.0,
            seq_length: 40,
            img_width: 1920,
            img_height: 1080,
        };
        assert_eq!(parse_seqinfo_str(&format_seqinfo(&info), p()).unwrap(), info);
    }

    fn arb_record() -> impl Strategy<Value = DetectionRecord> {
        (
            1u32..500,
            1i64..50,
            (-100.0..2000.0f64, -100.0..2000.0f64, 0.5..300.0f64, 0.5..300.0f64),
            0.0..1.0f64,
            (-5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64),
        )
            .prop_map(|(frame, id, (l, t, w, h), c, (x, y, z))| DetectionRecord {
                frame,
                track_id: id,
                bb_left: l,
                bb_top: t,
                bb_width: w,
                bb_height: h,
                confidence: c,
                world_x: x,
                world_y: y,
                world_z: z,
            })
    }

    proptest! {
        #[test]
        fn parse_write_parse_identity(recs in proptest::collection::vec(arb_record(), 0..30)) {
            let once = parse_detections_str(&format_results(&recs).unwrap(), p()).unwrap();
            let twice = parse_detections_str(&format_results(&once).unwrap(), p()).unwrap();
            prop_assert_eq!(once.len(), recs.len());
            for (a, b) in once.iter().zip(&twice) {
                prop_assert_eq!(a, b);
            }
            let mut sorted = recs.clone();
            sorted.sort_by_key(|r| (r.frame, r.track_id));
            for (a, b) in sorted.iter().zip(&once) {
                prop_assert_eq!((a.frame, a.track_id), (b.frame, b.track_id));
                prop_assert!((a.bb_left - b.bb_left).abs() <= 1e-6);
                prop_assert!((a.bb_width - b.bb_width).abs() <= 1e-6);
                prop_assert!((a.world_z - b.world_z).abs() <= 1e-6);
            }
        }

        #[test]
        fn embedding_rows_match_header(rows in 1usize..6, dim in 1usize..6, seed in 0u32..1000) {
            let m: Vec<Vec<f64>> = (0..rows)
                .map(|r| (0..dim).map(|c| ((r * 31 + c * 7) as u32 ^ seed) as f64 * 0.25).collect())
                .collect();
            let dec = decode_embeddings(&encode_embeddings(&m).unwrap()).unwrap();
            prop_assert_eq!(dec.rows, rows);
            prop_assert_eq!(dec.data.len(), rows * dim);
        }
    }
}
