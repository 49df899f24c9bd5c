//! CLEAR-MOT and identity metrics.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use crate::assignment::hungarian;
use crate::geometry::iou;
use crate::mot_io::{fmt_real, DetectionRecord};

/// Minimum IoU of a valid gt/hypothesis correspondence.
pub const MATCH_IOU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameMatch {
    pub frame: u32,
    /// `(gt id, hyp id, IoU)`.
    pub matches: Vec<(i64, i64, f64)>,
    pub false_positives: Vec<i64>,
    pub misses: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameMatching {
    pub frames: Vec<FrameMatch>,
}

fn by_frame(records: &[DetectionRecord]) -> BTreeMap<u32, Vec<&DetectionRecord>> {
    let mut map: BTreeMap<u32, Vec<&DetectionRecord>> = BTreeMap::new();
    for r in records {
        map.entry(r.frame).or_default().push(r);
    }
    map
}

/// Per-frame correspondences. Pairs matched earlier are kept while their
/// IoU stays at or above [`MATCH_IOU`]; the rest is a min-cost assignment on
/// `1 - IoU`.
pub fn match_frames(gt: &[DetectionRecord], hyp: &[DetectionRecord]) -> FrameMatching {
    let gt_frames = by_frame(gt);
    let hyp_frames = by_frame(hyp);
    let frames: BTreeSet<u32> = gt_frames.keys().chain(hyp_frames.keys()).copied().collect();
    let mut previous: HashMap<i64, i64> = HashMap::new();
    let mut out = FrameMatching::default();
    let empty = Vec::new();
    for frame in frames {
        let g = gt_frames.get(&frame).unwrap_or(&empty);
        let h = hyp_frames.get(&frame).unwrap_or(&empty);
        let mut g_used = vec![false; g.len()];
        let mut h_used = vec![false; h.len()];
        let mut fm = FrameMatch {
            frame,
            ..FrameMatch::default()
        };
        for (gi, gr) in g.iter().enumerate() {
            let Some(&hid) = previous.get(&gr.track_id) else { continue };
            if let Some(hi) = h.iter().position(|hr| hr.track_id == hid) {
                let o = iou(&gr.bbox(), &h[hi].bbox());
                if o >= MATCH_IOU && !h_used[hi] {
                    g_used[gi] = true;
                    h_used[hi] = true;
                    fm.matches.push((gr.track_id, hid, o));
                }
            }
        }
        let gi_free: Vec<usize> = (0..g.len()).filter(|&i| !g_used[i]).collect();
        let hi_free: Vec<usize> = (0..h.len()).filter(|&i| !h_used[i]).collect();
        let cost: Vec<Vec<f64>> = gi_free
            .iter()
            .map(|&gi| {
                hi_free
                    .iter()
                    .map(|&hi| {
                        let o = iou(&g[gi].bbox(), &h[hi].bbox());
                        if o >= MATCH_IOU {
                            1.0 - o
                        } else {
                            f64::INFINITY
                        }
                    })
                    .collect()
            })
            .collect();
        for (r, c) in hungarian(&cost).into_iter().enumerate() {
            if let Some(c) = c {
                let (gi, hi) = (gi_free[r], hi_free[c]);
                g_used[gi] = true;
                h_used[hi] = true;
                fm.matches.push((g[gi].track_id, h[hi].track_id, iou(&g[gi].bbox(), &h[hi].bbox())));
            }
        }
        for &(gid, hid, _) in &fm.matches {
            previous.insert(gid, hid);
        }
        fm.matches.sort_by_key(|m| (m.0, m.1));
        fm.misses = (0..g.len()).filter(|&i| !g_used[i]).map(|i| g[i].track_id).collect();
        fm.false_positives = (0..h.len()).filter(|&i| !h_used[i]).map(|i| h[i].track_id).collect();
        out.frames.push(fm);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClearMot {
    pub mota: Option<f64>,
    pub motp: Option<f64>,
    pub fp: usize,
    pub fn_: usize,
    pub ids: usize,
    pub frag: usize,
    /// Percentages of gt trajectories.
    pub mt: Option<f64>,
    pub ml: Option<f64>,
    pub num_gt: usize,
}

pub fn clear_mot(matching: &FrameMatching) -> ClearMot {
    let mut fp = 0;
    let mut fn_ = 0;
    let mut ids = 0;
    let mut iou_sum = 0.0;
    let mut matched = 0usize;
    let mut last_hyp: HashMap<i64, i64> = HashMap::new();
    // per gt trajectory: matched flag for each frame it is present in
    let mut coverage: BTreeMap<i64, Vec<bool>> = BTreeMap::new();
    for fm in &matching.frames {
        fp += fm.false_positives.len();
        fn_ += fm.misses.len();
        for &(g, h, o) in &fm.matches {
            if last_hyp.get(&g).is_some_and(|&prev| prev != h) {
                ids += 1;
            }
            last_hyp.insert(g, h);
            iou_sum += o;
            matched += 1;
            coverage.entry(g).or_default().push(true);
        }
        for &g in &fm.misses {
            coverage.entry(g).or_default().push(false);
        }
    }
    let num_gt = matched + fn_;
    let mut frag = 0;
    let mut mostly_tracked = 0;
    let mut mostly_lost = 0;
    for flags in coverage.values() {
        let runs = flags.iter().zip(std::iter::once(&false).chain(flags.iter())).filter(|(c, p)| **c && !**p).count();
        frag += runs.saturating_sub(1);
        let ratio = flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64;
        mostly_tracked += usize::from(ratio >= 0.8);
        mostly_lost += usize::from(ratio <= 0.2);
    }
    let tracks = coverage.len();
    ClearMot {
        mota: (num_gt > 0).then(|| 1.0 - (fp + fn_ + ids) as f64 / num_gt as f64),
        motp: (matched > 0).then(|| iou_sum / matched as f64),
        fp,
        fn_,
        ids,
        frag,
        mt: (tracks > 0).then(|| 100.0 * mostly_tracked as f64 / tracks as f64),
        ml: (tracks > 0).then(|| 100.0 * mostly_lost as f64 / tracks as f64),
        num_gt,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct IdMetrics {
    pub idf1: Option<f64>,
    pub idr: Option<f64>,
    pub idp: Option<f64>,
    pub idtp: usize,
    pub idfp: usize,
    pub idfn: usize,
}

/// Frame-level agreements between every gt and hypothesis trajectory.
pub fn trajectory_overlaps(gt: &[DetectionRecord], hyp: &[DetectionRecord]) -> (Vec<i64>, Vec<i64>, Vec<Vec<usize>>) {
    let gt_ids: Vec<i64> = gt.iter().map(|r| r.track_id).collect::<BTreeSet<_>>().into_iter().collect();
    let hyp_ids: Vec<i64> = hyp.iter().map(|r| r.track_id).collect::<BTreeSet<_>>().into_iter().collect();
    let mut counts = vec![vec![0usize; hyp_ids.len()]; gt_ids.len()];
    let hyp_frames = by_frame(hyp);
    for g in gt {
        let gi = gt_ids.binary_search(&g.track_id).expect("collected");
        for h in hyp_frames.get(&g.frame).into_iter().flatten() {
            if iou(&g.bbox(), &h.bbox()) >= MATCH_IOU {
                counts[gi][hyp_ids.binary_search(&h.track_id).expect("collected")] += 1;
            }
        }
    }
    (gt_ids, hyp_ids, counts)
}

/// Identity metrics from the trajectory matching that maximises IDTP.
pub fn id_metrics(gt: &[DetectionRecord], hyp: &[DetectionRecord]) -> IdMetrics {
    let (_, _, counts) = trajectory_overlaps(gt, hyp);
    let cost: Vec<Vec<f64>> = counts.iter().map(|row| row.iter().map(|&c| -(c as f64)).collect()).collect();
    let idtp: usize = hungarian(&cost)
        .into_iter()
        .enumerate()
        .filter_map(|(r, c)| c.map(|c| counts[r][c]))
        .sum();
    let idfn = gt.len() - idtp;
    let idfp = hyp.len() - idtp;
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    IdMetrics {
        idf1: ratio(2 * idtp, 2 * idtp + idfp + idfn),
        idr: ratio(idtp, idtp + idfn),
        idp: ratio(idtp, idtp + idfp),
        idtp,
        idfp,
        idfn,
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub clear: ClearMot,
    pub id: IdMetrics,
    pub hz: Option<f64>,
}

impl MetricsReport {
    pub fn mota(&self) -> Option<f64> {
        self.clear.mota
    }
}

impl std::ops::Deref for MetricsReport {
    type Target = ClearMot;
    fn deref(&self) -> &ClearMot {
        &self.clear
    }
}

pub fn evaluate(gt: &[DetectionRecord], hyp: &[DetectionRecord]) -> MetricsReport {
    MetricsReport {
        clear: clear_mot(&match_frames(gt, hyp)),
        id: id_metrics(gt, hyp),
        hz: None,
    }
}

pub const REPORT_COLUMNS: [&str; 12] = ["MOTA", "MOTP", "IDF1", "IDR", "FP", "MT", "ML", "IDS", "Frag", "Hz", "FN", "IDP"];

fn opt(v: Option<f64>, scale: f64) -> String {
    v.map_or_else(|| "undefined".to_string(), |v| fmt_real(v * scale))
}

impl MetricsReport {
    /// Cells in [`REPORT_COLUMNS`] order; ratios as percentages.
    pub fn cells(&self) -> Vec<String> {
        vec![
            opt(self.clear.mota, 100.0),
            opt(self.clear.motp, 100.0),
            opt(self.id.idf1, 100.0),
            opt(self.id.idr, 100.0),
            self.clear.fp.to_string(),
            opt(self.clear.mt, 1.0),
            opt(self.clear.ml, 1.0),
            self.clear.ids.to_string(),
            self.clear.frag.to_string(),
            self.hz.map_or_else(|| "undefined".to_string(), |h| format!("{h:.1}")),
            self.clear.fn_.to_string(),
            opt(self.id.idp, 100.0),
        ]
    }

    /// Header plus one row per named sequence.
    pub fn to_csv(rows: &[(&str, &MetricsReport)]) -> String {
        let mut out = format!("sequence,{}\n", REPORT_COLUMNS.join(","));
        for (name, r) in rows {
            let _ = writeln!(out, "{name},{}", r.cells().join(","));
        }
        out
    }

    pub fn to_table(rows: &[(&str, &MetricsReport)]) -> String {
        let mut grid: Vec<Vec<String>> = vec![std::iter::once("sequence".to_string())
            .chain(REPORT_COLUMNS.iter().map(|c| c.to_string()))
            .collect()];
        for (name, r) in rows {
            let mut row = vec![name.to_string()];
            row.extend(r.cells().into_iter().map(|c| if c == "undefined" { "-".into() } else { c }));
            grid.push(row);
        }
        let widths: Vec<usize> = (0..grid[0].len()).map(|c| grid.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for row in &grid {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (cell, w))| if i == 0 { format!("{cell:<w$}") } else { format!("{cell:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        }
        out
    }
}
