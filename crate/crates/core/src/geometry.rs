//! Box arithmetic, overlap statistics and the linear motion model used to
//! extrapolate drifting tracks.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub left: f64,
    pub top: f64,
    pub width: f64,
    pub height: f64,
}

/// A 2D point or displacement in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

impl std::ops::Add for Point {
    type Output = Point;
    fn add(self, rhs: Point) -> Point {
        Point::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl std::ops::Sub for Point {
    type Output = Point;
    fn sub(self, rhs: Point) -> Point {
        Point::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl BoundingBox {
    /// Builds a box, rejecting non-positive or non-finite sizes.
    pub fn new(left: f64, top: f64, width: f64, height: f64) -> Result<Self> {
        if !(width > 0.0 && height > 0.0) || !left.is_finite() || !top.is_finite() {
            return Err(Error::Contract(format!(
                "box ({left}, {top}, {width}, {height}) must have finite position and positive size"
            )));
        }
        Ok(Self {
            left,
            top,
            width,
            height,
        })
    }

    pub fn from_center(center: Point, width: f64, height: f64) -> Self {
        Self {
            left: center.x - width / 2.0,
            top: center.y - height / 2.0,
            width,
            height,
        }
    }

    pub fn right(&self) -> f64 {
        self.left + self.width
    }

    pub fn bottom(&self) -> f64 {
        self.top + self.height
    }

    pub fn area(&self) -> f64 {
        self.width * self.height
    }

    pub fn center(&self) -> Point {
        Point::new(self.left + self.width / 2.0, self.top + self.height / 2.0)
    }

    pub fn diagonal(&self) -> f64 {
        self.width.hypot(self.height)
    }

    /// Same size, moved so its center sits at `center`.
    pub fn recentered(&self, center: Point) -> Self {
        Self::from_center(center, self.width, self.height)
    }

    /// True when the box has no overlap at all with `[0, w] x [0, h]`.
    pub fn outside_image(&self, img_width: f64, img_height: f64) -> bool {
        self.right() <= 0.0 || self.bottom() <= 0.0 || self.left >= img_width || self.top >= img_height
    }

    /// Intersection with the image rectangle, or `None` when nothing remains.
    pub fn clamp_to_image(&self, img_width: f64, img_height: f64) -> Option<Self> {
        let left = self.left.max(0.0);
        let top = self.top.max(0.0);
        let right = self.right().min(img_width);
        let bottom = self.bottom().min(img_height);
        (right > left && bottom > top).then_some(Self {
            left,
            top,
            width: right - left,
            height: bottom - top,
        })
    }
}

/// Intersection over union of two boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = overlap_1d(a.left, a.width, b.left, b.width);
    let ih = overlap_1d(a.top, a.height, b.top, b.height);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

// Exact extent when one interval contains the other, so a box has IoU 1 with itself.
fn overlap_1d(a0: f64, aw: f64, b0: f64, bw: f64) -> f64 {
    let (a1, b1) = (a0 + aw, b0 + bw);
    let lo = a0.max(b0);
    let hi = a1.min(b1);
    if hi <= lo {
        0.0
    } else if lo == a0 && hi == a1 {
        aw
    } else if lo == b0 && hi == b1 {
        bw
    } else {
        hi - lo
    }
}

/// Largest IoU between `track_box` and any of `boxes` (0 for an empty list).
pub fn max_iou<'a>(track_box: &BoundingBox, boxes: impl IntoIterator<Item = &'a BoundingBox>) -> f64 {
    boxes
        .into_iter()
        .map(|b| iou(track_box, b))
        .fold(0.0, f64::max)
}

/// 1 when the best IoU against the frame's detections reaches `tau_o`, else 0.
/// Equality counts as overlap.
pub fn overlap_indicator(track_box: &BoundingBox, frame_detections: &[BoundingBox], tau_o: f64) -> u8 {
    if frame_detections.is_empty() {
        return 0;
    }
    u8::from(max_iou(track_box, frame_detections) >= tau_o)
}

/// Mean of the stored overlap indicators.
pub fn mean_overlap(indicator_history: &[u8]) -> Result<f64> {
    if indicator_history.is_empty() {
        return Err(Error::Contract("mean_overlap needs at least one indicator".into()));
    }
    let ones: usize = indicator_history.iter().map(|&o| usize::from(o)).sum();
    Ok(ones as f64 / indicator_history.len() as f64)
}

/// Velocity from a center history ordered oldest to newest.
///
/// With at least `window` centers this is `(p[t-1] - p[t-window]) / window`.
/// Shorter histories divide by the actual age of the oldest center instead;
/// fewer than two centers give zero velocity.
pub fn estimate_velocity(history: &[Point], window: usize) -> Point {
    let n = history.len();
    if n < 2 || window == 0 {
        return Point::default();
    }
    let newest = history[n - 1];
    let (oldest, age) = if n >= window {
        (history[n - window], window as f64)
    } else {
        (history[0], (n - 1) as f64)
    };
    let d = newest - oldest;
    Point::new(d.x / age, d.y / age)
}

pub fn predict_position(last_center: Point, velocity: Point) -> Point {
    last_center + velocity
}

/// Bounded center history plus the velocity it implies.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionState {
    window: usize,
    history: VecDeque<Point>,
}

impl MotionState {
    pub fn new(window: usize) -> Self {
        Self {
            window: window.max(1),
            history: VecDeque::with_capacity(window.max(1)),
        }
    }

    pub fn push(&mut self, center: Point) {
        if self.history.len() == self.window {
            self.history.pop_front();
        }
        self.history.push_back(center);
    }

    pub fn len(&self) -> usize {
        self.history.len()
    }

    pub fn is_empty(&self) -> bool {
        self.history.is_empty()
    }

    pub fn last(&self) -> Option<Point> {
        self.history.back().copied()
    }

    pub fn velocity(&self) -> Point {
        let centers: Vec<Point> = self.history.iter().copied().collect();
        estimate_velocity(&centers, self.window)
    }

    pub fn centers(&self) -> impl Iterator<Item = &Point> {
        self.history.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bb(l: f64, t: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox::new(l, t, w, h).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = bb(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bb(100.0, 100.0, 10.0, 10.0)), 0.0);
        // intersection 50, union 150
        assert!((iou(&a, &bb(5.0, 0.0, 10.0, 10.0)) - 50.0 / 150.0).abs() < 1e-15);
    }

    #[test]
    fn touching_boxes_do_not_overlap() {
        assert_eq!(iou(&bb(0.0, 0.0, 10.0, 10.0), &bb(10.0, 0.0, 10.0, 10.0)), 0.0);
    }

    #[test]
    fn rejects_degenerate_boxes() {
        assert!(BoundingBox::new(0.0, 0.0, 0.0, 5.0).is_err());
        assert!(BoundingBox::new(0.0, 0.0, 5.0, -1.0).is_err());
        assert!(BoundingBox::new(f64::NAN, 0.0, 5.0, 1.0).is_err());
    }

    #[test]
    fn overlap_indicator_examples() {
        let a = bb(0.0, 0.0, 10.0, 10.0);
        assert_eq!(overlap_indicator(&a, &[bb(50.0, 0.0, 5.0, 5.0), a], 0.5), 1);
        assert_eq!(overlap_indicator(&a, &[], 0.5), 0);
        assert_eq!(overlap_indicator(&a, &[bb(5.0, 0.0, 10.0, 10.0)], 0.5), 0);
        // equality counts as overlap
        let third = iou(&a, &bb(5.0, 0.0, 10.0, 10.0));
        assert_eq!(overlap_indicator(&a, &[bb(5.0, 0.0, 10.0, 10.0)], third), 1);
    }

    #[test]
    fn mean_overlap_examples() {
        assert_eq!(mean_overlap(&[1, 1, 1, 1]).unwrap(), 1.0);
        assert_eq!(mean_overlap(&[0, 0]).unwrap(), 0.0);
        assert!((mean_overlap(&[1, 0, 1]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(mean_overlap(&[]).is_err());
    }

    #[test]
    fn velocity_examples() {
        let h = [Point::new(4.0, 4.0), Point::new(7.0, 7.0), Point::new(10.0, 10.0)];
        assert_eq!(estimate_velocity(&h, 3), Point::new(2.0, 2.0));
        let still = [Point::new(3.0, 1.0); 5];
        assert_eq!(estimate_velocity(&still, 3), Point::default());
        assert_eq!(estimate_velocity(&[Point::new(9.0, 9.0)], 3), Point::default());
        // young track: oldest center is 1 frame old
        let young = [Point::new(0.0, 0.0), Point::new(3.0, -1.0)];
        assert_eq!(estimate_velocity(&young, 9), Point::new(3.0, -1.0));
    }

    #[test]
    fn prediction_examples() {
        assert_eq!(
            predict_position(Point::new(12.0, 12.0), Point::new(2.0, 2.0)),
            Point::new(14.0, 14.0)
        );
        assert_eq!(predict_position(Point::new(5.0, 6.0), Point::default()), Point::new(5.0, 6.0));
        assert_eq!(
            predict_position(Point::default(), Point::new(-1.0, 3.0)),
            Point::new(-1.0, 3.0)
        );
    }

    #[test]
    fn motion_state_is_bounded() {
        let mut m = MotionState::new(3);
        for i in 0..10 {
            m.push(Point::new(i as f64, 0.0));
        }
        assert_eq!(m.len(), 3);
        assert_eq!(m.velocity(), Point::new((9.0 - 7.0) / 3.0, 0.0));
    }

    #[test]
    fn clamping() {
        let b = bb(-5.0, -5.0, 10.0, 10.0);
        assert_eq!(b.clamp_to_image(100.0, 100.0), Some(bb(0.0, 0.0, 5.0, 5.0)));
        assert!(bb(200.0, 0.0, 5.0, 5.0).outside_image(100.0, 100.0));
        assert_eq!(bb(200.0, 0.0, 5.0, 5.0).clamp_to_image(100.0, 100.0), None);
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (-50.0..50.0f64, -50.0..50.0f64, 0.1..40.0f64, 0.1..40.0f64)
            .prop_map(|(l, t, w, h)| BoundingBox::new(l, t, w, h).unwrap())
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(iou(&a, &a), 1.0);
        }

        #[test]
        fn mean_overlap_monotone(hist in proptest::collection::vec(0u8..=1, 1..12)) {
            let base = mean_overlap(&hist).unwrap();
            prop_assert!((0.0..=1.0).contains(&base));
            let mut up = hist.clone();
            up.push(1);
            prop_assert!(mean_overlap(&up).unwrap() >= base);
            let mut down = hist.clone();
            down.push(0);
            prop_assert!(mean_overlap(&down).unwrap() <= base);
        }

        #[test]
        fn prediction_translation_equivariant(
            pts in proptest::collection::vec((-100.0..100.0f64, -100.0..100.0f64), 1..12),
            shift in (-500.0..500.0f64, -500.0..500.0f64),
            window in 1usize..10,
        ) {
            let h: Vec<Point> = pts.iter().map(|&(x, y)| Point::new(x, y)).collect();
            let c = Point::new(shift.0, shift.1);
            let shifted: Vec<Point> = h.iter().map(|&p| p + c).collect();
            let p = predict_position(*h.last().unwrap(), estimate_velocity(&h, window));
            let q = predict_position(*shifted.last().unwrap(), estimate_velocity(&shifted, window));
            prop_assert!((q.x - (p.x + c.x)).abs() < 1e-9);
            prop_assert!((q.y - (p.y + c.y)).abs() < 1e-9);
        }
    }
}
