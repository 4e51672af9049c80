//! Detections to tubes: weighted centre prediction, greedy gated
//! association, confirmation after `N = round(fps / 2)` consecutive frames
//! and bounded coasting.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, Point};
use crate::regions::Detection;
use crate::video_io::Frame;

/// Window length of the long-history prediction.
pub const PREDICTION_WINDOW: usize = 10;

/// `N = round(fps × 0.5)`, at least 1.
pub fn confirmation_threshold(fps: f64) -> usize {
    ((fps * 0.5).round() as usize).max(1)
}

/// Predicted next centre `P[i] = C[i] + D[i]` for the history
/// `centers = C[0..=i]`.
///
/// For `i <= 10`, `D` is the mean of all successive differences weighted
/// `n + 1`; beyond that it is `Σ_{n=1}^{10} (C[i] − C[i−n])(10 − n) / 45`.
/// The second form is kept exactly as defined even though a constant
/// velocity `d` yields `D = 11d/3`. An empty history predicts the origin and
/// a single centre predicts itself.
pub fn predict_center(centers: &[Point]) -> Point {
    let Some(&current) = centers.last() else {
        return Point::default();
    };
    current + displacement(centers)
}

/// `D[i]`, the predicted step from the last centre.
pub fn displacement(centers: &[Point]) -> Point {
    if centers.len() < 2 {
        return Point::default();
    }
    let i = centers.len() - 1;
    if i <= PREDICTION_WINDOW {
        let mut acc = Point::default();
        for n in 0..i {
            acc = acc + (centers[n + 1] - centers[n]) * (n + 1) as f64;
        }
        acc * (1.0 / (i * (i + 1) / 2) as f64)
    } else {
        let mut acc = Point::default();
        for n in 1..=PREDICTION_WINDOW {
            acc = acc + (centers[i] - centers[i - n]) * (PREDICTION_WINDOW - n) as f64;
        }
        acc * (1.0 / 45.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CoastLimit {
    /// Same as the confirmation threshold.
    #[default]
    Auto,
    Frames(usize),
}

impl Serialize for CoastLimit {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            CoastLimit::Auto => s.serialize_str("auto"),
            CoastLimit::Frames(n) => s.serialize_u64(*n as u64),
        }
    }
}

impl<'de> Deserialize<'de> for CoastLimit {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Text(String),
            Count(u64),
        }
        match Raw::deserialize(d)? {
            Raw::Text(s) if s == "auto" => Ok(CoastLimit::Auto),
            Raw::Text(s) => s
                .parse::<usize>()
                .map(CoastLimit::Frames)
                .map_err(|_| serde::de::Error::custom(format!("coast_limit must be \"auto\" or a count, got {s:?}"))),
            Raw::Count(n) => Ok(CoastLimit::Frames(n as usize)),
        }
    }
}

impl fmt::Display for CoastLimit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoastLimit::Auto => f.write_str("auto"),
            CoastLimit::Frames(n) => write!(f, "{n}"),
        }
    }
}

impl std::str::FromStr for CoastLimit {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "auto" {
            Ok(CoastLimit::Auto)
        } else {
            s.parse().map(CoastLimit::Frames).map_err(|_| format!("expected \"auto\" or a count, got {s:?}"))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerParams {
    pub gate_min_px: f64,
    pub coast_limit: CoastLimit,
}

impl Default for TrackerParams {
    fn default() -> Self {
        TrackerParams {
            gate_min_px: 20.0,
            coast_limit: CoastLimit::Auto,
        }
    }
}

impl TrackerParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gate_min_px >= 0.0 && self.gate_min_px.is_finite()) {
            return Err(Error::Config("track.gate_min_px must be non-negative".into()));
        }
        Ok(())
    }
}

/// One element of a tube.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectFrame {
    pub original_frame_index: u64,
    pub original_timestamp_ms: u64,
    pub bbox: BBox,
    pub image_patch: Vec<u8>,
    pub mask_patch: Vec<u8>,
    pub predicted: bool,
}

/// A finished object track, ready for rearrangement.
#[derive(Debug, Clone, PartialEq)]
pub struct Tube {
    pub object_id: u32,
    pub frames: Vec<ObjectFrame>,
    pub start_timestamp_ms: u64,
}

impl Tube {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn start_frame(&self) -> u64 {
        self.frames.first().map_or(0, |f| f.original_frame_index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackState {
    Candidate,
    Confirmed,
    Closed,
}

#[derive(Debug, Clone)]
pub struct Track {
    /// Creation order; orders candidates, which have no object id yet.
    pub key: u64,
    pub object_id: Option<u32>,
    pub state: TrackState,
    pub centers: Vec<Point>,
    pub entries: Vec<ObjectFrame>,
    pub coast_count: usize,
    consecutive_real: usize,
    step: Point,
}

impl Track {
    fn spawn(key: u64, det: Detection, frame: &Frame) -> Self {
        let center = det.bbox.center();
        Track {
            key,
            object_id: None,
            state: TrackState::Candidate,
            centers: vec![center],
            entries: vec![ObjectFrame {
                original_frame_index: frame.index(),
                original_timestamp_ms: frame.timestamp_ms(),
                bbox: det.bbox,
                image_patch: det.image_patch,
                mask_patch: det.mask_patch,
                predicted: false,
            }],
            coast_count: 0,
            consecutive_real: 1,
            step: Point::default(),
        }
    }

    pub fn last_bbox(&self) -> BBox {
        self.entries.last().expect("tracks are never empty").bbox
    }

    /// Where the object is expected in the next frame.
    pub fn predicted_center(&self) -> Point {
        if self.coast_count == 0 {
            predict_center(&self.centers)
        } else {
            *self.centers.last().expect("tracks are never empty") + self.step
        }
    }

    pub fn gate(&self, gate_min_px: f64) -> f64 {
        self.last_bbox().diagonal().max(gate_min_px)
    }

    pub fn real_entries(&self) -> usize {
        self.entries.iter().filter(|e| !e.predicted).count()
    }

    fn priority(&self) -> (u32, u64) {
        (self.object_id.unwrap_or(u32::MAX), self.key)
    }

    fn observe(&mut self, det: Detection, frame: &Frame) {
        self.centers.push(det.bbox.center());
        self.entries.push(ObjectFrame {
            original_frame_index: frame.index(),
            original_timestamp_ms: frame.timestamp_ms(),
            bbox: det.bbox,
            image_patch: det.image_patch,
            mask_patch: det.mask_patch,
            predicted: false,
        });
        self.coast_count = 0;
        self.consecutive_real += 1;
        self.step = displacement(&self.centers);
    }

    fn coast(&mut self, frame: &Frame) {
        let last = self.entries.last().expect("tracks are never empty");
        let center = self.predicted_center();
        let bbox = BBox::centered_clamped(center, last.bbox.w, last.bbox.h, frame.width(), frame.height());
        let mask_patch = if bbox.w == last.bbox.w && bbox.h == last.bbox.h {
            last.mask_patch.clone()
        } else {
            vec![1; bbox.area()]
        };
        let entry = ObjectFrame {
            original_frame_index: frame.index(),
            original_timestamp_ms: frame.timestamp_ms(),
            bbox,
            image_patch: frame.crop(&bbox),
            mask_patch,
            predicted: true,
        };
        self.centers.push(center);
        self.entries.push(entry);
        self.coast_count += 1;
        self.consecutive_real = 0;
    }

    fn into_tube(mut self) -> Option<Tube> {
        let id = self.object_id?;
        while self.entries.last().is_some_and(|e| e.predicted) {
            self.entries.pop();
        }
        let start = self.entries.first()?.original_timestamp_ms;
        Some(Tube {
            object_id: id,
            frames: self.entries,
            start_timestamp_ms: start,
        })
    }
}

/// Result of one frame's matching, as indices into the inputs.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Assignment {
    pub matched: Vec<(usize, usize)>,
    pub unmatched_tracks: Vec<usize>,
    pub unmatched_detections: Vec<usize>,
}

/// Greedy one-to-one matching in ascending predicted-centre distance, gated
/// per track. Ties go to the lower object id (candidates after confirmed
/// tracks, oldest first), then the lower detection index.
pub fn associate(tracks: &[Track], detections: &[Detection], gate_min_px: f64) -> Assignment {
    let mut pairs = Vec::new();
    for (ti, track) in tracks.iter().enumerate() {
        let predicted = track.predicted_center();
        let gate = track.gate(gate_min_px);
        for (di, det) in detections.iter().enumerate() {
            let dist = predicted.distance(&det.bbox.center());
            if dist <= gate {
                pairs.push((dist, track.priority(), ti, di));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.3.cmp(&b.3)));
    let mut track_used = vec![false; tracks.len()];
    let mut det_used = vec![false; detections.len()];
    let mut matched = Vec::new();
    for (_, _, ti, di) in pairs {
        if !track_used[ti] && !det_used[di] {
            track_used[ti] = true;
            det_used[di] = true;
            matched.push((ti, di));
        }
    }
    Assignment {
        matched,
        unmatched_tracks: (0..tracks.len()).filter(|&i| !track_used[i]).collect(),
        unmatched_detections: (0..detections.len()).filter(|&i| !det_used[i]).collect(),
    }
}

/// Stateful multi-object tracker for one stream. Finished tubes are released
/// in ascending object id.
#[derive(Debug)]
pub struct Tracker {
    params: TrackerParams,
    confirm_after: usize,
    coast_limit: usize,
    tracks: Vec<Track>,
    next_key: u64,
    next_id: u32,
    last_frame: Option<u64>,
    closed: BTreeMap<u32, Tube>,
    next_release: u32,
}

impl Tracker {
    pub fn new(params: TrackerParams, fps: f64) -> Result<Self> {
        params.validate()?;
        if !(fps > 0.0) {
            return Err(Error::Config(format!("fps must be positive, got {fps}")));
        }
        let confirm_after = confirmation_threshold(fps);
        let coast_limit = match params.coast_limit {
            CoastLimit::Auto => confirm_after,
            CoastLimit::Frames(n) => n,
        };
        Ok(Tracker {
            params,
            confirm_after,
            coast_limit,
            tracks: Vec::new(),
            next_key: 0,
            next_id: 1,
            last_frame: None,
            closed: BTreeMap::new(),
            next_release: 1,
        })
    }

    pub fn confirmation_threshold(&self) -> usize {
        self.confirm_after
    }

    pub fn coast_limit(&self) -> usize {
        self.coast_limit
    }

    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    /// Advances every track by one frame and returns the tubes that became
    /// releasable.
    pub fn step(&mut self, detections: Vec<Detection>, frame: &Frame) -> Result<Vec<Tube>> {
        if let Some(last) = self.last_frame {
            if frame.index() <= last {
                return Err(Error::OutOfOrder {
                    last,
                    got: frame.index(),
                });
            }
        }
        if let Some(d) = detections.iter().find(|d| d.frame_index != frame.index()) {
            return Err(Error::OutOfOrder {
                last: frame.index(),
                got: d.frame_index,
            });
        }
        self.last_frame = Some(frame.index());

        let assignment = associate(&self.tracks, &detections, self.params.gate_min_px);
        let mut slots: Vec<Option<Detection>> = detections.into_iter().map(Some).collect();
        let mut matched_det: Vec<Option<usize>> = vec![None; self.tracks.len()];
        for &(ti, di) in &assignment.matched {
            matched_det[ti] = Some(di);
        }

        let mut survivors = Vec::with_capacity(self.tracks.len());
        for (ti, mut track) in std::mem::take(&mut self.tracks).into_iter().enumerate() {
            match matched_det[ti] {
                Some(di) => {
                    track.observe(slots[di].take().expect("each detection matched once"), frame);
                    survivors.push(track);
                }
                None if track.state == TrackState::Candidate => {}
                None if track.coast_count >= self.coast_limit => {
                    track.state = TrackState::Closed;
                    self.close(track);
                }
                None => {
                    track.coast(frame);
                    survivors.push(track);
                }
            }
        }
        for di in assignment.unmatched_detections {
            let det = slots[di].take().expect("unmatched detection still present");
            survivors.push(Track::spawn(self.next_key, det, frame));
            self.next_key += 1;
        }
        // Confirmation in track order keeps id assignment deterministic.
        survivors.sort_by_key(|t| t.priority());
        for track in &mut survivors {
            if track.state == TrackState::Candidate && track.consecutive_real >= self.confirm_after {
                track.state = TrackState::Confirmed;
                track.object_id = Some(self.next_id);
                self.next_id += 1;
            }
        }
        survivors.sort_by_key(|t| t.priority());
        self.tracks = survivors;
        Ok(self.release())
    }

    /// Closes every live track and returns all remaining tubes.
    pub fn finish(&mut self) -> Vec<Tube> {
        for mut track in std::mem::take(&mut self.tracks) {
            track.state = TrackState::Closed;
            self.close(track);
        }
        let mut out = self.release();
        // Anything left is only blocked by ids that never produced a tube.
        out.extend(std::mem::take(&mut self.closed).into_values());
        out
    }

    fn close(&mut self, track: Track) {
        if let Some(tube) = track.into_tube() {
            self.closed.insert(tube.object_id, tube);
        }
    }

    fn release(&mut self) -> Vec<Tube> {
        let mut out = Vec::new();
        while let Some(tube) = self.closed.remove(&self.next_release) {
            out.push(tube);
            self.next_release += 1;
        }
        out
    }
}

/// Free-function form of [`Tracker::step`].
pub fn step_tracks(state: &mut Tracker, detections: Vec<Detection>, frame: &Frame) -> Result<Vec<Tube>> {
    state.step(detections, frame)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[(f64, f64)]) -> Vec<Point> {
        v.iter().map(|&(x, y)| Point::new(x, y)).collect()
    }

    #[test]
    fn short_history_constant_step() {
        let c = pts(&[(0.0, 0.0), (2.0, 0.0), (4.0, 0.0), (6.0, 0.0)]);
        assert_eq!(displacement(&c), Point::new(2.0, 0.0));
        assert_eq!(predict_center(&c), Point::new(8.0, 0.0));
    }

    #[test]
    fn long_history_overshoots_by_eleven_thirds() {
        // Oracle: Σ_{n=1}^{10} n(10−n) = 165, so D = 3·165/45 = 11.
        let oracle: f64 = (1..=10).map(|n| (3 * n * (10 - n)) as f64).sum::<f64>() / 45.0;
        assert_eq!(oracle, 11.0);
        let c: Vec<Point> = (0..15).map(|i| Point::new(3.0 * i as f64, 0.0)).collect();
        let p = predict_center(&c);
        assert!((p.x - (42.0 + oracle)).abs() < 1e-9);
        assert_eq!(p.y, 0.0);
    }

    #[test]
    fn degenerate_histories() {
        assert_eq!(predict_center(&pts(&[(4.0, 5.0)])), Point::new(4.0, 5.0));
        assert_eq!(predict_center(&[]), Point::default());
    }

    #[test]
    fn short_history_weights_recent_steps_more() {
        // steps 1 then 4: (1·1 + 4·2) / 3 = 3
        let c = pts(&[(0.0, 0.0), (1.0, 0.0), (5.0, 0.0)]);
        assert!((displacement(&c).x - 3.0).abs() < 1e-12);
    }

    #[test]
    fn threshold_from_frame_rate() {
        assert_eq!(confirmation_threshold(18.0), 9);
        assert_eq!(confirmation_threshold(30.0), 15);
        assert_eq!(confirmation_threshold(1.0), 1);
        assert_eq!(confirmation_threshold(0.4), 1);
    }

    fn det(frame_index: u64, x: usize, y: usize, w: usize, h: usize) -> Detection {
        Detection {
            frame_index,
            bbox: BBox::new(x, y, w, h),
            contour: vec![],
            hull: vec![],
            area_px: w * h,
            mask_patch: vec![1; w * h],
            image_patch: vec![0; w * h],
        }
    }

    fn frame(i: u64) -> Frame {
        Frame::filled(i, i * 55, 320, 240, &[0]).unwrap()
    }

    fn track_at(cx: f64, cy: f64, id: u32) -> Track {
        let d = det(0, (cx - 5.0) as usize, (cy - 5.0) as usize, 10, 10);
        let mut t = Track::spawn(id as u64, d, &frame(0));
        t.object_id = Some(id);
        t.state = TrackState::Confirmed;
        t
    }

    #[test]
    fn associate_nearest_within_gate() {
        let tracks = vec![track_at(50.0, 50.0, 1)];
        let dets = vec![det(1, 47, 45, 10, 10), det(1, 195, 195, 10, 10)];
        let a = associate(&tracks, &dets, 40.0);
        assert_eq!(a.matched, vec![(0, 0)]);
        assert_eq!(a.unmatched_detections, vec![1]);
        assert!(a.unmatched_tracks.is_empty());
    }

    #[test]
    fn associate_tie_goes_to_lower_id() {
        let tracks = vec![track_at(50.0, 50.0, 2), track_at(50.0, 50.0, 1)];
        let dets = vec![det(1, 45, 45, 10, 10)];
        let a = associate(&tracks, &dets, 20.0);
        assert_eq!(a.matched, vec![(1, 0)]);
        assert_eq!(a.unmatched_tracks, vec![0]);
    }

    #[test]
    fn associate_without_detections() {
        let tracks = vec![track_at(50.0, 50.0, 1), track_at(90.0, 50.0, 2)];
        let a = associate(&tracks, &[], 20.0);
        assert!(a.matched.is_empty());
        assert_eq!(a.unmatched_tracks, vec![0, 1]);
    }

    #[test]
    fn steady_square_yields_one_tube() {
        let mut tracker = Tracker::new(TrackerParams::default(), 18.0).unwrap();
        let mut tubes = Vec::new();
        for i in 0..30u64 {
            let f = frame(i);
            tubes.extend(tracker.step(vec![det(i, 10 + 5 * i as usize, 100, 16, 16)], &f).unwrap());
        }
        tubes.extend(tracker.finish());
        assert_eq!(tubes.len(), 1);
        assert_eq!(tubes[0].object_id, 1);
        assert_eq!(tubes[0].len(), 30);
        assert!(tubes[0].frames.iter().all(|f| !f.predicted));
    }

    #[test]
    fn short_blob_is_not_confirmed() {
        let mut tracker = Tracker::new(TrackerParams::default(), 18.0).unwrap();
        for i in 0..3u64 {
            assert!(tracker.step(vec![det(i, 50, 50, 12, 12)], &frame(i)).unwrap().is_empty());
        }
        for i in 3..40u64 {
            assert!(tracker.step(vec![], &frame(i)).unwrap().is_empty());
        }
        assert!(tracker.finish().is_empty());
    }

    #[test]
    fn coasting_track_closes_and_trims() {
        let mut tracker = Tracker::new(TrackerParams::default(), 18.0).unwrap();
        let mut tubes = Vec::new();
        for i in 0..12u64 {
            tubes.extend(tracker.step(vec![det(i, 20 + 2 * i as usize, 60, 14, 14)], &frame(i)).unwrap());
        }
        for i in 12..40u64 {
            tubes.extend(tracker.step(vec![], &frame(i)).unwrap());
        }
        assert_eq!(tubes.len(), 1);
        assert_eq!(tubes[0].len(), 12);
        assert!(tracker.tracks().is_empty());
    }

    #[test]
    fn out_of_order_frames_are_rejected() {
        let mut tracker = Tracker::new(TrackerParams::default(), 18.0).unwrap();
        tracker.step(vec![], &frame(5)).unwrap();
        assert!(matches!(tracker.step(vec![], &frame(5)), Err(Error::OutOfOrder { .. })));
        assert!(matches!(tracker.step(vec![det(3, 0, 0, 4, 4)], &frame(6)), Err(Error::OutOfOrder { .. })));
    }

    #[test]
    fn crossing_squares_keep_their_ids() {
        // Two squares of different sizes cross horizontally on rows 10 px
        // apart; the smaller one is hidden behind the larger one for two
        // frames.
        let mut tracker = Tracker::new(TrackerParams::default(), 18.0).unwrap();
        let mut tubes = Vec::new();
        let (mut hidden, mut total) = (0, 0);
        for i in 0..60u64 {
            let a = BBox::new(40 + 2 * i as usize, 100, 32, 32);
            let b = BBox::new(180 - 2 * i as usize, 120, 12, 12);
            let mut dets = vec![det(i, a.x, a.y, a.w, a.h)];
            if a.intersection_area(&b) == b.area() && hidden < 2 {
                hidden += 1;
            } else {
                dets.push(det(i, b.x, b.y, b.w, b.h));
            }
            total += 1;
            dets.sort_by_key(|d| (d.bbox.y, d.bbox.x));
            tubes.extend(tracker.step(dets, &frame(i)).unwrap());
        }
        tubes.extend(tracker.finish());
        assert_eq!(total, 60);
        assert_eq!(hidden, 2);
        assert_eq!(tubes.len(), 2);
        for tube in &tubes {
            assert_eq!(tube.len(), 60);
            // Every real entry keeps the size of the object it started on.
            let size = (tube.frames[0].bbox.w, tube.frames[0].bbox.h);
            assert!(tube.frames.iter().all(|f| (f.bbox.w, f.bbox.h) == size));
        }
    }
}
