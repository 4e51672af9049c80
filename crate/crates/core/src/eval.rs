//! Detection scoring against per-frame ground truth.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedBox {
    pub id: u32,
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl AnnotatedBox {
    pub fn new(id: u32, bbox: BBox) -> Self {
        AnnotatedBox {
            id,
            x: bbox.x,
            y: bbox.y,
            w: bbox.w,
            h: bbox.h,
        }
    }

    pub fn bbox(&self) -> BBox {
        BBox::new(self.x, self.y, self.w, self.h)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedFrame {
    pub frame: u64,
    pub boxes: Vec<AnnotatedBox>,
}

/// Ground truth, one entry per annotated frame, in ascending frame order.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AnnotationSet {
    pub frames: Vec<AnnotatedFrame>,
}

impl AnnotationSet {
    pub fn from_json(text: &str) -> Result<Self> {
        let mut set: AnnotationSet = serde_json::from_str(text).map_err(|e| Error::json("annotations", e))?;
        set.frames.sort_by_key(|f| f.frame);
        Ok(set)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::json("annotations", e))
    }

    /// Builds a set from `(frame, id, bbox)` triples, grouping by frame.
    pub fn from_boxes(boxes: impl IntoIterator<Item = (u64, u32, BBox)>) -> Self {
        let mut by_frame: BTreeMap<u64, Vec<AnnotatedBox>> = BTreeMap::new();
        for (frame, id, bbox) in boxes {
            by_frame.entry(frame).or_default().push(AnnotatedBox::new(id, bbox));
        }
        AnnotationSet {
            frames: by_frame
                .into_iter()
                .map(|(frame, boxes)| AnnotatedFrame { frame, boxes })
                .collect(),
        }
    }

    pub fn total_boxes(&self) -> usize {
        self.frames.iter().map(|f| f.boxes.len()).sum()
    }

    pub fn boxes_at(&self, frame: u64) -> &[AnnotatedBox] {
        match self.frames.binary_search_by_key(&frame, |f| f.frame) {
            Ok(i) => &self.frames[i].boxes,
            Err(_) => &[],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FrameScore {
    pub frame: u64,
    pub tp: usize,
    pub fp: usize,
    pub np: usize,
}

/// Greedy one-to-one matching in descending IoU. Every detection that is
/// not matched, including a second detection of an already matched box,
/// counts as a false positive.
pub fn match_frame(detections: &[BBox], gts: &[BBox], iou_threshold: f64) -> (usize, usize) {
    let mut pairs = Vec::new();
    for (d, db) in detections.iter().enumerate() {
        for (g, gb) in gts.iter().enumerate() {
            let iou = db.iou(gb);
            if iou >= iou_threshold && iou > 0.0 {
                pairs.push((iou, d, g));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let mut det_used = vec![false; detections.len()];
    let mut gt_used = vec![false; gts.len()];
    let mut tp = 0;
    for (_, d, g) in pairs {
        if !det_used[d] && !gt_used[g] {
            det_used[d] = true;
            gt_used[g] = true;
            tp += 1;
        }
    }
    (tp, detections.len() - tp)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub i: usize,
    pub frame: u64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frames: Vec<FrameScore>,
    pub total_tp: usize,
    pub total_fp: usize,
    pub total_np: usize,
    pub precision: f64,
    pub recall: f64,
    pub average_precision: f64,
    pub curve: Vec<CurvePoint>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::json("report", e))
    }

    pub fn write_curve_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "i,precision,recall")?;
        for p in &self.curve {
            writeln!(out, "{},{},{}", p.i, p.precision, p.recall)?;
        }
        Ok(())
    }
}

/// Cumulative precision and recall over `scores` in order. Recall is always
/// taken against every annotated box; precision reads 1.0 until the first
/// detection.
pub fn report(scores: &[FrameScore], total_np: usize) -> Result<EvalReport> {
    if total_np == 0 {
        return Err(Error::NoAnnotations);
    }
    if scores.is_empty() {
        return Err(Error::Config("nothing to evaluate".into()));
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut curve = Vec::with_capacity(scores.len());
    for (i, s) in scores.iter().enumerate() {
        tp += s.tp;
        fp += s.fp;
        curve.push(CurvePoint {
            i: i + 1,
            frame: s.frame,
            precision: if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 },
            recall: tp as f64 / total_np as f64,
        });
    }
    let last = *curve.last().expect("non-empty");
    Ok(EvalReport {
        frames: scores.to_vec(),
        total_tp: tp,
        total_fp: fp,
        total_np,
        precision: last.precision,
        recall: last.recall,
        average_precision: last.precision * last.recall,
        curve,
    })
}

/// Scores `detections` (frame, bbox) against `annotations` over every frame
/// that has either.
pub fn evaluate(
    detections: impl IntoIterator<Item = (u64, BBox)>,
    annotations: &AnnotationSet,
    iou_threshold: f64,
) -> Result<EvalReport> {
    let mut dets: BTreeMap<u64, Vec<BBox>> = BTreeMap::new();
    for (f, b) in detections {
        dets.entry(f).or_default().push(b);
    }
    for f in &annotations.frames {
        dets.entry(f.frame).or_default();
    }
    let scores: Vec<FrameScore> = dets
        .iter()
        .map(|(&frame, boxes)| {
            let gts: Vec<BBox> = annotations.boxes_at(frame).iter().map(|b| b.bbox()).collect();
            let (tp, fp) = match_frame(boxes, &gts, iou_threshold);
            FrameScore {
                frame,
                tp,
                fp,
                np: gts.len(),
            }
        })
        .collect();
    report(&scores, annotations.total_boxes())
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn b(x: usize, y: usize, w: usize, h: usize) -> BBox {
        BBox::new(x, y, w, h)
    }

    #[test]
    fn exact_match() {
        assert_eq!(match_frame(&[b(0, 0, 10, 10)], &[b(0, 0, 10, 10)], 0.5), (1, 0));
    }

    #[test]
    fn double_detection_is_a_false_positive() {
        let dets = [b(0, 0, 10, 10), b(1, 0, 10, 10)];
        assert_eq!(match_frame(&dets, &[b(0, 0, 10, 10)], 0.5), (1, 1));
    }

    #[test]
    fn disjoint_detection() {
        assert_eq!(match_frame(&[b(50, 50, 5, 5)], &[b(0, 0, 10, 10)], 0.5), (0, 1));
        assert_eq!(match_frame(&[], &[b(0, 0, 10, 10)], 0.5), (0, 0));
    }

    #[test]
    fn perfect_run() {
        let scores: Vec<FrameScore> = (0..5).map(|f| FrameScore { frame: f, tp: 2, fp: 0, np: 2 }).collect();
        let r = report(&scores, 10).unwrap();
        assert_eq!((r.precision, r.recall, r.average_precision), (1.0, 1.0, 1.0));
    }

    #[test]
    fn hand_summed_example() {
        // 10 frames, two boxes each, 18 hits and 2 false alarms.
        let scores: Vec<FrameScore> = (0..10)
            .map(|f| FrameScore {
                frame: f,
                tp: if f < 8 { 2 } else { 1 },
                fp: if f < 8 { 0 } else { 1 },
                np: 2,
            })
            .collect();
        let r = report(&scores, 20).unwrap();
        assert!((r.precision - 0.9).abs() < 1e-12);
        assert!((r.recall - 0.9).abs() < 1e-12);
        assert!((r.average_precision - 0.81).abs() < 1e-12);
    }

    #[test]
    fn product_definition() {
        // 72 hits, 8 false alarms, 90 boxes.
        let scores = [FrameScore { frame: 0, tp: 72, fp: 8, np: 90 }];
        let r = report(&scores, 90).unwrap();
        assert!((r.precision - 0.9).abs() < 1e-12 && (r.recall - 0.8).abs() < 1e-12);
        assert!((r.average_precision - 0.72).abs() < 1e-12);
    }

    #[test]
    fn precision_before_first_detection_is_one() {
        let scores = [FrameScore { frame: 0, tp: 0, fp: 0, np: 1 }, FrameScore { frame: 1, tp: 0, fp: 1, np: 1 }];
        let r = report(&scores, 2).unwrap();
        assert_eq!(r.curve[0].precision, 1.0);
        assert_eq!(r.curve[1].precision, 0.0);
        assert!(matches!(report(&scores, 0), Err(Error::NoAnnotations)));
    }

    #[test]
    fn random_tables_match_hand_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let n = rng.gen_range(1..30);
            let scores: Vec<FrameScore> = (0..n)
                .map(|f| {
                    let np = rng.gen_range(0..5);
                    FrameScore { frame: f, tp: rng.gen_range(0..=np), fp: rng.gen_range(0..3), np }
                })
                .collect();
            let total_np: usize = scores.iter().map(|s| s.np).sum::<usize>().max(1);
            let r = report(&scores, total_np).unwrap();
            for i in 0..scores.len() {
                let tp: usize = scores[..=i].iter().map(|s| s.tp).sum();
                let fp: usize = scores[..=i].iter().map(|s| s.fp).sum();
                let p = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
                assert!((r.curve[i].precision - p).abs() < 1e-9);
                assert!((r.curve[i].recall - tp as f64 / total_np as f64).abs() < 1e-9);
                if i > 0 {
                    assert!(r.curve[i].recall >= r.curve[i - 1].recall);
                }
            }
            assert_eq!(r.average_precision, r.precision * r.recall);
        }
    }

    #[test]
    fn self_evaluation_is_perfect() {
        let ann = AnnotationSet::from_boxes([(0, 1, b(0, 0, 5, 5)), (0, 2, b(10, 10, 5, 5)), (3, 1, b(2, 2, 4, 4))]);
        let dets = ann.frames.iter().flat_map(|f| f.boxes.iter().map(move |bx| (f.frame, bx.bbox())));
        let r = evaluate(dets, &ann, 0.5).unwrap();
        assert_eq!(r.average_precision, 1.0);
    }

    #[test]
    fn annotation_json_shape() {
        let json = r#"[{"frame": 2, "boxes": [{"id": 1, "x": 1, "y": 2, "w": 3, "h": 4}]}, {"frame": 0, "boxes": []}]"#;
        let set = AnnotationSet::from_json(json).unwrap();
        assert_eq!(set.frames[0].frame, 0);
        assert_eq!(set.boxes_at(2)[0].bbox(), b(1, 2, 3, 4));
        assert_eq!(AnnotationSet::from_json(&set.to_json().unwrap()).unwrap(), set);
    }

    #[test]
    fn curve_csv() {
        let r = report(&[FrameScore { frame: 0, tp: 1, fp: 1, np: 2 }], 2).unwrap();
        let mut out = Vec::new();
        r.write_curve_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "i,precision,recall\n1,0.5,0.5\n");
    }

    mod props {
        use proptest::prelude::*;

        use super::*;

        fn boxes() -> impl Strategy<Value = Vec<BBox>> {
            proptest::collection::vec((0usize..40, 0usize..40, 1usize..15, 1usize..15), 0..6)
                .prop_map(|v| v.into_iter().map(|(x, y, w, h)| BBox::new(x, y, w, h)).collect())
        }

        proptest! {
            #[test]
            fn order_of_detections_does_not_matter(dets in boxes(), gts in boxes()) {
                let mut ious: Vec<f64> = dets.iter().flat_map(|d| gts.iter().map(move |g| d.iou(g))).filter(|&v| v >= 0.5).collect();
                ious.sort_by(|a, b| a.total_cmp(b));
                prop_assume!(ious.windows(2).all(|w| w[0] != w[1]));
                let mut rev = dets.clone();
                rev.reverse();
                let (tp, fp) = match_frame(&dets, &gts, 0.5);
                prop_assert_eq!((tp, fp), match_frame(&rev, &gts, 0.5));
                prop_assert!(tp <= gts.len());
                prop_assert_eq!(tp + fp, dets.len());
            }
        }
    }
}
