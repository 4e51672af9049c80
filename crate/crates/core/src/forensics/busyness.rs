//! Normal-motion model: per-block, per-direction maxima of flow summed over
//! a few frames. Motion that exceeds every level seen in training alarms.

use std::collections::VecDeque;

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{block_histograms, corner_features_with, dense_flow, BlockFlowHistogram, CornerParams, FlowParams, BLOCK};
use crate::video_io::{to_luma, Frame};

use super::{AlarmDetail, AlarmEvent, AlarmKind, Persistence};

const BATCH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BusynessParams {
    /// Per-frame histograms summed into one feature matrix.
    pub window: usize,
    pub margin: f64,
    pub hits: usize,
    /// Flow vectors shorter than this, in pixels, are treated as still.
    pub min_flow: f64,
    /// Sample flow only at corner features; otherwise at every pixel.
    pub sparse: bool,
    pub max_corners: usize,
    pub corner_min_response: f64,
}

impl Default for BusynessParams {
    fn default() -> Self {
        BusynessParams {
            window: 5,
            margin: 0.1,
            hits: 2,
            min_flow: 0.5,
            sparse: true,
            max_corners: 500,
            corner_min_response: CornerParams::default().min_response,
        }
    }
}

impl BusynessParams {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.hits == 0 {
            return Err(Error::Config("busyness.window and busyness.hits must be at least 1".into()));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::Config("busyness.margin must be non-negative".into()));
        }
        if !(self.min_flow >= 0.0) {
            return Err(Error::Config("busyness.min_flow must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusynessGeometry {
    pub width: usize,
    pub height: usize,
    pub block: usize,
    pub cols: usize,
    pub rows: usize,
}

impl BusynessGeometry {
    pub fn for_frame(width: usize, height: usize) -> Self {
        BusynessGeometry {
            width,
            height,
            block: BLOCK,
            cols: width.div_ceil(BLOCK),
            rows: height.div_ceil(BLOCK),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusynessMatrix {
    pub geometry: BusynessGeometry,
    pub bins: usize,
    /// Row-major blocks, `bins` values each.
    pub data: Vec<f64>,
}

impl BusynessMatrix {
    pub fn zeros(geometry: BusynessGeometry, bins: usize) -> Self {
        BusynessMatrix { geometry, bins, data: vec![0.0; geometry.cols * geometry.rows * bins] }
    }

    pub fn get(&self, col: usize, row: usize, bin: usize) -> f64 {
        self.data[(row * self.geometry.cols + col) * self.bins + bin]
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: BusynessMatrix = serde_json::from_str(text).map_err(|e| Error::json("busyness matrix", e))?;
        let g = m.geometry;
        if g.block != BLOCK || g.cols != g.width.div_ceil(BLOCK) || g.rows != g.height.div_ceil(BLOCK) {
            return Err(Error::Geometry(format!("busyness matrix geometry {g:?} is inconsistent")));
        }
        if m.data.len() != g.cols * g.rows * m.bins {
            return Err(Error::Geometry(format!(
                "busyness matrix has {} values, expected {}",
                m.data.len(),
                g.cols * g.rows * m.bins
            )));
        }
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::json("busyness matrix", e))
    }

    fn absorb(&mut self, feature: &[f64]) {
        for (m, f) in self.data.iter_mut().zip(feature) {
            *m = m.max(*f);
        }
    }
}

/// Sliding sums of `window` consecutive histograms.
#[derive(Debug)]
struct FeatureWindow {
    window: usize,
    queue: VecDeque<BlockFlowHistogram>,
    sum: Vec<f64>,
}

impl FeatureWindow {
    fn new(window: usize) -> Self {
        FeatureWindow { window, queue: VecDeque::new(), sum: Vec::new() }
    }

    fn push(&mut self, h: BlockFlowHistogram) -> Option<&[f64]> {
        if self.sum.is_empty() {
            self.sum = vec![0.0; h.data.len()];
        }
        if self.queue.len() == self.window {
            self.queue.pop_front();
        }
        self.queue.push_back(h);
        if self.queue.len() < self.window {
            return None;
        }
        // Summed afresh so the result never drifts with stream length.
        self.sum.iter_mut().for_each(|s| *s = 0.0);
        for q in &self.queue {
            for (s, v) in self.sum.iter_mut().zip(&q.data) {
                *s += v;
            }
        }
        Some(&self.sum)
    }
}

/// Element-wise maximum of every `window`-frame sum of `histograms`.
pub fn busyness_from_histograms(
    histograms: impl IntoIterator<Item = BlockFlowHistogram>,
    geometry: BusynessGeometry,
    window: usize,
) -> Result<BusynessMatrix> {
    let mut matrix: Option<BusynessMatrix> = None;
    let mut fw = FeatureWindow::new(window);
    let mut seen = 0;
    for h in histograms {
        if (h.cols, h.rows) != (geometry.cols, geometry.rows) {
            return Err(Error::Geometry("histogram grid does not match geometry".into()));
        }
        seen += 1;
        let bins = h.bins;
        let m = matrix.get_or_insert_with(|| BusynessMatrix::zeros(geometry, bins));
        if let Some(feature) = fw.push(h) {
            m.absorb(feature);
        }
    }
    if seen < window {
        return Err(Error::StreamTooShort { got: seen + 1, need: window + 1 });
    }
    Ok(matrix.expect("at least one histogram"))
}

fn pair_histogram(a: &Frame, b: &Frame, flow: &FlowParams, params: &BusynessParams) -> Result<BlockFlowHistogram> {
    let mut field = dense_flow(a, b, flow)?;
    for (u, v) in field.u.iter_mut().zip(field.v.iter_mut()) {
        if u.hypot(*v) < params.min_flow {
            (*u, *v) = (0.0, 0.0);
        }
    }
    if params.sparse {
        let corner = CornerParams { min_response: params.corner_min_response, ..CornerParams::default() };
        let pts = corner_features_with(a, params.max_corners, &corner)?;
        Ok(block_histograms(&field, Some(&pts), flow.bins))
    } else {
        Ok(block_histograms(&field, None, flow.bins))
    }
}

/// Per-transition block histograms of a stream, in order. Also returns the
/// frame size.
pub fn frame_histograms<I>(frames: I, flow: &FlowParams, params: &BusynessParams) -> Result<(BusynessGeometry, Vec<BlockFlowHistogram>)>
where
    I: IntoIterator<Item = Result<Frame>>,
{
    flow.validate()?;
    params.validate()?;
    let mut out = Vec::new();
    let mut geometry = None;
    let mut batch: Vec<Frame> = Vec::new();
    let flush = |batch: &mut Vec<Frame>, out: &mut Vec<BlockFlowHistogram>| -> Result<()> {
        let idx: Vec<usize> = (1..batch.len()).collect();
        let run = |&i: &usize| pair_histogram(&batch[i - 1], &batch[i], flow, params);
        #[cfg(feature = "parallel")]
        let hs: Vec<Result<BlockFlowHistogram>> = idx.par_iter().map(run).collect();
        #[cfg(not(feature = "parallel"))]
        let hs: Vec<Result<BlockFlowHistogram>> = idx.iter().map(run).collect();
        for h in hs {
            out.push(h?);
        }
        let last = batch.pop();
        batch.clear();
        batch.extend(last);
        Ok(())
    };
    for frame in frames {
        let frame = frame?;
        let luma = if frame.channels() == 1 { frame } else { to_luma(&frame) };
        let g = *geometry.get_or_insert(BusynessGeometry::for_frame(luma.width(), luma.height()));
        if (g.width, g.height) != (luma.width(), luma.height()) {
            return Err(Error::Geometry(format!(
                "frame {} is {}x{}, stream is {}x{}",
                luma.index(),
                luma.width(),
                luma.height(),
                g.width,
                g.height
            )));
        }
        batch.push(luma);
        if batch.len() > BATCH {
            flush(&mut batch, &mut out)?;
        }
    }
    if batch.len() > 1 {
        flush(&mut batch, &mut out)?;
    }
    let geometry = geometry.ok_or_else(|| Error::StreamTooShort { got: 0, need: params.window + 1 })?;
    Ok((geometry, out))
}

/// Learns the normal-motion matrix from a training stream.
pub fn busyness_train<I>(frames: I, flow: &FlowParams, params: &BusynessParams) -> Result<BusynessMatrix>
where
    I: IntoIterator<Item = Result<Frame>>,
{
    let (geometry, hs) = frame_histograms(frames, flow, params)?;
    busyness_from_histograms(hs, geometry, params.window)
}

/// Streaming test against a learned matrix. Feature `i` sums transitions
/// `i..i+window`, i.e. frames `i..=i+window`.
#[derive(Debug)]
pub struct BusynessTester<'m> {
    matrix: &'m BusynessMatrix,
    params: BusynessParams,
    fw: FeatureWindow,
    runs: Vec<Persistence>,
    next_transition: u64,
}

impl<'m> BusynessTester<'m> {
    pub fn new(matrix: &'m BusynessMatrix, params: BusynessParams) -> Result<Self> {
        params.validate()?;
        let blocks = matrix.geometry.cols * matrix.geometry.rows;
        Ok(BusynessTester {
            matrix,
            params,
            fw: FeatureWindow::new(params.window),
            runs: vec![Persistence::default(); blocks],
            next_transition: 0,
        })
    }

    pub fn push(&mut self, h: BlockFlowHistogram) -> Result<Vec<AlarmEvent>> {
        let g = self.matrix.geometry;
        if (h.cols, h.rows, h.bins) != (g.cols, g.rows, self.matrix.bins) {
            return Err(Error::Geometry(format!(
                "test histogram {}x{}x{} does not match matrix {}x{}x{}",
                h.cols, h.rows, h.bins, g.cols, g.rows, self.matrix.bins
            )));
        }
        let t = self.next_transition;
        self.next_transition += 1;
        let bins = self.matrix.bins;
        let Some(feature) = self.fw.push(h) else { return Ok(Vec::new()) };
        let first = t + 1 - self.params.window as u64;
        let mut events = Vec::new();
        for (b, run) in self.runs.iter_mut().enumerate() {
            let f = &feature[b * bins..(b + 1) * bins];
            let m = &self.matrix.data[b * bins..(b + 1) * bins];
            let excess = f
                .iter()
                .zip(m)
                .filter(|(f, m)| **f > **m * (1.0 + self.params.margin))
                .map(|(f, m)| f - m)
                .fold(0.0, f64::max);
            if let Some(start) = run.update(excess > 0.0, first, self.params.hits) {
                events.push(AlarmEvent {
                    kind: AlarmKind::Anomaly,
                    start_frame: start,
                    end_frame: t + 1,
                    score: excess,
                    detail: AlarmDetail::Block { col: b % g.cols, row: b / g.cols },
                });
            }
        }
        Ok(events)
    }
}

/// Tests a stream against `matrix`, reporting blocks whose motion exceeds
/// the learned maxima.
pub fn busyness_test<I>(frames: I, matrix: &BusynessMatrix, flow: &FlowParams, params: &BusynessParams) -> Result<Vec<AlarmEvent>>
where
    I: IntoIterator<Item = Result<Frame>>,
{
    let (geometry, hs) = frame_histograms(frames, flow, params)?;
    if (geometry.width, geometry.height) != (matrix.geometry.width, matrix.geometry.height) || flow.bins != matrix.bins {
        return Err(Error::Geometry(format!(
            "stream {}x{} with {} bins does not match matrix {}x{} with {} bins",
            geometry.width, geometry.height, flow.bins, matrix.geometry.width, matrix.geometry.height, matrix.bins
        )));
    }
    let mut tester = BusynessTester::new(matrix, *params)?;
    let mut events = Vec::new();
    for h in hs {
        events.extend(tester.push(h)?);
    }
    Ok(events)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::FlowField;

    fn hist_with(g: BusynessGeometry, col: usize, row: usize, u: f64, v: f64) -> BlockFlowHistogram {
        let mut f = FlowField::zeros(g.width, g.height);
        f.set(col * BLOCK, row * BLOCK, u, v);
        block_histograms(&f, None, 9)
    }

    #[test]
    fn zero_motion_trains_zero_matrix() {
        let g = BusynessGeometry::for_frame(32, 16);
        let hs = (0..8).map(|_| BlockFlowHistogram::for_frame(32, 16, 9));
        let m = busyness_from_histograms(hs, g, 5).unwrap();
        assert!(m.data.iter().all(|&x| x == 0.0));
        assert_eq!(m.data.len(), 4 * 2 * 9);
    }

    #[test]
    fn constant_flow_sums_over_the_window() {
        let g = BusynessGeometry::for_frame(32, 16);
        let m = busyness_from_histograms((0..9).map(|_| hist_with(g, 2, 1, 1.5, 0.0)), g, 5).unwrap();
        assert_eq!(m.get(2, 1, 0), 5.0 * 1.5);
        assert_eq!(m.data.iter().filter(|&&x| x != 0.0).count(), 1);
    }

    #[test]
    fn training_twice_is_idempotent() {
        let g = BusynessGeometry::for_frame(32, 16);
        let hs: Vec<BlockFlowHistogram> = (0..12).map(|i| hist_with(g, i % 4, i % 2, i as f64, 1.0)).collect();
        let a = busyness_from_histograms(hs.clone(), g, 5).unwrap();
        let b = busyness_from_histograms(hs.iter().chain(&hs).cloned(), g, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn short_training_stream_errors() {
        let g = BusynessGeometry::for_frame(16, 16);
        let hs = (0..4).map(|_| BlockFlowHistogram::for_frame(16, 16, 9));
        assert!(matches!(busyness_from_histograms(hs, g, 5), Err(Error::StreamTooShort { .. })));
    }

    fn test_events(m: &BusynessMatrix, hs: &[BlockFlowHistogram], params: BusynessParams) -> Vec<AlarmEvent> {
        let mut t = BusynessTester::new(m, params).unwrap();
        hs.iter().flat_map(|h| t.push(h.clone()).unwrap()).collect()
    }

    #[test]
    fn opposite_motion_alarms_at_its_block() {
        let g = BusynessGeometry::for_frame(32, 16);
        let train: Vec<_> = (0..10).map(|_| hist_with(g, 1, 0, 2.0, 0.0)).collect();
        let m = busyness_from_histograms(train, g, 5).unwrap();
        let test: Vec<_> = (0..10).map(|_| hist_with(g, 1, 0, -0.5, 0.0)).collect();
        let events = test_events(&m, &test, BusynessParams::default());
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].detail, AlarmDetail::Block { col: 1, row: 0 });
    }

    #[test]
    fn doubled_speed_alarms_and_same_speed_does_not() {
        let g = BusynessGeometry::for_frame(32, 16);
        let train: Vec<_> = (0..10).map(|_| hist_with(g, 0, 1, 1.0, 0.0)).collect();
        let m = busyness_from_histograms(train.clone(), g, 5).unwrap();
        assert!(test_events(&m, &train, BusynessParams::default()).is_empty());
        let fast: Vec<_> = (0..10).map(|_| hist_with(g, 0, 1, 2.0, 0.0)).collect();
        assert_eq!(test_events(&m, &fast, BusynessParams::default()).len(), 1);
    }

    #[test]
    fn mismatched_geometry_errors() {
        let m = BusynessMatrix::zeros(BusynessGeometry::for_frame(32, 16), 9);
        let mut t = BusynessTester::new(&m, BusynessParams::default()).unwrap();
        assert!(t.push(BlockFlowHistogram::for_frame(40, 16, 9)).is_err());
        let bad = r#"{"geometry":{"width":32,"height":16,"block":8,"cols":4,"rows":2},"bins":9,"data":[0.0]}"#;
        assert!(BusynessMatrix::from_json(bad).is_err());
        let good = m.to_json().unwrap();
        assert_eq!(BusynessMatrix::from_json(&good).unwrap(), m);
    }

    mod props {
        use proptest::prelude::*;

        use super::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn own_training_stream_never_alarms(
                flows in proptest::collection::vec((0usize..4, 0usize..2, -3.0f64..3.0, -3.0f64..3.0), 6..40),
                margin in 0.0f64..0.5,
            ) {
                let g = BusynessGeometry::for_frame(32, 16);
                let hs: Vec<_> = flows.iter().map(|&(c, r, u, v)| hist_with(g, c, r, u, v)).collect();
                let m = busyness_from_histograms(hs.clone(), g, 5).unwrap();
                let params = BusynessParams { margin, ..Default::default() };
                prop_assert!(test_events(&m, &hs, params).is_empty());
            }
        }
    }
}
