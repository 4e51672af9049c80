//! Online tube rearrangement.
//!
//! Finished tubes queue up in object-id order. The scheduler keeps a cluster
//! of at most `cluster_size` of them; every synopsis frame it walks the
//! cluster from the oldest tube to the newest and places each tube's next
//! object frame unless its box collides with one already placed in that
//! frame. Placed frames keep their original position. Exhausted tubes leave
//! and the cluster is topped up from the queue.

mod pipeline;
mod render;

use std::collections::VecDeque;
use std::sync::Arc;

pub use pipeline::{
    run_synopsis, Execution, ManifestSummary, PlacementRecord, SynopsisConfig, SynopsisFrameRecord, SynopsisManifest,
    SynopsisRun,
};
pub use render::{draw_text, format_clock, render_synopsis_frame, text_width, GLYPH_HEIGHT};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::tracker::{ObjectFrame, Tube};

/// `tsv / tov`.
pub fn frame_reduction(tsv: u64, tov: u64) -> Result<f64> {
    if tov == 0 {
        return Err(Error::EmptyOriginal);
    }
    Ok(tsv as f64 / tov as f64)
}

/// One object frame scheduled into one synopsis frame.
#[derive(Debug, Clone)]
pub struct Placement {
    pub object_id: u32,
    pub tube: Arc<Tube>,
    /// Position of the source object frame inside its tube.
    pub frame_pos: usize,
    pub bbox: BBox,
    pub synopsis_frame_index: u64,
    pub label_text: String,
}

impl Placement {
    pub fn source(&self) -> &ObjectFrame {
        &self.tube.frames[self.frame_pos]
    }

    pub fn original_frame_index(&self) -> u64 {
        self.source().original_frame_index
    }
}

/// Positive-area overlap of the two boxes.
pub fn collides(a: &Placement, b: &Placement) -> bool {
    a.bbox.intersects(&b.bbox)
}

/// What the scheduler tried for one cluster member during a step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Attempt {
    pub object_id: u32,
    pub frame_pos: usize,
    pub bbox: BBox,
    pub placed: bool,
}

#[derive(Debug, Clone)]
struct ActiveTube {
    tube: Arc<Tube>,
    cursor: usize,
}

#[derive(Debug, Clone)]
pub struct SchedulerState {
    cluster_size: usize,
    cluster: Vec<ActiveTube>,
    pending: VecDeque<Arc<Tube>>,
    synopsis_frame_index: u64,
}

impl SchedulerState {
    pub fn new(cluster_size: usize) -> Result<Self> {
        if cluster_size == 0 {
            return Err(Error::Config("cluster size must be at least 1".into()));
        }
        Ok(SchedulerState {
            cluster_size,
            cluster: Vec::new(),
            pending: VecDeque::new(),
            synopsis_frame_index: 0,
        })
    }

    pub fn cluster_size(&self) -> usize {
        self.cluster_size
    }

    /// Queues a finished tube. Tubes must arrive in ascending object id.
    pub fn push(&mut self, tube: impl Into<Arc<Tube>>) {
        let tube = tube.into();
        if tube.is_empty() {
            return;
        }
        debug_assert!(
            self.pending
                .back()
                .or(self.cluster.last().map(|a| &a.tube))
                .is_none_or(|last| last.object_id < tube.object_id),
            "tubes must be queued in ascending object id"
        );
        self.pending.push_back(tube);
    }

    /// Moves queued tubes into the cluster until it is full.
    pub fn refill(&mut self) {
        while self.cluster.len() < self.cluster_size {
            let Some(tube) = self.pending.pop_front() else { break };
            self.cluster.push(ActiveTube { tube, cursor: 0 });
        }
    }

    /// True once the cluster holds `cluster_size` tubes after a refill.
    pub fn is_full(&mut self) -> bool {
        self.refill();
        self.cluster.len() == self.cluster_size
    }

    pub fn is_idle(&self) -> bool {
        self.cluster.is_empty() && self.pending.is_empty()
    }

    pub fn next_frame_index(&self) -> u64 {
        self.synopsis_frame_index
    }

    pub fn cluster_ids(&self) -> Vec<u32> {
        self.cluster.iter().map(|a| a.tube.object_id).collect()
    }

    pub fn cursors(&self) -> Vec<(u32, usize)> {
        self.cluster.iter().map(|a| (a.tube.object_id, a.cursor)).collect()
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    /// Smallest original frame index not yet placed among known tubes.
    pub fn earliest_unplaced_frame(&self) -> Option<u64> {
        let active = self
            .cluster
            .iter()
            .map(|a| a.tube.frames[a.cursor].original_frame_index);
        let queued = self.pending.iter().map(|t| t.start_frame());
        active.chain(queued).min()
    }

    /// Assembles one synopsis frame.
    pub fn step(&mut self) -> Vec<Placement> {
        self.step_detailed().0
    }

    /// Like [`step`](Self::step), also reporting every attempt in priority
    /// order.
    pub fn step_detailed(&mut self) -> (Vec<Placement>, Vec<Attempt>) {
        self.refill();
        if self.cluster.is_empty() {
            return (Vec::new(), Vec::new());
        }
        let index = self.synopsis_frame_index;
        let mut placed: Vec<Placement> = Vec::new();
        let mut attempts = Vec::with_capacity(self.cluster.len());
        for active in &mut self.cluster {
            let source = &active.tube.frames[active.cursor];
            let bbox = source.bbox;
            let free = placed.iter().all(|p| !p.bbox.intersects(&bbox));
            attempts.push(Attempt {
                object_id: active.tube.object_id,
                frame_pos: active.cursor,
                bbox,
                placed: free,
            });
            if free {
                placed.push(Placement {
                    object_id: active.tube.object_id,
                    tube: Arc::clone(&active.tube),
                    frame_pos: active.cursor,
                    bbox,
                    synopsis_frame_index: index,
                    label_text: format_clock(source.original_timestamp_ms),
                });
                active.cursor += 1;
            }
        }
        self.cluster.retain(|a| a.cursor < a.tube.len());
        self.refill();
        self.synopsis_frame_index += 1;
        (placed, attempts)
    }
}

/// Free-function form of [`SchedulerState::step`].
pub fn scheduler_step(state: &mut SchedulerState) -> Vec<Placement> {
    state.step()
}

/// Runs the scheduler to completion over `tubes`.
pub fn schedule_all(tubes: impl IntoIterator<Item = Tube>, cluster_size: usize) -> Result<Vec<Vec<Placement>>> {
    let mut state = SchedulerState::new(cluster_size)?;
    for tube in tubes {
        state.push(tube);
    }
    let mut frames = Vec::new();
    while !state.is_idle() {
        frames.push(state.step());
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tube(id: u32, boxes: &[BBox]) -> Tube {
        Tube {
            object_id: id,
            frames: boxes
                .iter()
                .enumerate()
                .map(|(i, &bbox)| ObjectFrame {
                    original_frame_index: 100 * id as u64 + i as u64,
                    original_timestamp_ms: 1000 * id as u64,
                    bbox,
                    image_patch: vec![id as u8; bbox.area()],
                    mask_patch: vec![1; bbox.area()],
                    predicted: false,
                })
                .collect(),
            start_timestamp_ms: 1000 * id as u64,
        }
    }

    fn placement(b: BBox) -> Placement {
        let t = Arc::new(tube(1, &[b]));
        Placement {
            object_id: 1,
            tube: t,
            frame_pos: 0,
            bbox: b,
            synopsis_frame_index: 0,
            label_text: String::new(),
        }
    }

    #[test]
    fn collision_is_positive_area_overlap() {
        let a = placement(BBox::new(0, 0, 10, 10));
        assert!(collides(&a, &placement(BBox::new(5, 5, 10, 10))));
        assert!(!collides(&a, &placement(BBox::new(10, 0, 10, 10))));
        assert!(collides(&a, &a.clone()));
    }

    #[test]
    fn disjoint_tubes_pack_into_two_frames() {
        let tubes = (1..=3).map(|id| {
            let b = BBox::new(20 * id as usize, 0, 10, 10);
            tube(id, &[b, b])
        });
        let frames = schedule_all(tubes, 3).unwrap();
        assert_eq!(frames.len(), 2);
        assert!(frames.iter().all(|f| f.len() == 3));
    }

    #[test]
    fn identical_boxes_stall_the_later_tube() {
        let b = BBox::new(5, 5, 10, 10);
        let l = 4;
        let frames = schedule_all([tube(1, &vec![b; l]), tube(2, &vec![b; l])], 2).unwrap();
        assert_eq!(frames.len(), 2 * l);
        for (i, f) in frames.iter().enumerate() {
            assert_eq!(f.len(), 1);
            assert_eq!(f[0].object_id, if i < l { 1 } else { 2 });
        }
    }

    #[test]
    fn empty_scheduler_terminates() {
        let mut s = SchedulerState::new(4).unwrap();
        assert!(s.step().is_empty());
        assert!(s.is_idle());
        assert_eq!(s.next_frame_index(), 0);
        assert!(SchedulerState::new(0).is_err());
    }

    #[test]
    fn cluster_refills_in_fifo_order() {
        let b = |x| BBox::new(x, 0, 5, 5);
        let mut s = SchedulerState::new(2).unwrap();
        s.push(tube(1, &[b(0)]));
        s.push(tube(2, &[b(10), b(10)]));
        s.push(tube(3, &[b(20)]));
        s.refill();
        assert_eq!(s.cluster_ids(), vec![1, 2]);
        s.step();
        assert_eq!(s.cluster_ids(), vec![2, 3]);
        assert_eq!(s.cursors(), vec![(2, 1), (3, 0)]);
    }

    #[test]
    fn frame_reduction_ratio() {
        assert!((frame_reduction(12906, 70195).unwrap() - 0.18386).abs() < 1e-5);
        assert_eq!(frame_reduction(0, 1000).unwrap(), 0.0);
        assert_eq!(frame_reduction(1000, 1000).unwrap(), 1.0);
        assert!(frame_reduction(3, 0).is_err());
    }
}
