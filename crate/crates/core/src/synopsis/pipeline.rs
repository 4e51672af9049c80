//! End-to-end synopsis: background model → regions → tracker on a producer,
//! scheduler → renderer on the consumer, joined by an ordered bounded queue.
//!
//! The scheduler only assembles a frame when its cluster is full or the
//! producer has finished, so its decisions depend on the tube sequence alone
//! and concurrent runs reproduce sequential runs exactly.

use std::collections::BTreeMap;
use std::sync::mpsc;
use std::sync::Arc;

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bgmodel::{BackgroundModel, BgParams};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::regions::{clean_mask, extract_regions, RegionParams};
use crate::tracker::{Tracker, TrackerParams, Tube};
use crate::video_io::{Frame, StreamMeta};

use super::{frame_reduction, render_synopsis_frame, Placement, SchedulerState};

const QUEUE_DEPTH: usize = 64;
const RENDER_BATCH: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynopsisConfig {
    pub cluster_size: usize,
    /// Original frames between stored background snapshots.
    pub bg_snapshot_interval: u64,
    #[serde(skip)]
    pub bg: BgParams,
    #[serde(skip)]
    pub regions: RegionParams,
    #[serde(skip)]
    pub track: TrackerParams,
}

impl Default for SynopsisConfig {
    fn default() -> Self {
        SynopsisConfig {
            cluster_size: 15,
            bg_snapshot_interval: 100,
            bg: BgParams::default(),
            regions: RegionParams::default(),
            track: TrackerParams::default(),
        }
    }
}

impl SynopsisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cluster_size == 0 {
            return Err(Error::Config("synopsis.cluster_size must be at least 1".into()));
        }
        if self.bg_snapshot_interval == 0 {
            return Err(Error::Config("synopsis.bg_snapshot_interval must be at least 1".into()));
        }
        self.bg.validate()?;
        self.regions.validate()?;
        self.track.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    #[default]
    Concurrent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementRecord {
    pub object_id: u32,
    pub orig_frame: u64,
    pub t_orig_ms: u64,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynopsisFrameRecord {
    pub index: u64,
    /// Original frame index of the background snapshot used.
    pub background: u64,
    pub placements: Vec<PlacementRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSummary {
    pub tov: u64,
    pub tsv: u64,
    pub fr: f64,
    pub cs: usize,
    pub tubes: usize,
    pub build_seconds: f64,
    pub fps_build: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynopsisManifest {
    pub summary: ManifestSummary,
    pub frames: Vec<SynopsisFrameRecord>,
}

impl SynopsisManifest {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::json("manifest", e))
    }

    /// The manifest with wall-clock fields zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> SynopsisManifest {
        let mut m = self.clone();
        m.summary.build_seconds = 0.0;
        m.summary.fps_build = 0.0;
        m
    }

    /// Every `(object_id, orig_frame)` pair placed, in manifest order.
    pub fn placed_object_frames(&self) -> impl Iterator<Item = (u32, u64)> + '_ {
        self.frames
            .iter()
            .flat_map(|f| f.placements.iter().map(|p| (p.object_id, p.orig_frame)))
    }
}

/// Result of a synopsis run: the manifest plus the tubes that were scheduled.
#[derive(Debug, Clone)]
pub struct SynopsisRun {
    pub manifest: SynopsisManifest,
    pub tubes: Vec<Arc<Tube>>,
}

enum Msg {
    Snapshot(u64, Arc<Frame>),
    Tube(Tube),
    Done(u64),
}

struct Producer {
    config: SynopsisConfig,
    fps: f64,
    model: Option<BackgroundModel>,
    tracker: Tracker,
    frames: u64,
}

impl Producer {
    fn new(config: SynopsisConfig, fps: f64) -> Result<Self> {
        Ok(Producer {
            config,
            fps,
            model: None,
            tracker: Tracker::new(config.track, fps)?,
            frames: 0,
        })
    }

    fn push(&mut self, frame: &Frame, out: &mut Vec<Msg>) -> Result<()> {
        let model = match &mut self.model {
            Some(m) => m,
            slot => slot.insert(BackgroundModel::for_frame(self.config.bg, frame)?),
        };
        let labels = model.apply(frame)?;
        if frame.index().is_multiple_of(self.config.bg_snapshot_interval) {
            let snap = model.snapshot()?.with_position(frame.index(), frame.timestamp_ms());
            out.push(Msg::Snapshot(frame.index(), Arc::new(snap)));
        }
        let mask = clean_mask(&labels.foreground(), &self.config.regions);
        let min_area = self.config.regions.min_area_px(frame.width(), frame.height());
        let detections = extract_regions(&mask, frame, min_area)?;
        out.extend(self.tracker.step(detections, frame)?.into_iter().map(Msg::Tube));
        self.frames += 1;
        let _ = self.fps;
        Ok(())
    }

    fn finish(&mut self, out: &mut Vec<Msg>) {
        out.extend(self.tracker.finish().into_iter().map(Msg::Tube));
        out.push(Msg::Done(self.frames));
    }
}

struct Assembler<'s> {
    config: SynopsisConfig,
    scheduler: SchedulerState,
    snapshots: BTreeMap<u64, Arc<Frame>>,
    last_tube_start: u64,
    records: Vec<SynopsisFrameRecord>,
    tubes: Vec<Arc<Tube>>,
    batch: Vec<(Vec<Placement>, Arc<Frame>)>,
    parallel_render: bool,
    sink: &'s mut dyn FnMut(Frame) -> Result<()>,
    tov: Option<u64>,
}

impl Assembler<'_> {
    fn handle(&mut self, msg: Msg) -> Result<()> {
        match msg {
            Msg::Snapshot(index, frame) => {
                self.snapshots.insert(index, frame);
            }
            Msg::Tube(tube) => {
                let tube = Arc::new(tube);
                self.last_tube_start = tube.start_frame();
                self.tubes.push(Arc::clone(&tube));
                self.scheduler.push(tube);
                while self.scheduler.is_full() {
                    self.step()?;
                }
            }
            Msg::Done(tov) => {
                self.tov = Some(tov);
                while !self.scheduler.is_idle() {
                    self.step()?;
                }
                self.flush()?;
            }
        }
        Ok(())
    }

    fn step(&mut self) -> Result<()> {
        let placements = self.scheduler.step();
        if placements.is_empty() {
            return Ok(());
        }
        let earliest = placements
            .iter()
            .map(|p| p.original_frame_index())
            .min()
            .expect("non-empty");
        let (&bg_index, background) = self
            .snapshots
            .range(..=earliest)
            .next_back()
            .ok_or_else(|| Error::Worker(format!("no background snapshot at or before frame {earliest}")))?;
        let background = Arc::clone(background);
        self.records.push(SynopsisFrameRecord {
            index: placements[0].synopsis_frame_index,
            background: bg_index,
            placements: placements
                .iter()
                .map(|p| PlacementRecord {
                    object_id: p.object_id,
                    orig_frame: p.original_frame_index(),
                    t_orig_ms: p.source().original_timestamp_ms,
                    bbox: p.bbox,
                })
                .collect(),
        });
        self.batch.push((placements, background));
        if self.batch.len() >= RENDER_BATCH {
            self.flush()?;
        }
        self.prune_snapshots();
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        let batch = std::mem::take(&mut self.batch);
        let rendered: Vec<Result<Frame>> = if self.parallel_render {
            #[cfg(feature = "parallel")]
            {
                batch.par_iter().map(|(p, bg)| render_synopsis_frame(p, bg)).collect()
            }
            #[cfg(not(feature = "parallel"))]
            {
                batch.iter().map(|(p, bg)| render_synopsis_frame(p, bg)).collect()
            }
        } else {
            batch.iter().map(|(p, bg)| render_synopsis_frame(p, bg)).collect()
        };
        for frame in rendered {
            (self.sink)(frame?)?;
        }
        Ok(())
    }

    // Snapshots older than anything still to be placed are never needed.
    // Tube start frames rise with object id, so tubes still to come start
    // no earlier than the last one received.
    fn prune_snapshots(&mut self) {
        let horizon = self
            .scheduler
            .earliest_unplaced_frame()
            .map_or(self.last_tube_start, |e| e.min(self.last_tube_start));
        let interval = self.config.bg_snapshot_interval;
        let keep_from = horizon / interval * interval;
        // Keep the newest snapshot at or before the horizon.
        if let Some((&k, _)) = self.snapshots.range(..=keep_from).next_back() {
            self.snapshots = self.snapshots.split_off(&k);
        }
    }
}

/// Runs the whole synopsis pipeline over `frames`, passing each rendered
/// synopsis frame to `sink` in order.
pub fn run_synopsis<I>(
    frames: I,
    meta: &StreamMeta,
    config: &SynopsisConfig,
    execution: Execution,
    mut sink: impl FnMut(Frame) -> Result<()>,
) -> Result<SynopsisRun>
where
    I: IntoIterator<Item = Result<Frame>>,
    I::IntoIter: Send,
{
    config.validate()?;
    if !(meta.fps > 0.0) {
        return Err(Error::MissingFps);
    }
    let clock = Clock::start();
    let mut producer = Producer::new(*config, meta.fps)?;
    let mut assembler = Assembler {
        config: *config,
        scheduler: SchedulerState::new(config.cluster_size)?,
        snapshots: BTreeMap::new(),
        last_tube_start: 0,
        records: Vec::new(),
        tubes: Vec::new(),
        batch: Vec::new(),
        parallel_render: execution == Execution::Concurrent,
        sink: &mut sink,
        tov: None,
    };

    match execution {
        Execution::Sequential => {
            let mut msgs = Vec::new();
            for frame in frames {
                producer.push(&frame?, &mut msgs)?;
                for msg in msgs.drain(..) {
                    assembler.handle(msg)?;
                }
            }
            producer.finish(&mut msgs);
            for msg in msgs.drain(..) {
                assembler.handle(msg)?;
            }
        }
        Execution::Concurrent => {
            let iter = frames.into_iter();
            std::thread::scope(|scope| -> Result<()> {
                let (tx, rx) = mpsc::sync_channel::<Result<Msg>>(QUEUE_DEPTH);
                let worker = scope.spawn(move || {
                    let mut msgs = Vec::new();
                    for frame in iter {
                        let pushed = frame.and_then(|f| producer.push(&f, &mut msgs));
                        if let Err(e) = pushed {
                            let _ = tx.send(Err(e));
                            return;
                        }
                        for msg in msgs.drain(..) {
                            if tx.send(Ok(msg)).is_err() {
                                return;
                            }
                        }
                    }
                    producer.finish(&mut msgs);
                    for msg in msgs.drain(..) {
                        if tx.send(Ok(msg)).is_err() {
                            return;
                        }
                    }
                });
                let mut outcome = Ok(());
                for msg in rx.iter() {
                    if let Err(e) = msg.and_then(|m| assembler.handle(m)) {
                        outcome = Err(e);
                        break;
                    }
                }
                drop(rx);
                worker
                    .join()
                    .map_err(|_| Error::Worker("tube producer panicked".into()))?;
                outcome
            })?;
        }
    }

    let tov = assembler
        .tov
        .ok_or_else(|| Error::Worker("producer stopped before the end of the stream".into()))?;
    let tsv = assembler.records.len() as u64;
    let fr = if tov == 0 { 0.0 } else { frame_reduction(tsv, tov)? };
    let build_seconds = clock.elapsed();
    let fps_build = crate::summary::throughput(tov, build_seconds);
    Ok(SynopsisRun {
        manifest: SynopsisManifest {
            summary: ManifestSummary {
                tov,
                tsv,
                fr,
                cs: config.cluster_size,
                tubes: assembler.tubes.len(),
                build_seconds,
                fps_build,
            },
            frames: assembler.records,
        },
        tubes: assembler.tubes,
    })
}

#[cfg(not(target_arch = "wasm32"))]
struct Clock(std::time::Instant);

#[cfg(not(target_arch = "wasm32"))]
impl Clock {
    fn start() -> Self {
        Clock(std::time::Instant::now())
    }
    fn elapsed(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

// No monotonic clock on bare wasm; timings read as zero there.
#[cfg(target_arch = "wasm32")]
struct Clock;

#[cfg(target_arch = "wasm32")]
impl Clock {
    fn start() -> Self {
        Clock
    }
    fn elapsed(&self) -> f64 {
        0.0
    }
}
