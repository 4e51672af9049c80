//! Tamper and anomaly monitors: frame deletion/duplication, covered
//! camera, unusual motion, and intrusion into marked zones.

mod busyness;
mod forgery;
mod tamper;
mod trespass;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use busyness::{
    busyness_from_histograms, busyness_test, busyness_train, frame_histograms, BusynessGeometry, BusynessMatrix,
    BusynessParams, BusynessTester,
};
pub use forgery::{
    forgery_scan, mean_abs_diff, robust_outliers, scan_sequence, variation_sequence, ForgeryParams, VariationSequence,
};
pub use tamper::{camera_monitor, CameraTamperMonitor, TamperParams};
pub use trespass::{point_in_polygon, trespass_monitor, Polygon, PolygonId, TrespassMonitor, TrespassParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AlarmKind {
    Forgery,
    CameraTamper,
    Anomaly,
    Trespass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AlarmDetail {
    /// Outlier in a per-transition series.
    ZScore { series: String, z: f64 },
    /// A frame run that repeats: `copy_start` replays `source_start`.
    Duplicate { method: String, source_start: u64, copy_start: u64, len: u64 },
    Ratio { ratio: f64 },
    Block { col: usize, row: usize },
    Polygon { id: PolygonId, fraction: f64 },
}

/// One alarm over the inclusive frame range `start_frame..=end_frame`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlarmEvent {
    pub kind: AlarmKind,
    pub start_frame: u64,
    pub end_frame: u64,
    pub score: f64,
    pub detail: AlarmDetail,
}

impl AlarmEvent {
    pub fn covers(&self, frame: u64) -> bool {
        (self.start_frame..=self.end_frame).contains(&frame)
    }
}

/// Writes one JSON object per line.
pub fn write_events(out: &mut impl Write, events: &[AlarmEvent]) -> Result<()> {
    for e in events {
        let line = serde_json::to_string(e).map_err(|err| Error::json("alarm", err))?;
        writeln!(out, "{line}").map_err(|err| Error::io("<alarm output>", err))?;
    }
    Ok(())
}

pub fn read_events(text: &str) -> Result<Vec<AlarmEvent>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::json("alarm", e)))
        .collect()
}

/// Counts consecutive hits and fires once per run, when it reaches
/// `persistence`.
#[derive(Debug, Clone, Default)]
pub(crate) struct Persistence {
    run: usize,
    start: u64,
}

impl Persistence {
    /// Returns the run's first frame when this hit completes the run.
    pub(crate) fn update(&mut self, hit: bool, frame: u64, persistence: usize) -> Option<u64> {
        if !hit {
            self.run = 0;
            return None;
        }
        if self.run == 0 {
            self.start = frame;
        }
        self.run += 1;
        (self.run == persistence).then_some(self.start)
    }
}
