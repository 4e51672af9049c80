use serde::{Deserialize, Serialize};

use crate::bgmodel::{BackgroundModel, BgParams, LabelMask};
use crate::error::{Error, Result};
use crate::regions::{clean_mask, enclosed_fraction, RegionParams};
use crate::video_io::Frame;

use super::{AlarmDetail, AlarmEvent, AlarmKind, Persistence};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TamperParams {
    /// Foreground share of the frame above which a frame counts as covered.
    pub tau: f64,
    pub persistence: usize,
}

impl Default for TamperParams {
    fn default() -> Self {
        TamperParams { tau: 0.6, persistence: 3 }
    }
}

impl TamperParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tamper.tau must be in [0, 1), got {}", self.tau)));
        }
        if self.persistence == 0 {
            return Err(Error::Config("tamper.persistence must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CameraTamperMonitor {
    params: TamperParams,
    run: Persistence,
    peak: f64,
}

impl CameraTamperMonitor {
    pub fn new(params: TamperParams) -> Result<Self> {
        params.validate()?;
        Ok(CameraTamperMonitor { params, run: Persistence::default(), peak: 0.0 })
    }

    /// Feeds one frame's labels; returns an alarm on the frame where the
    /// covered run reaches `persistence`.
    pub fn step(&mut self, mask: &LabelMask, frame_index: u64) -> Option<AlarmEvent> {
        let ratio = enclosed_fraction(&mask.foreground());
        self.step_ratio(ratio, frame_index)
    }

    pub fn step_ratio(&mut self, ratio: f64, frame_index: u64) -> Option<AlarmEvent> {
        let hit = ratio > self.params.tau;
        self.peak = if hit { self.peak.max(ratio) } else { 0.0 };
        let start = self.run.update(hit, frame_index, self.params.persistence)?;
        Some(AlarmEvent {
            kind: AlarmKind::CameraTamper,
            start_frame: start,
            end_frame: frame_index,
            score: self.peak,
            detail: AlarmDetail::Ratio { ratio: self.peak },
        })
    }
}

/// Runs background subtraction and the tamper monitor over a stream.
pub fn camera_monitor<I>(frames: I, bg: &BgParams, regions: &RegionParams, params: &TamperParams) -> Result<Vec<AlarmEvent>>
where
    I: IntoIterator<Item = Result<Frame>>,
{
    let mut monitor = CameraTamperMonitor::new(*params)?;
    let mut model: Option<BackgroundModel> = None;
    let mut events = Vec::new();
    for frame in frames {
        let frame = frame?;
        let model = match &mut model {
            Some(m) => m,
            slot => slot.insert(BackgroundModel::for_frame(*bg, &frame)?),
        };
        let labels = model.apply(&frame)?;
        let ratio = enclosed_fraction(&clean_mask(&labels.foreground(), regions));
        events.extend(monitor.step_ratio(ratio, frame.index()));
    }
    Ok(events)
}
