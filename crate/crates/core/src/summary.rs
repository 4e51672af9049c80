use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What a command did and how fast.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub subcommand: String,
    pub input: PathBuf,
    pub frames: u64,
    pub seconds: f64,
    /// Input frames per wall-clock second.
    pub fps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_reduction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alarms: Option<usize>,
    pub outputs: Vec<PathBuf>,
}

impl RunSummary {
    pub fn new(subcommand: &str, input: impl Into<PathBuf>, frames: u64, seconds: f64) -> Self {
        RunSummary {
            subcommand: subcommand.to_string(),
            input: input.into(),
            frames,
            seconds,
            fps: throughput(frames, seconds),
            frame_reduction: None,
            alarms: None,
            outputs: Vec::new(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::json("run summary", e))
    }
}

/// `frames / seconds`; zero when no time was measured.
pub fn throughput(frames: u64, seconds: f64) -> f64 {
    if seconds > 0.0 {
        frames as f64 / seconds
    } else {
        0.0
    }
}

impl fmt::Display for RunSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {} frames in {:.2} s, FPS {:.1}",
            self.subcommand, self.frames, self.seconds, self.fps
        )?;
        if let Some(fr) = self.frame_reduction {
            write!(f, ", FR {fr:.3}")?;
        }
        if let Some(n) = self.alarms {
            write!(f, ", {n} alarms")?;
        }
        Ok(())
    }
}
