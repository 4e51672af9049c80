use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bgmodel::BgParams;
use crate::error::{Error, Result};
use crate::eval::DEFAULT_IOU_THRESHOLD;
use crate::flow::FlowParams;
use crate::forensics::{BusynessParams, ForgeryParams, TamperParams, TrespassParams};
use crate::regions::RegionParams;
use crate::synopsis::SynopsisConfig;
use crate::tracker::TrackerParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalParams {
    pub iou_threshold: f64,
}

impl Default for EvalParams {
    fn default() -> Self {
        EvalParams { iou_threshold: DEFAULT_IOU_THRESHOLD }
    }
}

/// Every tunable, grouped by stage. Missing keys take their defaults;
/// unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub bg: BgParams,
    pub regions: RegionParams,
    pub track: TrackerParams,
    pub synopsis: SynopsisConfig,
    pub flow: FlowParams,
    pub forgery: ForgeryParams,
    pub tamper: TamperParams,
    pub busyness: BusynessParams,
    pub trespass: TrespassParams,
    pub eval: EvalParams,
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Config = serde_json::from_str(text).map_err(|e| Error::json("config", e))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::json("config", e))
    }

    pub fn validate(&self) -> Result<()> {
        self.synopsis_config().validate()?;
        self.flow.validate()?;
        self.forgery.validate()?;
        self.tamper.validate()?;
        self.busyness.validate()?;
        self.trespass.validate()?;
        if !(self.eval.iou_threshold > 0.0 && self.eval.iou_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "eval.iou_threshold must be in (0, 1], got {}",
                self.eval.iou_threshold
            )));
        }
        Ok(())
    }

    /// The synopsis settings with the detection stages filled in.
    pub fn synopsis_config(&self) -> SynopsisConfig {
        SynopsisConfig { bg: self.bg, regions: self.regions, track: self.track, ..self.synopsis }
    }
}
