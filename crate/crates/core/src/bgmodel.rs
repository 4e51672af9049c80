//! Adaptive per-pixel Gaussian mixture background subtraction with shadow
//! labelling.
//!
//! Each pixel keeps up to `max_components` weighted Gaussians sharing one
//! variance across channels. A sample is background when it lies within
//! `var_threshold` squared Mahalanobis units of a component that belongs to
//! the dominant background set (the heaviest components whose cumulative
//! weight first exceeds [`BACKGROUND_RATIO`]). Components are re-estimated
//! with learning rate `1 / min(frames_seen, history)`, the recursive form of
//! a sliding window over the last `history` samples. Weights decay by a
//! small constant each update, so rarely used components vanish and the
//! number of components per pixel adapts on its own.

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::regions::BinaryMask;
use crate::video_io::Frame;

pub const VAR_INIT: f32 = 225.0;
pub const VAR_MIN: f32 = 4.0;
pub const VAR_MAX: f32 = 5.0 * VAR_INIT;
pub const BACKGROUND_RATIO: f32 = 0.9;
/// Weight decay per update (scaled by the learning rate).
pub const COMPLEXITY_REDUCTION: f32 = 0.05;
/// Maximum spread of per-channel brightness ratios for an RGB shadow.
pub const SHADOW_CHROMA_SPREAD: f32 = 0.12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BgParams {
    pub history: usize,
    pub var_threshold: f64,
    pub shadow_threshold: f64,
    pub max_components: usize,
}

impl Default for BgParams {
    fn default() -> Self {
        BgParams {
            history: 100,
            var_threshold: 25.0,
            shadow_threshold: 0.5,
            max_components: 5,
        }
    }
}

impl BgParams {
    pub fn validate(&self) -> Result<()> {
        if self.history == 0 {
            return Err(Error::Config("bg.history must be at least 1".into()));
        }
        if !(self.var_threshold > 0.0 && self.var_threshold.is_finite()) {
            return Err(Error::Config("bg.var_threshold must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.shadow_threshold) {
            return Err(Error::Config("bg.shadow_threshold must lie in [0, 1]".into()));
        }
        if !(1..=8).contains(&self.max_components) {
            return Err(Error::Config("bg.max_components must lie in 1..=8".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Label {
    Background = 0,
    Shadow = 1,
    Foreground = 2,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<Label>,
}

impl LabelMask {
    pub fn filled(width: usize, height: usize, label: Label) -> Self {
        LabelMask {
            width,
            height,
            labels: vec![label; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> Label {
        self.labels[y * self.width + x]
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Binary view with ones on FOREGROUND only; shadows are dropped.
    pub fn foreground(&self) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            data: self.labels.iter().map(|&l| (l == Label::Foreground) as u8).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
struct Mode {
    weight: f32,
    var: f32,
    mean: [f32; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundModel {
    params: BgParams,
    width: usize,
    height: usize,
    channels: usize,
    modes: Vec<Mode>,
    used: Vec<u8>,
    frames_seen: u64,
}

struct Step {
    alpha: f32,
    var_threshold: f32,
    shadow_threshold: f32,
    max_components: usize,
    channels: usize,
}

impl BackgroundModel {
    pub fn new(params: BgParams, width: usize, height: usize, channels: usize) -> Result<Self> {
        params.validate()?;
        if width == 0 || height == 0 || !(channels == 1 || channels == 3) {
            return Err(Error::Config(format!(
                "unsupported model geometry {width}x{height}x{channels}"
            )));
        }
        let k = params.max_components;
        Ok(BackgroundModel {
            params,
            width,
            height,
            channels,
            modes: vec![Mode::default(); width * height * k],
            used: vec![0; width * height],
            frames_seen: 0,
        })
    }

    pub fn for_frame(params: BgParams, frame: &Frame) -> Result<Self> {
        BackgroundModel::new(params, frame.width(), frame.height(), frame.channels())
    }

    pub fn params(&self) -> &BgParams {
        &self.params
    }

    pub fn frames_seen(&self) -> u64 {
        self.frames_seen
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.width, self.height, self.channels)
    }

    /// Learning rate for the next update.
    pub fn learning_rate(&self) -> f64 {
        let n = (self.frames_seen + 1).min(self.params.history as u64);
        1.0 / n as f64
    }

    /// Classifies every pixel of `frame` against the current model, then
    /// folds the frame into the model.
    pub fn apply(&mut self, frame: &Frame) -> Result<LabelMask> {
        if frame.width() != self.width || frame.height() != self.height || frame.channels() != self.channels {
            return Err(Error::DimensionMismatch {
                index: frame.index(),
                got_w: frame.width(),
                got_h: frame.height(),
                got_c: frame.channels(),
                want_w: self.width,
                want_h: self.height,
                want_c: self.channels,
            });
        }
        let step = Step {
            alpha: self.learning_rate() as f32,
            var_threshold: self.params.var_threshold as f32,
            shadow_threshold: self.params.shadow_threshold as f32,
            max_components: self.params.max_components,
            channels: self.channels,
        };
        let k = self.params.max_components;
        let row_px = self.width;
        let row_bytes = self.width * self.channels;
        let mut labels = vec![Label::Background; self.width * self.height];

        let process_row = |((modes, used), (labels, pixels)): RowSlices| {
            for x in 0..row_px {
                let sample = &pixels[x * step.channels..(x + 1) * step.channels];
                labels[x] = update_pixel(&mut modes[x * k..(x + 1) * k], &mut used[x], sample, &step);
            }
        };

        #[cfg(feature = "parallel")]
        self.modes
            .par_chunks_mut(row_px * k)
            .zip(self.used.par_chunks_mut(row_px))
            .zip(labels.par_chunks_mut(row_px).zip(frame.pixels().par_chunks(row_bytes)))
            .for_each(process_row);
        #[cfg(not(feature = "parallel"))]
        self.modes
            .chunks_mut(row_px * k)
            .zip(self.used.chunks_mut(row_px))
            .zip(labels.chunks_mut(row_px).zip(frame.pixels().chunks(row_bytes)))
            .for_each(process_row);

        self.frames_seen += 1;
        Ok(LabelMask {
            width: self.width,
            height: self.height,
            labels,
        })
    }

    /// Mean of each pixel's heaviest component: the current background
    /// estimate.
    pub fn snapshot(&self) -> Result<Frame> {
        if self.frames_seen == 0 {
            return Err(Error::EmptyModel);
        }
        let k = self.params.max_components;
        let mut pixels = Vec::with_capacity(self.width * self.height * self.channels);
        for p in 0..self.width * self.height {
            let top = &self.modes[p * k];
            for c in 0..self.channels {
                pixels.push(top.mean[c].round().clamp(0.0, 255.0) as u8);
            }
        }
        Frame::new(0, 0, self.width, self.height, self.channels, pixels)
    }

    /// Component weights of pixel `(x, y)`, heaviest first.
    pub fn weights_at(&self, x: usize, y: usize) -> Vec<f64> {
        let p = y * self.width + x;
        let k = self.params.max_components;
        self.modes[p * k..p * k + self.used[p] as usize]
            .iter()
            .map(|m| m.weight as f64)
            .collect()
    }

    /// Component variances of pixel `(x, y)`, heaviest first.
    pub fn variances_at(&self, x: usize, y: usize) -> Vec<f64> {
        let p = y * self.width + x;
        let k = self.params.max_components;
        self.modes[p * k..p * k + self.used[p] as usize]
            .iter()
            .map(|m| m.var as f64)
            .collect()
    }
}

/// Free-function form of [`BackgroundModel::apply`].
pub fn bg_apply(model: &mut BackgroundModel, frame: &Frame) -> Result<LabelMask> {
    model.apply(frame)
}

/// Free-function form of [`BackgroundModel::snapshot`].
pub fn bg_snapshot(model: &BackgroundModel) -> Result<Frame> {
    model.snapshot()
}

fn squared_distance(mode: &Mode, sample: &[u8]) -> f32 {
    sample
        .iter()
        .zip(mode.mean.iter())
        .map(|(&x, &m)| {
            let d = x as f32 - m;
            d * d
        })
        .sum()
}

fn classify(modes: &[Mode], sample: &[u8], step: &Step) -> Label {
    let mut cumulative = 0.0f32;
    let mut background_count = 0;
    for mode in modes {
        if cumulative >= BACKGROUND_RATIO {
            break;
        }
        background_count += 1;
        if squared_distance(mode, sample) <= step.var_threshold * mode.var {
            return Label::Background;
        }
        cumulative += mode.weight;
    }
    for mode in &modes[..background_count] {
        if is_shadow(mode, sample, step) {
            return Label::Shadow;
        }
    }
    Label::Foreground
}

fn is_shadow(mode: &Mode, sample: &[u8], step: &Step) -> bool {
    let bg: f32 = mode.mean[..step.channels].iter().sum();
    if bg <= 0.0 {
        return false;
    }
    let fg: f32 = sample.iter().map(|&v| v as f32).sum();
    let ratio = fg / bg;
    if !(ratio >= step.shadow_threshold && ratio < 1.0) {
        return false;
    }
    if step.channels == 1 {
        return true;
    }
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for c in 0..step.channels {
        if mode.mean[c] <= 0.0 {
            continue;
        }
        let r = sample[c] as f32 / mode.mean[c];
        lo = lo.min(r);
        hi = hi.max(r);
    }
    hi - lo <= SHADOW_CHROMA_SPREAD
}

/// One row of model state, usage counts, output labels and input pixels.
type RowSlices<'a> = ((&'a mut [Mode], &'a mut [u8]), (&'a mut [Label], &'a [u8]));

fn update_pixel(modes: &mut [Mode], used: &mut u8, sample: &[u8], step: &Step) -> Label {
    let n = *used as usize;
    let label = classify(&modes[..n], sample, step);

    let alpha = step.alpha;
    let prune = alpha * COMPLEXITY_REDUCTION;
    let mut matched = None;
    for (k, mode) in modes[..n].iter_mut().enumerate() {
        mode.weight = (1.0 - alpha) * mode.weight - prune;
        if matched.is_none() {
            let d2 = squared_distance(mode, sample);
            if d2 <= step.var_threshold * mode.var {
                matched = Some(k);
                mode.weight += alpha;
                let rate = alpha / mode.weight;
                for c in 0..step.channels {
                    mode.mean[c] += rate * (sample[c] as f32 - mode.mean[c]);
                }
                let per_channel = d2 / step.channels as f32;
                mode.var = (mode.var + rate * (per_channel - mode.var)).clamp(VAR_MIN, VAR_MAX);
            }
        }
    }

    // Drop components whose weight decayed away, keeping slot order.
    let mut kept = 0;
    for k in 0..n {
        if modes[k].weight > 0.0 || matched == Some(k) {
            modes[kept] = modes[k];
            kept += 1;
        }
    }

    if matched.is_none() {
        let mut fresh = Mode {
            weight: if kept == 0 { 1.0 } else { alpha },
            var: VAR_INIT,
            mean: [0.0; 3],
        };
        for c in 0..step.channels {
            fresh.mean[c] = sample[c] as f32;
        }
        if kept == step.max_components {
            modes[kept - 1] = fresh;
        } else {
            modes[kept] = fresh;
            kept += 1;
        }
    }

    let live = &mut modes[..kept];
    let total: f32 = live.iter().map(|m| m.weight).sum();
    if total > 0.0 {
        for m in live.iter_mut() {
            m.weight /= total;
        }
    }
    // Insertion sort, heaviest first; stable for equal weights.
    for i in 1..live.len() {
        let mut j = i;
        while j > 0 && live[j].weight > live[j - 1].weight {
            live.swap(j, j - 1);
            j -= 1;
        }
    }
    *used = kept as u8;
    label
}
