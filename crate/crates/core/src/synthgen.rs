//! Deterministic synthetic scenes with exact ground truth.
//!
//! A scene is a textured or flat background, optionally panning, with
//! textured rectangles moving at constant velocity, plus per-frame Gaussian
//! noise. Edits then delete, repeat, splice or black out source frames.
//! Frames are rendered on demand, so long scenes cost no memory.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::AnnotationSet;
use crate::geometry::BBox;
use crate::video_io::{timestamp_ms, Frame, SequenceWriter, StreamMeta};

const TEXTURE_CELL: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackgroundSpec {
    pub level: f64,
    /// Peak deviation of the smooth texture; 0 gives a flat background.
    pub texture: f64,
    pub noise_sigma: f64,
    /// Camera pan in px/frame; the scene content drifts the opposite way.
    pub pan: [f64; 2],
    /// Seeds the texture apart from the noise, so two recordings can share
    /// one scene. Falls back to the script seed.
    pub texture_seed: Option<u64>,
}

impl Default for BackgroundSpec {
    fn default() -> Self {
        BackgroundSpec {
            level: 100.0,
            texture: 0.0,
            noise_sigma: 2.0,
            pan: [0.0, 0.0],
            texture_seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    pub size: [usize; 2],
    pub start: [f64; 2],
    pub velocity: [f64; 2],
    pub start_frame: u64,
    /// Exclusive.
    pub end_frame: u64,
    #[serde(default = "default_agent_level")]
    pub level: f64,
    #[serde(default = "default_agent_texture")]
    pub texture: f64,
}

fn default_agent_level() -> f64 {
    220.0
}

fn default_agent_texture() -> f64 {
    30.0
}

impl AgentSpec {
    pub fn bbox_at(&self, source_frame: u64) -> Option<BBox> {
        if source_frame < self.start_frame || source_frame >= self.end_frame {
            return None;
        }
        let t = (source_frame - self.start_frame) as f64;
        let x = (self.start[0] + self.velocity[0] * t).round();
        let y = (self.start[1] + self.velocity[1] * t).round();
        Some(BBox::new(x as usize, y as usize, self.size[0], self.size[1]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditKind {
    /// Removes the source range.
    Delete,
    /// Plays the source range a second time right after itself.
    Duplicate,
    /// Copies the source range to just before source frame `at`.
    Insert,
    /// Replaces the source range with a flat frame at `level`.
    Occlude,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditSpec {
    pub kind: EditKind,
    pub start: u64,
    pub len: u64,
    #[serde(default)]
    pub at: Option<u64>,
    #[serde(default)]
    pub level: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneScript {
    pub width: usize,
    pub height: usize,
    pub frames: u64,
    pub fps: f64,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default)]
    pub background: BackgroundSpec,
    #[serde(default)]
    pub agents: Vec<AgentSpec>,
    #[serde(default)]
    pub edits: Vec<EditSpec>,
    #[serde(default)]
    pub seed: u64,
}

fn default_channels() -> usize {
    1
}

impl SceneScript {
    pub fn new(width: usize, height: usize, frames: u64, fps: f64) -> Self {
        SceneScript {
            width,
            height,
            frames,
            fps,
            channels: 1,
            background: BackgroundSpec::default(),
            agents: Vec::new(),
            edits: Vec::new(),
            seed: 0,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::json("scene script", e))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::json("scene script", e))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Script(m));
        if self.width == 0 || self.height == 0 {
            return bad("frame size must be positive".into());
        }
        if !(self.fps > 0.0) {
            return bad(format!("fps must be positive, got {}", self.fps));
        }
        if self.channels != 1 && self.channels != 3 {
            return bad(format!("channels must be 1 or 3, got {}", self.channels));
        }
        let bg = &self.background;
        if !(bg.noise_sigma >= 0.0) || !(bg.texture >= 0.0) {
            return bad("background noise and texture must be non-negative".into());
        }
        for (i, a) in self.agents.iter().enumerate() {
            if a.size[0] == 0 || a.size[1] == 0 {
                return bad(format!("agent {i} has an empty size"));
            }
            if a.start_frame >= a.end_frame || a.end_frame > self.frames {
                return bad(format!(
                    "agent {i} lifetime {}..{} is not inside 0..{}",
                    a.start_frame, a.end_frame, self.frames
                ));
            }
            // Motion is linear, so the endpoints bound the whole path.
            for f in [a.start_frame, a.end_frame - 1] {
                let t = (f - a.start_frame) as f64;
                let x = (a.start[0] + a.velocity[0] * t).round();
                let y = (a.start[1] + a.velocity[1] * t).round();
                if x < 0.0
                    || y < 0.0
                    || x as usize + a.size[0] > self.width
                    || y as usize + a.size[1] > self.height
                {
                    return bad(format!("agent {i} leaves the frame at source frame {f}"));
                }
            }
        }
        for (i, e) in self.edits.iter().enumerate() {
            if e.len == 0 || e.start + e.len > self.frames {
                return bad(format!("edit {i} range {}+{} is outside 0..{}", e.start, e.len, self.frames));
            }
            match (e.kind, e.at) {
                (EditKind::Insert, None) => return bad(format!("insert edit {i} needs `at`")),
                (EditKind::Insert, Some(at)) if at >= self.frames => {
                    return bad(format!("insert edit {i} target {at} is outside 0..{}", self.frames))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// A script with `n_agents` agents of random size, path and lifetime,
    /// all fully inside the frame.
    pub fn random(seed: u64, width: usize, height: usize, frames: u64, n_agents: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut script = SceneScript::new(width, height, frames, 18.0);
        script.seed = seed;
        for _ in 0..n_agents {
            let w = rng.gen_range(8..=(width / 5).max(9));
            let h = rng.gen_range(8..=(height / 5).max(9));
            let life = rng.gen_range(frames.min(12)..=frames.min(80));
            let start_frame = rng.gen_range(0..=frames - life);
            let span = (life - 1).max(1) as f64;
            let x0 = rng.gen_range(0..=width - w) as f64;
            let y0 = rng.gen_range(0..=height - h) as f64;
            let x1 = rng.gen_range(0..=width - w) as f64;
            let y1 = rng.gen_range(0..=height - h) as f64;
            script.agents.push(AgentSpec {
                size: [w, h],
                start: [x0, y0],
                velocity: [(x1 - x0) / span, (y1 - y0) / span],
                start_frame,
                end_frame: start_frame + life,
                level: rng.gen_range(180.0..250.0),
                texture: 25.0,
            });
        }
        script
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub source: u64,
    pub occluded: Option<u8>,
}

/// Where an edit landed in the output sequence. A deletion has
/// `output_len == 0` and `output_start` at the first frame after the cut.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditRecord {
    pub kind: EditKind,
    pub source_start: u64,
    pub source_len: u64,
    pub output_start: u64,
    pub output_len: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthTube {
    pub id: u32,
    /// `(output frame, bbox)` in output order.
    pub frames: Vec<(u64, BBox)>,
}

#[derive(Debug, Clone)]
pub struct Scene {
    script: SceneScript,
    plan: Vec<PlanEntry>,
    base: Option<Vec<f32>>,
    pub annotations: AnnotationSet,
    pub tubes: Vec<GroundTruthTube>,
    pub edit_log: Vec<EditRecord>,
}

/// Builds the scene for `script`; frames are rendered lazily.
pub fn generate(script: &SceneScript) -> Result<Scene> {
    Scene::new(script.clone())
}

fn find_run(plan: &[PlanEntry], start: u64, len: u64) -> Result<usize> {
    let p = plan
        .iter()
        .position(|e| e.source == start)
        .ok_or_else(|| Error::Script(format!("source frame {start} is no longer in the sequence")))?;
    let contiguous = (0..len as usize).all(|k| plan.get(p + k).is_some_and(|e| e.source == start + k as u64));
    if !contiguous {
        return Err(Error::Script(format!("source range {start}+{len} is not contiguous")));
    }
    Ok(p)
}

fn shift_records(log: &mut [EditRecord], at: u64, delta: i64) {
    for r in log {
        if r.output_start >= at {
            r.output_start = (r.output_start as i64 + delta).max(at as i64) as u64;
        }
    }
}

impl Scene {
    pub fn new(script: SceneScript) -> Result<Self> {
        script.validate()?;
        let mut plan: Vec<PlanEntry> = (0..script.frames).map(|source| PlanEntry { source, occluded: None }).collect();
        let mut log: Vec<EditRecord> = Vec::new();
        for e in &script.edits {
            let p = find_run(&plan, e.start, e.len)?;
            let n = e.len as usize;
            let (output_start, output_len) = match e.kind {
                EditKind::Delete => {
                    plan.drain(p..p + n);
                    shift_records(&mut log, p as u64, -(n as i64));
                    (p, 0)
                }
                EditKind::Duplicate => {
                    let copy: Vec<PlanEntry> = plan[p..p + n].to_vec();
                    plan.splice(p + n..p + n, copy);
                    shift_records(&mut log, (p + n) as u64, n as i64);
                    (p + n, n)
                }
                EditKind::Insert => {
                    let copy: Vec<PlanEntry> = plan[p..p + n].to_vec();
                    let at = e.at.expect("validated");
                    let q = find_run(&plan, at, 1)?;
                    plan.splice(q..q, copy);
                    shift_records(&mut log, q as u64, n as i64);
                    (q, n)
                }
                EditKind::Occlude => {
                    for entry in &mut plan[p..p + n] {
                        entry.occluded = Some(e.level.unwrap_or(0));
                    }
                    (p, n)
                }
            };
            log.push(EditRecord {
                kind: e.kind,
                source_start: e.start,
                source_len: e.len,
                output_start: output_start as u64,
                output_len: output_len as u64,
            });
        }

        let mut boxes = Vec::new();
        let mut tubes: Vec<GroundTruthTube> = (0..script.agents.len())
            .map(|i| GroundTruthTube { id: i as u32 + 1, frames: Vec::new() })
            .collect();
        for (out, entry) in plan.iter().enumerate() {
            if entry.occluded.is_some() {
                continue;
            }
            for (i, a) in script.agents.iter().enumerate() {
                if let Some(b) = a.bbox_at(entry.source) {
                    boxes.push((out as u64, i as u32 + 1, b));
                    tubes[i].frames.push((out as u64, b));
                }
            }
        }
        tubes.retain(|t| !t.frames.is_empty());

        let bg = &script.background;
        let base = (bg.pan == [0.0, 0.0]).then(|| background_plane(&script, 0.0, 0.0));
        Ok(Scene {
            annotations: AnnotationSet::from_boxes(boxes),
            tubes,
            edit_log: log,
            plan,
            base,
            script,
        })
    }

    pub fn script(&self) -> &SceneScript {
        &self.script
    }

    pub fn plan(&self) -> &[PlanEntry] {
        &self.plan
    }

    pub fn len(&self) -> u64 {
        self.plan.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.plan.is_empty()
    }

    pub fn meta(&self) -> StreamMeta {
        StreamMeta::new(
            self.script.fps,
            self.len(),
            self.script.width,
            self.script.height,
            format!("synthetic:{}", self.script.seed),
        )
    }

    /// Renders output frame `i`.
    pub fn frame(&self, i: u64) -> Result<Frame> {
        let entry = self
            .plan
            .get(i as usize)
            .ok_or_else(|| Error::Script(format!("frame {i} is past the end ({})", self.len())))?;
        let s = &self.script;
        let (w, h) = (s.width, s.height);
        let mut values: Vec<f32> = match entry.occluded {
            Some(level) => vec![level as f32; w * h],
            None => {
                let mut v = match &self.base {
                    Some(base) => base.clone(),
                    None => {
                        let t = entry.source as f64;
                        background_plane(s, s.background.pan[0] * t, s.background.pan[1] * t)
                    }
                };
                for (k, a) in s.agents.iter().enumerate() {
                    if let Some(b) = a.bbox_at(entry.source) {
                        let salt = s.seed ^ (k as u64 + 1).wrapping_mul(0xA24B_AED4_963E_E407);
                        for y in 0..b.h {
                            for x in 0..b.w {
                                v[(b.y + y) * w + b.x + x] =
                                    (a.level + a.texture * value_noise(salt, x as f64, y as f64)) as f32;
                            }
                        }
                    }
                }
                v
            }
        };
        let sigma = s.background.noise_sigma;
        if sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(s.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ entry.source);
            let normal = Normal::new(0.0f32, sigma as f32).expect("sigma validated");
            for v in &mut values {
                *v += normal.sample(&mut rng);
            }
        }
        let mut pixels = Vec::with_capacity(w * h * s.channels);
        for v in values {
            let p = v.round().clamp(0.0, 255.0) as u8;
            for _ in 0..s.channels {
                pixels.push(p);
            }
        }
        Frame::new(i, timestamp_ms(i, s.fps), w, h, s.channels, pixels)
    }

    pub fn frames(&self) -> impl Iterator<Item = Result<Frame>> + Send + '_ {
        (0..self.len()).map(move |i| self.frame(i))
    }

    /// Writes frames, `annotations.json`, `tubes.json`, `edits.json` and
    /// `script.json` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<StreamMeta> {
        let mut writer = SequenceWriter::create(dir, self.script.fps)?;
        for f in self.frames() {
            writer.push(&f?)?;
        }
        let meta = writer.finish()?;
        let put = |name: &str, text: String| {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
        };
        put("annotations.json", self.annotations.to_json()?)?;
        put(
            "tubes.json",
            serde_json::to_string(&self.tubes).map_err(|e| Error::json("tubes", e))?,
        )?;
        put(
            "edits.json",
            serde_json::to_string_pretty(&self.edit_log).map_err(|e| Error::json("edits", e))?,
        )?;
        put("script.json", self.script.to_json()?)?;
        Ok(meta)
    }
}

fn background_plane(s: &SceneScript, ox: f64, oy: f64) -> Vec<f32> {
    let bg = &s.background;
    let mut v = Vec::with_capacity(s.width * s.height);
    for y in 0..s.height {
        for x in 0..s.width {
            let t = if bg.texture > 0.0 {
                bg.texture * value_noise(bg.texture_seed.unwrap_or(s.seed), x as f64 + ox, y as f64 + oy)
            } else {
                0.0
            };
            v.push((bg.level + t) as f32);
        }
    }
    v
}

// Integer hash to [-1, 1]; a fixed function of (salt, lattice point).
fn lattice(salt: u64, ix: i64, iy: i64) -> f64 {
    let mut z = salt ^ (ix as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (iy as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

/// Bilinear value noise on a 4 px lattice, in [-1, 1].
fn value_noise(salt: u64, x: f64, y: f64) -> f64 {
    let (sx, sy) = (x / TEXTURE_CELL, y / TEXTURE_CELL);
    let (fx, fy) = (sx.floor(), sy.floor());
    let (tx, ty) = (sx - fx, sy - fy);
    let (ix, iy) = (fx as i64, fy as i64);
    lattice(salt, ix, iy) * (1.0 - tx) * (1.0 - ty)
        + lattice(salt, ix + 1, iy) * tx * (1.0 - ty)
        + lattice(salt, ix, iy + 1) * (1.0 - tx) * ty
        + lattice(salt, ix + 1, iy + 1) * tx * ty
}
