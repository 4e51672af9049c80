//! Browser bindings: build a synopsis of a synthetic street scene, sweep the
//! cluster size, and scan a panning clip for a cut.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use vsyn::forensics::{forgery_scan, AlarmDetail, ForgeryParams};
use vsyn::flow::FlowParams;
use vsyn::synopsis::{run_synopsis, Execution, SynopsisConfig, SynopsisManifest};
use vsyn::synthgen::{generate, AgentSpec, EditKind, EditSpec, Scene, SceneScript};
use wasm_bindgen::prelude::*;

pub const WIDTH: usize = 160;
pub const HEIGHT: usize = 120;
/// Agents appear only after the background model has settled.
const WARM_UP: u64 = 100;

fn js(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// Walkers crossing the frame left to right or right to left, each in its
/// own lane.
pub fn street_script(seed: u64, agents: usize, frames: u64) -> SceneScript {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = SceneScript::new(WIDTH, HEIGHT, frames.max(WARM_UP + 60), 18.0);
    s.seed = seed;
    s.background.texture = 25.0;
    let lanes = (HEIGHT - 16) / 18;
    for k in 0..agents {
        let (w, h) = (rng.gen_range(12..=24), rng.gen_range(10..=16));
        let speed = rng.gen_range(2.0..3.5);
        let life = ((WIDTH - w) as f64 / speed).floor() as u64;
        let start = rng.gen_range(WARM_UP..=s.frames - life);
        let y = (4 + (k % lanes) * 18) as f64;
        let (x, v) = if rng.gen_bool(0.5) { (0.0, speed) } else { ((WIDTH - w) as f64, -speed) };
        s.agents.push(AgentSpec {
            size: [w, h],
            start: [x, y],
            velocity: [v, 0.0],
            start_frame: start,
            end_frame: start + life,
            level: rng.gen_range(190.0..245.0),
            texture: 30.0,
        });
    }
    s
}

fn gray_to_rgba(gray: &[u8]) -> Vec<u8> {
    gray.iter().flat_map(|&g| [g, g, g, 255]).collect()
}

#[wasm_bindgen]
pub struct Demo {
    scene: Scene,
    synopsis: Vec<Vec<u8>>,
    manifest: Option<SynopsisManifest>,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, agents: u32, frames: u32) -> Result<Demo, JsError> {
        let scene = generate(&street_script(seed as u64, agents as usize, frames as u64)).map_err(js)?;
        Ok(Demo { scene, synopsis: Vec::new(), manifest: None })
    }

    pub fn width(&self) -> usize {
        WIDTH
    }

    pub fn height(&self) -> usize {
        HEIGHT
    }

    pub fn frame_count(&self) -> u32 {
        self.scene.len() as u32
    }

    pub fn synopsis_len(&self) -> u32 {
        self.synopsis.len() as u32
    }

    /// Builds the synopsis and returns its summary as JSON.
    pub fn synopsize(&mut self, cluster_size: u32) -> Result<String, JsError> {
        let config = SynopsisConfig { cluster_size: cluster_size as usize, ..SynopsisConfig::default() };
        let mut frames = Vec::new();
        let run = run_synopsis(self.scene.frames(), &self.scene.meta(), &config, Execution::Sequential, |f| {
            frames.push(f.into_pixels());
            Ok(())
        })
        .map_err(js)?;
        self.synopsis = frames;
        let m = &run.manifest.summary;
        let out = json!({ "tov": m.tov, "tsv": m.tsv, "fr": m.fr, "tubes": m.tubes, "cs": m.cs });
        self.manifest = Some(run.manifest);
        Ok(out.to_string())
    }

    pub fn original_rgba(&self, i: u32) -> Result<Vec<u8>, JsError> {
        Ok(gray_to_rgba(self.scene.frame(i as u64).map_err(js)?.pixels()))
    }

    pub fn synopsis_rgba(&self, i: u32) -> Result<Vec<u8>, JsError> {
        let f = self.synopsis.get(i as usize).ok_or_else(|| js(format!("no synopsis frame {i}")))?;
        Ok(gray_to_rgba(f))
    }

    /// Placements of synopsis frame `i` as JSON `[{id, frame, x, y, w, h}]`.
    pub fn placements(&self, i: u32) -> String {
        let Some(f) = self.manifest.as_ref().and_then(|m| m.frames.get(i as usize)) else {
            return "[]".into();
        };
        let v: Vec<_> = f
            .placements
            .iter()
            .map(|p| json!({ "id": p.object_id, "frame": p.orig_frame, "x": p.bbox.x, "y": p.bbox.y, "w": p.bbox.w, "h": p.bbox.h }))
            .collect();
        serde_json::Value::Array(v).to_string()
    }

    /// Synopsis length and frame reduction for cluster sizes `1..=max_cs`.
    pub fn sweep(&self, max_cs: u32) -> Result<String, JsError> {
        let mut rows = Vec::new();
        for cs in 1..=max_cs.max(1) as usize {
            let config = SynopsisConfig { cluster_size: cs, ..SynopsisConfig::default() };
            let run = run_synopsis(self.scene.frames(), &self.scene.meta(), &config, Execution::Sequential, |_| Ok(()))
                .map_err(js)?;
            rows.push(json!({ "cs": cs, "tsv": run.manifest.summary.tsv, "fr": run.manifest.summary.fr }));
        }
        Ok(serde_json::Value::Array(rows).to_string())
    }
}

/// Scans a 200-frame panning clip with `cut` frames removed at `at`. Returns
/// JSON with the variation series, the alarms and where the cut landed.
#[wasm_bindgen]
pub fn forgery_demo(seed: u32, at: u32, cut: u32) -> Result<String, JsError> {
    let mut s = SceneScript::new(WIDTH, HEIGHT, 200, 18.0);
    s.seed = seed as u64;
    s.background.texture = 40.0;
    s.background.pan = [1.5, 0.5];
    if cut > 0 {
        s.edits.push(EditSpec { kind: EditKind::Delete, start: at as u64, len: cut as u64, at: None, level: None });
    }
    let scene = generate(&s).map_err(js)?;
    let (seq, events) = forgery_scan(scene.frames(), &FlowParams::default(), &ForgeryParams::default()).map_err(js)?;
    let events: Vec<_> = events
        .iter()
        .map(|e| {
            let what = match &e.detail {
                AlarmDetail::ZScore { series, .. } => format!("outlier in {series}"),
                AlarmDetail::Duplicate { method, .. } => format!("repeat ({method})"),
                other => format!("{other:?}"),
            };
            json!({ "start": e.start_frame, "end": e.end_frame, "score": e.score, "what": what })
        })
        .collect();
    let cut_at = scene.edit_log.first().map(|r| r.output_start);
    Ok(json!({ "variation": seq.variance, "events": events, "cut_at": cut_at }).to_string())
}
