//! Dense flow by coarse-to-fine block matching, corner features and
//! per-block orientation histograms.

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::video_io::Frame;

pub const BLOCK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlowEstimator {
    #[default]
    BlockMatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowParams {
    pub estimator: FlowEstimator,
    pub levels: usize,
    pub search_px: usize,
    /// Orientation bins over 360 degrees: 9 (40 degrees each) or 18.
    pub bins: usize,
}

impl Default for FlowParams {
    fn default() -> Self {
        FlowParams {
            estimator: FlowEstimator::BlockMatch,
            levels: 3,
            search_px: 4,
            bins: 9,
        }
    }
}

impl FlowParams {
    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.levels) {
            return Err(Error::Config(format!("flow.levels must be in 1..=5, got {}", self.levels)));
        }
        if !(1..=16).contains(&self.search_px) {
            return Err(Error::Config(format!("flow.search_px must be in 1..=16, got {}", self.search_px)));
        }
        if self.bins != 9 && self.bins != 18 {
            return Err(Error::Config(format!("flow.bins must be 9 or 18, got {}", self.bins)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        FlowField {
            width,
            height,
            u: vec![0.0; width * height],
            v: vec![0.0; width * height],
        }
    }

    pub fn uniform(width: usize, height: usize, u: f64, v: f64) -> Self {
        FlowField {
            width,
            height,
            u: vec![u; width * height],
            v: vec![v; width * height],
        }
    }

    pub fn at(&self, x: usize, y: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }

    pub fn set(&mut self, x: usize, y: usize, u: f64, v: f64) {
        let i = y * self.width + x;
        self.u[i] = u;
        self.v[i] = v;
    }

    pub fn magnitudes(&self) -> impl Iterator<Item = f64> + '_ {
        self.u.iter().zip(&self.v).map(|(u, v)| u.hypot(*v))
    }

    /// The field with `margin` pixels dropped on every side. A margin that
    /// would leave nothing is ignored.
    pub fn interior(&self, margin: usize) -> FlowField {
        if margin == 0 || 2 * margin >= self.width || 2 * margin >= self.height {
            return self.clone();
        }
        let (w, h) = (self.width - 2 * margin, self.height - 2 * margin);
        let mut out = FlowField::zeros(w, h);
        for y in 0..h {
            let src = (y + margin) * self.width + margin;
            out.u[y * w..(y + 1) * w].copy_from_slice(&self.u[src..src + w]);
            out.v[y * w..(y + 1) * w].copy_from_slice(&self.v[src..src + w]);
        }
        out
    }
}

struct Plane {
    w: usize,
    h: usize,
    px: Vec<f32>,
}

impl Plane {
    fn from_frame(f: &Frame) -> Self {
        Plane {
            w: f.width(),
            h: f.height(),
            px: f.pixels().iter().map(|&p| p as f32).collect(),
        }
    }

    fn half(&self) -> Plane {
        let (w, h) = (self.w.div_ceil(2), self.h.div_ceil(2));
        let mut px = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    s += self.get_clamped((2 * x + dx) as i64, (2 * y + dy) as i64);
                }
                px.push(s / 4.0);
            }
        }
        Plane { w, h, px }
    }

    #[inline]
    fn get_clamped(&self, x: i64, y: i64) -> f32 {
        let x = x.clamp(0, self.w as i64 - 1) as usize;
        let y = y.clamp(0, self.h as i64 - 1) as usize;
        self.px[y * self.w + x]
    }
}

fn check_pair(prev: &Frame, next: &Frame) -> Result<()> {
    if prev.channels() != 1 || next.channels() != 1 {
        return Err(Error::Geometry("flow needs single-channel frames".into()));
    }
    if !prev.same_shape(next) {
        return Err(Error::DimensionMismatch {
            index: next.index(),
            got_w: next.width(),
            got_h: next.height(),
            got_c: next.channels(),
            want_w: prev.width(),
            want_h: prev.height(),
            want_c: prev.channels(),
        });
    }
    Ok(())
}

/// Sum of squared differences of one block at integer displacement.
fn block_cost(a: &Plane, b: &Plane, bx: usize, by: usize, dx: i64, dy: i64) -> f64 {
    let x1 = (bx + BLOCK).min(a.w);
    let y1 = (by + BLOCK).min(a.h);
    let mut s = 0.0f64;
    for y in by..y1 {
        for x in bx..x1 {
            let d = a.px[y * a.w + x] - b.get_clamped(x as i64 + dx, y as i64 + dy);
            s += (d * d) as f64;
        }
    }
    s
}

// Vertex offset of a parabola through (-1, cm), (0, c0), (1, cp).
fn parabola_offset(cm: f64, c0: f64, cp: f64) -> f64 {
    let denom = cm - 2.0 * c0 + cp;
    if denom <= 0.0 {
        return 0.0;
    }
    (0.5 * (cm - cp) / denom).clamp(-0.5, 0.5)
}

fn match_block(a: &Plane, b: &Plane, bx: usize, by: usize, guess: (i64, i64), search: i64, refine: bool) -> (f64, f64) {
    let mut best = (f64::INFINITY, i64::MAX, guess);
    for dy in guess.1 - search..=guess.1 + search {
        for dx in guess.0 - search..=guess.0 + search {
            let c = block_cost(a, b, bx, by, dx, dy);
            // Prefer the smaller displacement on equal cost.
            let r = dx.abs() + dy.abs();
            if c < best.0 || (c == best.0 && r < best.1) {
                best = (c, r, (dx, dy));
            }
        }
    }
    let (c0, _, (dx, dy)) = best;
    // An exact match needs no sub-pixel correction.
    if !refine || c0 == 0.0 {
        return (dx as f64, dy as f64);
    }
    let ox = parabola_offset(
        block_cost(a, b, bx, by, dx - 1, dy),
        c0,
        block_cost(a, b, bx, by, dx + 1, dy),
    );
    let oy = parabola_offset(
        block_cost(a, b, bx, by, dx, dy - 1),
        c0,
        block_cost(a, b, bx, by, dx, dy + 1),
    );
    (dx as f64 + ox, dy as f64 + oy)
}

/// Block flow of one pyramid level, seeded from the coarser level.
fn level_flow(a: &Plane, b: &Plane, coarse: Option<&BlockFlow>, search: i64, refine: bool) -> BlockFlow {
    let cols = a.w.div_ceil(BLOCK);
    let rows = a.h.div_ceil(BLOCK);
    let solve = |i: usize| {
        let (bx, by) = ((i % cols) * BLOCK, (i / cols) * BLOCK);
        let guess = coarse.map_or((0, 0), |c| {
            let cx = ((bx + BLOCK / 2) / 2 / BLOCK).min(c.cols - 1);
            let cy = ((by + BLOCK / 2) / 2 / BLOCK).min(c.rows - 1);
            let (u, v) = c.d[cy * c.cols + cx];
            ((2.0 * u).round() as i64, (2.0 * v).round() as i64)
        });
        match_block(a, b, bx, by, guess, search, refine)
    };
    #[cfg(feature = "parallel")]
    let d = (0..cols * rows).into_par_iter().map(solve).collect();
    #[cfg(not(feature = "parallel"))]
    let d = (0..cols * rows).map(solve).collect();
    BlockFlow { cols, rows, d }
}

struct BlockFlow {
    cols: usize,
    rows: usize,
    d: Vec<(f64, f64)>,
}

/// Per-pixel displacement from `prev` to `next`, constant within each 8x8
/// block.
pub fn dense_flow(prev: &Frame, next: &Frame, params: &FlowParams) -> Result<FlowField> {
    params.validate()?;
    check_pair(prev, next)?;
    let (w, h) = (prev.width(), prev.height());
    let mut pa = vec![Plane::from_frame(prev)];
    let mut pb = vec![Plane::from_frame(next)];
    while pa.len() < params.levels {
        let last = pa.last().expect("non-empty");
        if last.w < 2 * BLOCK || last.h < 2 * BLOCK {
            break;
        }
        let (na, nb) = (last.half(), pb.last().expect("non-empty").half());
        pa.push(na);
        pb.push(nb);
    }
    let mut flow: Option<BlockFlow> = None;
    for level in (0..pa.len()).rev() {
        flow = Some(level_flow(
            &pa[level],
            &pb[level],
            flow.as_ref(),
            params.search_px as i64,
            level == 0,
        ));
    }
    let blocks = flow.expect("at least one level");
    let mut field = FlowField::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = blocks.d[(y / BLOCK) * blocks.cols + x / BLOCK];
            field.set(x, y, u, v);
        }
    }
    Ok(field)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CornerParams {
    /// Fraction of the strongest response a corner must reach.
    pub quality: f64,
    /// Absolute floor on the response, in squared gray levels per pixel.
    pub min_response: f64,
    pub min_spacing: f64,
}

impl Default for CornerParams {
    fn default() -> Self {
        CornerParams {
            quality: 0.01,
            min_response: 25.0,
            min_spacing: BLOCK as f64,
        }
    }
}

/// Smaller eigenvalue of the 3x3-summed gradient structure tensor.
/// Sobel gradients are scaled by 1/8 so they are in gray levels per pixel.
pub fn corner_response(frame: &Frame) -> Result<Vec<f64>> {
    if frame.channels() != 1 {
        return Err(Error::Geometry("corner response needs a single-channel frame".into()));
    }
    let (w, h) = (frame.width(), frame.height());
    let p = frame.pixels();
    let at = |x: i64, y: i64| p[(y.clamp(0, h as i64 - 1) as usize) * w + x.clamp(0, w as i64 - 1) as usize] as f64;
    let mut gxx = vec![0.0; w * h];
    let mut gyy = vec![0.0; w * h];
    let mut gxy = vec![0.0; w * h];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let gx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1)
                - at(x - 1, y - 1)
                - 2.0 * at(x - 1, y)
                - at(x - 1, y + 1))
                / 8.0;
            let gy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1)
                - at(x - 1, y - 1)
                - 2.0 * at(x, y - 1)
                - at(x + 1, y - 1))
                / 8.0;
            let i = y as usize * w + x as usize;
            gxx[i] = gx * gx;
            gyy[i] = gy * gy;
            gxy[i] = gx * gy;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
            for yy in y.saturating_sub(1)..(y + 2).min(h) {
                for xx in x.saturating_sub(1)..(x + 2).min(w) {
                    let i = yy * w + xx;
                    a += gxx[i];
                    b += gxy[i];
                    c += gyy[i];
                }
            }
            out[y * w + x] = 0.5 * (a + c) - (0.25 * (a - c) * (a - c) + b * b).sqrt();
        }
    }
    Ok(out)
}

/// Up to `max_n` strongest local maxima of the corner response, at least
/// `min_spacing` apart, strongest first.
pub fn corner_features_with(frame: &Frame, max_n: usize, params: &CornerParams) -> Result<Vec<Point>> {
    let (w, h) = (frame.width(), frame.height());
    let r = corner_response(frame)?;
    let peak = r.iter().cloned().fold(0.0, f64::max);
    let floor = (params.quality * peak).max(params.min_response);
    let mut cands: Vec<(f64, usize, usize)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = r[y * w + x];
            if v < floor || v <= 0.0 {
                continue;
            }
            let mut is_max = true;
            'n: for yy in y.saturating_sub(1)..(y + 2).min(h) {
                for xx in x.saturating_sub(1)..(x + 2).min(w) {
                    if r[yy * w + xx] > v {
                        is_max = false;
                        break 'n;
                    }
                }
            }
            if is_max {
                cands.push((v, x, y));
            }
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.2, a.1).cmp(&(b.2, b.1))));
    let mut out: Vec<Point> = Vec::new();
    for (_, x, y) in cands {
        if out.len() >= max_n {
            break;
        }
        let p = Point::new(x as f64, y as f64);
        if out.iter().all(|q| q.distance(&p) >= params.min_spacing) {
            out.push(p);
        }
    }
    Ok(out)
}

pub fn corner_features(frame: &Frame, max_n: usize) -> Result<Vec<Point>> {
    corner_features_with(frame, max_n, &CornerParams::default())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockFlowHistogram {
    pub cols: usize,
    pub rows: usize,
    pub bins: usize,
    /// Row-major blocks, `bins` values each.
    pub data: Vec<f64>,
}

impl BlockFlowHistogram {
    pub fn zeros(cols: usize, rows: usize, bins: usize) -> Self {
        BlockFlowHistogram {
            cols,
            rows,
            bins,
            data: vec![0.0; cols * rows * bins],
        }
    }

    pub fn for_frame(width: usize, height: usize, bins: usize) -> Self {
        Self::zeros(width.div_ceil(BLOCK), height.div_ceil(BLOCK), bins)
    }

    pub fn block(&self, col: usize, row: usize) -> &[f64] {
        let i = (row * self.cols + col) * self.bins;
        &self.data[i..i + self.bins]
    }

    pub fn get(&self, col: usize, row: usize, bin: usize) -> f64 {
        self.block(col, row)[bin]
    }

    pub fn total(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn same_geometry(&self, other: &BlockFlowHistogram) -> bool {
        (self.cols, self.rows, self.bins) == (other.cols, other.rows, other.bins)
    }

    fn add(&mut self, x: usize, y: usize, u: f64, v: f64) {
        let m = u.hypot(v);
        if m == 0.0 {
            return;
        }
        let bin = orientation_bin(u, v, self.bins);
        self.data[((y / BLOCK) * self.cols + x / BLOCK) * self.bins + bin] += m;
    }
}

/// Bin of `atan2(v, u)` in `[0, 360)` split into `bins` equal sectors.
pub fn orientation_bin(u: f64, v: f64, bins: usize) -> usize {
    let mut deg = v.atan2(u).to_degrees();
    if deg < 0.0 {
        deg += 360.0;
    }
    if deg >= 360.0 {
        deg -= 360.0;
    }
    ((deg / (360.0 / bins as f64)).floor() as usize).min(bins - 1)
}

/// Accumulates flow magnitudes by block and orientation, over every pixel or
/// only at `points` (rounded to the nearest pixel).
pub fn block_histograms(field: &FlowField, points: Option<&[Point]>, bins: usize) -> BlockFlowHistogram {
    let mut hist = BlockFlowHistogram::for_frame(field.width, field.height, bins);
    match points {
        None => {
            for y in 0..field.height {
                for x in 0..field.width {
                    let (u, v) = field.at(x, y);
                    hist.add(x, y, u, v);
                }
            }
        }
        Some(points) => {
            for p in points {
                let (x, y) = (p.x.round(), p.y.round());
                if x < 0.0 || y < 0.0 || x >= field.width as f64 || y >= field.height as f64 {
                    continue;
                }
                let (x, y) = (x as usize, y as usize);
                let (u, v) = field.at(x, y);
                hist.add(x, y, u, v);
            }
        }
    }
    hist
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowStats {
    pub total: f64,
    pub variance: f64,
}

/// Total and population variance of per-pixel flow magnitudes.
pub fn flow_stats(field: &FlowField) -> FlowStats {
    let n = field.u.len();
    if n == 0 {
        return FlowStats { total: 0.0, variance: 0.0 };
    }
    let total: f64 = field.magnitudes().sum();
    let mean = total / n as f64;
    let variance = field.magnitudes().map(|m| (m - mean) * (m - mean)).sum::<f64>() / n as f64;
    FlowStats { total, variance }
}
