//! Foreground mask clean-up and per-object detections: morphology,
//! 8-connected components, outer contour tracing, convex hulls and boxes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::video_io::Frame;

/// Binary image, one byte per pixel holding 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(width: usize, height: usize) -> Self {
        BinaryMask {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.data[y * self.width + x] = on as u8;
    }

    pub fn fill_rect(&mut self, b: &BBox) {
        for y in b.y..b.bottom().min(self.height) {
            for x in b.x..b.right().min(self.width) {
                self.set(x, y, true);
            }
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelShape {
    Ellipse,
    Rect,
    Cross,
}

/// Square structuring element of odd `size`. Parsed from and printed as
/// `"<shape>:<size>"`, e.g. `"ellipse:5"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Kernel {
    pub shape: KernelShape,
    pub size: usize,
}

impl Kernel {
    pub const fn new(shape: KernelShape, size: usize) -> Self {
        Kernel { shape, size }
    }

    /// Offsets `(dx, dy)` of the element's set cells relative to its centre.
    pub fn offsets(&self) -> Vec<(isize, isize)> {
        let r = (self.size / 2) as isize;
        let mut out = Vec::new();
        for dy in -r..=r {
            let half = match self.shape {
                KernelShape::Rect => r,
                KernelShape::Cross => {
                    if dy == 0 {
                        r
                    } else {
                        0
                    }
                }
                KernelShape::Ellipse => {
                    if r == 0 {
                        0
                    } else {
                        let t = 1.0 - (dy * dy) as f64 / (r * r) as f64;
                        (r as f64 * t.max(0.0).sqrt()).round() as isize
                    }
                }
            };
            for dx in -half..=half {
                out.push((dx, dy));
            }
        }
        out
    }
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let shape = match self.shape {
            KernelShape::Ellipse => "ellipse",
            KernelShape::Rect => "rect",
            KernelShape::Cross => "cross",
        };
        write!(f, "{shape}:{}", self.size)
    }
}

impl FromStr for Kernel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (shape, size) = s.split_once(':').ok_or_else(|| format!("kernel {s:?} is not <shape>:<size>"))?;
        let shape = match shape {
            "ellipse" => KernelShape::Ellipse,
            "rect" => KernelShape::Rect,
            "cross" => KernelShape::Cross,
            other => return Err(format!("unknown kernel shape {other:?}")),
        };
        let size: usize = size.parse().map_err(|_| format!("bad kernel size in {s:?}"))?;
        if size == 0 || size.is_multiple_of(2) || size > 31 {
            return Err(format!("kernel size must be odd and in 1..=31, got {size}"));
        }
        Ok(Kernel { shape, size })
    }
}

impl TryFrom<String> for Kernel {
    type Error = String;
    fn try_from(s: String) -> std::result::Result<Self, String> {
        s.parse()
    }
}

impl From<Kernel> for String {
    fn from(k: Kernel) -> String {
        k.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegionParams {
    pub min_area_frac: f64,
    pub dilate_iters: usize,
    pub erode_iters: usize,
    pub kernel: Kernel,
}

impl Default for RegionParams {
    fn default() -> Self {
        RegionParams {
            min_area_frac: 0.0002,
            dilate_iters: 2,
            erode_iters: 1,
            kernel: Kernel::new(KernelShape::Ellipse, 5),
        }
    }
}

impl RegionParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.min_area_frac) {
            return Err(Error::Config("regions.min_area_frac must lie in [0, 1)".into()));
        }
        if self.dilate_iters > 16 || self.erode_iters > 16 {
            return Err(Error::Config("regions iteration counts must be at most 16".into()));
        }
        Ok(())
    }

    /// Minimum kept component area for a frame of the given size.
    pub fn min_area_px(&self, width: usize, height: usize) -> usize {
        (self.min_area_frac * (width * height) as f64).ceil() as usize
    }
}

fn dilate(mask: &BinaryMask, offsets: &[(isize, isize)]) -> BinaryMask {
    let (w, h) = (mask.width as isize, mask.height as isize);
    let mut out = BinaryMask::zeros(mask.width, mask.height);
    for y in 0..h {
        for x in 0..w {
            if mask.data[(y * w + x) as usize] == 0 {
                continue;
            }
            for &(dx, dy) in offsets {
                let (nx, ny) = (x + dx, y + dy);
                if nx >= 0 && ny >= 0 && nx < w && ny < h {
                    out.data[(ny * w + nx) as usize] = 1;
                }
            }
        }
    }
    out
}

// Pixels outside the frame count as set, so borders do not erode.
fn erode(mask: &BinaryMask, offsets: &[(isize, isize)]) -> BinaryMask {
    let (w, h) = (mask.width as isize, mask.height as isize);
    let mut out = BinaryMask::zeros(mask.width, mask.height);
    for y in 0..h {
        for x in 0..w {
            if mask.data[(y * w + x) as usize] == 0 {
                continue;
            }
            let keep = offsets.iter().all(|&(dx, dy)| {
                let (nx, ny) = (x + dx, y + dy);
                nx < 0 || ny < 0 || nx >= w || ny >= h || mask.data[(ny * w + nx) as usize] != 0
            });
            out.data[(y * w + x) as usize] = keep as u8;
        }
    }
    out
}

/// Dilation followed by erosion with the configured element.
pub fn clean_mask(mask: &BinaryMask, params: &RegionParams) -> BinaryMask {
    if mask.is_empty() {
        return mask.clone();
    }
    let offsets = params.kernel.offsets();
    let mut out = mask.clone();
    for _ in 0..params.dilate_iters {
        out = dilate(&out, &offsets);
    }
    for _ in 0..params.erode_iters {
        out = erode(&out, &offsets);
    }
    out
}

/// One kept foreground component.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub frame_index: u64,
    pub bbox: BBox,
    /// Outer boundary pixels in tracing order.
    pub contour: Vec<(i64, i64)>,
    /// Convex hull vertices, counter-clockwise in image coordinates.
    pub hull: Vec<(i64, i64)>,
    /// Pixels enclosed by the outer contour (holes included).
    pub area_px: usize,
    /// Filled component over the bbox, row-major 0/1.
    pub mask_patch: Vec<u8>,
    /// Frame pixels over the bbox, row-major, all channels.
    pub image_patch: Vec<u8>,
}

const NEIGHBOURS: [(i64, i64); 8] = [(1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1)];

fn direction_of(dx: i64, dy: i64) -> usize {
    NEIGHBOURS
        .iter()
        .position(|&d| d == (dx, dy))
        .expect("unit step between 8-neighbours")
}

/// 8-connected component labels (0 = background, 1.. in raster order of
/// first pixel) and the pixel count of each label.
pub fn label_components(mask: &BinaryMask) -> (Vec<u32>, Vec<usize>) {
    let (w, h) = (mask.width, mask.height);
    let mut labels = vec![0u32; w * h];
    let mut sizes = vec![0usize];
    let mut stack = Vec::new();
    for start in 0..w * h {
        if mask.data[start] == 0 || labels[start] != 0 {
            continue;
        }
        let id = sizes.len() as u32;
        let mut size = 0;
        labels[start] = id;
        stack.push(start);
        while let Some(p) = stack.pop() {
            size += 1;
            let (x, y) = ((p % w) as i64, (p / w) as i64);
            for (dx, dy) in NEIGHBOURS {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                    continue;
                }
                let q = ny as usize * w + nx as usize;
                if mask.data[q] != 0 && labels[q] == 0 {
                    labels[q] = id;
                    stack.push(q);
                }
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

/// Moore-neighbour trace of the outer boundary of the component `id`,
/// starting from its first pixel in raster order.
pub fn trace_contour(labels: &[u32], width: usize, height: usize, id: u32, start: (i64, i64)) -> Vec<(i64, i64)> {
    let inside = |x: i64, y: i64| {
        x >= 0 && y >= 0 && x < width as i64 && y < height as i64 && labels[y as usize * width + x as usize] == id
    };
    let mut contour = vec![start];
    // The raster-first pixel always has background to its west.
    let mut back = 4usize;
    let mut p = start;
    let mut first_move = None;
    let limit = 4 * width * height + 8;
    for _ in 0..limit {
        let mut next = None;
        for i in 1..=8 {
            let d = (back + i) % 8;
            let (dx, dy) = NEIGHBOURS[d];
            if inside(p.0 + dx, p.1 + dy) {
                let prev = NEIGHBOURS[(back + i - 1) % 8];
                let q = (p.0 + dx, p.1 + dy);
                let b = (p.0 + prev.0, p.1 + prev.1);
                next = Some((q, direction_of(b.0 - q.0, b.1 - q.1)));
                break;
            }
        }
        let Some((q, new_back)) = next else {
            break; // isolated pixel
        };
        match first_move {
            None => first_move = Some((p, q)),
            Some(m) if m == (p, q) => {
                contour.pop();
                break;
            }
            _ => {}
        }
        contour.push(q);
        p = q;
        back = new_back;
    }
    if contour.len() > 1 && contour.last() == Some(&start) {
        contour.pop();
    }
    contour
}

fn cross(o: (i64, i64), a: (i64, i64), b: (i64, i64)) -> i64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Convex hull by monotone chain; collinear points are dropped.
pub fn convex_hull(points: &[(i64, i64)]) -> Vec<(i64, i64)> {
    let mut pts = points.to_vec();
    pts.sort_unstable();
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut lower: Vec<(i64, i64)> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(i64, i64)> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Smallest box containing every hull vertex.
pub fn hull_bbox(hull: &[(i64, i64)]) -> BBox {
    let min_x = hull.iter().map(|p| p.0).min().unwrap_or(0);
    let max_x = hull.iter().map(|p| p.0).max().unwrap_or(0);
    let min_y = hull.iter().map(|p| p.1).min().unwrap_or(0);
    let max_y = hull.iter().map(|p| p.1).max().unwrap_or(0);
    BBox::new(
        min_x as usize,
        min_y as usize,
        (max_x - min_x + 1) as usize,
        (max_y - min_y + 1) as usize,
    )
}

/// Marks the cells of a `w`×`h` grid not reachable from the border through
/// 4-connected unset cells, i.e. `set` with its holes filled.
fn fill_holes(set: &[bool], w: usize, h: usize) -> Vec<bool> {
    let mut outside = vec![false; w * h];
    let mut stack = Vec::new();
    let seed = |i: usize, stack: &mut Vec<usize>, outside: &mut Vec<bool>| {
        if !set[i] && !outside[i] {
            outside[i] = true;
            stack.push(i);
        }
    };
    for x in 0..w {
        seed(x, &mut stack, &mut outside);
        seed((h - 1) * w + x, &mut stack, &mut outside);
    }
    for y in 0..h {
        seed(y * w, &mut stack, &mut outside);
        seed(y * w + w - 1, &mut stack, &mut outside);
    }
    while let Some(i) = stack.pop() {
        let (x, y) = (i % w, i / w);
        let mut push = |j: usize| {
            if !set[j] && !outside[j] {
                outside[j] = true;
                stack.push(j);
            }
        };
        if x > 0 {
            push(i - 1);
        }
        if x + 1 < w {
            push(i + 1);
        }
        if y > 0 {
            push(i - w);
        }
        if y + 1 < h {
            push(i + w);
        }
    }
    outside.into_iter().map(|o| !o).collect()
}

/// Fraction of the frame covered by foreground outer contours (holes filled).
pub fn enclosed_fraction(mask: &BinaryMask) -> f64 {
    if mask.is_empty() {
        return 0.0;
    }
    let set: Vec<bool> = mask.data.iter().map(|&v| v != 0).collect();
    let filled = fill_holes(&set, mask.width, mask.height);
    filled.iter().filter(|&&f| f).count() as f64 / (mask.width * mask.height) as f64
}

/// One detection per 8-connected component whose enclosed area reaches
/// `min_area_px`, sorted by box origin `(y, x)`.
pub fn extract_regions(mask: &BinaryMask, frame: &Frame, min_area_px: usize) -> Result<Vec<Detection>> {
    if mask.width != frame.width() || mask.height != frame.height() {
        return Err(Error::Geometry(format!(
            "mask {}x{} does not match frame {}x{}",
            mask.width,
            mask.height,
            frame.width(),
            frame.height()
        )));
    }
    if mask.is_empty() {
        return Ok(Vec::new());
    }
    let (w, h) = (mask.width, mask.height);
    let (labels, sizes) = label_components(mask);
    let mut first_pixel = vec![usize::MAX; sizes.len()];
    for (i, &l) in labels.iter().enumerate() {
        if l != 0 && first_pixel[l as usize] == usize::MAX {
            first_pixel[l as usize] = i;
        }
    }

    let mut out = Vec::new();
    for id in 1..sizes.len() {
        let start = first_pixel[id];
        let start = ((start % w) as i64, (start / w) as i64);
        let contour = trace_contour(&labels, w, h, id as u32, start);
        let hull = convex_hull(&contour);
        let bbox = hull_bbox(&hull);
        let mut set = vec![false; bbox.area()];
        for y in 0..bbox.h {
            for x in 0..bbox.w {
                set[y * bbox.w + x] = labels[(bbox.y + y) * w + bbox.x + x] == id as u32;
            }
        }
        let filled = fill_holes(&set, bbox.w, bbox.h);
        let area_px = filled.iter().filter(|&&f| f).count();
        if area_px < min_area_px {
            continue;
        }
        out.push(Detection {
            frame_index: frame.index(),
            bbox,
            contour,
            hull,
            area_px,
            mask_patch: filled.into_iter().map(u8::from).collect(),
            image_patch: frame.crop(&bbox),
        });
    }
    out.sort_by_key(|d| (d.bbox.y, d.bbox.x));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(rows: &[&str]) -> BinaryMask {
        let h = rows.len();
        let w = rows[0].len();
        let data = rows.iter().flat_map(|r| r.bytes().map(|b| (b == b'#') as u8)).collect();
        BinaryMask { width: w, height: h, data }
    }

    fn blank_frame(w: usize, h: usize) -> Frame {
        Frame::filled(7, 0, w, h, &[0]).unwrap()
    }

    // Independent morphology straight from the set definition.
    fn naive_morph(mask: &BinaryMask, kernel: &Kernel, dilate: bool) -> BinaryMask {
        let offs = kernel.offsets();
        let mut out = BinaryMask::zeros(mask.width, mask.height);
        for y in 0..mask.height as isize {
            for x in 0..mask.width as isize {
                let hits = offs.iter().map(|&(dx, dy)| {
                    let (nx, ny) = (x - dx, y - dy);
                    if nx < 0 || ny < 0 || nx >= mask.width as isize || ny >= mask.height as isize {
                        !dilate
                    } else {
                        mask.get(nx as usize, ny as usize)
                    }
                });
                let v = if dilate { hits.clone().any(|b| b) } else { hits.clone().all(|b| b) };
                out.set(x as usize, y as usize, v);
            }
        }
        out
    }

    #[test]
    fn ellipse_matches_reference_shape() {
        let k = Kernel::new(KernelShape::Ellipse, 5);
        let offs = k.offsets();
        assert_eq!(offs.len(), 17);
        assert!(!offs.contains(&(1, 2)) && offs.contains(&(0, 2)) && offs.contains(&(2, 1)));
        assert_eq!("ellipse:5".parse::<Kernel>().unwrap(), k);
        assert!("ellipse:4".parse::<Kernel>().is_err());
    }

    #[test]
    fn all_zero_mask_stays_zero() {
        let m = BinaryMask::zeros(12, 9);
        assert_eq!(clean_mask(&m, &RegionParams::default()), m);
    }

    #[test]
    fn closing_fills_interior_hole() {
        let mut m = BinaryMask::zeros(40, 40);
        m.fill_rect(&BBox::new(10, 10, 20, 20));
        m.set(20, 20, false);
        let out = clean_mask(&m, &RegionParams::default());
        assert!(out.get(20, 20));
    }

    #[test]
    fn isolated_pixel_is_removed_by_double_erosion() {
        let mut m = BinaryMask::zeros(9, 9);
        m.set(4, 4, true);
        let kernel = Kernel::new(KernelShape::Rect, 3);
        let params = RegionParams {
            dilate_iters: 1,
            erode_iters: 2,
            kernel,
            ..RegionParams::default()
        };
        // Oracle: dilate once, erode twice with the naive definitions.
        let mut oracle = naive_morph(&m, &kernel, true);
        let after_dilation = oracle.count();
        oracle = naive_morph(&oracle, &kernel, false);
        let after_one_erosion = oracle.count();
        oracle = naive_morph(&oracle, &kernel, false);
        assert_eq!((after_dilation, after_one_erosion, oracle.count()), (9, 1, 0));
        assert_eq!(clean_mask(&m, &params), oracle);
    }

    #[test]
    fn sparse_morphology_matches_naive_definition() {
        let m = mask_from(&[
            "#.........",
            "..##......",
            "..###...#.",
            "......###.",
            ".#....#..#",
            "........##",
        ]);
        for kernel in [
            Kernel::new(KernelShape::Ellipse, 5),
            Kernel::new(KernelShape::Rect, 3),
            Kernel::new(KernelShape::Cross, 3),
        ] {
            let offs = kernel.offsets();
            assert_eq!(dilate(&m, &offs), naive_morph(&m, &kernel, true));
            assert_eq!(erode(&m, &offs), naive_morph(&m, &kernel, false));
        }
    }

    #[test]
    fn two_squares_give_two_exact_boxes() {
        let mut m = BinaryMask::zeros(60, 40);
        m.fill_rect(&BBox::new(5, 5, 10, 10));
        m.fill_rect(&BBox::new(30, 20, 10, 10));
        let dets = extract_regions(&m, &blank_frame(60, 40), 1).unwrap();
        assert_eq!(dets.len(), 2);
        assert_eq!(dets[0].bbox, BBox::new(5, 5, 10, 10));
        assert_eq!(dets[1].bbox, BBox::new(30, 20, 10, 10));
        assert_eq!(dets[0].area_px, 100);
        assert_eq!(dets[0].frame_index, 7);
        assert!(dets[0].mask_patch.iter().all(|&v| v == 1));
    }

    // Brute-force hull: a point pair is a hull edge iff every other point
    // lies on one side of the line through it.
    fn brute_hull_vertices(points: &[(i64, i64)]) -> Vec<(i64, i64)> {
        let mut pts = points.to_vec();
        pts.sort_unstable();
        pts.dedup();
        let mut verts = Vec::new();
        for &p in &pts {
            // p is a hull vertex iff it is not inside or on the boundary
            // segment of any triangle / segment of other points.
            let mut extreme = false;
            for angle in 0..3600 {
                let t = angle as f64 * std::f64::consts::PI / 1800.0;
                let (dx, dy) = (t.cos(), t.sin());
                let score = |q: (i64, i64)| q.0 as f64 * dx + q.1 as f64 * dy;
                let best = pts.iter().map(|&q| score(q)).fold(f64::MIN, f64::max);
                let unique = pts.iter().filter(|&&q| (score(q) - best).abs() < 1e-9).count() == 1;
                if unique && (score(p) - best).abs() < 1e-9 {
                    extreme = true;
                    break;
                }
            }
            if extreme {
                verts.push(p);
            }
        }
        verts
    }

    #[test]
    fn l_shape_hull_and_box() {
        let m = mask_from(&[
            "............",
            ".###........",
            ".###........",
            ".###........",
            ".###........",
            ".###........",
            ".##########.",
            ".##########.",
            ".##########.",
            "............",
        ]);
        let dets = extract_regions(&m, &blank_frame(12, 10), 1).unwrap();
        assert_eq!(dets.len(), 1);
        let d = &dets[0];
        assert_eq!(d.bbox, BBox::new(1, 1, 10, 8));
        let mut oracle = brute_hull_vertices(&d.contour);
        oracle.sort_unstable();
        let mut hull = d.hull.clone();
        hull.sort_unstable();
        assert_eq!(hull, oracle);
        assert_eq!(hull.len(), 5);
    }

    #[test]
    fn small_components_are_filtered() {
        let m = mask_from(&["....", ".##.", ".#..", "...."]);
        assert!(extract_regions(&m, &blank_frame(4, 4), 20).unwrap().is_empty());
        assert_eq!(extract_regions(&m, &blank_frame(4, 4), 3).unwrap().len(), 1);
    }

    #[test]
    fn ring_area_includes_hole() {
        let m = mask_from(&["#####", "#...#", "#...#", "#####"]);
        let d = &extract_regions(&m, &blank_frame(5, 4), 1).unwrap()[0];
        assert_eq!(d.area_px, 20);
        assert_eq!(d.contour.len(), 14);
        assert!((enclosed_fraction(&m) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn contour_of_single_pixel_and_diagonal() {
        let m = mask_from(&["#...", ".#..", "..#.", "...."]);
        let d = &extract_regions(&m, &blank_frame(4, 4), 1).unwrap()[0];
        assert_eq!(d.bbox, BBox::new(0, 0, 3, 3));
        assert_eq!(d.contour, vec![(0, 0), (1, 1), (2, 2), (1, 1)]);
        let m = mask_from(&["..", ".#"]);
        let d = &extract_regions(&m, &blank_frame(2, 2), 1).unwrap()[0];
        assert_eq!(d.contour, vec![(1, 1)]);
        assert_eq!(d.hull, vec![(1, 1)]);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let m = BinaryMask::zeros(4, 4);
        assert!(extract_regions(&m, &blank_frame(5, 4), 1).is_err());
    }
}
