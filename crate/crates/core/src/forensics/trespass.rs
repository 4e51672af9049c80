use std::fmt;

use serde::{Deserialize, Serialize};

use crate::bgmodel::{BackgroundModel, BgParams, LabelMask};
use crate::error::{Error, Result};
use crate::regions::{clean_mask, BinaryMask, RegionParams};
use crate::video_io::Frame;

use super::{AlarmDetail, AlarmEvent, AlarmKind, Persistence};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PolygonId {
    Number(u64),
    Name(String),
}

impl fmt::Display for PolygonId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolygonId::Number(n) => write!(f, "{n}"),
            PolygonId::Name(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Polygon {
    pub id: PolygonId,
    pub points: Vec<[f64; 2]>,
}

impl Polygon {
    pub fn list_from_json(text: &str) -> Result<Vec<Polygon>> {
        serde_json::from_str(text).map_err(|e| Error::json("polygons", e))
    }

    pub fn rect(id: u64, x: f64, y: f64, w: f64, h: f64) -> Polygon {
        Polygon {
            id: PolygonId::Number(id),
            points: vec![[x, y], [x + w, y], [x + w, y + h], [x, y + h]],
        }
    }

    fn validate(&self, width: usize, height: usize) -> Result<()> {
        let n = self.points.len();
        if n < 3 {
            return Err(Error::DegeneratePolygon { id: self.id.to_string(), vertices: n });
        }
        for p in &self.points {
            if !(0.0..=width as f64).contains(&p[0]) || !(0.0..=height as f64).contains(&p[1]) {
                return Err(Error::Geometry(format!("polygon {} has vertex {p:?} outside the frame", self.id)));
            }
        }
        for i in 0..n {
            for j in i + 1..n {
                // Adjacent edges share a vertex by construction.
                if j == i + 1 || (i == 0 && j == n - 1) {
                    continue;
                }
                let (a, b) = (self.points[i], self.points[(i + 1) % n]);
                let (c, d) = (self.points[j], self.points[(j + 1) % n]);
                if segments_cross(a, b, c, d) {
                    return Err(Error::Geometry(format!("polygon {} intersects itself", self.id)));
                }
            }
        }
        Ok(())
    }
}

fn orient(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn on_segment(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> bool {
    p[0] >= a[0].min(b[0]) && p[0] <= a[0].max(b[0]) && p[1] >= a[1].min(b[1]) && p[1] <= a[1].max(b[1])
}

fn segments_cross(a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) -> bool {
    let (d1, d2) = (orient(c, d, a), orient(c, d, b));
    let (d3, d4) = (orient(a, b, c), orient(a, b, d));
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    (d1 == 0.0 && on_segment(c, d, a))
        || (d2 == 0.0 && on_segment(c, d, b))
        || (d3 == 0.0 && on_segment(a, b, c))
        || (d4 == 0.0 && on_segment(a, b, d))
}

/// Even-odd rule.
pub fn point_in_polygon(points: &[[f64; 2]], x: f64, y: f64) -> bool {
    let n = points.len();
    let mut inside = false;
    let mut j = n.wrapping_sub(1);
    for i in 0..n {
        let (pi, pj) = (points[i], points[j]);
        if (pi[1] > y) != (pj[1] > y) && x < (pj[0] - pi[0]) * (y - pi[1]) / (pj[1] - pi[1]) + pi[0] {
            inside = !inside;
        }
        j = i;
    }
    inside
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrespassParams {
    /// Foreground share of a zone above which the zone counts as entered.
    pub area_frac: f64,
    pub persistence: usize,
}

impl Default for TrespassParams {
    fn default() -> Self {
        TrespassParams { area_frac: 0.01, persistence: 2 }
    }
}

impl TrespassParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.area_frac) {
            return Err(Error::Config(format!("trespass.area_frac must be in [0, 1), got {}", self.area_frac)));
        }
        if self.persistence == 0 {
            return Err(Error::Config("trespass.persistence must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Zone {
    id: PolygonId,
    /// Pixel indices whose centers fall inside the polygon.
    pixels: Vec<usize>,
    run: Persistence,
}

#[derive(Debug, Clone)]
pub struct TrespassMonitor {
    width: usize,
    height: usize,
    params: TrespassParams,
    zones: Vec<Zone>,
}

impl TrespassMonitor {
    pub fn new(polygons: &[Polygon], params: TrespassParams, width: usize, height: usize) -> Result<Self> {
        params.validate()?;
        let mut zones = Vec::with_capacity(polygons.len());
        for poly in polygons {
            poly.validate(width, height)?;
            let mut pixels = Vec::new();
            for y in 0..height {
                for x in 0..width {
                    if point_in_polygon(&poly.points, x as f64 + 0.5, y as f64 + 0.5) {
                        pixels.push(y * width + x);
                    }
                }
            }
            zones.push(Zone { id: poly.id.clone(), pixels, run: Persistence::default() });
        }
        Ok(TrespassMonitor { width, height, params, zones })
    }

    pub fn zone_area(&self, i: usize) -> usize {
        self.zones[i].pixels.len()
    }

    /// Foreground share of each zone.
    pub fn fractions(&self, mask: &BinaryMask) -> Vec<f64> {
        self.zones
            .iter()
            .map(|z| {
                if z.pixels.is_empty() {
                    0.0
                } else {
                    z.pixels.iter().filter(|&&i| mask.data[i] != 0).count() as f64 / z.pixels.len() as f64
                }
            })
            .collect()
    }

    pub fn step(&mut self, mask: &BinaryMask, frame_index: u64) -> Result<Vec<AlarmEvent>> {
        if (mask.width, mask.height) != (self.width, self.height) {
            return Err(Error::Geometry(format!(
                "mask {}x{} does not match monitor {}x{}",
                mask.width, mask.height, self.width, self.height
            )));
        }
        let fractions = self.fractions(mask);
        let mut events = Vec::new();
        for (zone, fraction) in self.zones.iter_mut().zip(fractions) {
            let hit = fraction > self.params.area_frac;
            if let Some(start) = zone.run.update(hit, frame_index, self.params.persistence) {
                events.push(AlarmEvent {
                    kind: AlarmKind::Trespass,
                    start_frame: start,
                    end_frame: frame_index,
                    score: fraction,
                    detail: AlarmDetail::Polygon { id: zone.id.clone(), fraction },
                });
            }
        }
        Ok(events)
    }

    pub fn step_labels(&mut self, labels: &LabelMask, frame_index: u64) -> Result<Vec<AlarmEvent>> {
        self.step(&labels.foreground(), frame_index)
    }
}

/// Runs background subtraction and zone monitoring over a stream.
pub fn trespass_monitor<I>(
    frames: I,
    polygons: &[Polygon],
    bg: &BgParams,
    regions: &RegionParams,
    params: &TrespassParams,
) -> Result<Vec<AlarmEvent>>
where
    I: IntoIterator<Item = Result<Frame>>,
{
    let mut state: Option<(BackgroundModel, TrespassMonitor)> = None;
    let mut events = Vec::new();
    for frame in frames {
        let frame = frame?;
        let (model, monitor) = match &mut state {
            Some(s) => s,
            slot => slot.insert((
                BackgroundModel::for_frame(*bg, &frame)?,
                TrespassMonitor::new(polygons, *params, frame.width(), frame.height())?,
            )),
        };
        let labels = model.apply(&frame)?;
        events.extend(monitor.step(&clean_mask(&labels.foreground(), regions), frame.index())?);
    }
    Ok(events)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;

    fn mask_with(w: usize, h: usize, b: BBox) -> BinaryMask {
        let mut m = BinaryMask::zeros(w, h);
        m.fill_rect(&b);
        m
    }

    #[test]
    fn blob_inside_zone_alarms() {
        let zone = Polygon::rect(1, 10.0, 10.0, 40.0, 50.0);
        let mut mon = TrespassMonitor::new(&[zone], TrespassParams::default(), 100, 100).unwrap();
        // 100 px of a 2000 px zone: 5 %.
        let m = mask_with(100, 100, BBox::new(20, 20, 10, 10));
        assert!((mon.fractions(&m)[0] - 0.05).abs() < 1e-12);
        assert!(mon.step(&m, 0).unwrap().is_empty());
        let e = mon.step(&m, 1).unwrap();
        assert_eq!(e.len(), 1);
        assert_eq!((e[0].kind, e[0].start_frame, e[0].end_frame), (AlarmKind::Trespass, 0, 1));
    }

    #[test]
    fn blob_outside_zone_is_quiet() {
        let zone = Polygon::rect(1, 10.0, 10.0, 40.0, 50.0);
        let mut mon = TrespassMonitor::new(&[zone], TrespassParams::default(), 100, 100).unwrap();
        let m = mask_with(100, 100, BBox::new(60, 60, 20, 20));
        for i in 0..10 {
            assert!(mon.step(&m, i).unwrap().is_empty());
        }
    }

    #[test]
    fn degenerate_and_bad_polygons() {
        let two = Polygon { id: PolygonId::Number(4), points: vec![[0.0, 0.0], [5.0, 5.0]] };
        assert!(matches!(
            TrespassMonitor::new(&[two], TrespassParams::default(), 10, 10),
            Err(Error::DegeneratePolygon { vertices: 2, .. })
        ));
        let bow = Polygon { id: PolygonId::Number(5), points: vec![[0.0, 0.0], [9.0, 9.0], [9.0, 0.0], [0.0, 9.0]] };
        assert!(TrespassMonitor::new(&[bow], TrespassParams::default(), 10, 10).is_err());
        let outside = Polygon::rect(6, 5.0, 5.0, 10.0, 10.0);
        assert!(TrespassMonitor::new(&[outside], TrespassParams::default(), 10, 10).is_err());
    }

    #[test]
    fn polygon_json() {
        let list = Polygon::list_from_json(r#"[{"id": 1, "points": [[0,0],[4,0],[0,4]]}, {"id": "door", "points": [[1,1],[2,1],[2,2]]}]"#).unwrap();
        assert_eq!(list[0].id, PolygonId::Number(1));
        assert_eq!(list[1].id.to_string(), "door");
    }

    #[test]
    fn even_odd_on_a_triangle() {
        let tri = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]];
        assert!(point_in_polygon(&tri, 2.0, 2.0));
        assert!(!point_in_polygon(&tri, 8.0, 8.0));
        assert!(!point_in_polygon(&tri, -1.0, 2.0));
    }

    mod props {
        use proptest::prelude::*;

        use super::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            // The alarm rule compares a share of the zone, so growing the zone
            // keeps an alarm exactly while the share stays above `area_frac`:
            // with c foreground pixels in an enlarged zone of area A', that is
            // c / A' > area_frac.
            #[test]
            fn enlarging_a_zone_keeps_the_alarm_within_the_share_bound(
                bx in 5usize..30, by in 5usize..30, bw in 2usize..12, bh in 2usize..12,
                grow in 0usize..20,
                area_frac in 0.001f64..0.2,
            ) {
                let (w, h) = (80, 80);
                let blob = BBox::new(bx, by, bw, bh);
                let mask = mask_with(w, h, blob);
                let small = Polygon::rect(1, 2.0, 2.0, 40.0, 40.0);
                let big = Polygon::rect(1, 2.0, 2.0, (40 + grow) as f64, (40 + grow) as f64);
                let params = TrespassParams { area_frac, persistence: 1 };
                let mut a = TrespassMonitor::new(&[small], params, w, h).unwrap();
                let mut b = TrespassMonitor::new(&[big], params, w, h).unwrap();
                let fired_small = !a.step(&mask, 0).unwrap().is_empty();
                prop_assume!(fired_small);
                // Foreground inside the enlarged zone, counted independently.
                let c = (0..h).flat_map(|y| (0..w).map(move |x| (x, y)))
                    .filter(|&(x, y)| mask.get(x, y) && point_in_polygon(&b_points(grow), x as f64 + 0.5, y as f64 + 0.5))
                    .count();
                let area = b.zone_area(0);
                let fired_big = !b.step(&mask, 0).unwrap().is_empty();
                prop_assert_eq!(fired_big, (c as f64) / (area as f64) > area_frac);
                // Any enlargement stays alarmed while A' < c / area_frac.
                if (area as f64) < c as f64 / area_frac {
                    prop_assert!(fired_big);
                }
            }
        }

        fn b_points(grow: usize) -> Vec<[f64; 2]> {
            Polygon::rect(1, 2.0, 2.0, (40 + grow) as f64, (40 + grow) as f64).points
        }
    }
}
