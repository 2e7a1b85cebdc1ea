//! Facial landmarks and their rasterization into one-hot landmark maps.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::exec::Exec;
use crate::raster::Planar;

pub const NUM_LANDMARKS: usize = 17;

/// Seventeen normalized `(x, y)` points; `x` runs along image columns.
///
/// Point `(x, y)` falls in pixel column `floor(x * W)` and row `floor(y * H)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    points: Vec<[f64; 2]>,
}

impl LandmarkSet {
    pub fn new(points: Vec<[f64; 2]>) -> Result<Self> {
        if points.len() != NUM_LANDMARKS {
            return Err(CoreError::arg(format!(
                "expected {NUM_LANDMARKS} landmarks, got {}",
                points.len()
            )));
        }
        if let Some(p) = points.iter().find(|p| !p.iter().all(|v| (0.0..=1.0).contains(v))) {
            return Err(CoreError::arg(format!("landmark ({}, {}) outside [0,1]", p[0], p[1])));
        }
        Ok(LandmarkSet { points })
    }

    /// Builds from a flat `[x0, y0, x1, y1, ...]` vector, clamping into [0, 1].
    pub fn from_flat_clamped(v: &[f64]) -> Result<Self> {
        if v.len() != 2 * NUM_LANDMARKS {
            return Err(CoreError::arg(format!(
                "expected {} coordinates, got {}",
                2 * NUM_LANDMARKS,
                v.len()
            )));
        }
        LandmarkSet::new(
            v.chunks(2)
                .map(|p| [p[0].clamp(0.0, 1.0), p[1].clamp(0.0, 1.0)])
                .collect(),
        )
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    /// The 34-dimensional vector `[x0, y0, x1, y1, ...]`.
    pub fn flatten(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p[0], p[1]]).collect()
    }

    /// Mean Euclidean distance between corresponding points.
    pub fn mean_displacement(&self, other: &LandmarkSet) -> f64 {
        self.points
            .iter()
            .zip(&other.points)
            .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
            .sum::<f64>()
            / NUM_LANDMARKS as f64
    }

    /// Parses the text format: one `x y` pair per non-empty line.
    pub fn parse(text: &str) -> std::result::Result<Vec<[f64; 2]>, String> {
        let mut pts = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let vals: Vec<&str> = line.split_whitespace().collect();
            if vals.len() != 2 {
                return Err(format!("line {}: expected `x y`, got `{line}`", i + 1));
            }
            let x: f64 = vals[0].parse().map_err(|e| format!("line {}: {e}", i + 1))?;
            let y: f64 = vals[1].parse().map_err(|e| format!("line {}: {e}", i + 1))?;
            pts.push([x, y]);
        }
        Ok(pts)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        let pts = LandmarkSet::parse(&text).map_err(|msg| CoreError::Format {
            path: path.to_path_buf(),
            msg,
        })?;
        LandmarkSet::new(pts).map_err(|e| CoreError::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_string()).map_err(|e| CoreError::io(path, e))
    }
}

impl fmt::Display for LandmarkSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.points {
            writeln!(f, "{} {}", p[0], p[1])?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupKind {
    Polyline,
    ClosedRegion,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LandmarkGroup {
    pub name: String,
    pub kind: GroupKind,
    pub indices: Vec<usize>,
}

/// Which landmarks connect into which channel of a landmark map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LandmarkGrouping {
    #[serde(rename = "group")]
    groups: Vec<LandmarkGroup>,
}

/// Default 17-point scheme used by the toy generator:
///
/// | idx    | point                                              |
/// |--------|----------------------------------------------------|
/// | 0-2    | face contour: left cheek, chin, right cheek        |
/// | 3-4    | left brow: outer, inner                            |
/// | 5-6    | right brow: inner, outer                           |
/// | 7-8    | left eye: outer, inner corner                      |
/// | 9-10   | right eye: inner, outer corner                     |
/// | 11-12  | nose: bridge top, tip                              |
/// | 13-16  | mouth: left corner, upper mid, right corner, lower mid |
pub const DEFAULT_GROUPING_TOML: &str = r#"
[[group]]
name = "contour"
kind = "polyline"
indices = [0, 1, 2]

[[group]]
name = "brow-l"
kind = "polyline"
indices = [3, 4]

[[group]]
name = "brow-r"
kind = "polyline"
indices = [5, 6]

[[group]]
name = "eye-l"
kind = "closed-region"
indices = [7, 8]

[[group]]
name = "eye-r"
kind = "closed-region"
indices = [9, 10]

[[group]]
name = "nose"
kind = "polyline"
indices = [11, 12]

[[group]]
name = "mouth"
kind = "closed-region"
indices = [13, 14, 15, 16]
"#;

impl LandmarkGrouping {
    pub fn new(groups: Vec<LandmarkGroup>) -> Result<Self> {
        if groups.is_empty() {
            return Err(CoreError::arg("grouping needs at least one group"));
        }
        let mut names = HashSet::new();
        for g in &groups {
            if !names.insert(g.name.as_str()) {
                return Err(CoreError::arg(format!("duplicate group name `{}`", g.name)));
            }
            if g.indices.is_empty() {
                return Err(CoreError::arg(format!("group `{}` has no landmarks", g.name)));
            }
            if let Some(i) = g.indices.iter().find(|&&i| i >= NUM_LANDMARKS) {
                return Err(CoreError::arg(format!(
                    "group `{}` references landmark {i} (max {})",
                    g.name,
                    NUM_LANDMARKS - 1
                )));
            }
        }
        Ok(LandmarkGrouping { groups })
    }

    pub fn groups(&self) -> &[LandmarkGroup] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn from_toml(text: &str) -> std::result::Result<Self, String> {
        let raw: LandmarkGrouping = toml::from_str(text).map_err(|e| e.to_string())?;
        LandmarkGrouping::new(raw.groups).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        LandmarkGrouping::from_toml(&text).map_err(|msg| CoreError::Format {
            path: path.to_path_buf(),
            msg,
        })
    }

    /// Stable content hash (FNV-1a over the canonical JSON form), embedded in
    /// checkpoints so a generator is never applied with a different grouping.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("grouping serializes");
        let mut h: u64 = 0xcbf29ce484222325;
        for b in json.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }
}

impl Default for LandmarkGrouping {
    fn default() -> Self {
        LandmarkGrouping::from_toml(DEFAULT_GROUPING_TOML).expect("default grouping is valid")
    }
}

/// `G x H x W` binary raster, one channel per landmark group.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkMap(Planar<f32>);

impl LandmarkMap {
    pub fn channels(&self) -> &Planar<f32> {
        &self.0
    }

    pub fn num_groups(&self) -> usize {
        self.0.channels()
    }

    pub fn into_inner(self) -> Planar<f32> {
        self.0
    }
}

fn to_pixel(p: [f64; 2], h: usize, w: usize) -> (i64, i64) {
    let x = ((p[0] * w as f64).floor() as i64).clamp(0, w as i64 - 1);
    let y = ((p[1] * h as f64).floor() as i64).clamp(0, h as i64 - 1);
    (x, y)
}

/// All pixels of the Bresenham segment from `a` to `b`, inclusive.
pub fn bresenham(a: (i64, i64), b: (i64, i64)) -> Vec<(i64, i64)> {
    let (mut x0, mut y0) = a;
    let (x1, y1) = b;
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    let mut out = Vec::new();
    loop {
        out.push((x0, y0));
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
    out
}

/// Even-odd scanline fill of a polygon with integer vertices; a pixel is inside
/// when its lattice point lies strictly left of an odd number of edge crossings
/// on its row (half-open vertex rule).
fn fill_polygon(vertices: &[(i64, i64)], h: usize, w: usize, plane: &mut [f32]) {
    if vertices.len() < 3 {
        return;
    }
    let ymin = vertices.iter().map(|v| v.1).min().unwrap().max(0);
    let ymax = vertices.iter().map(|v| v.1).max().unwrap().min(h as i64 - 1);
    for y in ymin..=ymax {
        let yf = y as f64;
        let mut xs = Vec::new();
        for i in 0..vertices.len() {
            let (x0, y0) = vertices[i];
            let (x1, y1) = vertices[(i + 1) % vertices.len()];
            if (y0 <= y && y < y1) || (y1 <= y && y < y0) {
                let t = (yf - y0 as f64) / (y1 - y0) as f64;
                xs.push(x0 as f64 + t * (x1 - x0) as f64);
            }
        }
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for pair in xs.chunks(2) {
            if let [l, r] = *pair {
                let start = (l.ceil() as i64).max(0);
                let end = (r.floor() as i64).min(w as i64 - 1);
                for x in start..=end {
                    plane[y as usize * w + x as usize] = 1.0;
                }
            }
        }
    }
}

fn rasterize_group(lms: &LandmarkSet, group: &LandmarkGroup, h: usize, w: usize) -> Vec<f32> {
    let mut plane = vec![0.0f32; h * w];
    let pix: Vec<(i64, i64)> = group.indices.iter().map(|&i| to_pixel(lms.points[i], h, w)).collect();
    let mut draw = |a, b| {
        for (x, y) in bresenham(a, b) {
            plane[y as usize * w + x as usize] = 1.0;
        }
    };
    if pix.len() == 1 {
        draw(pix[0], pix[0]);
    }
    for seg in pix.windows(2) {
        draw(seg[0], seg[1]);
    }
    if group.kind == GroupKind::ClosedRegion && pix.len() > 2 {
        draw(*pix.last().unwrap(), pix[0]);
        fill_polygon(&pix, h, w, &mut plane);
    }
    plane
}

/// Rasterizes every group into its own binary channel.
pub fn rasterize_landmark_map(
    lms: &LandmarkSet,
    grouping: &LandmarkGrouping,
    height: usize,
    width: usize,
) -> Result<LandmarkMap> {
    rasterize_landmark_map_with(Exec::Sequential, lms, grouping, height, width)
}

pub fn rasterize_landmark_map_with(
    exec: Exec,
    lms: &LandmarkSet,
    grouping: &LandmarkGrouping,
    height: usize,
    width: usize,
) -> Result<LandmarkMap> {
    if height == 0 || width == 0 {
        return Err(CoreError::arg("landmark map size must be positive"));
    }
    let planes = exec.map(grouping.groups(), |g| rasterize_group(lms, g, height, width));
    let data = planes.concat();
    Ok(LandmarkMap(Planar::new(grouping.len(), height, width, data)?))
}

/// Rasterizes a batch of landmark sets, in parallel across samples.
pub fn rasterize_batch(
    exec: Exec,
    sets: &[LandmarkSet],
    grouping: &LandmarkGrouping,
    height: usize,
    width: usize,
) -> Result<Vec<LandmarkMap>> {
    exec.map(sets, |s| rasterize_landmark_map(s, grouping, height, width))
        .into_iter()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set_with(points: &[[f64; 2]]) -> LandmarkSet {
        let mut all = vec![[0.5, 0.5]; NUM_LANDMARKS];
        all[..points.len()].copy_from_slice(points);
        LandmarkSet::new(all).unwrap()
    }

    fn single(kind: GroupKind, indices: Vec<usize>) -> LandmarkGrouping {
        LandmarkGrouping::new(vec![LandmarkGroup {
            name: "g".into(),
            kind,
            indices,
        }])
        .unwrap()
    }

    #[test]
    fn horizontal_polyline() {
        let lms = set_with(&[[0.25, 0.5], [0.75, 0.5]]);
        let map = rasterize_landmark_map(&lms, &single(GroupKind::Polyline, vec![0, 1]), 8, 8).unwrap();
        let ch = map.channels();
        for y in 0..8 {
            for x in 0..8 {
                let expect = if y == 4 && (2..=6).contains(&x) { 1.0 } else { 0.0 };
                assert_eq!(ch.get(0, y, x), expect, "pixel ({y},{x})");
            }
        }
    }

    #[test]
    fn single_point_group_sets_one_pixel() {
        let lms = set_with(&[[0.3, 0.6]]);
        let map = rasterize_landmark_map(&lms, &single(GroupKind::Polyline, vec![0]), 32, 32).unwrap();
        assert_eq!(map.channels().data().iter().filter(|&&v| v == 1.0).count(), 1);
        assert_eq!(map.channels().get(0, 19, 9), 1.0);
    }

    /// Brute-force winding test on lattice points, independent of the scanline fill.
    fn oracle_inside(poly: &[(i64, i64)], x: i64, y: i64) -> bool {
        let mut inside = false;
        for i in 0..poly.len() {
            let (x0, y0) = poly[i];
            let (x1, y1) = poly[(i + 1) % poly.len()];
            if (y0 > y) != (y1 > y) {
                let xc = x0 as f64 + (y - y0) as f64 * (x1 - x0) as f64 / (y1 - y0) as f64;
                if (x as f64) < xc {
                    inside = !inside;
                }
            }
        }
        inside
    }

    #[test]
    fn closed_square_is_filled_block() {
        let lms = set_with(&[[0.25, 0.25], [0.75, 0.25], [0.75, 0.75], [0.25, 0.75]]);
        let map = rasterize_landmark_map(&lms, &single(GroupKind::ClosedRegion, vec![0, 1, 2, 3]), 16, 16).unwrap();
        let poly = [(4, 4), (12, 4), (12, 12), (4, 12)];
        for y in 0..16i64 {
            for x in 0..16i64 {
                let on_edge =
                    (4..=12).contains(&x) && (4..=12).contains(&y) && (x == 4 || x == 12 || y == 4 || y == 12);
                let expect = on_edge || oracle_inside(&poly, x, y);
                assert_eq!(
                    map.channels().get(0, y as usize, x as usize) == 1.0,
                    expect,
                    "({y},{x})"
                );
            }
        }
        assert_eq!(map.channels().data().iter().filter(|&&v| v == 1.0).count(), 81);
    }

    #[test]
    fn triangle_fill_matches_oracle_off_boundary() {
        let lms = set_with(&[[0.1, 0.1], [0.9, 0.3], [0.4, 0.95]]);
        let map = rasterize_landmark_map(&lms, &single(GroupKind::ClosedRegion, vec![0, 1, 2]), 40, 40).unwrap();
        let poly: Vec<(i64, i64)> = lms.points()[..3].iter().map(|&p| to_pixel(p, 40, 40)).collect();
        let mut edge = HashSet::new();
        for i in 0..3 {
            edge.extend(bresenham(poly[i], poly[(i + 1) % 3]));
        }
        for y in 0..40i64 {
            for x in 0..40i64 {
                let v = map.channels().get(0, y as usize, x as usize) == 1.0;
                if edge.contains(&(x, y)) {
                    assert!(v);
                } else if oracle_inside(&poly, x, y) {
                    assert!(v, "interior ({y},{x}) missing");
                }
            }
        }
    }

    #[test]
    fn bresenham_endpoints_and_connectivity() {
        let pts = bresenham((1, 7), (9, 2));
        assert_eq!(pts.first(), Some(&(1, 7)));
        assert_eq!(pts.last(), Some(&(9, 2)));
        for w in pts.windows(2) {
            assert!((w[0].0 - w[1].0).abs() <= 1 && (w[0].1 - w[1].1).abs() <= 1);
        }
    }

    #[test]
    fn landmark_set_validation() {
        assert!(LandmarkSet::new(vec![[0.5, 0.5]; 16]).is_err());
        assert!(LandmarkSet::new(vec![[0.5, 1.5]; 17]).is_err());
        let text = "0.1 0.2\n".repeat(16);
        assert_eq!(LandmarkSet::parse(&text).unwrap().len(), 16);
    }

    #[test]
    fn default_grouping_parses() {
        let g = LandmarkGrouping::default();
        assert_eq!(g.len(), 7);
        assert_eq!(g.groups()[3].kind, GroupKind::ClosedRegion);
        assert_eq!(g.fingerprint(), LandmarkGrouping::default().fingerprint());
    }

    #[test]
    fn grouping_validation() {
        let bad = LandmarkGroup {
            name: "a".into(),
            kind: GroupKind::Polyline,
            indices: vec![17],
        };
        assert!(LandmarkGrouping::new(vec![bad]).is_err());
        let a = LandmarkGroup {
            name: "a".into(),
            kind: GroupKind::Polyline,
            indices: vec![1],
        };
        assert!(LandmarkGrouping::new(vec![a.clone(), a]).is_err());
        assert!(LandmarkGrouping::new(vec![]).is_err());
    }

    #[test]
    fn rasterization_is_deterministic_and_binary() {
        let lms = set_with(&[[0.1, 0.2], [0.8, 0.7], [0.3, 0.9], [0.6, 0.1]]);
        let g = LandmarkGrouping::default();
        let a = rasterize_landmark_map(&lms, &g, 48, 40).unwrap();
        let b = rasterize_landmark_map_with(Exec::Parallel, &lms, &g, 48, 40).unwrap();
        assert_eq!(a, b);
        assert!(a.channels().data().iter().all(|&v| v == 0.0 || v == 1.0));
    }
}
