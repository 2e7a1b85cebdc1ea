//! Procedural cartoon faces with exact labels and landmarks.
//!
//! A face is an ellipse of skin with two eyes, two brows, a nose triangle and a
//! three-part mouth. Photo-domain faces use naturalistic colours with soft
//! shading. Caricature-domain faces start from the photo geometry generated for
//! the same `(seed, index)`, exaggerate it (bigger eyes, wider mouth, longer
//! nose or face, depending on a random mode) and re-render it in one of a few
//! flat palettes with dark outlines.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ensure_layout, images_dir, labels_dir, landmarks_dir, NUM_CLASSES};
use crate::error::{CoreError, Result};
use crate::exec::Exec;
use crate::landmarks::LandmarkSet;
use crate::raster::{Image, LabelMap, Planar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Photo,
    Caricature,
}

impl std::str::FromStr for Domain {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "photo" => Ok(Domain::Photo),
            "caricature" => Ok(Domain::Caricature),
            other => Err(CoreError::arg(format!("unknown domain `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyOptions {
    pub n: usize,
    pub domain: Domain,
    pub seed: u64,
    pub size: usize,
    /// Write label maps for the caricature domain too (evaluation sets).
    pub annotated: bool,
    /// Index of the first face; lets disjoint splits share one seed.
    pub first_index: usize,
}

impl ToyOptions {
    pub fn new(n: usize, domain: Domain, seed: u64) -> Self {
        ToyOptions {
            n,
            domain,
            seed,
            size: 64,
            annotated: domain == Domain::Photo,
            first_index: 0,
        }
    }
}

/// Face layout in continuous pixel coordinates (pixel `i` spans `[i, i+1)`).
#[derive(Debug, Clone, Copy, PartialEq)]
struct Geometry {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    eye_y: f64,
    eye_dx: f64,
    eye_rx: f64,
    eye_ry: f64,
    brow_gap: f64,
    brow_half: f64,
    brow_thick: f64,
    brow_tilt: f64,
    nose_top: f64,
    nose_tip: f64,
    nose_half: f64,
    mouth_y: f64,
    mouth_half: f64,
    upper_lip: f64,
    lower_lip: f64,
    inner: f64,
}

impl Geometry {
    fn sample(rng: &mut ChaCha8Rng, s: f64) -> Geometry {
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
        let rx = s * u(0.30, 0.36);
        let ry = s * u(0.36, 0.41);
        let cx = s * u(0.47, 0.53);
        let cy = s * u(0.48, 0.52);
        let eye_y = cy - ry * u(0.22, 0.30);
        Geometry {
            cx,
            cy,
            rx,
            ry,
            eye_y,
            eye_dx: rx * u(0.40, 0.46),
            eye_rx: rx * u(0.19, 0.23),
            eye_ry: ry * u(0.09, 0.12),
            brow_gap: ry * u(0.15, 0.19),
            brow_half: rx * u(0.20, 0.25),
            brow_thick: ry * u(0.06, 0.08),
            brow_tilt: ry * u(-0.04, 0.06),
            nose_top: eye_y + ry * u(0.02, 0.08),
            nose_tip: cy + ry * u(0.14, 0.22),
            nose_half: rx * u(0.11, 0.15),
            mouth_y: cy + ry * u(0.50, 0.56),
            mouth_half: rx * u(0.30, 0.36),
            upper_lip: ry * u(0.07, 0.09),
            lower_lip: ry * u(0.08, 0.10),
            inner: ry * u(0.05, 0.07),
        }
    }

    /// Caricature exaggeration. Every factor is at least 1 away from identity
    /// in its mode, so the landmarks always move.
    fn exaggerate(&self, rng: &mut ChaCha8Rng, s: f64) -> Geometry {
        let mode = rng.random_range(0..3);
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
        let boost = |m: usize| if m == mode { 1.25 } else { 1.0 };
        let eye = u(1.30, 1.55) * boost(0);
        let mouth = u(1.20, 1.40) * boost(1);
        let nose = u(1.15, 1.35) * boost(1);
        let long = u(1.00, 1.06) * if mode == 2 { 1.08 } else { 1.0 };
        let narrow = u(0.88, 0.98);
        let mut g = *self;
        g.rx = (self.rx * narrow).min(0.47 * s);
        g.ry = (self.ry * long).min(0.47 * s);
        g.cy = self.cy.clamp(g.ry * 0.9, s - g.ry * 1.02);
        let dy = g.cy - self.cy;
        let sy = g.ry / self.ry;
        let remap = |y: f64| g.cy + (y + dy - g.cy) * sy;
        g.eye_y = remap(self.eye_y) - self.ry * u(0.0, 0.05) * boost(0);
        g.eye_rx = self.eye_rx * eye;
        g.eye_ry = self.eye_ry * eye;
        g.eye_dx = (self.eye_dx * u(1.0, 1.08)).max(g.eye_rx * 1.15);
        g.brow_gap = self.brow_gap * eye.sqrt();
        g.brow_half = self.brow_half * eye.sqrt();
        g.nose_top = g.eye_y + (self.nose_top - self.eye_y);
        g.nose_tip = remap(self.nose_tip) + self.ry * 0.08 * (nose - 1.0) * 2.0;
        g.nose_half = self.nose_half * nose.sqrt();
        g.mouth_half = (self.mouth_half * mouth).min(g.rx * 0.7);
        g.upper_lip = self.upper_lip * mouth.sqrt();
        g.lower_lip = self.lower_lip * mouth.sqrt();
        g.inner = self.inner * mouth;
        g.mouth_y = remap(self.mouth_y).max(g.nose_tip + g.upper_lip + 1.5);
        g
    }

    fn landmarks(&self, s: f64) -> LandmarkSet {
        let l = self.cx - self.eye_dx;
        let r = self.cx + self.eye_dx;
        let brow_y = self.eye_y - self.brow_gap;
        let pts = [
            [self.cx - self.rx, self.cy],
            [self.cx, self.cy + self.ry],
            [self.cx + self.rx, self.cy],
            [l - self.brow_half, brow_y + self.brow_tilt],
            [l + self.brow_half, brow_y],
            [r - self.brow_half, brow_y],
            [r + self.brow_half, brow_y + self.brow_tilt],
            [l - self.eye_rx, self.eye_y],
            [l + self.eye_rx, self.eye_y],
            [r - self.eye_rx, self.eye_y],
            [r + self.eye_rx, self.eye_y],
            [self.cx, self.nose_top],
            [self.cx, self.nose_tip],
            [self.cx - self.mouth_half, self.mouth_y],
            [self.cx, self.mouth_y - self.inner / 2.0 - self.upper_lip],
            [self.cx + self.mouth_half, self.mouth_y],
            [self.cx, self.mouth_y + self.inner / 2.0 + self.lower_lip],
        ];
        let max = 1.0 - 1e-9;
        LandmarkSet::new(
            pts.iter()
                .map(|p| [(p[0] / s).clamp(0.0, max), (p[1] / s).clamp(0.0, max)])
                .collect(),
        )
        .expect("clamped landmarks are valid")
    }

    /// Class at continuous point `(x, y)`, painted back to front.
    fn class_at(&self, x: f64, y: f64) -> u8 {
        let mut class = 0;
        let ell = |cx: f64, cy: f64, rx: f64, ry: f64| ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2) <= 1.0;
        if ell(self.cx, self.cy, self.rx, self.ry) {
            class = 1;
        }
        // Nose: triangle from the bridge to the base at the tip.
        if y >= self.nose_top && y <= self.nose_tip {
            let t = (y - self.nose_top) / (self.nose_tip - self.nose_top).max(1e-6);
            if (x - self.cx).abs() <= self.nose_half * t + 0.5 {
                class = 6;
            }
        }
        let brow_y = self.eye_y - self.brow_gap;
        for (side, id) in [(-1.0, 4u8), (1.0, 5u8)] {
            let ex = self.cx + side * self.eye_dx;
            let inner = (ex - side * self.brow_half, brow_y);
            let outer = (ex + side * self.brow_half, brow_y + self.brow_tilt);
            if seg_dist((x, y), inner, outer) <= self.brow_thick / 2.0 + 0.3 {
                class = id;
            }
        }
        for (side, id) in [(-1.0, 2u8), (1.0, 3u8)] {
            if ell(self.cx + side * self.eye_dx, self.eye_y, self.eye_rx, self.eye_ry) {
                class = id;
            }
        }
        let dx = (x - self.cx) / self.mouth_half;
        if dx.abs() <= 1.0 {
            let prof = (1.0 - dx * dx).sqrt();
            let dy = y - self.mouth_y;
            let half_inner = self.inner / 2.0 * prof;
            if dy.abs() <= half_inner {
                class = 7;
            } else if dy < 0.0 && -dy <= half_inner + self.upper_lip * prof.sqrt() {
                class = 8;
            } else if dy > 0.0 && dy <= half_inner + self.lower_lip * prof.sqrt() {
                class = 9;
            }
        }
        class
    }
}

fn seg_dist(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * vx + (p.1 - a.1) * vy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * vx, a.1 + t * vy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

type Palette = [[f32; 3]; NUM_CLASSES];

fn photo_palette(rng: &mut ChaCha8Rng) -> Palette {
    let mut j = |v: f32, a: f32| (v + rng.random_range(-a..a)).clamp(0.0, 1.0);
    let b = [j(0.30, 0.12), j(0.32, 0.12), j(0.38, 0.12)];
    let skin_shift = j(0.0, 0.06) - 0.0;
    let skin = [
        (0.88 + skin_shift).min(1.0),
        (0.70 + skin_shift).min(1.0),
        (0.58 + skin_shift).min(1.0),
    ];
    let brow = [j(0.28, 0.06), j(0.20, 0.05), j(0.14, 0.04)];
    [
        b,
        skin,
        [0.95, 0.95, 0.94],
        [0.95, 0.95, 0.94],
        brow,
        brow,
        [skin[0] * 0.86, skin[1] * 0.8, skin[2] * 0.78],
        [j(0.35, 0.05), 0.08, 0.10],
        [j(0.74, 0.05), 0.36, 0.36],
        [j(0.80, 0.05), 0.42, 0.42],
    ]
}

/// Number of flat caricature palettes.
pub const CARICATURE_STYLES: usize = 3;

fn caricature_palette(style: usize, rng: &mut ChaCha8Rng) -> (Palette, [f32; 3]) {
    let base: (Palette, [f32; 3]) = match style {
        // warm paper
        0 => (
            [
                [0.94, 0.90, 0.78],
                [0.98, 0.86, 0.62],
                [1.00, 1.00, 0.96],
                [1.00, 1.00, 0.96],
                [0.45, 0.30, 0.15],
                [0.45, 0.30, 0.15],
                [0.92, 0.72, 0.48],
                [0.45, 0.20, 0.10],
                [0.85, 0.45, 0.30],
                [0.90, 0.52, 0.36],
            ],
            [0.22, 0.14, 0.08],
        ),
        // cool ink
        1 => (
            [
                [0.80, 0.88, 0.97],
                [0.78, 0.84, 0.96],
                [0.98, 0.99, 1.00],
                [0.98, 0.99, 1.00],
                [0.15, 0.20, 0.45],
                [0.15, 0.20, 0.45],
                [0.62, 0.70, 0.90],
                [0.20, 0.10, 0.35],
                [0.60, 0.40, 0.75],
                [0.66, 0.46, 0.80],
            ],
            [0.06, 0.08, 0.25],
        ),
        // saturated pop
        _ => (
            [
                [0.98, 0.82, 0.25],
                [0.99, 0.62, 0.52],
                [1.00, 1.00, 1.00],
                [1.00, 1.00, 1.00],
                [0.10, 0.05, 0.05],
                [0.10, 0.05, 0.05],
                [0.95, 0.48, 0.42],
                [0.30, 0.00, 0.05],
                [0.85, 0.10, 0.20],
                [0.92, 0.18, 0.25],
            ],
            [0.02, 0.02, 0.02],
        ),
    };
    let (mut pal, ink) = base;
    let shift: f32 = rng.random_range(-0.04..0.04);
    for c in pal.iter_mut() {
        for v in c.iter_mut() {
            *v = (*v + shift).clamp(0.0, 1.0);
        }
    }
    (pal, ink)
}

/// One rendered toy face.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyFace {
    pub image: Image,
    pub labels: LabelMap,
    pub landmarks: LandmarkSet,
    /// Landmarks of the un-exaggerated geometry for the same `(seed, index)`.
    pub template: LandmarkSet,
    /// Caricature palette index (always 0 for photos).
    pub style: usize,
}

fn stream(seed: u64, index: usize, salt: u64) -> ChaCha8Rng {
    // splitmix64 of the combined key
    let mut z = seed
        .wrapping_mul(0x9E3779B97F4A7C15)
        .wrapping_add((index as u64).wrapping_mul(0xBF58476D1CE4E5B9))
        .wrapping_add(salt.wrapping_mul(0x94D049BB133111EB));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

fn rasterize(g: &Geometry, size: usize) -> Vec<u8> {
    let mut labels = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            labels.push(g.class_at(x as f64 + 0.5, y as f64 + 0.5));
        }
    }
    labels
}

/// Renders face `index` of the toy dataset for `seed`; pure and deterministic.
pub fn render_toy_face(index: usize, domain: Domain, seed: u64, size: usize) -> Result<ToyFace> {
    if size < crate::raster::MIN_SIDE {
        return Err(CoreError::arg(format!(
            "toy faces need size >= {}",
            crate::raster::MIN_SIDE
        )));
    }
    let s = size as f64;
    let base = Geometry::sample(&mut stream(seed, index, 1), s);
    let template = base.landmarks(s);
    let (geom, style) = match domain {
        Domain::Photo => (base, 0),
        Domain::Caricature => {
            let mut rng = stream(seed, index, 2);
            let g = base.exaggerate(&mut rng, s);
            (g, rng.random_range(0..CARICATURE_STYLES))
        }
    };
    let labels = rasterize(&geom, size);
    let mut rng = stream(seed, index, 3);
    let n = size * size;
    let mut px = vec![0.0f32; 3 * n];
    match domain {
        Domain::Photo => {
            let pal = photo_palette(&mut rng);
            let light: f32 = rng.random_range(-0.12..0.12);
            for y in 0..size {
                for x in 0..size {
                    let p = y * size + x;
                    let class = labels[p] as usize;
                    let mut rgb = pal[class];
                    if class != 0 {
                        // side lighting across the face
                        let t = ((x as f64 - geom.cx) / geom.rx) as f32;
                        for v in rgb.iter_mut() {
                            *v *= 1.0 + light * t;
                        }
                    }
                    if class == 2 || class == 3 {
                        let ex = if class == 2 {
                            geom.cx - geom.eye_dx
                        } else {
                            geom.cx + geom.eye_dx
                        };
                        let d = ((x as f64 + 0.5 - ex).powi(2) + (y as f64 + 0.5 - geom.eye_y).powi(2)).sqrt();
                        if d < geom.eye_ry * 0.8 {
                            rgb = [0.18, 0.12, 0.10];
                        }
                    }
                    for c in 0..3 {
                        let noise: f32 = rng.random_range(-0.03..0.03);
                        px[c * n + p] = (rgb[c] + noise).clamp(0.0, 1.0);
                    }
                }
            }
        }
        Domain::Caricature => {
            let (pal, ink) = caricature_palette(style, &mut rng);
            for y in 0..size {
                for x in 0..size {
                    let p = y * size + x;
                    let class = labels[p];
                    let edge = [(0i64, 1i64), (1, 0), (0, -1), (-1, 0)].iter().any(|&(dy, dx)| {
                        let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                        yy >= 0
                            && xx >= 0
                            && (yy as usize) < size
                            && (xx as usize) < size
                            && labels[yy as usize * size + xx as usize] < class
                    });
                    let mut rgb = if edge { ink } else { pal[class as usize] };
                    if (class == 2 || class == 3) && !edge {
                        let ex = if class == 2 {
                            geom.cx - geom.eye_dx
                        } else {
                            geom.cx + geom.eye_dx
                        };
                        let d = ((x as f64 + 0.5 - ex).powi(2) + (y as f64 + 0.5 - geom.eye_y).powi(2)).sqrt();
                        if d < geom.eye_ry * 0.5 {
                            rgb = ink;
                        }
                    }
                    for c in 0..3 {
                        let noise: f32 = rng.random_range(-0.015..0.015);
                        px[c * n + p] = (rgb[c] + noise).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    Ok(ToyFace {
        image: Image::new(Planar::new(3, size, size, px)?)?,
        labels: LabelMap::new(size, size, NUM_CLASSES, labels)?,
        landmarks: geom.landmarks(s),
        template,
        style,
    })
}

/// Name of face `index` on disk.
pub fn toy_name(index: usize) -> String {
    format!("face_{index:05}")
}

/// Renders `n` faces and writes them under `root` in the dataset layout.
pub fn generate_toy_face_dataset(root: &Path, n: usize, domain: Domain, seed: u64) -> Result<()> {
    generate_toy_faces_with(Exec::default(), root, &ToyOptions::new(n, domain, seed))
}

pub fn generate_toy_faces_with(exec: Exec, root: &Path, opts: &ToyOptions) -> Result<()> {
    if opts.n == 0 {
        return Err(CoreError::arg("toy dataset needs n >= 1"));
    }
    let with_labels = opts.domain == Domain::Photo || opts.annotated;
    ensure_layout(root, with_labels)?;
    let results = exec.map_range(opts.n, |k| -> Result<()> {
        let index = opts.first_index + k;
        let face = render_toy_face(index, opts.domain, opts.seed, opts.size)?;
        let name = toy_name(index);
        face.image.save_png(&images_dir(root).join(format!("{name}.png")))?;
        face.landmarks.save(&landmarks_dir(root).join(format!("{name}.txt")))?;
        if with_labels {
            face.labels.save_png(&labels_dir(root).join(format!("{name}.png")))?;
        }
        Ok(())
    });
    results.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_class_is_drawn() {
        for i in 0..6 {
            for d in [Domain::Photo, Domain::Caricature] {
                let f = render_toy_face(i, d, 7, 64).unwrap();
                let h = f.labels.histogram();
                assert!(h.iter().all(|&n| n > 0), "{d:?} face {i} histogram {h:?}");
            }
        }
    }

    #[test]
    fn caricature_moves_landmarks() {
        for i in 0..8 {
            let c = render_toy_face(i, Domain::Caricature, 3, 64).unwrap();
            let p = render_toy_face(i, Domain::Photo, 3, 64).unwrap();
            assert_eq!(c.template, p.landmarks);
            assert!(c.landmarks.mean_displacement(&p.landmarks) > 0.0);
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let a = render_toy_face(4, Domain::Caricature, 99, 64).unwrap();
        let b = render_toy_face(4, Domain::Caricature, 99, 64).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn landmarks_sit_on_their_parts() {
        let f = render_toy_face(0, Domain::Photo, 1, 64).unwrap();
        let near = |k: usize, class: u8| {
            let p = f.landmarks.points()[k];
            let (x, y) = ((p[0] * 64.0) as i64, (p[1] * 64.0) as i64);
            (-1..=1).any(|dy| (-1..=1).any(|dx| f.labels.get((y + dy) as usize, (x + dx) as usize) == class))
        };
        assert!(near(12, 6), "nose tip");
        assert!(near(8, 2), "left eye inner corner");
        assert!(near(10, 3), "right eye outer corner");
        assert!(near(14, 8), "upper lip");
        assert!(near(16, 9), "lower lip");
    }
}
