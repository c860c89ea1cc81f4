//! Procedural schematic faces with analytically known landmarks.
//!
//! A face is drawn in a canonical frame from a 68-point template (ellipse
//! eyes, polyline brows, nose bridge and base, filled lips, elliptic face
//! outline) and then posed by a random similarity transform. The 5- and
//! 29-point annotations are derived from the 68 points.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::{LabelingPattern, Shape};
use crate::network::INPUT_SIZE;
use crate::tensor::Tensor;

use super::{Dataset, Sample, Split};

/// Ranges of the per-face random draws.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub max_rotation_deg: f64,
    pub scale: (f64, f64),
    pub max_translation: f64,
    /// Per-face jitter of the template geometry, in canonical units.
    pub shape_jitter: f64,
    pub background: (f64, f64),
    pub skin: (f64, f64),
    pub contrast: (f64, f64),
    pub noise_sigma: (f64, f64),
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            max_rotation_deg: 30.0,
            scale: (0.8, 1.0),
            max_translation: 0.05,
            shape_jitter: 0.02,
            background: (20.0, 110.0),
            skin: (150.0, 220.0),
            contrast: (0.75, 1.15),
            noise_sigma: (2.0, 6.0),
        }
    }
}

/// Geometry of one canonical face.
#[derive(Debug, Clone, Copy)]
struct FaceGeom {
    eye_y: f64,
    eye_dx: f64,
    eye_a: f64,
    eye_b: f64,
    brow_gap: f64,
    nose_len: f64,
    mouth_y: f64,
    mouth_w: f64,
    jaw_w: f64,
    jaw_h: f64,
}

impl FaceGeom {
    const MEAN: FaceGeom = FaceGeom {
        eye_y: 0.38,
        eye_dx: 0.18,
        eye_a: 0.075,
        eye_b: 0.035,
        brow_gap: 0.09,
        nose_len: 0.22,
        mouth_y: 0.74,
        mouth_w: 0.13,
        jaw_w: 0.36,
        jaw_h: 0.50,
    };

    fn jittered(rng: &mut impl Rng, j: f64) -> Self {
        let m = Self::MEAN;
        let mut d = |scale: f64| if j > 0.0 { rng.gen_range(-j..j) * scale } else { 0.0 };
        FaceGeom {
            eye_y: m.eye_y + d(1.0),
            eye_dx: m.eye_dx + d(0.5),
            eye_a: m.eye_a + d(0.25),
            eye_b: m.eye_b + d(0.25),
            brow_gap: m.brow_gap + d(0.5),
            nose_len: m.nose_len + d(1.0),
            mouth_y: m.mouth_y + d(1.0),
            mouth_w: m.mouth_w + d(1.0),
            jaw_w: m.jaw_w + d(1.0),
            jaw_h: m.jaw_h + d(1.0),
        }
    }

    fn eye_center(&self, right: bool) -> [f64; 2] {
        let s = if right { 1.0 } else { -1.0 };
        [0.5 + s * self.eye_dx, self.eye_y]
    }

    /// The 68 landmarks (0-based), left meaning the image side.
    fn landmarks(&self) -> Vec<[f64; 2]> {
        let mirror = |[x, y]: [f64; 2]| [1.0 - x, y];
        let mut p = vec![[0.0; 2]; 68];
        // Jaw: lower half of the face ellipse, temple to temple.
        for (k, slot) in p.iter_mut().enumerate().take(17) {
            let a = PI * k as f64 / 16.0;
            *slot = [0.5 - self.jaw_w * a.cos(), self.eye_y + self.jaw_h * a.sin()];
        }
        // Left brow, outer to inner, arched.
        let [lx, ly] = self.eye_center(false);
        for i in 0..5 {
            let t = i as f64 / 4.0;
            let x = lx - 1.4 * self.eye_a + t * 2.6 * self.eye_a;
            let y = ly - self.brow_gap - 0.025 * (PI * t).sin();
            p[17 + i] = [x, y];
        }
        for i in 0..5 {
            p[26 - i] = mirror(p[17 + i]);
        }
        // Nose bridge and base.
        let top = self.eye_y;
        for i in 0..4 {
            p[27 + i] = [0.5, top + self.nose_len * i as f64 / 3.0];
        }
        let base_y = top + self.nose_len + 0.035;
        let base = [[-0.07, -0.01], [-0.035, 0.0], [0.0, 0.005], [0.035, 0.0], [0.07, -0.01]];
        for (i, [dx, dy]) in base.iter().enumerate() {
            p[31 + i] = [0.5 + dx, base_y + dy];
        }
        // Eyes: six points on the ellipse; their centroid is the center.
        for (first, right) in [(36, false), (42, true)] {
            let [cx, cy] = self.eye_center(right);
            let angles = [180.0, 120.0, 60.0, 0.0, -60.0, -120.0_f64];
            for (i, deg) in angles.iter().enumerate() {
                let a = deg.to_radians();
                let pt = [cx + self.eye_a * a.cos(), cy - self.eye_b * a.sin()];
                p[first + i] = pt;
            }
        }
        // Right eye ordering mirrors the left: inner corner first.
        let left: Vec<[f64; 2]> = p[36..42].to_vec();
        for (i, src) in [3usize, 2, 1, 0, 5, 4].iter().enumerate() {
            p[42 + i] = mirror(left[*src]);
        }
        // Mouth, outer lip clockwise from the left corner, then inner lip.
        let (my, w) = (self.mouth_y, self.mouth_w);
        let outer = [
            [-1.0, 0.0],
            [-0.7, -0.025],
            [-0.3, -0.04],
            [0.0, -0.035],
            [0.3, -0.04],
            [0.7, -0.025],
            [1.0, 0.0],
            [0.7, 0.035],
            [0.3, 0.05],
            [0.0, 0.055],
            [-0.3, 0.05],
            [-0.7, 0.035],
        ];
        for (i, [fx, dy]) in outer.iter().enumerate() {
            p[48 + i] = [0.5 + fx * w, my + dy];
        }
        let inner = [
            [-0.85, 0.0],
            [-0.4, -0.01],
            [0.0, -0.008],
            [0.4, -0.01],
            [0.85, 0.0],
            [0.4, 0.015],
            [0.0, 0.018],
            [-0.4, 0.015],
        ];
        for (i, [fx, dy]) in inner.iter().enumerate() {
            p[60 + i] = [0.5 + fx * w, my + dy];
        }
        p
    }
}

fn mid(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0]
}

fn centroid(pts: &[[f64; 2]]) -> [f64; 2] {
    let n = pts.len() as f64;
    let (sx, sy) = pts.iter().fold((0.0, 0.0), |(x, y), p| (x + p[0], y + p[1]));
    [sx / n, sy / n]
}

/// Derives the requested annotation from the 68 points.
fn derive(pattern: LabelingPattern, p: &[[f64; 2]]) -> Vec<[f64; 2]> {
    // 1-based access to read like the usual 68-point charts.
    let q = |k: usize| p[k - 1];
    let left_pupil = centroid(&p[36..42]);
    let right_pupil = centroid(&p[42..48]);
    match pattern {
        LabelingPattern::Five => vec![left_pupil, right_pupil, q(31), q(49), q(55)],
        LabelingPattern::TwentyNine => vec![
            q(18),
            q(27),
            q(22),
            q(23),
            q(20),
            q(25),
            mid(q(19), q(21)),
            mid(q(24), q(26)),
            q(37),
            q(46),
            q(40),
            q(43),
            mid(q(38), q(39)),
            mid(q(44), q(45)),
            mid(q(41), q(42)),
            mid(q(47), q(48)),
            left_pupil,
            right_pupil,
            q(32),
            q(36),
            q(31),
            q(34),
            q(49),
            q(55),
            q(52),
            q(63),
            q(67),
            q(58),
            q(9),
        ],
        LabelingPattern::SixtyEight => p.to_vec(),
    }
}

/// Landmarks of the mean canonical face (frontal, unit patch).
pub fn face_template(pattern: LabelingPattern) -> Vec<[f64; 2]> {
    derive(pattern, &FaceGeom::MEAN.landmarks())
}

/// Tones of one rendered face.
struct Palette {
    background: f64,
    skin: f64,
}

fn inside_polygon(poly: &[[f64; 2]], [x, y]: [f64; 2]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let ([xi, yi], [xj, yj]) = (poly[i], poly[j]);
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn dist_to_polyline(pts: &[[f64; 2]], [x, y]: [f64; 2]) -> f64 {
    pts.windows(2)
        .map(|w| {
            let ([ax, ay], [bx, by]) = (w[0], w[1]);
            let (dx, dy) = (bx - ax, by - ay);
            let t = (((x - ax) * dx + (y - ay) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
            let (px, py) = (ax + t * dx - x, ay + t * dy - y);
            (px * px + py * py).sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Intensity of the canonical face at canonical point `p`.
fn shade(g: &FaceGeom, lm: &[[f64; 2]], pal: &Palette, p: [f64; 2]) -> f64 {
    let [x, y] = p;
    let (dx, dy) = ((x - 0.5) / g.jaw_w, y - g.eye_y);
    let ry = if dy >= 0.0 { g.jaw_h } else { 0.33 };
    if dx * dx + (dy / ry) * (dy / ry) > 1.0 {
        return pal.background;
    }
    let skin = pal.skin;
    for right in [false, true] {
        let [cx, cy] = g.eye_center(right);
        let (ex, ey) = ((x - cx) / g.eye_a, (y - cy) / g.eye_b);
        let r2 = ex * ex + ey * ey;
        if r2 <= 1.0 {
            let iris = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt() < 0.8 * g.eye_b;
            return if iris { skin * 0.15 } else { skin * 0.55 };
        }
    }
    if dist_to_polyline(&lm[17..22], p) < 0.014 || dist_to_polyline(&lm[22..27], p) < 0.014 {
        return skin * 0.4;
    }
    if inside_polygon(&lm[60..68], p) {
        return skin * 0.2;
    }
    if inside_polygon(&lm[48..60], p) {
        return skin * 0.6;
    }
    if dist_to_polyline(&lm[31..36], p) < 0.01 {
        return skin * 0.45;
    }
    if dist_to_polyline(&lm[27..31], p) < 0.008 {
        return skin * 0.8;
    }
    skin
}

/// Similarity transform about the patch center.
#[derive(Debug, Clone, Copy)]
struct Pose {
    cos: f64,
    sin: f64,
    scale: f64,
    tx: f64,
    ty: f64,
}

impl Pose {
    fn apply(&self, [x, y]: [f64; 2]) -> [f64; 2] {
        let (u, v) = (x - 0.5, y - 0.5);
        [
            0.5 + self.scale * (self.cos * u - self.sin * v) + self.tx,
            0.5 + self.scale * (self.sin * u + self.cos * v) + self.ty,
        ]
    }

    fn invert(&self, [x, y]: [f64; 2]) -> [f64; 2] {
        let (u, v) = ((x - 0.5 - self.tx) / self.scale, (y - 0.5 - self.ty) / self.scale);
        [0.5 + self.cos * u + self.sin * v, 0.5 - self.sin * u + self.cos * v]
    }
}

fn render_one(rng: &mut ChaCha8Rng, params: &SynthParams, pattern: LabelingPattern) -> Result<(Tensor<f32>, Shape)> {
    let range = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| {
        if hi > lo {
            rng.gen_range(lo..hi)
        } else {
            lo
        }
    };
    let geom = FaceGeom::jittered(rng, params.shape_jitter);
    let r = params.max_rotation_deg;
    let theta = range(rng, (-r, r)).to_radians();
    let t = params.max_translation;
    let pose = Pose {
        cos: theta.cos(),
        sin: theta.sin(),
        scale: range(rng, params.scale),
        tx: range(rng, (-t, t)),
        ty: range(rng, (-t, t)),
    };
    let pal = Palette {
        background: range(rng, params.background),
        skin: range(rng, params.skin),
    };
    let contrast = range(rng, params.contrast);
    let sigma = range(rng, params.noise_sigma);
    let noise = Normal::new(0.0, sigma.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;

    let lm68 = geom.landmarks();
    let n = INPUT_SIZE;
    let mut pixels = Vec::with_capacity(n * n);
    const SUB: [f64; 2] = [0.25, 0.75];
    for row in 0..n {
        for col in 0..n {
            let mut acc = 0.0;
            for sy in SUB {
                for sx in SUB {
                    let q = [(col as f64 + sx) / n as f64, (row as f64 + sy) / n as f64];
                    acc += shade(&geom, &lm68, &pal, pose.invert(q));
                }
            }
            let v = 128.0 + contrast * (acc / 4.0 - 128.0) + noise.sample(rng);
            pixels.push(v.round().clamp(0.0, 255.0) as f32);
        }
    }
    let pts: Vec<[f64; 2]> = derive(pattern, &lm68).into_iter().map(|p| pose.apply(p)).collect();
    Ok((
        Tensor::from_vec(&[n, n, 1], pixels)?,
        Shape::from_points(pattern, &pts)?,
    ))
}

/// `count` random faces; identical output for identical `(pattern, count, seed)`.
pub fn synth_generate(pattern: LabelingPattern, count: usize, seed: u64) -> Result<Dataset> {
    synth_generate_with(pattern, count, seed, &SynthParams::default(), Split::Train)
}

pub fn synth_generate_with(
    pattern: LabelingPattern,
    count: usize,
    seed: u64,
    params: &SynthParams,
    split: Split,
) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::Config("synthetic dataset needs at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(count);
    for k in 0..count {
        let (image, shape) = render_one(&mut rng, params, pattern)?;
        samples.push(Sample::new(format!("face{k:06}"), image, shape)?);
    }
    Dataset::new(pattern, split, samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::flip_index_map;

    #[test]
    fn deterministic_per_seed() {
        let a = synth_generate(LabelingPattern::Five, 3, 9).unwrap();
        let b = synth_generate(LabelingPattern::Five, 3, 9).unwrap();
        assert_eq!(a, b);
        let c = synth_generate(LabelingPattern::Five, 3, 10).unwrap();
        assert_ne!(a.samples[0].image, c.samples[0].image);
    }

    #[test]
    fn counts_and_coordinate_range() {
        let ds = synth_generate(LabelingPattern::Five, 100, 1).unwrap();
        assert_eq!(ds.len(), 100);
        for s in &ds.samples {
            assert_eq!(s.shape.coords().len(), 10);
            assert!(s.shape.coords().iter().all(|v| (-0.2..=1.2).contains(v)));
            assert!(s
                .image
                .data()
                .iter()
                .all(|v| (0.0..=255.0).contains(v) && v.fract() == 0.0));
        }
        let ds68 = synth_generate(LabelingPattern::SixtyEight, 20, 1).unwrap();
        for s in &ds68.samples {
            assert!(s.shape.coords().iter().all(|v| (-0.2..=1.2).contains(v)));
        }
    }

    #[test]
    fn eye_landmark_sits_on_drawn_eye() {
        // Without noise, the darkest blob near each eye landmark is the iris,
        // centered on the landmark.
        let params = SynthParams {
            noise_sigma: (0.0, 0.0),
            ..SynthParams::default()
        };
        let ds = synth_generate_with(LabelingPattern::Five, 10, 3, &params, Split::Train).unwrap();
        for s in &ds.samples {
            let img = s.image.data();
            for j in 0..2 {
                let [lx, ly] = s.shape.point(j);
                let (px, py) = (lx * 50.0, ly * 50.0);
                let window: Vec<(f64, f64, f64)> = (0..50 * 50)
                    .map(|i| ((i % 50) as f64 + 0.5, (i / 50) as f64 + 0.5, f64::from(img[i])))
                    .filter(|(cx, cy, _)| (cx - px).hypot(cy - py) <= 3.0)
                    .collect();
                let max = window.iter().map(|w| w.2).fold(0.0, f64::max);
                let (mut sx, mut sy, mut w) = (0.0, 0.0, 0.0);
                for (cx, cy, v) in window {
                    let wt = (max - v).powi(2);
                    sx += wt * cx;
                    sy += wt * cy;
                    w += wt;
                }
                let (cx, cy) = (sx / w, sy / w);
                assert!((cx - px).hypot(cy - py) < 1.0, "eye {j}: ({cx},{cy}) vs ({px},{py})");
            }
        }
    }

    #[test]
    fn template_is_mirror_symmetric() {
        for pattern in LabelingPattern::ALL {
            let t = face_template(pattern);
            let map = flip_index_map(pattern);
            for (j, p) in t.iter().enumerate() {
                let q = t[map[j]];
                assert!((p[0] - (1.0 - q[0])).abs() < 1e-12, "{pattern} landmark {}", j + 1);
                assert!((p[1] - q[1]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn derived_eye_centers_agree_across_patterns() {
        let shapes: Vec<Shape> = LabelingPattern::ALL
            .iter()
            .map(|&p| Shape::from_points(p, &face_template(p)).unwrap())
            .collect();
        let (l5, r5) = shapes[0].eye_centers();
        for s in &shapes[1..] {
            let (l, r) = s.eye_centers();
            for k in 0..2 {
                assert!((l[k] - l5[k]).abs() < 1e-12 && (r[k] - r5[k]).abs() < 1e-12);
            }
        }
    }
}
