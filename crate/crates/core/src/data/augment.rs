//! Offline augmentation: rotation, re-framing with scale and translation,
//! horizontal flip, and block-DCT compression artifacts.

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{flip_index_map, Shape};
use crate::tensor::Tensor;

use super::Sample;

pub const QUALITY_HIGH: u8 = 90;
pub const QUALITY_LOW: u8 = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentParams {
    pub rotation_degrees: Vec<f64>,
    pub scale_factors: Vec<f64>,
    /// Shift of the crop window per axis, as a fraction of the landmark box.
    pub translation_offsets: Vec<f64>,
    pub do_flip: bool,
    /// Compression qualities in 1..=100; empty keeps images uncompressed.
    pub compression_qualities: Vec<u8>,
    /// Keep a seeded random subset of at most this many outputs per sample.
    pub max_outputs: Option<usize>,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            rotation_degrees: vec![-15.0, 0.0, 15.0],
            scale_factors: vec![0.9, 1.0, 1.1],
            translation_offsets: vec![-0.05, 0.0, 0.05],
            do_flip: true,
            compression_qualities: vec![QUALITY_HIGH, QUALITY_LOW],
            max_outputs: None,
        }
    }
}

impl AugmentParams {
    /// One output per sample, geometrically unchanged.
    pub fn identity() -> Self {
        AugmentParams {
            rotation_degrees: vec![0.0],
            scale_factors: vec![1.0],
            translation_offsets: vec![0.0],
            do_flip: false,
            compression_qualities: vec![],
            max_outputs: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rotation_degrees.is_empty() || self.scale_factors.is_empty() || self.translation_offsets.is_empty() {
            return Err(Error::Config(
                "augmentation needs at least one rotation, scale and translation".into(),
            ));
        }
        if let Some(s) = self.scale_factors.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(Error::Config(format!("scale factors must be positive, got {s}")));
        }
        if self
            .rotation_degrees
            .iter()
            .chain(&self.translation_offsets)
            .any(|v| !v.is_finite())
        {
            return Err(Error::Config("rotations and translations must be finite".into()));
        }
        if let Some(q) = self.compression_qualities.iter().find(|q| !(1..=100).contains(*q)) {
            return Err(Error::Config(format!("compression quality {q} outside 1..=100")));
        }
        if self.max_outputs == Some(0) {
            return Err(Error::Config("max_outputs must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Augmented {
    pub samples: Vec<Sample>,
    /// Crops that fell entirely outside the source patch.
    pub skipped: usize,
}

/// Rotates a normalized point about the patch center by `degrees`
/// (positive turns +x towards +y, i.e. clockwise on screen).
pub fn rotate_point([x, y]: [f64; 2], degrees: f64) -> [f64; 2] {
    let (s, c) = degrees.to_radians().sin_cos();
    let (u, v) = (x - 0.5, y - 0.5);
    [0.5 + c * u - s * v, 0.5 + s * u + c * v]
}

/// Bilinear sample at continuous pixel coordinates (pixel centers at
/// `i + 0.5`), replicating the border.
fn bilinear(data: &[f32], w: usize, h: usize, x: f64, y: f64) -> f64 {
    let fx = (x - 0.5).clamp(0.0, (w - 1) as f64);
    let fy = (y - 0.5).clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
    let at = |r: usize, c: usize| f64::from(data[r * w + c]);
    let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
    let bottom = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
    top * (1.0 - ty) + bottom * ty
}

/// Crop window in the rotated frame: origin and side, normalized units.
#[derive(Debug, Clone, Copy)]
struct Window {
    x: f64,
    y: f64,
    side: f64,
}

fn box_center_and_extent(b: [f64; 4]) -> ([f64; 2], f64, f64) {
    ([(b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0], b[2] - b[0], b[3] - b[1])
}

/// Places the window so that the rotated landmarks' tight box sits in it
/// the way the original box sat in the source patch, then applies scale and
/// translation.
fn frame(original: &Shape, rotated: &Shape, scale: f64, tx: f64, ty: f64) -> Window {
    let (c0, w0, h0) = box_center_and_extent(original.bounds(None));
    let (c1, w1, h1) = box_center_and_extent(rotated.bounds(None));
    let k = if w0.max(h0) > 0.0 { w1.max(h1) / w0.max(h0) } else { 1.0 };
    let side = k * scale;
    let cx = c1[0] + side * (0.5 - c0[0]) + tx * w1;
    let cy = c1[1] + side * (0.5 - c0[1]) + ty * h1;
    Window {
        x: cx - side / 2.0,
        y: cy - side / 2.0,
        side,
    }
}

fn warp(sample: &Sample, degrees: f64, win: Window) -> Result<Sample> {
    let dims = sample.image.dims();
    let (h, w) = (dims[0], dims[1]);
    let src = sample.image.data();
    let mut out = Vec::with_capacity(h * w);
    for row in 0..h {
        for col in 0..w {
            let q = [
                win.x + win.side * (col as f64 + 0.5) / w as f64,
                win.y + win.side * (row as f64 + 0.5) / h as f64,
            ];
            let [sx, sy] = rotate_point(q, -degrees);
            out.push(
                bilinear(src, w, h, sx * w as f64, sy * h as f64)
                    .round()
                    .clamp(0.0, 255.0) as f32,
            );
        }
    }
    let shape = sample.shape.map_points(|p| {
        let [x, y] = rotate_point(p, degrees);
        [(x - win.x) / win.side, (y - win.y) / win.side]
    });
    Sample::new(sample.id.clone(), Tensor::from_vec(dims, out)?, shape)
}

/// Mirrors the image left-right and relabels landmarks accordingly.
pub fn flip_sample(sample: &Sample) -> Sample {
    let dims = sample.image.dims();
    let (h, w) = (dims[0], dims[1]);
    let mut img = sample.image.clone();
    for row in img.data_mut().chunks_exact_mut(w).take(h) {
        row.reverse();
    }
    let n = sample.shape.pattern().landmarks();
    let map = flip_index_map(sample.shape.pattern());
    let mut coords = vec![0.0; 2 * n];
    for (j, [x, y]) in sample.shape.points().enumerate() {
        coords[2 * map[j]] = 1.0 - x;
        coords[2 * map[j] + 1] = y;
    }
    Sample {
        id: sample.id.clone(),
        image: img,
        shape: Shape::new(sample.shape.pattern(), coords).expect("same landmark count"),
    }
}

const LUMA_TABLE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, 12, 12, 14, 19, 26, 58, 60, 55, 14, 13, 16, 24, 40, 57, 69, 56, 14, 17, 22, 29, 51,
    87, 80, 62, 18, 22, 37, 56, 68, 109, 103, 77, 24, 35, 55, 64, 81, 104, 113, 92, 49, 64, 78, 87, 103, 121, 120, 101,
    72, 92, 95, 98, 112, 100, 103, 99,
];

fn quant_table(quality: u8) -> [f64; 64] {
    let q = u32::from(quality.clamp(1, 100));
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut t = [0.0; 64];
    for (dst, &base) in t.iter_mut().zip(&LUMA_TABLE) {
        *dst = ((u32::from(base) * scale + 50) / 100).clamp(1, 255) as f64;
    }
    t
}

fn dct_basis() -> [[f64; 8]; 8] {
    let mut b = [[0.0; 8]; 8];
    for (u, row) in b.iter_mut().enumerate() {
        let a = if u == 0 {
            (1.0 / 8.0_f64).sqrt()
        } else {
            (2.0 / 8.0_f64).sqrt()
        };
        for (x, v) in row.iter_mut().enumerate() {
            *v = a * (((2 * x + 1) * u) as f64 * std::f64::consts::PI / 16.0).cos();
        }
    }
    b
}

/// Quantizes 8x8 block DCT coefficients with the standard luminance table
/// scaled to `quality`, imitating JPEG artifacts without a codec. Edge
/// blocks are padded by replication.
pub fn compress(image: &Tensor<f32>, quality: u8) -> Tensor<f32> {
    let dims = image.dims();
    let (h, w) = (dims[0], dims[1]);
    let src = image.data();
    let table = quant_table(quality);
    let basis = dct_basis();
    let mut out = src.to_vec();
    for by in (0..h).step_by(8) {
        for bx in (0..w).step_by(8) {
            let mut block = [[0.0; 8]; 8];
            for (y, row) in block.iter_mut().enumerate() {
                for (x, v) in row.iter_mut().enumerate() {
                    let (r, c) = ((by + y).min(h - 1), (bx + x).min(w - 1));
                    *v = f64::from(src[r * w + c]) - 128.0;
                }
            }
            // Separable orthonormal DCT-II: coef = B * block * B^T.
            let mut coef = [[0.0; 8]; 8];
            for u in 0..8 {
                for v in 0..8 {
                    let mut s = 0.0;
                    for y in 0..8 {
                        for x in 0..8 {
                            s += basis[u][y] * basis[v][x] * block[y][x];
                        }
                    }
                    let q = table[u * 8 + v];
                    coef[u][v] = (s / q).round() * q;
                }
            }
            for y in 0..8 {
                for x in 0..8 {
                    let (r, c) = (by + y, bx + x);
                    if r >= h || c >= w {
                        continue;
                    }
                    let mut s = 0.0;
                    for u in 0..8 {
                        for v in 0..8 {
                            s += basis[u][y] * basis[v][x] * coef[u][v];
                        }
                    }
                    out[r * w + c] = (s + 128.0).round().clamp(0.0, 255.0) as f32;
                }
            }
        }
    }
    Tensor::from_vec(dims, out).expect("same dims")
}

/// Expands one sample over the augmentation grid. Output order is
/// rotation, scale, x-shift, y-shift, flip, quality; `seed` only matters
/// when `max_outputs` asks for a subset.
pub fn augment(sample: &Sample, params: &AugmentParams, seed: u64) -> Result<Augmented> {
    params.validate()?;
    let mut samples = vec![];
    let mut skipped = 0;
    for (ri, &deg) in params.rotation_degrees.iter().enumerate() {
        let rotated = sample.shape.map_points(|p| rotate_point(p, deg));
        for (si, &scale) in params.scale_factors.iter().enumerate() {
            for (xi, &tx) in params.translation_offsets.iter().enumerate() {
                for (yi, &ty) in params.translation_offsets.iter().enumerate() {
                    let win = frame(&sample.shape, &rotated, scale, tx, ty);
                    if win.x >= 1.0 || win.y >= 1.0 || win.x + win.side <= 0.0 || win.y + win.side <= 0.0 {
                        skipped += 1;
                        continue;
                    }
                    let base = warp(sample, deg, win)?;
                    let mut variants = vec![(0, base.clone())];
                    if params.do_flip {
                        variants.push((1, flip_sample(&base)));
                    }
                    for (fi, v) in variants {
                        let tag = format!("{}_r{ri}s{si}x{xi}y{yi}f{fi}", sample.id);
                        if params.compression_qualities.is_empty() {
                            samples.push(Sample { id: tag, ..v });
                            continue;
                        }
                        for (qi, &q) in params.compression_qualities.iter().enumerate() {
                            samples.push(Sample {
                                id: format!("{tag}q{qi}"),
                                image: compress(&v.image, q),
                                shape: v.shape.clone(),
                            });
                        }
                    }
                }
            }
        }
    }
    if let Some(max) = params.max_outputs {
        if samples.len() > max {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut keep = sample_indices(&mut rng, samples.len(), max).into_vec();
            keep.sort_unstable();
            let mut all: Vec<Option<Sample>> = samples.into_iter().map(Some).collect();
            samples = keep.into_iter().map(|i| all[i].take().expect("unique index")).collect();
        }
    }
    Ok(Augmented { samples, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_generate;
    use crate::geometry::LabelingPattern;

    fn face() -> Sample {
        synth_generate(LabelingPattern::SixtyEight, 1, 4).unwrap().samples[0].clone()
    }

    #[test]
    fn identity_is_a_no_op() {
        let s = face();
        let out = augment(&s, &AugmentParams::identity(), 0).unwrap();
        assert_eq!(out.samples.len(), 1);
        let a = &out.samples[0];
        assert_eq!(a.image, s.image);
        for (p, q) in a.shape.coords().iter().zip(s.shape.coords()) {
            assert!((p - q).abs() < 1e-6);
        }
    }

    #[test]
    fn quarter_turn_of_a_point() {
        let [x, y] = rotate_point([1.0, 0.5], 90.0);
        assert!((x - 0.5).abs() < 1e-12 && (y - 1.0).abs() < 1e-12);
    }

    #[test]
    fn flip_is_an_involution() {
        let s = face();
        let twice = flip_sample(&flip_sample(&s));
        assert_eq!(twice.image, s.image);
        for (p, q) in twice.shape.coords().iter().zip(s.shape.coords()) {
            assert!((p - q).abs() < 1e-6);
        }
    }

    #[test]
    fn default_grid_size_and_dims() {
        let s = face();
        let out = augment(&s, &AugmentParams::default(), 0).unwrap();
        assert_eq!(out.samples.len(), 3 * 3 * 9 * 2 * 2);
        assert_eq!(out.skipped, 0);
        for a in &out.samples {
            assert_eq!(a.image.dims(), &[50, 50, 1]);
            let b = a.shape.bounds(None);
            assert!(b[0] >= -0.2 && b[1] >= -0.2 && b[2] <= 1.2 && b[3] <= 1.2, "{b:?}");
        }
    }

    #[test]
    fn subset_is_seeded() {
        let s = face();
        let p = AugmentParams {
            max_outputs: Some(5),
            ..AugmentParams::default()
        };
        let a = augment(&s, &p, 3).unwrap();
        assert_eq!(a.samples.len(), 5);
        assert_eq!(a, augment(&s, &p, 3).unwrap());
    }

    #[test]
    fn landmarks_follow_the_pixels() {
        // A single bright dot must move with its landmark under rotation,
        // scaling and translation.
        let mut s = synth_generate(LabelingPattern::Five, 1, 0).unwrap().samples[0].clone();
        s.image.fill(0.0);
        let [x, y] = s.shape.point(2);
        let (c, r) = ((x * 50.0) as usize, (y * 50.0) as usize);
        s.image.data_mut()[r * 50 + c] = 255.0;
        let p = AugmentParams {
            rotation_degrees: vec![15.0],
            scale_factors: vec![1.1],
            translation_offsets: vec![0.05],
            do_flip: false,
            compression_qualities: vec![],
            max_outputs: None,
        };
        let out = &augment(&s, &p, 0).unwrap().samples[0];
        let data = out.image.data();
        let brightest = (0..2500).max_by(|&a, &b| data[a].total_cmp(&data[b])).unwrap();
        let (bx, by) = ((brightest % 50) as f64 + 0.5, (brightest / 50) as f64 + 0.5);
        let [lx, ly] = out.shape.point(2);
        // the dot was placed at the pixel containing the landmark
        assert!((bx - lx * 50.0).hypot(by - ly * 50.0) < 1.5);
    }

    #[test]
    fn compression_quality_orders_distortion() {
        let s = face();
        let err = |q| {
            let c = compress(&s.image, q);
            c.data()
                .iter()
                .zip(s.image.data())
                .map(|(a, b)| (a - b).abs() as f64)
                .sum::<f64>()
        };
        let (hi, lo) = (err(QUALITY_HIGH), err(QUALITY_LOW));
        assert!(hi < lo, "{hi} vs {lo}");
        assert!(err(100) <= hi);
        let flat = Tensor::filled(&[50, 50, 1], 77.0f32);
        assert_eq!(compress(&flat, QUALITY_LOW), flat);
    }

    #[test]
    fn invalid_params() {
        let mut p = AugmentParams::identity();
        p.scale_factors = vec![0.0];
        assert!(p.validate().is_err());
        let mut p = AugmentParams::identity();
        p.compression_qualities = vec![0];
        assert!(p.validate().is_err());
    }
}
