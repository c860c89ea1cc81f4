//! Face samples and datasets: on-disk layout, pixel normalization,
//! augmentation, occlusion and the synthetic face generator.
//!
//! A dataset directory holds
//!
//! ```text
//! meta.txt            "pattern <n>" then "split <train|val|test>"
//! images/<id>.pgm     binary P5, 8-bit, 50x50
//! landmarks/<id>.txt  n lines "x y" in normalized patch coordinates
//! ```

mod augment;
mod occlude;
mod pgm;
mod synth;

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geometry::{LabelingPattern, Shape};
use crate::network::INPUT_SIZE;
use crate::tensor::Tensor;

pub use augment::{augment, compress, flip_sample, AugmentParams, Augmented};
pub use occlude::{occlude_cluster, GRAY};
pub use pgm::{read_pgm, write_pgm, GrayImage};
pub use synth::{face_template, synth_generate, synth_generate_with, SynthParams};

/// Normalization applied to raw 8-bit pixels before they enter the network.
pub const PIXEL_MEAN: f32 = 128.0;
pub const PIXEL_SCALE: f32 = 0.0078125;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// One face patch with its landmarks. `image` holds raw 0..=255 intensities
/// as a `50 x 50 x 1` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor<f32>,
    pub shape: Shape,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Tensor<f32>, shape: Shape) -> Result<Self> {
        if image.dims() != [INPUT_SIZE, INPUT_SIZE, 1] {
            return Err(Error::shape(format!(
                "sample image must be {INPUT_SIZE}x{INPUT_SIZE}x1, got {:?}",
                image.dims()
            )));
        }
        Ok(Sample {
            id: id.into(),
            image,
            shape,
        })
    }

    pub fn normalized_image(&self) -> Tensor<f32> {
        normalize_pixels(&self.image)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub pattern: LabelingPattern,
    pub split: Split,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Checks that every sample uses `pattern` and that ids are unique.
    pub fn new(pattern: LabelingPattern, split: Split, samples: Vec<Sample>) -> Result<Self> {
        let mut ids = BTreeSet::new();
        for s in &samples {
            if s.shape.pattern() != pattern {
                return Err(Error::Contract(format!(
                    "sample `{}` has {} landmarks, dataset pattern is {pattern}",
                    s.id,
                    s.shape.pattern().landmarks()
                )));
            }
            if !ids.insert(s.id.as_str()) {
                return Err(Error::Contract(format!("duplicate sample id `{}`", s.id)));
            }
        }
        Ok(Dataset {
            pattern,
            split,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Normalized images stacked as `N x 50 x 50 x 1`.
    pub fn image_batch(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        if indices.is_empty() {
            return Err(Error::shape("empty batch"));
        }
        let per = INPUT_SIZE * INPUT_SIZE;
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend(self.samples[i].image.data().iter().map(|&v| normalize_pixel(v)));
        }
        Tensor::from_vec(&[indices.len(), INPUT_SIZE, INPUT_SIZE, 1], data)
    }
}

fn normalize_pixel(v: f32) -> f32 {
    (v - PIXEL_MEAN) * PIXEL_SCALE
}

/// `v -> (v - 128) * 0.0078125`, mapping 0..=255 onto [-1, 1).
pub fn normalize_pixels(image: &Tensor<f32>) -> Tensor<f32> {
    let data = image.data().iter().map(|&v| normalize_pixel(v)).collect();
    Tensor::from_vec(image.dims(), data).expect("same dims")
}

/// Augments every sample of `ds`. Sample `k` draws its output subset with
/// seed `seed + k`, so results do not depend on dataset order elsewhere.
pub fn augment_dataset(ds: &Dataset, params: &AugmentParams, seed: u64) -> Result<Dataset> {
    params.validate()?;
    let mut samples = vec![];
    for (k, s) in ds.samples.iter().enumerate() {
        samples.extend(augment(s, params, seed.wrapping_add(k as u64))?.samples);
    }
    Dataset::new(ds.pattern, ds.split, samples)
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let meta_path = dir.join("meta.txt");
    let meta = fs::read_to_string(&meta_path).map_err(|e| Error::dataset(&meta_path, e.to_string()))?;
    let mut lines = meta.lines();
    let pattern = match lines.next().and_then(|l| l.strip_prefix("pattern ")) {
        Some(n) => {
            let n: usize = n
                .trim()
                .parse()
                .map_err(|_| Error::dataset(&meta_path, format!("bad landmark count `{n}`")))?;
            LabelingPattern::from_count(n).map_err(|e| Error::dataset(&meta_path, e.to_string()))?
        }
        None => return Err(Error::dataset(&meta_path, "first line must be `pattern <n>`")),
    };
    let split = match lines.next().and_then(|l| l.strip_prefix("split ")) {
        Some(s) => s
            .trim()
            .parse()
            .map_err(|e: Error| Error::dataset(&meta_path, e.to_string()))?,
        None => return Err(Error::dataset(&meta_path, "second line must be `split <name>`")),
    };

    let mut ids = vec![];
    let image_dir = dir.join("images");
    if image_dir.is_dir() {
        for entry in fs::read_dir(&image_dir)? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "pgm") {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    ids.push(stem.to_string());
                }
            }
        }
    }
    ids.sort();

    let mut samples = Vec::with_capacity(ids.len());
    for id in ids {
        let img_path = image_dir.join(format!("{id}.pgm"));
        let bytes = fs::read(&img_path)?;
        let img = read_pgm(&bytes).map_err(|e| Error::dataset(&img_path, e.to_string()))?;
        if img.width != INPUT_SIZE || img.height != INPUT_SIZE {
            return Err(Error::dataset(
                &img_path,
                format!(
                    "image is {}x{}, expected {INPUT_SIZE}x{INPUT_SIZE}",
                    img.width, img.height
                ),
            ));
        }
        let lm_path = dir.join("landmarks").join(format!("{id}.txt"));
        let text = fs::read_to_string(&lm_path)
            .map_err(|e| Error::dataset(&lm_path, format!("cannot read landmarks: {e}")))?;
        let shape = parse_landmarks(&text, pattern).map_err(|msg| Error::dataset(&lm_path, msg))?;
        samples.push(Sample::new(id, img.to_tensor(), shape)?);
    }
    Dataset::new(pattern, split, samples)
}

fn parse_landmarks(text: &str, pattern: LabelingPattern) -> std::result::Result<Shape, String> {
    let mut coords = vec![];
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(x), Some(y), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(format!("line {} must hold two numbers", k + 1));
        };
        for v in [x, y] {
            coords.push(
                v.parse::<f64>()
                    .map_err(|_| format!("line {}: `{v}` is not a number", k + 1))?,
            );
        }
    }
    let n = pattern.landmarks();
    if coords.len() != 2 * n {
        return Err(format!(
            "expected {n} landmark lines for pattern {pattern}, found {}",
            coords.len() / 2
        ));
    }
    Shape::new(pattern, coords).map_err(|e| e.to_string())
}

pub fn save_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("landmarks"))?;
    fs::write(
        dir.join("meta.txt"),
        format!("pattern {}\nsplit {}\n", ds.pattern.landmarks(), ds.split),
    )?;
    for s in &ds.samples {
        let img = GrayImage::from_tensor(&s.image)?;
        fs::write(dir.join("images").join(format!("{}.pgm", s.id)), write_pgm(&img))?;
        let mut text = String::new();
        for [x, y] in s.shape.points() {
            text.push_str(&format!("{x} {y}\n"));
        }
        fs::write(dir.join("landmarks").join(format!("{}.txt", s.id)), text)?;
    }
    Ok(())
}
