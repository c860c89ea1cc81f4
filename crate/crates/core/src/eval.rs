//! Mean error, failure rate, CED curves, inference speed and occlusion
//! tables.

use std::fmt;
use std::time::Instant;

use crate::data::{occlude_cluster, Dataset, GRAY};
use crate::error::{Error, Result};
use crate::geometry::{clusters_for_pattern, per_landmark_errors, Shape};
use crate::network::NetworkParams;
use crate::tensor::Tensor;

/// A face fails when its mean normalized error is strictly above this.
pub const FAILURE_THRESHOLD: f64 = 0.10;

/// Images per inference batch when evaluating a dataset.
const EVAL_BATCH: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_sample_mean_errors: Vec<f64>,
    /// Percent.
    pub mean_error: f64,
    /// Percent of faces above [`FAILURE_THRESHOLD`].
    pub failure_rate: f64,
    pub n_samples: usize,
}

impl EvalReport {
    pub fn from_errors(per_sample_mean_errors: Vec<f64>) -> Result<Self> {
        let n = per_sample_mean_errors.len();
        if n == 0 {
            return Err(Error::Contract("cannot evaluate an empty dataset".into()));
        }
        let mean = per_sample_mean_errors.iter().sum::<f64>() / n as f64;
        let failures = per_sample_mean_errors
            .iter()
            .filter(|&&e| e > FAILURE_THRESHOLD)
            .count();
        Ok(EvalReport {
            mean_error: 100.0 * mean,
            failure_rate: 100.0 * failures as f64 / n as f64,
            n_samples: n,
            per_sample_mean_errors,
        })
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "mean error {:.2}%, failure rate {:.2}% over {} faces",
            self.mean_error, self.failure_rate, self.n_samples
        )
    }
}

/// Predicted shapes for every sample, batched through the shared layers.
pub fn predict_dataset(params: &NetworkParams<f32>, head: usize, ds: &Dataset) -> Result<Vec<Shape>> {
    params.head(head)?;
    let mut out = Vec::with_capacity(ds.len());
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let feats = params.features(&ds.image_batch(chunk)?)?;
        let feats = feats.reshape(&[chunk.len(), params.feature_dim()])?;
        let pred = params.predict_batch(head, &feats)?;
        for row in pred.data().chunks_exact(params.spec().outputs()) {
            out.push(Shape::new(ds.pattern, row.iter().map(|&v| f64::from(v)).collect())?);
        }
    }
    Ok(out)
}

/// `errors[i][j]`: normalized error of landmark `j` on sample `i`.
pub fn landmark_errors(params: &NetworkParams<f32>, head: usize, ds: &Dataset) -> Result<Vec<Vec<f64>>> {
    let preds = predict_dataset(params, head, ds)?;
    preds
        .iter()
        .zip(&ds.samples)
        .map(|(p, s)| per_landmark_errors(p, &s.shape))
        .collect()
}

fn row_mean(row: &[f64]) -> f64 {
    row.iter().sum::<f64>() / row.len() as f64
}

pub fn evaluate(params: &NetworkParams<f32>, head: usize, ds: &Dataset) -> Result<EvalReport> {
    if ds.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty dataset".into()));
    }
    let errs = landmark_errors(params, head, ds)?;
    EvalReport::from_errors(errs.iter().map(|r| row_mean(r)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CedCurve {
    pub thresholds: Vec<f64>,
    pub fractions: Vec<f64>,
}

impl CedCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,fraction\n");
        for (t, f) in self.thresholds.iter().zip(&self.fractions) {
            s.push_str(&format!("{t:.3},{f:.6}\n"));
        }
        s
    }
}

/// `0, 0.002, ..., 0.2`.
pub fn default_thresholds() -> Vec<f64> {
    (0..=100).map(|k| k as f64 / 500.0).collect()
}

/// Fraction of faces whose mean error is `<= t` for each threshold.
pub fn ced_curve(errors: &[f64], thresholds: &[f64]) -> Result<CedCurve> {
    if errors.is_empty() {
        return Err(Error::Contract("CED needs at least one error".into()));
    }
    if thresholds.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Contract("CED thresholds must be strictly ascending".into()));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let fractions = thresholds
        .iter()
        .map(|&t| sorted.partition_point(|&e| e <= t) as f64 / n)
        .collect();
    Ok(CedCurve {
        thresholds: thresholds.to_vec(),
        fractions,
    })
}

/// Images per second for single-image inference (feature extraction and
/// prediction), after one warm-up pass. `images` must be normalized.
pub fn fps_bench(params: &NetworkParams<f32>, head: usize, images: &[Tensor<f32>], repeats: usize) -> Result<f64> {
    if images.is_empty() || repeats == 0 {
        return Err(Error::Contract("fps bench needs images and repeats >= 1".into()));
    }
    let once = |img: &Tensor<f32>| -> Result<Shape> {
        let x = params.extract_features(img)?;
        params.predict_shape(head, &x)
    };
    once(&images[0])?;
    let start = Instant::now();
    for k in 0..repeats {
        std::hint::black_box(once(&images[k % images.len()])?);
    }
    Ok(repeats as f64 / start.elapsed().as_secs_f64())
}

/// One row of the model comparison report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub model: String,
    pub dataset: String,
    pub mean_error: f64,
    pub failure_rate: f64,
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut s = String::from("model,dataset,mean_error,failure_rate\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.4},{:.4}\n",
            r.model, r.dataset, r.mean_error, r.failure_rate
        ));
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Condition {
    Clean,
    Occluded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LandmarkGroup {
    Cluster,
    Others,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcclusionCell {
    pub model: String,
    pub condition: Condition,
    pub group: LandmarkGroup,
    /// Percent.
    pub mean_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcclusionTable {
    pub cluster: String,
    pub cells: Vec<OcclusionCell>,
}

impl OcclusionTable {
    pub fn get(&self, model: &str, condition: Condition, group: LandmarkGroup) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.model == model && c.condition == condition && c.group == group)
            .map(|c| c.mean_error)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,condition,group,mean_error\n");
        for c in &self.cells {
            let cond = match c.condition {
                Condition::Clean => "clean",
                Condition::Occluded => "occluded",
            };
            let group = match c.group {
                LandmarkGroup::Cluster => self.cluster.as_str(),
                LandmarkGroup::Others => "others",
            };
            s.push_str(&format!("{},{cond},{group},{:.4}\n", c.model, c.mean_error));
        }
        s
    }
}

/// Mean error of `cluster`'s landmarks and of all other landmarks, on clean
/// and occluded copies of `test`, for each named model (head 0).
pub fn occlusion_report(
    models: &[(&str, &NetworkParams<f32>)],
    test: &Dataset,
    cluster: usize,
) -> Result<OcclusionTable> {
    let partition = clusters_for_pattern(test.pattern);
    if cluster >= partition.len() {
        return Err(Error::Contract(format!("cluster {cluster} does not exist")));
    }
    let inside = partition.cluster(cluster);
    let outside = partition.complement(cluster);
    let occluded = Dataset::new(
        test.pattern,
        test.split,
        test.samples
            .iter()
            .map(|s| occlude_cluster(s, cluster, GRAY))
            .collect::<Result<_>>()?,
    )?;
    let group_mean = |errs: &[Vec<f64>], idx: &[usize]| -> f64 {
        let per: Vec<f64> = errs
            .iter()
            .map(|row| idx.iter().map(|&j| row[j]).sum::<f64>() / idx.len() as f64)
            .collect();
        100.0 * per.iter().sum::<f64>() / per.len() as f64
    };
    let mut cells = vec![];
    for &(name, params) in models {
        for (condition, ds) in [(Condition::Clean, test), (Condition::Occluded, &occluded)] {
            let errs = landmark_errors(params, 0, ds)?;
            for (group, idx) in [(LandmarkGroup::Cluster, inside), (LandmarkGroup::Others, &outside[..])] {
                cells.push(OcclusionCell {
                    model: name.to_string(),
                    condition,
                    group,
                    mean_error: group_mean(&errs, idx),
                });
            }
        }
    }
    Ok(OcclusionTable {
        cluster: partition.names()[cluster].clone(),
        cells,
    })
}
