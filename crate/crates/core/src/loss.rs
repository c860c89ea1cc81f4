//! Weighted alignment loss, its gradient, and the landmark weight schemes:
//! uniform, error-proportional, multi-center and randomly perturbed.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{ClusterPartition, Shape};
use crate::tensor::{Scalar, Tensor};

/// Default in-cluster emphasis ratio for multi-center fine-tuning.
pub const DEFAULT_ALPHA: f64 = 125.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightProvenance {
    Uniform,
    /// Proportional to per-landmark validation error.
    Weighting,
    /// Emphasizes cluster `i`.
    MultiCenter(usize),
    /// Randomly perturbed by `+-delta`.
    Perturbed(f64),
}

/// Per-landmark loss weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    pub u: Vec<f64>,
    pub provenance: WeightProvenance,
}

impl WeightVector {
    pub fn uniform(n: usize) -> Self {
        WeightVector {
            u: vec![1.0; n],
            provenance: WeightProvenance::Uniform,
        }
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.u.iter().sum()
    }
}

/// Which model a validation error profile was measured on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Basic,
    Weighting,
    Assembled,
    Head(usize),
}

/// Mean validation error of each landmark, normalized by inter-ocular distance.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorProfile {
    pub errors: Vec<f64>,
    pub source: ModelKind,
}

fn check_lengths(pred: &[f64], gt: &[f64], u: &[f64], d: f64) -> Result<()> {
    if !(d > 0.0) || !d.is_finite() {
        return Err(Error::Contract(format!(
            "inter-ocular distance must be positive, got {d}"
        )));
    }
    if pred.len() != gt.len() || gt.len() != 2 * u.len() {
        return Err(Error::shape(format!(
            "{} predicted and {} ground-truth coordinates for {} weights",
            pred.len(),
            gt.len(),
            u.len()
        )));
    }
    Ok(())
}

/// `E = sum_j u_j [(y_2j-1 - p_2j-1)^2 + (y_2j - p_2j)^2] / (2 d^2)` on raw
/// interleaved coordinates.
pub fn weighted_loss_coords(pred: &[f64], gt: &[f64], u: &[f64], d: f64) -> Result<f64> {
    check_lengths(pred, gt, u, d)?;
    let sum: f64 = u
        .iter()
        .enumerate()
        .map(|(j, &w)| {
            let dx = gt[2 * j] - pred[2 * j];
            let dy = gt[2 * j + 1] - pred[2 * j + 1];
            w * (dx * dx + dy * dy)
        })
        .sum();
    Ok(sum / (2.0 * d * d))
}

/// `dE/dp_k = u_j (p_k - y_k) / d^2` for `k` in `{2j-1, 2j}`.
pub fn loss_gradient_coords(pred: &[f64], gt: &[f64], u: &[f64], d: f64) -> Result<Vec<f64>> {
    check_lengths(pred, gt, u, d)?;
    let d2 = d * d;
    Ok(pred
        .iter()
        .zip(gt)
        .enumerate()
        .map(|(k, (&p, &y))| u[k / 2] * (p - y) / d2)
        .collect())
}

pub fn weighted_loss(pred: &Shape, gt: &Shape, u: &WeightVector, d: f64) -> Result<f64> {
    weighted_loss_coords(pred.coords(), gt.coords(), &u.u, d)
}

pub fn loss_gradient(pred: &Shape, gt: &Shape, u: &WeightVector, d: f64) -> Result<Vec<f64>> {
    loss_gradient_coords(pred.coords(), gt.coords(), &u.u, d)
}

/// Mean of the per-sample losses over a batch and its gradient with respect
/// to the `N x 2n` predictions. `gt[i]` and `d[i]` are sample `i`'s
/// ground-truth coordinates and inter-ocular distance.
pub fn batch_loss_and_grad<T: Scalar>(
    pred: &Tensor<T>,
    gt: &[&[f64]],
    u: &[f64],
    d: &[f64],
) -> Result<(f64, Tensor<T>)> {
    let outs = 2 * u.len();
    let n = gt.len();
    if pred.dims() != [n, outs] || d.len() != n || n == 0 {
        return Err(Error::shape(format!(
            "predictions {:?} for {n} samples with {} landmarks",
            pred.dims(),
            u.len()
        )));
    }
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(n * outs);
    for (i, row) in pred.data().chunks_exact(outs).enumerate() {
        let p: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
        total += weighted_loss_coords(&p, gt[i], u, d[i])?;
        let g = loss_gradient_coords(&p, gt[i], u, d[i])?;
        grad.extend(g.iter().map(|&v| T::from_f64_lossy(v / n as f64)));
    }
    Ok((total / n as f64, Tensor::from_vec(&[n, outs], grad)?))
}

/// Error-proportional weights `u_j = n e_j / sum(e)`.
pub fn weights_from_errors(profile: &ErrorProfile) -> Result<WeightVector> {
    let e = &profile.errors;
    if let Some(bad) = e.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::InvalidWeights(format!(
            "landmark errors must be finite and non-negative, found {bad}"
        )));
    }
    let total: f64 = e.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidWeights(
            "all landmark errors are zero; weights are undefined".into(),
        ));
    }
    let n = e.len() as f64;
    Ok(WeightVector {
        u: e.iter().map(|&v| n * v / total).collect(),
        provenance: WeightProvenance::Weighting,
    })
}

/// Group weights `(u_P, u_Q)` with `u_P = alpha u_Q` and
/// `u_P |P| + u_Q (n - |P|) = n`.
pub fn group_weights(n: usize, cluster_size: usize, alpha: f64) -> (f64, f64) {
    let (n, p) = (n as f64, cluster_size as f64);
    let denom = (alpha - 1.0) * p + n;
    (alpha * n / denom, n / denom)
}

/// Weights emphasizing cluster `i`: each group's total mass
/// (`u_P |P|` and `u_Q (n - |P|)`) is spread over its landmarks in
/// proportion to their validation errors.
pub fn multicenter_weights(
    i: usize,
    profile: &ErrorProfile,
    partition: &ClusterPartition,
    alpha: f64,
) -> Result<WeightVector> {
    let n = partition.pattern().landmarks();
    if profile.errors.len() != n {
        return Err(Error::shape(format!(
            "error profile has {} landmarks, partition has {n}",
            profile.errors.len()
        )));
    }
    if !(alpha > 1.0) {
        return Err(Error::InvalidWeights(format!("alpha must exceed 1, got {alpha}")));
    }
    if i >= partition.len() {
        return Err(Error::InvalidWeights(format!(
            "cluster {i} does not exist ({} clusters)",
            partition.len()
        )));
    }
    let inside = partition.cluster(i);
    let outside = partition.complement(i);
    let e = &profile.errors;
    let mass = |idx: &[usize]| idx.iter().map(|&j| e[j]).sum::<f64>();
    let (sum_p, sum_q) = (mass(inside), mass(&outside));
    if !(sum_p > 0.0) || !(sum_q > 0.0) || !sum_p.is_finite() || !sum_q.is_finite() {
        return Err(Error::InvalidWeights(format!(
            "cluster {i} needs positive error mass inside and outside (got {sum_p} and {sum_q})"
        )));
    }
    let (u_p, u_q) = group_weights(n, inside.len(), alpha);
    let (total_p, total_q) = (u_p * inside.len() as f64, u_q * outside.len() as f64);
    let mut u = vec![0.0; n];
    for &j in inside {
        u[j] = total_p * e[j] / sum_p;
    }
    for &j in &outside {
        u[j] = total_q * e[j] / sum_q;
    }
    Ok(WeightVector {
        u,
        provenance: WeightProvenance::MultiCenter(i),
    })
}

/// Adds `delta` to `floor(n/2)` randomly chosen landmarks and subtracts it
/// from the rest.
pub fn perturb_weights(u: &WeightVector, delta: f64, seed: u64) -> Result<WeightVector> {
    if !(delta >= 0.0) || !delta.is_finite() {
        return Err(Error::InvalidWeights(format!(
            "perturbation must be finite and non-negative, got {delta}"
        )));
    }
    let n = u.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = u.u.clone();
    for (rank, &j) in order.iter().enumerate() {
        if rank < n / 2 {
            out[j] += delta;
        } else {
            out[j] -= delta;
            if out[j] < 0.0 {
                return Err(Error::InvalidWeights(format!(
                    "perturbation {delta} makes weight of landmark {} negative ({})",
                    j + 1,
                    out[j]
                )));
            }
        }
    }
    Ok(WeightVector {
        u: out,
        provenance: WeightProvenance::Perturbed(delta),
    })
}
