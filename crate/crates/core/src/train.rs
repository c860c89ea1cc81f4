//! The multi-center learning pipeline: pre-training, two-step weighting
//! fine-tuning, per-cluster head fine-tuning and model assembling.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{evaluate, landmark_errors, ReportRow};
use crate::geometry::{clusters_for_pattern, interocular_distance, per_landmark_errors, Shape};
use crate::kernel::{affine_backward, affine_forward, sgd_step, ParamBlock};
use crate::loss::{
    batch_loss_and_grad, multicenter_weights, perturb_weights, weights_from_errors, ErrorProfile, ModelKind,
    WeightVector, DEFAULT_ALPHA,
};
use crate::network::{build_network, head_name, NetworkParams, COORD_SCALE};
use crate::tensor::Tensor;

/// Hyperparameters of one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub max_iterations: usize,
    pub initial_lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Iterations between validation checks.
    pub check_every: usize,
    /// Stop after this many consecutive checks without improvement.
    pub convergence_patience: usize,
}

impl StageConfig {
    /// Pre-training as published: 18e4 iterations from lr 0.02.
    pub fn paper_pretrain() -> Self {
        StageConfig {
            max_iterations: 180_000,
            initial_lr: 0.02,
            lr_decay_factor: 0.3,
            lr_decay_every: 30_000,
            batch_size: 64,
            momentum: 0.9,
            weight_decay: 5e-4,
            check_every: 500,
            convergence_patience: 10,
        }
    }

    /// Each fine-tuning step as published: 6e4 iterations from lr 0.001.
    pub fn paper_finetune() -> Self {
        StageConfig {
            max_iterations: 60_000,
            initial_lr: 0.001,
            ..Self::paper_pretrain()
        }
    }

    /// The paper schedule shrunk to `iterations`, keeping the learning rates,
    /// decay factor and the number of decay periods.
    pub fn scaled(paper: &StageConfig, iterations: usize, batch_size: usize) -> Self {
        let periods = (paper.max_iterations / paper.lr_decay_every).max(1);
        StageConfig {
            max_iterations: iterations,
            lr_decay_every: (iterations / periods).max(1),
            batch_size,
            check_every: (iterations / 20).clamp(1, paper.check_every),
            ..paper.clone()
        }
    }

    pub fn lr_at(&self, iteration: usize) -> f64 {
        self.initial_lr * self.lr_decay_factor.powi((iteration / self.lr_decay_every) as i32)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.max_iterations,
            self.lr_decay_every,
            self.batch_size,
            self.check_every,
            self.convergence_patience,
        ];
        if positive.contains(&0) {
            return Err(Error::Config(format!("stage counts must be positive: {self:?}")));
        }
        if !(self.initial_lr > 0.0) || !self.initial_lr.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.initial_lr
            )));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor < 1.0) {
            return Err(Error::Config(format!(
                "lr decay factor must lie in (0, 1), got {}",
                self.lr_decay_factor
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "momentum must lie in [0, 1) and weight decay be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Configuration of every stage of the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub pretrain: StageConfig,
    /// Used for each of the two weighting steps.
    pub weighting: StageConfig,
    /// Used for each cluster head.
    pub multicenter: StageConfig,
    pub alpha: f64,
}

impl PipelineConfig {
    pub fn paper() -> Self {
        PipelineConfig {
            pretrain: StageConfig::paper_pretrain(),
            weighting: StageConfig::paper_finetune(),
            multicenter: StageConfig::paper_finetune(),
            alpha: DEFAULT_ALPHA,
        }
    }

    /// Minutes on one core: 2e3 pre-training iterations, short fine-tuning.
    pub fn desk() -> Self {
        PipelineConfig {
            pretrain: StageConfig::scaled(&StageConfig::paper_pretrain(), 2000, 8),
            weighting: StageConfig::scaled(&StageConfig::paper_finetune(), 300, 8),
            multicenter: StageConfig::scaled(&StageConfig::paper_finetune(), 2000, 32),
            alpha: DEFAULT_ALPHA,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.pretrain.validate()?;
        self.weighting.validate()?;
        self.multicenter.validate()?;
        if !(self.alpha > 1.0) {
            return Err(Error::Config(format!("alpha must exceed 1, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// What happened in one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub stage: String,
    pub iterations: usize,
    /// Iteration of the kept checkpoint (0 is the starting point).
    pub best_iteration: usize,
    /// Selection metric (mean normalized error) at the start and at the
    /// kept checkpoint.
    pub initial_val_error: f64,
    pub best_val_error: f64,
    /// Training loss of every iteration.
    pub losses: Vec<f64>,
    pub seconds: f64,
}

/// Everything a stage loop needs from the model being trained.
trait StageModel {
    type Snapshot;
    fn step(&mut self, batch: &[usize], lr: f64, cfg: &StageConfig) -> Result<f64>;
    fn val_error(&self) -> Result<f64>;
    fn snapshot(&self) -> Self::Snapshot;
    fn restore(&mut self, snap: Self::Snapshot);
}

/// Endless shuffled passes over `0..n`.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    fn new(n: usize, rng: ChaCha8Rng) -> Self {
        let mut b = Batcher {
            order: (0..n).collect(),
            pos: n,
            rng,
        };
        b.reshuffle();
        b
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.order.len());
        if self.pos + size > self.order.len() {
            self.reshuffle();
        }
        let b = self.order[self.pos..self.pos + size].to_vec();
        self.pos += size;
        b
    }
}

/// Stage-specific random stream derived from the run seed.
fn stage_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn run_stage<M: StageModel>(
    stage: &str,
    cfg: &StageConfig,
    n_train: usize,
    rng: ChaCha8Rng,
    model: &mut M,
) -> Result<StageReport> {
    cfg.validate()?;
    if n_train == 0 {
        return Err(Error::Contract("training set is empty".into()));
    }
    let start = Instant::now();
    let mut batcher = Batcher::new(n_train, rng);
    let initial = model.val_error()?;
    let (mut best, mut best_iteration, mut kept) = (initial, 0, model.snapshot());
    let mut stale = 0;
    let mut losses = Vec::with_capacity(cfg.max_iterations);
    for it in 0..cfg.max_iterations {
        let loss = model.step(&batcher.next(cfg.batch_size), cfg.lr_at(it), cfg)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                stage: stage.to_string(),
                iteration: it,
                loss,
            });
        }
        log::debug!("{stage}: iteration {it}, loss {loss:.6}");
        losses.push(loss);
        let done = it + 1;
        if done % cfg.check_every == 0 || done == cfg.max_iterations {
            let e = model.val_error()?;
            log::info!(
                "{stage}: iteration {done}, lr {:.2e}, loss {loss:.5}, validation error {:.4}",
                cfg.lr_at(it),
                e
            );
            if !e.is_finite() {
                return Err(Error::Diverged {
                    stage: stage.to_string(),
                    iteration: it,
                    loss: e,
                });
            }
            if e < best {
                (best, best_iteration, kept, stale) = (e, done, model.snapshot(), 0);
            } else {
                stale += 1;
                if stale >= cfg.convergence_patience {
                    break;
                }
            }
        }
    }
    model.restore(kept);
    Ok(StageReport {
        stage: stage.to_string(),
        iterations: losses.len(),
        best_iteration,
        initial_val_error: initial,
        best_val_error: best,
        losses,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Ground truth of a dataset in the form the loss wants: pixel units, to
/// match what the heads regress.
struct Targets {
    coords: Vec<Vec<f64>>,
    iod: Vec<f64>,
}

impl Targets {
    fn new(ds: &Dataset) -> Result<Self> {
        Ok(Targets {
            coords: ds
                .samples
                .iter()
                .map(|s| s.shape.coords().iter().map(|v| v * COORD_SCALE).collect())
                .collect(),
            iod: ds
                .samples
                .iter()
                .map(|s| interocular_distance(&s.shape).map(|d| d * COORD_SCALE))
                .collect::<Result<_>>()?,
        })
    }

    fn select(&self, batch: &[usize]) -> (Vec<&[f64]>, Vec<f64>) {
        (
            batch.iter().map(|&i| self.coords[i].as_slice()).collect(),
            batch.iter().map(|&i| self.iod[i]).collect(),
        )
    }
}

/// End-to-end training of the shared layers and head 0.
struct NetworkStage<'a> {
    params: NetworkParams<f32>,
    train: &'a Dataset,
    val: &'a Dataset,
    targets: Targets,
    u: Vec<f64>,
}

impl StageModel for NetworkStage<'_> {
    type Snapshot = NetworkParams<f32>;

    fn step(&mut self, batch: &[usize], lr: f64, cfg: &StageConfig) -> Result<f64> {
        let images = self.train.image_batch(batch)?;
        let (feats, cache) = self.params.forward_train(&images)?;
        let head = &self.params.heads()[0];
        let pred = affine_forward(&head.value, &feats)?;
        let (gt, iod) = self.targets.select(batch);
        let (loss, grad) = batch_loss_and_grad(&pred, &gt, &self.u, &iod)?;
        if !loss.is_finite() {
            return Ok(loss);
        }
        let shared_trainable = self.params.units().iter().any(|u| !u.is_frozen());
        let (gw, gf) = affine_backward(&grad, &feats, &head.value, shared_trainable)?;
        self.params.head_mut(0)?.grad = gw;
        if let Some(gf) = gf {
            self.params.backward(cache, &gf)?;
        }
        for block in self.params.blocks_mut() {
            sgd_step(block, lr, cfg.momentum, cfg.weight_decay)?;
        }
        Ok(loss)
    }

    fn val_error(&self) -> Result<f64> {
        Ok(evaluate(&self.params, 0, self.val)?.mean_error / 100.0)
    }

    fn snapshot(&self) -> NetworkParams<f32> {
        self.params.clone()
    }

    fn restore(&mut self, snap: NetworkParams<f32>) {
        self.params = snap;
    }
}

fn train_network(
    stage: &str,
    params: NetworkParams<f32>,
    train: &Dataset,
    val: &Dataset,
    u: &WeightVector,
    cfg: &StageConfig,
    rng: ChaCha8Rng,
) -> Result<(NetworkParams<f32>, StageReport)> {
    check_datasets(train, val)?;
    if u.len() != train.pattern.landmarks() {
        return Err(Error::shape(format!(
            "{} weights for {} landmarks",
            u.len(),
            train.pattern.landmarks()
        )));
    }
    let mut model = NetworkStage {
        params,
        train,
        val,
        targets: Targets::new(train)?,
        u: u.u.clone(),
    };
    model.params.reset_momentum();
    let report = run_stage(stage, cfg, train.len(), rng, &mut model).map_err(|e| e.in_stage(stage))?;
    Ok((model.params, report))
}

fn check_datasets(train: &Dataset, val: &Dataset) -> Result<()> {
    if train.pattern != val.pattern {
        return Err(Error::Contract(format!(
            "training set uses pattern {} but validation set uses {}",
            train.pattern, val.pattern
        )));
    }
    if val.is_empty() || train.is_empty() {
        return Err(Error::Contract("training and validation sets must be nonempty".into()));
    }
    Ok(())
}

fn mean_shape(ds: &Dataset) -> Vec<f64> {
    let mut m = vec![0.0; 2 * ds.pattern.landmarks()];
    for s in &ds.samples {
        for (a, v) in m.iter_mut().zip(s.shape.coords()) {
            *a += v / ds.len() as f64;
        }
    }
    m
}

const STREAM_PRETRAIN: u64 = 1;
const STREAM_STEP2: u64 = 2;
const STREAM_STEP3: u64 = 3;
const STREAM_HEADS: u64 = 100;

/// Pre-trains a fresh network with uniform weights and returns the best
/// validation checkpoint. The head's bias row starts at the mean training
/// shape.
pub fn pretrain_bm(
    train: &Dataset,
    val: &Dataset,
    cfg: &StageConfig,
    seed: u64,
) -> Result<(NetworkParams<f32>, StageReport)> {
    check_datasets(train, val)?;
    let (_, mut params) = build_network(train.pattern, seed);
    let mean = mean_shape(train);
    let head = params.head_mut(0)?;
    for (w, m) in head.value.data_mut().iter_mut().zip(&mean) {
        *w = (m * COORD_SCALE) as f32;
    }
    let u = WeightVector::uniform(train.pattern.landmarks());
    train_network(
        "pretrain",
        params,
        train,
        val,
        &u,
        cfg,
        stage_rng(seed, STREAM_PRETRAIN),
    )
}

/// Mean normalized error of each landmark over `val`.
pub fn validation_errors(params: &NetworkParams<f32>, head: usize, val: &Dataset) -> Result<ErrorProfile> {
    if val.is_empty() {
        return Err(Error::Contract("validation set is empty".into()));
    }
    let errs = landmark_errors(params, head, val)?;
    Ok(profile_from_rows(&errs, ModelKind::Head(head)))
}

fn profile_from_rows(rows: &[Vec<f64>], source: ModelKind) -> ErrorProfile {
    let n = rows[0].len();
    let mut e = vec![0.0; n];
    for row in rows {
        for (a, v) in e.iter_mut().zip(row) {
            *a += v;
        }
    }
    e.iter_mut().for_each(|v| *v /= rows.len() as f64);
    ErrorProfile { errors: e, source }
}

#[derive(Debug, Clone)]
pub struct WeightingOutcome {
    pub wm: NetworkParams<f32>,
    pub profile_b: ErrorProfile,
    pub weights: WeightVector,
    pub reports: Vec<StageReport>,
}

/// Steps 2 and 3: fine-tune with error-proportional weights, first with the
/// first six convolutions frozen, then with everything trainable.
pub fn weighting_finetune(
    bm: &NetworkParams<f32>,
    train: &Dataset,
    val: &Dataset,
    cfg: &StageConfig,
    seed: u64,
) -> Result<WeightingOutcome> {
    let mut profile_b = validation_errors(bm, 0, val).map_err(|e| e.in_stage("weighting"))?;
    profile_b.source = ModelKind::Basic;
    let weights = weights_from_errors(&profile_b).map_err(|e| e.in_stage("weighting"))?;
    let (wm, reports) = weighting_finetune_with(bm, &weights, train, val, cfg, seed)?;
    Ok(WeightingOutcome {
        wm,
        profile_b,
        weights,
        reports,
    })
}

/// Steps 2 and 3 with caller-supplied landmark weights.
pub fn weighting_finetune_with(
    bm: &NetworkParams<f32>,
    weights: &WeightVector,
    train: &Dataset,
    val: &Dataset,
    cfg: &StageConfig,
    seed: u64,
) -> Result<(NetworkParams<f32>, Vec<StageReport>)> {
    let (mut params, r2) = weighting_step2(bm, weights, train, val, cfg, seed)?;
    params.unfreeze_all();
    let (params, r3) = train_network(
        "weighting-step3",
        params,
        train,
        val,
        weights,
        cfg,
        stage_rng(seed, STREAM_STEP3),
    )?;
    Ok((params, vec![r2, r3]))
}

/// Step 2 alone: fine-tunes a copy of `bm` with the first six convolutions
/// frozen. The returned network keeps that freeze mask.
pub fn weighting_step2(
    bm: &NetworkParams<f32>,
    weights: &WeightVector,
    train: &Dataset,
    val: &Dataset,
    cfg: &StageConfig,
    seed: u64,
) -> Result<(NetworkParams<f32>, StageReport)> {
    let mut params = bm.clone();
    params.freeze_first_six_conv();
    train_network(
        "weighting-step2",
        params,
        train,
        val,
        weights,
        cfg,
        stage_rng(seed, STREAM_STEP2),
    )
}

/// Inference-mode shared-layer features of a dataset, with its targets.
/// Valid while the shared layers stay frozen.
pub struct FeatureCache {
    pub features: Tensor<f32>,
    targets: Targets,
}

impl FeatureCache {
    pub fn new(params: &NetworkParams<f32>, ds: &Dataset) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::Contract("cannot cache features of an empty dataset".into()));
        }
        let d = params.feature_dim();
        let mut data = Vec::with_capacity(ds.len() * d);
        let idx: Vec<usize> = (0..ds.len()).collect();
        for chunk in idx.chunks(32) {
            data.extend_from_slice(params.features(&ds.image_batch(chunk)?)?.data());
        }
        Ok(FeatureCache {
            features: Tensor::from_vec(&[ds.len(), d], data)?,
            targets: Targets::new(ds)?,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.iod.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn rows(&self, batch: &[usize]) -> Result<Tensor<f32>> {
        let d = self.features.dims()[1];
        let mut out = Vec::with_capacity(batch.len() * d);
        for &i in batch {
            out.extend_from_slice(&self.features.data()[i * d..(i + 1) * d]);
        }
        Tensor::from_vec(&[batch.len(), d], out)
    }
}

/// Training of one prediction matrix on cached features.
struct HeadStage<'a> {
    head: ParamBlock<f32>,
    train: &'a FeatureCache,
    val: &'a FeatureCache,
    u: Vec<f64>,
    pattern: crate::geometry::LabelingPattern,
    /// Landmarks whose validation error selects the checkpoint.
    select: Vec<usize>,
}

impl StageModel for HeadStage<'_> {
    type Snapshot = Tensor<f32>;

    fn step(&mut self, batch: &[usize], lr: f64, cfg: &StageConfig) -> Result<f64> {
        let feats = self.train.rows(batch)?;
        let pred = affine_forward(&self.head.value, &feats)?;
        let (gt, iod) = self.train.targets.select(batch);
        let (loss, grad) = batch_loss_and_grad(&pred, &gt, &self.u, &iod)?;
        if !loss.is_finite() {
            return Ok(loss);
        }
        self.head.grad = affine_backward(&grad, &feats, &self.head.value, false)?.0;
        sgd_step(&mut self.head, lr, cfg.momentum, cfg.weight_decay)?;
        Ok(loss)
    }

    fn val_error(&self) -> Result<f64> {
        let pred = affine_forward(&self.head.value, &self.val.features)?;
        let outs = 2 * self.pattern.landmarks();
        let mut total = 0.0;
        for (i, row) in pred.data().chunks_exact(outs).enumerate() {
            let p = Shape::new(self.pattern, row.iter().map(|&v| f64::from(v)).collect())?;
            // Both in pixel units; the errors are scale-free.
            let g = Shape::new(self.pattern, self.val.targets.coords[i].clone())?;
            let e = per_landmark_errors(&p, &g)?;
            total += self.select.iter().map(|&j| e[j]).sum::<f64>() / self.select.len() as f64;
        }
        Ok(total / self.val.len() as f64)
    }

    fn snapshot(&self) -> Tensor<f32> {
        self.head.value.clone()
    }

    fn restore(&mut self, snap: Tensor<f32>) {
        self.head.value = snap;
    }
}

/// Steps 4-6 for cluster `i`: starting from WM's prediction matrix, trains
/// a head on frozen shared features with weights emphasizing the cluster.
/// The checkpoint is chosen by validation error on the cluster's landmarks.
#[allow(clippy::too_many_arguments)]
pub fn multicenter_finetune_cached(
    wm: &NetworkParams<f32>,
    i: usize,
    train: &FeatureCache,
    val: &FeatureCache,
    profile_w: &ErrorProfile,
    cfg: &StageConfig,
    alpha: f64,
    seed: u64,
) -> Result<(Tensor<f32>, StageReport)> {
    let stage = format!("multicenter-{i}");
    let pattern = wm.spec().pattern;
    let partition = clusters_for_pattern(pattern);
    let u = multicenter_weights(i, profile_w, &partition, alpha).map_err(|e| e.in_stage(&stage))?;
    let mut model = HeadStage {
        head: ParamBlock::new(head_name(i), wm.head(0)?.value.clone()),
        train,
        val,
        u: u.u,
        pattern,
        select: partition.cluster(i).to_vec(),
    };
    let report = run_stage(
        &stage,
        cfg,
        train.len(),
        stage_rng(seed, STREAM_HEADS + i as u64),
        &mut model,
    )
    .map_err(|e| e.in_stage(&stage))?;
    Ok((model.head.value, report))
}

/// [`multicenter_finetune_cached`] computing the feature caches itself.
#[allow(clippy::too_many_arguments)]
pub fn multicenter_finetune(
    wm: &NetworkParams<f32>,
    i: usize,
    train: &Dataset,
    val: &Dataset,
    profile_w: &ErrorProfile,
    cfg: &StageConfig,
    alpha: f64,
    seed: u64,
) -> Result<(Tensor<f32>, StageReport)> {
    check_datasets(train, val)?;
    let (tf, vf) = (FeatureCache::new(wm, train)?, FeatureCache::new(wm, val)?);
    multicenter_finetune_cached(wm, i, &tf, &vf, profile_w, cfg, alpha, seed)
}

/// Builds `W^a` by copying, for every landmark `j` of cluster `i`, columns
/// `2j` and `2j + 1` of head `i`. `clusters` must cover every landmark
/// exactly once.
pub fn assemble<T: crate::tensor::Scalar>(heads: &[Tensor<T>], clusters: &[Vec<usize>]) -> Result<Tensor<T>> {
    let first = heads
        .first()
        .ok_or_else(|| Error::Contract("no heads to assemble".into()))?;
    if heads.len() != clusters.len() {
        return Err(Error::Contract(format!(
            "{} heads for {} clusters",
            heads.len(),
            clusters.len()
        )));
    }
    let [rows, cols] = *first.dims() else {
        return Err(Error::shape(format!("head must be a matrix, got {:?}", first.dims())));
    };
    if heads.iter().any(|h| h.dims() != first.dims()) {
        return Err(Error::shape("heads differ in dims"));
    }
    let n = cols / 2;
    let mut owner = vec![None; n];
    for (i, c) in clusters.iter().enumerate() {
        for &j in c {
            match owner.get_mut(j) {
                None => return Err(Error::Contract(format!("landmark {j} out of range for {n} landmarks"))),
                Some(Some(prev)) => return Err(Error::Contract(format!("landmark {j} is in clusters {prev} and {i}"))),
                Some(slot) => *slot = Some(i),
            }
        }
    }
    if let Some(j) = owner.iter().position(Option::is_none) {
        return Err(Error::Contract(format!("landmark {j} belongs to no cluster")));
    }
    let mut out = first.clone();
    let data = out.data_mut();
    for r in 0..rows {
        for (j, o) in owner.iter().enumerate() {
            let src = heads[o.expect("checked")].data();
            for c in [2 * j, 2 * j + 1] {
                data[r * cols + c] = src[r * cols + c];
            }
        }
    }
    Ok(out)
}

/// Models and measurements produced by [`run_full_pipeline`].
#[derive(Debug, Clone)]
pub struct TrainedModels {
    pub bm: NetworkParams<f32>,
    pub wm: NetworkParams<f32>,
    pub heads: Vec<Tensor<f32>>,
    pub am: NetworkParams<f32>,
    pub profile_b: ErrorProfile,
    pub profile_w: ErrorProfile,
    pub stages: Vec<StageReport>,
}

impl TrainedModels {
    /// WM's shared layers with head `i` as the only prediction layer.
    pub fn head_model(&self, i: usize) -> Result<NetworkParams<f32>> {
        let w = self
            .heads
            .get(i)
            .ok_or_else(|| Error::Contract(format!("no head {i}")))?;
        let mut p = self.wm.clone();
        p.set_heads(vec![w.clone()])?;
        Ok(p)
    }
}

/// Steps 1-7 end to end. The report has BM, WM and AM rows on `val`.
pub fn run_full_pipeline(
    train: &Dataset,
    val: &Dataset,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<(TrainedModels, Vec<ReportRow>)> {
    cfg.validate()?;
    let (bm, r1) = pretrain_bm(train, val, &cfg.pretrain, seed)?;
    let w = weighting_finetune(&bm, train, val, &cfg.weighting, seed)?;
    let mut stages = vec![r1];
    stages.extend(w.reports);
    let wm = w.wm;

    let mut profile_w = validation_errors(&wm, 0, val).map_err(|e| e.in_stage("multicenter"))?;
    profile_w.source = ModelKind::Weighting;
    let tf = FeatureCache::new(&wm, train).map_err(|e| e.in_stage("multicenter"))?;
    let vf = FeatureCache::new(&wm, val).map_err(|e| e.in_stage("multicenter"))?;
    let partition = clusters_for_pattern(train.pattern);
    let mut heads = Vec::with_capacity(partition.len());
    for i in 0..partition.len() {
        let (h, r) = multicenter_finetune_cached(&wm, i, &tf, &vf, &profile_w, &cfg.multicenter, cfg.alpha, seed)?;
        heads.push(h);
        stages.push(r);
    }
    let wa = assemble(&heads, partition.clusters()).map_err(|e| e.in_stage("assemble"))?;
    let mut am = wm.clone();
    am.set_heads(vec![wa]).map_err(|e| e.in_stage("assemble"))?;

    let mut rows = vec![];
    for (name, model) in [("BM", &bm), ("WM", &wm), ("AM", &am)] {
        let r = evaluate(model, 0, val).map_err(|e| e.in_stage("report"))?;
        rows.push(ReportRow {
            model: name.to_string(),
            dataset: val.split.to_string(),
            mean_error: r.mean_error,
            failure_rate: r.failure_rate,
        });
    }
    Ok((
        TrainedModels {
            bm,
            wm,
            heads,
            am,
            profile_b: w.profile_b,
            profile_w,
            stages,
        },
        rows,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationRow {
    pub delta: f64,
    pub seed: u64,
    /// Percent, on the validation set.
    pub mean_error: f64,
}

/// Re-runs weighting fine-tuning with the error-proportional weights
/// perturbed by each `delta`, once per seed.
pub fn perturbation_study(
    bm: &NetworkParams<f32>,
    train: &Dataset,
    val: &Dataset,
    cfg: &StageConfig,
    deltas: &[f64],
    seeds: &[u64],
) -> Result<Vec<PerturbationRow>> {
    let mut profile = validation_errors(bm, 0, val)?;
    profile.source = ModelKind::Basic;
    let base = weights_from_errors(&profile)?;
    // Reject bad deltas before spending any compute.
    for &delta in deltas {
        perturb_weights(&base, delta, 0)?;
    }
    let mut rows = vec![];
    for &delta in deltas {
        for &seed in seeds {
            let u = perturb_weights(&base, delta, seed)?;
            let (wm, _) = weighting_finetune_with(bm, &u, train, val, cfg, seed)?;
            rows.push(PerturbationRow {
                delta,
                seed,
                mean_error: evaluate(&wm, 0, val)?.mean_error,
            });
        }
    }
    Ok(rows)
}

pub fn perturbation_csv(rows: &[PerturbationRow]) -> String {
    let mut s = String::from("delta,seed,mean_error\n");
    for r in rows {
        s.push_str(&format!("{},{},{:.4}\n", r.delta, r.seed, r.mean_error));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_defaults() {
        let p = StageConfig::paper_pretrain();
        assert_eq!((p.max_iterations, p.initial_lr, p.batch_size), (180_000, 0.02, 64));
        assert_eq!((p.momentum, p.weight_decay, p.lr_decay_factor), (0.9, 5e-4, 0.3));
        let f = StageConfig::paper_finetune();
        assert_eq!((f.max_iterations, f.initial_lr), (60_000, 0.001));
        assert_eq!(PipelineConfig::paper().alpha, 125.0);
    }

    #[test]
    fn lr_schedule_steps() {
        let p = StageConfig::paper_pretrain();
        assert_eq!(p.lr_at(0), 0.02);
        assert_eq!(p.lr_at(29_999), 0.02);
        assert!((p.lr_at(30_000) - 0.006).abs() < 1e-15);
        assert!((p.lr_at(60_000) - 0.0018).abs() < 1e-15);
        let s = StageConfig::scaled(&p, 1800, 8);
        assert_eq!(s.lr_decay_every, 300);
        assert_eq!(s.initial_lr, 0.02);
    }

    #[test]
    fn invalid_configs() {
        let mut c = StageConfig::paper_pretrain();
        c.lr_decay_factor = 1.0;
        assert!(c.validate().is_err());
        let mut c = StageConfig::paper_pretrain();
        c.batch_size = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn assemble_two_heads() {
        let h1 = Tensor::<f64>::from_vec(&[2, 4], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let h2 = Tensor::<f64>::from_vec(&[2, 4], (10..18).map(f64::from).collect()).unwrap();
        let a = assemble(&[h1.clone(), h2], &[vec![0], vec![1]]).unwrap();
        assert_eq!(a.data(), &[1.0, 2.0, 12.0, 13.0, 5.0, 6.0, 16.0, 17.0]);
        assert_eq!(assemble(std::slice::from_ref(&h1), &[vec![0, 1]]).unwrap(), h1);
    }

    #[test]
    fn assemble_rejects_bad_partitions() {
        let h = Tensor::<f64>::zeros(&[2, 4]);
        assert!(assemble(&[h.clone(), h.clone()], &[vec![0], vec![0, 1]]).is_err());
        assert!(assemble(&[h.clone(), h.clone()], &[vec![0], vec![]]).is_err());
        assert!(assemble(std::slice::from_ref(&h), &[vec![0, 2]]).is_err());
        assert!(assemble(&[h.clone(), h], &[vec![0, 1]]).is_err());
    }

    #[test]
    fn batcher_covers_each_epoch() {
        let mut b = Batcher::new(10, stage_rng(1, 0));
        let mut seen: Vec<usize> = (0..5).flat_map(|_| b.next(2)).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(b.next(20).len(), 10);
    }
}
