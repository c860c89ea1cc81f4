//! The fixed alignment network: four convolution stacks with batch
//! normalization and ReLU, three 2x2 max pools, global average pooling over
//! `D` feature maps, and one or more linear shape-prediction heads.
//!
//! ```text
//! 50x50x1 -> [conv 32, conv 32] -> pool -> [conv 64, conv 64] -> pool
//!         -> [conv 128, conv 128] -> pool -> [conv 128, conv 128, conv D]
//!         -> GAP -> x (D + bias slot) -> W^T x (2n coordinates)
//! ```
//!
//! Every convolution is 3x3, stride 1, padding 1, followed by BN and ReLU.

mod io;

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{LabelingPattern, Shape};
use crate::kernel::{
    affine_forward, batchnorm_backward, batchnorm_forward, conv2d_backward_ext, conv2d_forward, global_avg_pool,
    global_avg_pool_backward, linear_forward, maxpool_backward, maxpool_forward, relu, relu_backward, BatchNormCache,
    BnMode, ParamBlock, PoolIndices,
};
use crate::tensor::{Scalar, Tensor};

pub use io::{load_model, model_from_bytes, model_to_bytes, save_model, MODEL_MAGIC, MODEL_VERSION};

/// Side length of the square grayscale input patch.
pub const INPUT_SIZE: usize = 50;
/// Heads regress pixel coordinates of the input patch. Dividing by this
/// gives the normalized coordinates used everywhere else.
pub const COORD_SCALE: f64 = INPUT_SIZE as f64;
pub const KERNEL: usize = 3;
/// Output channels of the first eight convolutions; the ninth produces `D`.
pub const STACK_WIDTHS: [usize; 8] = [32, 32, 64, 64, 128, 128, 128, 128];
/// Convolutions (0-based) followed by a max pool.
pub const POOL_AFTER: [usize; 3] = [1, 3, 5];
/// Convolutions frozen during the first weighting fine-tuning step.
pub const EARLY_CONVS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerDesc {
    Conv {
        kernel: usize,
        stride: usize,
        pad: usize,
        in_channels: usize,
        out_channels: usize,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    MaxPool,
    GlobalAvgPool,
    Linear {
        inputs: usize,
        outputs: usize,
    },
}

/// Architecture description: pattern, feature width and the ordered layer plan.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub pattern: LabelingPattern,
    pub n_landmarks: usize,
    pub feature_dim: usize,
    pub layer_plan: Vec<LayerDesc>,
}

impl NetworkSpec {
    pub fn new(pattern: LabelingPattern) -> Self {
        Self::with_feature_dim(pattern, pattern.feature_dim())
    }

    /// Same topology with a non-default number of feature maps.
    pub fn with_feature_dim(pattern: LabelingPattern, feature_dim: usize) -> Self {
        assert!(feature_dim >= 1);
        let mut plan = vec![];
        let mut c_in = 1;
        for (k, &c_out) in STACK_WIDTHS.iter().chain([feature_dim].iter()).enumerate() {
            plan.push(LayerDesc::Conv {
                kernel: KERNEL,
                stride: 1,
                pad: 1,
                in_channels: c_in,
                out_channels: c_out,
            });
            plan.push(LayerDesc::BatchNorm { channels: c_out });
            plan.push(LayerDesc::Relu);
            if POOL_AFTER.contains(&k) {
                plan.push(LayerDesc::MaxPool);
            }
            c_in = c_out;
        }
        plan.push(LayerDesc::GlobalAvgPool);
        plan.push(LayerDesc::Linear {
            inputs: feature_dim + 1,
            outputs: 2 * pattern.landmarks(),
        });
        NetworkSpec {
            pattern,
            n_landmarks: pattern.landmarks(),
            feature_dim,
            layer_plan: plan,
        }
    }

    pub fn outputs(&self) -> usize {
        2 * self.n_landmarks
    }

    fn conv_layers(&self) -> impl Iterator<Item = (usize, usize, usize, usize, usize)> + '_ {
        self.layer_plan.iter().filter_map(|l| match *l {
            LayerDesc::Conv {
                kernel,
                stride,
                pad,
                in_channels,
                out_channels,
            } => Some((kernel, stride, pad, in_channels, out_channels)),
            _ => None,
        })
    }
}

/// Which scalars [`NetworkParams::count_params`] counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamSegment {
    /// Every learnable scalar: filters, biases, BN scale/shift and all heads.
    All,
    /// The last convolution (128 -> D) with its batch normalization, counted
    /// as filters + bias + BN mean/variance + BN scale/shift.
    FeatureHead,
}

/// One convolution with its batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvUnit<T = f32> {
    pub weight: ParamBlock<T>,
    pub bias: ParamBlock<T>,
    pub gamma: ParamBlock<T>,
    pub beta: ParamBlock<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    /// Statistics of the most recent train-mode batch (diagnostics only).
    pub batch_mean: Tensor<T>,
    pub batch_var: Tensor<T>,
    pub stride: usize,
    pub pad: usize,
    pub pool_after: bool,
}

impl<T: Scalar> ConvUnit<T> {
    fn learnable(&self) -> [&ParamBlock<T>; 4] {
        [&self.weight, &self.bias, &self.gamma, &self.beta]
    }

    fn learnable_mut(&mut self) -> [&mut ParamBlock<T>; 4] {
        [&mut self.weight, &mut self.bias, &mut self.gamma, &mut self.beta]
    }

    /// A unit trains only when its filters are unfrozen; frozen units run
    /// batch normalization on running statistics.
    pub fn is_frozen(&self) -> bool {
        self.weight.frozen
    }
}

/// All parameters of a network: convolution units and prediction heads.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<T = f32> {
    spec: NetworkSpec,
    units: Vec<ConvUnit<T>>,
    heads: Vec<ParamBlock<T>>,
}

/// Names of frozen blocks.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FreezeMask {
    names: BTreeSet<String>,
}

impl FreezeMask {
    pub fn new<I: IntoIterator<Item = S>, S: Into<String>>(names: I) -> Self {
        FreezeMask {
            names: names.into_iter().map(Into::into).collect(),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.contains(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

pub fn head_name(i: usize) -> String {
    format!("head.{i}.W")
}

/// Builds the network for a labeling pattern with deterministic initial
/// parameters: filters and head weights uniform in `+-1/sqrt(fan_in)`,
/// biases zero, BN scale one and shift zero.
pub fn build_network(pattern: LabelingPattern, seed: u64) -> (NetworkSpec, NetworkParams<f32>) {
    let params = NetworkParams::init(NetworkSpec::new(pattern), seed);
    (params.spec.clone(), params)
}

/// Forward-pass values kept for the backward pass.
#[derive(Debug)]
pub struct ForwardCache<T> {
    units: Vec<Option<UnitCache<T>>>,
    gap_input_dims: Vec<usize>,
    lowest_trainable: usize,
}

#[derive(Debug)]
struct UnitCache<T> {
    input: Tensor<T>,
    bn: BatchNormCache<T>,
    /// ReLU output (before pooling).
    act: Tensor<T>,
    pool: Option<PoolIndices>,
}

impl<T: Scalar> NetworkParams<T> {
    pub fn init(spec: NetworkSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |dims: &[usize], bound: f64| {
            let n = dims.iter().product();
            let data = (0..n)
                .map(|_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
                .collect();
            Tensor::from_vec(dims, data).expect("dims match data")
        };
        let mut units = vec![];
        for (k, (kernel, stride, pad, c_in, c_out)) in spec.conv_layers().enumerate() {
            let fan_in = (kernel * kernel * c_in) as f64;
            let id = k + 1;
            units.push(ConvUnit {
                weight: ParamBlock::new(
                    format!("conv{id}.W"),
                    uniform(&[kernel, kernel, c_in, c_out], 1.0 / fan_in.sqrt()),
                ),
                bias: ParamBlock::new(format!("conv{id}.b"), Tensor::zeros(&[c_out])),
                gamma: ParamBlock::new(format!("bn{id}.gamma"), Tensor::filled(&[c_out], T::one())),
                beta: ParamBlock::new(format!("bn{id}.beta"), Tensor::zeros(&[c_out])),
                running_mean: Tensor::zeros(&[c_out]),
                running_var: Tensor::filled(&[c_out], T::one()),
                batch_mean: Tensor::zeros(&[c_out]),
                batch_var: Tensor::zeros(&[c_out]),
                stride,
                pad,
                pool_after: POOL_AFTER.contains(&k),
            });
        }
        let d = spec.feature_dim;
        let mut w = uniform(&[d + 1, spec.outputs()], 1.0 / (d as f64).sqrt());
        w.data_mut()[..spec.outputs()].fill(T::zero());
        let heads = vec![ParamBlock::new(head_name(0), w)];
        NetworkParams { spec, units, heads }
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim
    }

    pub fn units(&self) -> &[ConvUnit<T>] {
        &self.units
    }

    pub fn units_mut(&mut self) -> &mut [ConvUnit<T>] {
        &mut self.units
    }

    pub fn heads(&self) -> &[ParamBlock<T>] {
        &self.heads
    }

    pub fn head(&self, i: usize) -> Result<&ParamBlock<T>> {
        self.heads.get(i).ok_or_else(|| Error::UnknownBlock(head_name(i)))
    }

    pub fn head_mut(&mut self, i: usize) -> Result<&mut ParamBlock<T>> {
        self.heads.get_mut(i).ok_or_else(|| Error::UnknownBlock(head_name(i)))
    }

    /// Replaces all prediction heads by the given weight matrices.
    pub fn set_heads(&mut self, weights: Vec<Tensor<T>>) -> Result<()> {
        let dims = [self.spec.feature_dim + 1, self.spec.outputs()];
        if weights.is_empty() {
            return Err(Error::Contract("a network needs at least one head".into()));
        }
        if let Some(w) = weights.iter().find(|w| w.dims() != dims) {
            return Err(Error::shape(format!("head {:?} does not match {:?}", w.dims(), dims)));
        }
        self.heads = weights
            .into_iter()
            .enumerate()
            .map(|(i, w)| ParamBlock::new(head_name(i), w))
            .collect();
        Ok(())
    }

    /// Learnable blocks: units in order, then heads.
    pub fn blocks(&self) -> impl Iterator<Item = &ParamBlock<T>> {
        self.units.iter().flat_map(|u| u.learnable()).chain(self.heads.iter())
    }

    pub fn blocks_mut(&mut self) -> impl Iterator<Item = &mut ParamBlock<T>> {
        self.units
            .iter_mut()
            .flat_map(|u| u.learnable_mut())
            .chain(self.heads.iter_mut())
    }

    pub fn block(&self, name: &str) -> Result<&ParamBlock<T>> {
        self.blocks()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::UnknownBlock(name.to_string()))
    }

    /// Every stored tensor by name, including BN running statistics, in
    /// model-file order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![];
        for (k, u) in self.units.iter().enumerate() {
            let id = k + 1;
            for b in u.learnable() {
                out.push((b.name.clone(), &b.value));
            }
            out.push((format!("bn{id}.running_mean"), &u.running_mean));
            out.push((format!("bn{id}.running_var"), &u.running_var));
        }
        for h in &self.heads {
            out.push((h.name.clone(), &h.value));
        }
        out
    }

    pub(crate) fn named_tensor_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        for (k, u) in self.units.iter_mut().enumerate() {
            let id = k + 1;
            if name == format!("bn{id}.running_mean") {
                return Some(&mut u.running_mean);
            }
            if name == format!("bn{id}.running_var") {
                return Some(&mut u.running_var);
            }
            for b in u.learnable_mut() {
                if b.name == name {
                    return Some(&mut b.value);
                }
            }
        }
        self.heads.iter_mut().find(|h| h.name == name).map(|h| &mut h.value)
    }

    pub fn count_params(&self, segment: ParamSegment) -> usize {
        match segment {
            ParamSegment::All => self.blocks().map(|b| b.value.len()).sum(),
            ParamSegment::FeatureHead => {
                let last = self.units.last().expect("network has convolutions");
                last.learnable().iter().map(|b| b.value.len()).sum::<usize>()
                    + last.running_mean.len()
                    + last.running_var.len()
            }
        }
    }

    pub fn unfreeze_all(&mut self) {
        self.blocks_mut().for_each(|b| b.frozen = false);
    }

    /// Freezes exactly the named blocks and unfreezes every other block.
    pub fn apply_freeze(&mut self, mask: &FreezeMask) -> Result<()> {
        let known: BTreeSet<String> = self.blocks().map(|b| b.name.clone()).collect();
        if let Some(missing) = mask.names().find(|n| !known.contains(*n)) {
            return Err(Error::UnknownBlock(missing.to_string()));
        }
        for b in self.blocks_mut() {
            b.frozen = mask.contains(&b.name);
        }
        Ok(())
    }

    /// Freezes the filters, biases and BN scale/shift of the first six
    /// convolutions (the first three stacks).
    pub fn freeze_first_six_conv(&mut self) -> FreezeMask {
        let mask = FreezeMask::new(
            self.units[..EARLY_CONVS]
                .iter()
                .flat_map(|u| u.learnable())
                .map(|b| b.name.clone()),
        );
        self.apply_freeze(&mask).expect("names come from the network");
        mask
    }

    /// Freezes every block except prediction head `active`.
    pub fn freeze_shared(&mut self, active: usize) -> Result<FreezeMask> {
        let keep = self.head(active)?.name.clone();
        let mask = FreezeMask::new(self.blocks().map(|b| b.name.clone()).filter(|n| *n != keep));
        self.apply_freeze(&mask)?;
        Ok(mask)
    }

    pub fn frozen_mask(&self) -> FreezeMask {
        FreezeMask::new(self.blocks().filter(|b| b.frozen).map(|b| b.name.clone()))
    }

    pub fn zero_grads(&mut self) {
        self.blocks_mut().for_each(ParamBlock::zero_grad);
    }

    pub fn reset_momentum(&mut self) {
        self.blocks_mut().for_each(ParamBlock::reset_momentum);
    }

    fn check_images(&self, images: &Tensor<T>) -> Result<()> {
        let ok = matches!(
            images.dims(),
            [INPUT_SIZE, INPUT_SIZE, 1] | [_, INPUT_SIZE, INPUT_SIZE, 1]
        );
        if ok {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "expected {INPUT_SIZE}x{INPUT_SIZE}x1 images (optionally batched), got {:?}",
                images.dims()
            )))
        }
    }

    /// Shared-layer features in inference mode: `N x D` for a batch, `D` for
    /// a single image (bias slot not included).
    pub fn features(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_images(images)?;
        let mut x = images.clone();
        for u in &self.units {
            x = conv2d_forward(&x, &u.weight.value, &u.bias.value, u.stride, u.pad)?;
            let c = u.gamma.value.len();
            let (mut rm, mut rv) = (u.running_mean.data().to_vec(), u.running_var.data().to_vec());
            let (mut bm, mut bv) = (vec![T::zero(); c], vec![T::zero(); c]);
            x = batchnorm_forward(
                &x,
                u.gamma.value.data(),
                u.beta.value.data(),
                &mut rm,
                &mut rv,
                &mut bm,
                &mut bv,
                BnMode::Infer,
            )?
            .0;
            x = relu(&x);
            if u.pool_after {
                x = maxpool_forward(&x)?.0;
            }
        }
        global_avg_pool(&x)
    }

    /// The feature vector `x = (1, x_1, ..., x_D)` of one normalized image.
    pub fn extract_features(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        if image.rank() != 3 {
            return Err(Error::shape(format!(
                "expected a single {INPUT_SIZE}x{INPUT_SIZE}x1 image, got {:?}",
                image.dims()
            )));
        }
        let f = self.features(image)?;
        let mut x = Vec::with_capacity(f.len() + 1);
        x.push(T::one());
        x.extend_from_slice(f.data());
        Tensor::from_vec(&[f.len() + 1], x)
    }

    /// `y = W^T x` for head `head`, read as interleaved landmark coordinates
    /// and rescaled to the unit patch.
    pub fn predict_shape(&self, head: usize, x: &Tensor<T>) -> Result<Shape> {
        let y = linear_forward(&self.head(head)?.value, x)?;
        Shape::new(
            self.spec.pattern,
            y.data().iter().map(|v| v.as_f64() / COORD_SCALE).collect(),
        )
    }

    /// Batched prediction from `N x D` features, in normalized coordinates.
    pub fn predict_batch(&self, head: usize, features: &Tensor<T>) -> Result<Tensor<T>> {
        let mut y = affine_forward(&self.head(head)?.value, features)?;
        let s = T::from_f64_lossy(COORD_SCALE);
        y.data_mut().iter_mut().for_each(|v| *v = *v / s);
        Ok(y)
    }

    /// Training-mode forward pass. Units with frozen filters use running BN
    /// statistics; trainable units use batch statistics and update their
    /// running averages. Returns `N x D` features and the backward cache.
    pub fn forward_train(&mut self, images: &Tensor<T>) -> Result<(Tensor<T>, ForwardCache<T>)> {
        self.check_images(images)?;
        let lowest_trainable = self
            .units
            .iter()
            .position(|u| !u.is_frozen())
            .unwrap_or(self.units.len());
        let mut caches = Vec::with_capacity(self.units.len());
        let mut x = images.clone();
        for (k, u) in self.units.iter_mut().enumerate() {
            let input = x;
            let pre = conv2d_forward(&input, &u.weight.value, &u.bias.value, u.stride, u.pad)?;
            let mode = if u.is_frozen() { BnMode::Infer } else { BnMode::Train };
            let (normed, bn) = batchnorm_forward(
                &pre,
                u.gamma.value.data(),
                u.beta.value.data(),
                u.running_mean.data_mut(),
                u.running_var.data_mut(),
                u.batch_mean.data_mut(),
                u.batch_var.data_mut(),
                mode,
            )?;
            drop(pre);
            let act = relu(&normed);
            drop(normed);
            let (next, pool) = if u.pool_after {
                let (p, idx) = maxpool_forward(&act)?;
                (p, Some(idx))
            } else {
                (act.clone(), None)
            };
            caches.push((k >= lowest_trainable).then_some(UnitCache { input, bn, act, pool }));
            x = next;
        }
        let gap_input_dims = x.dims().to_vec();
        let feats = global_avg_pool(&x)?;
        Ok((
            feats,
            ForwardCache {
                units: caches,
                gap_input_dims,
                lowest_trainable,
            },
        ))
    }

    /// Backpropagates `grad_features` (`N x D`) and stores the gradients of
    /// every unfrozen unit's blocks. Head gradients are set by the caller.
    pub fn backward(&mut self, cache: ForwardCache<T>, grad_features: &Tensor<T>) -> Result<()> {
        let lowest = cache.lowest_trainable;
        if lowest >= self.units.len() {
            return Ok(());
        }
        let mut grad = global_avg_pool_backward(grad_features, &cache.gap_input_dims)?;
        for (k, uc) in cache.units.into_iter().enumerate().rev() {
            if k < lowest {
                break;
            }
            let uc = uc.ok_or_else(|| Error::Internal(format!("missing cache for unit {k}")))?;
            let u = &mut self.units[k];
            if let Some(idx) = &uc.pool {
                grad = maxpool_backward(&grad, idx)?;
            }
            grad = relu_backward(&grad, &uc.act)?;
            let (g_pre, g_gamma, g_beta) = batchnorm_backward(&grad, &uc.bn, u.gamma.value.data())?;
            let conv = conv2d_backward_ext(&g_pre, &uc.input, &u.weight.value, u.stride, u.pad, k > lowest)?;
            if !u.is_frozen() {
                u.weight.grad = conv.filters;
                u.bias.grad = conv.bias;
                u.gamma.grad = Tensor::from_vec(u.gamma.value.dims(), g_gamma)?;
                u.beta.grad = Tensor::from_vec(u.beta.value.dims(), g_beta)?;
            }
            match conv.input {
                Some(g) => grad = g,
                None => break,
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> NetworkParams<U> {
        let block = |b: &ParamBlock<T>| ParamBlock {
            name: b.name.clone(),
            value: b.value.cast(),
            grad: b.grad.cast(),
            momentum_buf: b.momentum_buf.cast(),
            frozen: b.frozen,
        };
        NetworkParams {
            spec: self.spec.clone(),
            units: self
                .units
                .iter()
                .map(|u| ConvUnit {
                    weight: block(&u.weight),
                    bias: block(&u.bias),
                    gamma: block(&u.gamma),
                    beta: block(&u.beta),
                    running_mean: u.running_mean.cast(),
                    running_var: u.running_var.cast(),
                    batch_mean: u.batch_mean.cast(),
                    batch_var: u.batch_var.cast(),
                    stride: u.stride,
                    pad: u.pad,
                    pool_after: u.pool_after,
                })
                .collect(),
            heads: self.heads.iter().map(block).collect(),
        }
    }

    /// True when every unit (filters, BN parameters and running statistics)
    /// is bit-identical in `self` and `other`.
    pub fn shared_layers_equal(&self, other: &Self) -> bool {
        self.spec == other.spec
            && self.units.iter().zip(&other.units).all(|(a, b)| {
                a.learnable()
                    .iter()
                    .zip(b.learnable())
                    .all(|(x, y)| bits_equal(&x.value, &y.value))
                    && bits_equal(&a.running_mean, &b.running_mean)
                    && bits_equal(&a.running_var, &b.running_var)
            })
    }
}

/// Bitwise equality (distinguishes `-0.0` from `0.0`, equates identical NaNs).
pub fn bits_equal<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> bool {
    a.dims() == b.dims()
        && a.data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
}
