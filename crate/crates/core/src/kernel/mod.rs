//! Forward and backward passes for every layer type used by the network,
//! the SGD optimizer and a central-difference gradient checker.
//!
//! Spatial tensors are laid out `H x W x C` (one image) or `N x H x W x C`
//! (a batch); every kernel accepts either and returns the same rank.

mod activation;
mod batchnorm;
mod conv;
mod gradcheck;
mod linear;
mod pool;
mod sgd;

pub use activation::{global_avg_pool, global_avg_pool_backward, relu, relu_backward};
pub use batchnorm::{batchnorm_backward, batchnorm_forward, BatchNormCache, BnMode, BN_EPSILON, BN_MOMENTUM};
pub use conv::{conv2d_backward, conv2d_backward_ext, conv2d_forward, conv_output_extent, ConvGrads};
pub use gradcheck::{finite_diff_check, finite_diff_check_at, relative_error, GradCheckReport};
pub use linear::{affine_backward, affine_forward, linear_backward, linear_forward};
pub use pool::{maxpool_backward, maxpool_forward, pool_output_extent, PoolIndices};
pub use sgd::{sgd_step, ParamBlock};

use crate::error::{Error, Result};

/// Batch, height, width and channel extents of a rank-3 or rank-4 tensor.
pub(crate) fn nhwc(dims: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *dims {
        [h, w, c] => Ok((1, h, w, c)),
        [n, h, w, c] => Ok((n, h, w, c)),
        _ => Err(Error::shape(format!(
            "expected H x W x C or N x H x W x C, got {dims:?}"
        ))),
    }
}

/// Output dims with the same rank convention as `like`.
pub(crate) fn spatial_dims(like: &[usize], n: usize, h: usize, w: usize, c: usize) -> Vec<usize> {
    if like.len() == 3 {
        vec![h, w, c]
    } else {
        vec![n, h, w, c]
    }
}
