use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::{nhwc, spatial_dims};

/// Output extent of a 2x2/stride-2 pool; odd extents round up.
pub fn pool_output_extent(input: usize) -> usize {
    input.div_ceil(2)
}

/// Flat input offsets of the winning cell for every pooled output.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolIndices {
    pub input_dims: Vec<usize>,
    pub argmax: Vec<u32>,
}

/// 2x2 max pooling with stride 2. Ragged edge windows take the max over the
/// cells that exist; ties go to the first cell in row-major order.
pub fn maxpool_forward<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, PoolIndices)> {
    let (n, h, w, c) = nhwc(input.dims())?;
    let (ho, wo) = (pool_output_extent(h), pool_output_extent(w));
    let src = input.data();
    let mut out = Vec::with_capacity(n * ho * wo * c);
    let mut argmax = Vec::with_capacity(n * ho * wo * c);
    for b in 0..n {
        let base = b * h * w * c;
        for oh in 0..ho {
            for ow in 0..wo {
                for ch in 0..c {
                    let mut best = base + (2 * oh * w + 2 * ow) * c + ch;
                    for ih in 2 * oh..(2 * oh + 2).min(h) {
                        for iw in 2 * ow..(2 * ow + 2).min(w) {
                            let idx = base + (ih * w + iw) * c + ch;
                            if src[idx] > src[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best as u32);
                }
            }
        }
    }
    let dims = spatial_dims(input.dims(), n, ho, wo, c);
    Ok((
        Tensor::from_vec(&dims, out)?,
        PoolIndices {
            input_dims: input.dims().to_vec(),
            argmax,
        },
    ))
}

/// Routes each upstream value to the cell that won the forward max.
pub fn maxpool_backward<T: Scalar>(upstream: &Tensor<T>, indices: &PoolIndices) -> Result<Tensor<T>> {
    if upstream.len() != indices.argmax.len() {
        return Err(Error::shape(format!(
            "upstream has {} values for {} pooled cells",
            upstream.len(),
            indices.argmax.len()
        )));
    }
    let mut grad = Tensor::zeros(&indices.input_dims);
    let len = grad.len();
    let g = grad.data_mut();
    for (&idx, &v) in indices.argmax.iter().zip(upstream.data()) {
        let idx = idx as usize;
        if idx >= len {
            return Err(Error::Internal(format!(
                "pool index {idx} out of bounds for {len} cells"
            )));
        }
        g[idx] = g[idx] + v;
    }
    Ok(grad)
}
