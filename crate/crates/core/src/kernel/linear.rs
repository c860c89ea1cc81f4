use crate::error::{Error, Result};
use crate::tensor::{matmul, Mat, Scalar, Tensor};

fn check_weights<T>(weights: &Tensor<T>, features: usize) -> Result<usize> {
    match *weights.dims() {
        [rows, outs] if rows == features + 1 => Ok(outs),
        _ => Err(Error::shape(format!(
            "prediction weights {:?} do not accept {features} features (+1 bias row)",
            weights.dims()
        ))),
    }
}

/// `y = W^T x` for a `(D+1) x 2n` weight matrix and a feature vector whose
/// first entry is the constant bias slot `x[0] == 1`.
pub fn linear_forward<T: Scalar>(weights: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.is_empty() || x.data()[0] != T::one() {
        return Err(Error::Contract("feature vector must start with x[0] == 1".into()));
    }
    let outs = check_weights(weights, x.len() - 1)?;
    let mut y = vec![T::zero(); outs];
    matmul(
        Mat::new(x.data(), 1, x.len()),
        Mat::new(weights.data(), x.len(), outs),
        &mut y,
        false,
    );
    Tensor::from_vec(&[outs], y)
}

/// Returns `(grad_weights, grad_x)` for upstream `g`; `grad_weights = x g^T`.
pub fn linear_backward<T: Scalar>(
    upstream: &Tensor<T>,
    x: &Tensor<T>,
    weights: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let outs = check_weights(weights, x.len() - 1)?;
    if upstream.len() != outs {
        return Err(Error::shape(format!(
            "upstream has {} values, layer has {outs} outputs",
            upstream.len()
        )));
    }
    let mut gw = vec![T::zero(); x.len() * outs];
    matmul(
        Mat::new(x.data(), x.len(), 1),
        Mat::new(upstream.data(), 1, outs),
        &mut gw,
        false,
    );
    let mut gx = vec![T::zero(); x.len()];
    matmul(
        Mat::new(weights.data(), x.len(), outs),
        Mat::new(upstream.data(), outs, 1),
        &mut gx,
        false,
    );
    Ok((Tensor::from_vec(weights.dims(), gw)?, Tensor::from_vec(x.dims(), gx)?))
}

/// Batched prediction from bias-free features `N x D`: row 0 of the weights
/// is the bias, rows `1..=D` multiply the features. Equivalent to
/// [`linear_forward`] on `[1, features]`.
pub fn affine_forward<T: Scalar>(weights: &Tensor<T>, features: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, d] = *features.dims() else {
        return Err(Error::shape(format!(
            "features must be N x D, got {:?}",
            features.dims()
        )));
    };
    let outs = check_weights(weights, d)?;
    let bias = &weights.data()[..outs];
    let mut y = Vec::with_capacity(n * outs);
    for _ in 0..n {
        y.extend_from_slice(bias);
    }
    matmul(
        Mat::new(features.data(), n, d),
        Mat::new(&weights.data()[outs..], d, outs),
        &mut y,
        true,
    );
    Tensor::from_vec(&[n, outs], y)
}

/// Returns `(grad_weights, grad_features)` for [`affine_forward`].
pub fn affine_backward<T: Scalar>(
    upstream: &Tensor<T>,
    features: &Tensor<T>,
    weights: &Tensor<T>,
    need_feature_grad: bool,
) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
    let [n, d] = *features.dims() else {
        return Err(Error::shape(format!(
            "features must be N x D, got {:?}",
            features.dims()
        )));
    };
    let outs = check_weights(weights, d)?;
    if upstream.dims() != [n, outs] {
        return Err(Error::shape(format!(
            "upstream {:?} does not match prediction {:?}",
            upstream.dims(),
            [n, outs]
        )));
    }
    let mut gw = vec![T::zero(); (d + 1) * outs];
    for row in upstream.data().chunks_exact(outs) {
        for (a, &v) in gw[..outs].iter_mut().zip(row) {
            *a = *a + v;
        }
    }
    matmul(
        Mat::new(features.data(), n, d).t(),
        Mat::new(upstream.data(), n, outs),
        &mut gw[outs..],
        false,
    );
    let gf = if need_feature_grad {
        let mut gf = vec![T::zero(); n * d];
        matmul(
            Mat::new(upstream.data(), n, outs),
            Mat::new(&weights.data()[outs..], d, outs).t(),
            &mut gf,
            false,
        );
        Some(Tensor::from_vec(&[n, d], gf)?)
    } else {
        None
    };
    Ok((Tensor::from_vec(weights.dims(), gw)?, gf))
}
