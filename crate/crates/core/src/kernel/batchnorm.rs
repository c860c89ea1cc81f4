use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
/// Weight kept by the running statistics at each update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Infer,
}

/// Values kept from the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    /// Batch statistics were used, so the gradient flows through them.
    pub batch_stats: bool,
}

/// Batch normalization over the last axis. Statistics are taken over every
/// other axis (batch and spatial cells for conv maps).
///
/// In train mode the batch mean/variance normalize the input and the running
/// statistics are updated; `batch_mean`/`batch_var` receive the batch
/// statistics. Infer mode reads only the running statistics.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_forward<T: Scalar>(
    input: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &mut [T],
    running_var: &mut [T],
    batch_mean: &mut [T],
    batch_var: &mut [T],
    mode: BnMode,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let c = *input.dims().last().expect("tensor has rank >= 1");
    for (name, len) in [
        ("gamma", gamma.len()),
        ("beta", beta.len()),
        ("running_mean", running_mean.len()),
        ("running_var", running_var.len()),
        ("batch_mean", batch_mean.len()),
        ("batch_var", batch_var.len()),
    ] {
        if len != c {
            return Err(Error::shape(format!("{name} has {len} entries, expected {c}")));
        }
    }
    let rows = input.len() / c;
    let eps = T::from_f64_lossy(BN_EPSILON);
    let x = input.data();

    let inv_std: Vec<T> = match mode {
        BnMode::Train => {
            if rows < 2 {
                return Err(Error::Contract(
                    "batch normalization in train mode needs at least 2 values per channel".into(),
                ));
            }
            let m = T::from_usize(rows).expect("row count fits");
            let mut mean = vec![T::zero(); c];
            for row in x.chunks_exact(c) {
                for (a, &v) in mean.iter_mut().zip(row) {
                    *a = *a + v;
                }
            }
            mean.iter_mut().for_each(|a| *a = *a / m);
            let mut var = vec![T::zero(); c];
            for row in x.chunks_exact(c) {
                for ((a, &v), &mu) in var.iter_mut().zip(row).zip(&mean) {
                    let d = v - mu;
                    *a = *a + d * d;
                }
            }
            var.iter_mut().for_each(|a| *a = *a / m);

            let keep = T::from_f64_lossy(BN_MOMENTUM);
            let blend = T::one() - keep;
            let unbias = m / (m - T::one());
            for ch in 0..c {
                running_mean[ch] = keep * running_mean[ch] + blend * mean[ch];
                running_var[ch] = keep * running_var[ch] + blend * var[ch] * unbias;
            }
            batch_mean.copy_from_slice(&mean);
            batch_var.copy_from_slice(&var);
            var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect()
        }
        BnMode::Infer => running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect(),
    };
    let mean: &[T] = match mode {
        BnMode::Train => batch_mean,
        BnMode::Infer => running_mean,
    };

    let mut xhat = Vec::with_capacity(x.len());
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(c) {
        for ch in 0..c {
            let xh = (row[ch] - mean[ch]) * inv_std[ch];
            xhat.push(xh);
            out.push(gamma[ch] * xh + beta[ch]);
        }
    }
    Ok((
        Tensor::from_vec(input.dims(), out)?,
        BatchNormCache {
            xhat,
            inv_std,
            batch_stats: mode == BnMode::Train,
        },
    ))
}

/// Returns `(grad_input, grad_gamma, grad_beta)`.
pub fn batchnorm_backward<T: Scalar>(
    upstream: &Tensor<T>,
    cache: &BatchNormCache<T>,
    gamma: &[T],
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let c = gamma.len();
    if upstream.len() != cache.xhat.len() || !upstream.len().is_multiple_of(c) {
        return Err(Error::shape(format!(
            "batchnorm upstream has {} values, cache has {}",
            upstream.len(),
            cache.xhat.len()
        )));
    }
    let dy = upstream.data();
    let mut grad_gamma = vec![T::zero(); c];
    let mut grad_beta = vec![T::zero(); c];
    for (row, xh) in dy.chunks_exact(c).zip(cache.xhat.chunks_exact(c)) {
        for ch in 0..c {
            grad_beta[ch] = grad_beta[ch] + row[ch];
            grad_gamma[ch] = grad_gamma[ch] + row[ch] * xh[ch];
        }
    }

    let mut grad = Vec::with_capacity(dy.len());
    if cache.batch_stats {
        let m = T::from_usize(dy.len() / c).expect("row count fits");
        // dx = gamma * inv_std / m * (m*dy - sum(dy) - xhat * sum(dy*xhat))
        for (row, xh) in dy.chunks_exact(c).zip(cache.xhat.chunks_exact(c)) {
            for ch in 0..c {
                let k = gamma[ch] * cache.inv_std[ch] / m;
                grad.push(k * (m * row[ch] - grad_beta[ch] - xh[ch] * grad_gamma[ch]));
            }
        }
    } else {
        for row in dy.chunks_exact(c) {
            for ch in 0..c {
                grad.push(row[ch] * gamma[ch] * cache.inv_std[ch]);
            }
        }
    }
    Ok((Tensor::from_vec(upstream.dims(), grad)?, grad_gamma, grad_beta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(x: &Tensor<f64>, gamma: &[f64], beta: &[f64], mode: BnMode) -> Result<(Tensor<f64>, BatchNormCache<f64>)> {
        let c = gamma.len();
        let (mut rm, mut rv) = (vec![0.0; c], vec![1.0; c]);
        let (mut bm, mut bv) = (vec![0.0; c], vec![0.0; c]);
        batchnorm_forward(x, gamma, beta, &mut rm, &mut rv, &mut bm, &mut bv, mode)
    }

    #[test]
    fn constant_input_gives_beta() {
        let x = Tensor::<f64>::filled(&[4, 2], 3.0);
        let (y, _) = run(&x, &[2.0, 0.5], &[0.25, -1.0], BnMode::Train).unwrap();
        for row in y.data().chunks(2) {
            assert_eq!(row, &[0.25, -1.0]);
        }
    }

    #[test]
    fn unit_variance_pair() {
        let x = Tensor::<f64>::from_vec(&[2, 1], vec![-1.0, 1.0]).unwrap();
        let (y, _) = run(&x, &[1.0], &[0.0], BnMode::Train).unwrap();
        let s = 1.0 / (1.0 + BN_EPSILON).sqrt();
        assert!((y.data()[0] + s).abs() < 1e-15);
        assert!((y.data()[1] - s).abs() < 1e-15);
    }

    #[test]
    fn single_row_train_is_error() {
        let x = Tensor::<f64>::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(run(&x, &[1.0; 3], &[0.0; 3], BnMode::Train).is_err());
        assert!(run(&x, &[1.0; 3], &[0.0; 3], BnMode::Infer).is_ok());
    }

    #[test]
    fn running_stats_follow_momentum() {
        let x = Tensor::<f64>::from_vec(&[2, 1], vec![1.0, 3.0]).unwrap();
        let (mut rm, mut rv) = (vec![0.0], vec![1.0]);
        let (mut bm, mut bv) = (vec![0.0], vec![0.0]);
        batchnorm_forward(&x, &[1.0], &[0.0], &mut rm, &mut rv, &mut bm, &mut bv, BnMode::Train).unwrap();
        assert!((rm[0] - 0.2).abs() < 1e-12);
        // batch variance 1, unbiased 2
        assert!((rv[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-12);
        assert_eq!(bm, vec![2.0]);
        assert_eq!(bv, vec![1.0]);
    }

    #[test]
    fn infer_ignores_batch_buffers() {
        let x = Tensor::<f64>::from_vec(&[2, 1], vec![1.0, 3.0]).unwrap();
        let (mut rm, mut rv) = (vec![0.5], vec![2.0]);
        let (mut bm, mut bv) = (vec![f64::NAN], vec![f64::NAN]);
        let (y, _) = batchnorm_forward(&x, &[1.0], &[0.0], &mut rm, &mut rv, &mut bm, &mut bv, BnMode::Infer).unwrap();
        assert!(y.all_finite());
        assert_eq!(rm, vec![0.5]);
    }
}
