use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::nhwc;

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let mut out = input.clone();
    for v in out.data_mut() {
        if !(*v > T::zero()) {
            *v = T::zero();
        }
    }
    out
}

/// Passes upstream where the forward input was strictly positive; the
/// subgradient at exactly zero is zero.
pub fn relu_backward<T: Scalar>(upstream: &Tensor<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    if upstream.dims() != input.dims() {
        return Err(Error::shape(format!(
            "relu upstream {:?} vs input {:?}",
            upstream.dims(),
            input.dims()
        )));
    }
    let mut g = upstream.clone();
    for (gv, &x) in g.data_mut().iter_mut().zip(input.data()) {
        if !(x > T::zero()) {
            *gv = T::zero();
        }
    }
    Ok(g)
}

/// Spatial mean per channel: `H x W x C -> C`, `N x H x W x C -> N x C`.
pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, h, w, c) = nhwc(input.dims())?;
    let scale = T::one() / T::from_usize(h * w).expect("spatial size fits");
    let mut out = vec![T::zero(); n * c];
    for b in 0..n {
        let acc = &mut out[b * c..(b + 1) * c];
        for cell in input.data()[b * h * w * c..(b + 1) * h * w * c].chunks_exact(c) {
            for (a, &v) in acc.iter_mut().zip(cell) {
                *a = *a + v;
            }
        }
        acc.iter_mut().for_each(|a| *a = *a * scale);
    }
    let dims = if input.rank() == 3 { vec![c] } else { vec![n, c] };
    Tensor::from_vec(&dims, out)
}

/// Spreads each channel's upstream value uniformly over its `H*W` cells.
pub fn global_avg_pool_backward<T: Scalar>(upstream: &Tensor<T>, input_dims: &[usize]) -> Result<Tensor<T>> {
    let (n, h, w, c) = nhwc(input_dims)?;
    if upstream.len() != n * c {
        return Err(Error::shape(format!(
            "GAP upstream has {} values, expected {}",
            upstream.len(),
            n * c
        )));
    }
    let scale = T::one() / T::from_usize(h * w).expect("spatial size fits");
    let mut grad = Vec::with_capacity(n * h * w * c);
    for b in 0..n {
        let row: Vec<T> = upstream.data()[b * c..(b + 1) * c].iter().map(|&v| v * scale).collect();
        for _ in 0..h * w {
            grad.extend_from_slice(&row);
        }
    }
    Tensor::from_vec(input_dims, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clamps_negatives() {
        let x = Tensor::<f64>::from_vec(&[3], vec![-2.0, 0.0, 3.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 3.0]);
        let pos = Tensor::<f64>::from_vec(&[2], vec![0.5, 4.0]).unwrap();
        assert_eq!(relu(&pos), pos);
    }

    #[test]
    fn relu_gradient_tie_rule() {
        let x = Tensor::<f64>::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        let up = Tensor::filled(&[3], 1.0);
        assert_eq!(relu_backward(&up, &x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn gap_values() {
        let c = Tensor::<f64>::filled(&[4, 3, 1], 7.0);
        assert_eq!(global_avg_pool(&c).unwrap().data(), &[7.0]);
        let x = Tensor::<f64>::from_vec(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[2.5]);
        let d = Tensor::<f32>::zeros(&[7, 7, 16]);
        assert_eq!(global_avg_pool(&d).unwrap().dims(), &[16]);
    }

    #[test]
    fn gap_backward_conserves_mass() {
        let up = Tensor::<f64>::from_vec(&[2, 3], vec![0.3, -1.2, 5.0, 2.0, 0.1, -0.7]).unwrap();
        let g = global_avg_pool_backward(&up, &[2, 7, 5, 3]).unwrap();
        let (a, b) = (g.sum(), up.sum());
        assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
    }
}
