use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// A learnable tensor with its gradient, momentum buffer and freeze flag.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock<T = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub momentum_buf: Tensor<T>,
    pub frozen: bool,
}

impl<T: Scalar> ParamBlock<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let dims = value.dims().to_vec();
        ParamBlock {
            name: name.into(),
            value,
            grad: Tensor::zeros(&dims),
            momentum_buf: Tensor::zeros(&dims),
            frozen: false,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn reset_momentum(&mut self) {
        self.momentum_buf.fill(T::zero());
    }
}

/// One SGD step with classical momentum; weight decay joins the gradient
/// before the momentum update:
///
/// `buf = momentum * buf + (grad + weight_decay * value)`, `value -= lr * buf`.
///
/// Frozen blocks are left untouched.
pub fn sgd_step<T: Scalar>(param: &mut ParamBlock<T>, lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
    if param.frozen {
        return Ok(());
    }
    let bad: Vec<usize> = param
        .grad
        .data()
        .iter()
        .enumerate()
        .filter(|(_, v)| !v.is_finite())
        .map(|(i, _)| i)
        .collect();
    if let Some(&first) = bad.first() {
        return Err(Error::NonFiniteGradient {
            block: param.name.clone(),
            count: bad.len(),
            len: param.grad.len(),
            first,
        });
    }
    let (lr, mu, wd) = (
        T::from_f64_lossy(lr),
        T::from_f64_lossy(momentum),
        T::from_f64_lossy(weight_decay),
    );
    let ParamBlock {
        value,
        grad,
        momentum_buf,
        ..
    } = param;
    for ((w, &g), b) in value
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(momentum_buf.data_mut())
    {
        *b = mu * *b + (g + wd * *w);
        *w = *w - lr * *b;
    }
    Ok(())
}
