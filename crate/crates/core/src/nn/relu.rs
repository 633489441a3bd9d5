use super::tensor::Tensor;
use crate::error::{Error, Result};

pub fn relu_forward(x: &Tensor) -> Tensor {
    let values = x.values().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(x.shape(), values).expect("same shape")
}

/// Passes `grad_out` where `x > 0`; the subgradient at zero is taken as 0.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if x.shape() != grad_out.shape() {
        return Err(Error::shape(
            format!("{:?}", x.shape()),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let values = x
        .values()
        .iter()
        .zip(grad_out.values())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(x.shape(), values)
}
