use crate::error::{Error, Result};

use super::{Real, Tensor};

/// Plain gradient descent: `p ← p − lr·∇p`, then clears every gradient.
///
/// Every trainable tensor must carry a gradient; nothing is modified otherwise.
pub fn sgd_step<T: Real>(params: &mut [&mut Tensor<T>], lr: T) -> Result<()> {
    if let Some(i) = params.iter().position(|p| p.requires_grad() && p.grad().is_none()) {
        return Err(Error::contract(format!("parameter {i} (shape {:?}) has no gradient", params[i].shape())));
    }
    for p in params.iter_mut().filter(|p| p.requires_grad()) {
        let grad = p.take_grad().expect("checked above");
        p.data_mut().iter_mut().zip(grad).for_each(|(v, g)| *v = *v - lr * g);
    }
    Ok(())
}
