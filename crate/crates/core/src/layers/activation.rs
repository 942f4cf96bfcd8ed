use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::volume::FeatureMap;

pub fn relu<T: Scalar>(x: &FeatureMap<T>) -> FeatureMap<T> {
    let mut y = x.clone();
    y.data.iter_mut().for_each(|v| *v = v.max(T::zero()));
    y
}

/// Masks `grad_out` by `output > 0`; the subgradient at zero is 0.
pub fn relu_backward<T: Scalar>(output: &FeatureMap<T>, grad_out: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    if output.shape() != grad_out.shape() {
        return Err(Error::DimMismatch(format!(
            "relu gradient {:?} vs activation {:?}",
            grad_out.shape(),
            output.shape()
        )));
    }
    let mut dx = grad_out.clone();
    for (g, &y) in dx.data.iter_mut().zip(&output.data) {
        if y <= T::zero() {
            *g = T::zero();
        }
    }
    Ok(dx)
}
