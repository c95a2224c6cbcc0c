//! RMSProp and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmsPropConfig {
    pub lr: f64,
    pub alpha: f64,
    pub eps: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        RmsPropConfig {
            lr: 5e-4,
            alpha: 0.99,
            eps: 1e-5,
        }
    }
}

/// Running second-moment accumulators, one per parameter tensor.
#[derive(Clone, Debug)]
pub struct RmsProp<T> {
    pub config: RmsPropConfig,
    square_avg: Vec<Tensor<T>>,
}

impl<T: Scalar> RmsProp<T> {
    pub fn new(config: RmsPropConfig, params: &ParamSet<T>) -> Self {
        let square_avg = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.dims()))
            .collect();
        RmsProp { config, square_avg }
    }

    pub fn square_avg(&self) -> &[Tensor<T>] {
        &self.square_avg
    }

    /// Restores accumulators saved from [`RmsProp::square_avg`].
    pub fn load_square_avg(&mut self, saved: Vec<Tensor<T>>) -> Result<()> {
        if saved.len() != self.square_avg.len() {
            return shape_err("rmsprop state", &[self.square_avg.len()], &[saved.len()]);
        }
        for (have, new) in self.square_avg.iter().zip(&saved) {
            if have.dims() != new.dims() {
                return shape_err("rmsprop state", have.dims(), new.dims());
            }
        }
        self.square_avg = saved;
        Ok(())
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != params.len() {
            return shape_err("rmsprop", &[params.len()], &[grads.len()]);
        }
        for ((p, g), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.square_avg.iter_mut())
        {
            rmsprop_step(p, g, v, &self.config)?;
        }
        Ok(())
    }
}

/// `v <- a*v + (1-a)*g^2; p <- p - lr*g/(sqrt(v)+eps)` for one tensor.
pub fn rmsprop_step<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    square_avg: &mut Tensor<T>,
    config: &RmsPropConfig,
) -> Result<()> {
    if param.dims() != grad.dims() {
        return shape_err("rmsprop", param.dims(), grad.dims());
    }
    if param.dims() != square_avg.dims() {
        return shape_err("rmsprop", param.dims(), square_avg.dims());
    }
    let lr = T::lit(config.lr);
    let alpha = T::lit(config.alpha);
    let eps = T::lit(config.eps);
    let one_minus = T::one() - alpha;
    for ((p, &g), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(square_avg.data_mut())
    {
        *v = alpha * *v + one_minus * g * g;
        *p = *p - lr * g / (v.sqrt() + eps);
    }
    Ok(())
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.sum_sq().to_f64().unwrap())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let factor = T::lit(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x = *x * factor);
        }
    }
    norm
}
