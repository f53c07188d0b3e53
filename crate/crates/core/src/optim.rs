//! SGD with Nesterov momentum and the polynomial learning-rate schedule.

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::unet::Network;

/// Momentum buffers matching the parameter tensors, plus the epoch counter.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub velocity: Network<T>,
    pub epoch: usize,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(net: &Network<T>) -> Self {
        OptimizerState { velocity: net.zeros_like(), epoch: 0 }
    }
}

/// lr0 * (1 - epoch/epochs)^exponent.
pub fn poly_lr(epoch: usize, epochs: usize, lr0: f64, exponent: f64) -> f64 {
    let frac = 1.0 - epoch as f64 / epochs as f64;
    lr0 * frac.powf(exponent)
}

/// One Nesterov step: v' = mu*v - lr*g; theta' = theta + mu*v' - lr*g.
pub fn sgd_nesterov_step<T: Real>(
    params: &mut Network<T>,
    grads: &Network<T>,
    state: &mut OptimizerState<T>,
    lr: T,
    momentum: T,
) -> Result<()> {
    let mut ok = true;
    for (((_, p), (_, g)), (_, v)) in params
        .named_parameters_mut()
        .into_iter()
        .zip(grads.named_parameters())
        .zip(state.velocity.named_parameters_mut())
    {
        debug_assert_eq!(p.shape, g.shape);
        for ((pv, &gv), vv) in p.data.iter_mut().zip(g.data.iter()).zip(v.data.iter_mut()) {
            let v_new = momentum * *vv - lr * gv;
            let p_new = *pv + momentum * v_new - lr * gv;
            *vv = v_new;
            *pv = p_new;
            ok &= p_new.is_finite();
        }
    }
    if ok {
        Ok(())
    } else {
        Err(Error::NonFiniteUpdate)
    }
}
