//! Full-batch gradient descent, used to produce trained fixtures `θ⋆`.

use super::{dataset_gradient, dataset_loss, Dataset, ModelSpec, ParamVector};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    /// L2 penalty `(wd/2)‖θ‖²`.
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.5,
            steps: 200,
            weight_decay: 1e-3,
        }
    }
}

/// Returns the trained parameters and the final mean loss.
pub fn train_full_batch(
    spec: &ModelSpec,
    theta0: &ParamVector,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(ParamVector, f64)> {
    if !(cfg.lr > 0.0) {
        return Err(Error::invalid("learning rate must be positive"));
    }
    let mut theta = theta0.clone();
    for step in 0..cfg.steps {
        let g = dataset_gradient(spec, &theta, data)?;
        let update = &g.values + &theta.values * cfg.weight_decay;
        theta.values -= update * cfg.lr;
        if !theta.values.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence {
                step,
                norm: theta.values.norm(),
            });
        }
    }
    let loss = dataset_loss(spec, &theta, data)?;
    Ok((theta, loss))
}
