//! Adam with bias correction, plus a reduce-on-plateau learning-rate
//! scheduler.

use crate::linalg::Matrix;
use crate::params::{ParamError, ParameterSet};

pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;

/// Adam optimizer state. Moment buffers are kept in parameter order, so the
/// state is only meaningful together with the `ParameterSet` it was built for.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl AdamState {
    pub fn new(params: &ParameterSet, lr: f64) -> Self {
        let m = params
            .iter()
            .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
            .collect::<Vec<_>>();
        let v = m.clone();
        AdamState { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m, v }
    }
}

/// One Adam update. Every trainable parameter must carry a gradient;
/// gradients are cleared afterwards.
pub fn adam_step(params: &mut ParameterSet, state: &mut AdamState) -> Result<(), ParamError> {
    assert_eq!(params.len(), state.m.len(), "optimizer state does not match parameter set");
    for i in 0..params.len() {
        let p = params.param_at(i);
        if p.trainable && p.grad.is_none() {
            return Err(ParamError::MissingGradient(p.name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let p = params.param_at_mut(i);
        if !p.trainable {
            continue;
        }
        let grad = p.grad.take().expect("checked above");
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for ((w, g), (mi, vi)) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
        {
            *mi = state.beta1 * *mi + (1.0 - state.beta1) * g;
            *vi = state.beta2 * *vi + (1.0 - state.beta2) * g * g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *w -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    params.clear_grads();
    Ok(())
}

/// Reduce-on-plateau schedule: when the monitored metric has not improved by
/// more than `threshold` for `patience` consecutive calls, multiply the rate
/// by `factor`, never going below `lr_min`.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    pub lr_min: f64,
    best: Option<f64>,
    bad_count: usize,
}

impl PlateauScheduler {
    pub fn new(factor: f64, patience: usize, threshold: f64, lr_min: f64) -> Self {
        PlateauScheduler { factor, patience, threshold, lr_min, best: None, bad_count: 0 }
    }

    /// Feed one metric observation; returns the (possibly reduced) rate.
    pub fn step(&mut self, metric: f64, lr: f64) -> f64 {
        let improved = match self.best {
            None => true,
            Some(best) => metric < best - self.threshold,
        };
        if improved {
            self.best = Some(metric);
            self.bad_count = 0;
            return lr;
        }
        self.bad_count += 1;
        if self.bad_count >= self.patience {
            self.bad_count = 0;
            return (lr * self.factor).max(self.lr_min);
        }
        lr
    }

    pub fn state(&self) -> (Option<f64>, usize) {
        (self.best, self.bad_count)
    }

    pub fn restore(&mut self, best: Option<f64>, bad_count: usize) {
        self.best = best;
        self.bad_count = bad_count;
    }
}
