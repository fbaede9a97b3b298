//! AdamW: Adam with decoupled weight decay.
//!
//! State is kept per parameter as first/second moment matrices plus a
//! shared step counter, so the total optimizer-state footprint is exactly
//! two scalars per trainable scalar — the quantity the budget module
//! accounts for.

use alloc::vec::Vec;

use crate::error::CoreError;
use crate::fmath;
use crate::matrix::Matrix;
use crate::Result;

/// Optimizer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Per-parameter moment estimates plus the step count.
#[derive(Debug, Clone)]
pub struct AdamWState {
    first: Vec<Matrix>,
    second: Vec<Matrix>,
    step: u64,
}

impl AdamWState {
    /// Allocates zeroed moments matching the given parameter shapes.
    pub fn new(params: &[&Matrix]) -> Self {
        let first = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        let second = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        AdamWState { first, second, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Number of parameter slots in the group.
    pub fn slots(&self) -> usize {
        self.first.len()
    }

    /// Advances the shared step counter and returns its new value.
    pub fn bump(&mut self) -> u64 {
        self.step += 1;
        self.step
    }

    /// Moment matrices for slot `idx`.
    pub fn slot_mut(&mut self, idx: usize) -> (&mut Matrix, &mut Matrix) {
        (&mut self.first[idx], &mut self.second[idx])
    }

    /// Number of scalars held by the optimizer state (both moments).
    pub fn scalar_count(&self) -> usize {
        self.first.iter().map(Matrix::len).sum::<usize>()
            + self.second.iter().map(Matrix::len).sum::<usize>()
    }
}

/// One AdamW update of a single parameter at step `t` (1-based).
///
/// Factored out so callers that cannot hold simultaneous mutable borrows
/// of a whole parameter group can update one matrix at a time while still
/// sharing a step counter.
pub fn adamw_update_param(
    param: &mut Matrix,
    grad: &Matrix,
    m: &mut Matrix,
    v: &mut Matrix,
    t: u64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(CoreError::shape("adamw_step", param.shape(), grad.shape()));
    }
    if param.shape() != m.shape() || param.shape() != v.shape() {
        return Err(CoreError::shape("adamw_step state", param.shape(), m.shape()));
    }
    let bias1 = 1.0 - fmath::powi(cfg.beta1, t as i32);
    let bias2 = 1.0 - fmath::powi(cfg.beta2, t as i32);
    let p = param.data_mut();
    let g = grad.data();
    let m = m.data_mut();
    let v = v.data_mut();
    for i in 0..p.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let m_hat = m[i] / bias1;
        let v_hat = v[i] / bias2;
        // Decoupled decay: the regularization term multiplies the
        // parameter directly and bypasses the moment estimates.
        p[i] -= cfg.lr * (m_hat / (fmath::sqrt(v_hat) + cfg.eps) + cfg.weight_decay * p[i]);
    }
    Ok(())
}

/// One decoupled-weight-decay Adam update over a parameter group.
///
/// `params[i]` is updated in place from `grads[i]`; a `None` gradient
/// leaves the moments untouched but still applies weight decay — callers
/// that want a strict fixed point pass zero gradients instead.
pub fn adamw_step(
    params: &mut [&mut Matrix],
    grads: &[&Matrix],
    state: &mut AdamWState,
    cfg: &AdamWConfig,
) -> Result<()> {
    if params.len() != grads.len()
        || params.len() != state.first.len()
        || params.len() != state.second.len()
    {
        return Err(CoreError::Contract(alloc::format!(
            "adamw_step group size mismatch: {} params, {} grads, {} state slots",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    for ((p, g), (m, v)) in params
        .iter()
        .zip(grads.iter())
        .zip(state.first.iter().zip(state.second.iter()))
    {
        if p.shape() != g.shape() {
            return Err(CoreError::shape("adamw_step", p.shape(), g.shape()));
        }
        if p.shape() != m.shape() || p.shape() != v.shape() {
            return Err(CoreError::shape("adamw_step state", p.shape(), m.shape()));
        }
    }

    let t = state.bump();
    for idx in 0..params.len() {
        let (m, v) = (&mut state.first[idx], &mut state.second[idx]);
        adamw_update_param(params[idx], grads[idx], m, v, t, cfg)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_steps(
        param: &mut Matrix,
        cfg: &AdamWConfig,
        steps: usize,
        grad_of: impl Fn(&Matrix) -> Matrix,
    ) {
        let mut state = AdamWState::new(&[param]);
        for _ in 0..steps {
            let g = grad_of(param);
            adamw_step(&mut [param], &[&g], &mut state, cfg).unwrap();
        }
    }

    #[test]
    fn converges_on_1d_quadratic() {
        // f(w) = (w - 3)^2, f'(w) = 2 (w - 3).
        let mut w = Matrix::zeros(1, 1);
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.0, ..AdamWConfig::default() };
        run_steps(&mut w, &cfg, 500, |w| {
            Matrix::from_vec(1, 1, alloc::vec![2.0 * (w.get(0, 0) - 3.0)]).unwrap()
        });
        assert!((w.get(0, 0) - 3.0).abs() < 1e-3, "w = {}", w.get(0, 0));
    }

    #[test]
    fn zero_gradient_zero_decay_is_a_fixed_point() {
        let mut w = Matrix::from_rows(&[&[1.0, -2.0], &[0.25, 4.0]]);
        let before = w.clone();
        let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
        run_steps(&mut w, &cfg, 10, |w| Matrix::zeros(w.rows(), w.cols()));
        assert_eq!(w, before);
    }

    #[test]
    fn decay_alone_shrinks_by_one_minus_lr_lambda() {
        let mut w = Matrix::from_rows(&[&[2.0, -8.0]]);
        let cfg = AdamWConfig { lr: 0.5, weight_decay: 0.1, ..AdamWConfig::default() };
        let factor = 1.0 - cfg.lr * cfg.weight_decay;
        let mut expect = w.clone();
        run_steps(&mut w, &cfg, 3, |w| Matrix::zeros(w.rows(), w.cols()));
        for _ in 0..3 {
            expect = expect.scale(factor);
        }
        assert!(w.max_abs_diff(&expect) <= 1e-15);
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let mut w = Matrix::zeros(2, 2);
        let g = Matrix::zeros(2, 3);
        let mut state = AdamWState::new(&[&w]);
        let err = adamw_step(
            &mut [&mut w],
            &[&g],
            &mut state,
            &AdamWConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, CoreError::ShapeMismatch { .. }));
    }

    #[test]
    fn state_holds_two_scalars_per_parameter_scalar() {
        let a = Matrix::zeros(3, 4);
        let b = Matrix::zeros(2, 2);
        let state = AdamWState::new(&[&a, &b]);
        assert_eq!(state.scalar_count(), 2 * (12 + 4));
    }
}
