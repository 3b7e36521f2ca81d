use crate::store::ParamStore;
use crate::tensor::Real;

/// Optimizer, clipping and schedule settings for one training phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub max_grad_norm: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    /// Smallest decrease of the monitored loss that counts as improvement.
    pub min_improvement: f64,
}

impl OptimConfig {
    pub fn pretrain() -> Self {
        OptimConfig {
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            max_grad_norm: 5.0,
            plateau_factor: 0.5,
            plateau_patience: 5,
            early_stop_patience: 10,
            min_improvement: 1e-6,
        }
    }

    pub fn finetune() -> Self {
        OptimConfig { learning_rate: 1e-4, ..Self::pretrain() }
    }

    pub fn validate(&self) -> Result<(), String> {
        let unit = |x: f64| x > 0.0 && x < 1.0;
        if !(self.learning_rate > 0.0) {
            return Err(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !unit(self.adam_beta1) || !unit(self.adam_beta2) {
            return Err("adam betas must lie in (0, 1)".into());
        }
        if !(self.adam_epsilon > 0.0) || !(self.max_grad_norm > 0.0) {
            return Err("adam_epsilon and max_grad_norm must be positive".into());
        }
        if !unit(self.plateau_factor) {
            return Err(format!("plateau_factor must lie in (0, 1), got {}", self.plateau_factor));
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return Err("patience values must be positive".into());
        }
        if !(self.min_improvement >= 0.0) {
            return Err("min_improvement must be non-negative".into());
        }
        Ok(())
    }
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self::pretrain()
    }
}

/// Rescales all trainable gradients so their global L2 norm is at most
/// `max_norm`. Returns the factor applied (1.0 when no clipping happened).
pub fn clip_gradients<T: Real>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm <= max_norm || norm == 0.0 {
        return 1.0;
    }
    let factor = max_norm / norm;
    let f = T::of(factor);
    let ids: Vec<_> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    for id in ids {
        store.grad_mut(id).iter_mut().for_each(|g| *g *= f);
    }
    factor
}

/// One bias-corrected Adam update of every trainable, unfrozen parameter.
/// Gradient buffers are left as they are.
pub fn adam_step<T: Real>(store: &mut ParamStore<T>, cfg: &OptimConfig) {
    let step = store.bump_step() as i32;
    let (b1, b2) = (T::of(cfg.adam_beta1), T::of(cfg.adam_beta2));
    let correction1 = T::one() - b1.powi(step);
    let correction2 = T::one() - b2.powi(step);
    let lr = T::of(cfg.learning_rate);
    let eps = T::of(cfg.adam_epsilon);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let Some((value, grad, m, v)) = store.adam_parts(id) else { continue };
        for i in 0..value.len() {
            let g = grad[i];
            m[i] = b1 * m[i] + (T::one() - b1) * g;
            v[i] = b2 * v[i] + (T::one() - b2) * g * g;
            let m_hat = m[i] / correction1;
            let v_hat = v[i] / correction2;
            value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    fn store_with_grad(grad: &[f64]) -> (ParamStore<f64>, crate::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add_param("p", Tensor::full(vec![grad.len()], 0.5));
        s.grad_mut(id).copy_from_slice(grad);
        (s, id)
    }

    #[test]
    fn default_hyperparameters() {
        let p = OptimConfig::pretrain();
        assert_eq!(p.learning_rate, 1e-3);
        assert_eq!(p.max_grad_norm, 5.0);
        assert_eq!(p.plateau_factor, 0.5);
        assert_eq!(p.plateau_patience, 5);
        assert_eq!(p.early_stop_patience, 10);
        assert_eq!(OptimConfig::finetune().learning_rate, 1e-4);
        assert!(p.validate().is_ok());
        assert!(OptimConfig { plateau_factor: 1.0, ..p }.validate().is_err());
    }

    #[test]
    fn clip_below_threshold_is_noop() {
        let (mut s, id) = store_with_grad(&[1.5, 2.0]);
        assert_eq!(clip_gradients(&mut s, 5.0), 1.0);
        assert_eq!(s.grad(id), &[1.5, 2.0]);
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let (mut s, id) = store_with_grad(&[6.0, 8.0]);
        let f = clip_gradients(&mut s, 5.0);
        assert!((f - 0.5).abs() < 1e-15);
        assert_eq!(s.grad(id), &[3.0, 4.0]);
        assert!((s.grad_norm() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn clip_zero_gradient_is_noop() {
        let (mut s, id) = store_with_grad(&[0.0, 0.0, 0.0]);
        assert_eq!(clip_gradients(&mut s, 5.0), 1.0);
        assert_eq!(s.grad(id), &[0.0; 3]);
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let (mut s, id) = store_with_grad(&[0.0, 0.0]);
        s.set_step(17);
        adam_step(&mut s, &OptimConfig::pretrain());
        assert_eq!(s.value(id).data(), &[0.5, 0.5]);
        assert_eq!(s.step(), 18);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let cfg = OptimConfig::pretrain();
        for g in [3.0, -0.02, 1e3] {
            let (mut s, id) = store_with_grad(&[g]);
            adam_step(&mut s, &cfg);
            let delta = s.value(id).data()[0] - 0.5;
            let expect = -cfg.learning_rate * g.signum();
            assert!((delta - expect).abs() < cfg.learning_rate * 1e-6, "g={g}: {delta}");
        }
    }

    #[test]
    fn frozen_parameters_are_skipped() {
        let (mut s, id) = store_with_grad(&[1.0, 1.0]);
        s.set_frozen(id, true);
        adam_step(&mut s, &OptimConfig::pretrain());
        assert_eq!(s.value(id).data(), &[0.5, 0.5]);
    }
}
