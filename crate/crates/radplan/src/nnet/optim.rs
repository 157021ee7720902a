//! AdamW with global-norm gradient clipping and milestone LR decay.

use serde::{Deserialize, Serialize};

use super::elem::Elem;
use super::graph::{Gradients, ParamStore};
use super::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// Steps at which the stored learning rate is multiplied by `decay`.
    pub milestones: Vec<u64>,
    pub decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 5e-4,
            weight_decay: 0.01,
            grad_clip: 5.0,
            milestones: Vec::new(),
            decay: 0.5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// Non-finite gradients: update skipped, counter still advanced.
    SkippedNonFinite,
}

/// Per-parameter first/second moments plus the step counter and the stored
/// (decayed) learning rate.
#[derive(Debug, Clone)]
pub struct OptimizerState<E: Elem> {
    pub config: OptimizerConfig,
    pub step: u64,
    pub current_lr: f64,
    pub skipped_steps: u64,
    pub m: Vec<Tensor<E>>,
    pub v: Vec<Tensor<E>>,
}

impl<E: Elem> OptimizerState<E> {
    pub fn new(store: &ParamStore<E>, config: OptimizerConfig) -> Self {
        let m = store.iter().map(|(_, _, t)| Tensor::zeros(t.dims())).collect();
        let v = store.iter().map(|(_, _, t)| Tensor::zeros(t.dims())).collect();
        OptimizerState {
            current_lr: config.learning_rate,
            config,
            step: 0,
            skipped_steps: 0,
            m,
            v,
        }
    }

    /// One optimizer step: clip by global norm, AdamW moment update with
    /// decoupled weight decay, then milestone decay of the stored rate.
    pub fn step(&mut self, store: &mut ParamStore<E>, grads: &Gradients<E>) -> StepOutcome {
        let dense = grads.dense(store);
        let finite = dense.iter().all(Tensor::all_finite);
        if !finite {
            self.step += 1;
            self.skipped_steps += 1;
            self.apply_milestones();
            return StepOutcome::SkippedNonFinite;
        }

        let norm = dense.iter().map(Tensor::sq_norm_f64).sum::<f64>().sqrt();
        let clip_scale = if norm > self.config.grad_clip {
            self.config.grad_clip / norm
        } else {
            1.0
        };

        let t = (self.step + 1) as f64;
        let b1 = self.config.beta1;
        let b2 = self.config.beta2;
        let bc1 = 1.0 - b1.powf(t);
        let bc2 = 1.0 - b2.powf(t);
        let lr = self.current_lr;
        let wd = self.config.weight_decay;

        for (idx, grad) in dense.iter().enumerate() {
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let p = store.get_mut(super::graph::ParamId(idx));
            for i in 0..grad.len() {
                let g = grad.data()[i].to_f64() * clip_scale;
                let mi = b1 * m.data()[i].to_f64() + (1.0 - b1) * g;
                let vi = b2 * v.data()[i].to_f64() + (1.0 - b2) * g * g;
                m.data_mut()[i] = E::from_f64(mi);
                v.data_mut()[i] = E::from_f64(vi);
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                let pi = p.data()[i].to_f64();
                let update = m_hat / (v_hat.sqrt() + self.config.eps) + wd * pi;
                p.data_mut()[i] = E::from_f64(pi - lr * update);
            }
        }

        self.step += 1;
        self.apply_milestones();
        StepOutcome::Applied
    }

    fn apply_milestones(&mut self) {
        // Recompute from scratch so resumed runs agree with uninterrupted ones.
        let hits = self
            .config
            .milestones
            .iter()
            .filter(|m| **m <= self.step)
            .count();
        self.current_lr = self.config.learning_rate * self.config.decay.powi(hits as i32);
    }

    /// Restore the derived learning rate after loading a checkpoint.
    pub fn refresh_lr(&mut self) {
        self.apply_milestones();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::graph::{Graph, ParamStore};

    fn store_with(values: &[f64]) -> (ParamStore<f64>, super::super::graph::ParamId) {
        let mut store = ParamStore::new();
        let id = store.register(
            "p",
            Tensor::from_f64s(&[1, values.len()], values).unwrap(),
        );
        (store, id)
    }

    fn zero_grads(store: &ParamStore<f64>) -> Gradients<f64> {
        // A loss that never touches any parameter: every gradient reads zero.
        let mut g = Graph::new(store, false);
        let c = g.input(Tensor::scalar(0.0));
        let l = g.sum_all(c);
        g.backward(l).unwrap()
    }

    #[test]
    fn zero_grads_zero_decay_leave_params_unchanged() {
        let (mut store, pid) = store_with(&[1.0, -2.0, 3.0]);
        let config = OptimizerConfig {
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        };
        let mut opt = OptimizerState::new(&store, config);
        let zeros = zero_grads(&store);
        let before = store.get(pid).clone();
        assert_eq!(opt.step(&mut store, &zeros), StepOutcome::Applied);
        assert_eq!(store.get(pid), &before);
    }

    #[test]
    fn global_norm_ten_scales_by_half() {
        // Single gradient vector (6, 8): norm 10, clip 5 => scale 0.5.
        let (mut store, pid) = store_with(&[0.0, 0.0]);
        let config = OptimizerConfig {
            weight_decay: 0.0,
            learning_rate: 1.0,
            beta1: 0.0,
            beta2: 0.0,
            eps: 0.0,
            ..OptimizerConfig::default()
        };
        let mut opt = OptimizerState::new(&store, config);
        let grads = {
            let mut g = Graph::new(&store, false);
            let p = g.param(pid);
            let w = g.input(Tensor::from_f64s(&[1, 2], &[6.0, 8.0]).unwrap());
            let prod = g.mul(p, w).unwrap();
            let loss = g.sum_all(prod);
            g.backward(loss).unwrap()
        };
        opt.step(&mut store, &grads);
        // With beta1=beta2=0 and eps=0 the update is sign(g) regardless of the
        // clip, so verify the clip through the stored moments instead.
        assert!((opt.m[0].data()[0] - 3.0).abs() < 1e-12);
        assert!((opt.m[0].data()[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn milestone_halves_stored_lr() {
        let (mut store, _pid) = store_with(&[1.0]);
        let config = OptimizerConfig {
            milestones: vec![2],
            ..OptimizerConfig::default()
        };
        let base = config.learning_rate;
        let mut opt = OptimizerState::new(&store, config);
        let zeros = zero_grads(&store);
        opt.step(&mut store, &zeros);
        assert_eq!(opt.current_lr, base);
        opt.step(&mut store, &zeros);
        assert_eq!(opt.current_lr, base * 0.5);
    }

    #[test]
    fn non_finite_grads_skip_but_advance() {
        let (mut store, pid) = store_with(&[1.0]);
        let mut opt = OptimizerState::new(&store, OptimizerConfig::default());
        let poisoned = {
            let mut g = Graph::new(&store, false);
            let p = g.param(pid);
            let loss = g.sum_all(p);
            let mut out = g.backward(loss).unwrap();
            out.scale(f64::NAN);
            out
        };
        let before = store.get(pid).clone();
        assert_eq!(opt.step(&mut store, &poisoned), StepOutcome::SkippedNonFinite);
        assert_eq!(opt.step, 1);
        assert_eq!(opt.skipped_steps, 1);
        assert_eq!(store.get(pid), &before);
    }
}
