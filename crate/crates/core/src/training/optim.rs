use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Real, Tensor};

/// Adam with bias correction; one moment pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<F: Real = f32> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(store: &ParamStore<F>) -> Self {
        let zeros = || store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect::<Vec<_>>();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros(), v: zeros() }
    }

    pub fn reset(&mut self) {
        self.t = 0;
        for t in self.m.iter_mut().chain(self.v.iter_mut()) {
            t.data_mut().iter_mut().for_each(|x| *x = F::zero());
        }
    }

    /// Applies one update with learning rate `lr`, skipping `frozen`, then
    /// clears all gradients. Non-finite gradients abort before any change.
    pub fn step(&mut self, store: &mut ParamStore<F>, lr: f64, frozen: &[ParamId]) -> Result<()> {
        for id in store.ids() {
            if !store.grad(id).is_finite() {
                return Err(Error::NonFiniteGradient(store.name(id).to_string()));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps) = (F::lit(self.beta1), F::lit(self.beta2), F::lit(self.eps));
        let step = F::lit(lr / bc1);
        let bc2 = F::lit(bc2);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            if frozen.contains(&id) {
                continue;
            }
            let i = id.index();
            let grad = store.grad(id).data().to_vec();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = store.get_mut(id).data_mut();
            for j in 0..grad.len() {
                let gj = grad[j];
                m[j] = b1 * m[j] + (F::one() - b1) * gj;
                v[j] = b2 * v[j] + (F::one() - b2) * gj * gj;
                p[j] -= step * m[j] / ((v[j] / bc2).sqrt() + eps);
            }
        }
        store.zero_grads();
        Ok(())
    }
}

/// Linear warmup from 0 to `lr` over `warmup` steps, constant afterwards.
pub fn lr_at(step: u64, lr: f64, warmup: u64) -> f64 {
    if warmup == 0 || step >= warmup {
        lr
    } else {
        lr * step as f64 / warmup as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.insert("x", Tensor::scalar(v)).unwrap();
        (s, id)
    }

    #[test]
    fn warmup_schedule() {
        assert_eq!(lr_at(0, 1e-4, 200), 0.0);
        assert!((lr_at(100, 1e-4, 200) - 5e-5).abs() < 1e-18);
        assert_eq!(lr_at(200, 1e-4, 200), 1e-4);
        assert_eq!(lr_at(5000, 1e-4, 200), 1e-4);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (mut s, id) = scalar_store(0.25);
        let mut opt = Adam::new(&s);
        opt.step(&mut s, 0.1, &[]).unwrap();
        assert_eq!(s.get(id).item(), 0.25);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut s, id) = scalar_store(1.0);
        let mut opt = Adam::new(&s);
        s.grad_mut(id).data_mut()[0] = 1.0;
        opt.step(&mut s, 1e-3, &[]).unwrap();
        assert!((s.get(id).item() - (1.0 - 1e-3)).abs() < 1e-9);
        assert_eq!(s.grad(id).item(), 0.0);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let (mut s, id) = scalar_store(1.0);
        let mut opt = Adam::new(&s);
        s.grad_mut(id).data_mut()[0] = f64::NAN;
        let err = opt.step(&mut s, 1e-3, &[]).unwrap_err();
        assert!(err.to_string().contains('x'));
        assert_eq!(s.get(id).item(), 1.0);
        assert_eq!(opt.t, 0);
    }

    #[test]
    fn frozen_params_stay() {
        let (mut s, id) = scalar_store(1.0);
        let mut opt = Adam::new(&s);
        s.grad_mut(id).data_mut()[0] = 1.0;
        opt.step(&mut s, 1e-3, &[id]).unwrap();
        assert_eq!(s.get(id).item(), 1.0);
    }
}
