//! Adam with bias correction.

use crate::tensor::{ParamGrads, ParamStore};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let m = store
            .ids()
            .map(|id| vec![0.0; store.value(id).len()])
            .collect::<Vec<_>>();
        let v = m.clone();
        Self {
            m,
            v,
            step: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One optimizer step. Parameters without a gradient are untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads, lr: f64) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for id in store.ids() {
            let Some(g) = grads.get(id) else { continue };
            let m = &mut self.m[id.index()];
            let v = &mut self.v[id.index()];
            let data = store.value_mut(id);
            for i in 0..data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: Vec<f64>) -> (ParamStore, crate::tensor::ParamId) {
        let mut store = ParamStore::new();
        let n = values.len();
        let id = store.register("p", vec![n], values);
        (store, id)
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let (mut store, id) = store_with(vec![1.0, -2.0, 3.0]);
        let mut adam = AdamState::new(&store);
        let mut grads = ParamGrads::zeros_like(&store);
        grads.accumulate(id, &[0.0, 0.0, 0.0]);
        adam.step(&mut store, &grads, 0.1);
        assert_eq!(store.value(id), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn first_step_magnitude_is_lr_times_sign() {
        let (mut store, id) = store_with(vec![0.0, 0.0]);
        let mut adam = AdamState::new(&store);
        let mut grads = ParamGrads::zeros_like(&store);
        grads.accumulate(id, &[0.7, -1.3]);
        adam.step(&mut store, &grads, 1e-2);
        for (value, g) in store.value(id).iter().zip([0.7f64, -1.3]) {
            let expected = -1e-2 * g.signum();
            assert!(
                (value - expected).abs() < 1e-6 * 1e-2 + 1e-9,
                "{value} vs {expected}"
            );
        }
    }

    /// Independent scalar re-implementation tracked over ten steps.
    #[test]
    fn matches_scalar_reference_over_ten_steps() {
        let (mut store, id) = store_with(vec![0.5]);
        let mut adam = AdamState::new(&store);

        let mut x = 0.5f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let (b1, b2, eps, lr) = (ADAM_BETA1, ADAM_BETA2, ADAM_EPS, 3e-3);

        for t in 1..=10u32 {
            // gradient of f(x) = x^2 is 2x
            let g = 2.0 * x;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t as i32));
            let v_hat = v / (1.0 - b2.powi(t as i32));
            x -= lr * m_hat / (v_hat.sqrt() + eps);

            let g_store = 2.0 * store.value(id)[0];
            let mut grads = ParamGrads::zeros_like(&store);
            grads.accumulate(id, &[g_store]);
            adam.step(&mut store, &grads, lr);

            assert!(
                (store.value(id)[0] - x).abs() < 1e-12,
                "step {t}: {} vs {x}",
                store.value(id)[0]
            );
        }
    }
}
