use std::collections::BTreeMap;

use super::params::ParamStore;
use super::{AutodiffError, Result};

/// Adaptive-moment optimizer with decoupled weight decay (decay defaults
/// to zero). First and second moments persist across steps, keyed by
/// parameter name so they survive store reordering.
pub struct Adam {
    beta1: f32,
    beta2: f32,
    eps: f32,
    weight_decay: f32,
    step: u64,
    moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub fn new(betas: (f32, f32), eps: f32, weight_decay: f32) -> Self {
        Adam {
            beta1: betas.0,
            beta2: betas.1,
            eps,
            weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One update over every parameter in the store. Every parameter must
    /// have a populated grad buffer (zero-filled counts as populated).
    pub fn step(&mut self, store: &mut ParamStore, lr: f32) -> Result<()> {
        // Validate first so a failed step leaves no partial updates.
        for p in store.iter() {
            if p.tensor().grad().is_none() {
                return Err(AutodiffError::Contract(format!(
                    "adam step with no gradient for parameter {:?}",
                    p.name()
                )));
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..store.len() {
            let p = store.get_mut(i);
            let name = p.name().to_string();
            let n = p.tensor().numel();
            let (m, v) = self
                .moments
                .entry(name)
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let grad = p.tensor().grad().expect("validated above").to_vec();
            let data = p.tensor_mut().data_mut();
            for j in 0..n {
                let g = grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                data[j] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * data[j]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn store_with(name: &str, vals: Vec<f32>) -> ParamStore {
        let mut s = ParamStore::new();
        s.register(name, Tensor::from_vec(vec![vals.len()], vals).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn zero_grad_zero_decay_leaves_params_unchanged() {
        let mut store = store_with("w", vec![0.5, -0.25]);
        store.get_mut(0).tensor_mut().accumulate_grad(&[0.0, 0.0]).unwrap();
        let mut opt = Adam::new((0.9, 0.999), 1e-8, 0.0);
        for _ in 0..3 {
            opt.step(&mut store, 0.1).unwrap();
        }
        assert_eq!(store.get(0).tensor().data(), &[0.5, -0.25]);
    }

    #[test]
    fn step_moves_opposite_gradient_sign() {
        let mut store = store_with("w", vec![1.0]);
        store.get_mut(0).tensor_mut().accumulate_grad(&[2.0]).unwrap();
        let mut opt = Adam::new((0.9, 0.999), 1e-8, 0.0);
        opt.step(&mut store, 0.05).unwrap();
        assert!(store.get(0).tensor().data()[0] < 1.0);

        let mut store = store_with("w", vec![1.0]);
        store.get_mut(0).tensor_mut().accumulate_grad(&[-2.0]).unwrap();
        let mut opt = Adam::new((0.9, 0.999), 1e-8, 0.0);
        opt.step(&mut store, 0.05).unwrap();
        assert!(store.get(0).tensor().data()[0] > 1.0);
    }

    #[test]
    fn identical_params_stay_identical() {
        let mut store = ParamStore::new();
        store
            .register("a", Tensor::from_vec(vec![1], vec![0.7]).unwrap())
            .unwrap();
        store
            .register("b", Tensor::from_vec(vec![1], vec![0.7]).unwrap())
            .unwrap();
        let mut opt = Adam::new((0.9, 0.999), 1e-8, 0.0);
        for _ in 0..5 {
            store.zero_grads();
            store.get_mut(0).tensor_mut().accumulate_grad(&[0.31]).unwrap();
            store.get_mut(1).tensor_mut().accumulate_grad(&[0.31]).unwrap();
            opt.step(&mut store, 0.01).unwrap();
        }
        assert_eq!(
            store.get(0).tensor().data(),
            store.get(1).tensor().data()
        );
    }

    #[test]
    fn missing_grad_names_parameter() {
        let mut store = store_with("lm.embed", vec![0.0]);
        let mut opt = Adam::new((0.9, 0.999), 1e-8, 0.0);
        let err = opt.step(&mut store, 0.1).unwrap_err();
        assert!(err.to_string().contains("lm.embed"));
    }
}
