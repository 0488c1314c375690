use serde::{Deserialize, Serialize};

use crate::nn::ParamStore;
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are exposed so training state
/// can be checkpointed and resumed bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros: Vec<_> = store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>]) {
        assert_eq!(grads.len(), store.len(), "one gradient per parameter");
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (lit::<T>(c.beta1), lit::<T>(c.beta2));
        let bc1 = lit::<T>(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = lit::<T>(1.0 - c.beta2.powi(self.step as i32));
        let (lr, eps) = (lit::<T>(c.lr), lit::<T>(c.eps));
        for (((p, g), m), v) in store
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mh = *mi / bc1;
                let vh = *vi / bc2;
                *pi -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::from_vec(&[2], vec![3.0, -2.0]).unwrap());
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.05,
                ..Default::default()
            },
            &store,
        );
        for _ in 0..2000 {
            let g = store.get(id).map(|x| 2.0 * (x - 1.0));
            opt.update(&mut store, &[g]);
        }
        for &x in store.get(id).data() {
            assert!((x - 1.0).abs() < 1e-3);
        }
    }
}
