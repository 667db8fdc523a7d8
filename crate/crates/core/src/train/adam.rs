use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
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
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction; moments are kept per parameter, in store
/// order.
#[derive(Clone, Debug)]
pub struct Adam<S> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(config: AdamConfig, store: &ParamStore<S>) -> Self {
        let zeros: Vec<_> = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &[Tensor<S>]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        for (p, g) in store.iter().zip(grads) {
            if p.value.shape() != g.shape() {
                return Err(Error::Contract(format!(
                    "gradient for {} has shape {:?}, parameter {:?}",
                    p.name,
                    g.shape(),
                    p.value.shape()
                )));
            }
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (S::of(c.beta1), S::of(c.beta2));
        let (one, lr, eps) = (S::one(), S::of(c.lr), S::of(c.eps));
        let t = self.step as i32;
        let bc1 = one - b1.powi(t);
        let bc2 = one - b2.powi(t);
        for (((p, g), m), v) in store.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let pv = p.value.data_mut();
            for i in 0..pv.len() {
                let gi = g.data()[i];
                let mi = b1 * m.data()[i] + (one - b1) * gi;
                let vi = b2 * v.data()[i] + (one - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                pv[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: Vec<f64>) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let n = values.len();
        s.add("p", Tensor::new(vec![n], values).unwrap());
        s
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let mut s = store(vec![1.0, -2.0, 0.5]);
        let mut opt = Adam::new(AdamConfig { lr: 1e-3, ..Default::default() }, &s);
        let g = Tensor::new(vec![3], vec![0.3, -4.0, 0.05]).unwrap();
        opt.step(&mut s, &[g]).unwrap();
        let expected = [1.0 - 1e-3, -2.0 + 1e-3, 0.5 - 1e-3];
        for (a, b) in s.iter().next().unwrap().value.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-6 * 1e-3, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_gradients_leave_parameters() {
        let mut s = store(vec![1.0, -2.0]);
        let before = s.named_tensors();
        let mut opt = Adam::new(AdamConfig::default(), &s);
        for _ in 0..3 {
            opt.step(&mut s, &[Tensor::zeros(&[2])]).unwrap();
        }
        assert_eq!(s.named_tensors(), before);
    }

    #[test]
    fn quadratic_matches_recurrence() {
        // f(x) = (x - 3)^2, g = 2(x - 3)
        let cfg = AdamConfig { lr: 0.1, ..Default::default() };
        let mut s = store(vec![0.0]);
        let mut opt = Adam::new(cfg, &s);
        let (mut x, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=3 {
            let g = 2.0 * (x - 3.0);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 0.1 * mh / (vh.sqrt() + 1e-8);

            let cur = s.iter().next().unwrap().value.data()[0];
            let grad = Tensor::new(vec![1], vec![2.0 * (cur - 3.0)]).unwrap();
            opt.step(&mut s, &[grad]).unwrap();
            assert!((s.iter().next().unwrap().value.data()[0] - x).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_gradient_is_contract_error() {
        let mut s = store(vec![1.0]);
        let mut opt = Adam::new(AdamConfig::default(), &s);
        assert!(matches!(opt.step(&mut s, &[]), Err(Error::Contract(_))));
    }
}
