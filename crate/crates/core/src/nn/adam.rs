use serde::{Deserialize, Serialize};

use super::network::Network;
use super::tensor::Scalar;

/// Adam hyper-parameters. Defaults are the usual Kingma & Ba constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { alpha: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// First and second moments for every parameter tensor of one network, in
/// [`Network::params`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    t: u64,
    pub(crate) m: Vec<Vec<T>>,
    pub(crate) v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(net: &Network<T>, config: AdamConfig) -> Self {
        let zeros = |p: &super::layers::Param<T>| vec![T::zero(); p.value.len()];
        Self { config, t: 0, m: net.params().map(zeros).collect(), v: net.params().map(zeros).collect() }
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub(crate) fn set_t(&mut self, t: u64) {
        self.t = t;
    }

    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.m, &self.v)
    }

    /// Zeroes both moments and the step counter.
    pub fn reset(&mut self) {
        self.t = 0;
        self.m.iter_mut().chain(self.v.iter_mut()).for_each(|buf| buf.iter_mut().for_each(|x| *x = T::zero()));
    }

    /// Applies one bias-corrected update using the gradients stored in `net`.
    /// Frozen parameters and their moments are left untouched; the step
    /// counter always advances.
    pub fn step(&mut self, net: &mut Network<T>) {
        self.t += 1;
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::of(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = T::of(1.0 - c.beta2.powi(self.t as i32));
        let (alpha, eps) = (T::of(c.alpha), T::of(c.epsilon));
        for ((p, m), v) in net.params_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.trainable {
                continue;
            }
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.value[i] = p.value[i] - alpha * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}
