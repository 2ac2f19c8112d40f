use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::Matrix;

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

/// Adam with bias correction. Parameters without a gradient in a step are
/// left untouched, moments included.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Matrix<T>>,
    pub v: Vec<Matrix<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, shapes: &[(usize, usize)]) -> Self {
        Self {
            config,
            step: 0,
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
        }
    }

    pub fn update(&mut self, params: Vec<&mut Matrix<T>>, grads: &[Option<Matrix<T>>]) {
        assert_eq!(params.len(), self.m.len(), "optimizer tracks a different parameter list");
        assert_eq!(params.len(), grads.len(), "one gradient slot per parameter");
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::of(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::of(1.0 - c.beta2.powi(self.step as i32));
        let (lr, eps) = (T::of(c.lr), T::of(c.eps));
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = g else { continue };
            for (((x, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *x -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}
