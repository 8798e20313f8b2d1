use serde::{Deserialize, Serialize};

use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First and second moments for each parameter tensor, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self
    where
        T: 'a,
    {
        let m: Vec<Tensor<T>> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            step: 0,
            v: m.clone(),
            m,
        }
    }

    /// One bias-corrected update of every tensor in `params`.
    pub fn update(&mut self, cfg: &AdamConfig, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            assert_eq!(p.shape(), g.shape());
            let (pd, gd) = (p.data_mut(), g.data());
            for i in 0..pd.len() {
                let gi = gd[i].to_f64().unwrap();
                let mi = cfg.beta1 * m.data()[i].to_f64().unwrap() + (1.0 - cfg.beta1) * gi;
                let vi = cfg.beta2 * v.data()[i].to_f64().unwrap() + (1.0 - cfg.beta2) * gi * gi;
                m.data_mut()[i] = T::lit(mi);
                v.data_mut()[i] = T::lit(vi);
                let delta = cfg.lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
                pd[i] = T::lit(pd[i].to_f64().unwrap() - delta);
            }
        }
    }
}
