use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// Adam with bias correction. Parameters and moments are rounded to 32-bit
/// precision after each update so a checkpoint captures them exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

fn round(x: f64) -> f64 {
    x as f32 as f64
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update using the gradients stored in `params`. `t` is the
    /// 1-based update count.
    pub fn update(&mut self, params: &mut ParamStore, lr: f64, t: u64) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::shape(format!(
                "optimizer holds {} moments for {} parameters",
                self.m.len(),
                params.len()
            )));
        }
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(t as i32);
        let c2 = 1.0 - beta2.powi(t as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad.data();
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                m[i] = round(beta1 * m[i] + (1.0 - beta1) * g[i]);
                v[i] = round(beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]);
                let step = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                *w = round(*w - step);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap()).unwrap();
        store.get_mut(id).grad = Tensor::new(vec![2], vec![0.5, -2.0]).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &store);
        adam.update(&mut store, 0.01, 1).unwrap();
        let w = store.get(id).value.data();
        assert!((w[0] - 0.99).abs() < 1e-6);
        assert!((w[1] + 0.99).abs() < 1e-6);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(3.0)).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &store);
        for t in 1..=2000 {
            let w = store.get(id).value.data()[0];
            store.get_mut(id).grad = Tensor::scalar(2.0 * (w - 1.0));
            adam.update(&mut store, 0.01, t).unwrap();
        }
        assert!((store.get(id).value.data()[0] - 1.0).abs() < 1e-2);
    }
}
