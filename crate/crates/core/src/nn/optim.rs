use super::params::ParamStore;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
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
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are kept in the parameter precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = || {
            store
                .params
                .iter()
                .map(|p| Tensor::zeros(p.shape.clone()))
                .collect()
        };
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != store.params.len() || self.m.len() != grads.len() {
            return Err(Error::invalid(format!(
                "optimizer expects {} gradients, got {}",
                self.m.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (ob1, ob2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let step_size = T::of(c.lr / bc1);
        let inv_sqrt_bc2 = T::of(1.0 / bc2.sqrt());
        let eps = T::of(c.eps);
        for (k, g) in grads.iter().enumerate() {
            let p = &mut store.params[k];
            if g.shape != p.shape {
                return Err(Error::invalid(format!(
                    "gradient shape {:?} does not match parameter {:?}",
                    g.shape, p.shape
                )));
            }
            let (m, v) = (&mut self.m[k].data, &mut self.v[k].data);
            for i in 0..g.data.len() {
                let gi = g.data[i];
                m[i] = b1 * m[i] + ob1 * gi;
                v[i] = b2 * v[i] + ob2 * gi * gi;
                p.data[i] -= step_size * m[i] / (v[i].sqrt() * inv_sqrt_bc2 + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::{Init, ParamLayout};

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut l = ParamLayout::default();
        l.add_param("w", vec![3], Init::Zeros);
        let mut s = l.init::<f64>(0);
        let mut opt = Adam::new(AdamConfig::default(), &s);
        let g = Tensor::new(vec![3], vec![2.0, -0.5, 0.0]);
        opt.update(&mut s, &[g]).unwrap();
        let w = &s.params[0].data;
        assert!((w[0] + 1e-3).abs() < 1e-9);
        assert!((w[1] - 1e-3).abs() < 1e-9);
        assert_eq!(w[2], 0.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut l = ParamLayout::default();
        l.add_param("w", vec![1], Init::Ones);
        let mut s = l.init::<f64>(0);
        let cfg = AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        };
        let mut opt = Adam::new(cfg, &s);
        for _ in 0..500 {
            let w = s.params[0].data[0];
            let g = Tensor::new(vec![1], vec![2.0 * (w - 3.0)]);
            opt.update(&mut s, &[g]).unwrap();
        }
        assert!((s.params[0].data[0] - 3.0).abs() < 1e-2);
    }
}
