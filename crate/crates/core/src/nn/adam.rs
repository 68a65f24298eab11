use super::params::{ParamId, ParamStore};
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
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are created lazily per parameter
/// with the parameter's length.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update. Gradients are checked for NaN/Inf before any
    /// parameter is touched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Vec<f64>)]) -> Result<()> {
        for (id, g) in grads {
            if g.len() != store.get(*id).len() {
                return Err(Error::dim(
                    "adam_step",
                    format!("{}: gradient length {} vs parameter {}", store.name(*id), g.len(), store.get(*id).len()),
                ));
            }
            if let Some(pos) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient in parameter {} at element {pos}",
                    store.name(*id)
                )));
            }
        }
        if self.m.len() < store.len() {
            self.m.resize(store.len(), Vec::new());
            self.v.resize(store.len(), Vec::new());
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (id, g) in grads {
            let i = id.index();
            if self.m[i].is_empty() {
                self.m[i] = vec![0.0; g.len()];
                self.v[i] = vec![0.0; g.len()];
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = store.get_mut(*id).data_mut();
            for k in 0..g.len() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                p[k] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn store_with(values: Vec<f64>) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let n = values.len();
        let id = s.add("p", Tensor::new(&[n], values).unwrap());
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let (mut s, id) = store_with(vec![0.5, -1.0, 2.0]);
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..5 {
            adam.step(&mut s, &[(id, vec![0.0; 3])]).unwrap();
        }
        assert_eq!(s.get(id).data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn step_counter() {
        let (mut s, id) = store_with(vec![1.0]);
        let mut adam = Adam::new(AdamConfig::default());
        assert_eq!(adam.step_count(), 0);
        adam.step(&mut s, &[(id, vec![0.1])]).unwrap();
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn constant_gradient_update_tends_to_lr_sign() {
        // With constant g the bias-corrected ratio m_hat / sqrt(v_hat) is
        // g / |g| exactly, up to eps.
        let (mut s, id) = store_with(vec![0.0, 0.0]);
        let cfg = AdamConfig::default();
        let mut adam = Adam::new(cfg);
        let mut prev = s.get(id).data().to_vec();
        for _ in 0..200 {
            adam.step(&mut s, &[(id, vec![0.3, -2.0])]).unwrap();
            let cur = s.get(id).data().to_vec();
            let d0 = cur[0] - prev[0];
            let d1 = cur[1] - prev[1];
            assert!((d0 + cfg.lr).abs() < 1e-9, "{d0}");
            assert!((d1 - cfg.lr).abs() < 1e-9, "{d1}");
            prev = cur;
        }
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let (mut s, id) = store_with(vec![1.0, 1.0]);
        let mut adam = Adam::new(AdamConfig::default());
        let err = adam.step(&mut s, &[(id, vec![0.0, f64::NAN])]).unwrap_err();
        assert!(err.to_string().contains("parameter p"), "{err}");
        assert_eq!(s.get(id).data(), &[1.0, 1.0]);
        assert_eq!(adam.step_count(), 0);
    }
}
