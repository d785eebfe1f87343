use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are allocated lazily per parameter.
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            m: vec![Vec::new(); store.len()],
            v: vec![Vec::new(); store.len()],
        }
    }

    /// Apply one update. `grads[i]` empty means parameter `i` is frozen.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        for (id, g) in store.ids().zip(grads) {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(store.name(id).to_string()));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let g = &grads[i];
            if g.is_empty() {
                continue;
            }
            let w = store.get_mut(id).data_mut();
            if self.m[i].is_empty() {
                self.m[i] = vec![0.0; w.len()];
                self.v[i] = vec![0.0; w.len()];
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..w.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                w[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π·epoch/max_epochs))`.
pub fn cosine_lr(epoch: usize, max_epochs: usize, lr_max: f64, lr_min: f64) -> f64 {
    if max_epochs == 0 {
        return lr_max;
    }
    let e = epoch.min(max_epochs) as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * e / max_epochs as f64).cos())
}
