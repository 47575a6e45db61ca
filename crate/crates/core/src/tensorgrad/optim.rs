use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ParamSet, TensorError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Cosine-decay the learning rate to zero over this many steps.
    pub decay_horizon: Option<u64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_horizon: None,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }

    pub fn cosine(mut self, horizon: u64) -> Self {
        self.decay_horizon = Some(horizon);
        self
    }
}

/// `base·½(1 + cos(π·step/horizon))`, held at zero past the horizon.
pub fn cosine_lr(base: f64, step: u64, horizon: u64) -> f64 {
    if horizon == 0 || step >= horizon {
        return 0.0;
    }
    let frac = step as f64 / horizon as f64;
    (base * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())).max(0.0)
}

/// Adam moment accumulators for one [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Learning rate the next call to [`Adam::step`] will use.
    pub fn learning_rate(&self) -> f64 {
        match self.config.decay_horizon {
            Some(h) => cosine_lr(self.config.lr, self.step, h),
            None => self.config.lr,
        }
    }

    /// Applies one bias-corrected Adam update from the accumulated gradients
    /// and clears them. Parameters without a gradient count as zero-gradient.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<(), TensorError> {
        let lr = self.learning_rate();
        self.step += 1;
        let t = self.step as i32;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (path, p) in params.iter_mut() {
            let n = p.value.len();
            let m = self.m.entry(path.to_string()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(path.to_string()).or_insert_with(|| vec![0.0; n]);
            if m.len() != n {
                return Err(TensorError::LayoutMismatch(format!(
                    "{path}: optimizer state has {} entries, parameter has {n}",
                    m.len()
                )));
            }
            let Some(g) = p.grad.take() else {
                // zero gradient still decays the moments
                for (mi, vi) in m.iter_mut().zip(v.iter_mut()) {
                    *mi *= c.beta1;
                    *vi *= c.beta2;
                }
                apply(p.value.data_mut(), m, v, lr, bc1, bc2, c.eps);
                continue;
            };
            for ((mi, vi), gi) in m.iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
            }
            apply(p.value.data_mut(), m, v, lr, bc1, bc2, c.eps);
        }
        params.bump_step();
        Ok(())
    }
}

fn apply(w: &mut [f64], m: &[f64], v: &[f64], lr: f64, bc1: f64, bc2: f64, eps: f64) {
    for ((wi, mi), vi) in w.iter_mut().zip(m).zip(v) {
        let mhat = mi / bc1;
        let vhat = vi / bc2;
        *wi -= lr * mhat / (vhat.sqrt() + eps);
    }
}

#[cfg(test)]
mod tests {
    use super::super::Tensor;
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(3e-4, 0, 100), 3e-4);
        assert_eq!(cosine_lr(3e-4, 100, 100), 0.0);
        assert_eq!(cosine_lr(3e-4, 250, 100), 0.0);
        assert!((cosine_lr(1.0, 50, 100) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::full(&[3], 0.7)).unwrap();
        p.get_mut("w").unwrap().grad = Some(Tensor::zeros(&[3]));
        let before = p.clone();
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut p).unwrap();
        assert_eq!(p.value("w").unwrap(), before.value("w").unwrap());
    }

    #[test]
    fn first_step_moves_by_lr() {
        // bias-corrected first step is lr·sign(g)
        let mut p = ParamSet::new();
        p.insert("w", Tensor::full(&[2], 1.0)).unwrap();
        p.get_mut("w").unwrap().grad = Some(Tensor::new(vec![2], vec![5.0, -0.1]).unwrap());
        let mut opt = Adam::new(AdamConfig::with_lr(0.01));
        opt.step(&mut p).unwrap();
        let w = p.value("w").unwrap().data();
        assert!((w[0] - 0.99).abs() < 1e-8);
        assert!((w[1] - 1.01).abs() < 1e-6);
        assert_eq!(p.step_count(), 1);
    }

    #[test]
    fn decayed_lr_bounds() {
        let mut opt = Adam::new(AdamConfig::with_lr(1e-3).cosine(10));
        let mut p = ParamSet::new();
        p.insert("w", Tensor::zeros(&[1])).unwrap();
        assert_eq!(opt.learning_rate(), 1e-3);
        for _ in 0..15 {
            let lr = opt.learning_rate();
            assert!((0.0..=1e-3).contains(&lr));
            opt.step(&mut p).unwrap();
        }
        assert_eq!(opt.learning_rate(), 0.0);
    }
}
