use serde::{Deserialize, Serialize};

use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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

/// Adam with bias-corrected moments, kept per parameter tensor.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    steps: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, n_params: usize) -> Self {
        Adam {
            cfg,
            steps: 0,
            moments: vec![None; n_params],
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update of every parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Vec<f64>)], lr: f64) {
        self.steps += 1;
        let t = self.steps as i32;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (id, g) in grads {
            let (m, v) = self.moments[id.0].get_or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let theta = store.get_mut(*id).tensor.data_mut();
            for i in 0..g.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                theta[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum LrSchedule {
    /// `factor · d^-0.5 · min(step^-0.5, step · warmup^-1.5)`
    InverseSqrt { factor: f64, warmup: u64 },
    Constant { lr: f64 },
}

impl LrSchedule {
    /// Rate for the 1-based update `step`.
    pub fn rate(&self, step: u64, d_model: usize) -> f64 {
        match *self {
            LrSchedule::InverseSqrt { factor, warmup } => {
                let s = step.max(1) as f64;
                let w = warmup.max(1) as f64;
                factor * (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
            }
            LrSchedule::Constant { lr } => lr,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;
    use crate::tensor::Tensor;

    #[test]
    fn three_steps_match_hand_stepping() {
        // minimise (θ - 3)² from θ = 1 with lr 0.1
        let mut store = ParamStore::new();
        let id = store.register("theta", ParamGroup::Base, Tensor::scalar(1.0)).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), 1);
        let (mut theta, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=3 {
            let g = 2.0 * (store.get(id).tensor.data()[0] - 3.0);
            adam.step(&mut store, &[(id, vec![g])], 0.1);
            let gh = 2.0 * (theta - 3.0);
            m = 0.9 * m + 0.1 * gh;
            v = 0.999 * v + 0.001 * gh * gh;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            theta -= 0.1 * mh / (vh.sqrt() + 1e-8);
            assert!((store.get(id).tensor.data()[0] - theta).abs() <= 1e-12);
        }
        // the first step of Adam moves by almost exactly lr
        let mut store = ParamStore::new();
        let id = store.register("theta", ParamGroup::Base, Tensor::scalar(1.0)).unwrap();
        Adam::new(AdamConfig::default(), 1).step(&mut store, &[(id, vec![-4.0])], 0.1);
        assert!((store.get(id).tensor.data()[0] - 1.1).abs() < 1e-8);
    }

    #[test]
    fn inverse_sqrt_peaks_at_warmup() {
        let s = LrSchedule::InverseSqrt { factor: 1.0, warmup: 100 };
        let peak = s.rate(100, 64);
        assert!((peak - 0.125 * 0.1).abs() < 1e-15);
        assert!(s.rate(50, 64) < peak && s.rate(400, 64) < peak);
        assert!((s.rate(400, 64) - 0.125 / 20.0).abs() < 1e-15);
        assert_eq!(LrSchedule::Constant { lr: 0.3 }.rate(9, 64), 0.3);
    }
}
