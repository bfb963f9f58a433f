//! Adam with per-parameter moment slots keyed by parameter path.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Param;
use crate::network::Network;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::config("Adam betas must be in [0, 1)"));
        }
        if self.eps <= 0.0 {
            return Err(Error::config("Adam eps must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    slots: HashMap<String, (Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            t: 0,
            slots: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Update the body and the listed heads from their accumulated gradients.
    /// Heads not listed keep their weights and moments untouched.
    pub fn step(&mut self, net: &mut Network, heads: &[usize]) {
        self.t += 1;
        let c = self.cfg;
        let t = self.t as i32;
        let lr_t = (c.lr * (1.0 - c.beta2.powi(t)).sqrt() / (1.0 - c.beta1.powi(t))) as f32;
        let (b1, b2, eps) = (c.beta1 as f32, c.beta2 as f32, c.eps as f32);
        let slots = &mut self.slots;
        net.visit_selected_mut(heads, &mut |name: &str, p: &mut Param| {
            if !p.trainable {
                return;
            }
            let (m, v) = slots
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; p.value.len()], vec![0.0; p.value.len()]));
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                p.value[i] -= lr_t * m[i] / (v[i].sqrt() + eps);
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{BodySpec, HeadSpec};
    use crate::rng::stream;

    #[test]
    fn first_step_moves_each_weight_by_about_lr() {
        let spec = BodySpec {
            n_fil: 2,
            depth: 1,
            dropout_rate: 0.0,
            input_size: 8,
        };
        let mut rng = stream(0, "init");
        let mut net = Network::build(spec, &mut rng).unwrap();
        net.attach_head(HeadSpec::new(0, &[1]), &mut rng).unwrap();
        net.attach_head(HeadSpec::new(1, &[2]), &mut rng).unwrap();
        net.visit_params_mut(&mut |_: &str, p: &mut Param| p.grad.iter_mut().for_each(|g| *g = 0.5));
        let before = net.named_params();
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut net, &[1]);
        for ((name, a), (_, b)) in before.iter().zip(net.named_params()) {
            let moved = a.iter().zip(&b).any(|(x, y)| x != y);
            if name.starts_with("head0") || name.contains("running") {
                assert!(!moved, "{name} moved");
            } else {
                for (x, y) in a.iter().zip(&b) {
                    assert!(((x - y) - 1e-3).abs() < 1e-6, "{name}: {x} -> {y}");
                }
            }
        }
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(AdamConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(AdamConfig { beta1: 1.0, ..Default::default() }.validate().is_err());
        AdamConfig::default().validate().unwrap();
    }
}
