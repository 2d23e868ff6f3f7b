//! Adam with a reduce-on-plateau learning-rate schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::backbone::ParamStore;
use super::graph::Gradients;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Multiplier applied to the learning rate on a plateau.
    pub decay_factor: f64,
    /// Epochs without improvement before decaying.
    pub decay_patience: usize,
    /// Minimum decrease of the monitored loss that counts as improvement.
    pub decay_min_delta: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            decay_factor: 0.5,
            decay_patience: 5,
            decay_min_delta: 1e-4,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.decay_factor > 0.0
            && self.decay_factor <= 1.0
            && self.decay_min_delta >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid Adam configuration: {self:?}")))
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    cfg: AdamConfig,
    lr: f64,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
    best_monitored: f64,
    bad_epochs: usize,
}

impl AdamState {
    pub fn new(cfg: AdamConfig, params: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let zeros = |t: &super::tensor::Tensor| vec![0.0; t.numel()];
        Ok(Self {
            cfg,
            lr: cfg.lr,
            step: 0,
            first: params.iter().map(|(n, t)| (n.clone(), zeros(t))).collect(),
            second: params.iter().map(|(n, t)| (n.clone(), zeros(t))).collect(),
            best_monitored: f64::INFINITY,
            bad_epochs: 0,
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update. Every parameter needs a gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        for name in self.first.keys() {
            if grads.get(name).is_none() {
                return Err(Error::MissingGradient(name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        let (b1, b2, eps, lr) = (self.cfg.beta1, self.cfg.beta2, self.cfg.epsilon, self.lr);
        for (name, m) in self.first.iter_mut() {
            let v = self.second.get_mut(name).expect("moments share keys");
            let g = grads.get(name).expect("checked above").data();
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::InvalidArgument(format!("parameter `{name}` vanished")))?
                .data_mut();
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Feeds the epoch's validation loss to the plateau schedule. Returns
    /// `true` when the learning rate was decayed.
    pub fn end_epoch(&mut self, monitored_loss: f64) -> bool {
        if monitored_loss < self.best_monitored - self.cfg.decay_min_delta {
            self.best_monitored = monitored_loss;
            self.bad_epochs = 0;
            return false;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.cfg.decay_patience {
            self.lr *= self.cfg.decay_factor;
            self.bad_epochs = 0;
            log::debug!("learning rate decayed to {}", self.lr);
            return true;
        }
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Backbone, Graph, Tensor};

    fn quadratic_store(w: f64) -> (Backbone, ParamStore) {
        // A single scalar parameter stored as a 1x1 weight.
        let bb = Backbone::regressor(1, &[1]);
        let mut p = ParamStore::zeros(&bb).unwrap();
        p.get_mut("layer0.weight").unwrap().data_mut()[0] = w;
        (bb, p)
    }

    fn quadratic_grads(p: &ParamStore) -> Gradients {
        let mut g = Graph::new();
        let names: Vec<String> = p.names().cloned().collect();
        let mut loss = None;
        for n in names {
            let v = g.param(n.clone(), p.get(&n).unwrap());
            if n == "layer0.weight" {
                let sq = g.mul(v, v);
                loss = Some(g.sum(sq));
            }
        }
        g.backward(loss.unwrap()).unwrap()
    }

    #[test]
    fn quadratic_converges() {
        let (_, mut p) = quadratic_store(1.0);
        let cfg = AdamConfig::default();
        let mut adam = AdamState::new(cfg, &p).unwrap();
        for _ in 0..1000 {
            let g = quadratic_grads(&p);
            adam.step(&mut p, &g).unwrap();
        }
        let w = p.get("layer0.weight").unwrap().data()[0];
        assert!(w.abs() < 1e-2, "w = {w}");
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let (_, mut p) = quadratic_store(0.7);
        let before = p.clone();
        let mut adam = AdamState::new(AdamConfig::default(), &p).unwrap();
        let mut grads = Gradients::default();
        for (n, t) in before.iter() {
            grads.insert(n.clone(), Tensor::zeros(t.shape()));
        }
        for _ in 0..3 {
            adam.step(&mut p, &grads).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(adam.steps(), 3);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let (_, mut p) = quadratic_store(0.7);
        let mut adam = AdamState::new(AdamConfig::default(), &p).unwrap();
        let err = adam.step(&mut p, &Gradients::default()).unwrap_err();
        assert!(matches!(err, Error::MissingGradient(_)));
    }

    #[test]
    fn identical_runs_are_identical() {
        let run = || {
            let (_, mut p) = quadratic_store(0.3);
            let mut adam = AdamState::new(AdamConfig::default(), &p).unwrap();
            for _ in 0..50 {
                let g = quadratic_grads(&p);
                adam.step(&mut p, &g).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn plateau_halves_learning_rate() {
        let (_, p) = quadratic_store(0.3);
        let mut adam = AdamState::new(AdamConfig::default(), &p).unwrap();
        assert!(!adam.end_epoch(1.0));
        for _ in 0..4 {
            assert!(!adam.end_epoch(1.0));
        }
        assert!(adam.end_epoch(0.99995));
        assert!((adam.lr() - 0.005).abs() < 1e-15);
        assert!(!adam.end_epoch(0.5));
        assert!((adam.lr() - 0.005).abs() < 1e-15);
    }

    #[test]
    fn invalid_config_rejected() {
        let (_, p) = quadratic_store(0.3);
        let cfg = AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        };
        assert!(AdamState::new(cfg, &p).is_err());
    }
}
