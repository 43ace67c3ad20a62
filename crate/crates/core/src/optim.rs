//! Adam with separate learning rates for weights and relevance maps.
//!
//! Entries excluded by a gradient mask (frozen weights, pruned map entries)
//! are skipped outright: neither the parameter nor its moments change.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Gradients, MaskedNetwork};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam hyperparameters {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One bias-corrected Adam update at step `t` (1-based) on the entries for
/// which `trainable(i)` holds.
pub fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    moments: &mut Moments,
    cfg: &AdamConfig,
    t: u64,
    trainable: impl Fn(usize) -> bool,
) {
    debug_assert_eq!(param.len(), grad.len());
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..param.len() {
        if !trainable(i) {
            continue;
        }
        let g = grad[i];
        let m = cfg.beta1 * moments.m[i] + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * moments.v[i] + (1.0 - cfg.beta2) * g * g;
        moments.m[i] = m;
        moments.v[i] = v;
        param[i] -= cfg.lr * (m / bc1) / ((v / bc2).sqrt() + cfg.eps);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub weight_step: u64,
    pub map_step: u64,
    pub weights: Vec<Moments>,
    pub maps: Vec<Moments>,
    pub betas: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    weight_cfg: AdamConfig,
    map_cfg: AdamConfig,
    /// Learning rate for per-map beta; `None` keeps beta fixed.
    beta_lr: Option<f64>,
    state: AdamState,
}

impl Adam {
    pub fn new(net: &MaskedNetwork, weight_cfg: AdamConfig, map_cfg: AdamConfig, beta_lr: Option<f64>) -> Result<Self> {
        weight_cfg.validate()?;
        map_cfg.validate()?;
        let sizes: Vec<usize> = net.params().iter().map(|p| p.value().len()).collect();
        Ok(Self {
            weight_cfg,
            map_cfg,
            beta_lr,
            state: AdamState {
                weight_step: 0,
                map_step: 0,
                weights: sizes.iter().map(|&n| Moments::zeros(n)).collect(),
                maps: sizes.iter().map(|&n| Moments::zeros(n)).collect(),
                betas: vec![(0.0, 0.0); sizes.len()],
            },
        })
    }

    pub(crate) fn from_parts(weight_cfg: AdamConfig, map_cfg: AdamConfig, beta_lr: Option<f64>, state: AdamState) -> Self {
        Self {
            weight_cfg,
            map_cfg,
            beta_lr,
            state,
        }
    }

    pub fn state(&self) -> &AdamState {
        &self.state
    }

    pub fn weight_config(&self) -> &AdamConfig {
        &self.weight_cfg
    }

    pub fn map_config(&self) -> &AdamConfig {
        &self.map_cfg
    }

    pub fn beta_lr(&self) -> Option<f64> {
        self.beta_lr
    }

    /// Clears map moments for a freshly opened task.
    pub fn reset_maps(&mut self) {
        for m in &mut self.state.maps {
            m.m.fill(0.0);
            m.v.fill(0.0);
        }
        self.state.betas.iter_mut().for_each(|b| *b = (0.0, 0.0));
        self.state.map_step = 0;
    }

    /// Applies one update to every gated parameter and its active map.
    pub fn step(&mut self, net: &mut MaskedNetwork, grads: &Gradients) -> Result<()> {
        let params = net.params_mut();
        if params.len() != grads.params.len() {
            return Err(Error::Dimension {
                op: "adam step",
                left: vec![params.len()],
                right: vec![grads.params.len()],
            });
        }
        let next = self.state.weight_step + 1;
        for (p, g) in params.iter().zip(&grads.params) {
            let finite = g.value.is_finite() && g.raw.is_finite() && g.beta.is_finite();
            if !finite {
                return Err(Error::NonFinite {
                    param: p.name().to_string(),
                    step: next,
                });
            }
        }
        self.state.weight_step = next;
        self.state.map_step += 1;
        let (wt, mt) = (self.state.weight_step, self.state.map_step);
        for (i, (p, g)) in params.into_iter().zip(&grads.params).enumerate() {
            let frozen = p.frozen().clone();
            adam_update(
                p.value_mut().data_mut(),
                g.value.data(),
                &mut self.state.weights[i],
                &self.weight_cfg,
                wt,
                |k| !frozen.is_frozen(k),
            );
            let Some(map) = p.active_map_mut() else {
                continue;
            };
            let locked: Vec<bool> = (0..map.raw().len()).map(|k| map.is_pruned_entry(k)).collect();
            adam_update(
                map.raw_mut().data_mut(),
                g.raw.data(),
                &mut self.state.maps[i],
                &self.map_cfg,
                mt,
                |k| !locked[k],
            );
            map.clip();
            if let Some(lr) = self.beta_lr {
                let cfg = AdamConfig { lr, ..self.map_cfg };
                let mut beta = [map.beta()];
                let (m, v) = self.state.betas[i];
                let mut mom = Moments { m: vec![m], v: vec![v] };
                adam_update(&mut beta, &[g.beta], &mut mom, &cfg, mt, |_| true);
                self.state.betas[i] = (mom.m[0], mom.v[0]);
                map.tighten_beta(beta[0]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Architecture;
    use crate::relevance::{MapInit, DEFAULT_BETA};
    use crate::tensor::{softmax_xent, Tensor};

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![0.3, -1.2];
        let mut m = Moments::zeros(2);
        adam_update(&mut p, &[0.0, 0.0], &mut m, &AdamConfig::with_lr(0.002), 1, |_| true);
        assert_eq!(p, vec![0.3, -1.2]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = vec![1.0];
        let mut m = Moments::zeros(1);
        let cfg = AdamConfig::with_lr(0.002);
        adam_update(&mut p, &[1.0], &mut m, &cfg, 1, |_| true);
        // m̂ = 1 and v̂ = 1 after correction, so the step is lr / (1 + eps).
        let want = 1.0 - 0.002 / (1.0 + 1e-8);
        assert!((p[0] - want).abs() < 1e-15);
        assert!((1.0 - p[0] - 0.002).abs() < 1e-10);
    }

    #[test]
    fn masked_entries_keep_parameter_and_moments() {
        let mut p = vec![1.0, 2.0];
        let mut m = Moments::zeros(2);
        let cfg = AdamConfig::with_lr(0.1);
        for t in 1..=5 {
            adam_update(&mut p, &[0.5, 0.5], &mut m, &cfg, t, |i| i == 0);
        }
        assert_eq!(p[1], 2.0);
        assert_eq!((m.m[1], m.v[1]), (0.0, 0.0));
        assert_ne!(p[0], 1.0);
    }

    fn tiny_net() -> MaskedNetwork {
        let arch = Architecture {
            input: 4,
            hidden: vec![3],
            classes: 2,
            batch_norm: true,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        };
        MaskedNetwork::new(arch, 3).unwrap()
    }

    #[test]
    fn frozen_weights_are_bit_identical_across_steps() {
        let mut net = tiny_net();
        net.begin_task(MapInit { mean: 0.6, sd: 0.3 }, DEFAULT_BETA, 1).unwrap();
        net.prune_active(0.05).unwrap();
        net.finalize_task().unwrap();
        let snapshot: Vec<Tensor> = net.params().iter().map(|p| p.value().clone()).collect();
        let frozen: Vec<_> = net.params().iter().map(|p| p.frozen().clone()).collect();
        assert!(frozen.iter().any(|f| f.count() > 0));

        net.begin_task(MapInit { mean: 0.6, sd: 0.3 }, DEFAULT_BETA, 2).unwrap();
        let mut opt = Adam::new(&net, AdamConfig::with_lr(0.05), AdamConfig::with_lr(0.05), Some(0.1)).unwrap();
        let x = Tensor::new(vec![4, 4], (0..16).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        for _ in 0..20 {
            let logits = net.forward(&x, 1, crate::network::Mode::Train).unwrap();
            let (_, g) = softmax_xent(&logits, &[0, 1, 1, 0]).unwrap();
            let grads = net.backward(&g).unwrap();
            opt.step(&mut net, &grads).unwrap();
        }
        for ((p, before), f) in net.params().iter().zip(&snapshot).zip(&frozen) {
            for i in 0..before.len() {
                if f.is_frozen(i) {
                    assert_eq!(p.value().data()[i].to_bits(), before.data()[i].to_bits());
                }
            }
            let map = p.active_map().unwrap();
            assert!(map.raw().data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(map.beta() >= DEFAULT_BETA);
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut net = tiny_net();
        net.begin_task(MapInit::default(), DEFAULT_BETA, 1).unwrap();
        let mut opt = Adam::new(&net, AdamConfig::with_lr(0.01), AdamConfig::with_lr(0.01), None).unwrap();
        let x = Tensor::full(&[2, 4], 0.5);
        let logits = net.forward(&x, 0, crate::network::Mode::Train).unwrap();
        let (_, g) = softmax_xent(&logits, &[0, 1]).unwrap();
        let mut grads = net.backward(&g).unwrap();
        grads.params[1].value.data_mut()[0] = f64::NAN;
        let err = opt.step(&mut net, &grads).unwrap_err();
        match err {
            Error::NonFinite { param, step } => {
                assert_eq!(param, "bn0.scale");
                assert_eq!(step, 1);
            }
            other => panic!("unexpected {other}"),
        }
    }
}
