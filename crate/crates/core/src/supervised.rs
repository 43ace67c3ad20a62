//! Task-by-task training with known task labels.
//!
//! Each task trains its own relevance maps together with the unfrozen
//! weights, prunes the maps once validation loss stops improving, keeps
//! training to the epoch budget, then binarizes and freezes.

use serde::{Deserialize, Serialize};

use crate::data::{TaskStream, TaskView};
use crate::error::{Error, Result};
use crate::network::{Architecture, Gradients, MaskedNetwork, Mode, TaskId, TaskSummary};
use crate::optim::{Adam, AdamConfig};
use crate::record::{Event, RunRecord};
use crate::relevance::{pseudo_round_grad, MapInit, RelevanceMap, DEFAULT_BETA};
use crate::seed;
use crate::tensor::{softmax_xent, Tensor};
use crate::unsupervised::gaussian_regularize;

/// Rows per forward pass during evaluation.
const EVAL_CHUNK: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SparsityKind {
    None,
    /// Sum of raw map values; raw values live in `[0, 1]` so this is the L1 norm.
    L1,
    /// Sum of soft gates, a differentiable count of open gates.
    L0,
}

impl std::str::FromStr for SparsityKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "l1" => Ok(Self::L1),
            "l0" => Ok(Self::L0),
            other => Err(Error::Config(format!("unknown sparsity kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for SparsityKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::L1 => "l1",
            Self::L0 => "l0",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_weights: f64,
    pub lr_maps: f64,
    /// Learning rate for beta; `None` keeps it fixed.
    pub lr_beta: Option<f64>,
    pub mu: f64,
    pub beta: f64,
    pub map_init: MapInit,
    pub sparsity: SparsityKind,
    pub sparsity_coeff: f64,
    /// Weight of the Gaussian-noise logit penalty; zero disables it.
    pub gaussian_coeff: f64,
    pub seed: u64,
    pub patience: usize,
    /// Epoch window in which pruning may trigger, at the reference budget.
    pub prune_window: (usize, usize),
    pub reference_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 128,
            lr_weights: 0.002,
            lr_maps: 0.002,
            lr_beta: None,
            mu: 0.05,
            beta: DEFAULT_BETA,
            map_init: MapInit::default(),
            sparsity: SparsityKind::None,
            sparsity_coeff: 0.0,
            gaussian_coeff: 0.0,
            seed: 0,
            patience: 5,
            prune_window: (20, 80),
            reference_epochs: 250,
        }
    }
}

impl TrainConfig {
    /// The 250-epoch schedule.
    pub fn full_scale() -> Self {
        Self {
            epochs: 250,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be positive");
        }
        if !(self.lr_weights > 0.0 && self.lr_maps > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.lr_beta.is_some_and(|lr| !(lr > 0.0)) {
            return bad("beta learning rate must be positive");
        }
        if !(self.mu > 0.0 && self.mu < 1.0) {
            return bad("mu must lie in (0, 1)");
        }
        if !(self.beta > 0.0) || !(self.map_init.sd >= 0.0) {
            return bad("beta must be positive and the map sd non-negative");
        }
        if !(self.sparsity_coeff >= 0.0) || !(self.gaussian_coeff >= 0.0) {
            return bad("penalty coefficients must be non-negative");
        }
        if self.patience == 0 || self.reference_epochs == 0 || self.prune_window.0 > self.prune_window.1 {
            return bad("patience and prune window must be positive and ordered");
        }
        Ok(())
    }

    /// Prune window scaled from the reference budget to `epochs`, 1-based
    /// and inclusive.
    pub fn scaled_prune_window(&self) -> (usize, usize) {
        let scale = self.epochs as f64 / self.reference_epochs as f64;
        let lo = ((self.prune_window.0 as f64 * scale).round() as usize).clamp(1, self.epochs);
        let hi = ((self.prune_window.1 as f64 * scale).round() as usize).clamp(lo, self.epochs);
        (lo, hi)
    }

    pub fn adam(&self, net: &MaskedNetwork) -> Result<Adam> {
        Adam::new(
            net,
            AdamConfig::with_lr(self.lr_weights),
            AdamConfig::with_lr(self.lr_maps),
            self.lr_beta,
        )
    }

    /// Optimizer for the Gaussian-noise step, with its own moments and both
    /// learning rates scaled by `gaussian_coeff`. `None` when the penalty is
    /// off.
    pub fn noise_adam(&self, net: &MaskedNetwork) -> Result<Option<Adam>> {
        if self.gaussian_coeff == 0.0 {
            return Ok(None);
        }
        Adam::new(
            net,
            AdamConfig::with_lr(self.lr_weights * self.gaussian_coeff),
            AdamConfig::with_lr(self.lr_maps * self.gaussian_coeff),
            None,
        )
        .map(Some)
    }
}

/// Penalty on one map and its gradient with respect to the raw values.
pub fn sparsity_loss(map: &RelevanceMap, kind: SparsityKind, coeff: f64) -> (f64, Tensor) {
    let raw = map.raw();
    match kind {
        SparsityKind::None => (0.0, Tensor::zeros(raw.shape())),
        SparsityKind::L1 => (coeff * raw.sum(), Tensor::full(raw.shape(), coeff)),
        SparsityKind::L0 => {
            let beta = map.beta();
            (
                coeff * map.gates().sum(),
                raw.map(|x| coeff * pseudo_round_grad(x, beta)),
            )
        }
    }
}

/// Adds the sparsity penalty of every active map to `grads`; pruned entries
/// keep a zero gradient.
fn add_sparsity(net: &MaskedNetwork, grads: &mut Gradients, kind: SparsityKind, coeff: f64) -> f64 {
    if kind == SparsityKind::None || coeff == 0.0 {
        return 0.0;
    }
    let mut total = 0.0;
    for (p, g) in net.params().iter().zip(&mut grads.params) {
        let map = p.active_map().expect("active task");
        let (loss, extra) = sparsity_loss(map, kind, coeff);
        total += loss;
        for (i, (dst, add)) in g.raw.data_mut().iter_mut().zip(extra.data()).enumerate() {
            if !map.is_pruned_entry(i) {
                *dst += add;
            }
        }
    }
    total
}

/// One classification step on a labeled batch; returns the mean loss.
pub(crate) fn train_step(
    net: &mut MaskedNetwork,
    opt: &mut Adam,
    x: &Tensor,
    labels: &[usize],
    task: TaskId,
    cfg: &TrainConfig,
) -> Result<f64> {
    let logits = net.forward(x, task, Mode::Train)?;
    let (loss, g) = softmax_xent(&logits, labels)?;
    let mut grads = net.backward(&g)?;
    let penalty = add_sparsity(net, &mut grads, cfg.sparsity, cfg.sparsity_coeff);
    opt.step(net, &grads)?;
    Ok(loss + penalty)
}

/// Mean loss and accuracy of an eval-mode forward under `task`'s hard mask.
pub fn evaluate_view(net: &MaskedNetwork, task: TaskId, view: &TaskView) -> Result<(f64, f64)> {
    if view.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty set".into()));
    }
    let eval = net.eval_view(task)?;
    let (mut loss, mut correct) = (0.0, 0usize);
    let positions: Vec<usize> = (0..view.len()).collect();
    for chunk in positions.chunks(EVAL_CHUNK) {
        let (x, y) = view.batch(chunk);
        let logits = eval.forward(&x)?;
        let (l, _) = softmax_xent(&logits, &y)?;
        loss += l * chunk.len() as f64;
        correct += logits.argmax_rows().iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    let n = view.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Accuracy under `task`'s hard mask.
pub fn evaluate(net: &MaskedNetwork, task: TaskId, view: &TaskView) -> Result<f64> {
    evaluate_view(net, task, view).map(|(_, acc)| acc)
}

/// Accuracy on an in-memory batch.
pub fn evaluate_tensor(net: &MaskedNetwork, task: TaskId, x: &Tensor, labels: &[usize]) -> Result<f64> {
    let logits = net.eval_view(task)?.forward(x)?;
    let correct = logits.argmax_rows().iter().zip(labels).filter(|(p, t)| p == t).count();
    Ok(correct as f64 / labels.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: TaskId,
    pub epochs: Vec<EpochStats>,
    /// 1-based epoch after which the maps were pruned.
    pub pruned_after: usize,
    pub forced_prune: bool,
    pub zeroed: usize,
    pub summary: TaskSummary,
    pub test_accuracy: f64,
}

/// Owns the network and optimizer across a sequence of tasks.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub net: MaskedNetwork,
    pub opt: Adam,
    /// Separate optimizer state for the Gaussian-noise step.
    pub noise_opt: Option<Adam>,
    pub cfg: TrainConfig,
}

impl Trainer {
    pub fn new(arch: Architecture, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let net = MaskedNetwork::new(arch, seed::derive(cfg.seed, &[seed::TAG_WEIGHT_INIT]))?;
        let opt = cfg.adam(&net)?;
        let noise_opt = cfg.noise_adam(&net)?;
        Ok(Self { net, opt, noise_opt, cfg })
    }

    pub fn from_parts(net: MaskedNetwork, opt: Adam, noise_opt: Option<Adam>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if noise_opt.is_some() != (cfg.gaussian_coeff > 0.0) {
            return Err(Error::Config(
                "noise optimizer must be present exactly when gaussian_coeff > 0".into(),
            ));
        }
        Ok(Self { net, opt, noise_opt, cfg })
    }

    /// Trains the next task of `stream` to completion.
    pub fn train_task(&mut self, stream: &TaskStream, record: &mut RunRecord) -> Result<TaskReport> {
        let task = self.net.completed_tasks();
        let data = stream
            .tasks()
            .get(task)
            .ok_or_else(|| Error::Input(format!("stream has no task {task}")))?;
        let cfg = self.cfg.clone();
        self.net.begin_task(
            cfg.map_init,
            cfg.beta,
            seed::derive(cfg.seed, &[seed::TAG_MAP_INIT]),
        )?;
        self.opt.reset_maps();
        if let Some(o) = &mut self.noise_opt {
            o.reset_maps();
        }
        let (lo, hi) = cfg.scaled_prune_window();
        let mut best = f64::INFINITY;
        let mut stale = 0;
        let mut pruned_after = None;
        let mut zeroed = 0;
        let mut epochs = Vec::with_capacity(cfg.epochs);
        let mut noise = seed::rng(cfg.seed, &[seed::TAG_GAUSSIAN, task as u64]);

        for epoch in 0..cfg.epochs {
            let mut loss_sum = 0.0;
            let mut seen = 0usize;
            for batch in stream.epoch_batches(task, epoch) {
                let (x, y) = data.train.batch(&batch);
                let loss = train_step(&mut self.net, &mut self.opt, &x, &y, task, &cfg)?;
                if let Some(o) = &mut self.noise_opt {
                    gaussian_regularize(&mut self.net, o, task, x.rows(), cfg.gaussian_coeff, &mut noise)?;
                }
                loss_sum += loss * y.len() as f64;
                seen += y.len();
            }
            let (val_loss, val_accuracy) = evaluate_view(&self.net, task, &data.val)?;
            if val_loss < best {
                best = val_loss;
                stale = 0;
            } else {
                stale += 1;
            }
            let done = epoch + 1;
            let mut pruned_now = false;
            if pruned_after.is_none() && done >= lo && (stale >= cfg.patience || done >= hi) {
                zeroed = self.net.prune_active(cfg.mu)?;
                pruned_after = Some(done);
                pruned_now = true;
                record.push(Event::Pruned {
                    task,
                    epoch: Some(done),
                    zeroed,
                    forced: false,
                })?;
            }
            let stats = EpochStats {
                epoch,
                train_loss: loss_sum / seen.max(1) as f64,
                val_loss,
                val_accuracy,
            };
            record.push(Event::Epoch {
                task,
                epoch,
                train_loss: stats.train_loss,
                val_loss,
                val_accuracy,
                pruned: pruned_now,
            })?;
            epochs.push(stats);
        }

        let forced_prune = pruned_after.is_none();
        if forced_prune {
            let message = format!("task {task}: no prune trigger within {} epochs, pruning at the end", cfg.epochs);
            log::warn!("{message}");
            record.push(Event::Warning { message })?;
            zeroed = self.net.prune_active(cfg.mu)?;
            record.push(Event::Pruned {
                task,
                epoch: Some(cfg.epochs),
                zeroed,
                forced: true,
            })?;
        }
        let summary = self.net.finalize_task()?;
        record.push(Event::TaskCompleted {
            task,
            used_params: summary.used_params,
            newly_frozen: summary.newly_frozen,
            total_frozen: summary.total_frozen,
            sparsity: self.net.sparsity()?,
        })?;
        let test_accuracy = evaluate(&self.net, task, &data.test)?;
        Ok(TaskReport {
            task,
            epochs,
            pruned_after: pruned_after.unwrap_or(cfg.epochs),
            forced_prune,
            zeroed,
            summary,
            test_accuracy,
        })
    }

    /// Evaluates every completed task on its test set and records the row.
    pub fn evaluate_all(&self, stream: &TaskStream, record: &mut RunRecord) -> Result<Vec<f64>> {
        let done = self.net.completed_tasks();
        if done == 0 {
            return Err(Error::State("no completed task to evaluate".into()));
        }
        let mut row = Vec::with_capacity(done);
        for t in 0..done {
            let acc = evaluate(&self.net, t, &stream.tasks()[t].test)?;
            record.push(Event::Evaluation {
                after_task: done - 1,
                task: t,
                accuracy: acc,
            })?;
            row.push(acc);
        }
        Ok(row)
    }

    /// Trains the remaining tasks of `stream` (at most `limit` in total),
    /// recording an accuracy row after each.
    pub fn run(&mut self, stream: &TaskStream, limit: Option<usize>, record: &mut RunRecord) -> Result<RunReport> {
        let total = limit.unwrap_or(stream.tasks().len()).min(stream.tasks().len());
        let mut report = RunReport::default();
        while self.net.completed_tasks() < total {
            let t = self.train_task(stream, record)?;
            report.tasks.push(t);
            report.accuracy.push(self.evaluate_all(stream, record)?);
        }
        Ok(report)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub tasks: Vec<TaskReport>,
    /// Row `t` holds the test accuracy of tasks `0..=t` after training task `t`.
    pub accuracy: Vec<Vec<f64>>,
}

impl RunReport {
    pub fn final_average(&self) -> Option<f64> {
        let row = self.accuracy.last()?;
        Some(row.iter().sum::<f64>() / row.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prune_window_scales_with_budget() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.scaled_prune_window(), (2, 6));
        assert_eq!(TrainConfig::full_scale().scaled_prune_window(), (20, 80));
        let short = TrainConfig { epochs: 3, ..cfg };
        assert_eq!(short.scaled_prune_window(), (1, 1));
    }

    #[test]
    fn sparsity_none_is_zero() {
        let map = RelevanceMap::init(&[3, 4], MapInit::default(), 80.0, 1).unwrap();
        let (l, g) = sparsity_loss(&map, SparsityKind::None, 0.5);
        assert_eq!(l, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn open_gates_cost_coeff_per_entry() {
        let map = RelevanceMap::from_raw(Tensor::full(&[5, 2], 1.0), 80.0).unwrap();
        let (l1, _) = sparsity_loss(&map, SparsityKind::L1, 0.01);
        let (l0, _) = sparsity_loss(&map, SparsityKind::L0, 0.01);
        assert!((l1 - 0.1).abs() < 1e-12);
        assert!((l0 - 0.1).abs() < 1e-12);
    }

    #[test]
    fn sparsity_gradients_match_finite_differences() {
        let raw = Tensor::new(vec![2, 3], vec![0.45, 0.5, 0.52, 0.3, 0.7, 0.49]).unwrap();
        for kind in [SparsityKind::L1, SparsityKind::L0] {
            let map = RelevanceMap::from_raw(raw.clone(), 20.0).unwrap();
            let (_, g) = sparsity_loss(&map, kind, 0.3);
            for i in 0..raw.len() {
                let h = 1e-6;
                let f = |d: f64| {
                    let mut r = raw.clone();
                    r.data_mut()[i] += d;
                    let m = RelevanceMap::from_raw(r, 20.0).unwrap();
                    sparsity_loss(&m, kind, 0.3).0
                };
                let fd = (f(h) - f(-h)) / (2.0 * h);
                assert!((fd - g.data()[i]).abs() < 1e-4, "{kind} entry {i}: {fd} vs {}", g.data()[i]);
            }
        }
    }

    #[test]
    fn config_validation_rejects_bad_mu() {
        let cfg = TrainConfig {
            mu: 1.0,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
