//! Training on a label-free task stream.
//!
//! A detector watches the mean of `-log max softmax` per batch. A lagged
//! pair of windows feeds Welch's t-test; a significant rise marks a new
//! task. Samples that an already finished task predicts confidently and
//! correctly are filtered out before training. After each classification step a second
//! step pushes logits on Gaussian noise towards zero, which keeps finished
//! masks unconfident on data they never saw.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::{StreamBatch, TaskStream, TaskView};
use crate::error::{Error, Result};
use crate::network::{EvalView, MaskedNetwork, Mode, TaskId};
use crate::optim::Adam;
use crate::record::{Event, RunRecord};
use crate::seed;
use crate::supervised::{evaluate, train_step, TrainConfig};
use crate::tensor::{l2_to_zero, neg_log_max_prob, softmax_rows, Tensor};

/// Mean of `-log max softmax` over the rows of `logits`.
pub fn novelty_stat(logits: &Tensor) -> f64 {
    let v = neg_log_max_prob(logits);
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Welch's t statistic `(mean(a) - mean(b)) / se` with Welch–Satterthwaite
/// degrees of freedom. `None` when a sample has fewer than two values or
/// both variances vanish.
pub fn welch_t(a: &[f64], b: &[f64]) -> Option<WelchResult> {
    if a.len() < 2 || b.len() < 2 {
        return None;
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (qa, qb) = (va / na, vb / nb);
    let se2 = qa + qb;
    if !(se2 > 0.0) {
        return if ma == mb {
            Some(WelchResult {
                t: 0.0,
                df: na + nb - 2.0,
                p: 1.0,
            })
        } else {
            None
        };
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (qa * qa / (na - 1.0) + qb * qb / (nb - 1.0));
    let p = two_sided_p(t, df);
    Some(WelchResult { t, df, p })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WelchResult {
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
    (m, v)
}

fn two_sided_p(t: f64, df: f64) -> f64 {
    if t == 0.0 {
        return 1.0;
    }
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    (2.0 * dist.cdf(-t.abs())).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Length of both the reference and the current window, in batches.
    pub window: usize,
    pub p_threshold: f64,
    /// Minimum batches between a reset and the next detection.
    pub dwell: usize,
    /// Minimum rise of the current window's mean over the reference mean,
    /// in nats. Late in training the statistic has so little spread that
    /// harmless wobbles pass the t-test alone.
    pub min_rise: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            window: 20,
            p_threshold: 1e-5,
            dwell: 40,
            min_rise: 0.25,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 2 || !(self.p_threshold > 0.0 && self.p_threshold < 1.0) || !(self.min_rise >= 0.0) {
            return Err(Error::Config(format!("invalid detector settings {self:?}")));
        }
        Ok(())
    }
}

/// Sliding reference and current windows over the novelty statistic. The
/// reference window holds the `window` values just before the current one.
#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    cfg: DetectorConfig,
    history: VecDeque<f64>,
    since_reset: usize,
    last: Option<WelchResult>,
}

impl Detector {
    pub fn new(cfg: DetectorConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            history: VecDeque::with_capacity(2 * cfg.window),
            since_reset: 0,
            last: None,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    /// Result of the most recent test, if both windows were full at that push.
    pub fn last_test(&self) -> Option<WelchResult> {
        self.last
    }

    pub fn since_reset(&self) -> usize {
        self.since_reset
    }

    /// Clears both windows and the dwell counter; the last test result is kept.
    pub fn reset(&mut self) {
        self.history.clear();
        self.since_reset = 0;
    }

    /// Pushes one statistic; true when a task switch is detected, after
    /// which the windows and dwell counter start over.
    pub fn push(&mut self, stat: f64) -> bool {
        let w = self.cfg.window;
        self.history.push_back(stat);
        if self.history.len() > 2 * w {
            self.history.pop_front();
        }
        self.since_reset += 1;
        self.last = None;
        if self.history.len() < 2 * w {
            return false;
        }
        let (reference, current): (Vec<f64>, Vec<f64>) = {
            let all: Vec<f64> = self.history.iter().copied().collect();
            (all[..w].to_vec(), all[w..].to_vec())
        };
        let Some(res) = welch_t(&current, &reference) else {
            return false;
        };
        self.last = Some(res);
        let rise = mean_var(&current).0 - mean_var(&reference).0;
        let fire = self.since_reset >= self.cfg.dwell
            && res.t > 0.0
            && res.p < self.cfg.p_threshold
            && rise >= self.cfg.min_rise;
        if fire {
            self.reset();
        }
        fire
    }
}

/// Hard-mask views of every finished task, used to claim known samples.
pub struct TaskFilter {
    views: Vec<EvalView>,
    tau: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilterOutcome {
    pub retained: Vec<usize>,
    /// Rows claimed by each finished task.
    pub claimed: Vec<Vec<usize>>,
}

impl TaskFilter {
    pub fn new(net: &MaskedNetwork, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::Config(format!("tau {tau} outside (0, 1)")));
        }
        let views = (0..net.completed_tasks())
            .map(|t| net.eval_view(t))
            .collect::<Result<_>>()?;
        Ok(Self { views, tau })
    }

    pub fn tasks(&self) -> usize {
        self.views.len()
    }

    /// A row is claimed by the finished task most confident about it, if
    /// that confidence exceeds tau; otherwise it is retained.
    pub fn apply(&self, x: &Tensor) -> Result<FilterOutcome> {
        self.claim(x, None)
    }

    /// Like [`apply`](Self::apply), but a task only claims rows it also
    /// labels correctly. A finished task sees few classes and is confident
    /// about nearly any input, so confidence alone hands it most of a new
    /// task's samples.
    pub fn apply_labeled(&self, x: &Tensor, labels: &[usize]) -> Result<FilterOutcome> {
        if labels.len() != x.rows() {
            return Err(Error::Dimension {
                op: "apply_labeled",
                left: vec![x.rows()],
                right: vec![labels.len()],
            });
        }
        self.claim(x, Some(labels))
    }

    fn claim(&self, x: &Tensor, labels: Option<&[usize]>) -> Result<FilterOutcome> {
        let n = x.rows();
        let mut best: Vec<Option<(TaskId, f64)>> = vec![None; n];
        for (t, view) in self.views.iter().enumerate() {
            let probs = softmax_rows(&view.forward(x)?);
            for (i, slot) in best.iter_mut().enumerate() {
                let row = probs.row(i);
                let (arg, conf) = row
                    .iter()
                    .copied()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |a, (k, p)| if p > a.1 { (k, p) } else { a });
                let known = labels.is_none_or(|l| l[i] == arg);
                if known && conf > self.tau && slot.is_none_or(|(_, c)| conf > c) {
                    *slot = Some((t, conf));
                }
            }
        }
        let mut out = FilterOutcome {
            retained: Vec::new(),
            claimed: vec![Vec::new(); self.views.len()],
        };
        for (i, b) in best.into_iter().enumerate() {
            match b {
                Some((t, _)) => out.claimed[t].push(i),
                None => out.retained.push(i),
            }
        }
        Ok(out)
    }
}

/// Splits `x` into rows kept for training and rows claimed by finished tasks.
pub fn filter_batch(net: &MaskedNetwork, x: &Tensor, tau: f64) -> Result<FilterOutcome> {
    TaskFilter::new(net, tau)?.apply(x)
}

/// Draws `rows` standard-normal inputs, penalizes `coeff * ||logits||^2 / rows`
/// under the active task's soft mask and takes a step with `opt`, which
/// should keep moments apart from the classification optimizer. Running
/// batch-norm statistics are left alone.
pub fn gaussian_regularize<R: Rng>(
    net: &mut MaskedNetwork,
    opt: &mut Adam,
    task: TaskId,
    rows: usize,
    coeff: f64,
    rng: &mut R,
) -> Result<f64> {
    let d = net.architecture().input;
    let data: Vec<f64> = (0..rows * d).map(|_| rng.sample(StandardNormal)).collect();
    let x = Tensor::new(vec![rows, d], data)?;
    let logits = net.forward(&x, task, Mode::TrainFixedStats)?;
    let (l2, grad) = l2_to_zero(&logits);
    let scale = coeff / rows as f64;
    let grads = net.backward(&grad.map(|g| g * scale))?;
    opt.step(net, &grads)?;
    Ok(l2 * scale)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnsupervisedConfig {
    pub train: TrainConfig,
    pub detector: DetectorConfig,
    pub tau: f64,
    /// Detections beyond this many tasks abort the run.
    pub max_tasks: usize,
    /// Detector windows to look back on a detection; 0 keeps the finished
    /// task exactly as it stood when the detector fired.
    pub rollback: usize,
}

impl Default for UnsupervisedConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                gaussian_coeff: 0.1,
                ..TrainConfig::default()
            },
            detector: DetectorConfig::default(),
            tau: 0.95,
            max_tasks: 20,
            rollback: 2,
        }
    }
}

impl UnsupervisedConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.detector.validate()?;
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!("tau {} outside (0, 1)", self.tau)));
        }
        if self.max_tasks == 0 {
            return Err(Error::Config("max_tasks must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionEvent {
    pub batch: usize,
    pub p_value: f64,
    pub t_stat: f64,
    pub true_task: TaskId,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EstimatedTask {
    pub batches: usize,
    pub claimed: usize,
    /// Batches trained under this task, counted by dominant true task.
    pub true_task_batches: Vec<usize>,
}

impl EstimatedTask {
    pub fn majority_true_task(&self) -> TaskId {
        let mut best = 0;
        for (t, &c) in self.true_task_batches.iter().enumerate() {
            if c > self.true_task_batches[best] {
                best = t;
            }
        }
        best
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UnsupervisedReport {
    pub detections: Vec<DetectionEvent>,
    pub boundaries: Vec<usize>,
    pub estimated: Vec<EstimatedTask>,
    /// Test accuracy per true task, under the estimated task mapped to it.
    pub accuracy: Vec<f64>,
    pub novelty: Vec<f64>,
}

impl UnsupervisedReport {
    pub fn mean_accuracy(&self) -> f64 {
        self.accuracy.iter().sum::<f64>() / self.accuracy.len().max(1) as f64
    }

    /// Estimated task whose mask serves true task `t`: the one that trained
    /// the most batches dominated by `t`.
    pub fn task_for(&self, t: TaskId) -> Option<TaskId> {
        let mut best: Option<(TaskId, usize)> = None;
        for (e, est) in self.estimated.iter().enumerate() {
            let c = est.true_task_batches.get(t).copied().unwrap_or(0);
            if c > 0 && best.is_none_or(|(_, bc)| c > bc) {
                best = Some((e, c));
            }
        }
        best.map(|(e, _)| e)
    }
}

fn close_task(net: &mut MaskedNetwork, mu: f64, record: &mut RunRecord) -> Result<()> {
    let task = net.active_task().expect("task in progress");
    let zeroed = net.prune_active(mu)?;
    record.push(Event::Pruned {
        task,
        epoch: None,
        zeroed,
        forced: false,
    })?;
    let summary = net.finalize_task()?;
    record.push(Event::TaskCompleted {
        task,
        used_params: summary.used_params,
        newly_frozen: summary.newly_frozen,
        total_frozen: summary.total_frozen,
        sparsity: net.sparsity()?,
    })?;
    Ok(())
}

/// Network, optimizer and bookkeeping as they stood before stream batch
/// `batch` was trained.
struct Snapshot {
    batch: usize,
    net: MaskedNetwork,
    opt: Adam,
    noise_opt: Option<Adam>,
    estimated: EstimatedTask,
}

/// Filters one stream batch and, unless everything was claimed, trains the
/// task in progress on what is left.
#[allow(clippy::too_many_arguments)]
fn train_batch(
    net: &mut MaskedNetwork,
    opt: &mut Adam,
    noise_opt: &mut Option<Adam>,
    filter: &TaskFilter,
    batch: &StreamBatch,
    task: TaskId,
    tc: &TrainConfig,
    noise: &mut impl Rng,
    est: &mut EstimatedTask,
) -> Result<()> {
    let outcome = filter.apply_labeled(&batch.x, &batch.labels)?;
    est.claimed += outcome.claimed.iter().map(Vec::len).sum::<usize>();
    if outcome.retained.is_empty() {
        return Ok(());
    }
    let x = batch.x.select_rows(&outcome.retained);
    let y: Vec<usize> = outcome.retained.iter().map(|&r| batch.labels[r]).collect();
    train_step(net, opt, &x, &y, task, tc)?;
    if let Some(o) = noise_opt {
        gaussian_regularize(net, o, task, x.rows(), tc.gaussian_coeff, noise)?;
    }
    est.batches += 1;
    est.true_task_batches[batch.dominant_task()] += 1;
    Ok(())
}

/// Runs the whole stream without task labels. The network must have no
/// task in progress; tasks it already finished act as filters.
///
/// A detection arrives some batches after the real switch. With
/// `cfg.rollback` above zero the finished task is restored to a snapshot
/// taken at least that many detector windows earlier, and the batches seen
/// since then train the new task instead.
pub fn run_unsupervised(
    net: &mut MaskedNetwork,
    opt: &mut Adam,
    stream: &TaskStream,
    cfg: &UnsupervisedConfig,
    record: &mut RunRecord,
) -> Result<UnsupervisedReport> {
    cfg.validate()?;
    let tc = &cfg.train;
    let n_true = stream.tasks().len();
    let schedule = stream.schedule(tc.epochs)?;
    let first = net.completed_tasks();
    let map_seed = seed::derive(tc.seed, &[seed::TAG_MAP_INIT]);
    let mut task = net.begin_task(tc.map_init, tc.beta, map_seed)?;
    opt.reset_maps();
    let mut noise_opt = tc.noise_adam(net)?;
    let mut detector = Detector::new(cfg.detector)?;
    let mut filter = TaskFilter::new(net, cfg.tau)?;
    let mut noise = seed::rng(tc.seed, &[seed::TAG_GAUSSIAN]);
    let fresh = || EstimatedTask {
        true_task_batches: vec![0; n_true],
        ..Default::default()
    };
    let mut report = UnsupervisedReport {
        boundaries: schedule.boundaries.clone(),
        estimated: vec![fresh()],
        ..Default::default()
    };
    let lookback = cfg.rollback * cfg.detector.window;
    let mut snapshots: VecDeque<Snapshot> = VecDeque::new();
    let mut task_start = 0;

    record.push(Event::StreamPlan {
        batches: schedule.batches.len(),
        boundaries: schedule.boundaries.clone(),
        window: cfg.detector.window,
    })?;
    for (i, slots) in schedule.batches.iter().enumerate() {
        let batch = stream.materialize(i, slots);
        if lookback > 0 && (i - task_start) % cfg.detector.window == 0 {
            snapshots.push_back(Snapshot {
                batch: i,
                net: net.clone(),
                opt: opt.clone(),
                noise_opt: noise_opt.clone(),
                estimated: report.estimated[task - first].clone(),
            });
            while snapshots.len() > 1 && snapshots[1].batch + lookback <= i {
                snapshots.pop_front();
            }
        }
        let retained = filter.apply_labeled(&batch.x, &batch.labels)?.retained;
        if !retained.is_empty() {
            let x = batch.x.select_rows(&retained);
            let stat = novelty_stat(&net.forward(&x, task, Mode::Eval)?);
            report.novelty.push(stat);
            if detector.push(stat) {
                let estimated = task + 2 - first;
                if estimated > cfg.max_tasks {
                    return Err(Error::RunawayDetection {
                        count: estimated,
                        limit: cfg.max_tasks,
                    });
                }
                let test = detector.last_test().expect("a detection follows a test");
                let replay_from = match snapshots.pop_front() {
                    Some(snap) => {
                        *net = snap.net;
                        *opt = snap.opt;
                        noise_opt = snap.noise_opt;
                        report.estimated[task - first] = snap.estimated;
                        snap.batch
                    }
                    None => i,
                };
                snapshots.clear();
                task_start = replay_from;
                close_task(net, tc.mu, record)?;
                task = net.begin_task(tc.map_init, tc.beta, map_seed)?;
                opt.reset_maps();
                if let Some(o) = &mut noise_opt {
                    o.reset_maps();
                }
                filter = TaskFilter::new(net, cfg.tau)?;
                let ev = DetectionEvent {
                    batch: i,
                    p_value: test.p,
                    t_stat: test.t,
                    true_task: batch.dominant_task(),
                };
                record.push(Event::Detection {
                    batch: i,
                    p_value: ev.p_value,
                    t_stat: ev.t_stat,
                    estimated_tasks: task + 1 - first,
                    true_task: ev.true_task,
                    rolled_back: i - replay_from,
                })?;
                report.detections.push(ev);
                report.estimated.push(fresh());
                for j in replay_from..i {
                    let earlier = stream.materialize(j, &schedule.batches[j]);
                    let est = &mut report.estimated[task - first];
                    train_batch(net, opt, &mut noise_opt, &filter, &earlier, task, tc, &mut noise, est)?;
                }
            }
        }
        let est = &mut report.estimated[task - first];
        train_batch(net, opt, &mut noise_opt, &filter, &batch, task, tc, &mut noise, est)?;
    }
    close_task(net, tc.mu, record)?;

    for (e, est) in report.estimated.iter().enumerate() {
        record.push(Event::StreamTask {
            estimated: first + e,
            batches: est.batches,
            claimed: est.claimed,
            majority_true_task: est.majority_true_task(),
        })?;
    }
    for t in 0..n_true {
        let acc = match report.task_for(t) {
            Some(e) => evaluate(net, first + e, &stream.tasks()[t].test)?,
            None => 0.0,
        };
        record.push(Event::Evaluation {
            after_task: n_true - 1,
            task: t,
            accuracy: acc,
        })?;
        report.accuracy.push(acc);
    }
    Ok(report)
}

/// Rule for picking a sample's task at test time.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskScore {
    /// Largest maximum softmax probability under the task's hard mask.
    #[default]
    Confidence,
    /// Closest fit of first-layer pre-activations to the task's running
    /// batch-norm statistics ([`MaskedNetwork::task_bn_fit`]).
    BatchNormFit,
}

/// Task whose hard mask gives the most confident prediction, per row.
pub fn infer_task(net: &MaskedNetwork, x: &Tensor) -> Result<Vec<TaskId>> {
    infer_task_by(net, x, TaskScore::Confidence)
}

pub fn infer_task_by(net: &MaskedNetwork, x: &Tensor, score: TaskScore) -> Result<Vec<TaskId>> {
    let choices = match score {
        TaskScore::Confidence => net.task_logit_max(x)?.0,
        TaskScore::BatchNormFit => net.task_bn_fit(x)?,
    };
    Ok(choices.iter().map(|c| c.task).collect())
}

/// Shuffled pool of every task's test set; returns the confusion matrix
/// `[true][inferred]`.
pub fn task_inference_confusion(
    net: &MaskedNetwork,
    tests: &[&TaskView],
    seed: u64,
    score: TaskScore,
) -> Result<Vec<Vec<usize>>> {
    use rand::seq::SliceRandom;
    let k = net.completed_tasks();
    let mut pool: Vec<(TaskId, usize)> = tests
        .iter()
        .enumerate()
        .flat_map(|(t, v)| (0..v.len()).map(move |p| (t, p)))
        .collect();
    pool.shuffle(&mut seed::rng(seed, &[seed::TAG_POOL]));
    let mut confusion = vec![vec![0usize; k.max(tests.len())]; tests.len()];
    for chunk in pool.chunks(1000) {
        let mut rows = Vec::with_capacity(chunk.len());
        for &(t, p) in chunk {
            let (x, _) = tests[t].batch(&[p]);
            rows.push(x.into_data());
        }
        let x = Tensor::from_rows(&rows)?;
        for (&(t, _), inferred) in chunk.iter().zip(infer_task_by(net, &x, score)?) {
            confusion[t][inferred] += 1;
        }
    }
    Ok(confusion)
}

/// Fraction of the confusion matrix on its diagonal.
pub fn confusion_accuracy(confusion: &[Vec<usize>]) -> f64 {
    let total: usize = confusion.iter().flatten().sum();
    let diag: usize = confusion.iter().enumerate().map(|(i, r)| r.get(i).copied().unwrap_or(0)).sum();
    diag as f64 / total.max(1) as f64
}
