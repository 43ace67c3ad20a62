//! The masked MLP.
//!
//! Every weight tensor (and every batch-norm scale/shift vector) is a
//! [`GatedParam`]: shared values plus one relevance map per task. A forward
//! pass under task `t` multiplies the values element-wise by task `t`'s gate
//! before the layer is applied. Completed tasks keep a hard mask; parameters
//! inside any completed mask are frozen and never receive updates again.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels;
use crate::relevance::{
    memory_footprint, unused_positions, BitMask, FootprintReport, FrozenIndicator, MapInit,
    RelevanceMap,
};
use crate::seed;
use crate::tensor::{matmul, matmul_nt, matmul_tn, softmax_rows, Tensor};

pub type TaskId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Soft gates, batch statistics, running statistics updated.
    Train,
    /// Soft gates with the task's running statistics left untouched.
    TrainFixedStats,
    /// Hard gates and running statistics.
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub batch_norm: bool,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Architecture {
    /// 784 → 100 → 100 → 100 → 10 with batch norm and ReLU after each hidden layer.
    pub fn mnist_mlp() -> Self {
        Self {
            input: 784,
            hidden: vec![100, 100, 100],
            classes: 10,
            batch_norm: true,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut fan_in = self.input;
        for &h in self.hidden.iter().chain(std::iter::once(&self.classes)) {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims
    }

    /// Number of linear-layer weights (batch-norm vectors excluded).
    pub fn linear_weight_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || self.classes < 2 || self.hidden.contains(&0) {
            return Err(Error::Config(format!("degenerate architecture {self:?}")));
        }
        if !(self.bn_eps > 0.0) || !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::Config("batch-norm eps/momentum out of range".into()));
        }
        Ok(())
    }
}

/// A parameter tensor gated element-wise by per-task relevance maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatedParam {
    name: String,
    value: Tensor,
    frozen: FrozenIndicator,
    masks: Vec<BitMask>,
    active: Option<RelevanceMap>,
}

impl GatedParam {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let len = value.len();
        Self {
            name: name.into(),
            value,
            frozen: FrozenIndicator::new(len),
            masks: Vec::new(),
            active: None,
        }
    }

    pub(crate) fn from_parts(
        name: String,
        value: Tensor,
        frozen: FrozenIndicator,
        masks: Vec<BitMask>,
        active: Option<RelevanceMap>,
    ) -> Self {
        Self {
            name,
            value,
            frozen,
            masks,
            active,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    /// Direct access to the values. This bypasses freezing; training code
    /// goes through the optimizer instead.
    pub fn value_mut(&mut self) -> &mut Tensor {
        &mut self.value
    }

    pub fn frozen(&self) -> &FrozenIndicator {
        &self.frozen
    }

    /// Hard masks of completed tasks, indexed by task id.
    pub fn task_masks(&self) -> &[BitMask] {
        &self.masks
    }

    pub fn active_map(&self) -> Option<&RelevanceMap> {
        self.active.as_ref()
    }

    pub fn active_map_mut(&mut self) -> Option<&mut RelevanceMap> {
        self.active.as_mut()
    }

    /// Hard mask for `task`: stored for completed tasks, rounded on the fly
    /// for the task in progress.
    pub fn hard_mask(&self, task: TaskId) -> Result<BitMask> {
        if let Some(m) = self.masks.get(task) {
            return Ok(m.clone());
        }
        match &self.active {
            Some(map) if task == self.masks.len() => Ok(map.binarize()),
            _ => Err(Error::UnknownTask {
                task,
                registered: self.masks.len() + usize::from(self.active.is_some()),
            }),
        }
    }

    fn effective_hard(&self, task: TaskId) -> Result<Tensor> {
        let mask = self.hard_mask(task)?;
        let mut out = self.value.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            if !mask.get(i) {
                *v = 0.0;
            }
        }
        Ok(out)
    }

    /// Soft gates and gated values under the active map.
    fn effective_soft(&self) -> Result<(Tensor, Tensor)> {
        let map = self
            .active
            .as_ref()
            .ok_or_else(|| Error::State(format!("`{}` has no task in progress", self.name)))?;
        let gates = map.gates();
        let eff = self.value.hadamard(&gates)?;
        Ok((eff, gates))
    }

    fn begin_task(&mut self, init: MapInit, beta: f64, seed: u64) -> Result<()> {
        if self.active.is_some() {
            return Err(Error::State(format!("`{}` already has a task in progress", self.name)));
        }
        self.active = Some(RelevanceMap::init(self.value.shape(), init, beta, seed)?);
        Ok(())
    }

    /// Stores the active map's hard mask and freezes it. Returns the number
    /// of newly frozen entries.
    fn finalize(&mut self) -> Result<usize> {
        let map = self
            .active
            .take()
            .ok_or_else(|| Error::State(format!("`{}` has no task in progress", self.name)))?;
        let mask = map.binarize();
        let added = self.frozen.update(&mask)?;
        self.masks.push(mask);
        Ok(added)
    }

    /// Parameter-space and map-space gradients from the gradient of the
    /// gated tensor.
    fn split_gradient(&self, d_eff: &Tensor, gates: &Tensor) -> ParamGrad {
        let map = self.active.as_ref().expect("gradient requires an active map");
        let beta = map.beta();
        let raw = map.raw().data();
        let n = d_eff.len();
        let mut value = vec![0.0; n];
        let mut raw_grad = vec![0.0; n];
        let mut beta_grad = 0.0;
        let (de, g, w) = (d_eff.data(), gates.data(), self.value.data());
        for i in 0..n {
            if !self.frozen.is_frozen(i) {
                value[i] = de[i] * g[i];
            }
            let slope = g[i] * (1.0 - g[i]);
            if !map.is_pruned_entry(i) {
                raw_grad[i] = de[i] * w[i] * beta * slope;
            }
            beta_grad += de[i] * w[i] * slope * (raw[i] - 0.5);
        }
        let shape = d_eff.shape().to_vec();
        ParamGrad {
            value: Tensor::new(shape.clone(), value).expect("shape preserved"),
            raw: Tensor::new(shape, raw_grad).expect("shape preserved"),
            beta: beta_grad,
        }
    }
}

/// Gradient of one [`GatedParam`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    /// Zero wherever the parameter is frozen.
    pub value: Tensor,
    /// Zero wherever the active map entry was pruned.
    pub raw: Tensor,
    pub beta: f64,
}

/// Gradients for every gated parameter, in [`MaskedNetwork::params`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: Vec<ParamGrad>,
}

impl Gradients {
    pub fn add_assign(&mut self, other: &Gradients) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::Dimension {
                op: "gradients add",
                left: vec![self.params.len()],
                right: vec![other.params.len()],
            });
        }
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            a.value.ensure_same_shape(&b.value, "gradients add")?;
            for (x, y) in a.value.data_mut().iter_mut().zip(b.value.data()) {
                *x += y;
            }
            for (x, y) in a.raw.data_mut().iter_mut().zip(b.raw.data()) {
                *x += y;
            }
            a.beta += b.beta;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    fn new(width: usize) -> Self {
        Self {
            mean: vec![0.0; width],
            var: vec![1.0; width],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedLinear {
    pub weight: GatedParam,
}

/// Batch norm whose scale and shift are gated per task and whose running
/// statistics are kept separately for every task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedBatchNorm {
    pub scale: GatedParam,
    pub shift: GatedParam,
    running: Vec<RunningStats>,
    eps: f64,
    momentum: f64,
}

impl MaskedBatchNorm {
    pub fn running(&self, task: TaskId) -> Option<&RunningStats> {
        self.running.get(task)
    }

    pub(crate) fn running_all(&self) -> &[RunningStats] {
        &self.running
    }

    pub(crate) fn set_running_all(&mut self, running: Vec<RunningStats>) {
        self.running = running;
    }
}

struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
    scale_eff: Tensor,
    scale_gates: Tensor,
    shift_gates: Tensor,
    batch_stats: bool,
}

struct LayerCache {
    input: Tensor,
    w_eff: Tensor,
    gates: Tensor,
    bn: Option<BnCache>,
    pre_relu: Option<Tensor>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskedNetwork {
    arch: Architecture,
    linears: Vec<MaskedLinear>,
    norms: Vec<MaskedBatchNorm>,
    completed: usize,
    active: bool,
    #[serde(skip)]
    cache: Option<CacheHolder>,
}

#[derive(Default)]
struct CacheHolder(Vec<LayerCache>);

impl Clone for CacheHolder {
    fn clone(&self) -> Self {
        CacheHolder(Vec::new())
    }
}

impl std::fmt::Debug for CacheHolder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "CacheHolder({} layers)", self.0.len())
    }
}

impl PartialEq for MaskedNetwork {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch
            && self.linears == other.linears
            && self.norms == other.norms
            && self.completed == other.completed
            && self.active == other.active
    }
}

/// Task picked for one sample and the score that won.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskChoice {
    pub task: TaskId,
    pub confidence: f64,
}

impl MaskedNetwork {
    /// Builds a network with uniform `±1/sqrt(fan_in)` weights, unit scales
    /// and zero shifts.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        use rand::Rng;
        arch.validate()?;
        let mut rng = seed::rng(seed, &[seed::TAG_WEIGHT_INIT]);
        let dims = arch.layer_dims();
        let mut linears = Vec::with_capacity(dims.len());
        for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            linears.push(MaskedLinear {
                weight: GatedParam::new(format!("linear{l}.weight"), Tensor::new(vec![fan_out, fan_in], data)?),
            });
        }
        let norms = if arch.batch_norm {
            arch.hidden
                .iter()
                .enumerate()
                .map(|(l, &w)| MaskedBatchNorm {
                    scale: GatedParam::new(format!("bn{l}.scale"), Tensor::full(&[w], 1.0)),
                    shift: GatedParam::new(format!("bn{l}.shift"), Tensor::zeros(&[w])),
                    running: Vec::new(),
                    eps: arch.bn_eps,
                    momentum: arch.bn_momentum,
                })
                .collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            arch,
            linears,
            norms,
            completed: 0,
            active: false,
            cache: None,
        })
    }

    pub(crate) fn from_parts(
        arch: Architecture,
        linears: Vec<MaskedLinear>,
        norms: Vec<MaskedBatchNorm>,
        completed: usize,
        active: bool,
    ) -> Self {
        Self {
            arch,
            linears,
            norms,
            completed,
            active,
            cache: None,
        }
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn linears(&self) -> &[MaskedLinear] {
        &self.linears
    }

    pub(crate) fn norms_mut(&mut self) -> &mut [MaskedBatchNorm] {
        &mut self.norms
    }

    pub fn norms(&self) -> &[MaskedBatchNorm] {
        &self.norms
    }

    /// Number of tasks whose masks are final.
    pub fn completed_tasks(&self) -> usize {
        self.completed
    }

    /// Id of the task currently being trained, if any.
    pub fn active_task(&self) -> Option<TaskId> {
        self.active.then_some(self.completed)
    }

    /// Completed tasks plus the one in progress.
    pub fn registered_tasks(&self) -> usize {
        self.completed + usize::from(self.active)
    }

    /// All gated parameters in canonical order: per layer, the linear weight
    /// followed by that layer's batch-norm scale and shift.
    pub fn params(&self) -> Vec<&GatedParam> {
        let mut out = Vec::new();
        for (l, lin) in self.linears.iter().enumerate() {
            out.push(&lin.weight);
            if let Some(bn) = self.norms.get(l) {
                out.push(&bn.scale);
                out.push(&bn.shift);
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut GatedParam> {
        let mut out = Vec::new();
        let mut norms = self.norms.iter_mut();
        for lin in self.linears.iter_mut() {
            out.push(&mut lin.weight);
            if let Some(bn) = norms.next() {
                out.push(&mut bn.scale);
                out.push(&mut bn.shift);
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value().len()).sum()
    }

    /// Opens a new task with freshly initialized maps on every parameter.
    pub fn begin_task(&mut self, init: MapInit, beta: f64, seed: u64) -> Result<TaskId> {
        if self.active {
            return Err(Error::State("a task is already in progress".into()));
        }
        let task = self.completed;
        for (i, p) in self.params_mut().into_iter().enumerate() {
            p.begin_task(init, beta, seed::derive(seed, &[task as u64, i as u64]))?;
        }
        for bn in &mut self.norms {
            let w = bn.scale.value().len();
            bn.running.push(RunningStats::new(w));
        }
        self.active = true;
        self.cache = None;
        Ok(task)
    }

    /// Prunes the active maps at `mu`; returns the number of zeroed entries.
    pub fn prune_active(&mut self, mu: f64) -> Result<usize> {
        if !self.active {
            return Err(Error::State("no task in progress".into()));
        }
        let mut zeroed = 0;
        for p in self.params_mut() {
            zeroed += p.active_map_mut().expect("active").prune(mu)?;
        }
        Ok(zeroed)
    }

    pub fn active_is_pruned(&self) -> bool {
        self.params()
            .iter()
            .all(|p| p.active_map().is_some_and(RelevanceMap::is_pruned))
    }

    /// Rounds the active maps into hard masks and freezes their parameters.
    pub fn finalize_task(&mut self) -> Result<TaskSummary> {
        if !self.active {
            return Err(Error::State("no task in progress".into()));
        }
        let task = self.completed;
        let mut newly_frozen = 0;
        let mut used = 0;
        for p in self.params_mut() {
            newly_frozen += p.finalize()?;
            used += p.task_masks()[task].count_ones();
        }
        self.completed += 1;
        self.active = false;
        self.cache = None;
        Ok(TaskSummary {
            task,
            used_params: used,
            newly_frozen,
            total_frozen: self.frozen_count(),
        })
    }

    pub fn frozen_count(&self) -> usize {
        self.params().iter().map(|p| p.frozen().count()).sum()
    }

    /// Fraction of linear weights whose gate is zero in every completed task.
    pub fn sparsity(&self) -> Result<f64> {
        if self.completed == 0 {
            return Err(Error::Input("no completed tasks".into()));
        }
        let mut unused = 0;
        for lin in &self.linears {
            unused += unused_positions(lin.weight.task_masks())?;
        }
        Ok(unused as f64 / self.arch.linear_weight_count() as f64)
    }

    /// Storage accounting over all linear weights and completed task masks.
    pub fn footprint(&self) -> Result<FootprintReport> {
        let mut total = FootprintReport {
            tasks: self.completed,
            weight_count: 0,
            weight_bytes: 0,
            mask_bytes: 0,
            removable_weights: 0,
        };
        for lin in &self.linears {
            let r = memory_footprint(lin.weight.task_masks(), lin.weight.value().len())?;
            total.weight_count += r.weight_count;
            total.weight_bytes += r.weight_bytes;
            total.mask_bytes += r.mask_bytes;
            total.removable_weights += r.removable_weights;
        }
        Ok(total)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.arch.input {
            return Err(Error::Dimension {
                op: "forward",
                left: x.shape().to_vec(),
                right: vec![self.arch.input],
            });
        }
        Ok(())
    }

    fn check_task(&self, task: TaskId) -> Result<()> {
        if task >= self.registered_tasks() {
            return Err(Error::UnknownTask {
                task,
                registered: self.registered_tasks(),
            });
        }
        Ok(())
    }

    /// Forward pass under `task`. Training modes require `task` to be the
    /// task in progress and record what [`backward`](Self::backward) needs.
    pub fn forward(&mut self, x: &Tensor, task: TaskId, mode: Mode) -> Result<Tensor> {
        self.check_input(x)?;
        self.check_task(task)?;
        match mode {
            Mode::Eval => {
                self.cache = None;
                self.eval_view(task)?.forward(x)
            }
            Mode::Train | Mode::TrainFixedStats => {
                if self.active_task() != Some(task) {
                    return Err(Error::State(format!(
                        "task {task} is complete and cannot be trained"
                    )));
                }
                self.forward_train(x, task, mode == Mode::Train)
            }
        }
    }

    fn forward_train(&mut self, x: &Tensor, task: TaskId, batch_stats: bool) -> Result<Tensor> {
        let last = self.linears.len() - 1;
        let mut caches = Vec::with_capacity(self.linears.len());
        let mut h = x.clone();
        for l in 0..self.linears.len() {
            let (w_eff, gates) = self.linears[l].weight.effective_soft()?;
            let z = matmul_nt(&h, &w_eff)?;
            if l == last {
                caches.push(LayerCache {
                    input: h,
                    w_eff,
                    gates,
                    bn: None,
                    pre_relu: None,
                });
                h = z;
                break;
            }
            let (y, bn) = match self.norms.get_mut(l) {
                Some(bn) => {
                    let (y, c) = bn_forward_train(bn, z, task, batch_stats)?;
                    (y, Some(c))
                }
                None => (z, None),
            };
            let a = y.map(|v| v.max(0.0));
            caches.push(LayerCache {
                input: h,
                w_eff,
                gates,
                bn,
                pre_relu: Some(y),
            });
            h = a;
        }
        self.cache = Some(CacheHolder(caches));
        Ok(h)
    }

    /// Back-propagates `grad_logits` through the last training forward.
    pub fn backward(&mut self, grad_logits: &Tensor) -> Result<Gradients> {
        let caches = self
            .cache
            .take()
            .ok_or_else(|| Error::State("backward called without a training forward".into()))?
            .0;
        let mut per_layer: Vec<Vec<ParamGrad>> = Vec::with_capacity(caches.len());
        let mut g = grad_logits.clone();
        for (l, c) in caches.iter().enumerate().rev() {
            let mut layer_grads = Vec::new();
            let mut bn_grads = None;
            if let Some(pre) = &c.pre_relu {
                for (gi, &p) in g.data_mut().iter_mut().zip(pre.data()) {
                    if p <= 0.0 {
                        *gi = 0.0;
                    }
                }
                if let Some(bc) = &c.bn {
                    let (dz, d_scale, d_shift) = bn_backward(bc, &g)?;
                    let bn = &self.norms[l];
                    bn_grads = Some((
                        bn.scale.split_gradient(&d_scale, &bc.scale_gates),
                        bn.shift.split_gradient(&d_shift, &bc.shift_gates),
                    ));
                    g = dz;
                }
            }
            let d_weff = matmul_tn(&g, &c.input)?;
            layer_grads.push(self.linears[l].weight.split_gradient(&d_weff, &c.gates));
            if let Some((s, t)) = bn_grads {
                layer_grads.push(s);
                layer_grads.push(t);
            }
            if l > 0 {
                g = matmul(&g, &c.w_eff)?;
            }
            per_layer.push(layer_grads);
        }
        per_layer.reverse();
        Ok(Gradients {
            params: per_layer.into_iter().flatten().collect(),
        })
    }

    /// Frozen, hard-gated view of one task for inference.
    pub fn eval_view(&self, task: TaskId) -> Result<EvalView> {
        self.check_task(task)?;
        let mut layers = Vec::with_capacity(self.linears.len());
        for (l, lin) in self.linears.iter().enumerate() {
            let bn = match self.norms.get(l) {
                Some(bn) => {
                    let stats = &bn.running[task];
                    let scale = bn.scale.effective_hard(task)?;
                    let shift = bn.shift.effective_hard(task)?;
                    let inv: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + bn.eps).sqrt()).collect();
                    // y = scale * (z - mean) * inv + shift, folded to y = a z + b
                    let a: Vec<f64> = scale.data().iter().zip(&inv).map(|(s, i)| s * i).collect();
                    let b: Vec<f64> = shift
                        .data()
                        .iter()
                        .zip(&a)
                        .zip(&stats.mean)
                        .map(|((t, a), m)| t - a * m)
                        .collect();
                    Some((a, b))
                }
                None => None,
            };
            layers.push(EvalLayer {
                weight: lin.weight.effective_hard(task)?,
                affine: bn,
                relu: l + 1 < self.linears.len(),
            });
        }
        Ok(EvalView {
            task,
            input: self.arch.input,
            layers,
        })
    }

    /// Evaluates `x` under every registered task and, per sample, picks the
    /// task with the largest maximum softmax probability. Ties go to the
    /// lowest task id. Returns the choices and the winning logits.
    pub fn task_logit_max(&self, x: &Tensor) -> Result<(Vec<TaskChoice>, Tensor)> {
        self.check_input(x)?;
        let tasks = self.registered_tasks();
        if tasks == 0 {
            return Err(Error::State("no registered tasks".into()));
        }
        let views = (0..tasks).map(|t| self.eval_view(t)).collect::<Result<Vec<_>>>()?;
        let outputs = views.iter().map(|v| v.forward(x)).collect::<Result<Vec<_>>>()?;
        let probs: Vec<Tensor> = outputs.iter().map(softmax_rows).collect();
        let mut choices = Vec::with_capacity(x.rows());
        let mut logits = Tensor::zeros(&[x.rows(), self.arch.classes]);
        for i in 0..x.rows() {
            let mut best = TaskChoice {
                task: 0,
                confidence: f64::NEG_INFINITY,
            };
            for (t, p) in probs.iter().enumerate() {
                let conf = p.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if conf > best.confidence {
                    best = TaskChoice { task: t, confidence: conf };
                }
            }
            logits.row_mut(i).copy_from_slice(outputs[best.task].row(i));
            choices.push(best);
        }
        Ok((choices, logits))
    }
}

impl MaskedNetwork {
    /// Per sample, the task whose first-layer running statistics best fit
    /// the sample's first-layer pre-activations under that task's hard
    /// mask. The score is minus the squared standardized distance, so
    /// `confidence` is at most zero. Needs batch norm.
    pub fn task_bn_fit(&self, x: &Tensor) -> Result<Vec<TaskChoice>> {
        self.check_input(x)?;
        let tasks = self.registered_tasks();
        if tasks == 0 {
            return Err(Error::State("no registered tasks".into()));
        }
        let Some(bn) = self.norms.first() else {
            return Err(Error::State("batch-norm fit needs batch norm".into()));
        };
        let mut best = vec![
            TaskChoice {
                task: 0,
                confidence: f64::NEG_INFINITY,
            };
            x.rows()
        ];
        for t in 0..tasks {
            let z = matmul_nt(x, &self.linears[0].weight.effective_hard(t)?)?;
            let stats = &bn.running[t];
            let inv: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + bn.eps)).collect();
            for (i, b) in best.iter_mut().enumerate() {
                let d: f64 = z
                    .row(i)
                    .iter()
                    .zip(&stats.mean)
                    .zip(&inv)
                    .map(|((z, m), iv)| (z - m) * (z - m) * iv)
                    .sum();
                if -d > b.confidence {
                    *b = TaskChoice { task: t, confidence: -d };
                }
            }
        }
        Ok(best)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task: TaskId,
    /// Parameters inside this task's hard mask.
    pub used_params: usize,
    pub newly_frozen: usize,
    pub total_frozen: usize,
}

struct EvalLayer {
    weight: Tensor,
    affine: Option<(Vec<f64>, Vec<f64>)>,
    relu: bool,
}

/// Inference-only network for one task with hard gates folded in.
pub struct EvalView {
    task: TaskId,
    input: usize,
    layers: Vec<EvalLayer>,
}

impl EvalView {
    pub fn task(&self) -> TaskId {
        self.task
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.input {
            return Err(Error::Dimension {
                op: "forward",
                left: x.shape().to_vec(),
                right: vec![self.input],
            });
        }
        let mut h = x.clone();
        for layer in &self.layers {
            let mut z = matmul_nt(&h, &layer.weight)?;
            let width = z.cols();
            let affine = layer.affine.as_ref();
            let relu = layer.relu;
            kernels::for_each_row(z.data_mut(), width, |_, row| {
                if let Some((a, b)) = affine {
                    for j in 0..row.len() {
                        row[j] = a[j] * row[j] + b[j];
                    }
                }
                if relu {
                    for v in row.iter_mut() {
                        *v = v.max(0.0);
                    }
                }
            });
            h = z;
        }
        Ok(h)
    }
}

fn bn_forward_train(
    bn: &mut MaskedBatchNorm,
    z: Tensor,
    task: TaskId,
    batch_stats: bool,
) -> Result<(Tensor, BnCache)> {
    let (scale_eff, scale_gates) = bn.scale.effective_soft()?;
    let (shift_eff, shift_gates) = bn.shift.effective_soft()?;
    let (b, w) = (z.rows(), z.cols());
    let (mean, var) = if batch_stats {
        let mut mean = vec![0.0; w];
        for i in 0..b {
            for (m, v) in mean.iter_mut().zip(z.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= b as f64);
        let mut var = vec![0.0; w];
        for i in 0..b {
            for ((s, v), m) in var.iter_mut().zip(z.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= b as f64);
        let stats = &mut bn.running[task];
        let unbias = if b > 1 { b as f64 / (b as f64 - 1.0) } else { 1.0 };
        for j in 0..w {
            stats.mean[j] = (1.0 - bn.momentum) * stats.mean[j] + bn.momentum * mean[j];
            stats.var[j] = (1.0 - bn.momentum) * stats.var[j] + bn.momentum * var[j] * unbias;
        }
        (mean, var)
    } else {
        let s = &bn.running[task];
        (s.mean.clone(), s.var.clone())
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + bn.eps).sqrt()).collect();
    let mut xhat = z;
    let mut y = Tensor::zeros(&[b, w]);
    for i in 0..b {
        let xr = xhat.row_mut(i);
        for j in 0..w {
            xr[j] = (xr[j] - mean[j]) * inv_std[j];
        }
        let yr = y.row_mut(i);
        let xr = xhat.row(i);
        for j in 0..w {
            yr[j] = scale_eff.data()[j] * xr[j] + shift_eff.data()[j];
        }
    }
    Ok((
        y,
        BnCache {
            xhat,
            inv_std,
            scale_eff,
            scale_gates,
            shift_gates,
            batch_stats,
        },
    ))
}

/// Returns `(d_input, d_scale_eff, d_shift_eff)`.
fn bn_backward(c: &BnCache, g: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (b, w) = (g.rows(), g.cols());
    let mut d_scale = vec![0.0; w];
    let mut d_shift = vec![0.0; w];
    let mut sum_dx = vec![0.0; w];
    let mut sum_dx_xhat = vec![0.0; w];
    let mut dxhat = Tensor::zeros(&[b, w]);
    for i in 0..b {
        let (gr, xr) = (g.row(i), c.xhat.row(i));
        let dr = dxhat.row_mut(i);
        for j in 0..w {
            d_scale[j] += gr[j] * xr[j];
            d_shift[j] += gr[j];
            dr[j] = gr[j] * c.scale_eff.data()[j];
            sum_dx[j] += dr[j];
            sum_dx_xhat[j] += dr[j] * xr[j];
        }
    }
    let mut dz = dxhat;
    let n = b as f64;
    for i in 0..b {
        let xr = c.xhat.row(i).to_vec();
        let dr = dz.row_mut(i);
        for j in 0..w {
            dr[j] = if c.batch_stats {
                c.inv_std[j] / n * (n * dr[j] - sum_dx[j] - xr[j] * sum_dx_xhat[j])
            } else {
                dr[j] * c.inv_std[j]
            };
        }
    }
    Ok((
        dz,
        Tensor::new(vec![w], d_scale)?,
        Tensor::new(vec![w], d_shift)?,
    ))
}
