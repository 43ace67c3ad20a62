//! Checks shared by the focused test files and the acceptance run.

#![allow(dead_code)]

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use relmap::network::{Architecture, MaskedNetwork, Mode};
use relmap::relevance::{hard_gate, pseudo_round, sparsity, BitMask, FrozenIndicator, MapInit, RelevanceMap};
use relmap::tensor::{softmax_xent, Tensor};
use relmap::unsupervised::{Detector, DetectorConfig};

// ---- gradient check ----

const H: f64 = 1e-6;
pub const GRAD_REL_TOL: f64 = 1e-4;
/// Absolute floor for gradients that vanish because a gate is saturated.
const ABS_FLOOR: f64 = 1e-8;

struct Case {
    net: MaskedNetwork,
    x: Tensor,
    labels: Vec<usize>,
    task: usize,
}

fn case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = Architecture {
        input: rng.random_range(3..7),
        hidden: vec![rng.random_range(2..6), rng.random_range(2..6)],
        classes: rng.random_range(2..5),
        batch_norm: rng.random_bool(0.5),
        bn_eps: 1e-5,
        bn_momentum: 0.1,
    };
    let mut net = MaskedNetwork::new(arch.clone(), seed).unwrap();
    let beta = if rng.random_bool(0.5) { 8.0 } else { 80.0 };
    let init = MapInit { mean: 0.5, sd: 0.1 };
    // Half the cases train under a second task so that frozen entries exist.
    if rng.random_bool(0.5) {
        net.begin_task(MapInit { mean: 0.45, sd: 0.2 }, beta, seed).unwrap();
        net.finalize_task().unwrap();
    }
    // Zero shifts with a fully gated-off scale would sit every row exactly
    // on the ReLU kink, where the loss has no derivative.
    for param in net.params_mut() {
        if param.name().contains("bn") {
            for v in param.value_mut().data_mut() {
                *v += rng.random_range(0.2..0.6) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            }
        }
    }
    let task = net.begin_task(init, beta, seed + 1).unwrap();
    if rng.random_bool(0.3) {
        net.prune_active(0.45).unwrap();
    }
    let b = rng.random_range(3..8);
    let x = Tensor::new(
        vec![b, arch.input],
        (0..b * arch.input).map(|_| rng.random_range(-1.5..1.5)).collect(),
    )
    .unwrap();
    let labels = (0..b).map(|_| rng.random_range(0..arch.classes)).collect();
    Case { net, x, labels, task }
}

fn loss(c: &mut Case) -> f64 {
    let logits = c.net.forward(&c.x, c.task, Mode::Train).unwrap();
    softmax_xent(&logits, &c.labels).unwrap().0
}

fn close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= GRAD_REL_TOL * analytic.abs().max(numeric.abs()) + ABS_FLOOR
}

#[derive(Clone, Copy)]
enum Target {
    Value,
    Raw,
}

fn perturb(c: &mut Case, p: usize, i: usize, target: Target, delta: f64) {
    let mut params = c.net.params_mut();
    match target {
        Target::Value => params[p].value_mut().data_mut()[i] += delta,
        Target::Raw => params[p].active_map_mut().unwrap().raw_mut().data_mut()[i] += delta,
    }
}

/// Result of comparing back-propagated gradients with central differences.
#[derive(Debug, Default)]
pub struct GradReport {
    /// Entries compared against finite differences.
    pub checked: usize,
    /// Frozen or pruned entries whose gradient had to be exactly zero.
    pub masked: usize,
    pub failures: Vec<String>,
}

/// Weight and raw-map gradients of the random network for each seed.
pub fn gradient_check(seeds: std::ops::Range<u64>) -> GradReport {
    let mut report = GradReport::default();
    for seed in seeds {
        let mut c = case(seed);
        let logits = c.net.forward(&c.x, c.task, Mode::Train).unwrap();
        let (_, g) = softmax_xent(&logits, &c.labels).unwrap();
        let grads = c.net.backward(&g).unwrap();
        for p in 0..c.net.params().len() {
            let (len, frozen, pruned, name) = {
                let param = &c.net.params()[p];
                let map = param.active_map().unwrap();
                let len = param.value().len();
                (
                    len,
                    (0..len).map(|i| param.frozen().is_frozen(i)).collect::<Vec<_>>(),
                    (0..len).map(|i| map.is_pruned_entry(i)).collect::<Vec<_>>(),
                    param.name().to_string(),
                )
            };
            for i in 0..len {
                for target in [Target::Value, Target::Raw] {
                    let (analytic, masked, kind) = match target {
                        Target::Value => (grads.params[p].value.data()[i], frozen[i], "value"),
                        Target::Raw => (grads.params[p].raw.data()[i], pruned[i], "raw"),
                    };
                    if masked {
                        report.masked += 1;
                        if analytic != 0.0 {
                            report
                                .failures
                                .push(format!("seed {seed} {name}[{i}] {kind}: masked entry has gradient {analytic:e}"));
                        }
                        continue;
                    }
                    perturb(&mut c, p, i, target, H);
                    let up = loss(&mut c);
                    perturb(&mut c, p, i, target, -2.0 * H);
                    let down = loss(&mut c);
                    perturb(&mut c, p, i, target, H);
                    let numeric = (up - down) / (2.0 * H);
                    report.checked += 1;
                    if !close(analytic, numeric) {
                        report.failures.push(format!(
                            "seed {seed} {name}[{i}] {kind}: analytic {analytic:e} numeric {numeric:e}"
                        ));
                    }
                }
            }
        }
    }
    report
}

/// Gradient of the loss with respect to each map's temperature.
pub fn beta_gradient_check(seeds: std::ops::Range<u64>) -> Vec<String> {
    let mut failures = Vec::new();
    for seed in seeds {
        let mut c = case(seed);
        let logits = c.net.forward(&c.x, c.task, Mode::Train).unwrap();
        let (_, g) = softmax_xent(&logits, &c.labels).unwrap();
        let grads = c.net.backward(&g).unwrap();
        for p in 0..c.net.params().len() {
            let beta = c.net.params()[p].active_map().unwrap().beta();
            let set = |c: &mut Case, b: f64| {
                let mut params = c.net.params_mut();
                let map = params[p].active_map_mut().unwrap();
                let raw = map.raw().clone();
                let pruned = map.prune_threshold();
                *map = RelevanceMap::from_raw(raw, b).unwrap();
                if let Some(mu) = pruned {
                    map.prune(mu).unwrap();
                }
            };
            let h = 1e-5 * beta;
            set(&mut c, beta + h);
            let up = loss(&mut c);
            set(&mut c, beta - h);
            let down = loss(&mut c);
            set(&mut c, beta);
            let numeric = (up - down) / (2.0 * h);
            if !close(grads.params[p].beta, numeric) {
                failures.push(format!(
                    "seed {seed} param {p}: analytic {} numeric {numeric}",
                    grads.params[p].beta
                ));
            }
        }
    }
    failures
}

// ---- mask algebra ----

fn runner(cases: u32) -> TestRunner {
    TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    })
}

fn masks(max_tasks: usize, max_len: usize) -> impl Strategy<Value = (usize, Vec<Vec<bool>>)> {
    (1..=max_len).prop_flat_map(move |len| {
        (
            Just(len),
            prop::collection::vec(prop::collection::vec(any::<bool>(), len), 1..=max_tasks),
        )
    })
}

fn outcome(name: &str, r: Result<(), proptest::test_runner::TestError<impl std::fmt::Debug>>) -> Result<(), String> {
    r.map_err(|e| format!("{name}: {e}"))
}

pub fn pseudo_round_monotone(cases: u32) -> Result<(), String> {
    let strategy = (0.0f64..=1.0, 0.0f64..=1.0, 1.0f64..200.0);
    outcome(
        "pseudo-round monotonicity",
        runner(cases).run(&strategy, |(a, b, beta)| {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let (gl, gh) = (pseudo_round(lo, beta), pseudo_round(hi, beta));
            prop_assert!(gl <= gh, "L({lo}) = {gl} > L({hi}) = {gh}");
            // Strict unless both ends have saturated in floating point.
            if lo < hi && gl == gh {
                prop_assert!(gl < 1e-12 || gl > 1.0 - 1e-12 || hi - lo < 1e-12);
            }
            prop_assert!(hard_gate(lo, beta) <= hard_gate(hi, beta));
            Ok(())
        }),
    )
}

pub fn prune_idempotent(cases: u32) -> Result<(), String> {
    let strategy = (
        prop::collection::vec(0.0f64..=1.0, 1..64),
        0.001f64..0.999,
        10.0f64..200.0,
    );
    outcome(
        "prune idempotence",
        runner(cases).run(&strategy, |(raw, mu, beta)| {
            let n = raw.len();
            let mut once = RelevanceMap::from_raw(Tensor::new(vec![n], raw.clone()).unwrap(), beta).unwrap();
            let zeroed = once.prune(mu).unwrap();
            let mut twice = once.clone();
            prop_assert_eq!(twice.prune(mu).unwrap(), 0);
            prop_assert_eq!(&twice, &once);
            prop_assert_eq!(zeroed, raw.iter().filter(|&&v| v <= mu && v != 0.0).count());
            for (&r, &p) in raw.iter().zip(once.raw().data()) {
                prop_assert_eq!(p, if r <= mu { 0.0 } else { r });
            }
            Ok(())
        }),
    )
}

pub fn frozen_monotone(cases: u32) -> Result<(), String> {
    outcome(
        "frozen-indicator monotonicity",
        runner(cases).run(&masks(8, 200), |(len, tasks)| {
            let mut frozen = FrozenIndicator::new(len);
            let mut union = vec![false; len];
            for bits in &tasks {
                let before: Vec<bool> = (0..len).map(|i| frozen.is_frozen(i)).collect();
                let added = frozen.update(&BitMask::from_bools(bits)).unwrap();
                let mut fresh = 0;
                for i in 0..len {
                    prop_assert!(!before[i] || frozen.is_frozen(i), "bit {} cleared", i);
                    if bits[i] && !union[i] {
                        fresh += 1;
                    }
                    union[i] |= bits[i];
                    prop_assert_eq!(frozen.is_frozen(i), union[i]);
                }
                prop_assert_eq!(added, fresh);
            }
            prop_assert_eq!(frozen.count(), union.iter().filter(|&&b| b).count());
            Ok(())
        }),
    )
}

pub fn sparsity_brute_force(cases: u32) -> Result<(), String> {
    outcome(
        "sparsity against brute force",
        runner(cases).run(&masks(10, 300), |(len, tasks)| {
            let bitmasks: Vec<BitMask> = tasks.iter().map(|b| BitMask::from_bools(b)).collect();
            let unused = (0..len).filter(|&i| tasks.iter().all(|t| !t[i])).count();
            let got = sparsity(&bitmasks, len).map_err(|e| TestCaseError::fail(e.to_string()))?;
            prop_assert_eq!(got, unused as f64 / len as f64);
            Ok(())
        }),
    )
}

// ---- detector calibration ----

pub fn normal_stream(seed: u64, mean: f64, sd: f64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Normal::new(mean, sd).unwrap();
    (0..n).map(|_| d.sample(&mut rng)).collect()
}

pub fn detections(cfg: DetectorConfig, stream: &[f64]) -> Vec<usize> {
    let mut d = Detector::new(cfg).unwrap();
    stream
        .iter()
        .enumerate()
        .filter_map(|(i, &s)| d.push(s).then_some(i))
        .collect()
}

/// Default detector without the minimum-rise gate, so stationary streams
/// exercise the t-test alone.
pub fn bare_welch() -> DetectorConfig {
    DetectorConfig {
        min_rise: 0.0,
        ..DetectorConfig::default()
    }
}

/// Batches per task in a one-pass Split-MNIST stream at batch size 128.
pub const BATCHES_PER_TASK: usize = 90;

/// False detections per ten tasks over `streams` stationary streams, each
/// as long as ten tasks.
pub fn false_detections_per_ten_tasks(cfg: DetectorConfig, streams: u64) -> f64 {
    let mut total = 0;
    for seed in 0..streams {
        let s = normal_stream(seed, 0.3, 0.1, 10 * BATCHES_PER_TASK);
        total += detections(cfg, &s).len();
    }
    total as f64 / streams as f64
}
