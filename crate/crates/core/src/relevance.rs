//! Relevance maps: per-task gates over a weight tensor.
//!
//! A map holds raw values in `[0, 1]`. During training the gate is the
//! pseudo-round `1 / (1 + exp(-beta (x - 0.5)))`; at inference it is rounded
//! to a hard `{0, 1}` mask. Completed tasks keep only their bit-packed mask.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

/// Default gate tightness. Values at or above this make no visible difference.
pub const DEFAULT_BETA: f64 = 80.0;

/// Sigmoidal stand-in for rounding on `[0, 1]`.
#[inline]
pub fn pseudo_round(x: f64, beta: f64) -> f64 {
    1.0 / (1.0 + (-beta * (x - 0.5)).exp())
}

/// Derivative of [`pseudo_round`] with respect to `x`.
#[inline]
pub fn pseudo_round_grad(x: f64, beta: f64) -> f64 {
    let l = pseudo_round(x, beta);
    beta * l * (1.0 - l)
}

/// Hard gate used at inference. A gate of exactly one half rounds up.
#[inline]
pub fn hard_gate(x: f64, beta: f64) -> bool {
    pseudo_round(x, beta) >= 0.5
}

/// Parameters of the clipped normal used to initialize raw map values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapInit {
    pub mean: f64,
    pub sd: f64,
}

impl Default for MapInit {
    fn default() -> Self {
        Self { mean: 0.3, sd: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceMap {
    raw: Tensor,
    beta: f64,
    pruned: Option<f64>,
}

impl RelevanceMap {
    /// Draws raw values from `N(mean, sd)` clipped to `[0, 1]`.
    pub fn init(shape: &[usize], init: MapInit, beta: f64, seed: u64) -> Result<Self> {
        if !(beta > 0.0) {
            return Err(Error::Config(format!("beta must be positive, got {beta}")));
        }
        let normal = Normal::new(init.mean, init.sd)
            .map_err(|e| Error::Config(format!("map init distribution: {e}")))?;
        let mut rng = seed::rng(seed, &[seed::TAG_MAP_INIT]);
        let mut raw = Tensor::zeros(shape);
        for v in raw.data_mut() {
            *v = normal.sample(&mut rng).clamp(0.0, 1.0);
        }
        Ok(Self {
            raw,
            beta,
            pruned: None,
        })
    }

    /// Wraps existing raw values. Values are clipped to `[0, 1]`.
    pub fn from_raw(mut raw: Tensor, beta: f64) -> Result<Self> {
        if !(beta > 0.0) {
            return Err(Error::Config(format!("beta must be positive, got {beta}")));
        }
        if !raw.is_finite() {
            return Err(Error::Input("relevance map values must be finite".into()));
        }
        for v in raw.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        Ok(Self {
            raw,
            beta,
            pruned: None,
        })
    }

    pub fn raw(&self) -> &Tensor {
        &self.raw
    }

    pub fn raw_mut(&mut self) -> &mut Tensor {
        &mut self.raw
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Raises beta. Decreases are ignored so the gate only ever tightens.
    pub fn tighten_beta(&mut self, beta: f64) {
        if beta.is_finite() && beta > self.beta {
            self.beta = beta;
        }
    }

    pub fn is_pruned(&self) -> bool {
        self.pruned.is_some()
    }

    /// The prune threshold applied, if any.
    pub fn prune_threshold(&self) -> Option<f64> {
        self.pruned
    }

    pub(crate) fn restore_state(&mut self, beta: f64, pruned: Option<f64>) {
        self.beta = beta;
        self.pruned = pruned;
    }

    /// Soft gates `pseudo_round(raw, beta)`.
    pub fn gates(&self) -> Tensor {
        let b = self.beta;
        self.raw.map(|x| pseudo_round(x, b))
    }

    /// Sets every raw value `<= mu` to exactly zero and returns how many
    /// entries were zeroed by this call.
    pub fn prune(&mut self, mu: f64) -> Result<usize> {
        check_mu(mu)?;
        let mut zeroed = 0;
        for v in self.raw.data_mut() {
            if *v <= mu && *v != 0.0 {
                zeroed += 1;
            }
            if *v <= mu {
                *v = 0.0;
            }
        }
        self.pruned = Some(mu);
        Ok(zeroed)
    }

    /// Clips raw values into `[0, 1]`; on a pruned map, values that have
    /// fallen to the threshold are pruned again.
    pub fn clip(&mut self) {
        let mu = self.pruned;
        for v in self.raw.data_mut() {
            *v = v.clamp(0.0, 1.0);
            if let Some(mu) = mu {
                if *v <= mu {
                    *v = 0.0;
                }
            }
        }
    }

    /// True where the raw value is locked at zero by pruning.
    #[inline]
    pub fn is_pruned_entry(&self, i: usize) -> bool {
        self.pruned.is_some() && self.raw.data()[i] == 0.0
    }

    pub fn binarize(&self) -> BitMask {
        let b = self.beta;
        BitMask::from_fn(self.raw.len(), |i| hard_gate(self.raw.data()[i], b))
    }
}

fn check_mu(mu: f64) -> Result<()> {
    if !(mu > 0.0 && mu < 1.0) {
        return Err(Error::Config(format!("prune threshold must lie in (0, 1), got {mu}")));
    }
    Ok(())
}

/// Functional form of [`RelevanceMap::prune`].
pub fn prune(map: &RelevanceMap, mu: f64) -> Result<RelevanceMap> {
    let mut out = map.clone();
    out.prune(mu)?;
    Ok(out)
}

/// Fixed-length bit vector, 64 entries per word, least significant bit first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitMask {
    len: usize,
    words: Vec<u64>,
}

impl BitMask {
    pub fn zeros(len: usize) -> Self {
        Self {
            len,
            words: vec![0; len.div_ceil(64)],
        }
    }

    pub fn ones(len: usize) -> Self {
        Self::from_fn(len, |_| true)
    }

    pub fn from_fn(len: usize, f: impl Fn(usize) -> bool) -> Self {
        let mut m = Self::zeros(len);
        for i in 0..len {
            if f(i) {
                m.words[i / 64] |= 1 << (i % 64);
            }
        }
        m
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        Self::from_fn(bits.len(), |i| bits[i])
    }

    /// Rebuilds a mask from packed words, rejecting stray bits past `len`.
    pub fn from_words(len: usize, words: Vec<u64>) -> Result<Self> {
        if words.len() != len.div_ceil(64) {
            return Err(Error::Input(format!(
                "{} words cannot hold a {len}-bit mask",
                words.len()
            )));
        }
        if len % 64 != 0 {
            if let Some(last) = words.last() {
                if last >> (len % 64) != 0 {
                    return Err(Error::Input("bits set beyond mask length".into()));
                }
            }
        }
        Ok(Self { len, words })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        debug_assert!(i < self.len);
        (self.words[i / 64] >> (i % 64)) & 1 == 1
    }

    pub fn set(&mut self, i: usize, value: bool) {
        assert!(i < self.len);
        if value {
            self.words[i / 64] |= 1 << (i % 64);
        } else {
            self.words[i / 64] &= !(1 << (i % 64));
        }
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn or_assign(&mut self, other: &BitMask) -> Result<()> {
        self.check_len(other, "mask or")?;
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a |= b;
        }
        Ok(())
    }

    /// Number of positions set in both masks.
    pub fn overlap(&self, other: &BitMask) -> Result<usize> {
        self.check_len(other, "mask overlap")?;
        Ok(self
            .words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones() as usize)
            .sum())
    }

    pub fn to_tensor(&self, shape: &[usize]) -> Result<Tensor> {
        let data = (0..self.len).map(|i| if self.get(i) { 1.0 } else { 0.0 }).collect();
        Tensor::new(shape.to_vec(), data)
    }

    /// Bytes needed to store the mask at one bit per entry.
    pub fn packed_bytes(&self) -> usize {
        self.len.div_ceil(8)
    }

    fn check_len(&self, other: &BitMask, op: &'static str) -> Result<()> {
        if self.len != other.len {
            return Err(Error::Dimension {
                op,
                left: vec![self.len],
                right: vec![other.len],
            });
        }
        Ok(())
    }
}

/// Cumulative record of stabilized parameters. Bits are only ever added.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrozenIndicator {
    mask: BitMask,
}

impl FrozenIndicator {
    pub fn new(len: usize) -> Self {
        Self {
            mask: BitMask::zeros(len),
        }
    }

    pub(crate) fn from_mask(mask: BitMask) -> Self {
        Self { mask }
    }

    pub fn mask(&self) -> &BitMask {
        &self.mask
    }

    #[inline]
    pub fn is_frozen(&self, i: usize) -> bool {
        self.mask.get(i)
    }

    pub fn count(&self) -> usize {
        self.mask.count_ones()
    }

    /// ORs a completed task's binary mask into the indicator and returns the
    /// number of newly frozen parameters.
    pub fn update(&mut self, task_mask: &BitMask) -> Result<usize> {
        let before = self.count();
        self.mask.or_assign(task_mask)?;
        Ok(self.count() - before)
    }
}

/// Number of positions whose gate is zero in every mask.
pub fn unused_positions(masks: &[BitMask]) -> Result<usize> {
    let first = masks
        .first()
        .ok_or_else(|| Error::Input("sparsity needs at least one mask".into()))?;
    let mut union = BitMask::zeros(first.len());
    for m in masks {
        union.or_assign(m)?;
    }
    Ok(union.len() - union.count_ones())
}

/// Fraction of the `weight_count` positions left unused by every task.
pub fn sparsity(masks: &[BitMask], weight_count: usize) -> Result<f64> {
    let unused = unused_positions(masks)?;
    if weight_count == 0 || masks[0].len() != weight_count {
        return Err(Error::Dimension {
            op: "sparsity",
            left: vec![masks[0].len()],
            right: vec![weight_count],
        });
    }
    Ok(unused as f64 / weight_count as f64)
}

/// Storage accounting for a masked network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FootprintReport {
    pub tasks: usize,
    pub weight_count: usize,
    /// Dense 64-bit storage of all weights.
    pub weight_bytes: usize,
    /// One bit per weight per task.
    pub mask_bytes: usize,
    /// Weights no task uses; these can be dropped after training.
    pub removable_weights: usize,
}

impl FootprintReport {
    pub fn total_bytes(&self) -> usize {
        self.weight_bytes + self.mask_bytes
    }

    /// Bytes after removing never-used weights.
    pub fn compacted_weight_bytes(&self) -> usize {
        (self.weight_count - self.removable_weights) * std::mem::size_of::<f64>()
    }
}

/// Footprint of `task_masks[t]` (one mask per task over the same
/// `weight_count` positions).
pub fn memory_footprint(task_masks: &[BitMask], weight_count: usize) -> Result<FootprintReport> {
    if let Some(bad) = task_masks.iter().find(|m| m.len() != weight_count) {
        return Err(Error::Dimension {
            op: "memory_footprint",
            left: vec![bad.len()],
            right: vec![weight_count],
        });
    }
    let removable = if task_masks.is_empty() {
        weight_count
    } else {
        unused_positions(task_masks)?
    };
    Ok(FootprintReport {
        tasks: task_masks.len(),
        weight_count,
        weight_bytes: weight_count * std::mem::size_of::<f64>(),
        mask_bytes: task_masks.len() * weight_count.div_ceil(8),
        removable_weights: removable,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map_from(raw: &[f64], beta: f64) -> RelevanceMap {
        RelevanceMap::from_raw(Tensor::new(vec![raw.len()], raw.to_vec()).unwrap(), beta).unwrap()
    }

    #[test]
    fn pseudo_round_reference_points() {
        for beta in [1.0, 80.0, 1e4] {
            assert_eq!(pseudo_round(0.5, beta), 0.5);
        }
        let want = 1.0 / (1.0 + (-50f64).exp());
        assert_eq!(pseudo_round(1.0, 100.0), want);
        assert!((1.0 - want) < 1e-21);

        let want = 1.0 / (1.0 + 10f64.exp());
        assert!((pseudo_round(0.4, 100.0) - want).abs() < 1e-18);
        assert!((want - 4.5e-5).abs() < 1e-6);
    }

    #[test]
    fn pseudo_round_derivative_matches_finite_differences() {
        let h = 1e-7;
        for &x in &[0.1, 0.45, 0.5, 0.52, 0.9] {
            for &beta in &[5.0, 20.0, 80.0] {
                let fd = (pseudo_round(x + h, beta) - pseudo_round(x - h, beta)) / (2.0 * h);
                let an = pseudo_round_grad(x, beta);
                assert!(
                    (fd - an).abs() <= 1e-6 * an.abs().max(1.0),
                    "x={x} beta={beta}: {fd} vs {an}"
                );
            }
        }
    }

    #[test]
    fn init_is_clipped_and_deterministic() {
        let init = MapInit { mean: 0.3, sd: 0.2 };
        let a = RelevanceMap::init(&[100_000], init, DEFAULT_BETA, 11).unwrap();
        assert!(a.raw().data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let b = RelevanceMap::init(&[100_000], init, DEFAULT_BETA, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.beta(), DEFAULT_BETA);
    }

    #[test]
    fn init_upper_tail_matches_normal_cdf() {
        let init = MapInit { mean: 0.3, sd: 0.2 };
        let map = RelevanceMap::init(&[100_000], init, DEFAULT_BETA, 5).unwrap();
        let frac = map.raw().data().iter().filter(|&&v| v > 0.5).count() as f64 / 1e5;
        // Clipping at 1 keeps mass above 0.5, so the tail is P(Z > (0.5 - 0.3) / 0.2).
        let z = (0.5 - init.mean) / init.sd;
        let tail = 0.5 * statrs::function::erf::erfc(z / std::f64::consts::SQRT_2);
        assert!((frac - tail).abs() <= 0.02, "{frac} vs {tail}");
    }

    #[test]
    fn prune_examples() {
        let mut m = map_from(&[0.04, 0.5, 0.96], DEFAULT_BETA);
        m.prune(0.05).unwrap();
        assert_eq!(m.raw().data(), &[0.0, 0.5, 0.96]);
        assert!(m.is_pruned());

        let mut m = map_from(&[0.2, 0.7], DEFAULT_BETA);
        m.prune(0.05).unwrap();
        assert_eq!(m.raw().data(), &[0.2, 0.7]);

        let mut m = map_from(&[0.01, 0.011], DEFAULT_BETA);
        m.prune(0.01).unwrap();
        assert_eq!(m.raw().data(), &[0.0, 0.011]);
    }

    #[test]
    fn prune_rejects_threshold_outside_unit_interval() {
        let mut m = map_from(&[0.3], DEFAULT_BETA);
        for mu in [0.0, 1.0, -0.1, f64::NAN] {
            assert!(matches!(m.prune(mu), Err(Error::Config(_))));
        }
    }

    #[test]
    fn clip_reprunes_after_threshold() {
        let mut m = map_from(&[0.3, 0.6], DEFAULT_BETA);
        m.prune(0.05).unwrap();
        m.raw_mut().data_mut()[0] = 0.04;
        m.raw_mut().data_mut()[1] = 1.3;
        m.clip();
        assert_eq!(m.raw().data(), &[0.0, 1.0]);
    }

    #[test]
    fn binarize_examples() {
        let m = map_from(&[0.5, 0.96, 0.04], 100.0);
        let b = m.binarize();
        assert!(b.get(0));
        assert!(b.get(1));
        assert!(!b.get(2));
    }

    #[test]
    fn frozen_examples() {
        let k = BitMask::from_bools(&[true, false, true, true, false]);
        let mut f = FrozenIndicator::new(5);
        assert_eq!(f.update(&k).unwrap(), 3);
        assert_eq!(f.count(), 3);
        assert_eq!(f.update(&k).unwrap(), 0);
        assert_eq!(f.count(), 3);

        let mut f = FrozenIndicator::new(6);
        f.update(&BitMask::from_bools(&[true, true, false, false, false, false])).unwrap();
        f.update(&BitMask::from_bools(&[false, false, true, false, true, false])).unwrap();
        assert_eq!(f.count(), 4);

        assert!(matches!(f.update(&BitMask::zeros(3)), Err(Error::Dimension { .. })));
    }

    #[test]
    fn sparsity_examples() {
        assert_eq!(sparsity(&[BitMask::zeros(10), BitMask::zeros(10)], 10).unwrap(), 1.0);
        assert_eq!(sparsity(&[BitMask::ones(10)], 10).unwrap(), 0.0);
        // gates on positions 1..=4 and 3..=6 (one-based) leave 7, 8, 9, 10 unused
        let a = BitMask::from_fn(10, |i| (0..4).contains(&i));
        let b = BitMask::from_fn(10, |i| (2..6).contains(&i));
        assert_eq!(sparsity(&[a, b], 10).unwrap(), 0.4);
        assert!(matches!(sparsity(&[], 10), Err(Error::Input(_))));
    }

    #[test]
    fn footprint_examples() {
        let r = memory_footprint(&[BitMask::ones(1000)], 1000).unwrap();
        assert_eq!(r.weight_bytes, 8000);
        assert_eq!(r.mask_bytes, 125);
        assert_eq!(r.removable_weights, 0);

        let masks: Vec<BitMask> = (0..4).map(|_| BitMask::ones(1000)).collect();
        assert_eq!(memory_footprint(&masks, 1000).unwrap().mask_bytes, 4 * 125);
    }

    #[test]
    fn footprint_of_reference_mlp_is_about_twelve_kilobytes() {
        let weights = 784 * 100 + 100 * 100 + 100 * 100 + 100 * 10;
        let m = BitMask::from_fn(weights, |i| i % 3 == 0);
        let r = memory_footprint(&[m], weights).unwrap();
        assert_eq!(r.mask_bytes, 12_425);
        assert!((12_000..12_800).contains(&r.mask_bytes));
    }

    #[test]
    fn bitmask_word_validation() {
        assert!(BitMask::from_words(65, vec![0, 1]).is_ok());
        assert!(BitMask::from_words(65, vec![0, 2]).is_err());
        assert!(BitMask::from_words(65, vec![0]).is_err());
    }

    proptest! {
        #[test]
        fn pseudo_round_is_monotone(a in 0.0f64..1.0, b in 0.0f64..1.0, beta in 1.0f64..200.0) {
            prop_assume!((a - b).abs() > 1e-9);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let (l, h) = (pseudo_round(lo, beta), pseudo_round(hi, beta));
            // Both saturate to exactly 0 or 1 far from the midpoint.
            prop_assert!(l <= h);
            if h < 1.0 && l > 0.0 && (hi - lo) * beta > 1e-6 {
                prop_assert!(l < h);
            }
        }

        #[test]
        fn prune_is_idempotent_and_leaves_binary_gates(
            raw in proptest::collection::vec(0.0f64..1.0, 1..64),
            mu in 0.01f64..0.2,
        ) {
            let once = prune(&map_from(&raw, DEFAULT_BETA), mu).unwrap();
            let twice = prune(&once, mu).unwrap();
            prop_assert_eq!(&once, &twice);
            for &v in once.raw().data() {
                prop_assert!(v == 0.0 || v > mu);
            }
            let t = once.binarize().to_tensor(&[raw.len()]).unwrap();
            prop_assert!(t.data().iter().all(|&g| g == 0.0 || g == 1.0));
        }
    }
}
