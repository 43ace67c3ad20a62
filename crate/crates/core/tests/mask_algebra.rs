//! Algebraic properties of gates, pruning, freezing and sparsity, each on
//! 1000 random instances.

mod common;

const CASES: u32 = 1000;

#[test]
fn pseudo_round_is_monotone() {
    common::pseudo_round_monotone(CASES).unwrap();
}

#[test]
fn prune_is_idempotent() {
    common::prune_idempotent(CASES).unwrap();
}

#[test]
fn frozen_indicator_only_grows() {
    common::frozen_monotone(CASES).unwrap();
}

#[test]
fn sparsity_matches_brute_force() {
    common::sparsity_brute_force(CASES).unwrap();
}
