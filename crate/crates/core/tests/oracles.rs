//! Forward pass, MoE routing and perplexity against independent oracles.

mod support;

use support::oracles::*;

#[test]
fn forward_matches_straight_line_reference() {
    let e = forward_oracle_error(20);
    assert!(e < FORWARD_TOL, "max |Δlogit| {e:e}");
}

#[test]
fn moe_block_matches_exhaustive_top_k() {
    for seed in 0..3 {
        let (e, same) = moe_brute_force(seed);
        assert!(same, "seed {seed}: routing differs from exhaustive search");
        assert!(e < BRUTE_FORCE_TOL, "seed {seed}: max |Δy| {e:e}");
    }
}

#[test]
fn identical_experts_with_full_routing_reduce_to_dense() {
    let e = dense_equivalence_error(20);
    assert!(e < DENSE_EQUIV_TOL, "max |Δlogit| {e:e}");
}

#[test]
fn perplexity_is_exp_of_cross_entropy() {
    let e = perplexity_identity_error(PPL_PAIRS);
    assert!(e < PPL_REL_TOL, "relative error {e:e}");
}

#[test]
fn uniform_model_perplexity_is_vocab_size() {
    let e = uniform_perplexity_error();
    assert!(e <= UNIFORM_TOL, "|Γ − V| = {e:e}");
}
