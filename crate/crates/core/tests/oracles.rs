mod common;

use common::oracles::*;

#[test]
fn quantizer_matches_brute_force_search() {
    for seed in 0..5 {
        let a = quantizer_agreement(seed, 64, 8, 1000);
        assert_eq!(a.agreed, a.queries, "seed {seed}");
        assert!(a.ties >= 150);
    }
}

#[test]
fn quantizer_matches_on_small_codebooks() {
    for (k, d) in [(16, 1), (16, 2), (32, 3), (256, 8)] {
        let a = quantizer_agreement(k as u64, k, d, 300);
        assert_eq!(a.agreed, a.queries, "K={k} d={d}");
    }
}

#[test]
fn si_sdr_is_scale_invariant() {
    assert!(si_sdr_scale_deviation(0..50) < 1e-9);
}

#[test]
fn token_metrics_match_brute_force() {
    assert!(token_metric_deviation(0..200) < 1e-9);
}

#[test]
fn pearson_matches_covariance_formula() {
    assert!(pearson_deviation(0..200) < 1e-12);
}

#[test]
fn sweep_rule_over_all_patterns() {
    for (pattern, expected, got) in sweep_patterns() {
        assert_eq!(got, expected, "{pattern:?}");
    }
}
