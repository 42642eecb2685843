#[path = "suites/oracles.rs"]
mod oracles;

fn pass(outcome: oracles::Outcome) {
    if let Err(e) = outcome {
        panic!("{e}");
    }
}

#[test]
fn select_span_matches_brute_force() {
    pass(oracles::select_span_vs_brute_force(1000));
}

#[test]
fn ranking_metrics_match_reference() {
    pass(oracles::ranking_metrics_vs_reference(1000));
}

#[test]
fn sparsity_matches_count() {
    pass(oracles::sparsity_vs_count(1000));
}

#[test]
fn mann_whitney_matches_enumeration() {
    pass(oracles::mann_whitney_vs_enumeration());
}

#[test]
fn max_pool_head_is_a_set_function() {
    pass(oracles::max_pool_head_properties(100));
}

#[test]
fn conversion_matches_interval_oracle() {
    pass(oracles::conversion_vs_oracle(500));
}

#[test]
fn transfer_surgery_preserves_shared_modules() {
    pass(oracles::transfer_surgery());
}

#[test]
fn ema_and_adadelta_oracles() {
    pass(oracles::ema_and_adadelta());
}
