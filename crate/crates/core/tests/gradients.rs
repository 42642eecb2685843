#[path = "suites/grad.rs"]
mod grad;

#[test]
fn every_operation_passes_over_ten_seeds() {
    for seed in 0..10 {
        for (name, err) in grad::check_ops(seed) {
            assert!(err < grad::TOLERANCE, "{name} seed {seed}: {err:e}");
        }
    }
}

#[test]
fn full_model_loss_passes_over_ten_seeds() {
    for seed in 0..10 {
        for (name, err) in grad::check_model(seed) {
            assert!(err < grad::TOLERANCE, "{name} seed {seed}: {err:e}");
        }
    }
}
