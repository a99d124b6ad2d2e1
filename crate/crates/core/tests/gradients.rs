//! Analytic gradients against central finite differences.

mod common;

use common::{check_gradients, grad_cases, oracle_loss};
use fastyolo::nn::{forward, loss_and_grad};

#[test]
fn every_trainable_layer_matches_finite_differences() {
    for seed in 0..8 {
        for case in grad_cases(seed) {
            for c in check_gradients(&case) {
                assert!(c.error < 1e-2, "seed {seed}, {}: layer {} relative error {}", case.name, c.layer, c.error);
                // kinks are rare at this step; most entries must be checked
                assert!(4 * c.skipped < c.entries, "seed {seed}, {}: layer {} skipped {}/{}", case.name, c.layer, c.skipped, c.entries);
            }
        }
    }
}

#[test]
fn the_f64_loss_oracle_agrees_with_the_training_loss() {
    for seed in 0..8 {
        for case in grad_cases(seed) {
            let y = forward(&case.net, &case.weights, &case.input).unwrap();
            let (loss, _) = loss_and_grad(case.loss, &y, &case.target, case.net.head()).unwrap();
            let oracle = oracle_loss(case.loss, &y, &case.target, case.net.head());
            assert!((loss as f64 - oracle).abs() <= 1e-5 * oracle.abs().max(1.0), "{}: {loss} vs {oracle}", case.name);
        }
    }
}
