mod common;

use common::{finite_difference, fixture};
use innet::nn::Activation;

#[test]
fn whole_stack_gradient_matches_finite_differences() {
    for seed in [11, 12, 13] {
        let f = fixture(2, 6, seed, Activation::Tanh);
        for s in [0.0, 0.6, 1.5] {
            let (rel, abs, n) = finite_difference(&f, s, 1e-5, 1e-6);
            assert!(n > 20);
            assert!(rel < 1e-4, "seed {seed} s {s}: relative error {rel}");
            assert!(abs < 1e-9, "seed {seed} s {s}: absolute error {abs}");
        }
    }
}

#[test]
fn sigmoid_and_three_nodes() {
    let f = fixture(3, 5, 4, Activation::Sigmoid);
    let (rel, abs, _) = finite_difference(&f, 0.9, 1e-5, 1e-6);
    assert!(rel < 1e-4 && abs < 1e-9, "{rel} {abs}");
}
