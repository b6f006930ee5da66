mod common;

use common::*;

#[test]
fn loss_gradients_match_finite_differences() {
    for seed in GRAD_SEEDS {
        for (name, err) in [
            ("dice", grad_dice(seed)),
            ("bce", grad_bce(seed)),
            ("class bce", grad_class_bce(seed)),
        ] {
            assert!(err < GRAD_TOL, "{name} seed {seed}: {err}");
        }
    }
}

#[test]
fn alignment_gradients_match_finite_differences() {
    for seed in GRAD_SEEDS {
        let (err, at) = grad_vta(seed);
        assert!(err < GRAD_TOL, "seed {seed}: {at}");
    }
}

#[test]
fn toy_objective_gradients_match_finite_differences() {
    for seed in GRAD_SEEDS {
        let (err, at) = grad_toy(seed);
        assert!(err < GRAD_TOL, "seed {seed}: {at}");
    }
}
