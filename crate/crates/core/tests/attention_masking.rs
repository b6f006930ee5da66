mod common;

#[test]
fn masked_positions_never_reach_the_output() {
    for seed in 0..100 {
        let change = common::masked_perturbation_change(seed);
        assert!(change <= 1e-12, "config {seed}: output moved by {change}");
    }
}
