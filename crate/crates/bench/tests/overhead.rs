// Kept in its own binary so no other test competes for the CPU while timing.

use headwise_bench::{run_one, BenchConfig};

#[test]
fn all_active_mask_costs_about_the_same_as_dense() {
    let config = BenchConfig { iters: 30, ..BenchConfig::new(1024, 128, 32, 64, 0.0) };
    let r = run_one(&config).unwrap();
    assert_eq!(r.achieved_sparsity, 0.0);
    assert!((0.8..=1.2).contains(&r.speedup), "speedup {} at zero sparsity", r.speedup);
}
