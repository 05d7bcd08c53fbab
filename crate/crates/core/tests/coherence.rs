mod common;

use common::{bench_config, bench_run};

#[test]
fn heavy_consistency_weight_makes_forecasts_coherent() {
    let free = bench_run(0, &bench_config(0, 0.0));
    let tied = bench_run(0, &bench_config(0, 50.0));
    assert!(
        tied.dce <= 0.1 * free.dce,
        "gamma=50 dce {} vs gamma=0 dce {}",
        tied.dce,
        free.dce
    );
}
