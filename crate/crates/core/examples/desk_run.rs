//! Runs the desk-scale six-task protocol with default settings and prints
//! every report row; a quick end-to-end smoke run of the library API.

use triadapt::config::RunConfig;
use triadapt::data;
use triadapt::harness::{self, EngineMode, SlidingWindowPlan};

fn main() {
    let mut cfg = RunConfig::default();
    if let Some(seed) = std::env::args().nth(1) {
        cfg.seed = seed.parse().expect("seed must be an integer");
    }
    let t0 = std::time::Instant::now();
    let dataset = data::generate::<f64>(&cfg.dataset);
    let plan = SlidingWindowPlan::from_config(&cfg.plan).unwrap();
    let (pretrained, _) = harness::pretrain_initial(&cfg, &dataset, &plan).unwrap();
    let pre_acc =
        triadapt::metrics::accuracy(&pretrained, &dataset.test, &plan.initial_classes).unwrap();
    println!("pretrain acc on initial window: {pre_acc:.4} ({:?})", t0.elapsed());

    let artifacts =
        harness::run_protocol(&pretrained, &dataset, EngineMode::Bid, &cfg, None).unwrap();
    print!("{}", artifacts.aggregate_csv);
    for audit in &artifacts.audits {
        println!(
            "audit task {}: bound {:.4} ok={} checks={:?}",
            audit.task,
            audit.bound,
            audit.ok,
            audit
                .checks
                .iter()
                .map(|c| (c.source_task, (c.accuracy * 1000.0).round() / 1000.0))
                .collect::<Vec<_>>()
        );
    }
    match artifacts.check_invariants(&plan) {
        Ok(()) => println!("invariants: ok"),
        Err(e) => println!("invariants: VIOLATED: {e}"),
    }
    println!("total time {:?}", t0.elapsed());
}
