use svp_core::orchestrator::{run_svp, LocalFactory, RunConfig};

fn main() {
    println!("epochs lr    recall0 recall3 d_pp   hall0  hall3  rel_drop");
    for &epochs in &[1usize, 2, 3, 4] {
        for &lr in &[0.1f64, 0.2, 0.3, 0.5] {
            let mut config = RunConfig::default();
            config.adapt.epochs = epochs;
            config.adapt.learning_rate = lr;
            let dir = std::env::temp_dir().join(format!("svp-sweep-{epochs}-{lr}"));
            let artifacts = run_svp(&config, &LocalFactory, &dir).expect("run");
            let r0 = artifacts.metrics_prior[0].recall;
            let r3 = artifacts.metrics_prior[3].recall;
            let h0 = artifacts.metrics_prior[0].hallucination_rate;
            let h3 = artifacts.metrics_prior[3].hallucination_rate;
            println!(
                "{epochs}      {lr:<4}  {r0:.4}  {r3:.4}  {:+.1}  {h0:.4} {h3:.4}  {:+.1}%",
                (r3 - r0) * 100.0,
                (h3 - h0) / h0 * 100.0
            );
        }
    }
}
