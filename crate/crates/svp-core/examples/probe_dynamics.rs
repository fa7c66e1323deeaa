//! Quick look at loop dynamics under the default configuration.

use svp_core::orchestrator::{run_svp, LocalFactory, RunConfig};

fn main() {
    let config = RunConfig::default();
    let dir = std::env::temp_dir().join("svp-probe");
    let start = std::time::Instant::now();
    let artifacts = run_svp(&config, &LocalFactory, &dir).expect("run");
    println!("elapsed: {:.1}s", start.elapsed().as_secs_f64());
    println!("iter  recall  halluc  precision  f1      H_prior H_guided mentions");
    for row in &artifacts.metrics_prior {
        println!(
            "p{}    {:.4}  {:.4}  {:.4}     {:.4}  {:.4}  {:.4}   {:.2}",
            row.iteration,
            row.recall,
            row.hallucination_rate,
            row.precision,
            row.f1,
            row.mean_entropy_prior,
            row.mean_entropy_guided,
            row.mean_mentions
        );
    }
    for row in &artifacts.metrics_isvp {
        println!(
            "i{}    {:.4}  {:.4}  {:.4}     {:.4}  {:.4}  {:.4}   {:.2}",
            row.iteration,
            row.recall,
            row.hallucination_rate,
            row.precision,
            row.f1,
            row.mean_entropy_prior,
            row.mean_entropy_guided,
            row.mean_mentions
        );
    }
}
