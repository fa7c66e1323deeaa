use svp_core::orchestrator::{run_svp, LocalFactory, RunConfig};
fn main() {
    let mut config = RunConfig::default();
    config.iterations = 10;
    config.scenes = 150;
    config.eval_scene_count = 150;
    let dir = std::env::temp_dir().join("svp-probe10");
    let artifacts = run_svp(&config, &LocalFactory, &dir).expect("run");
    println!("iter  recall  halluc  ment");
    for row in &artifacts.metrics_prior {
        println!("p{:<2}   {:.4}  {:.4}  {:.2}", row.iteration, row.recall, row.hallucination_rate, row.mean_mentions);
    }
    // parameter diagnostics
    for (i, p) in artifacts.params_snapshots.iter().enumerate() {
        let n = 12;
        let diag_w: f64 = (0..n).map(|c| p.w[c][c]).sum::<f64>() / n as f64;
        let off_w: f64 = (0..n).flat_map(|v| (0..n).filter(move |c| *c != v).map(move |c| (v, c))).map(|(v, c)| p.w[v][c]).sum::<f64>() / (n * (n - 1)) as f64;
        let diag_a: f64 = (0..n).map(|c| p.a[c][c]).sum::<f64>() / n as f64;
        let a_eos: f64 = p.a[n].iter().sum::<f64>() / n as f64;
        let u_cat: f64 = p.u[..n].iter().sum::<f64>() / n as f64;
        println!("iter {i}: u_eos {:.3} u_cat {:.3} Wdiag {:.3} Woff {:.3} Adiag {:.3} Aeos_row {:.3} W_eos {:.3}",
            p.u[n], u_cat, diag_w, off_w, diag_a, a_eos, p.w[n].iter().sum::<f64>() / n as f64);
    }
}
