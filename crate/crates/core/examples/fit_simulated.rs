//! Simulates one data set from the three-type design and fits it.
//!
//! cargo run --release --example fit_simulated -- Cg 2 200 7

use copula_frailty::mcem::{fit, FitConfig, ModelLabel};
use copula_frailty::simulate::{generate_dataset, replicate_rng, SimConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let model: ModelLabel = args.first().map_or("Cg", String::as_str).parse()?;
    let setting = args.get(1).map_or(Ok(2), |s| s.parse())?;
    let n = args.get(2).map_or(Ok(200), |s| s.parse())?;
    let seed = args.get(3).map_or(Ok(1), |s| s.parse())?;
    let cfg = SimConfig::standard(model, setting, n)?;
    let d = generate_dataset(&cfg, &mut replicate_rng(seed, 0))?;
    println!("censored fraction {:.3}", d.event_free_fraction());
    let start = std::time::Instant::now();
    let mut fc = FitConfig { seed, ..FitConfig::default() };
    if let Some(it) = args.get(4) {
        fc.convergence.max_iter = it.parse()?;
    }
    let f = fit(&d, model, &fc)?;
    for r in &f.trace {
        let p: Vec<String> = r.params.iter().map(|v| format!("{v:.3}")).collect();
        println!(
            "{:>3} n_s={:<5} crit={:.4} streak={} acc={:.2} dq={:.2}±{:.2} [{}] {:.2}s",
            r.iteration,
            r.n_s,
            r.criterion,
            r.streak,
            r.mean_acceptance,
            r.q_change,
            r.q_change_se,
            p.join(" "),
            r.seconds
        );
    }
    println!("converged={} iterations={} total {:.1}s", f.converged, f.n_iterations, start.elapsed().as_secs_f64());
    for ((name, est), se) in f.names.iter().zip(f.estimates()).zip(&f.std_errors) {
        println!("{name:>20} {est:>9.4} {}", se.map_or("NA".into(), |s| format!("{s:.4}")));
    }
    for w in &f.warnings {
        println!("warning: {w}");
    }
    Ok(())
}
