mod config;

use std::collections::hash_map::RandomState;
use std::fs::File;
use std::hash::{BuildHasher, Hasher};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};

use clap::{Args, Parser, Subcommand};
use copula_frailty::diagnostics::deviance_residuals;
use copula_frailty::event_data::{CsvSchema, Dataset};
use copula_frailty::frailty_posterior::MHConfig;
use copula_frailty::mcem::{
    fit, write_baselines_csv, write_report, write_trace_csv, ConvergenceConfig, FitConfig, ModelLabel,
};
use copula_frailty::parallel::{with_threads, Execution};
use copula_frailty::simulate::{
    generate_dataset, replicate_rng, run_replicates, summarize_replicates, SimConfig, MAX_FAILURE_SHARE,
};

use config::{Settings, FIT_KEYS, SIMULATE_KEYS, STUDY_KEYS};

#[derive(Parser)]
#[command(name = "copfrail", version, about = "Copula-linked frailty models for multi-type recurrent events")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model to a recurrent event CSV.
    Fit(FitArgs),
    /// Generate one simulated data set.
    Simulate(SimulateArgs),
    /// Run a replication study and write the summary table.
    Study(StudyArgs),
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    /// Cg, CG, Gg or GG.
    #[arg(long)]
    model: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also write the final posterior draws.
    #[arg(long)]
    dump_draws: bool,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    max_iter: Option<usize>,
    /// Comma-separated covariate columns (default: every extra column).
    #[arg(long)]
    covariates: Option<String>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    model: Option<String>,
    /// Standard design 1, 2 or 3.
    #[arg(long)]
    setting: Option<usize>,
    /// Number of subjects.
    #[arg(long)]
    n: Option<usize>,
}

#[derive(Args)]
struct StudyArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    setting: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    max_iter: Option<usize>,
    /// Per-replicate estimates and diagnostics.
    #[arg(long)]
    replicates_out: Option<PathBuf>,
}

/// A failure tagged with the stage it happened in.
struct Failure {
    stage: &'static str,
    message: String,
}

fn fail(stage: &'static str) -> impl Fn(String) -> Failure {
    move |message| Failure { stage, message }
}

fn err_str(e: impl std::fmt::Display) -> String {
    e.to_string()
}

enum Outcome {
    Done,
    NotConverged,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Fit(a) => run_fit(a),
        Command::Simulate(a) => run_simulate(a),
        Command::Study(a) => run_study(a),
    };
    match res {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::NotConverged) => ExitCode::from(2),
        Err(f) => {
            eprintln!("error during {}: {}", f.stage, f.message);
            ExitCode::from(1)
        }
    }
}

fn settings(path: Option<&Path>, command: &str, allowed: &[&str]) -> Result<Settings, Failure> {
    match path {
        Some(p) => Settings::load(p, command, allowed).map_err(fail("config")),
        None => Ok(Settings::default()),
    }
}

fn entropy_seed() -> u64 {
    let mut h = RandomState::new().build_hasher();
    h.write_u128(std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_nanos()));
    h.finish()
}

fn resolve_seed(s: &Settings) -> Result<u64, Failure> {
    match s.get::<u64>("seed").map_err(fail("config"))? {
        Some(seed) => Ok(seed),
        None => {
            let seed = entropy_seed();
            println!("seed = {seed}");
            Ok(seed)
        }
    }
}

fn model(s: &Settings) -> Result<ModelLabel, Failure> {
    let raw = s.raw("model").ok_or_else(|| fail("config")("model is required (Cg, CG, Gg or GG)".into()))?;
    raw.parse().map_err(|e| fail("config")(err_str(e)))
}

fn execution(threads: Option<usize>) -> Execution {
    if threads == Some(1) {
        Execution::Sequential
    } else {
        Execution::default()
    }
}

fn fit_config(s: &Settings, seed: u64) -> Result<FitConfig, String> {
    let d = FitConfig::default();
    let c = ConvergenceConfig::default();
    let threads = s.get::<usize>("threads")?;
    Ok(FitConfig {
        mh: MHConfig {
            n_burn: s.get_or("n_burn", d.mh.n_burn)?,
            n_thin: s.get_or("n_thin", d.mh.n_thin)?,
            n_s: s.get_or("n_s", d.mh.n_s)?,
            step_scale: s.get_or("step_scale", d.mh.step_scale)?,
            ..d.mh
        },
        warm_burn: s.get_or("warm_burn", d.warm_burn)?,
        convergence: ConvergenceConfig {
            delta1: s.get_or("delta1", c.delta1)?,
            delta2: s.get_or("delta2", c.delta2)?,
            consecutive_required: s.get_or("consecutive", c.consecutive_required)?,
            max_iter: s.get_or("max_iter", c.max_iter)?,
            block: s.get_or("block", c.block)?,
            drift_z: s.get_or("drift_z", c.drift_z)?,
        },
        seed,
        exec: execution(threads),
        se_sample_factor: s.get_or("se_factor", d.se_sample_factor)?,
        compute_se: s.get_or("compute_se", d.compute_se)?,
    })
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<(), Failure> {
    let file = File::create(path).map_err(|e| fail("write")(format!("{}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(|e| fail("write")(format!("{}: {e}", path.display())))
}

fn run_fit(a: FitArgs) -> Result<Outcome, Failure> {
    let mut s = settings(a.config.as_deref(), "fit", FIT_KEYS)?;
    s.set("input", a.input.as_ref().map(|p| p.display()));
    s.set("model", a.model);
    s.set("out", a.out.as_ref().map(|p| p.display()));
    s.set("seed", a.seed);
    s.set("threads", a.threads);
    s.set("max_iter", a.max_iter);
    s.set("covariates", a.covariates);
    if a.dump_draws {
        s.set("dump_draws", Some(true));
    }
    let model = model(&s)?;
    let input = s.raw("input").ok_or_else(|| fail("config")("input is required".into()))?.to_string();
    let out = PathBuf::from(s.raw("out").ok_or_else(|| fail("config")("out is required".into()))?);
    let dump = s.get_or("dump_draws", false).map_err(fail("config"))?;
    let threads = s.get::<usize>("threads").map_err(fail("config"))?;
    let schema =
        CsvSchema { covariates: s.list::<String>("covariates").map_err(fail("config"))?, ..CsvSchema::default() };

    let d = Dataset::load(&input, &schema).map_err(|e| fail("load")(err_str(e)))?;
    let seed = resolve_seed(&s)?;
    let cfg = fit_config(&s, seed).map_err(fail("config"))?;
    let result = with_threads(threads, || fit(&d, model, &cfg)).map_err(|e| fail("fit")(err_str(e)))?;
    let residuals = deviance_residuals(&result, &d).map_err(|e| fail("residuals")(err_str(e)))?;

    std::fs::create_dir_all(&out).map_err(|e| fail("write")(format!("{}: {e}", out.display())))?;
    write_file(&out.join("report.txt"), |w| write_report(&result, &d, Some(&residuals), w))?;
    write_file(&out.join("baseline.csv"), |w| write_baselines_csv(&result.params, d.type_labels(), w))?;
    write_file(&out.join("residuals.csv"), |w| residuals.write_csv(&d, w))?;
    write_file(&out.join("trace.csv"), |w| write_trace_csv(&result, w))?;
    if dump {
        let ids: Vec<String> = d.subjects().iter().map(|s| s.id.clone()).collect();
        write_file(&out.join("draws.csv"), |w| result.final_draws.write_csv(&ids, w))?;
    }

    println!(
        "model {model}: {} after {} iterations",
        if result.converged { "converged" } else { "NOT converged" },
        result.n_iterations
    );
    for ((name, est), se) in result.names.iter().zip(result.estimates()).zip(&result.std_errors) {
        match se {
            Some(se) => println!("{name:<24} {est:>10.4} ({se:.4})"),
            None => println!("{name:<24} {est:>10.4} (NA)"),
        }
    }
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    Ok(if result.converged { Outcome::Done } else { Outcome::NotConverged })
}

fn sim_config(s: &Settings, seed: u64) -> Result<SimConfig, String> {
    let model: ModelLabel = s.raw("model").ok_or("model is required (Cg, CG, Gg or GG)")?.parse().map_err(err_str)?;
    let n = s.get_or("n", 200usize)?;
    let mut cfg = match s.get::<usize>("setting")? {
        Some(k) => SimConfig::standard(model, k, n).map_err(err_str)?,
        None => {
            let alpha = s.list::<f64>("alpha")?.ok_or("alpha is required without a setting")?;
            let m = s.get_or("n_types", alpha.len())?;
            SimConfig {
                n_subjects: n,
                n_types: m,
                model,
                copula_truth: s.list("copula")?.ok_or("copula is required without a setting")?,
                alpha_truth: alpha,
                beta_truth: s.list("beta")?.ok_or("beta is required without a setting")?,
                censor_rate: 0.5,
                admin_cutoff: 1.0,
                n_replicates: 1,
                seed,
            }
        }
    };
    if let Some(v) = s.list("copula")? {
        cfg.copula_truth = v;
    }
    if let Some(v) = s.list::<f64>("alpha")? {
        cfg.n_types = v.len();
        cfg.alpha_truth = v;
    }
    if let Some(v) = s.list("beta")? {
        cfg.beta_truth = v;
    }
    cfg.censor_rate = s.get_or("censor_rate", cfg.censor_rate)?;
    cfg.admin_cutoff = s.get_or("admin_cutoff", cfg.admin_cutoff)?;
    cfg.n_replicates = s.get_or("replicates", cfg.n_replicates)?;
    cfg.seed = seed;
    cfg.validate().map_err(err_str)?;
    Ok(cfg)
}

fn run_simulate(a: SimulateArgs) -> Result<Outcome, Failure> {
    let mut s = settings(a.config.as_deref(), "simulate", SIMULATE_KEYS)?;
    s.set("out", a.out.as_ref().map(|p| p.display()));
    s.set("seed", a.seed);
    s.set("model", a.model);
    s.set("setting", a.setting);
    s.set("n", a.n);
    let out = PathBuf::from(s.raw("out").ok_or_else(|| fail("config")("out is required".into()))?);
    let seed = resolve_seed(&s)?;
    let cfg = sim_config(&s, seed).map_err(fail("config"))?;
    let d = generate_dataset(&cfg, &mut replicate_rng(seed, 0)).map_err(|e| fail("simulate")(err_str(e)))?;
    d.save(&out).map_err(|e| fail("write")(err_str(e)))?;
    println!("censored fraction = {}", d.event_free_fraction());
    Ok(Outcome::Done)
}

fn run_study(a: StudyArgs) -> Result<Outcome, Failure> {
    let mut s = settings(a.config.as_deref(), "study", STUDY_KEYS)?;
    s.set("out", a.out.as_ref().map(|p| p.display()));
    s.set("seed", a.seed);
    s.set("model", a.model);
    s.set("setting", a.setting);
    s.set("n", a.n);
    s.set("replicates", a.replicates);
    s.set("threads", a.threads);
    s.set("max_iter", a.max_iter);
    s.set("replicates_out", a.replicates_out.as_ref().map(|p| p.display()));
    let out = PathBuf::from(s.raw("out").ok_or_else(|| fail("config")("out is required".into()))?);
    // a study must be reproducible, so the seed is never drawn at random
    let seed =
        s.get::<u64>("seed").map_err(fail("config"))?.ok_or_else(|| fail("config")("a study requires seed".into()))?;
    let threads = s.get::<usize>("threads").map_err(fail("config"))?;
    let cfg = sim_config(&s, seed).map_err(fail("config"))?;
    let fit_cfg = fit_config(&s, seed).map_err(fail("config"))?;

    let done = AtomicUsize::new(0);
    let total = cfg.n_replicates;
    let progress = |r: &copula_frailty::simulate::ReplicateOutcome| {
        let k = done.fetch_add(1, Ordering::Relaxed) + 1;
        match &r.error {
            Some(e) => eprintln!("[{k}/{total}] replicate {} failed: {e}", r.index),
            None => eprintln!(
                "[{k}/{total}] replicate {}: {} in {} iterations ({:.1} s)",
                r.index,
                if r.converged { "converged" } else { "not converged" },
                r.iterations,
                r.seconds
            ),
        }
    };
    let reps = with_threads(threads, || run_replicates(&cfg, &fit_cfg, execution(threads), &progress))
        .map_err(|e| fail("study")(err_str(e)))?;
    let result = summarize_replicates(&cfg, reps).map_err(|e| fail("study")(err_str(e)))?;

    write_file(&out, |w| result.write_csv(w))?;
    if let Some(p) = s.raw("replicates_out") {
        write_file(Path::new(p), |w| result.write_replicates_csv(w))?;
    }
    eprintln!(
        "{} of {} replicates converged; mean censored fraction {:.3}",
        result.n_used,
        total,
        result.mean_censored_fraction()
    );
    if result.n_failed as f64 / total as f64 > MAX_FAILURE_SHARE {
        return Err(fail("study")(format!(
            "{} of {total} replicates did not converge (more than {:.0}%); the summary was still written",
            result.n_failed,
            100.0 * MAX_FAILURE_SHARE
        )));
    }
    Ok(Outcome::Done)
}
