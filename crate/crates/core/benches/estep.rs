//! Posterior sampling for one E-step, rayon against the sequential path.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use copula_frailty::frailty_posterior::{sample_posterior, ChainState, MHConfig};
use copula_frailty::mcem::ModelLabel;
use copula_frailty::parallel::Execution;
use copula_frailty::simulate::{generate_dataset, replicate_rng, SimConfig};

fn estep(c: &mut Criterion) {
    let mut group = c.benchmark_group("sample_posterior");
    group.sample_size(10);
    for model in [ModelLabel::Cg, ModelLabel::Gg] {
        let cfg = SimConfig::standard(model, 2, 200).unwrap();
        let d = generate_dataset(&cfg, &mut replicate_rng(1, 0)).unwrap();
        let joint = cfg.joint().unwrap();
        let counts: Vec<Vec<f64>> =
            d.subjects().iter().map(|s| s.events.iter().map(|e| e.len() as f64).collect()).collect();
        // true cumulative intensities: unit baseline up to τ_i
        let hazards: Vec<Vec<f64>> = d
            .subjects()
            .iter()
            .map(|s| cfg.beta_truth.iter().map(|b| s.censoring_time * (s.covariates[0] * b).exp()).collect())
            .collect();
        let mh = MHConfig { n_burn: 100, n_s: 200, ..MHConfig::default() };
        for exec in [Execution::Parallel, Execution::Sequential] {
            group.bench_with_input(BenchmarkId::new(format!("{model}"), format!("{exec:?}")), &exec, |bch, &exec| {
                bch.iter(|| {
                    let mut chains = ChainState::for_subjects(d.n_subjects(), 3, mh.step_scale, 7);
                    sample_posterior(exec, &joint, &counts, &hazards, &mut chains, &mh).unwrap()
                })
            });
        }
    }
    group.finish();
}

criterion_group!(benches, estep);
criterion_main!(benches);
