use copula_frailty::diagnostics::deviance_residuals;
use copula_frailty::mcem::{fit, write_trace_csv, ConvergenceConfig, FitConfig, ModelLabel};
use copula_frailty::parallel::Execution;
use copula_frailty::simulate::{generate_dataset, replicate_rng, SimConfig};

fn small(max_iter: usize, exec: Execution) -> FitConfig {
    let mut f = FitConfig { warm_burn: 20, se_sample_factor: 2, exec, ..FitConfig::default() };
    f.mh.n_burn = 50;
    f.mh.n_s = 60;
    f.convergence = ConvergenceConfig { max_iter, ..ConvergenceConfig::default() };
    f
}

#[test]
fn parallel_and_sequential_fits_agree() {
    let cfg = SimConfig::standard(ModelLabel::CG, 2, 40).unwrap();
    let d = generate_dataset(&cfg, &mut replicate_rng(21, 0)).unwrap();
    let a = fit(&d, ModelLabel::CG, &small(4, Execution::Parallel)).unwrap();
    let b = fit(&d, ModelLabel::CG, &small(4, Execution::Sequential)).unwrap();
    assert_eq!(a.estimates(), b.estimates());
    assert_eq!(a.std_errors, b.std_errors);
    assert_eq!(a.trace.len(), 4);
    assert!(!a.converged);
}

#[test]
fn martingale_residuals_sum_to_zero() {
    let cfg = SimConfig::standard(ModelLabel::Gg, 2, 50).unwrap();
    let d = generate_dataset(&cfg, &mut replicate_rng(22, 0)).unwrap();
    let f = fit(&d, ModelLabel::Gg, &small(5, Execution::default())).unwrap();
    let r = deviance_residuals(&f, &d).unwrap();
    for j in 0..3 {
        let s: f64 = r.martingale.iter().map(|m| m[j]).sum();
        assert!(s.abs() < 1e-8, "type {j}: {s}");
    }
    assert!((r.sum_sq_by_type.iter().sum::<f64>() - r.total).abs() < 1e-9);
}

#[test]
fn trace_csv_has_a_row_per_iteration() {
    let cfg = SimConfig::standard(ModelLabel::Cg, 1, 30).unwrap();
    let d = generate_dataset(&cfg, &mut replicate_rng(23, 0)).unwrap();
    let f = fit(&d, ModelLabel::Cg, &FitConfig { compute_se: false, ..small(3, Execution::default()) }).unwrap();
    assert!(f.std_errors.iter().all(Option::is_none));
    let mut out = Vec::new();
    write_trace_csv(&f, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.lines().next().unwrap().ends_with("alpha_c"));
}
