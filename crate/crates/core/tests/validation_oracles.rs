mod common;

use approx::assert_abs_diff_eq;
use ecmarket::uncertainty::UncertaintyModel;
use ecmarket::validation::{
    brute_force_oracle, case_configs, expected_cost_check, monte_carlo_audit, profits, relaxation_bound, run_cases,
    run_sweep, solve, verify_equilibrium, verify_equilibrium_at, OracleError, ShareDirection, SolveMode,
};

#[test]
fn grid_oracle_stays_below_relaxation() {
    for cfg in [common::toy(50.0, None), common::toy(50.0, Some((20.0, 0.1)))] {
        let grid = brute_force_oracle(&cfg, 20).unwrap();
        let bound = relaxation_bound(&cfg).unwrap();
        let cen = solve(&cfg, SolveMode::Centralized).unwrap();
        assert!(grid <= bound + 1e-9, "{grid} > {bound}");
        assert!(cen.welfare <= bound + 1e-9);
        // the relaxation is tight enough to land near the grid optimum
        assert!((cen.welfare - grid).abs() <= 1e-2 * grid.abs().max(1.0));
    }
}

#[test]
fn grid_oracle_refuses_large_markets() {
    let cfg = ecmarket::scenario::bundled_reference_case();
    assert!(matches!(brute_force_oracle(&cfg, 5), Err(OracleError::TooLarge)));
}

#[test]
fn equilibrium_holds_at_cleared_prices_and_breaks_when_perturbed() {
    let cfg = common::small();
    let o = solve(&cfg, SolveMode::Decentralized).unwrap();
    let at_clearing = verify_equilibrium(&o, &cfg).unwrap();
    assert!(at_clearing.max_deviation() <= 1e-3, "{:?}", at_clearing.equilibrium);
    let mut shifted = o.duals.prices.clone();
    for m in &mut shifted.upsilon {
        *m *= 1.1;
    }
    let off = verify_equilibrium_at(&o, &cfg, &shifted).unwrap();
    assert!(off.max_deviation() > 1e-3);
}

#[test]
fn chance_audit_is_seeded_and_within_limits() {
    let cfg = common::small();
    let o = solve(&cfg, SolveMode::Decentralized).unwrap();
    let a = monte_carlo_audit(&o, &cfg, 20_000, 11).unwrap();
    let b = monte_carlo_audit(&o, &cfg, 20_000, 11).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.chance.len(), 2 * 2 + 2 * 1 + 1);
    assert_eq!(a.violated().count(), 0, "{:?}", a.chance);
}

#[test]
fn audit_without_reserve_never_violates_capacity() {
    let cfg = common::toy(50.0, None);
    let o = solve(&cfg, SolveMode::Centralized).unwrap();
    let a = monte_carlo_audit(&o, &cfg, 5_000, 1).unwrap();
    assert_eq!(a.max_violation_frequency(), 0.0);
}

#[test]
fn expected_cost_matches_sampling() {
    let cfg = common::small();
    let unc = UncertaintyModel::new(&cfg).unwrap();
    let none = expected_cost_check(&cfg, &unc, 0, 1, 30.0, &[0.0], 1_000, 3);
    assert_abs_diff_eq!(none.sample_mean, none.closed_form, epsilon = 1e-12);
    let with = expected_cost_check(&cfg, &unc, 0, 1, 30.0, &[-0.6], 50_000, 3);
    assert!(with.z_score() <= 4.0, "{with:?}");
}

#[test]
fn profits_add_up_to_welfare() {
    let cfg = common::small();
    let o = solve(&cfg, SolveMode::Decentralized).unwrap();
    let total: f64 = profits(&o, &cfg).unwrap().iter().map(|r| r.total).sum();
    assert!((total - o.welfare).abs() <= 1e-3 * o.welfare.abs().max(1.0), "{total} vs {}", o.welfare);
}

#[test]
fn ledger_labels_flows() {
    let cfg = common::small();
    let o = solve(&cfg, SolveMode::Decentralized).unwrap();
    let l = ecmarket::validation::carbon_ledger(&o, &cfg).unwrap();
    let pv = l.rows.iter().find(|r| r.participant == "PV1").unwrap();
    assert_eq!(pv.direction, ShareDirection::FromCommunity);
    assert!(l.rows.iter().any(|r| r.direction == ShareDirection::ToCommunity));
    assert!(l.rows.iter().all(|r| r.shared >= 0.0));
}

#[test]
fn cases_and_sweep_on_small_market() {
    let cfg = common::small();
    assert_eq!(case_configs(&cfg).len(), 3);
    let rows = run_cases(&cfg, SolveMode::Centralized).unwrap();
    assert!(rows.iter().all(|r| r.converged));
    assert!(rows[0].welfare + 1e-9 >= rows[1].welfare);
    let sweep = run_sweep(&cfg, &[0.04, 0.08], &[0.001, 0.006], SolveMode::Centralized);
    assert_eq!(sweep.len(), 4);
    assert!(sweep.iter().all(|r| r.error.is_none()));
    assert!(sweep[2].pv_sold + 1e-6 >= sweep[0].pv_sold);
}

#[test]
fn no_flexibility_case_matches_full_case_without_uncertainty() {
    let mut cfg = common::small();
    cfg.res[0].sigma_rel = 0.0;
    let rows = run_cases(&cfg, SolveMode::Centralized).unwrap();
    assert_abs_diff_eq!(rows[0].welfare, rows[1].welfare, epsilon = 1e-6);
}
