mod common;

use approx::assert_abs_diff_eq;
use ecmarket::market_model::{exact_objective, mccormick_errors, relaxed_objective};
use ecmarket::uncertainty::UncertaintyModel;
use ecmarket::validation::{carbon_ledger, solve, SolveMode};

// p* = (d1 − c1 − σ r_c) / (2 (c2 − d2)), welfare = b²/(4a) − c0 + r_c ψ0
const P_STAR: f64 = 30.625;
const W_STAR: f64 = 0.7503125 - 0.5 + 0.2;

#[test]
fn one_user_one_generator_closed_form() {
    let cfg = common::toy(50.0, None);
    for mode in [SolveMode::Centralized, SolveMode::Decentralized] {
        let o = solve(&cfg, mode).unwrap();
        assert!(o.converged(), "{mode:?}");
        assert_abs_diff_eq!(o.state.p_u[(0, 0)], P_STAR, epsilon = 1e-2);
        assert_abs_diff_eq!(o.state.p_g[(0, 0)], P_STAR, epsilon = 1e-2);
        assert_abs_diff_eq!(o.welfare, W_STAR, epsilon = 1e-5);
        // surplus allowances go to the manager
        assert_abs_diff_eq!(o.state.c_s[0], 100.0 - 0.5 * P_STAR, epsilon = 1e-2);
    }
}

#[test]
fn decentralized_energy_price_is_marginal_cost() {
    let cfg = common::toy(50.0, None);
    let o = solve(&cfg, SolveMode::Decentralized).unwrap();
    // −υ equals the generator's marginal cost 2 c2 p + c1
    let price = -o.duals.prices.upsilon[0][(0, 0)];
    assert_abs_diff_eq!(price, 2.0 * 0.0004 * P_STAR + 0.04, epsilon = 1e-4);
}

#[test]
fn zero_demand_leaves_only_constants() {
    let cfg = common::toy(0.0, None);
    for mode in [SolveMode::Centralized, SolveMode::Decentralized] {
        let o = solve(&cfg, mode).unwrap();
        assert_abs_diff_eq!(o.state.p_g[(0, 0)], 0.0, epsilon = 1e-5);
        assert_abs_diff_eq!(o.welfare, -0.5 + 0.002 * 100.0, epsilon = 1e-6);
    }
}

#[test]
fn zero_forecast_renewable_is_inert() {
    let cfg = common::toy(50.0, Some((0.0, 0.1)));
    let o = solve(&cfg, SolveMode::Decentralized).unwrap();
    assert!(o.converged());
    assert_abs_diff_eq!(o.state.p_r[(0, 0)], 0.0, epsilon = 1e-6);
    assert_abs_diff_eq!(o.state.p_hat[(0, 0)], 0.0, epsilon = 1e-6);
    assert_abs_diff_eq!(o.state.factor_sum(0, 0).unwrap(), -1.0, epsilon = 1e-4);
    assert_abs_diff_eq!(o.welfare, W_STAR, epsilon = 1e-4);
}

#[test]
fn outcome_identities_on_a_small_market() {
    let cfg = common::small();
    let unc = UncertaintyModel::new(&cfg).unwrap();
    let o = solve(&cfg, SolveMode::Decentralized).unwrap();
    assert!(o.converged());
    let s = &o.state;
    for t in 0..cfg.hours {
        // generator output matches what users buy from it
        let bought: f64 = (0..cfg.n_users()).map(|i| -s.eb[t][(i, 0)]).sum();
        assert_abs_diff_eq!(s.p_g[(0, t)], bought, epsilon = 1e-2);
        // renewable output splits between users and the manager
        assert_abs_diff_eq!(s.p_r[(0, t)] + s.p_hat[(0, t)], cfg.res[0].forecast[t], epsilon = 1e-6);
        assert_abs_diff_eq!(s.factor_sum(0, t).unwrap(), -1.0, epsilon = 1e-4);
        for i in 0..cfg.n_users() {
            assert!(s.p_u[(i, t)] >= cfg.users[i].p_min[t] - 1e-6);
            assert!(s.p_u[(i, t)] <= cfg.users[i].p_max[t] + 1e-6);
        }
    }
    assert!(s.carbon_sum().abs() <= 1e-2);
    let (eg, eu) = mccormick_errors(s);
    assert!(eg <= 1e-2 && eu <= 1e-2);
    let exact = exact_objective(s, &cfg, &unc).total();
    let relaxed = relaxed_objective(s, &cfg, &unc).total();
    assert!((exact - relaxed).abs() <= 1e-2 * relaxed.abs().max(1.0));
    let ledger = carbon_ledger(&o, &cfg).unwrap();
    assert!(ledger.balance.abs() <= 1e-2);
    for r in &ledger.rows {
        assert!(r.holding + 1e-6 >= r.emissions, "{} holds less than it emits", r.participant);
    }
}
