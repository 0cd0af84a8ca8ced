//! End-to-end acceptance checks on the reference community and tiny
//! instances. Prints one PASS/FAIL line per criterion; exits non-zero if any
//! criterion fails. `ACCEPTANCE_ONLY=1,5,9` restricts the run.

use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::Instant;

use ecmarket::coordinator::MarketOutcome;
use ecmarket::market_model::{envelope_interval, exact_objective, mccormick_errors, relaxed_objective};
use ecmarket::scenario::{bundled_reference_case, Penalties, ScenarioConfig};
use ecmarket::uncertainty::UncertaintyModel;
use ecmarket::validation::{
    brute_force_oracle, expected_cost_check, linspace, monte_carlo_audit, relaxation_bound, run_cases, run_sweep,
    solve, verify_equilibrium, SolveMode,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 7;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn reference() -> &'static ScenarioConfig {
    static CFG: OnceLock<ScenarioConfig> = OnceLock::new();
    CFG.get_or_init(bundled_reference_case)
}

fn decentralized() -> &'static MarketOutcome {
    static OUT: OnceLock<MarketOutcome> = OnceLock::new();
    OUT.get_or_init(|| solve(reference(), SolveMode::Decentralized).expect("decentralized run"))
}

fn centralized() -> &'static MarketOutcome {
    static OUT: OnceLock<MarketOutcome> = OnceLock::new();
    OUT.get_or_init(|| solve(reference(), SolveMode::Centralized).expect("centralized run"))
}

fn rel_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-12)
}

fn c1_gap() -> Verdict {
    let t0 = Instant::now();
    let dec = decentralized();
    let secs = t0.elapsed().as_secs_f64();
    let cen = centralized();
    let gap = rel_gap(dec.welfare, cen.welfare);
    verdict(
        dec.converged() && gap <= 1e-3 && secs <= 600.0,
        format!(
            "dec {:.6} cen {:.6} rel gap {gap:.2e} (limit 1e-3), decentralized {secs:.0} s, {} iterations in {} rounds",
            dec.welfare,
            cen.welfare,
            dec.total_iterations(),
            dec.rounds.len()
        ),
    )
}

fn c2_consensus() -> Verdict {
    let dec = decentralized();
    let Some(r) = dec.final_residual() else {
        return verdict(false, "no residual trace");
    };
    let checks = [
        ("se", r.se, 1e-4),
        ("sr", r.sr, 1e-6),
        ("sd", r.sd, 1e-6),
        ("sc", r.sc, 1e-4),
        ("te", r.te, 1e-4),
        ("tr", r.tr, 1e-6),
        ("td", r.td, 1e-6),
        ("tc", r.tc, 1e-4),
    ];
    let worst = checks.iter().filter(|(_, v, lim)| v > lim).map(|(n, _, _)| *n).collect::<Vec<_>>();
    let body = checks.iter().map(|(n, v, _)| format!("{n} {v:.1e}")).collect::<Vec<_>>().join(", ");
    verdict(dec.converged() && worst.is_empty(), format!("{body}; above threshold: {worst:?}"))
}

fn c3_mccormick() -> Verdict {
    let cfg = reference();
    let dec = decentralized();
    let unc = UncertaintyModel::new(cfg).unwrap();
    let (eg, eu) = mccormick_errors(&dec.state);
    let exact = exact_objective(&dec.state, cfg, &unc).total();
    let relaxed = relaxed_objective(&dec.state, cfg, &unc).total();
    let gap = rel_gap(exact, relaxed);
    verdict(
        eg <= 1e-2 && eu <= 1e-2 && gap <= 1e-2,
        format!("err_g {eg:.2e} err_u {eu:.2e} (limit 1e-2), exact vs relaxed objective {gap:.2e} (limit 1e-2)"),
    )
}

fn c4_coverage() -> Verdict {
    let cfg = reference();
    let dec = decentralized();
    let mut worst: f64 = 0.0;
    for j in 0..cfg.n_res() {
        for t in 0..cfg.hours {
            match dec.state.factor_sum(j, t) {
                Ok(s) => worst = worst.max((s + 1.0).abs()),
                Err(e) => return verdict(false, e.to_string()),
            }
        }
    }
    let carbon = dec.state.carbon_sum().abs();
    verdict(
        worst <= 1e-4 && carbon <= 1e-2,
        format!("max |factor sum + 1| {worst:.2e} (limit 1e-4), |sum c| {carbon:.2e} kg (limit 1e-2)"),
    )
}

fn c5_price_identity() -> Verdict {
    let cfg = reference();
    let dec = decentralized();
    let sold: f64 = dec.state.c_s.iter().sum();
    let theta = dec.duals.prices.theta;
    if sold <= 1e-6 {
        return verdict(true, format!("no user sells to the manager (sum c_s {sold:.2e}); theta {theta:.6}"));
    }
    let gap = (theta - cfg.prices.r_c_sell).abs();
    verdict(gap <= 1e-4, format!("theta {theta:.7} vs r_c {} gap {gap:.2e} (limit 1e-4), sold {sold:.1} kg", cfg.prices.r_c_sell))
}

fn c6_chance() -> Verdict {
    let cfg = reference();
    let dec = decentralized();
    let audit = match monte_carlo_audit(dec, cfg, 100_000, SEED) {
        Ok(a) => a,
        Err(e) => return verdict(false, e.to_string()),
    };
    let worst = audit
        .chance
        .iter()
        .max_by(|a, b| a.frequency.total_cmp(&b.frequency))
        .map(|r| format!("{} {:.4}", r.constraint, r.frequency))
        .unwrap_or_default();
    let n_bad = audit.chance.iter().filter(|r| r.frequency > 0.05).count();
    verdict(
        n_bad == 0,
        format!("{} constraints, 1e5 samples, worst {worst} (limit 0.05), {n_bad} above limit", audit.chance.len()),
    )
}

fn c7_expected_cost() -> Verdict {
    let cfg = reference();
    let unc = UncertaintyModel::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let daylight: Vec<usize> = (0..cfg.hours).filter(|&t| cfg.res.iter().any(|r| r.forecast[t] > 0.0)).collect();
    let mut worst: f64 = 0.0;
    for k in 0..20 {
        let g = rng.random_range(0..cfg.n_cgs());
        let t = daylight[rng.random_range(0..daylight.len())];
        let cg = &cfg.cgs[g];
        let p = rng.random_range(cg.p_min[t]..=cg.p_max[t]);
        let a: Vec<f64> = (0..cfg.n_res()).map(|_| -rng.random::<f64>()).collect();
        let chk = expected_cost_check(cfg, &unc, g, t, p, &a, 100_000, SEED + k);
        worst = worst.max(chk.z_score());
    }
    verdict(worst <= 3.0, format!("20 states, 1e5 samples each, max |z| {worst:.2} (limit 3)"))
}

fn c8_equilibrium() -> Verdict {
    let cfg = reference();
    let dec = decentralized();
    match verify_equilibrium(dec, cfg) {
        Ok(a) => {
            let worst = a
                .equilibrium
                .iter()
                .max_by(|x, y| x.deviation.total_cmp(&y.deviation))
                .map(|r| r.participant.clone())
                .unwrap_or_default();
            let d = a.max_deviation();
            verdict(d <= 1e-3, format!("max relative deviation {d:.2e} at {worst} (limit 1e-3)"))
        }
        Err(e) => verdict(false, e.to_string()),
    }
}

fn c9_warm_start() -> Verdict {
    let mut cfg = reference().clone();
    cfg.algo.adaptive_penalty = false;
    cfg.algo.penalties = Penalties { gamma: 0.03125, tau: 0.5, rho: 1.0, phi: 1.52587890625e-5 };
    cfg.algo.max_rounds = 2;
    let round2 = |warm: bool| -> Result<(usize, bool), String> {
        let mut c = cfg.clone();
        c.algo.warm_start = warm;
        let o = solve(&c, SolveMode::Decentralized).map_err(|e| e.to_string())?;
        let r = o.rounds.get(1).ok_or_else(|| format!("stopped after {} round(s), {:?}", o.rounds.len(), o.status))?;
        Ok((r.iterations, r.admm_converged))
    };
    match (round2(true), round2(false)) {
        (Ok((w, wc)), Ok((c, cc))) => {
            let ratio = w as f64 / c as f64;
            verdict(
                wc && cc && ratio <= 0.25,
                format!("round 2 inner iterations warm {w} vs cold {c}, ratio {:.1}% (limit 25%)", 100.0 * ratio),
            )
        }
        (Err(e), _) | (_, Err(e)) => verdict(false, e),
    }
}

fn c10_qualitative() -> Verdict {
    let cfg = reference();
    let mut fails = Vec::new();
    let cases = match run_cases(cfg, SolveMode::Centralized) {
        Ok(c) => c,
        Err(e) => return verdict(false, e.to_string()),
    };
    let (w1, w2, w3) = (cases[0].welfare, cases[1].welfare, cases[2].welfare);
    let slack = 1e-6 * w1.abs().max(1.0);
    if w1 + slack < w2 || w1 + slack < w3 {
        fails.push("case welfare ordering");
    }
    let re = linspace(0.04, 0.08, 5);
    let rc = linspace(0.001, 0.006, 6);
    let rows = run_sweep(cfg, &re, &rc, SolveMode::Centralized);
    if rows.iter().any(|r| r.error.is_some() || !r.converged) {
        fails.push("sweep point failed");
    }
    let at = |i: usize, k: usize| &rows[i * rc.len() + k];
    let tol = |x: f64| 1e-6 * x.abs().max(1.0);
    for i in 0..re.len() {
        for k in 0..rc.len() {
            let r = at(i, k);
            if i + 1 < re.len() {
                let n = at(i + 1, k);
                if n.welfare + tol(r.welfare) < r.welfare {
                    fails.push("welfare decreases in r_e");
                }
                if n.allowances_sold > r.allowances_sold + tol(r.allowances_sold) {
                    fails.push("allowances to manager increase in r_e");
                }
                if n.pv_sold + tol(r.pv_sold) < r.pv_sold {
                    fails.push("PV to manager decreases in r_e");
                }
            }
            if k + 1 < rc.len() && at(i, k + 1).welfare + tol(r.welfare) < r.welfare {
                fails.push("welfare decreases in r_c");
            }
        }
    }
    fails.dedup();
    let sold = |i: usize| at(i, 2).allowances_sold;
    let pv = |i: usize| at(i, 2).pv_sold;
    verdict(
        fails.is_empty(),
        format!(
            "cases {w1:.4} / {w2:.4} / {w3:.4}, held {:.1} / {:.1} / {:.1}; at r_c {:.3}: allowances sold {:.1} -> {:.1}, PV sold {:.1} -> {:.1}; {}",
            cases[0].allowances_held,
            cases[1].allowances_held,
            cases[2].allowances_held,
            rc[2],
            sold(0),
            sold(re.len() - 1),
            pv(0),
            pv(re.len() - 1),
            if fails.is_empty() { "orderings hold".to_string() } else { format!("violations: {fails:?}") }
        ),
    )
}

/// Tiny markets small enough for the grid oracle.
pub fn tiny_instances() -> Vec<(&'static str, ScenarioConfig)> {
    let base = r#"
hours = 1
[prices]
r_e = 0.06
r_c_sell = 0.003
[[cg]]
name = "G1"
c0 = 0.5
c1 = 0.045
c2 = 0.0004
p_max = 60.0
sigma = 0.9
[[user]]
name = "U1"
d1 = 0.09
d2 = -0.0004
p_max = 50.0
p_min_fraction = 0.4
psi0 = 60.0
"#;
    let one_res = format!(
        "name = \"tiny-res\"\n{base}\n[[res]]\nname = \"PV1\"\nforecast = 20.0\nsigma_rel = 0.1\n"
    );
    let two_users = r#"
name = "tiny-two-users"
hours = 2
[prices]
r_e = 0.06
r_c_sell = 0.003
[[cg]]
name = "G1"
c0 = 0.5
c1 = 0.045
c2 = 0.0004
p_max = [60.0, 70.0]
sigma = 0.9
[[user]]
name = "U1"
d1 = 0.09
d2 = -0.0004
p_max = [30.0, 40.0]
p_min_fraction = 0.4
psi0 = 80.0
[[user]]
name = "U2"
d1 = 0.06
d2 = -0.0003
p_max = [25.0, 20.0]
p_min_fraction = 0.4
psi0 = 10.0
"#;
    vec![
        ("1 user, 1 CG, T=1", ScenarioConfig::from_toml_str(&format!("name = \"tiny\"\n{base}")).unwrap()),
        ("1 user, 1 CG, 1 RES, T=1", ScenarioConfig::from_toml_str(&one_res).unwrap()),
        ("2 users, 1 CG, T=2", ScenarioConfig::from_toml_str(two_users).unwrap()),
    ]
}

fn c11_oracle() -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for (label, cfg) in tiny_instances() {
        let oracle = brute_force_oracle(&cfg, 20);
        let bound = relaxation_bound(&cfg);
        let cen = solve(&cfg, SolveMode::Centralized);
        let dec = solve(&cfg, SolveMode::Decentralized);
        match (oracle, bound, cen, dec) {
            (Ok(o), Ok(b), Ok(c), Ok(d)) => {
                let gap = rel_gap(d.welfare, c.welfare);
                let ok = o <= b + 1e-9 * b.abs().max(1.0) && gap <= 1e-3 && d.converged();
                pass &= ok;
                parts.push(format!("[{label}: grid {o:.5} <= relaxed {b:.5}, cen {:.5} dec {:.5} gap {gap:.1e}]", c.welfare, d.welfare));
            }
            (o, b, c, d) => {
                pass = false;
                parts.push(format!(
                    "[{label}: error {:?} {:?} {:?} {:?}]",
                    o.err(),
                    b.err().map(|e| e.to_string()),
                    c.err().map(|e| e.to_string()),
                    d.err().map(|e| e.to_string())
                ));
            }
        }
    }
    verdict(pass, parts.join(" "))
}

fn c12_envelopes() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut bad = 0usize;
    let mut degenerate_bad = 0usize;
    for _ in 0..10_000 {
        let (a, b) = (rng.random_range(-50.0..300.0), rng.random_range(-50.0..300.0));
        let (c, d) = (rng.random_range(-20.0..5.0), rng.random_range(-20.0..5.0));
        let (p_lo, p_hi) = (f64::min(a, b), f64::max(a, b));
        let (pi_lo, pi_hi) = (f64::min(c, d), f64::max(c, d));
        let p = rng.random_range(p_lo..=p_hi);
        let pi = rng.random_range(pi_lo..=pi_hi);
        let w = p * pi;
        let scale = 1e-9 * (1.0 + w.abs() + (p_hi * pi_hi).abs() + (p_lo * pi_lo).abs());
        let (lo, hi) = envelope_interval(p, pi, p_lo, p_hi, pi_lo, pi_hi);
        if w < lo - scale || w > hi + scale {
            bad += 1;
        }
        // collapse one side at a time
        for (pl, ph, ql, qh) in [(p, p, pi_lo, pi_hi), (p_lo, p_hi, pi, pi)] {
            let (lo, hi) = envelope_interval(p, pi, pl, ph, ql, qh);
            if (lo - w).abs() > scale || (hi - w).abs() > scale {
                degenerate_bad += 1;
            }
        }
    }
    verdict(
        bad == 0 && degenerate_bad == 0,
        format!("1e4 draws: {bad} points outside their envelope, {degenerate_bad} degenerate boxes not exact"),
    )
}

type Criterion = (u32, &'static str, fn() -> Verdict);

fn main() -> ExitCode {
    let all: [Criterion; 12] = [
        (1, "decentralized-centralized gap", c1_gap),
        (2, "consensus residuals", c2_consensus),
        (3, "McCormick accuracy", c3_mccormick),
        (4, "uncertainty coverage and carbon balance", c4_coverage),
        (5, "sharing price identity", c5_price_identity),
        (6, "chance-constraint audit", c6_chance),
        (7, "expected-cost identity", c7_expected_cost),
        (8, "competitive equilibrium", c8_equilibrium),
        (9, "warm start", c9_warm_start),
        (10, "qualitative orderings", c10_qualitative),
        (11, "oracle equivalence", c11_oracle),
        (12, "envelope soundness", c12_envelopes),
    ];
    let only: Option<Vec<u32>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = 0;
    for (id, name, check) in all {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t0 = Instant::now();
        let v = check();
        let tag = if v.pass { "PASS" } else { "FAIL" };
        println!("criterion {id:>2} {tag} {name}: {} [{:.1} s]", v.detail, t0.elapsed().as_secs_f64());
        failed += usize::from(!v.pass);
    }
    if failed == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}
