//! Independent oracles and experiment drivers: the centralized solve,
//! equilibrium verification, Monte Carlo audits, a brute-force grid oracle
//! for tiny markets, price sweeps and the case comparison.

use nalgebra::{DMatrix, DVector, RowDVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::agents::{cg_problem, res_problem, sharing_enabled, user_problem, Broadcast, GlobalAverages, PriceSet};
use crate::conic::{ConicSolution, SolveStatus};
use crate::coordinator::{contract_bounds, run, CoordinatorError, DualState, MarketOutcome, RoundSummary, RunStatus};
use crate::market_model::{
    build_centralized, cg_expected_cost, mccormick_errors, welfare, McCormickBounds, ModelContext, ObjectiveForm,
    TradeState,
};
use crate::scenario::{CarbonMarket, IndexLayout, ParticipantKind, Penalties, ScenarioConfig};
use crate::uncertainty::{z_factor, UncertaintyModel};

/// Which clearing procedure produces an outcome.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum SolveMode {
    Decentralized,
    Centralized,
}

pub fn solve(cfg: &ScenarioConfig, mode: SolveMode) -> Result<MarketOutcome, CoordinatorError> {
    match mode {
        SolveMode::Decentralized => run(cfg),
        SolveMode::Centralized => solve_centralized(cfg),
    }
}

// ---------------------------------------------------------------------------
// Centralized reference
// ---------------------------------------------------------------------------

/// Solves the market with coupling imposed directly, enumerating user
/// identity vectors. Returns the best solution and its identity vector.
pub fn solve_relaxed_once(
    ctx: ModelContext,
    bounds: &McCormickBounds,
    form: ObjectiveForm,
) -> Result<(ConicSolution, Vec<bool>), CoordinatorError> {
    let (base, blocks) = build_centralized(ctx, bounds, form);
    let ids: Vec<_> = blocks.iter().filter(|b| b.owner.kind == ParticipantKind::User).map(|b| b.identity()).collect();
    let mut best: Option<(ConicSolution, Vec<bool>)> = None;
    let mut last_status = SolveStatus::Infeasible;
    for mask in 0..(1usize << ids.len()) {
        let mut prob = base.clone();
        let pick: Vec<bool> = (0..ids.len()).map(|i| mask >> i & 1 == 1).collect();
        for (v, &on) in ids.iter().zip(&pick) {
            prob.fix(*v, if on { 1.0 } else { 0.0 });
        }
        let sol = prob.solve();
        if !sol.is_optimal() {
            last_status = sol.status;
            continue;
        }
        if best.as_ref().is_none_or(|(b, _)| sol.objective < b.objective - 1e-9 * (1.0 + b.objective.abs())) {
            best = Some((sol, pick));
        }
    }
    best.ok_or(CoordinatorError::Centralized(last_status))
}

/// Centralized reference: the relaxed problem with the same contraction loop
/// as the decentralized run.
pub fn solve_centralized(cfg: &ScenarioConfig) -> Result<MarketOutcome, CoordinatorError> {
    let unc = UncertaintyModel::new(cfg)?;
    let layout = IndexLayout::new(cfg);
    let ctx = ModelContext { cfg, unc: &unc, layout: &layout };
    let mut bounds = McCormickBounds::initial(cfg, &unc);
    let mut rounds = Vec::new();
    let mut status = RunStatus::RoundLimit;
    let mut state = TradeState::zeros(&layout);
    let mut eps_used = None;
    for n in 0..cfg.algo.max_rounds {
        let (sol, _) = solve_relaxed_once(ctx, &bounds, ObjectiveForm::Relaxed)?;
        state = TradeState::from_vector(&layout, &sol.x);
        let (err_g, err_u) = mccormick_errors(&state);
        rounds.push(RoundSummary {
            round: n,
            iterations: 1,
            admm_converged: true,
            err_g,
            err_u,
            eps: eps_used,
            welfare: welfare(&state, cfg, &unc),
        });
        if err_g <= cfg.algo.delta_g && err_u <= cfg.algo.delta_u {
            status = RunStatus::Converged;
            break;
        }
        eps_used = Some(bounds.eps);
        bounds = contract_bounds(&bounds, &state, bounds.eps);
    }
    let w = welfare(&state, cfg, &unc);
    let duals = DualState { prices: PriceSet::zeros(&layout), penalties: cfg.algo.penalties, k: 0 };
    Ok(MarketOutcome { state, duals, welfare: w, residuals: Vec::new(), rounds, bounds, status })
}

/// Welfare of the first relaxation over the initial boxes, an upper bound
/// on the welfare of the exact problem.
pub fn relaxation_bound(cfg: &ScenarioConfig) -> Result<f64, CoordinatorError> {
    let unc = UncertaintyModel::new(cfg)?;
    let layout = IndexLayout::new(cfg);
    let ctx = ModelContext { cfg, unc: &unc, layout: &layout };
    let bounds = McCormickBounds::initial(cfg, &unc);
    let (sol, _) = solve_relaxed_once(ctx, &bounds, ObjectiveForm::Relaxed)?;
    Ok(-sol.objective)
}

// ---------------------------------------------------------------------------
// Ledger and profits
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum ShareDirection {
    ToCommunity,
    FromCommunity,
    None,
}

impl ShareDirection {
    fn of(c: f64) -> Self {
        if c > LEDGER_ZERO {
            ShareDirection::FromCommunity
        } else if c < -LEDGER_ZERO {
            ShareDirection::ToCommunity
        } else {
            ShareDirection::None
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ShareDirection::ToCommunity => "to_community",
            ShareDirection::FromCommunity => "from_community",
            ShareDirection::None => "none",
        }
    }
}

const LEDGER_ZERO: f64 = 1e-6;

/// One allowance-ledger row. Quantities are magnitudes in kg; the direction
/// says which way the shared allowances flowed.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LedgerRow {
    pub participant: String,
    pub shared: f64,
    pub direction: ShareDirection,
    pub sold_to_manager: f64,
    /// Bought from the operator at a fixed price.
    pub purchased: f64,
    pub emissions: f64,
    pub holding: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CarbonLedger {
    pub rows: Vec<LedgerRow>,
    /// Price inside the community (sharing dual), if sharing is on.
    pub sharing_price: Option<f64>,
    pub selling_price: f64,
    pub buying_price: Option<f64>,
    /// Σ c over users and RES.
    pub balance: f64,
}

impl CarbonLedger {
    pub fn total_sold(&self) -> f64 {
        self.rows.iter().map(|r| r.sold_to_manager).sum()
    }

    pub fn total_held(&self) -> f64 {
        self.rows.iter().map(|r| r.holding).sum()
    }
}

pub fn carbon_ledger(outcome: &MarketOutcome, cfg: &ScenarioConfig) -> Result<CarbonLedger, CoordinatorError> {
    let unc = UncertaintyModel::new(cfg)?;
    let s = &outcome.state;
    let nu = cfg.n_users();
    let ce = s.user_emissions(cfg);
    let held = s.holdings(cfg);
    let fixed = match cfg.carbon {
        CarbonMarket::FixedPrice { buy_price } => Some(buy_price),
        CarbonMarket::Sharing => None,
    };
    let mut rows = Vec::new();
    for i in 0..nu {
        rows.push(row(cfg.users[i].name.clone(), s.c[i], s.c_s[i], fixed.is_some(), ce[i], held.psi[i]));
    }
    for j in 0..cfg.n_res() {
        let c = s.c[nu + j];
        let need = s.res_emission_requirement(cfg, &unc, j);
        rows.push(row(cfg.res[j].name.clone(), c, 0.0, fixed.is_some(), need, held.psi[nu + j]));
    }
    Ok(CarbonLedger {
        rows,
        sharing_price: fixed.is_none().then_some(outcome.duals.prices.theta),
        selling_price: cfg.prices.r_c_sell,
        buying_price: fixed,
        balance: s.carbon_sum(),
    })
}

fn row(name: String, c: f64, sold: f64, fixed: bool, emissions: f64, holding: f64) -> LedgerRow {
    let (shared, direction, purchased) = if fixed {
        (0.0, ShareDirection::None, c.max(0.0))
    } else {
        (c.abs(), ShareDirection::of(c), 0.0)
    };
    LedgerRow { participant: name, shared, direction, sold_to_manager: sold, purchased, emissions, holding }
}

/// Money flows of one participant, positive when received.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProfitRow {
    pub participant: String,
    pub energy: f64,
    pub reserve: f64,
    pub flexibility: f64,
    pub allowances: f64,
    /// Sales to the manager (energy or allowances).
    pub external: f64,
    /// Utility (users) or negated expected cost (CGs).
    pub own: f64,
    pub total: f64,
}

/// Profit decomposition at the prices π^e = −υ, π^u = −η, π^d = −λ, π^c = θ.
pub fn profits(outcome: &MarketOutcome, cfg: &ScenarioConfig) -> Result<Vec<ProfitRow>, CoordinatorError> {
    let unc = UncertaintyModel::new(cfg)?;
    let s = &outcome.state;
    let p = &outcome.duals.prices;
    let ob = crate::market_model::relaxed_objective(s, cfg, &unc);
    let (nu, nr, ng) = (cfg.n_users(), cfg.n_res(), cfg.n_cgs());
    let sum_t = |f: &dyn Fn(usize) -> f64| (0..cfg.hours).map(f).sum::<f64>();
    let theta = if sharing_enabled(cfg.carbon) { p.theta } else { 0.0 };
    let buy = match cfg.carbon {
        CarbonMarket::FixedPrice { buy_price } => buy_price,
        CarbonMarket::Sharing => 0.0,
    };
    let mut out = Vec::new();
    for i in 0..nu {
        let energy = -sum_t(&|t| (0..ng + nr).map(|k| p.upsilon[t][(i, k)] * s.eb[t][(i, k)]).sum());
        let flexibility = -sum_t(&|t| (0..nr).map(|j| p.lambda[t][(i, j)] * s.b[t][(i, j)]).sum());
        let allowances = -theta * s.c[i] - buy * s.c[i];
        let external = cfg.prices.r_c_sell * s.c_s[i];
        let own = -(ob.user[i] + external - buy * s.c[i]);
        out.push(profit_row(cfg.users[i].name.clone(), energy, 0.0, flexibility, allowances, external, own));
    }
    for j in 0..nr {
        let col = ng + j;
        let energy = -sum_t(&|t| (0..nu).map(|u| p.upsilon[t][(u, col)] * s.es[t][(u, col)]).sum());
        let reserve = -sum_t(&|t| (0..ng).map(|g| p.eta[t][(g, j)] * s.a_r[t][(g, j)]).sum());
        let flexibility = -sum_t(&|t| (0..nu).map(|u| p.lambda[t][(u, j)] * s.b_r[t][(u, j)]).sum());
        let c = s.c[nu + j];
        let allowances = -theta * c - buy * c;
        let external = sum_t(&|t| cfg.prices.r_e[t] * s.p_hat[(j, t)]);
        out.push(profit_row(cfg.res[j].name.clone(), energy, reserve, flexibility, allowances, external, 0.0));
    }
    for g in 0..ng {
        let energy = -sum_t(&|t| (0..nu).map(|u| p.upsilon[t][(u, g)] * s.es[t][(u, g)]).sum());
        let reserve = -sum_t(&|t| (0..nr).map(|j| p.eta[t][(g, j)] * s.a[t][(g, j)]).sum());
        out.push(profit_row(cfg.cgs[g].name.clone(), energy, reserve, 0.0, 0.0, 0.0, -ob.cg[g]));
    }
    Ok(out)
}

fn profit_row(name: String, energy: f64, reserve: f64, flexibility: f64, allowances: f64, external: f64, own: f64) -> ProfitRow {
    ProfitRow {
        participant: name,
        energy,
        reserve,
        flexibility,
        allowances,
        external,
        own,
        total: energy + reserve + flexibility + allowances + external + own,
    }
}

// ---------------------------------------------------------------------------
// Audits
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChanceRecord {
    /// e.g. `cg_max[MT1]@7`, `user_min[U2]@19`, `res_emission[PV1]`.
    pub constraint: String,
    pub frequency: f64,
    pub epsilon: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EquilibriumRecord {
    pub participant: String,
    /// Fixed-price objective at the cleared decision.
    pub cleared: f64,
    /// Fixed-price objective at the best response.
    pub best_response: f64,
    pub deviation: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct AuditReport {
    pub chance: Vec<ChanceRecord>,
    pub equilibrium: Vec<EquilibriumRecord>,
    pub brute_force_gap: Option<f64>,
}

impl AuditReport {
    pub fn max_violation_frequency(&self) -> f64 {
        self.chance.iter().map(|r| r.frequency).fold(0.0, f64::max)
    }

    pub fn max_deviation(&self) -> f64 {
        self.equilibrium.iter().map(|r| r.deviation).fold(0.0, f64::max)
    }

    /// Chance constraints whose empirical frequency exceeds their ε.
    pub fn violated(&self) -> impl Iterator<Item = &ChanceRecord> {
        self.chance.iter().filter(|r| r.frequency > r.epsilon)
    }
}

/// Re-solves every agent's problem at the cleared prices with no proximal
/// terms and compares with the cleared decision. Deviation is relative,
/// with denominator max(|cleared|, 1).
pub fn verify_equilibrium(outcome: &MarketOutcome, cfg: &ScenarioConfig) -> Result<AuditReport, CoordinatorError> {
    verify_equilibrium_at(outcome, cfg, &outcome.duals.prices)
}

/// As [`verify_equilibrium`] but at an arbitrary price set.
pub fn verify_equilibrium_at(
    outcome: &MarketOutcome,
    cfg: &ScenarioConfig,
    prices: &PriceSet,
) -> Result<AuditReport, CoordinatorError> {
    let unc = UncertaintyModel::new(cfg)?;
    let layout = IndexLayout::new(cfg);
    let ctx = ModelContext { cfg, unc: &unc, layout: &layout };
    let globals = GlobalAverages::zeros(&layout);
    let bc = Broadcast {
        prices,
        globals: &globals,
        previous: &outcome.state,
        penalties: Penalties { rho: 0.0, gamma: 0.0, tau: 0.0, phi: 0.0 },
        sharing: sharing_enabled(cfg.carbon),
    };
    let bounds = &outcome.bounds;
    let records = cfg
        .participants()
        .par_iter()
        .map(|&who| {
            let (prob, blk) = match who.kind {
                ParticipantKind::User => user_problem(who.index, ctx, bounds, &bc, ObjectiveForm::Relaxed),
                ParticipantKind::Res => res_problem(who.index, ctx, &bc),
                ParticipantKind::Cg => cg_problem(who.index, ctx, bounds, &bc, ObjectiveForm::Relaxed),
            };
            let x = outcome.state.block_values(&layout, who);
            debug_assert_eq!(x.len(), blk.len());
            let cleared = prob.objective_at(&x);
            let sol = if who.kind == ParticipantKind::User { prob.solve_with_binary(blk.identity()).0 } else { prob.solve() };
            if !sol.is_optimal() {
                return Err(CoordinatorError::Agent(crate::agents::AgentError::Solve {
                    who: who.to_string(),
                    status: sol.status,
                }));
            }
            let best = sol.objective;
            Ok(EquilibriumRecord {
                participant: cfg.participant_name(who).to_string(),
                cleared,
                best_response: best,
                deviation: (cleared - best).max(0.0) / cleared.abs().max(1.0),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(AuditReport { equilibrium: records, ..Default::default() })
}

/// Realized setpoints under sampled forecast errors: p̃_g = p_g − A·ω,
/// p̃_u = p_u + B·ω, and RES emissions −Σ_t m_t ω_t.
pub fn monte_carlo_audit(
    outcome: &MarketOutcome,
    cfg: &ScenarioConfig,
    n_samples: usize,
    seed: u64,
) -> Result<AuditReport, CoordinatorError> {
    let unc = UncertaintyModel::new(cfg)?;
    let s = &outcome.state;
    let (nu, nr, ng, hours) = (cfg.n_users(), cfg.n_res(), cfg.n_cgs(), cfg.hours);
    let mut cg_hits = DMatrix::<u64>::zeros(ng, hours);
    let mut user_hits = DMatrix::<u64>::zeros(nu, hours);
    let mut res_hits = vec![0u64; nr];
    let m_rows: Vec<Vec<f64>> = (0..nr).map(|j| s.res_emission_row(cfg, j)).collect();
    let tol = 1e-7;
    let mut sampler = unc.sampler(seed);
    let mut emis = vec![0.0; nr];
    for _ in 0..n_samples {
        emis.iter_mut().for_each(|e| *e = 0.0);
        for t in 0..hours {
            let moms: Vec<_> = (0..nr).map(|j| unc.moments[j][t]).collect();
            let w = DVector::from_vec(sampler.draw_slice(&moms));
            let shift_g = &s.a[t] * &w;
            for g in 0..ng {
                if s.p_g[(g, t)] - shift_g[g] > cfg.cgs[g].p_max[t] + tol {
                    cg_hits[(g, t)] += 1;
                }
            }
            let shift_u = &s.b[t] * &w;
            for i in 0..nu {
                if s.p_u[(i, t)] + shift_u[i] < cfg.users[i].p_min[t] - tol {
                    user_hits[(i, t)] += 1;
                }
            }
            for j in 0..nr {
                emis[j] -= m_rows[j][t] * w[j];
            }
        }
        for j in 0..nr {
            if emis[j] > s.c[nu + j] + tol {
                res_hits[j] += 1;
            }
        }
    }
    let n = n_samples.max(1) as f64;
    let mut chance = Vec::new();
    for g in 0..ng {
        for t in 0..hours {
            chance.push(ChanceRecord {
                constraint: format!("cg_max[{}]@{t}", cfg.cgs[g].name),
                frequency: cg_hits[(g, t)] as f64 / n,
                epsilon: cfg.cgs[g].epsilon,
            });
        }
    }
    for i in 0..nu {
        for t in 0..hours {
            chance.push(ChanceRecord {
                constraint: format!("user_min[{}]@{t}", cfg.users[i].name),
                frequency: user_hits[(i, t)] as f64 / n,
                epsilon: cfg.users[i].epsilon,
            });
        }
    }
    for j in 0..nr {
        chance.push(ChanceRecord {
            constraint: format!("res_emission[{}]", cfg.res[j].name),
            frequency: res_hits[j] as f64 / n,
            epsilon: cfg.res[j].epsilon,
        });
    }
    Ok(AuditReport { chance, ..Default::default() })
}

/// Sampled versus closed-form expected generation cost at one (p, A row).
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CostCheck {
    pub closed_form: f64,
    pub sample_mean: f64,
    pub std_error: f64,
}

impl CostCheck {
    pub fn z_score(&self) -> f64 {
        if self.std_error == 0.0 {
            if (self.sample_mean - self.closed_form).abs() < 1e-12 { 0.0 } else { f64::INFINITY }
        } else {
            (self.sample_mean - self.closed_form).abs() / self.std_error
        }
    }
}

/// Monte Carlo estimate of E[C(p − A·ω)] for CG g at hour t.
pub fn expected_cost_check(
    cfg: &ScenarioConfig,
    unc: &UncertaintyModel,
    g: usize,
    t: usize,
    p: f64,
    a_row: &[f64],
    n_samples: usize,
    seed: u64,
) -> CostCheck {
    let cg = &cfg.cgs[g];
    let moms: Vec<_> = (0..cfg.n_res()).map(|j| unc.moments[j][t]).collect();
    let a = RowDVector::from_row_slice(a_row);
    let mut sampler = unc.sampler(seed);
    let (mut sum, mut sum2) = (0.0, 0.0);
    for _ in 0..n_samples {
        let w = DVector::from_vec(sampler.draw_slice(&moms));
        let pt = p - (&a * &w)[0];
        let c = cg.c2 * pt * pt + cg.c1 * pt + cg.c0;
        sum += c;
        sum2 += c * c;
    }
    let n = n_samples as f64;
    let mean = sum / n;
    let var = (sum2 / n - mean * mean).max(0.0) * n / (n - 1.0).max(1.0);
    CostCheck { closed_form: cg_expected_cost(cg, p, a_row, unc, t), sample_mean: mean, std_error: (var / n).sqrt() }
}

// ---------------------------------------------------------------------------
// Brute-force oracle
// ---------------------------------------------------------------------------

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum OracleError {
    #[error("grid oracle supports at most 2 participants per kind and 2 hours")]
    TooLarge,
    #[error("no grid point is feasible")]
    Infeasible,
    #[error(transparent)]
    Uncertainty(#[from] crate::uncertainty::UncertaintyError),
}

/// One feasible hourly grid point.
struct HourPoint {
    value: f64,
    /// Per-user emissions this hour.
    ce: Vec<f64>,
    /// Per-RES reserve emission weight m_t.
    m: Vec<f64>,
}

fn axis(hi: f64, steps: usize) -> Vec<f64> {
    if hi <= 0.0 {
        return vec![0.0];
    }
    (0..=steps).map(|k| hi * k as f64 / steps as f64).collect()
}

/// Compositions of 1 into `parts` non-negative shares on a grid of `steps`.
fn simplex(parts: usize, steps: usize) -> Vec<Vec<f64>> {
    fn rec(parts: usize, left: usize, steps: usize, cur: &mut Vec<f64>, out: &mut Vec<Vec<f64>>) {
        if parts == 1 {
            cur.push(left as f64 / steps as f64);
            out.push(cur.clone());
            cur.pop();
            return;
        }
        for k in 0..=left {
            cur.push(k as f64 / steps as f64);
            rec(parts - 1, left - k, steps, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if parts > 0 {
        rec(parts, steps, steps, &mut Vec::new(), &mut out);
    }
    out
}

fn cartesian(axes: &[Vec<f64>]) -> Vec<Vec<f64>> {
    axes.iter().fold(vec![Vec::new()], |acc, ax| {
        acc.iter()
            .flat_map(|prefix| {
                ax.iter().map(move |&v| {
                    let mut p = prefix.clone();
                    p.push(v);
                    p
                })
            })
            .collect()
    })
}

/// Grid search over the exact (bilinear) market: every bilateral purchase on
/// `steps` points per axis and every participation-factor split on a simplex
/// grid of `steps`. Carbon quantities are optimized in closed form given
/// the trades. Returns the best feasible welfare, a lower bound on the
/// exact optimum.
pub fn brute_force_oracle(cfg: &ScenarioConfig, steps: usize) -> Result<f64, OracleError> {
    let (nu, nr, ng, hours) = (cfg.n_users(), cfg.n_res(), cfg.n_cgs(), cfg.hours);
    if nu > 2 || nr > 2 || ng > 2 || hours > 2 {
        return Err(OracleError::TooLarge);
    }
    let unc = UncertaintyModel::new(cfg)?;
    let steps = steps.max(1);
    let per_hour: Vec<Vec<HourPoint>> = (0..hours).map(|t| hour_points(cfg, &unc, t, steps)).collect();
    if per_hour.iter().any(|h| h.is_empty()) {
        return Err(OracleError::Infeasible);
    }
    let mut best = f64::NEG_INFINITY;
    let mut idx = vec![0usize; hours];
    loop {
        let pts: Vec<&HourPoint> = idx.iter().enumerate().map(|(t, &k)| &per_hour[t][k]).collect();
        if let Some(carbon) = carbon_value(cfg, &unc, &pts) {
            let w = pts.iter().map(|p| p.value).sum::<f64>() + carbon;
            best = best.max(w);
        }
        let mut h = 0;
        loop {
            if h == hours {
                return if best.is_finite() { Ok(best) } else { Err(OracleError::Infeasible) };
            }
            idx[h] += 1;
            if idx[h] < per_hour[h].len() {
                break;
            }
            idx[h] = 0;
            h += 1;
        }
    }
}

fn hour_points(cfg: &ScenarioConfig, unc: &UncertaintyModel, t: usize, steps: usize) -> Vec<HourPoint> {
    let (nu, nr, ng) = (cfg.n_users(), cfg.n_res(), cfg.n_cgs());
    let slice = &unc.slices[t];
    let rf = &unc.slice_factors[t];
    // purchases e[i][s], sellers CGs then RES
    let mut axes = Vec::new();
    for u in &cfg.users {
        for g in &cfg.cgs {
            axes.push(axis(u.p_max[t].min(g.p_max[t]), steps));
        }
        for r in &cfg.res {
            axes.push(axis(u.p_max[t].min(r.forecast[t]), steps));
        }
    }
    let trades = cartesian(&axes);
    let parts = ng + if cfg.flexibility { nu } else { 0 };
    let shares = simplex(parts, steps);
    let factor_sets = cartesian(&vec![(0..shares.len()).map(|k| k as f64).collect::<Vec<_>>(); nr]);
    let ns = ng + nr;
    let mut out = Vec::new();
    for e in &trades {
        let p_u: Vec<f64> = (0..nu).map(|i| e[i * ns..(i + 1) * ns].iter().sum()).collect();
        let p_g: Vec<f64> = (0..ng).map(|g| (0..nu).map(|i| e[i * ns + g]).sum()).collect();
        let p_r: Vec<f64> = (0..nr).map(|j| (0..nu).map(|i| e[i * ns + ng + j]).sum()).collect();
        let ok = (0..nu).all(|i| p_u[i] <= cfg.users[i].p_max[t] + 1e-9)
            && (0..ng).all(|g| p_g[g] >= cfg.cgs[g].p_min[t] - 1e-9 && p_g[g] <= cfg.cgs[g].p_max[t] + 1e-9)
            && (0..nr).all(|j| p_r[j] <= cfg.res[j].forecast[t] + 1e-9);
        if !ok {
            continue;
        }
        let ce: Vec<f64> = (0..nu).map(|i| (0..ng).map(|g| cfg.cgs[g].sigma * e[i * ns + g]).sum()).collect();
        let res_value: f64 = (0..nr).map(|j| cfg.prices.r_e[t] * (cfg.res[j].forecast[t] - p_r[j])).sum();
        for fs in &factor_sets {
            // a[g][j], b[i][j]
            let mut a = DMatrix::zeros(ng, nr);
            let mut b = DMatrix::zeros(nu, nr);
            for j in 0..nr {
                let sh = &shares[fs[j] as usize];
                for g in 0..ng {
                    a[(g, j)] = sh[g];
                }
                if cfg.flexibility {
                    for i in 0..nu {
                        b[(i, j)] = sh[ng + i];
                    }
                }
            }
            let mut value = res_value;
            let mut feasible = true;
            for g in 0..ng {
                let row = a.row(g).into_owned();
                let pi = (&row * &slice.m)[0];
                let s = (rf * row.transpose()).norm();
                let c = &cfg.cgs[g];
                if z_factor(c.epsilon) * s > c.p_max[t] - p_g[g] + pi + 1e-9 {
                    feasible = false;
                    break;
                }
                value -= c.c2 * (p_g[g] - pi).powi(2) + c.c1 * (p_g[g] - pi) + c.c0 + c.c2 * s * s;
            }
            if !feasible {
                continue;
            }
            for i in 0..nu {
                let row = b.row(i).into_owned();
                let pi = (&row * &slice.m)[0];
                let s = (rf * row.transpose()).norm();
                let u = &cfg.users[i];
                if z_factor(u.epsilon) * s > p_u[i] + pi - u.p_min[t] + 1e-9 {
                    feasible = false;
                    break;
                }
                value += u.d2 * (p_u[i] + pi).powi(2) + u.d1 * (p_u[i] + pi) + u.d2 * s * s;
            }
            if !feasible {
                continue;
            }
            let m: Vec<f64> = (0..nr).map(|j| (0..ng).map(|g| cfg.cgs[g].sigma * a[(g, j)]).sum()).collect();
            out.push(HourPoint { value, ce: ce.clone(), m });
        }
    }
    out
}

/// Best carbon revenue given the trades, or None when the allowances
/// cannot cover the emissions.
fn carbon_value(cfg: &ScenarioConfig, unc: &UncertaintyModel, pts: &[&HourPoint]) -> Option<f64> {
    let (nu, nr) = (cfg.n_users(), cfg.n_res());
    let req: Vec<f64> = (0..nr)
        .map(|j| {
            let m = DVector::from_iterator(pts.len(), pts.iter().map(|p| p.m[j]));
            let h = &unc.horizons[j];
            let mean: f64 = (0..m.len()).map(|t| h.mean_row[t] * m[t]).sum();
            (-mean + z_factor(cfg.res[j].epsilon) * (&unc.horizon_factors[j] * m).norm()).max(0.0)
        })
        .collect();
    let surplus: Vec<f64> = (0..nu).map(|i| cfg.users[i].psi0 - pts.iter().map(|p| p.ce[i]).sum::<f64>()).collect();
    let r_c = cfg.prices.r_c_sell;
    match cfg.carbon {
        CarbonMarket::Sharing => {
            let give: f64 = surplus.iter().filter(|&&s| s > 0.0).sum();
            let need: f64 = surplus.iter().filter(|&&s| s < 0.0).map(|s| -s).sum::<f64>() + req.iter().sum::<f64>();
            (give >= need - 1e-9).then(|| r_c * (give - need).max(0.0))
        }
        CarbonMarket::FixedPrice { buy_price } => {
            let users: f64 = surplus.iter().map(|&s| if s >= 0.0 { r_c * s } else { buy_price * s }).sum();
            Some(users - buy_price * req.iter().sum::<f64>())
        }
    }
}

// ---------------------------------------------------------------------------
// Experiments
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub r_e: f64,
    pub r_c: f64,
    pub welfare: f64,
    pub allowances_sold: f64,
    pub pv_sold: f64,
    pub converged: bool,
    pub error: Option<String>,
}

/// One market per (r_e, r_c) grid point; failures are recorded per row.
pub fn run_sweep(cfg: &ScenarioConfig, r_e_grid: &[f64], r_c_grid: &[f64], mode: SolveMode) -> Vec<SweepRow> {
    let points: Vec<(f64, f64)> = r_e_grid.iter().flat_map(|&e| r_c_grid.iter().map(move |&c| (e, c))).collect();
    points
        .par_iter()
        .map(|&(r_e, r_c)| {
            let mut c = cfg.clone();
            c.prices.r_e = vec![r_e; c.hours];
            c.prices.r_c_sell = r_c;
            match solve(&c, mode) {
                Ok(o) => SweepRow {
                    r_e,
                    r_c,
                    welfare: o.welfare,
                    allowances_sold: o.state.c_s.iter().sum(),
                    pv_sold: o.state.p_hat.sum(),
                    converged: o.converged(),
                    error: None,
                },
                Err(e) => SweepRow {
                    r_e,
                    r_c,
                    welfare: f64::NAN,
                    allowances_sold: f64::NAN,
                    pv_sold: f64::NAN,
                    converged: false,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect()
}

/// Evenly spaced grid including both ends.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect(),
    }
}

pub const CASE3_BUY_PRICE: f64 = 0.009;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaseRow {
    pub case: String,
    pub welfare: f64,
    pub allowances_held: f64,
    pub converged: bool,
}

/// The three market designs: full model, no user flexibility, and
/// fixed-price allowance purchases without sharing.
pub fn case_configs(cfg: &ScenarioConfig) -> Vec<(String, ScenarioConfig)> {
    let full = cfg.clone();
    let mut no_flex = cfg.clone();
    no_flex.flexibility = false;
    let mut fixed = cfg.clone();
    fixed.carbon = CarbonMarket::FixedPrice { buy_price: CASE3_BUY_PRICE };
    vec![("Case 1".into(), full), ("Case 2".into(), no_flex), ("Case 3".into(), fixed)]
}

pub fn run_cases(cfg: &ScenarioConfig, mode: SolveMode) -> Result<Vec<CaseRow>, CoordinatorError> {
    case_configs(cfg)
        .into_par_iter()
        .map(|(name, c)| {
            let o = solve(&c, mode)?;
            let ledger = carbon_ledger(&o, &c)?;
            Ok(CaseRow { case: name, welfare: o.welfare, allowances_held: ledger.total_held(), converged: o.converged() })
        })
        .collect()
}
