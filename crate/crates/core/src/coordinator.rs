//! The Relax–ADMM–Contraction loop run by the community manager.

use nalgebra::DMatrix;
use rayon::prelude::*;
use thiserror::Error;

use crate::agents::{solve_participant, sharing_enabled, AgentError, Broadcast, GlobalAverages, LocalDecision, PriceSet};
use crate::market_model::{mccormick_errors, welfare, McCormickBounds, ModelContext, TradeState};
use crate::scenario::{AlgoConfig, IndexLayout, Penalties, ScenarioConfig};
use crate::uncertainty::{UncertaintyError, UncertaintyModel};

#[derive(Debug, Error)]
pub enum CoordinatorError {
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
    #[error("{0}")]
    Model(#[from] crate::market_model::ModelError),
    #[error("centralized problem {0:?}")]
    Centralized(crate::conic::SolveStatus),
}

/// Dual prices held by the coordinator plus the penalty parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DualState {
    pub prices: PriceSet,
    pub penalties: Penalties,
    pub k: usize,
}

impl DualState {
    pub fn new(layout: &IndexLayout, penalties: Penalties) -> Self {
        Self { prices: PriceSet::zeros(layout), penalties, k: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct ResidualReport {
    pub round: usize,
    pub iteration: usize,
    pub se: f64,
    pub sr: f64,
    pub sd: f64,
    pub sc: f64,
    pub te: f64,
    pub tr: f64,
    pub td: f64,
    pub tc: f64,
    /// Squared movement of the local copies between iterations, per block.
    pub me: f64,
    pub mr: f64,
    pub md: f64,
    pub mc: f64,
    /// Squared norm of the local copies, per block.
    pub qe: f64,
    pub qr: f64,
    pub qd: f64,
    pub qc: f64,
    pub err_g: f64,
    pub err_u: f64,
    /// Penalties in force when the iterate was computed.
    pub penalties: Penalties,
}

fn frob2(ms: &[DMatrix<f64>]) -> f64 {
    ms.iter().map(|m| m.norm_squared()).sum()
}

fn diff2(a: &[DMatrix<f64>], b: &[DMatrix<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm_squared()).sum()
}

fn half_sum(a: &[DMatrix<f64>], b: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
    a.iter().zip(b).map(|(x, y)| (x + y) * 0.5).collect()
}

/// Consensus averages of the current local decisions.
pub fn update_globals(state: &TradeState) -> GlobalAverages {
    let n = state.c.len();
    GlobalAverages {
        e_hat: half_sum(&state.eb, &state.es),
        a_hat: half_sum(&state.a, &state.a_r),
        b_hat: half_sum(&state.b, &state.b_r),
        c_bar: if n == 0 { 0.0 } else { state.c.iter().sum::<f64>() / n as f64 },
    }
}

/// Dual ascent step on every coupling constraint.
pub fn update_duals(ds: &DualState, g: &GlobalAverages, sharing: bool) -> DualState {
    let pen = ds.penalties;
    let step = |d: &[DMatrix<f64>], avg: &[DMatrix<f64>], s: f64| -> Vec<DMatrix<f64>> {
        d.iter().zip(avg).map(|(d, a)| d + a * s).collect()
    };
    DualState {
        prices: PriceSet {
            upsilon: step(&ds.prices.upsilon, &g.e_hat, pen.gamma),
            eta: step(&ds.prices.eta, &g.a_hat, pen.tau),
            lambda: step(&ds.prices.lambda, &g.b_hat, pen.rho),
            theta: if sharing { ds.prices.theta + pen.phi * g.c_bar } else { ds.prices.theta },
        },
        penalties: pen,
        k: ds.k + 1,
    }
}

/// Primal residuals se, sr, sd, sc of a state and dual residuals te, tr,
/// td, tc between consecutive averages.
pub fn residuals(
    state: &TradeState,
    prev: &TradeState,
    new: &GlobalAverages,
    old: &GlobalAverages,
    sharing: bool,
) -> ResidualReport {
    let mc = if sharing { state.c.iter().zip(&prev.c).map(|(a, b)| (a - b).powi(2)).sum() } else { 0.0 };
    let (err_g, err_u) = mccormick_errors(state);
    let sc = if sharing { state.carbon_sum().powi(2) } else { 0.0 };
    let tc = if sharing { (new.c_bar - old.c_bar).powi(2) } else { 0.0 };
    ResidualReport {
        round: 0,
        iteration: 0,
        se: frob2(&state.energy_balance_residual()),
        sr: frob2(&state.reserve_residual()),
        sd: frob2(&state.flexibility_residual()),
        sc,
        te: diff2(&new.e_hat, &old.e_hat),
        tr: diff2(&new.a_hat, &old.a_hat),
        td: diff2(&new.b_hat, &old.b_hat),
        tc,
        me: diff2(&state.eb, &prev.eb) + diff2(&state.es, &prev.es),
        mr: diff2(&state.a, &prev.a) + diff2(&state.a_r, &prev.a_r),
        md: diff2(&state.b, &prev.b) + diff2(&state.b_r, &prev.b_r),
        mc,
        qe: frob2(&state.eb) + frob2(&state.es),
        qr: frob2(&state.a) + frob2(&state.a_r),
        qd: frob2(&state.b) + frob2(&state.b_r),
        qc: if sharing { state.c.iter().map(|x| x * x).sum() } else { 0.0 },
        err_g,
        err_u,
        penalties: Penalties::default(),
    }
}

pub fn check_stopping(rr: &ResidualReport, algo: &AlgoConfig) -> bool {
    let p = &algo.tol_primal;
    let d = &algo.tol_dual;
    rr.se <= p.e
        && rr.sr <= p.r
        && rr.sd <= p.d
        && rr.sc <= p.c
        && rr.te <= d.e
        && rr.tr <= d.r
        && rr.td <= d.d
        && rr.tc <= d.c
        && (!algo.movement_check || movement_settled(rr, algo))
}

/// Local copies stopped moving between iterations.
fn movement_settled(rr: &ResidualReport, algo: &AlgoConfig) -> bool {
    let m = &algo.tol_movement;
    rr.me <= m.e && rr.mr <= m.r && rr.md <= m.d && rr.mc <= m.c
}

/// Relative residual balancing per block: ‖r‖/‖x‖ against pen·‖Δx‖/‖y‖,
/// doubling or halving the penalty at a ratio of 10. Duals are unscaled,
/// so they carry over unchanged.
pub fn adapt_penalty(ds: &DualState, rr: &ResidualReport) -> DualState {
    fn balance(pen: f64, primal2: f64, scale2: f64, moved2: f64, price: f64) -> f64 {
        let r = primal2.sqrt() / scale2.sqrt().max(PRIMAL_SCALE_FLOOR);
        let s = pen * moved2.sqrt() / price.max(DUAL_SCALE_FLOOR);
        if r > 10.0 * s {
            pen * 2.0
        } else if s > 10.0 * r {
            pen / 2.0
        } else {
            pen
        }
    }
    let p = ds.penalties;
    let y = &ds.prices;
    let mut out = ds.clone();
    out.penalties = Penalties {
        gamma: balance(p.gamma, rr.se, rr.qe, rr.me, frob2(&y.upsilon).sqrt()),
        tau: balance(p.tau, rr.sr, rr.qr, rr.mr, frob2(&y.eta).sqrt()),
        rho: balance(p.rho, rr.sd, rr.qd, rr.md, frob2(&y.lambda).sqrt()),
        phi: balance(p.phi, rr.sc, rr.qc, rr.mc, y.theta.abs()),
    };
    out
}

const PRIMAL_SCALE_FLOOR: f64 = 1e-6;
const DUAL_SCALE_FLOOR: f64 = 1e-9;

/// Shrinks the McCormick boxes around the last solution and intersects them
/// with the initial boxes. π is non-positive, so its factors are swapped.
pub fn contract_bounds(bounds: &McCormickBounds, state: &TradeState, eps: f64) -> McCormickBounds {
    let mut out = bounds.clone();
    let shrink = |b: &mut crate::market_model::BoundBox,
                  init: &crate::market_model::BoundBox,
                  p: &DMatrix<f64>,
                  pi: &DMatrix<f64>| {
        for k in 0..p.len() {
            let (ps, qs) = (p[k], pi[k]);
            b.p_lo[k] = ((1.0 - eps) * ps).max(init.p_lo[k]);
            b.p_hi[k] = ((1.0 + eps) * ps).min(init.p_hi[k]);
            b.pi_lo[k] = ((1.0 + eps) * qs).max(init.pi_lo[k]);
            b.pi_hi[k] = ((1.0 - eps) * qs).min(init.pi_hi[k]);
            // solver noise can leave the point a hair outside its box
            if b.p_lo[k] > b.p_hi[k] {
                let m = ps.clamp(init.p_lo[k], init.p_hi[k]);
                b.p_lo[k] = m;
                b.p_hi[k] = m;
            }
            if b.pi_lo[k] > b.pi_hi[k] {
                let m = qs.clamp(init.pi_lo[k], init.pi_hi[k]);
                b.pi_lo[k] = m;
                b.pi_hi[k] = m;
            }
        }
    };
    shrink(&mut out.cg, &bounds.initial_cg, &state.p_g, &state.pi_g);
    shrink(&mut out.user, &bounds.initial_user, &state.p_u, &state.pi_u);
    out.eps = (bounds.eps - bounds.kappa).max(0.0);
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunStatus {
    Converged,
    /// ADMM hit its iteration cap in some round.
    AdmmIterLimit,
    /// McCormick errors still above tolerance after the last round.
    RoundLimit,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoundSummary {
    pub round: usize,
    pub iterations: usize,
    pub admm_converged: bool,
    pub err_g: f64,
    pub err_u: f64,
    /// Contraction scalar used to build this round's bounds (none for the
    /// first round).
    pub eps: Option<f64>,
    pub welfare: f64,
}

/// Result of a market clearing, either mode.
#[derive(Clone, Debug)]
pub struct MarketOutcome {
    pub state: TradeState,
    pub duals: DualState,
    pub welfare: f64,
    pub residuals: Vec<ResidualReport>,
    pub rounds: Vec<RoundSummary>,
    pub bounds: McCormickBounds,
    pub status: RunStatus,
}

impl MarketOutcome {
    pub fn converged(&self) -> bool {
        self.status == RunStatus::Converged
    }

    pub fn total_iterations(&self) -> usize {
        self.rounds.iter().map(|r| r.iterations).sum()
    }

    pub fn final_residual(&self) -> Option<&ResidualReport> {
        self.residuals.last()
    }
}

/// Hook called after every inner iteration.
pub trait Observer {
    fn iteration(&mut self, _report: &ResidualReport, _penalties: &Penalties) {}
}

impl Observer for () {}

/// One ADMM inner loop. Returns the final state, duals, averages, number of
/// iterations and whether it met the stopping rule.
#[allow(clippy::too_many_arguments)]
fn admm_round(
    ctx: ModelContext,
    bounds: &McCormickBounds,
    mut state: TradeState,
    mut duals: DualState,
    mut globals: GlobalAverages,
    round: usize,
    trace: &mut Vec<ResidualReport>,
    observer: &mut dyn Observer,
) -> Result<(TradeState, DualState, GlobalAverages, usize, bool), CoordinatorError> {
    let cfg = ctx.cfg;
    let algo = &cfg.algo;
    let sharing = sharing_enabled(cfg.carbon);
    let who = cfg.participants();
    for k in 0..algo.max_admm_iters {
        let bc = Broadcast {
            prices: &duals.prices,
            globals: &globals,
            previous: &state,
            penalties: duals.penalties,
            sharing,
        };
        let decisions: Vec<LocalDecision> = who
            .par_iter()
            .map(|&w| solve_participant(w, ctx, bounds, &bc))
            .collect::<Result<Vec<_>, _>>()?;
        let mut next = state.clone();
        for d in &decisions {
            next.absorb_block(ctx.layout, d.owner, &d.values);
        }
        let new_globals = update_globals(&next);
        let mut rr = residuals(&next, &state, &new_globals, &globals, sharing);
        rr.round = round;
        rr.iteration = k;
        rr.penalties = duals.penalties;
        duals = update_duals(&duals, &new_globals, sharing);
        observer.iteration(&rr, &duals.penalties);
        trace.push(rr);
        state = next;
        globals = new_globals;
        if check_stopping(&rr, algo) {
            return Ok((state, duals, globals, k + 1, true));
        }
        if algo.adaptive_penalty {
            duals = adapt_penalty(&duals, &rr);
        }
    }
    Ok((state, duals, globals, algo.max_admm_iters, false))
}

/// Runs the decentralized market to termination.
pub fn run(cfg: &ScenarioConfig) -> Result<MarketOutcome, CoordinatorError> {
    run_with_observer(cfg, &mut ())
}

pub fn run_with_observer(cfg: &ScenarioConfig, observer: &mut dyn Observer) -> Result<MarketOutcome, CoordinatorError> {
    let unc = UncertaintyModel::new(cfg)?;
    let layout = IndexLayout::new(cfg);
    let ctx = ModelContext { cfg, unc: &unc, layout: &layout };
    let mut bounds = McCormickBounds::initial(cfg, &unc);
    let fresh = || (TradeState::zeros(&layout), DualState::new(&layout, cfg.algo.penalties), GlobalAverages::zeros(&layout));
    let (mut state, mut duals, mut globals) = fresh();
    let mut trace = Vec::new();
    let mut rounds = Vec::new();
    let mut status = RunStatus::RoundLimit;
    let mut eps_used = None;
    for n in 0..cfg.algo.max_rounds {
        if n > 0 && !cfg.algo.warm_start {
            (state, duals, globals) = fresh();
        }
        let (s, d, g, iters, ok) = admm_round(ctx, &bounds, state, duals, globals, n, &mut trace, observer)?;
        (state, duals, globals) = (s, d, g);
        let (err_g, err_u) = mccormick_errors(&state);
        rounds.push(RoundSummary {
            round: n,
            iterations: iters,
            admm_converged: ok,
            err_g,
            err_u,
            eps: eps_used,
            welfare: welfare(&state, cfg, &unc),
        });
        if !ok {
            status = RunStatus::AdmmIterLimit;
            break;
        }
        if err_g <= cfg.algo.delta_g && err_u <= cfg.algo.delta_u {
            status = RunStatus::Converged;
            break;
        }
        eps_used = Some(bounds.eps);
        bounds = contract_bounds(&bounds, &state, bounds.eps);
    }
    let w = welfare(&state, cfg, &unc);
    Ok(MarketOutcome { state, duals, welfare: w, residuals: trace, rounds, bounds, status })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::bundled_reference_case;
    use approx::assert_relative_eq;

    fn tiny_layout() -> IndexLayout {
        IndexLayout::with_dims(1, 3, 1, 1)
    }

    #[test]
    fn globals_are_pair_means() {
        let layout = IndexLayout::with_dims(1, 1, 1, 1);
        let mut s = TradeState::zeros(&layout);
        s.a[0][(0, 0)] = 0.6;
        s.a_r[0][(0, 0)] = -0.5;
        assert_relative_eq!(update_globals(&s).a_hat[0][(0, 0)], 0.05);
        s.a_r[0][(0, 0)] = -0.6;
        assert_eq!(update_globals(&s).a_hat[0][(0, 0)], 0.0);
    }

    #[test]
    fn balanced_sharing_mean_is_zero() {
        let layout = IndexLayout::with_dims(1, 2, 1, 0);
        let mut s = TradeState::zeros(&layout);
        s.c = vec![10.0, -4.0, -6.0];
        assert_eq!(update_globals(&s).c_bar, 0.0);
    }

    #[test]
    fn dual_update_identity() {
        let layout = tiny_layout();
        let mut ds = DualState::new(&layout, Penalties::default());
        ds.prices.theta = 0.001;
        let mut g = GlobalAverages::zeros(&layout);
        let same = update_duals(&ds, &g, true);
        assert_eq!(same.prices.theta, 0.001);
        g.c_bar = 0.002;
        g.e_hat[0][(1, 0)] = 0.5;
        let next = update_duals(&ds, &g, true);
        assert_relative_eq!(next.prices.theta, 0.003);
        assert_relative_eq!(next.prices.upsilon[0][(1, 0)], 0.5);
        assert_eq!(next.k, 1);
    }

    #[test]
    fn stopping_thresholds() {
        let algo = AlgoConfig::default();
        let zero = ResidualReport::default();
        assert!(check_stopping(&zero, &algo));
        let mut rr = zero;
        rr.sr = 1e-5;
        assert!(!check_stopping(&rr, &algo));
        rr.sr = 1e-7;
        rr.se = 9e-5;
        assert!(check_stopping(&rr, &algo));
    }

    #[test]
    fn penalty_balancing() {
        let layout = tiny_layout();
        let mut ds = DualState::new(&layout, Penalties::default());
        ds.prices.upsilon[0][(0, 0)] = 1.0;
        let rr = |se, me| ResidualReport { se, me, qe: 1.0, ..Default::default() };
        let same = adapt_penalty(&ds, &rr(1e-2, 1e-2));
        assert_eq!(same.penalties.gamma, 1.0);
        let up = adapt_penalty(&ds, &rr(1.0, 1e-3));
        assert_eq!(up.penalties.gamma, 2.0);
        let down = adapt_penalty(&ds, &rr(1e-6, 1.0));
        assert_eq!(down.penalties.gamma, 0.5);
        assert_eq!(down.prices, ds.prices);
    }

    #[test]
    fn balancing_is_relative_to_price_scale() {
        let layout = tiny_layout();
        let mut ds = DualState::new(&layout, Penalties::default());
        ds.prices.upsilon[0][(0, 0)] = 1e-3;
        let out = adapt_penalty(&ds, &ResidualReport { se: 1e-2, me: 1e-2, qe: 1.0, ..Default::default() });
        assert_eq!(out.penalties.gamma, 0.5);
        ds.prices.upsilon[0][(0, 0)] = 1.0;
        let out = adapt_penalty(&ds, &ResidualReport { se: 1e-2, me: 1e-2, qe: 1e4, ..Default::default() });
        assert_eq!(out.penalties.gamma, 0.5);
    }

    #[test]
    fn contraction_examples() {
        let cfg = bundled_reference_case();
        let unc = UncertaintyModel::new(&cfg).unwrap();
        let layout = IndexLayout::new(&cfg);
        let mut b = McCormickBounds::initial(&cfg, &unc);
        b.cg.pi_lo[(0, 0)] = -5.0;
        b.initial_cg.pi_lo[(0, 0)] = -5.0;
        let mut s = TradeState::zeros(&layout);
        s.p_g[(0, 0)] = 100.0;
        s.pi_g[(0, 0)] = -2.0;
        s.p_g[(1, 0)] = 270.0;
        let c = contract_bounds(&b, &s, 0.2);
        assert_relative_eq!(c.cg.p_lo[(0, 0)], 80.0);
        assert_relative_eq!(c.cg.p_hi[(0, 0)], 120.0);
        assert_relative_eq!(c.cg.pi_lo[(0, 0)], -2.4);
        assert_relative_eq!(c.cg.pi_hi[(0, 0)], -1.6);
        let wide = contract_bounds(&b, &s, 5.0);
        assert_eq!(wide.cg.p_hi[(1, 0)], 270.0);
        assert_eq!(wide.cg.p_lo[(1, 0)], 0.0);
        assert_relative_eq!(c.eps, 0.3);
    }
}
