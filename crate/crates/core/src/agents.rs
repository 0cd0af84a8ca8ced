//! Local subproblems of users, renewable agents and conventional generators.
//!
//! Each solver sees only its own parameters and the coordinator's
//! [`Broadcast`]; it is stateless between iterations.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::conic::{ConicProblem, ConicSolution, LinExpr, SolveStatus, Var};
use crate::market_model::{build_cg, build_res, build_user, Block, McCormickBounds, ModelContext, ObjectiveForm, TradeState};
use crate::scenario::{CarbonMarket, IndexLayout, ParticipantId, ParticipantKind, Penalties};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentError {
    #[error("{who}: local problem {status:?}")]
    Solve { who: String, status: SolveStatus },
}

/// Prices per bilateral pair and hour, indexed like the trade matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct PriceSet {
    /// Energy duals υ, users × sellers.
    pub upsilon: Vec<DMatrix<f64>>,
    /// Reserve duals η, CGs × RES.
    pub eta: Vec<DMatrix<f64>>,
    /// Flexibility duals λ, users × RES.
    pub lambda: Vec<DMatrix<f64>>,
    /// Allowance-sharing dual.
    pub theta: f64,
}

impl PriceSet {
    pub fn zeros(layout: &IndexLayout) -> Self {
        let t = layout.hours;
        let (eu, es) = layout.energy_shape();
        let (rg, rr) = layout.reserve_shape();
        let (fu, fr) = layout.flexibility_shape();
        Self {
            upsilon: vec![DMatrix::zeros(eu, es); t],
            eta: vec![DMatrix::zeros(rg, rr); t],
            lambda: vec![DMatrix::zeros(fu, fr); t],
            theta: 0.0,
        }
    }
}

/// Consensus averages Ê, α̂, β̂ and c̄.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalAverages {
    pub e_hat: Vec<DMatrix<f64>>,
    pub a_hat: Vec<DMatrix<f64>>,
    pub b_hat: Vec<DMatrix<f64>>,
    pub c_bar: f64,
}

impl GlobalAverages {
    pub fn zeros(layout: &IndexLayout) -> Self {
        let p = PriceSet::zeros(layout);
        Self { e_hat: p.upsilon, a_hat: p.eta, b_hat: p.lambda, c_bar: 0.0 }
    }
}

/// Everything the coordinator sends out at iteration k.
#[derive(Clone, Debug)]
pub struct Broadcast<'a> {
    pub prices: &'a PriceSet,
    pub globals: &'a GlobalAverages,
    /// k-iterate local copies used by the proximal terms.
    pub previous: &'a TradeState,
    pub penalties: Penalties,
    /// When false the carbon block is priced at fixed operator prices and
    /// carries no sharing terms.
    pub sharing: bool,
}

/// One participant's slice of the trade state, in layout order.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalDecision {
    pub owner: ParticipantId,
    pub values: Vec<f64>,
    /// Optimal value of the local problem, proximal terms included.
    pub objective: f64,
    pub identity: Option<bool>,
}

/// Adds λx + (pen/2)(x − x_prev + avg)².
fn add_prox(prob: &mut ConicProblem, v: Var, price: f64, pen: f64, prev: f64, avg: f64) {
    prob.minimize(LinExpr::term(v, price));
    prob.add_square(pen / 2.0, LinExpr::term(v, 1.0) + LinExpr::constant(avg - prev));
}

fn finish(blk: &Block, sol: ConicSolution, identity: Option<bool>) -> Result<LocalDecision, AgentError> {
    if !sol.is_optimal() {
        return Err(AgentError::Solve { who: blk.owner.to_string(), status: sol.status });
    }
    Ok(LocalDecision { owner: blk.owner, values: blk.vars().map(|v| sol.x[v.0]).collect(), objective: sol.objective, identity })
}

/// User i: negated relaxed utility plus price and proximal terms for its Eb
/// row, B row and allowance quantity. The seller/buyer identity is chosen
/// by enumeration.
pub fn solve_user(
    i: usize,
    ctx: ModelContext,
    bounds: &McCormickBounds,
    bc: &Broadcast,
) -> Result<LocalDecision, AgentError> {
    let (prob, blk) = user_problem(i, ctx, bounds, bc, ObjectiveForm::Relaxed);
    let (sol, id) = prob.solve_with_binary(blk.identity());
    finish(&blk, sol, Some(id))
}

pub(crate) fn user_problem<'a>(
    i: usize,
    ctx: ModelContext<'a>,
    bounds: &McCormickBounds,
    bc: &Broadcast,
    form: ObjectiveForm,
) -> (ConicProblem, Block<'a>) {
    let cfg = ctx.cfg;
    let mut prob = ConicProblem::new();
    let blk = Block::alloc(&mut prob, ctx.layout, ParticipantId::user(i));
    build_user(&mut prob, ctx, bounds, &blk, form);
    let pen = bc.penalties;
    let prev = bc.previous;
    let ng = cfg.n_cgs();
    for t in 0..cfg.hours {
        for g in 0..ng {
            let v = blk.eb(t, ParticipantId::cg(g));
            add_prox(&mut prob, v, bc.prices.upsilon[t][(i, g)], pen.gamma, prev.eb[t][(i, g)], bc.globals.e_hat[t][(i, g)]);
        }
        for j in 0..cfg.n_res() {
            let v = blk.eb(t, ParticipantId::res(j));
            let col = ng + j;
            add_prox(&mut prob, v, bc.prices.upsilon[t][(i, col)], pen.gamma, prev.eb[t][(i, col)], bc.globals.e_hat[t][(i, col)]);
            if cfg.flexibility {
                let v = blk.beta(t, j);
                add_prox(&mut prob, v, bc.prices.lambda[t][(i, j)], pen.rho, prev.b[t][(i, j)], bc.globals.b_hat[t][(i, j)]);
            }
        }
    }
    if bc.sharing {
        add_prox(&mut prob, blk.c(), bc.prices.theta, pen.phi, prev.c[i], bc.globals.c_bar);
    }
    (prob, blk)
}

/// RES j: renewable revenue plus price and proximal terms for its Es column,
/// reserve and flexibility factor columns and allowance quantity.
pub fn solve_res(j: usize, ctx: ModelContext, bc: &Broadcast) -> Result<LocalDecision, AgentError> {
    let (prob, blk) = res_problem(j, ctx, bc);
    let sol = prob.solve();
    finish(&blk, sol, None)
}

pub(crate) fn res_problem<'a>(j: usize, ctx: ModelContext<'a>, bc: &Broadcast) -> (ConicProblem, Block<'a>) {
    let cfg = ctx.cfg;
    let mut prob = ConicProblem::new();
    let blk = Block::alloc(&mut prob, ctx.layout, ParticipantId::res(j));
    build_res(&mut prob, ctx, &blk);
    let pen = bc.penalties;
    let prev = bc.previous;
    let col = cfg.n_cgs() + j;
    for t in 0..cfg.hours {
        for u in 0..cfg.n_users() {
            let v = blk.es(t, u);
            add_prox(&mut prob, v, bc.prices.upsilon[t][(u, col)], pen.gamma, prev.es[t][(u, col)], bc.globals.e_hat[t][(u, col)]);
            if cfg.flexibility {
                let v = blk.beta_r(t, u);
                add_prox(&mut prob, v, bc.prices.lambda[t][(u, j)], pen.rho, prev.b_r[t][(u, j)], bc.globals.b_hat[t][(u, j)]);
            }
        }
        for g in 0..cfg.n_cgs() {
            let v = blk.alpha_r(t, g);
            add_prox(&mut prob, v, bc.prices.eta[t][(g, j)], pen.tau, prev.a_r[t][(g, j)], bc.globals.a_hat[t][(g, j)]);
        }
    }
    if bc.sharing {
        let k = cfg.n_users() + j;
        add_prox(&mut prob, blk.c(), bc.prices.theta, pen.phi, prev.c[k], bc.globals.c_bar);
    }
    (prob, blk)
}

/// CG g: relaxed expected cost plus price and proximal terms for its Es
/// column and reserve row.
pub fn solve_cg(
    g: usize,
    ctx: ModelContext,
    bounds: &McCormickBounds,
    bc: &Broadcast,
) -> Result<LocalDecision, AgentError> {
    let (prob, blk) = cg_problem(g, ctx, bounds, bc, ObjectiveForm::Relaxed);
    let sol = prob.solve();
    finish(&blk, sol, None)
}

pub(crate) fn cg_problem<'a>(
    g: usize,
    ctx: ModelContext<'a>,
    bounds: &McCormickBounds,
    bc: &Broadcast,
    form: ObjectiveForm,
) -> (ConicProblem, Block<'a>) {
    let cfg = ctx.cfg;
    let mut prob = ConicProblem::new();
    let blk = Block::alloc(&mut prob, ctx.layout, ParticipantId::cg(g));
    build_cg(&mut prob, ctx, bounds, &blk, form);
    let pen = bc.penalties;
    let prev = bc.previous;
    for t in 0..cfg.hours {
        for u in 0..cfg.n_users() {
            let v = blk.es(t, u);
            add_prox(&mut prob, v, bc.prices.upsilon[t][(u, g)], pen.gamma, prev.es[t][(u, g)], bc.globals.e_hat[t][(u, g)]);
        }
        for r in 0..cfg.n_res() {
            let v = blk.alpha(t, r);
            add_prox(&mut prob, v, bc.prices.eta[t][(g, r)], pen.tau, prev.a[t][(g, r)], bc.globals.a_hat[t][(g, r)]);
        }
    }
    (prob, blk)
}

/// Dispatches to the solver matching the participant kind.
pub fn solve_participant(
    who: ParticipantId,
    ctx: ModelContext,
    bounds: &McCormickBounds,
    bc: &Broadcast,
) -> Result<LocalDecision, AgentError> {
    match who.kind {
        ParticipantKind::User => solve_user(who.index, ctx, bounds, bc),
        ParticipantKind::Res => solve_res(who.index, ctx, bc),
        ParticipantKind::Cg => solve_cg(who.index, ctx, bounds, bc),
    }
}

/// Whether the broadcast should carry allowance-sharing terms.
pub fn sharing_enabled(market: CarbonMarket) -> bool {
    market == CarbonMarket::Sharing
}
