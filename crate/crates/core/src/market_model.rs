//! Constraints and objective terms of the joint energy, uncertainty and
//! carbon market, plus the McCormick relaxation of the bilinear terms.
//!
//! Builders emit into a [`ConicProblem`] one participant block at a time,
//! so the same code backs the local agent problems and the centralized
//! problem.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::conic::{ConicProblem, LinExpr, Var};
use crate::scenario::{
    CarbonMarket, IndexLayout, ParticipantId, ParticipantKind, ScenarioConfig, SlotKey, VarName,
};
use crate::uncertainty::{z_factor, UncertaintyModel};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("unknown participant {0}")]
    UnknownParticipant(String),
    #[error("inverted bounds for {who} at hour {hour}")]
    InvertedBounds { who: String, hour: usize },
}

// ---------------------------------------------------------------------------
// Trade state
// ---------------------------------------------------------------------------

/// Every decision variable of the market. Energy matrices are
/// users × sellers (CGs then RES), reserve matrices CGs × RES, flexibility
/// matrices users × RES. Setpoint matrices are participants × hours.
#[derive(Clone, Debug, PartialEq)]
pub struct TradeState {
    pub es: Vec<DMatrix<f64>>,
    pub eb: Vec<DMatrix<f64>>,
    pub a: Vec<DMatrix<f64>>,
    pub a_r: Vec<DMatrix<f64>>,
    pub b: Vec<DMatrix<f64>>,
    pub b_r: Vec<DMatrix<f64>>,
    /// Shared allowance quantity, users first then RES. Positive means bought.
    pub c: Vec<f64>,
    pub c_s: Vec<f64>,
    pub id: Vec<bool>,
    pub p_u: DMatrix<f64>,
    pub p_g: DMatrix<f64>,
    pub p_r: DMatrix<f64>,
    pub p_hat: DMatrix<f64>,
    pub pi_u: DMatrix<f64>,
    pub pi_g: DMatrix<f64>,
    pub chi: DMatrix<f64>,
    pub phi_v: DMatrix<f64>,
}

impl TradeState {
    pub fn zeros(layout: &IndexLayout) -> Self {
        let (t, nu, nr, ng) = (layout.hours, layout.n_users, layout.n_res, layout.n_cgs);
        let mats = |r, c| vec![DMatrix::zeros(r, c); t];
        Self {
            es: mats(nu, ng + nr),
            eb: mats(nu, ng + nr),
            a: mats(ng, nr),
            a_r: mats(ng, nr),
            b: mats(nu, nr),
            b_r: mats(nu, nr),
            c: vec![0.0; nu + nr],
            c_s: vec![0.0; nu],
            id: vec![false; nu],
            p_u: DMatrix::zeros(nu, t),
            p_g: DMatrix::zeros(ng, t),
            p_r: DMatrix::zeros(nr, t),
            p_hat: DMatrix::zeros(nr, t),
            pi_u: DMatrix::zeros(nu, t),
            pi_g: DMatrix::zeros(ng, t),
            chi: DMatrix::zeros(ng, t),
            phi_v: DMatrix::zeros(nu, t),
        }
    }

    pub fn hours(&self) -> usize {
        self.es.len()
    }

    pub fn n_users(&self) -> usize {
        self.p_u.nrows()
    }

    pub fn n_res(&self) -> usize {
        self.p_r.nrows()
    }

    pub fn n_cgs(&self) -> usize {
        self.p_g.nrows()
    }

    pub fn get(&self, key: &SlotKey) -> f64 {
        match self.locate(key) {
            Loc::Hourly(f, t, r, c) => self.hourly(f)[t][(r, c)],
            Loc::Series(f, r, t) => self.series(f)[(r, t)],
            Loc::Carbon(i) => self.c[i],
            Loc::Sold(i) => self.c_s[i],
            Loc::Identity(i) => {
                if self.id[i] {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn set(&mut self, key: &SlotKey, value: f64) {
        match self.locate(key) {
            Loc::Hourly(f, t, r, c) => self.hourly_mut(f)[t][(r, c)] = value,
            Loc::Series(f, r, t) => self.series_mut(f)[(r, t)] = value,
            Loc::Carbon(i) => self.c[i] = value,
            Loc::Sold(i) => self.c_s[i] = value,
            Loc::Identity(i) => self.id[i] = value > 0.5,
        }
    }

    fn hourly(&self, f: HourlyField) -> &Vec<DMatrix<f64>> {
        match f {
            HourlyField::Es => &self.es,
            HourlyField::Eb => &self.eb,
            HourlyField::A => &self.a,
            HourlyField::AR => &self.a_r,
            HourlyField::B => &self.b,
            HourlyField::BR => &self.b_r,
        }
    }

    fn hourly_mut(&mut self, f: HourlyField) -> &mut Vec<DMatrix<f64>> {
        match f {
            HourlyField::Es => &mut self.es,
            HourlyField::Eb => &mut self.eb,
            HourlyField::A => &mut self.a,
            HourlyField::AR => &mut self.a_r,
            HourlyField::B => &mut self.b,
            HourlyField::BR => &mut self.b_r,
        }
    }

    fn series(&self, f: SeriesField) -> &DMatrix<f64> {
        match f {
            SeriesField::PU => &self.p_u,
            SeriesField::PG => &self.p_g,
            SeriesField::PR => &self.p_r,
            SeriesField::PHat => &self.p_hat,
            SeriesField::PiU => &self.pi_u,
            SeriesField::PiG => &self.pi_g,
            SeriesField::Chi => &self.chi,
            SeriesField::PhiV => &self.phi_v,
        }
    }

    fn series_mut(&mut self, f: SeriesField) -> &mut DMatrix<f64> {
        match f {
            SeriesField::PU => &mut self.p_u,
            SeriesField::PG => &mut self.p_g,
            SeriesField::PR => &mut self.p_r,
            SeriesField::PHat => &mut self.p_hat,
            SeriesField::PiU => &mut self.pi_u,
            SeriesField::PiG => &mut self.pi_g,
            SeriesField::Chi => &mut self.chi,
            SeriesField::PhiV => &mut self.phi_v,
        }
    }

    fn locate(&self, key: &SlotKey) -> Loc {
        use HourlyField as H;
        use SeriesField as S;
        let i = key.owner.index;
        let nu = self.n_users();
        let ng = self.n_cgs();
        let t = || key.hour.expect("hourly variable");
        let cp = || key.counterparty.expect("bilateral variable");
        match (key.owner.kind, key.name) {
            (ParticipantKind::User, VarName::P) => Loc::Series(S::PU, i, t()),
            (ParticipantKind::User, VarName::Eb) => {
                let s = cp();
                let col = if s.kind == ParticipantKind::Cg { s.index } else { ng + s.index };
                Loc::Hourly(H::Eb, t(), i, col)
            }
            (ParticipantKind::User, VarName::Beta) => Loc::Hourly(H::B, t(), i, cp().index),
            (ParticipantKind::User, VarName::Pi) => Loc::Series(S::PiU, i, t()),
            (ParticipantKind::User, VarName::Bilinear) => Loc::Series(S::PhiV, i, t()),
            (ParticipantKind::User, VarName::C) => Loc::Carbon(i),
            (ParticipantKind::User, VarName::CSold) => Loc::Sold(i),
            (ParticipantKind::User, VarName::Identity) => Loc::Identity(i),
            (ParticipantKind::Res, VarName::P) => Loc::Series(S::PR, i, t()),
            (ParticipantKind::Res, VarName::PHat) => Loc::Series(S::PHat, i, t()),
            (ParticipantKind::Res, VarName::Es) => Loc::Hourly(H::Es, t(), cp().index, ng + i),
            (ParticipantKind::Res, VarName::AlphaR) => Loc::Hourly(H::AR, t(), cp().index, i),
            (ParticipantKind::Res, VarName::BetaR) => Loc::Hourly(H::BR, t(), cp().index, i),
            (ParticipantKind::Res, VarName::C) => Loc::Carbon(nu + i),
            (ParticipantKind::Cg, VarName::P) => Loc::Series(S::PG, i, t()),
            (ParticipantKind::Cg, VarName::Es) => Loc::Hourly(H::Es, t(), cp().index, i),
            (ParticipantKind::Cg, VarName::Alpha) => Loc::Hourly(H::A, t(), i, cp().index),
            (ParticipantKind::Cg, VarName::Pi) => Loc::Series(S::PiG, i, t()),
            (ParticipantKind::Cg, VarName::Bilinear) => Loc::Series(S::Chi, i, t()),
            (kind, name) => panic!("no slot {name:?} for {kind:?}"),
        }
    }

    /// Values of one participant's block in layout order.
    pub fn block_values(&self, layout: &IndexLayout, owner: ParticipantId) -> Vec<f64> {
        let (s, e) = layout.block(owner);
        (s..e).map(|k| self.get(&layout.key(k))).collect()
    }

    pub fn absorb_block(&mut self, layout: &IndexLayout, owner: ParticipantId, values: &[f64]) {
        let (s, e) = layout.block(owner);
        assert_eq!(values.len(), e - s, "block length");
        for (k, v) in (s..e).zip(values) {
            self.set(&layout.key(k), *v);
        }
    }

    pub fn to_vector(&self, layout: &IndexLayout) -> Vec<f64> {
        layout.keys().iter().map(|k| self.get(k)).collect()
    }

    pub fn from_vector(layout: &IndexLayout, x: &[f64]) -> Self {
        let mut s = Self::zeros(layout);
        for (k, v) in layout.keys().iter().zip(x) {
            s.set(k, *v);
        }
        s
    }

    /// Es^t + Eb^t per hour.
    pub fn energy_balance_residual(&self) -> Vec<DMatrix<f64>> {
        self.es.iter().zip(&self.eb).map(|(s, b)| s + b).collect()
    }

    pub fn reserve_residual(&self) -> Vec<DMatrix<f64>> {
        self.a.iter().zip(&self.a_r).map(|(s, b)| s + b).collect()
    }

    pub fn flexibility_residual(&self) -> Vec<DMatrix<f64>> {
        self.b.iter().zip(&self.b_r).map(|(s, b)| s + b).collect()
    }

    /// Σ_i α^r_{ij} + Σ_i β^r_{ij} at hour t, which must equal −1.
    pub fn factor_sum(&self, j: usize, t: usize) -> Result<f64, ModelError> {
        if j >= self.n_res() {
            return Err(ModelError::UnknownParticipant(format!("res[{j}]")));
        }
        if t >= self.hours() {
            return Err(ModelError::Dimension(format!("hour {t} out of range")));
        }
        Ok(self.a_r[t].column(j).sum() + self.b_r[t].column(j).sum())
    }

    pub fn carbon_sum(&self) -> f64 {
        self.c.iter().sum()
    }

    /// Post-trade allowances, users first then RES.
    pub fn holdings(&self, cfg: &ScenarioConfig) -> AllowanceHolding {
        let nu = self.n_users();
        let mut psi: Vec<f64> = (0..nu).map(|i| cfg.users[i].psi0 + self.c[i] - self.c_s[i]).collect();
        psi.extend((0..self.n_res()).map(|j| self.c[nu + j]));
        AllowanceHolding { psi }
    }

    /// CE_i of every user.
    pub fn user_emissions(&self, cfg: &ScenarioConfig) -> Vec<f64> {
        (0..self.n_users())
            .map(|i| {
                let mut ce = 0.0;
                for t in 0..self.hours() {
                    for (g, cg) in cfg.cgs.iter().enumerate() {
                        ce -= cg.sigma * self.eb[t][(i, g)];
                    }
                }
                ce
            })
            .collect()
    }

    /// Allowance requirement of RES j at its confidence level (the left side
    /// of its emission cone).
    pub fn res_emission_requirement(&self, cfg: &ScenarioConfig, unc: &UncertaintyModel, j: usize) -> f64 {
        let m = self.res_emission_row(cfg, j);
        let h = &unc.horizons[j];
        let mean: f64 = (0..m.len()).map(|t| h.mean_row[t] * m[t]).sum();
        let r = &unc.horizon_factors[j];
        let v = r * nalgebra::DVector::from_vec(m);
        -mean + z_factor(cfg.res[j].epsilon) * v.norm()
    }

    /// m_j^t = −Σ_g σ_g α^r_{gj}.
    pub fn res_emission_row(&self, cfg: &ScenarioConfig, j: usize) -> Vec<f64> {
        (0..self.hours())
            .map(|t| -(0..self.n_cgs()).map(|g| cfg.cgs[g].sigma * self.a_r[t][(g, j)]).sum::<f64>())
            .collect()
    }

    /// Dimension check against a layout.
    pub fn check_shape(&self, layout: &IndexLayout) -> Result<(), ModelError> {
        let ok = self.hours() == layout.hours
            && self.n_users() == layout.n_users
            && self.n_res() == layout.n_res
            && self.n_cgs() == layout.n_cgs
            && self.es.iter().chain(&self.eb).all(|m| m.shape() == layout.energy_shape())
            && self.a.iter().chain(&self.a_r).all(|m| m.shape() == layout.reserve_shape())
            && self.b.iter().chain(&self.b_r).all(|m| m.shape() == layout.flexibility_shape());
        if ok {
            Ok(())
        } else {
            Err(ModelError::Dimension("trade state does not match layout".into()))
        }
    }
}

#[derive(Clone, Copy)]
enum HourlyField {
    Es,
    Eb,
    A,
    AR,
    B,
    BR,
}

#[derive(Clone, Copy)]
enum SeriesField {
    PU,
    PG,
    PR,
    PHat,
    PiU,
    PiG,
    Chi,
    PhiV,
}

#[derive(Clone, Copy)]
enum Loc {
    Hourly(HourlyField, usize, usize, usize),
    Series(SeriesField, usize, usize),
    Carbon(usize),
    Sold(usize),
    Identity(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AllowanceHolding {
    /// Users first, then RES.
    pub psi: Vec<f64>,
}

// ---------------------------------------------------------------------------
// McCormick bounds and envelopes
// ---------------------------------------------------------------------------

/// Box on (p, π) for every CG or user and hour.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundBox {
    pub p_lo: DMatrix<f64>,
    pub p_hi: DMatrix<f64>,
    pub pi_lo: DMatrix<f64>,
    pub pi_hi: DMatrix<f64>,
}

impl BoundBox {
    fn check(&self, who: &str) -> Result<(), ModelError> {
        for i in 0..self.p_lo.nrows() {
            for t in 0..self.p_lo.ncols() {
                if self.p_lo[(i, t)] > self.p_hi[(i, t)] || self.pi_lo[(i, t)] > self.pi_hi[(i, t)] {
                    return Err(ModelError::InvertedBounds { who: format!("{who}[{i}]"), hour: t });
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct McCormickBounds {
    pub cg: BoundBox,
    pub user: BoundBox,
    pub initial_cg: BoundBox,
    pub initial_user: BoundBox,
    /// Current contraction scalar.
    pub eps: f64,
    pub kappa: f64,
}

impl McCormickBounds {
    pub fn initial(cfg: &ScenarioConfig, unc: &UncertaintyModel) -> Self {
        let t = cfg.hours;
        let floor = |_: usize, h: usize| unc.pi_floor(h);
        let cg = BoundBox {
            p_lo: DMatrix::from_fn(cfg.n_cgs(), t, |i, h| cfg.cgs[i].p_min[h]),
            p_hi: DMatrix::from_fn(cfg.n_cgs(), t, |i, h| cfg.cgs[i].p_max[h]),
            pi_lo: DMatrix::from_fn(cfg.n_cgs(), t, floor),
            pi_hi: DMatrix::zeros(cfg.n_cgs(), t),
        };
        let user = BoundBox {
            p_lo: DMatrix::from_fn(cfg.n_users(), t, |i, h| cfg.users[i].p_min[h]),
            p_hi: DMatrix::from_fn(cfg.n_users(), t, |i, h| cfg.users[i].p_max[h]),
            pi_lo: DMatrix::from_fn(cfg.n_users(), t, floor),
            pi_hi: DMatrix::zeros(cfg.n_users(), t),
        };
        Self { initial_cg: cg.clone(), initial_user: user.clone(), cg, user, eps: cfg.algo.eps0, kappa: cfg.algo.kappa }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.cg.check("cg")?;
        self.user.check("user")
    }
}

/// Interval of w admitted by the four envelope inequalities at (p, π).
pub fn envelope_interval(p: f64, pi: f64, p_lo: f64, p_hi: f64, pi_lo: f64, pi_hi: f64) -> (f64, f64) {
    let lo = (p_lo * pi + pi_lo * p - p_lo * pi_lo).max(p_hi * pi + pi_hi * p - p_hi * pi_hi);
    let hi = (p_hi * pi + pi_lo * p - p_hi * pi_lo).min(p_lo * pi + pi_hi * p - p_lo * pi_hi);
    (lo, hi)
}

/// Emits the four envelope inequalities for w ≈ p·π.
pub fn add_envelope(
    prob: &mut ConicProblem,
    w: Var,
    p: Var,
    pi: Var,
    (p_lo, p_hi, pi_lo, pi_hi): (f64, f64, f64, f64),
) {
    // lower planes: plane − w ≤ 0
    for (pp, qq) in [(p_lo, pi_lo), (p_hi, pi_hi)] {
        prob.add_le(LinExpr::sum([(pi, pp), (p, qq), (w, -1.0)]) + LinExpr::constant(-pp * qq));
    }
    // upper planes: w − plane ≤ 0
    for (pp, qq) in [(p_hi, pi_lo), (p_lo, pi_hi)] {
        prob.add_le(LinExpr::sum([(w, 1.0), (pi, -pp), (p, -qq)]) + LinExpr::constant(pp * qq));
    }
}

// ---------------------------------------------------------------------------
// Participant blocks
// ---------------------------------------------------------------------------

/// Which objective to emit for the bilinear terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectiveForm {
    /// χ, φ replace p·π, linked by envelopes.
    Relaxed,
    /// True products, written as convex squares (p ∓ π)².
    Exact,
}

/// Variables of one participant inside a [`ConicProblem`], contiguous and in
/// layout order.
#[derive(Clone, Debug)]
pub struct Block<'a> {
    pub owner: ParticipantId,
    pub base: usize,
    layout: &'a IndexLayout,
}

impl<'a> Block<'a> {
    pub fn alloc(prob: &mut ConicProblem, layout: &'a IndexLayout, owner: ParticipantId) -> Self {
        let (s, e) = layout.block(owner);
        let base = prob.num_vars();
        for _ in s..e {
            prob.add_free();
        }
        Self { owner, base, layout }
    }

    pub fn len(&self) -> usize {
        let (s, e) = self.layout.block(self.owner);
        e - s
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn var(&self, name: VarName, hour: Option<usize>, counterparty: Option<ParticipantId>) -> Var {
        let key = SlotKey { owner: self.owner, name, hour, counterparty };
        Var(self.base + self.layout.offset_in_block(&key))
    }

    pub fn key_of(&self, v: Var) -> SlotKey {
        let (s, _) = self.layout.block(self.owner);
        self.layout.key(s + v.0 - self.base)
    }

    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        (0..self.len()).map(move |k| Var(self.base + k))
    }

    pub fn p(&self, t: usize) -> Var {
        self.var(VarName::P, Some(t), None)
    }
    pub fn p_hat(&self, t: usize) -> Var {
        self.var(VarName::PHat, Some(t), None)
    }
    pub fn eb(&self, t: usize, seller: ParticipantId) -> Var {
        self.var(VarName::Eb, Some(t), Some(seller))
    }
    pub fn es(&self, t: usize, user: usize) -> Var {
        self.var(VarName::Es, Some(t), Some(ParticipantId::user(user)))
    }
    pub fn alpha(&self, t: usize, res: usize) -> Var {
        self.var(VarName::Alpha, Some(t), Some(ParticipantId::res(res)))
    }
    pub fn alpha_r(&self, t: usize, cg: usize) -> Var {
        self.var(VarName::AlphaR, Some(t), Some(ParticipantId::cg(cg)))
    }
    pub fn beta(&self, t: usize, res: usize) -> Var {
        self.var(VarName::Beta, Some(t), Some(ParticipantId::res(res)))
    }
    pub fn beta_r(&self, t: usize, user: usize) -> Var {
        self.var(VarName::BetaR, Some(t), Some(ParticipantId::user(user)))
    }
    pub fn pi(&self, t: usize) -> Var {
        self.var(VarName::Pi, Some(t), None)
    }
    pub fn bilinear(&self, t: usize) -> Var {
        self.var(VarName::Bilinear, Some(t), None)
    }
    pub fn c(&self) -> Var {
        self.var(VarName::C, None, None)
    }
    pub fn c_sold(&self) -> Var {
        self.var(VarName::CSold, None, None)
    }
    pub fn identity(&self) -> Var {
        self.var(VarName::Identity, None, None)
    }

    /// Copy solution values of this block into a trade state.
    pub fn extract(&self, x: &[f64], into: &mut TradeState) {
        let vals: Vec<f64> = self.vars().map(|v| x[v.0]).collect();
        into.absorb_block(self.layout, self.owner, &vals);
    }
}

/// Shared data needed by the builders.
#[derive(Clone, Copy)]
pub struct ModelContext<'a> {
    pub cfg: &'a ScenarioConfig,
    pub unc: &'a UncertaintyModel,
    pub layout: &'a IndexLayout,
}

fn sellers(cfg: &ScenarioConfig) -> Vec<ParticipantId> {
    (0..cfg.n_cgs()).map(ParticipantId::cg).chain((0..cfg.n_res()).map(ParticipantId::res)).collect()
}

/// p_u = −Σ Eb; the Eb row of a user spans every seller.
pub fn user_setpoint_expr(blk: &Block, cfg: &ScenarioConfig, t: usize) -> LinExpr {
    LinExpr::sum(sellers(cfg).into_iter().map(|s| (blk.eb(t, s), -1.0)))
}

/// Rows of R_t·x for an affine row x, i.e. the entries of the SOC.
fn factor_rows(r: &DMatrix<f64>, cols: &[Var]) -> Vec<LinExpr> {
    (0..r.nrows())
        .map(|k| LinExpr::sum(cols.iter().enumerate().map(|(j, &v)| (v, r[(k, j)]))).compact())
        .filter(|e| !e.terms.is_empty())
        .collect()
}

/// Constraints and objective of user i: bounds, setpoint, chance cone,
/// emission cover, carbon identity and (relaxed or exact) utility.
pub fn build_user(
    prob: &mut ConicProblem,
    ctx: ModelContext,
    bounds: &McCormickBounds,
    blk: &Block,
    form: ObjectiveForm,
) {
    let cfg = ctx.cfg;
    let i = blk.owner.index;
    let u = &cfg.users[i];
    let big_m = cfg.big_m();
    let z = z_factor(u.epsilon);
    for t in 0..cfg.hours {
        let slice = &ctx.unc.slices[t];
        for s in sellers(cfg) {
            prob.tighten(blk.eb(t, s), f64::NEG_INFINITY, 0.0);
        }
        let betas: Vec<Var> = (0..cfg.n_res()).map(|r| blk.beta(t, r)).collect();
        for &b in &betas {
            if cfg.flexibility {
                prob.tighten(b, 0.0, f64::INFINITY);
            } else {
                prob.fix(b, 0.0);
            }
        }
        let p = blk.p(t);
        prob.add_eq(LinExpr::from(p) - user_setpoint_expr(blk, cfg, t));
        prob.tighten(p, bounds.user.p_lo[(i, t)], bounds.user.p_hi[(i, t)]);
        let pi = blk.pi(t);
        let mean_b = LinExpr::sum(betas.iter().enumerate().map(|(r, &b)| (b, slice.m[r])));
        prob.add_eq(LinExpr::from(pi) - mean_b.clone());
        prob.tighten(pi, bounds.user.pi_lo[(i, t)], bounds.user.pi_hi[(i, t)]);
        // z‖R B‖ ≤ p + M·B − p_min
        let rows = factor_rows(&ctx.unc.slice_factors[t], &betas);
        let rhs = LinExpr::from(p) + mean_b + LinExpr::constant(-u.p_min[t]);
        prob.add_soc(rhs * (1.0 / z), rows.clone());

        let w = blk.bilinear(t);
        match form {
            ObjectiveForm::Relaxed => {
                add_envelope(
                    prob,
                    w,
                    p,
                    pi,
                    (
                        bounds.user.p_lo[(i, t)],
                        bounds.user.p_hi[(i, t)],
                        bounds.user.pi_lo[(i, t)],
                        bounds.user.pi_hi[(i, t)],
                    ),
                );
                // −[d2 p² + d1 p + 2 d2 φ + d1 π + d2 (π² + S²)]
                prob.add_square(-u.d2, p.into());
                prob.add_square(-u.d2, pi.into());
                prob.minimize(LinExpr::sum([(p, -u.d1), (w, -2.0 * u.d2), (pi, -u.d1)]));
            }
            ObjectiveForm::Exact => {
                prob.fix(w, 0.0);
                prob.add_square(-u.d2, LinExpr::sum([(p, 1.0), (pi, 1.0)]));
                prob.minimize(LinExpr::sum([(p, -u.d1), (pi, -u.d1)]));
            }
        }
        for row in rows {
            prob.add_square(-u.d2, row);
        }
    }
    // CE ≤ Ψ0 + c − c_s
    let mut ce = LinExpr::zero();
    for t in 0..cfg.hours {
        for (g, cg) in cfg.cgs.iter().enumerate() {
            ce.add_term(blk.eb(t, ParticipantId::cg(g)), -cg.sigma);
        }
    }
    let (c, cs, id) = (blk.c(), blk.c_sold(), blk.identity());
    let psi = LinExpr::sum([(c, 1.0), (cs, -1.0)]) + LinExpr::constant(u.psi0);
    prob.add_le2(ce, psi);
    prob.tighten(id, 0.0, 1.0);
    prob.tighten(cs, 0.0, f64::INFINITY);
    prob.add_le(LinExpr::sum([(cs, 1.0), (id, -big_m)]));
    prob.add_le(LinExpr::sum([(c, -1.0), (id, -big_m)]));
    prob.add_le(LinExpr::sum([(c, 1.0), (id, big_m)]) + LinExpr::constant(-big_m));
    prob.minimize(LinExpr::term(cs, -cfg.prices.r_c_sell));
    if let CarbonMarket::FixedPrice { buy_price } = cfg.carbon {
        prob.tighten(c, 0.0, f64::INFINITY);
        prob.minimize(LinExpr::term(c, buy_price));
    }
}

/// Constraints and objective of RES j: setpoint, balance with curtailment,
/// factor sum, sign of its factor columns and its emission cone.
pub fn build_res(prob: &mut ConicProblem, ctx: ModelContext, blk: &Block) {
    let cfg = ctx.cfg;
    let j = blk.owner.index;
    let res = &cfg.res[j];
    for t in 0..cfg.hours {
        let (p, ph) = (blk.p(t), blk.p_hat(t));
        let es: Vec<Var> = (0..cfg.n_users()).map(|u| blk.es(t, u)).collect();
        for &v in &es {
            prob.tighten(v, 0.0, f64::INFINITY);
        }
        prob.add_eq(LinExpr::from(p) - LinExpr::sum(es.iter().map(|&v| (v, 1.0))));
        prob.tighten(ph, 0.0, f64::INFINITY);
        prob.add_eq(LinExpr::sum([(p, 1.0), (ph, 1.0)]) + LinExpr::constant(-res.forecast[t]));
        let mut factors = LinExpr::constant(1.0);
        for g in 0..cfg.n_cgs() {
            let v = blk.alpha_r(t, g);
            prob.tighten(v, f64::NEG_INFINITY, 0.0);
            factors.add_term(v, 1.0);
        }
        for u in 0..cfg.n_users() {
            let v = blk.beta_r(t, u);
            if cfg.flexibility {
                prob.tighten(v, f64::NEG_INFINITY, 0.0);
                factors.add_term(v, 1.0);
            } else {
                prob.fix(v, 0.0);
            }
        }
        prob.add_eq(factors);
        prob.minimize(LinExpr::term(ph, -cfg.prices.r_e[t]));
    }
    // z‖R_Ξ m‖ ≤ c + E(ω)·m with m_t = −Σ σ_g α^r_gt
    let h = &ctx.unc.horizons[j];
    let m: Vec<LinExpr> = (0..cfg.hours)
        .map(|t| LinExpr::sum((0..cfg.n_cgs()).map(|g| (blk.alpha_r(t, g), -cfg.cgs[g].sigma))))
        .collect();
    let r = &ctx.unc.horizon_factors[j];
    let rows: Vec<LinExpr> = (0..r.nrows())
        .map(|k| {
            let mut e = LinExpr::zero();
            for (t, mt) in m.iter().enumerate() {
                if r[(k, t)] != 0.0 {
                    e += mt.clone() * r[(k, t)];
                }
            }
            e.compact()
        })
        .filter(|e| !e.terms.is_empty())
        .collect();
    let mut rhs = LinExpr::from(blk.c());
    for (t, mt) in m.iter().enumerate() {
        rhs += mt.clone() * h.mean_row[t];
    }
    prob.add_soc(rhs * (1.0 / z_factor(res.epsilon)), rows);
    if let CarbonMarket::FixedPrice { buy_price } = cfg.carbon {
        prob.tighten(blk.c(), 0.0, f64::INFINITY);
        prob.minimize(LinExpr::term(blk.c(), buy_price));
    }
}

/// Constraints and objective of CG g: setpoint, bounds, reserve sign,
/// chance cone and (relaxed or exact) expected cost.
pub fn build_cg(
    prob: &mut ConicProblem,
    ctx: ModelContext,
    bounds: &McCormickBounds,
    blk: &Block,
    form: ObjectiveForm,
) {
    let cfg = ctx.cfg;
    let g = blk.owner.index;
    let cg = &cfg.cgs[g];
    let z = z_factor(cg.epsilon);
    for t in 0..cfg.hours {
        let slice = &ctx.unc.slices[t];
        let p = blk.p(t);
        let es: Vec<Var> = (0..cfg.n_users()).map(|u| blk.es(t, u)).collect();
        for &v in &es {
            prob.tighten(v, 0.0, f64::INFINITY);
        }
        prob.add_eq(LinExpr::from(p) - LinExpr::sum(es.iter().map(|&v| (v, 1.0))));
        prob.tighten(p, bounds.cg.p_lo[(g, t)], bounds.cg.p_hi[(g, t)]);
        let alphas: Vec<Var> = (0..cfg.n_res()).map(|r| blk.alpha(t, r)).collect();
        for &a in &alphas {
            prob.tighten(a, 0.0, f64::INFINITY);
        }
        let pi = blk.pi(t);
        let mean_a = LinExpr::sum(alphas.iter().enumerate().map(|(r, &a)| (a, slice.m[r])));
        prob.add_eq(LinExpr::from(pi) - mean_a.clone());
        prob.tighten(pi, bounds.cg.pi_lo[(g, t)], bounds.cg.pi_hi[(g, t)]);
        // z‖R A‖ ≤ p_max − p + M·A
        let rows = factor_rows(&ctx.unc.slice_factors[t], &alphas);
        let rhs = LinExpr::constant(cg.p_max[t]) - LinExpr::from(p) + mean_a;
        prob.add_soc(rhs * (1.0 / z), rows.clone());

        let w = blk.bilinear(t);
        match form {
            ObjectiveForm::Relaxed => {
                add_envelope(
                    prob,
                    w,
                    p,
                    pi,
                    (bounds.cg.p_lo[(g, t)], bounds.cg.p_hi[(g, t)], bounds.cg.pi_lo[(g, t)], bounds.cg.pi_hi[(g, t)]),
                );
                // c2 p² + c1 p + c0 − 2 c2 χ − c1 π + c2 (π² + S²)
                prob.add_square(cg.c2, p.into());
                prob.add_square(cg.c2, pi.into());
                prob.minimize(LinExpr::sum([(p, cg.c1), (w, -2.0 * cg.c2), (pi, -cg.c1)]) + LinExpr::constant(cg.c0));
            }
            ObjectiveForm::Exact => {
                prob.fix(w, 0.0);
                prob.add_square(cg.c2, LinExpr::sum([(p, 1.0), (pi, -1.0)]));
                prob.minimize(LinExpr::sum([(p, cg.c1), (pi, -cg.c1)]) + LinExpr::constant(cg.c0));
            }
        }
        for row in rows {
            prob.add_square(cg.c2, row);
        }
    }
}

/// Builds the whole market with all coupling constraints imposed directly.
/// Returns the problem and the participant blocks in layout order.
pub fn build_centralized<'a>(
    ctx: ModelContext<'a>,
    bounds: &McCormickBounds,
    form: ObjectiveForm,
) -> (ConicProblem, Vec<Block<'a>>) {
    let cfg = ctx.cfg;
    let mut prob = ConicProblem::new();
    let blocks: Vec<Block> = cfg.participants().into_iter().map(|p| Block::alloc(&mut prob, ctx.layout, p)).collect();
    let (nu, nr) = (cfg.n_users(), cfg.n_res());
    for blk in &blocks {
        match blk.owner.kind {
            ParticipantKind::User => build_user(&mut prob, ctx, bounds, blk, form),
            ParticipantKind::Res => build_res(&mut prob, ctx, blk),
            ParticipantKind::Cg => build_cg(&mut prob, ctx, bounds, blk, form),
        }
    }
    let user = |i: usize| &blocks[i];
    let res = |j: usize| &blocks[nu + j];
    let cg = |g: usize| &blocks[nu + nr + g];
    for t in 0..cfg.hours {
        for i in 0..nu {
            for g in 0..cfg.n_cgs() {
                prob.add_eq(LinExpr::sum([(user(i).eb(t, ParticipantId::cg(g)), 1.0), (cg(g).es(t, i), 1.0)]));
            }
            for j in 0..nr {
                prob.add_eq(LinExpr::sum([(user(i).eb(t, ParticipantId::res(j)), 1.0), (res(j).es(t, i), 1.0)]));
                prob.add_eq(LinExpr::sum([(user(i).beta(t, j), 1.0), (res(j).beta_r(t, i), 1.0)]));
            }
        }
        for g in 0..cfg.n_cgs() {
            for j in 0..nr {
                prob.add_eq(LinExpr::sum([(cg(g).alpha(t, j), 1.0), (res(j).alpha_r(t, g), 1.0)]));
            }
        }
    }
    if cfg.carbon == CarbonMarket::Sharing {
        let cs = blocks.iter().filter(|b| b.owner.kind != ParticipantKind::Cg).map(|b| (b.c(), 1.0));
        prob.add_eq(LinExpr::sum(cs));
    }
    (prob, blocks)
}

// ---------------------------------------------------------------------------
// Objective evaluation
// ---------------------------------------------------------------------------

/// Objective split by participant; total = Σ cg + Σ user + Σ res.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveBreakdown {
    pub cg: Vec<f64>,
    pub user: Vec<f64>,
    pub res: Vec<f64>,
}

impl ObjectiveBreakdown {
    pub fn total(&self) -> f64 {
        self.cg.iter().chain(&self.user).chain(&self.res).sum()
    }
}

fn s_norm(r: &DMatrix<f64>, row: nalgebra::RowDVector<f64>) -> f64 {
    if r.nrows() == 0 {
        return 0.0;
    }
    (r * row.transpose()).norm()
}

fn evaluate(state: &TradeState, cfg: &ScenarioConfig, unc: &UncertaintyModel, exact: bool) -> ObjectiveBreakdown {
    let hours = cfg.hours;
    let buy = match cfg.carbon {
        CarbonMarket::FixedPrice { buy_price } => Some(buy_price),
        CarbonMarket::Sharing => None,
    };
    let cg = cfg
        .cgs
        .iter()
        .enumerate()
        .map(|(g, c)| {
            let mut v = 0.0;
            for t in 0..hours {
                let p = state.p_g[(g, t)];
                let a = state.a[t].row(g).into_owned();
                let pi = (&a * &unc.slices[t].m)[0];
                let s = s_norm(&unc.slice_factors[t], a);
                let cross = if exact { p * pi } else { state.chi[(g, t)] };
                v += c.c2 * p * p + c.c1 * p + c.c0 - 2.0 * c.c2 * cross - c.c1 * pi + c.c2 * (pi * pi + s * s);
            }
            v
        })
        .collect();
    let user = cfg
        .users
        .iter()
        .enumerate()
        .map(|(i, u)| {
            let mut v = 0.0;
            for t in 0..hours {
                let p = state.p_u[(i, t)];
                let b = state.b[t].row(i).into_owned();
                let pi = (&b * &unc.slices[t].m)[0];
                let s = s_norm(&unc.slice_factors[t], b);
                let cross = if exact { p * pi } else { state.phi_v[(i, t)] };
                v -= u.d2 * p * p + u.d1 * p + 2.0 * u.d2 * cross + u.d1 * pi + u.d2 * (pi * pi + s * s);
            }
            v -= cfg.prices.r_c_sell * state.c_s[i];
            if let Some(price) = buy {
                v += price * state.c[i];
            }
            v
        })
        .collect();
    let nu = cfg.n_users();
    let res = (0..cfg.n_res())
        .map(|j| {
            let mut v: f64 = -(0..hours).map(|t| cfg.prices.r_e[t] * state.p_hat[(j, t)]).sum::<f64>();
            if let Some(price) = buy {
                v += price * state.c[nu + j];
            }
            v
        })
        .collect();
    ObjectiveBreakdown { cg, user, res }
}

/// Expected-cost objective with true products p·π.
pub fn exact_objective(state: &TradeState, cfg: &ScenarioConfig, unc: &UncertaintyModel) -> ObjectiveBreakdown {
    evaluate(state, cfg, unc, true)
}

/// McCormick-form objective using the state's χ and φ.
pub fn relaxed_objective(state: &TradeState, cfg: &ScenarioConfig, unc: &UncertaintyModel) -> ObjectiveBreakdown {
    evaluate(state, cfg, unc, false)
}

/// Social welfare: the negated relaxed objective.
pub fn welfare(state: &TradeState, cfg: &ScenarioConfig, unc: &UncertaintyModel) -> f64 {
    -relaxed_objective(state, cfg, unc).total()
}

/// Expected cost of CG g at hour t under the exact expansion, as a function
/// of its setpoint and reserve row; used by the Monte Carlo identity check.
pub fn cg_expected_cost(
    cg: &crate::scenario::CgParams,
    p: f64,
    a_row: &[f64],
    unc: &UncertaintyModel,
    t: usize,
) -> f64 {
    let a = nalgebra::RowDVector::from_row_slice(a_row);
    let pi = (&a * &unc.slices[t].m)[0];
    let s = s_norm(&unc.slice_factors[t], a);
    cg.c2 * p * p + cg.c1 * p + cg.c0 - (2.0 * cg.c2 * p + cg.c1) * pi + cg.c2 * (pi * pi + s * s)
}

/// Maximum relative error of χ ≈ p·π and φ ≈ p·π; absolute when |χ| < 1e-6.
pub fn mccormick_errors(state: &TradeState) -> (f64, f64) {
    fn err(w: &DMatrix<f64>, p: &DMatrix<f64>, pi: &DMatrix<f64>) -> f64 {
        let mut e: f64 = 0.0;
        for (k, &wv) in w.iter().enumerate() {
            let gap = (wv - p[k] * pi[k]).abs();
            e = e.max(if wv.abs() < 1e-6 { gap } else { gap / wv.abs() });
        }
        e
    }
    (err(&state.chi, &state.p_g, &state.pi_g), err(&state.phi_v, &state.p_u, &state.pi_u))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::bundled_reference_case;
    use approx::assert_relative_eq;

    fn ctx_parts() -> (ScenarioConfig, UncertaintyModel, IndexLayout) {
        let cfg = bundled_reference_case();
        let unc = UncertaintyModel::new(&cfg).unwrap();
        let layout = IndexLayout::new(&cfg);
        (cfg, unc, layout)
    }

    #[test]
    fn balance_residual_one_by_one() {
        let layout = IndexLayout::with_dims(1, 1, 0, 1);
        let mut s = TradeState::zeros(&layout);
        s.es[0][(0, 0)] = 5.0;
        s.eb[0][(0, 0)] = -5.0;
        assert_eq!(s.energy_balance_residual()[0][(0, 0)], 0.0);
        s.eb[0][(0, 0)] = -4.0;
        assert_eq!(s.energy_balance_residual()[0][(0, 0)], 1.0);
    }

    #[test]
    fn factor_sum_cases() {
        let layout = IndexLayout::with_dims(1, 1, 1, 1);
        let mut s = TradeState::zeros(&layout);
        s.a_r[0][(0, 0)] = -0.6;
        s.b_r[0][(0, 0)] = -0.4;
        assert_relative_eq!(s.factor_sum(0, 0).unwrap(), -1.0);
        s.b_r[0][(0, 0)] = 0.0;
        s.a_r[0][(0, 0)] = -0.5;
        assert_relative_eq!(s.factor_sum(0, 0).unwrap(), -0.5);
        assert!(s.factor_sum(3, 0).is_err());
    }

    #[test]
    fn state_vector_round_trip() {
        let (_, _, layout) = ctx_parts();
        let x: Vec<f64> = (0..layout.len())
            .map(|k| if layout.key(k).name == VarName::Identity { 1.0 } else { k as f64 * 0.5 })
            .collect();
        let s = TradeState::from_vector(&layout, &x);
        assert_eq!(s.to_vector(&layout), x);
        s.check_shape(&layout).unwrap();
    }

    #[test]
    fn zero_state_objective_is_fixed_costs() {
        let (cfg, unc, layout) = ctx_parts();
        let s = TradeState::zeros(&layout);
        assert_relative_eq!(exact_objective(&s, &cfg, &unc).total(), 145.2, max_relative = 1e-12);
        assert_relative_eq!(relaxed_objective(&s, &cfg, &unc).total(), 145.2, max_relative = 1e-12);
    }

    #[test]
    fn envelope_example() {
        let (lo, hi) = envelope_interval(50.0, -2.0, 0.0, 100.0, -5.0, 0.0);
        assert_relative_eq!(lo, -200.0);
        assert_relative_eq!(hi, 0.0);
        assert!(lo <= -100.0 && -100.0 <= hi);
        let (lo, hi) = envelope_interval(7.0, -3.0, 7.0, 7.0, -3.0, -3.0);
        assert_relative_eq!(lo, -21.0);
        assert_relative_eq!(hi, -21.0);
    }

    #[test]
    fn exact_matches_relaxed_when_products_are_exact() {
        let (cfg, unc, layout) = ctx_parts();
        let mut s = TradeState::zeros(&layout);
        for t in 0..cfg.hours {
            for g in 0..3 {
                s.p_g[(g, t)] = 40.0 + g as f64;
                s.a[t][(g, 0)] = 0.2;
                s.pi_g[(g, t)] = 0.2 * unc.slices[t].m[0];
                s.chi[(g, t)] = s.p_g[(g, t)] * s.pi_g[(g, t)];
            }
            for i in 0..3 {
                s.p_u[(i, t)] = 30.0;
                s.b[t][(i, 1)] = 0.3;
                s.pi_u[(i, t)] = 0.3 * unc.slices[t].m[1];
                s.phi_v[(i, t)] = s.p_u[(i, t)] * s.pi_u[(i, t)];
            }
        }
        assert_relative_eq!(
            exact_objective(&s, &cfg, &unc).total(),
            relaxed_objective(&s, &cfg, &unc).total(),
            max_relative = 1e-12
        );
        let (eg, eu) = mccormick_errors(&s);
        assert!(eg < 1e-12 && eu < 1e-12);
    }

    #[test]
    fn initial_bounds() {
        let (cfg, unc, _) = ctx_parts();
        let b = McCormickBounds::initial(&cfg, &unc);
        b.validate().unwrap();
        assert_eq!(b.cg.p_hi[(0, 5)], 260.0);
        for t in 0..cfg.hours {
            assert_relative_eq!(b.cg.pi_lo[(0, t)], -unc.slices[t].mean_inf_norm());
            assert_eq!(b.user.pi_hi[(2, t)], 0.0);
        }
        let mut bad = b.clone();
        bad.user.p_lo[(1, 3)] = 1e6;
        assert!(matches!(bad.validate(), Err(ModelError::InvertedBounds { hour: 3, .. })));
    }

    #[test]
    fn emissions_and_holdings() {
        let (cfg, _, layout) = ctx_parts();
        let mut s = TradeState::zeros(&layout);
        s.eb[0][(0, 0)] = -60.0;
        s.eb[1][(0, 0)] = -40.0;
        s.eb[1][(0, 3)] = -40.0;
        assert_relative_eq!(s.user_emissions(&cfg)[0], 87.0, max_relative = 1e-12);
        s.c[0] = -204.06;
        s.c_s[0] = 584.20;
        s.id[0] = true;
        s.c[3] = 307.05;
        let h = s.holdings(&cfg);
        assert_relative_eq!(h.psi[0], 1011.74, max_relative = 1e-12);
        assert_relative_eq!(h.psi[3], 307.05);
    }
}
