//! Convex conic subproblems: a PSD quadratic objective, linear equalities and
//! inequalities, and second-order cone constraints, solved with an
//! interior-point backend. A single binary slot is handled by enumeration.

use std::collections::BTreeMap;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};

/// Tolerance handed to the interior-point backend for gap and feasibility.
pub const SOLVER_TOLERANCE: f64 = 1e-8;

/// Post-solve feasibility check. Residuals are measured in the problem's own
/// (unscaled) units, so this is looser than [`SOLVER_TOLERANCE`].
pub const FEASIBILITY_CHECK: f64 = 1e-5;

/// Handle to a decision variable inside one [`ConicProblem`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub usize);

/// Affine expression `Σ aᵢ xᵢ + constant`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LinExpr {
    pub terms: Vec<(Var, f64)>,
    pub constant: f64,
}

impl LinExpr {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn constant(value: f64) -> Self {
        Self { terms: Vec::new(), constant: value }
    }

    pub fn term(var: Var, coef: f64) -> Self {
        Self { terms: vec![(var, coef)], constant: 0.0 }
    }

    pub fn sum<I: IntoIterator<Item = (Var, f64)>>(terms: I) -> Self {
        Self { terms: terms.into_iter().collect(), constant: 0.0 }
    }

    pub fn add_term(&mut self, var: Var, coef: f64) -> &mut Self {
        if coef != 0.0 {
            self.terms.push((var, coef));
        }
        self
    }

    pub fn add_constant(&mut self, value: f64) -> &mut Self {
        self.constant += value;
        self
    }

    /// Merge repeated variables and drop zero coefficients.
    pub fn compact(&self) -> Self {
        let mut merged: BTreeMap<Var, f64> = BTreeMap::new();
        for &(v, a) in &self.terms {
            *merged.entry(v).or_insert(0.0) += a;
        }
        Self {
            terms: merged.into_iter().filter(|&(_, a)| a != 0.0).collect(),
            constant: self.constant,
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|&(v, a)| a * x[v.0]).sum::<f64>() + self.constant
    }

    pub fn is_constant(&self) -> bool {
        self.terms.iter().all(|&(_, a)| a == 0.0)
    }
}

impl From<Var> for LinExpr {
    fn from(v: Var) -> Self {
        LinExpr::term(v, 1.0)
    }
}

impl From<f64> for LinExpr {
    fn from(c: f64) -> Self {
        LinExpr::constant(c)
    }
}

impl Add for LinExpr {
    type Output = LinExpr;
    fn add(mut self, rhs: LinExpr) -> LinExpr {
        self.terms.extend(rhs.terms);
        self.constant += rhs.constant;
        self
    }
}

impl AddAssign for LinExpr {
    fn add_assign(&mut self, rhs: LinExpr) {
        self.terms.extend(rhs.terms);
        self.constant += rhs.constant;
    }
}

impl Sub for LinExpr {
    type Output = LinExpr;
    fn sub(self, rhs: LinExpr) -> LinExpr {
        self + (-rhs)
    }
}

impl Neg for LinExpr {
    type Output = LinExpr;
    fn neg(self) -> LinExpr {
        self * -1.0
    }
}

impl Mul<f64> for LinExpr {
    type Output = LinExpr;
    fn mul(mut self, s: f64) -> LinExpr {
        for t in &mut self.terms {
            t.1 *= s;
        }
        self.constant *= s;
        self
    }
}

/// `‖entries‖₂ ≤ bound`.
#[derive(Clone, Debug, PartialEq)]
pub struct SocConstraint {
    pub bound: LinExpr,
    pub entries: Vec<LinExpr>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    IterLimit,
    NumericalFailure,
}

#[derive(Clone, Debug)]
pub struct ConicSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub status: SolveStatus,
    /// Largest constraint violation at `x` (absolute units).
    pub max_violation: f64,
    pub iterations: u32,
}

impl ConicSolution {
    pub fn value(&self, v: Var) -> f64 {
        self.x[v.0]
    }

    pub fn eval(&self, e: &LinExpr) -> f64 {
        e.eval(&self.x)
    }

    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }
}

/// A convex problem with quadratic objective `Σ wₖ (eₖ)² + linear`, where
/// every weight `wₖ ≥ 0` so the quadratic form is PSD by construction.
#[derive(Clone, Debug, Default)]
pub struct ConicProblem {
    lower: Vec<f64>,
    upper: Vec<f64>,
    squares: Vec<(f64, LinExpr)>,
    linear: LinExpr,
    equalities: Vec<LinExpr>,
    inequalities: Vec<LinExpr>,
    cones: Vec<SocConstraint>,
    binaries: Vec<Var>,
}

impl ConicProblem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_vars(&self) -> usize {
        self.lower.len()
    }

    pub fn add_var(&mut self, lower: f64, upper: f64) -> Var {
        self.lower.push(lower);
        self.upper.push(upper);
        Var(self.lower.len() - 1)
    }

    pub fn add_free(&mut self) -> Var {
        self.add_var(f64::NEG_INFINITY, f64::INFINITY)
    }

    pub fn add_vars(&mut self, n: usize, lower: f64, upper: f64) -> Vec<Var> {
        (0..n).map(|_| self.add_var(lower, upper)).collect()
    }

    /// Declare a {0,1} variable; see [`ConicProblem::solve_with_binary`].
    pub fn add_binary(&mut self) -> Var {
        let v = self.add_var(0.0, 1.0);
        self.binaries.push(v);
        v
    }

    pub fn binaries(&self) -> &[Var] {
        &self.binaries
    }

    pub fn bounds(&self, v: Var) -> (f64, f64) {
        (self.lower[v.0], self.upper[v.0])
    }

    /// Intersect the variable's box with `[lower, upper]`.
    pub fn tighten(&mut self, v: Var, lower: f64, upper: f64) {
        self.lower[v.0] = self.lower[v.0].max(lower);
        self.upper[v.0] = self.upper[v.0].min(upper);
    }

    pub fn fix(&mut self, v: Var, value: f64) {
        self.lower[v.0] = value;
        self.upper[v.0] = value;
    }

    /// `expr = 0`
    pub fn add_eq(&mut self, expr: LinExpr) {
        self.equalities.push(expr);
    }

    /// `expr ≤ 0`
    pub fn add_le(&mut self, expr: LinExpr) {
        self.inequalities.push(expr);
    }

    /// `lhs ≤ rhs`
    pub fn add_le2(&mut self, lhs: LinExpr, rhs: LinExpr) {
        self.inequalities.push(lhs - rhs);
    }

    pub fn add_soc(&mut self, bound: LinExpr, entries: Vec<LinExpr>) {
        let entries: Vec<LinExpr> = entries.into_iter().filter(|e| !is_zero(e)).collect();
        if entries.iter().all(LinExpr::is_constant) {
            // ‖const‖ ≤ bound is linear.
            let norm = entries.iter().map(|e| e.constant * e.constant).sum::<f64>().sqrt();
            self.add_le(LinExpr::constant(norm) - bound);
        } else {
            self.cones.push(SocConstraint { bound, entries });
        }
    }

    pub fn minimize(&mut self, expr: LinExpr) {
        self.linear += expr;
    }

    /// Adds `weight · expr²` to the objective. Requires `weight ≥ 0`.
    pub fn add_square(&mut self, weight: f64, expr: LinExpr) {
        assert!(weight >= 0.0, "negative weight on a squared term breaks convexity");
        if weight > 0.0 {
            self.squares.push((weight, expr));
        }
    }

    pub fn objective_at(&self, x: &[f64]) -> f64 {
        self.linear.eval(x)
            + self
                .squares
                .iter()
                .map(|(w, e)| {
                    let v = e.eval(x);
                    w * v * v
                })
                .sum::<f64>()
    }

    /// Largest violation of any bound or constraint at `x`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for (i, &xi) in x.iter().enumerate() {
            worst = worst.max(self.lower[i] - xi).max(xi - self.upper[i]);
        }
        for e in &self.equalities {
            worst = worst.max(e.eval(x).abs());
        }
        for e in &self.inequalities {
            worst = worst.max(e.eval(x));
        }
        for c in &self.cones {
            let norm = c.entries.iter().map(|e| e.eval(x).powi(2)).sum::<f64>().sqrt();
            worst = worst.max(norm - c.bound.eval(x));
        }
        worst
    }

    /// Solve the continuous relaxation (binaries are treated as `[0, 1]`
    /// unless already fixed).
    pub fn solve(&self) -> ConicSolution {
        let n = self.num_vars();
        if self.lower.iter().zip(&self.upper).any(|(l, u)| l > u) {
            return ConicSolution {
                x: vec![0.0; n],
                objective: f64::NAN,
                status: SolveStatus::Infeasible,
                max_violation: f64::INFINITY,
                iterations: 0,
            };
        }

        // Quadratic part: Σ w (a·x + c)² → ½ xᵀPx + qᵀx + const.
        let mut p_entries: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        let mut q = vec![0.0; n];
        for &(v, a) in &self.linear.terms {
            q[v.0] += a;
        }
        for (w, e) in &self.squares {
            let e = e.compact();
            for (ii, &(vi, ai)) in e.terms.iter().enumerate() {
                q[vi.0] += 2.0 * w * e.constant * ai;
                for &(vj, aj) in &e.terms[ii..] {
                    let (r, c) = if vi.0 <= vj.0 { (vi.0, vj.0) } else { (vj.0, vi.0) };
                    *p_entries.entry((r, c)).or_insert(0.0) += 2.0 * w * ai * aj;
                }
            }
        }
        let (pi, pj, pv) = triplets(p_entries);
        let p_mat = CscMatrix::new_from_triplets(n, n, pi, pj, pv);

        // Constraint rows: A x + s = b.
        let mut ai = Vec::new();
        let mut aj = Vec::new();
        let mut av = Vec::new();
        let mut b = Vec::new();
        let mut cones = Vec::new();
        let mut row = 0usize;
        let mut push_row = |expr: &LinExpr, sign: f64, ai: &mut Vec<usize>, aj: &mut Vec<usize>, av: &mut Vec<f64>, b: &mut Vec<f64>| {
            // s = sign·(expr) ⇒ A row = -sign·a, b = sign·constant
            for &(v, a) in &expr.terms {
                if a != 0.0 {
                    ai.push(row);
                    aj.push(v.0);
                    av.push(-sign * a);
                }
            }
            b.push(sign * expr.constant);
            row += 1;
        };

        let mut n_eq = 0;
        for i in 0..n {
            if self.lower[i] == self.upper[i] {
                push_row(&(LinExpr::term(Var(i), 1.0) - LinExpr::constant(self.lower[i])), 1.0, &mut ai, &mut aj, &mut av, &mut b);
                n_eq += 1;
            }
        }
        for e in &self.equalities {
            push_row(e, 1.0, &mut ai, &mut aj, &mut av, &mut b);
            n_eq += 1;
        }
        if n_eq > 0 {
            cones.push(SupportedConeT::ZeroConeT(n_eq));
        }

        let mut n_ineq = 0;
        for i in 0..n {
            if self.lower[i] == self.upper[i] {
                continue;
            }
            if self.lower[i].is_finite() {
                // x - l ≥ 0
                push_row(&(LinExpr::term(Var(i), 1.0) - LinExpr::constant(self.lower[i])), 1.0, &mut ai, &mut aj, &mut av, &mut b);
                n_ineq += 1;
            }
            if self.upper[i].is_finite() {
                push_row(&(LinExpr::term(Var(i), 1.0) - LinExpr::constant(self.upper[i])), -1.0, &mut ai, &mut aj, &mut av, &mut b);
                n_ineq += 1;
            }
        }
        for e in &self.inequalities {
            // e ≤ 0 ⇔ -e ≥ 0
            push_row(e, -1.0, &mut ai, &mut aj, &mut av, &mut b);
            n_ineq += 1;
        }
        if n_ineq > 0 {
            cones.push(SupportedConeT::NonnegativeConeT(n_ineq));
        }

        for c in &self.cones {
            push_row(&c.bound, 1.0, &mut ai, &mut aj, &mut av, &mut b);
            for e in &c.entries {
                push_row(e, 1.0, &mut ai, &mut aj, &mut av, &mut b);
            }
            cones.push(SupportedConeT::SecondOrderConeT(1 + c.entries.len()));
        }

        let m = b.len();
        let a_mat = CscMatrix::new_from_triplets(m, n, ai, aj, av);

        let settings = DefaultSettingsBuilder::default()
            .verbose(false)
            .tol_gap_abs(SOLVER_TOLERANCE)
            .tol_gap_rel(SOLVER_TOLERANCE)
            .tol_feas(SOLVER_TOLERANCE)
            .max_iter(300)
            .build()
            .expect("static solver settings are valid");

        let mut solver = match DefaultSolver::new(&p_mat, &q, &a_mat, &b, &cones, settings) {
            Ok(s) => s,
            Err(_) => {
                return ConicSolution {
                    x: vec![0.0; n],
                    objective: f64::NAN,
                    status: SolveStatus::NumericalFailure,
                    max_violation: f64::INFINITY,
                    iterations: 0,
                }
            }
        };
        solver.solve();
        let sol = &solver.solution;
        let x = sol.x.clone();
        let max_violation = self.max_violation(&x);
        let mut status = match sol.status {
            SolverStatus::Solved | SolverStatus::AlmostSolved => SolveStatus::Optimal,
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => SolveStatus::Infeasible,
            SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => SolveStatus::Unbounded,
            SolverStatus::MaxIterations | SolverStatus::MaxTime => SolveStatus::IterLimit,
            _ => SolveStatus::NumericalFailure,
        };
        if status == SolveStatus::Optimal && !(max_violation <= FEASIBILITY_CHECK * (1.0 + scale_of(&x))) {
            status = SolveStatus::NumericalFailure;
        }
        ConicSolution {
            objective: self.objective_at(&x),
            x,
            status,
            max_violation,
            iterations: sol.iterations,
        }
    }

    /// Solve both restrictions `slot = 0` and `slot = 1`; keep the feasible
    /// one with the lower objective. Ties go to `1`.
    pub fn solve_with_binary(&self, slot: Var) -> (ConicSolution, bool) {
        let mut zero = self.clone();
        zero.fix(slot, 0.0);
        let mut one = self.clone();
        one.fix(slot, 1.0);
        let s0 = zero.solve();
        let s1 = one.solve();
        match (s0.is_optimal(), s1.is_optimal()) {
            (true, true) => {
                if s0.objective < s1.objective - tie_tolerance(s0.objective, s1.objective) {
                    (s0, false)
                } else {
                    (s1, true)
                }
            }
            (true, false) => (s0, false),
            (false, true) => (s1, true),
            (false, false) => {
                let status = if s0.status == SolveStatus::Infeasible && s1.status == SolveStatus::Infeasible {
                    SolveStatus::Infeasible
                } else if s1.status != SolveStatus::Infeasible {
                    s1.status
                } else {
                    s0.status
                };
                (ConicSolution { status, ..s1 }, true)
            }
        }
    }
}

fn tie_tolerance(a: f64, b: f64) -> f64 {
    1e-9 * (1.0 + a.abs().max(b.abs()))
}

fn scale_of(x: &[f64]) -> f64 {
    x.iter().fold(0.0_f64, |m, v| m.max(v.abs())).min(1e4)
}

fn is_zero(e: &LinExpr) -> bool {
    e.constant == 0.0 && e.terms.iter().all(|&(_, a)| a == 0.0)
}

fn triplets(entries: BTreeMap<(usize, usize), f64>) -> (Vec<usize>, Vec<usize>, Vec<f64>) {
    let mut i = Vec::with_capacity(entries.len());
    let mut j = Vec::with_capacity(entries.len());
    let mut v = Vec::with_capacity(entries.len());
    for ((r, c), val) in entries {
        if val != 0.0 {
            i.push(r);
            j.push(c);
            v.push(val);
        }
    }
    (i, j, v)
}
