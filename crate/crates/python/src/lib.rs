//! Python bindings: scenarios, market clearing in either mode, and the
//! audits that go with an outcome.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ecmarket::coordinator::{MarketOutcome, RunStatus};
use ecmarket::market_model;
use ecmarket::scenario::{bundled_reference_case, load_scenario, ScenarioConfig};
use ecmarket::uncertainty;
use ecmarket::validation::{self, SolveMode};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn run_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn parse_mode(mode: &str) -> PyResult<SolveMode> {
    match mode {
        "decentralized" => Ok(SolveMode::Decentralized),
        "centralized" => Ok(SolveMode::Centralized),
        other => Err(PyValueError::new_err(format!("mode must be 'decentralized' or 'centralized', got {other:?}"))),
    }
}

/// A validated market scenario.
#[pyclass(module = "pyecmarket", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct Scenario {
    cfg: ScenarioConfig,
}

#[pymethods]
impl Scenario {
    /// The bundled eight-participant, 24-hour community.
    #[staticmethod]
    fn reference() -> Self {
        Self { cfg: bundled_reference_case() }
    }

    /// Loads a TOML scenario file; `"ref"` gives the bundled case.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        load_scenario(path).map(|cfg| Self { cfg }).map_err(value_err)
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        ScenarioConfig::from_toml_str(text).map(|cfg| Self { cfg }).map_err(value_err)
    }

    fn to_toml(&self) -> String {
        self.cfg.to_toml_string()
    }

    /// Copy with algorithm settings replaced.
    #[pyo3(signature = (*, max_admm_iters=None, max_rounds=None, warm_start=None, adaptive_penalty=None, penalties=None))]
    fn with_algorithm(
        &self,
        max_admm_iters: Option<usize>,
        max_rounds: Option<usize>,
        warm_start: Option<bool>,
        adaptive_penalty: Option<bool>,
        penalties: Option<(f64, f64, f64, f64)>,
    ) -> PyResult<Self> {
        let mut cfg = self.cfg.clone();
        let a = &mut cfg.algo;
        if let Some(v) = max_admm_iters {
            a.max_admm_iters = v;
        }
        if let Some(v) = max_rounds {
            a.max_rounds = v;
        }
        if let Some(v) = warm_start {
            a.warm_start = v;
        }
        if let Some(v) = adaptive_penalty {
            a.adaptive_penalty = v;
        }
        if let Some((gamma, tau, rho, phi)) = penalties {
            a.penalties = ecmarket::scenario::Penalties { gamma, tau, rho, phi };
        }
        cfg.validate().map_err(value_err)?;
        Ok(Self { cfg })
    }

    /// Copy with flat manager prices.
    fn with_prices(&self, r_e: f64, r_c_sell: f64) -> PyResult<Self> {
        let mut cfg = self.cfg.clone();
        cfg.prices.r_e = vec![r_e; cfg.hours];
        cfg.prices.r_c_sell = r_c_sell;
        cfg.validate().map_err(value_err)?;
        Ok(Self { cfg })
    }

    #[getter]
    fn name(&self) -> &str {
        &self.cfg.name
    }

    #[getter]
    fn hours(&self) -> usize {
        self.cfg.hours
    }

    #[getter]
    fn n_users(&self) -> usize {
        self.cfg.n_users()
    }

    #[getter]
    fn n_res(&self) -> usize {
        self.cfg.n_res()
    }

    #[getter]
    fn n_cgs(&self) -> usize {
        self.cfg.n_cgs()
    }

    /// Participant names: users, then RES, then CGs.
    #[getter]
    fn participants(&self) -> Vec<String> {
        self.cfg.participants().into_iter().map(|p| self.cfg.participant_name(p).to_string()).collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Scenario(name={:?}, hours={}, users={}, res={}, cgs={})",
            self.cfg.name,
            self.cfg.hours,
            self.cfg.n_users(),
            self.cfg.n_res(),
            self.cfg.n_cgs()
        )
    }
}

/// A cleared market together with the scenario that produced it.
#[pyclass(module = "pyecmarket", frozen)]
pub struct Outcome {
    out: MarketOutcome,
    cfg: ScenarioConfig,
}

fn rows_to_py<'py, T: serde::Serialize>(py: Python<'py>, rows: &[T]) -> PyResult<Vec<Bound<'py, PyDict>>> {
    rows.iter().map(|r| to_dict(py, r)).collect()
}

/// Flat serde struct to dict, via a TOML table.
fn to_dict<'py, T: serde::Serialize>(py: Python<'py>, row: &T) -> PyResult<Bound<'py, PyDict>> {
    let table = toml::Table::try_from(row).map_err(run_err)?;
    let d = PyDict::new(py);
    for (k, v) in table {
        match v {
            toml::Value::Float(x) => d.set_item(k, x)?,
            toml::Value::Integer(x) => d.set_item(k, x)?,
            toml::Value::Boolean(x) => d.set_item(k, x)?,
            toml::Value::String(x) => d.set_item(k, x)?,
            other => d.set_item(k, other.to_string())?,
        }
    }
    Ok(d)
}

#[pymethods]
impl Outcome {
    #[getter]
    fn welfare(&self) -> f64 {
        self.out.welfare
    }

    #[getter]
    fn status(&self) -> &'static str {
        match self.out.status {
            RunStatus::Converged => "converged",
            RunStatus::AdmmIterLimit => "admm_iter_limit",
            RunStatus::RoundLimit => "round_limit",
        }
    }

    #[getter]
    fn converged(&self) -> bool {
        self.out.converged()
    }

    #[getter]
    fn total_iterations(&self) -> usize {
        self.out.total_iterations()
    }

    /// Inner iterations of each round.
    #[getter]
    fn round_iterations(&self) -> Vec<usize> {
        self.out.rounds.iter().map(|r| r.iterations).collect()
    }

    /// Allowance sharing price.
    #[getter]
    fn sharing_price(&self) -> f64 {
        self.out.duals.prices.theta
    }

    /// Hourly setpoints keyed by participant name.
    fn setpoints<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let d = PyDict::new(py);
        let s = &self.out.state;
        let rows = |m: &nalgebra::DMatrix<f64>, i: usize| m.row(i).iter().copied().collect::<Vec<_>>();
        for (i, u) in self.cfg.users.iter().enumerate() {
            d.set_item(&u.name, rows(&s.p_u, i))?;
        }
        for (j, r) in self.cfg.res.iter().enumerate() {
            d.set_item(&r.name, rows(&s.p_r, j))?;
        }
        for (g, c) in self.cfg.cgs.iter().enumerate() {
            d.set_item(&c.name, rows(&s.p_g, g))?;
        }
        Ok(d)
    }

    /// Σ factors per RES and hour; −1 at a consistent outcome.
    fn factor_sums(&self) -> PyResult<Vec<Vec<f64>>> {
        (0..self.cfg.n_res())
            .map(|j| (0..self.cfg.hours).map(|t| self.out.state.factor_sum(j, t).map_err(run_err)).collect())
            .collect()
    }

    fn carbon_sum(&self) -> f64 {
        self.out.state.carbon_sum()
    }

    fn mccormick_errors(&self) -> (f64, f64) {
        market_model::mccormick_errors(&self.out.state)
    }

    fn carbon_ledger<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let l = validation::carbon_ledger(&self.out, &self.cfg).map_err(run_err)?;
        let rows = rows_to_py(py, &l.rows)?;
        for r in &rows {
            r.set_item("sharing_price", l.sharing_price)?;
        }
        Ok(rows)
    }

    fn profits<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let rows = validation::profits(&self.out, &self.cfg).map_err(run_err)?;
        rows_to_py(py, &rows)
    }

    /// Per-iteration residual trace.
    fn residuals<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.out
            .residuals
            .iter()
            .map(|r| {
                let d = PyDict::new(py);
                d.set_item("round", r.round)?;
                d.set_item("iteration", r.iteration)?;
                for (k, v) in [
                    ("se", r.se),
                    ("sr", r.sr),
                    ("sd", r.sd),
                    ("sc", r.sc),
                    ("te", r.te),
                    ("tr", r.tr),
                    ("td", r.td),
                    ("tc", r.tc),
                    ("err_g", r.err_g),
                    ("err_u", r.err_u),
                ] {
                    d.set_item(k, v)?;
                }
                Ok(d)
            })
            .collect()
    }

    /// Monte Carlo violation frequency per chance constraint.
    #[pyo3(signature = (n_samples=100_000, seed=7))]
    fn chance_audit<'py>(&self, py: Python<'py>, n_samples: usize, seed: u64) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let a = py.detach(|| validation::monte_carlo_audit(&self.out, &self.cfg, n_samples, seed)).map_err(run_err)?;
        rows_to_py(py, &a.chance)
    }

    /// Fixed-price best responses of every participant.
    fn equilibrium_check<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let a = py.detach(|| validation::verify_equilibrium(&self.out, &self.cfg)).map_err(run_err)?;
        rows_to_py(py, &a.equilibrium)
    }

    fn __repr__(&self) -> String {
        format!("Outcome(welfare={:.6}, status={}, iterations={})", self.out.welfare, self.status(), self.total_iterations())
    }
}

/// Clears the market; `mode` is "decentralized" or "centralized".
#[pyfunction]
#[pyo3(signature = (scenario, mode="decentralized"))]
fn solve(py: Python<'_>, scenario: &Scenario, mode: &str) -> PyResult<Outcome> {
    let m = parse_mode(mode)?;
    let cfg = scenario.cfg.clone();
    let out = py.detach(|| validation::solve(&cfg, m)).map_err(run_err)?;
    Ok(Outcome { out, cfg })
}

/// The three market-design cases.
#[pyfunction]
#[pyo3(signature = (scenario, mode="centralized"))]
fn run_cases<'py>(py: Python<'py>, scenario: &Scenario, mode: &str) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let m = parse_mode(mode)?;
    let rows = py.detach(|| validation::run_cases(&scenario.cfg, m)).map_err(run_err)?;
    rows_to_py(py, &rows)
}

/// Best welfare over a grid of the exact market; tiny scenarios only.
#[pyfunction]
#[pyo3(signature = (scenario, steps=20))]
fn brute_force_welfare(py: Python<'_>, scenario: &Scenario, steps: usize) -> PyResult<f64> {
    py.detach(|| validation::brute_force_oracle(&scenario.cfg, steps)).map_err(run_err)
}

/// Welfare of the first relaxation, an upper bound on the exact optimum.
#[pyfunction]
fn relaxation_bound(py: Python<'_>, scenario: &Scenario) -> PyResult<f64> {
    py.detach(|| validation::relaxation_bound(&scenario.cfg)).map_err(run_err)
}

/// Moments of the forecast-error model for scale σ.
#[pyfunction]
fn moments_from_sigma<'py>(py: Python<'py>, sigma: f64) -> PyResult<Bound<'py, PyDict>> {
    let m = uncertainty::moments_from_sigma(sigma).map_err(value_err)?;
    let d = PyDict::new(py);
    d.set_item("mu", m.mu)?;
    d.set_item("delta", m.delta)?;
    d.set_item("mean", m.mean)?;
    d.set_item("variance", m.variance)?;
    Ok(d)
}

#[pyfunction]
fn z_factor(epsilon: f64) -> PyResult<f64> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(PyValueError::new_err("epsilon must lie in (0, 1)"));
    }
    Ok(uncertainty::z_factor(epsilon))
}

/// Interval of w allowed by the McCormick envelope of p·π over a box.
#[pyfunction]
fn envelope_interval(p: f64, pi: f64, p_lo: f64, p_hi: f64, pi_lo: f64, pi_hi: f64) -> (f64, f64) {
    market_model::envelope_interval(p, pi, p_lo, p_hi, pi_lo, pi_hi)
}

#[pymodule]
fn pyecmarket(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Scenario>()?;
    m.add_class::<Outcome>()?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(run_cases, m)?)?;
    m.add_function(wrap_pyfunction!(brute_force_welfare, m)?)?;
    m.add_function(wrap_pyfunction!(relaxation_bound, m)?)?;
    m.add_function(wrap_pyfunction!(moments_from_sigma, m)?)?;
    m.add_function(wrap_pyfunction!(z_factor, m)?)?;
    m.add_function(wrap_pyfunction!(envelope_interval, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
