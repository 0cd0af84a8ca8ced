//! Scenario configuration: participants, prices, algorithm settings, the
//! bundled 8-participant reference community, and the variable layout.
//!
//! Scenarios are TOML files. Hourly quantities accept either a scalar (same
//! value every hour) or an array of length `hours`.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
}

fn invalid(path: impl Into<String>, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid { path: path.into(), message: message.into() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParticipantKind {
    User,
    Res,
    Cg,
}

/// A participant, identified by its kind and ordinal within that kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParticipantId {
    pub kind: ParticipantKind,
    pub index: usize,
}

impl ParticipantId {
    pub fn user(index: usize) -> Self {
        Self { kind: ParticipantKind::User, index }
    }
    pub fn res(index: usize) -> Self {
        Self { kind: ParticipantKind::Res, index }
    }
    pub fn cg(index: usize) -> Self {
        Self { kind: ParticipantKind::Cg, index }
    }
}

impl fmt::Display for ParticipantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.kind {
            ParticipantKind::User => "user",
            ParticipantKind::Res => "res",
            ParticipantKind::Cg => "cg",
        };
        write!(f, "{tag}[{}]", self.index)
    }
}

/// Conventional generator (micro-turbine, CHP).
#[derive(Clone, Debug, PartialEq)]
pub struct CgParams {
    pub name: String,
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    pub p_min: Vec<f64>,
    pub p_max: Vec<f64>,
    /// Carbon intensity, kg CO₂ per kWh.
    pub sigma: f64,
    pub epsilon: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserParams {
    pub name: String,
    pub d1: f64,
    pub d2: f64,
    pub p_min: Vec<f64>,
    pub p_max: Vec<f64>,
    /// Initial daily allowance, kg CO₂.
    pub psi0: f64,
    pub epsilon: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResParams {
    pub name: String,
    pub forecast: Vec<f64>,
    /// Forecast-error standard deviation as a fraction of the forecast.
    pub sigma_rel: f64,
    pub epsilon: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MarketPrices {
    /// Manager's buying price for surplus renewable energy, per hour.
    pub r_e: Vec<f64>,
    /// Manager's buying price for allowances.
    pub r_c_sell: f64,
}

/// How allowances change hands.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "market", rename_all = "snake_case")]
pub enum CarbonMarket {
    /// Balanced sharing inside the community at an endogenous price, plus
    /// sales to the manager.
    Sharing,
    /// No sharing: buy from and sell to the operator at fixed prices.
    FixedPrice { buy_price: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Penalties {
    /// Flexibility (β) consensus.
    pub rho: f64,
    /// Energy consensus.
    pub gamma: f64,
    /// Reserve (α) consensus.
    pub tau: f64,
    /// Allowance-sharing consensus.
    pub phi: f64,
}

impl Default for Penalties {
    fn default() -> Self {
        Self { rho: 1.0, gamma: 1.0, tau: 1.0, phi: 1.0 }
    }
}

/// One threshold per consensus block: energy, reserve, flexibility, carbon.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockTolerances {
    pub e: f64,
    pub r: f64,
    pub d: f64,
    pub c: f64,
}

impl Default for BlockTolerances {
    fn default() -> Self {
        Self { e: 1e-4, r: 1e-6, d: 1e-6, c: 1e-4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlgoConfig {
    pub penalties: Penalties,
    pub tol_primal: BlockTolerances,
    pub tol_dual: BlockTolerances,
    /// Initial contraction scalar.
    pub eps0: f64,
    /// Contraction scalar decrement per round.
    pub kappa: f64,
    pub delta_g: f64,
    pub delta_u: f64,
    pub max_admm_iters: usize,
    pub max_rounds: usize,
    pub adaptive_penalty: bool,
    /// Also require the local copies to stop moving before ADMM stops.
    pub movement_check: bool,
    pub tol_movement: BlockTolerances,
    pub warm_start: bool,
    /// Big-M for the seller/buyer identity; defaults to the community cap.
    pub big_m: Option<f64>,
}

impl Default for AlgoConfig {
    fn default() -> Self {
        Self {
            penalties: Penalties::default(),
            tol_primal: BlockTolerances::default(),
            tol_dual: BlockTolerances::default(),
            eps0: 0.5,
            kappa: 0.2,
            delta_g: 1e-2,
            delta_u: 1e-2,
            max_admm_iters: 5000,
            max_rounds: 10,
            adaptive_penalty: true,
            movement_check: true,
            tol_movement: BlockTolerances { e: 1e-6, r: 1e-6, d: 1e-6, c: 1e-6 },
            warm_start: true,
            big_m: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioConfig {
    pub name: String,
    pub hours: usize,
    pub cgs: Vec<CgParams>,
    pub users: Vec<UserParams>,
    pub res: Vec<ResParams>,
    pub prices: MarketPrices,
    pub carbon: CarbonMarket,
    /// When false users cannot sell flexibility (β ≡ 0).
    pub flexibility: bool,
    /// Optional correlation matrix of forecast errors across RES.
    pub res_correlation: Option<Vec<Vec<f64>>>,
    pub algo: AlgoConfig,
}

impl ScenarioConfig {
    pub fn n_users(&self) -> usize {
        self.users.len()
    }
    pub fn n_res(&self) -> usize {
        self.res.len()
    }
    pub fn n_cgs(&self) -> usize {
        self.cgs.len()
    }
    /// Sellers are ordered CGs first, then RES.
    pub fn n_sellers(&self) -> usize {
        self.cgs.len() + self.res.len()
    }

    /// Community allowance cap Σ ψ⁰.
    pub fn allowance_cap(&self) -> f64 {
        self.users.iter().map(|u| u.psi0).sum()
    }

    pub fn big_m(&self) -> f64 {
        self.algo.big_m.unwrap_or_else(|| self.allowance_cap().max(1.0))
    }

    pub fn participants(&self) -> Vec<ParticipantId> {
        let mut out = Vec::new();
        out.extend((0..self.n_users()).map(ParticipantId::user));
        out.extend((0..self.n_res()).map(ParticipantId::res));
        out.extend((0..self.n_cgs()).map(ParticipantId::cg));
        out
    }

    pub fn participant_name(&self, id: ParticipantId) -> &str {
        match id.kind {
            ParticipantKind::User => &self.users[id.index].name,
            ParticipantKind::Res => &self.res[id.index].name,
            ParticipantKind::Cg => &self.cgs[id.index].name,
        }
    }

    /// Checks every parameter invariant; errors carry the offending field path.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let t = self.hours;
        if t == 0 {
            return Err(invalid("hours", "must be positive"));
        }
        let check_len = |path: String, v: &[f64]| -> Result<(), ScenarioError> {
            if v.len() != t {
                return Err(invalid(path, format!("expected {t} hourly values, got {}", v.len())));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(invalid(path, "values must be finite"));
            }
            Ok(())
        };
        let check_eps = |path: String, e: f64| -> Result<(), ScenarioError> {
            if !(e > 0.0 && e <= 0.5) {
                return Err(invalid(path, format!("violation probability must lie in (0, 0.5], got {e}")));
            }
            Ok(())
        };
        for (i, g) in self.cgs.iter().enumerate() {
            let p = |f: &str| format!("cg[{i}].{f}");
            check_len(p("p_min"), &g.p_min)?;
            check_len(p("p_max"), &g.p_max)?;
            if !(g.c2 > 0.0) {
                return Err(invalid(p("c2"), "cost must be strictly convex (c2 > 0)"));
            }
            if !g.c0.is_finite() || !g.c1.is_finite() {
                return Err(invalid(p("c1"), "cost coefficients must be finite"));
            }
            if let Some(h) = (0..t).find(|&h| g.p_min[h] > g.p_max[h]) {
                return Err(invalid(p("p_min"), format!("p_min > p_max at hour {h}")));
            }
            if g.p_min.iter().any(|&x| x < 0.0) {
                return Err(invalid(p("p_min"), "output bounds must be non-negative"));
            }
            if !(g.sigma >= 0.0) {
                return Err(invalid(p("sigma"), "carbon intensity must be non-negative"));
            }
            check_eps(p("epsilon"), g.epsilon)?;
        }
        for (i, u) in self.users.iter().enumerate() {
            let p = |f: &str| format!("user[{i}].{f}");
            check_len(p("p_min"), &u.p_min)?;
            check_len(p("p_max"), &u.p_max)?;
            if !(u.d2 < 0.0) {
                return Err(invalid(p("d2"), "utility must be strictly concave (d2 < 0)"));
            }
            if !u.d1.is_finite() {
                return Err(invalid(p("d1"), "must be finite"));
            }
            if u.p_min.iter().any(|&x| x < 0.0) {
                return Err(invalid(p("p_min"), "load bounds must be non-negative"));
            }
            if let Some(h) = (0..t).find(|&h| u.p_min[h] > u.p_max[h]) {
                return Err(invalid(p("p_min"), format!("p_min > p_max at hour {h}")));
            }
            if !(u.psi0 >= 0.0) {
                return Err(invalid(p("psi0"), "initial allowance must be non-negative"));
            }
            check_eps(p("epsilon"), u.epsilon)?;
        }
        for (i, r) in self.res.iter().enumerate() {
            let p = |f: &str| format!("res[{i}].{f}");
            check_len(p("forecast"), &r.forecast)?;
            if r.forecast.iter().any(|&x| x < 0.0) {
                return Err(invalid(p("forecast"), "forecast must be non-negative"));
            }
            if !(r.sigma_rel >= 0.0 && r.sigma_rel < 1.0) {
                return Err(invalid(p("sigma_rel"), "must lie in [0, 1)"));
            }
            check_eps(p("epsilon"), r.epsilon)?;
        }
        check_len("prices.r_e".into(), &self.prices.r_e)?;
        if self.prices.r_e.iter().any(|&x| x < 0.0) {
            return Err(invalid("prices.r_e", "must be non-negative"));
        }
        if !(self.prices.r_c_sell >= 0.0) {
            return Err(invalid("prices.r_c_sell", "must be non-negative"));
        }
        if let CarbonMarket::FixedPrice { buy_price } = self.carbon {
            if !(buy_price >= 0.0) {
                return Err(invalid("carbon.buy_price", "must be non-negative"));
            }
        }
        if let Some(corr) = &self.res_correlation {
            let n = self.n_res();
            if corr.len() != n || corr.iter().any(|row| row.len() != n) {
                return Err(invalid("uncertainty.correlation", format!("must be {n}×{n}")));
            }
            for i in 0..n {
                if (corr[i][i] - 1.0).abs() > 1e-9 {
                    return Err(invalid("uncertainty.correlation", "diagonal must be 1"));
                }
                for j in 0..n {
                    if (corr[i][j] - corr[j][i]).abs() > 1e-9 || corr[i][j].abs() > 1.0 {
                        return Err(invalid("uncertainty.correlation", "must be symmetric with entries in [-1, 1]"));
                    }
                }
            }
            let m = nalgebra::DMatrix::from_fn(n, n, |i, j| corr[i][j]);
            let eig = nalgebra::SymmetricEigen::new(m);
            if eig.eigenvalues.iter().any(|&l| l < -1e-9) {
                return Err(invalid("uncertainty.correlation", "must be positive semidefinite"));
            }
        }
        let a = &self.algo;
        let pen = &a.penalties;
        for (name, v) in [("rho", pen.rho), ("gamma", pen.gamma), ("tau", pen.tau), ("phi", pen.phi)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("algorithm.penalties.{name}"), "must be positive"));
            }
        }
        for (which, tol) in [("tol_primal", &a.tol_primal), ("tol_dual", &a.tol_dual), ("tol_movement", &a.tol_movement)] {
            for (name, v) in [("e", tol.e), ("r", tol.r), ("d", tol.d), ("c", tol.c)] {
                if !(v > 0.0) {
                    return Err(invalid(format!("algorithm.{which}.{name}"), "must be positive"));
                }
            }
        }
        if !(a.eps0 > 0.0 && a.kappa > 0.0) {
            return Err(invalid("algorithm.eps0", "contraction scalars must be positive"));
        }
        if !(a.kappa < a.eps0) {
            return Err(invalid("algorithm.kappa", "must be smaller than eps0"));
        }
        if !(a.delta_g > 0.0 && a.delta_u > 0.0) {
            return Err(invalid("algorithm.delta_g", "McCormick tolerances must be positive"));
        }
        if a.max_admm_iters == 0 || a.max_rounds == 0 {
            return Err(invalid("algorithm.max_rounds", "iteration caps must be positive"));
        }
        if let Some(m) = a.big_m {
            if !(m > 0.0) {
                return Err(invalid("algorithm.big_m", "must be positive"));
            }
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ScenarioError> {
        let file: ScenarioFile = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        let cfg = file.resolve()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(&ScenarioFile::from(self)).expect("scenario serializes")
    }
}

/// Load and validate a scenario file. The literal `ref` (or `reference`)
/// selects the bundled reference case.
pub fn load_scenario(path: impl AsRef<Path>) -> Result<ScenarioConfig, ScenarioError> {
    let path = path.as_ref();
    if matches!(path.to_str(), Some("ref") | Some("reference")) && !path.exists() {
        return Ok(bundled_reference_case());
    }
    let text = std::fs::read_to_string(path)
        .map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })?;
    ScenarioConfig::from_toml_str(&text)
}

// ---------------------------------------------------------------------------
// File schema
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Profile {
    Constant(f64),
    Hourly(Vec<f64>),
}

impl Profile {
    fn expand(&self, hours: usize) -> Vec<f64> {
        match self {
            Profile::Constant(v) => vec![*v; hours],
            Profile::Hourly(v) => v.clone(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    name: String,
    hours: usize,
    #[serde(default = "default_true")]
    flexibility: bool,
    prices: PricesFile,
    #[serde(default)]
    carbon: CarbonFile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    uncertainty: Option<UncertaintyFile>,
    #[serde(default)]
    algorithm: AlgoConfig,
    #[serde(default)]
    cg: Vec<CgFile>,
    #[serde(default)]
    user: Vec<UserFile>,
    #[serde(default)]
    res: Vec<ResFile>,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PricesFile {
    r_e: Profile,
    r_c_sell: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CarbonFile {
    #[serde(default = "default_market")]
    market: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    buy_price: Option<f64>,
}

fn default_market() -> String {
    "sharing".into()
}

impl Default for CarbonFile {
    fn default() -> Self {
        Self { market: default_market(), buy_price: None }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UncertaintyFile {
    correlation: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CgFile {
    name: String,
    c0: f64,
    c1: f64,
    c2: f64,
    #[serde(default = "zero_profile")]
    p_min: Profile,
    p_max: Profile,
    sigma: f64,
    #[serde(default = "default_epsilon")]
    epsilon: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UserFile {
    name: String,
    d1: f64,
    d2: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    p_min: Option<Profile>,
    /// Used when `p_min` is absent: p_min = fraction · p_max.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    p_min_fraction: Option<f64>,
    p_max: Profile,
    psi0: f64,
    #[serde(default = "default_epsilon")]
    epsilon: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ResFile {
    name: String,
    forecast: Profile,
    sigma_rel: f64,
    #[serde(default = "default_epsilon")]
    epsilon: f64,
}

fn zero_profile() -> Profile {
    Profile::Constant(0.0)
}

fn default_epsilon() -> f64 {
    0.05
}

impl ScenarioFile {
    fn resolve(self) -> Result<ScenarioConfig, ScenarioError> {
        let t = self.hours;
        let carbon = match self.carbon.market.as_str() {
            "sharing" => CarbonMarket::Sharing,
            "fixed" | "fixed_price" => CarbonMarket::FixedPrice {
                buy_price: self
                    .carbon
                    .buy_price
                    .ok_or_else(|| invalid("carbon.buy_price", "required for a fixed-price market"))?,
            },
            other => return Err(invalid("carbon.market", format!("unknown market `{other}`"))),
        };
        let users = self
            .user
            .into_iter()
            .enumerate()
            .map(|(i, u)| {
                let p_max = u.p_max.expand(t);
                let p_min = match (u.p_min, u.p_min_fraction) {
                    (Some(p), _) => p.expand(t),
                    (None, Some(f)) => {
                        if !(0.0..=1.0).contains(&f) {
                            return Err(invalid(format!("user[{i}].p_min_fraction"), "must lie in [0, 1]"));
                        }
                        p_max.iter().map(|x| f * x).collect()
                    }
                    (None, None) => vec![0.0; p_max.len()],
                };
                Ok(UserParams { name: u.name, d1: u.d1, d2: u.d2, p_min, p_max, psi0: u.psi0, epsilon: u.epsilon })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ScenarioConfig {
            name: self.name,
            hours: t,
            cgs: self
                .cg
                .into_iter()
                .map(|g| CgParams {
                    name: g.name,
                    c0: g.c0,
                    c1: g.c1,
                    c2: g.c2,
                    p_min: g.p_min.expand(t),
                    p_max: g.p_max.expand(t),
                    sigma: g.sigma,
                    epsilon: g.epsilon,
                })
                .collect(),
            users,
            res: self
                .res
                .into_iter()
                .map(|r| ResParams { name: r.name, forecast: r.forecast.expand(t), sigma_rel: r.sigma_rel, epsilon: r.epsilon })
                .collect(),
            prices: MarketPrices { r_e: self.prices.r_e.expand(t), r_c_sell: self.prices.r_c_sell },
            carbon,
            flexibility: self.flexibility,
            res_correlation: self.uncertainty.map(|u| u.correlation),
            algo: self.algorithm,
        })
    }
}

fn compact_profile(v: &[f64]) -> Profile {
    match v.first() {
        Some(&first) if v.iter().all(|&x| x == first) => Profile::Constant(first),
        _ => Profile::Hourly(v.to_vec()),
    }
}

impl From<&ScenarioConfig> for ScenarioFile {
    fn from(c: &ScenarioConfig) -> Self {
        let (market, buy_price) = match c.carbon {
            CarbonMarket::Sharing => ("sharing".to_string(), None),
            CarbonMarket::FixedPrice { buy_price } => ("fixed".to_string(), Some(buy_price)),
        };
        ScenarioFile {
            name: c.name.clone(),
            hours: c.hours,
            flexibility: c.flexibility,
            prices: PricesFile { r_e: compact_profile(&c.prices.r_e), r_c_sell: c.prices.r_c_sell },
            carbon: CarbonFile { market, buy_price },
            uncertainty: c.res_correlation.clone().map(|correlation| UncertaintyFile { correlation }),
            algorithm: c.algo.clone(),
            cg: c
                .cgs
                .iter()
                .map(|g| CgFile {
                    name: g.name.clone(),
                    c0: g.c0,
                    c1: g.c1,
                    c2: g.c2,
                    p_min: compact_profile(&g.p_min),
                    p_max: compact_profile(&g.p_max),
                    sigma: g.sigma,
                    epsilon: g.epsilon,
                })
                .collect(),
            user: c
                .users
                .iter()
                .map(|u| UserFile {
                    name: u.name.clone(),
                    d1: u.d1,
                    d2: u.d2,
                    p_min: Some(compact_profile(&u.p_min)),
                    p_min_fraction: None,
                    p_max: compact_profile(&u.p_max),
                    psi0: u.psi0,
                    epsilon: u.epsilon,
                })
                .collect(),
            res: c
                .res
                .iter()
                .map(|r| ResFile {
                    name: r.name.clone(),
                    forecast: compact_profile(&r.forecast),
                    sigma_rel: r.sigma_rel,
                    epsilon: r.epsilon,
                })
                .collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Reference community
// ---------------------------------------------------------------------------

/// Synthetic PV day shape: zero up to hour 6 and from hour 20 on, a sine
/// arch in between peaking at hour 13.
pub fn pv_shape(hour: usize) -> f64 {
    let t = hour as f64;
    if t <= 6.0 || t >= 20.0 {
        0.0
    } else {
        (std::f64::consts::PI * (t - 6.0) / 14.0).sin()
    }
}

/// Synthetic residential load upper bound: a base level plus a morning peak
/// around 08:00 and a broader evening peak around 19:00.
pub fn load_shape(hour: usize, base: f64, morning: f64, evening: f64) -> f64 {
    let t = hour as f64;
    base + morning * (-(t - 8.0).powi(2) / (2.0 * 1.5 * 1.5)).exp() + evening * (-(t - 19.0).powi(2) / (2.0 * 2.0 * 2.0)).exp()
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// The three-MT, three-user, two-PV community with generator and user
/// coefficients from the published tables. PV and load profiles are
/// synthetic (see [`pv_shape`] and [`load_shape`]).
pub fn bundled_reference_case() -> ScenarioConfig {
    let hours = 24;
    let mt = |name: &str, c0, c1, c2, p_max, sigma| CgParams {
        name: name.into(),
        c0,
        c1,
        c2,
        p_min: vec![0.0; hours],
        p_max: vec![p_max; hours],
        sigma,
        epsilon: 0.05,
    };
    let user = |name: &str, d1, d2, base, morning, evening| {
        let p_max: Vec<f64> = (0..hours).map(|h| round2(load_shape(h, base, morning, evening))).collect();
        UserParams {
            name: name.into(),
            d1,
            d2,
            p_min: p_max.iter().map(|x| round2(0.4 * x)).collect(),
            p_max,
            psi0: 1800.0,
            epsilon: 0.05,
        }
    };
    let pv = |name: &str, peak: f64| ResParams {
        name: name.into(),
        forecast: (0..hours).map(|h| round2(peak * pv_shape(h))).collect(),
        sigma_rel: 0.1,
        epsilon: 0.05,
    };
    ScenarioConfig {
        name: "reference".into(),
        hours,
        cgs: vec![
            mt("MT1", 2.01, 0.045, 0.00021, 260.0, 0.870),
            mt("MT2", 2.01, 0.050, 0.00021, 270.0, 0.935),
            mt("MT3", 2.03, 0.052, 0.00019, 220.0, 0.910),
        ],
        users: vec![
            user("U1", 0.0870, -0.00014, 90.0, 60.0, 90.0),
            user("U2", 0.0765, -0.00014, 80.0, 50.0, 80.0),
            user("U3", 0.0600, -0.000125, 70.0, 40.0, 70.0),
        ],
        res: vec![pv("PV1", 150.0), pv("PV2", 120.0)],
        prices: MarketPrices { r_e: vec![0.06; hours], r_c_sell: 0.003 },
        carbon: CarbonMarket::Sharing,
        flexibility: true,
        res_correlation: None,
        algo: AlgoConfig::default(),
    }
}

// ---------------------------------------------------------------------------
// Variable layout
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum VarName {
    /// Set-point p_u / p_r / p_g.
    P,
    /// Renewable output sold to the manager.
    PHat,
    /// User-side bilateral energy (≤ 0 when buying).
    Eb,
    /// Seller-side bilateral energy (≥ 0).
    Es,
    /// CG reserve participation factor.
    Alpha,
    /// RES-side reserve participation factor.
    AlphaR,
    /// User flexibility participation factor.
    Beta,
    /// RES-side flexibility participation factor.
    BetaR,
    /// Expected deviation M·(factor row).
    Pi,
    /// McCormick product variable (χ for CGs, φ for users).
    Bilinear,
    /// Shared allowance quantity (bought if positive).
    C,
    /// Allowance sold to the manager.
    CSold,
    /// Seller (1) / buyer (0) identity.
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SlotKey {
    pub owner: ParticipantId,
    pub name: VarName,
    pub hour: Option<usize>,
    pub counterparty: Option<ParticipantId>,
}

/// Deterministic contiguous ordering of every decision variable, per
/// participant block (users, then RES, then CGs).
#[derive(Clone, Debug)]
pub struct IndexLayout {
    pub hours: usize,
    pub n_users: usize,
    pub n_res: usize,
    pub n_cgs: usize,
    keys: Vec<SlotKey>,
    lookup: HashMap<SlotKey, usize>,
    blocks: HashMap<ParticipantId, (usize, usize)>,
}

impl IndexLayout {
    pub fn new(cfg: &ScenarioConfig) -> Self {
        Self::with_dims(cfg.hours, cfg.n_users(), cfg.n_res(), cfg.n_cgs())
    }

    pub fn with_dims(hours: usize, n_users: usize, n_res: usize, n_cgs: usize) -> Self {
        let sellers: Vec<ParticipantId> =
            (0..n_cgs).map(ParticipantId::cg).chain((0..n_res).map(ParticipantId::res)).collect();
        let mut keys = Vec::new();
        let mut blocks = HashMap::new();
        let key = |owner, name, hour, counterparty| SlotKey { owner, name, hour, counterparty };

        for i in 0..n_users {
            let o = ParticipantId::user(i);
            let start = keys.len();
            for t in 0..hours {
                keys.push(key(o, VarName::P, Some(t), None));
                for &s in &sellers {
                    keys.push(key(o, VarName::Eb, Some(t), Some(s)));
                }
                for r in 0..n_res {
                    keys.push(key(o, VarName::Beta, Some(t), Some(ParticipantId::res(r))));
                }
                keys.push(key(o, VarName::Pi, Some(t), None));
                keys.push(key(o, VarName::Bilinear, Some(t), None));
            }
            keys.push(key(o, VarName::C, None, None));
            keys.push(key(o, VarName::CSold, None, None));
            keys.push(key(o, VarName::Identity, None, None));
            blocks.insert(o, (start, keys.len()));
        }
        for j in 0..n_res {
            let o = ParticipantId::res(j);
            let start = keys.len();
            for t in 0..hours {
                keys.push(key(o, VarName::P, Some(t), None));
                keys.push(key(o, VarName::PHat, Some(t), None));
                for u in 0..n_users {
                    keys.push(key(o, VarName::Es, Some(t), Some(ParticipantId::user(u))));
                }
                for g in 0..n_cgs {
                    keys.push(key(o, VarName::AlphaR, Some(t), Some(ParticipantId::cg(g))));
                }
                for u in 0..n_users {
                    keys.push(key(o, VarName::BetaR, Some(t), Some(ParticipantId::user(u))));
                }
            }
            keys.push(key(o, VarName::C, None, None));
            blocks.insert(o, (start, keys.len()));
        }
        for g in 0..n_cgs {
            let o = ParticipantId::cg(g);
            let start = keys.len();
            for t in 0..hours {
                keys.push(key(o, VarName::P, Some(t), None));
                for u in 0..n_users {
                    keys.push(key(o, VarName::Es, Some(t), Some(ParticipantId::user(u))));
                }
                for r in 0..n_res {
                    keys.push(key(o, VarName::Alpha, Some(t), Some(ParticipantId::res(r))));
                }
                keys.push(key(o, VarName::Pi, Some(t), None));
                keys.push(key(o, VarName::Bilinear, Some(t), None));
            }
            blocks.insert(o, (start, keys.len()));
        }
        let lookup = keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
        Self { hours, n_users, n_res, n_cgs, keys, lookup, blocks }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[SlotKey] {
        &self.keys
    }

    pub fn slot(&self, key: &SlotKey) -> Option<usize> {
        self.lookup.get(key).copied()
    }

    pub fn key(&self, slot: usize) -> SlotKey {
        self.keys[slot]
    }

    /// Half-open slot range owned by one participant.
    pub fn block(&self, owner: ParticipantId) -> (usize, usize) {
        self.blocks[&owner]
    }

    /// Position of `key` inside its owner's block.
    pub fn offset_in_block(&self, key: &SlotKey) -> usize {
        let slot = self.lookup[key];
        slot - self.blocks[&key.owner].0
    }

    /// Es / Eb matrices are users × sellers per hour.
    pub fn energy_shape(&self) -> (usize, usize) {
        (self.n_users, self.n_cgs + self.n_res)
    }

    /// A matrices are CGs × RES per hour.
    pub fn reserve_shape(&self) -> (usize, usize) {
        (self.n_cgs, self.n_res)
    }

    /// B matrices are users × RES per hour.
    pub fn flexibility_shape(&self) -> (usize, usize) {
        (self.n_users, self.n_res)
    }

    /// Column of seller `s` in the energy matrices.
    pub fn seller_column(&self, s: ParticipantId) -> usize {
        match s.kind {
            ParticipantKind::Cg => s.index,
            ParticipantKind::Res => self.n_cgs + s.index,
            ParticipantKind::User => panic!("users are not sellers"),
        }
    }
}
