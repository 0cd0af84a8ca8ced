//! Command-line driver: clears the market, runs experiments and audits, and
//! writes CSV tables plus a run manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use sha2::{Digest, Sha256};

use crate::coordinator::{MarketOutcome, ResidualReport};
use crate::scenario::{load_scenario, ScenarioConfig};
use crate::validation::{
    carbon_ledger, linspace, monte_carlo_audit, profits, run_cases, run_sweep, solve, verify_equilibrium, AuditReport,
    SolveMode,
};

pub const OUT_DIR_ENV: &str = "ECMARKET_OUT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Decentralized,
    Centralized,
    Both,
}

impl Mode {
    fn label(self) -> &'static str {
        match self {
            Mode::Decentralized => "decentralized",
            Mode::Centralized => "centralized",
            Mode::Both => "both",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ExperimentMode {
    Decentralized,
    Centralized,
}

#[derive(Debug, Parser)]
#[command(name = "ecmarket", version, about = "Joint energy, reserve and carbon-allowance market clearing")]
pub struct Args {
    /// Scenario TOML file, or `ref` for the bundled reference case.
    #[arg(long, default_value = "ref")]
    pub scenario: PathBuf,
    /// Clearing mode. Defaults to decentralized; omitted entirely when only
    /// experiments are requested.
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    /// Run the price sweep over r_e and r_c.
    #[arg(long)]
    pub sweep: bool,
    /// Run the three market-design cases.
    #[arg(long)]
    pub cases: bool,
    /// Clearing procedure for sweeps and cases.
    #[arg(long, value_enum, default_value = "centralized")]
    pub experiment_mode: ExperimentMode,
    /// Sweep grid for r_e as `lo:hi:n`.
    #[arg(long, default_value = "0.04:0.08:5")]
    pub r_e_grid: String,
    /// Sweep grid for r_c as `lo:hi:n`.
    #[arg(long, default_value = "0.001:0.006:6")]
    pub r_c_grid: String,
    /// Monte Carlo samples for the chance-constraint audit; also runs the
    /// equilibrium check on decentralized outcomes.
    #[arg(long, value_name = "N_SAMPLES")]
    pub audit: Option<usize>,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Output directory.
    #[arg(long, env = OUT_DIR_ENV, default_value = "results")]
    pub out: PathBuf,
    /// Inner ADMM iteration cap per round.
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub max_rounds: Option<usize>,
    #[arg(long)]
    pub no_warm_start: bool,
    /// Keep the configured penalties fixed.
    #[arg(long)]
    pub fixed_penalty: bool,
    /// Energy-block threshold (primal and dual).
    #[arg(long)]
    pub tol_e: Option<f64>,
    /// Reserve-block threshold (primal and dual).
    #[arg(long)]
    pub tol_r: Option<f64>,
    /// Flexibility-block threshold (primal and dual).
    #[arg(long)]
    pub tol_d: Option<f64>,
    /// Carbon-block threshold (primal and dual).
    #[arg(long)]
    pub tol_c: Option<f64>,
    /// McCormick error threshold for both CGs and users.
    #[arg(long)]
    pub tol_mccormick: Option<f64>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Run(String),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Run(_) | CliError::Io { .. } => 1,
        }
    }
}

/// What a run was asked to do, enough to reproduce it.
#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub scenario: String,
    pub mode: String,
    pub seed: u64,
    pub overrides: Vec<String>,
    pub config_hash: String,
    pub out_dir: PathBuf,
}

impl RunManifest {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "scenario = {:?}", self.scenario);
        let _ = writeln!(s, "mode = {:?}", self.mode);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "overrides = [{}]", self.overrides.iter().map(|o| format!("{o:?}")).collect::<Vec<_>>().join(", "));
        let _ = writeln!(s, "config_hash = {:?}", self.config_hash);
        let _ = writeln!(s, "out_dir = {:?}", self.out_dir.display().to_string());
        let _ = writeln!(s, "version = {:?}", env!("CARGO_PKG_VERSION"));
        s
    }
}

/// SHA-256 over a git-style blob header and the canonical scenario TOML.
pub fn config_hash(cfg: &ScenarioConfig) -> String {
    let body = cfg.to_toml_string();
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", body.len()).as_bytes());
    h.update(body.as_bytes());
    hex::encode(h.finalize())
}

fn parse_grid(flag: &str, s: &str) -> Result<Vec<f64>, CliError> {
    let bad = || CliError::Config(format!("--{flag}: expected lo:hi:n, got {s:?}"));
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        return Err(bad());
    }
    let lo: f64 = parts[0].parse().map_err(|_| bad())?;
    let hi: f64 = parts[1].parse().map_err(|_| bad())?;
    let n: usize = parts[2].parse().map_err(|_| bad())?;
    if n == 0 || !lo.is_finite() || !hi.is_finite() || hi < lo {
        return Err(bad());
    }
    Ok(linspace(lo, hi, n))
}

/// Applies command-line overrides; returns them in a stable order.
pub fn apply_overrides(cfg: &mut ScenarioConfig, args: &Args) -> Result<Vec<String>, CliError> {
    let mut out = Vec::new();
    let a = &mut cfg.algo;
    if let Some(n) = args.max_iter {
        a.max_admm_iters = n;
        out.push(format!("max_admm_iters={n}"));
    }
    if let Some(n) = args.max_rounds {
        a.max_rounds = n;
        out.push(format!("max_rounds={n}"));
    }
    if args.no_warm_start {
        a.warm_start = false;
        out.push("warm_start=false".into());
    }
    if args.fixed_penalty {
        a.adaptive_penalty = false;
        out.push("adaptive_penalty=false".into());
    }
    for (name, v, p, d) in [
        ("e", args.tol_e, &mut a.tol_primal.e, &mut a.tol_dual.e),
        ("r", args.tol_r, &mut a.tol_primal.r, &mut a.tol_dual.r),
        ("d", args.tol_d, &mut a.tol_primal.d, &mut a.tol_dual.d),
        ("c", args.tol_c, &mut a.tol_primal.c, &mut a.tol_dual.c),
    ] {
        if let Some(v) = v {
            *p = v;
            *d = v;
            out.push(format!("tol_{name}={v}"));
        }
    }
    if let Some(v) = args.tol_mccormick {
        a.delta_g = v;
        a.delta_u = v;
        out.push(format!("delta={v}"));
    }
    cfg.validate().map_err(|e| CliError::Config(format!("override: {e}")))?;
    Ok(out)
}

fn write(dir: &Path, name: &str, body: &str) -> Result<(), CliError> {
    let path = dir.join(name);
    fs::write(&path, body).map_err(|source| CliError::Io { path: path.display().to_string(), source })
}

fn num(v: f64) -> String {
    format!("{v}")
}

/// RFC 4180 table builder over an in-memory buffer.
struct Table(csv::Writer<Vec<u8>>);

impl Table {
    fn new(header: &[&str]) -> Self {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header).expect("in-memory write");
        Table(w)
    }

    fn row<I, S>(&mut self, fields: I)
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.0.write_record(fields).expect("in-memory write");
    }

    fn finish(self) -> String {
        String::from_utf8(self.0.into_inner().expect("in-memory flush")).expect("utf-8 fields")
    }
}

/// Long-format table of trades, setpoints and carbon quantities.
pub fn outcome_csv(rows: &[(&str, &MarketOutcome)], cfg: &ScenarioConfig) -> String {
    let mut tb = Table::new(&["mode", "record", "participant", "counterparty", "hour", "value", "price"]);
    let (nu, nr, ng) = (cfg.n_users(), cfg.n_res(), cfg.n_cgs());
    let seller = |k: usize| if k < ng { cfg.cgs[k].name.clone() } else { cfg.res[k - ng].name.clone() };
    for (mode, o) in rows {
        let st = &o.state;
        let pr = &o.duals.prices;
        let mut put = |record: &str, who: &str, cp: &str, hour: Option<usize>, value: f64, price: Option<f64>| {
            let h = hour.map(|t| t.to_string()).unwrap_or_default();
            let p = price.map(num).unwrap_or_default();
            tb.row([*mode, record, who, cp, h.as_str(), num(value).as_str(), p.as_str()]);
        };
        put("welfare", "", "", None, o.welfare, None);
        for t in 0..cfg.hours {
            for i in 0..nu {
                let u = &cfg.users[i].name;
                for k in 0..ng + nr {
                    put("energy", u, &seller(k), Some(t), -st.eb[t][(i, k)], Some(-pr.upsilon[t][(i, k)]));
                }
                for j in 0..nr {
                    put("flexibility", u, &cfg.res[j].name, Some(t), st.b[t][(i, j)], Some(-pr.lambda[t][(i, j)]));
                }
                put("setpoint", u, "", Some(t), st.p_u[(i, t)], None);
            }
            for g in 0..ng {
                let c = &cfg.cgs[g].name;
                for j in 0..nr {
                    put("reserve", c, &cfg.res[j].name, Some(t), st.a[t][(g, j)], Some(-pr.eta[t][(g, j)]));
                }
                put("setpoint", c, "", Some(t), st.p_g[(g, t)], None);
            }
            for j in 0..nr {
                let r = &cfg.res[j].name;
                put("setpoint", r, "", Some(t), st.p_r[(j, t)], None);
                put("sold_to_manager", r, "", Some(t), st.p_hat[(j, t)], Some(cfg.prices.r_e[t]));
            }
        }
        for i in 0..nu {
            let u = &cfg.users[i].name;
            put("allowance_shared", u, "", None, st.c[i], Some(pr.theta));
            put("allowance_sold", u, "", None, st.c_s[i], Some(cfg.prices.r_c_sell));
        }
        for j in 0..nr {
            put("allowance_shared", &cfg.res[j].name, "", None, st.c[nu + j], Some(pr.theta));
        }
    }
    tb.finish()
}

pub fn residuals_csv(trace: &[ResidualReport]) -> String {
    let mut tb = Table::new(&[
        "round", "iteration", "round_start", "se", "sr", "sd", "sc", "te", "tr", "td", "tc", "me", "mr", "md", "mc", "err_g",
        "err_u", "gamma", "tau", "rho", "phi",
    ]);
    for r in trace {
        let p = r.penalties;
        let mut f = vec![r.round.to_string(), r.iteration.to_string(), u8::from(r.iteration == 0).to_string()];
        f.extend(
            [r.se, r.sr, r.sd, r.sc, r.te, r.tr, r.td, r.tc, r.me, r.mr, r.md, r.mc, r.err_g, r.err_u, p.gamma, p.tau, p.rho, p.phi]
                .map(num),
        );
        tb.row(f);
    }
    tb.finish()
}

fn ledger_csv(rows: &[(&str, &MarketOutcome)], cfg: &ScenarioConfig) -> Result<String, CliError> {
    let mut tb = Table::new(&[
        "mode",
        "participant",
        "shared",
        "direction",
        "sold_to_manager",
        "purchased",
        "emissions",
        "holding",
        "sharing_price",
        "selling_price",
    ]);
    for (mode, o) in rows {
        let l = carbon_ledger(o, cfg).map_err(|e| CliError::Run(e.to_string()))?;
        let sp = l.sharing_price.map(num).unwrap_or_default();
        for r in &l.rows {
            tb.row([
                mode.to_string(),
                r.participant.clone(),
                num(r.shared),
                r.direction.label().to_string(),
                num(r.sold_to_manager),
                num(r.purchased),
                num(r.emissions),
                num(r.holding),
                sp.clone(),
                num(l.selling_price),
            ]);
        }
    }
    Ok(tb.finish())
}

fn profits_csv(rows: &[(&str, &MarketOutcome)], cfg: &ScenarioConfig) -> Result<String, CliError> {
    let mut tb = Table::new(&["mode", "participant", "energy", "reserve", "flexibility", "allowances", "external", "own", "total"]);
    for (mode, o) in rows {
        for r in profits(o, cfg).map_err(|e| CliError::Run(e.to_string()))? {
            let mut f = vec![mode.to_string(), r.participant.clone()];
            f.extend([r.energy, r.reserve, r.flexibility, r.allowances, r.external, r.own, r.total].map(num));
            tb.row(f);
        }
    }
    Ok(tb.finish())
}

fn audit_csv(mode: &str, a: &AuditReport) -> String {
    let mut tb = Table::new(&["mode", "check", "item", "value", "limit", "pass"]);
    for r in &a.chance {
        let pass = (r.frequency <= r.epsilon).to_string();
        tb.row([mode, "chance", &r.constraint, &num(r.frequency), &num(r.epsilon), &pass]);
    }
    for r in &a.equilibrium {
        let pass = (r.deviation <= EQUILIBRIUM_TOL).to_string();
        tb.row([mode, "equilibrium", &r.participant, &num(r.deviation), &num(EQUILIBRIUM_TOL), &pass]);
    }
    tb.finish()
}

const EQUILIBRIUM_TOL: f64 = 1e-3;

/// Parses flags and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args = match Args::try_parse_from(args) {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&args) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Runs everything requested. Ok(false) means some run did not converge.
pub fn execute(args: &Args) -> Result<bool, CliError> {
    let mut cfg = load_scenario(&args.scenario).map_err(|e| CliError::Config(format!("{}: {e}", args.scenario.display())))?;
    let overrides = apply_overrides(&mut cfg, args)?;
    let out_dir = args.out.clone();
    fs::create_dir_all(&out_dir).map_err(|source| CliError::Io { path: out_dir.display().to_string(), source })?;
    let experiments = args.sweep || args.cases;
    let mode = match (args.mode, experiments) {
        (Some(m), _) => Some(m),
        (None, false) => Some(Mode::Decentralized),
        (None, true) => None,
    };
    let manifest = RunManifest {
        scenario: args.scenario.display().to_string(),
        mode: mode.map_or("none", Mode::label).to_string(),
        seed: args.seed,
        overrides,
        config_hash: config_hash(&cfg),
        out_dir: out_dir.clone(),
    };
    write(&out_dir, "manifest", &manifest.render())?;
    let mut all_converged = true;

    if let Some(mode) = mode {
        let mut runs: Vec<(&str, MarketOutcome)> = Vec::new();
        if matches!(mode, Mode::Decentralized | Mode::Both) {
            runs.push(("decentralized", solve(&cfg, SolveMode::Decentralized).map_err(|e| CliError::Run(e.to_string()))?));
        }
        if matches!(mode, Mode::Centralized | Mode::Both) {
            runs.push(("centralized", solve(&cfg, SolveMode::Centralized).map_err(|e| CliError::Run(e.to_string()))?));
        }
        for (name, o) in &runs {
            println!(
                "{name}: welfare {:.6} status {:?} rounds {} inner iterations {}",
                o.welfare,
                o.status,
                o.rounds.len(),
                o.total_iterations()
            );
            all_converged &= o.converged();
        }
        if runs.len() == 2 {
            let (d, c) = (runs[0].1.welfare, runs[1].1.welfare);
            println!("welfare gap: {:.3e} relative", (d - c).abs() / c.abs().max(f64::MIN_POSITIVE));
        }
        let refs: Vec<(&str, &MarketOutcome)> = runs.iter().map(|(n, o)| (*n, o)).collect();
        write(&out_dir, "outcome.csv", &outcome_csv(&refs, &cfg))?;
        let trace = runs.iter().find(|(n, _)| *n == "decentralized").map(|(_, o)| o.residuals.as_slice()).unwrap_or(&[]);
        write(&out_dir, "residuals.csv", &residuals_csv(trace))?;
        write(&out_dir, "carbon_ledger.csv", &ledger_csv(&refs, &cfg)?)?;
        write(&out_dir, "profits.csv", &profits_csv(&refs, &cfg)?)?;
        if let Some(n) = args.audit {
            let (name, o) = &runs[0];
            let mut audit = monte_carlo_audit(o, &cfg, n, args.seed).map_err(|e| CliError::Run(e.to_string()))?;
            if *name == "decentralized" {
                audit.equilibrium = verify_equilibrium(o, &cfg).map_err(|e| CliError::Run(e.to_string()))?.equilibrium;
            }
            println!(
                "audit: max violation frequency {:.4}, max equilibrium deviation {:.2e}",
                audit.max_violation_frequency(),
                audit.max_deviation()
            );
            write(&out_dir, "audit.csv", &audit_csv(name, &audit))?;
        }
    }

    let emode = match args.experiment_mode {
        ExperimentMode::Centralized => SolveMode::Centralized,
        ExperimentMode::Decentralized => SolveMode::Decentralized,
    };
    if args.cases {
        let rows = run_cases(&cfg, emode).map_err(|e| CliError::Run(e.to_string()))?;
        let mut tb = Table::new(&["case", "welfare", "allowances_held", "converged"]);
        println!("{:<8} {:>12} {:>28}", "Case", "Welfare ($)", "Total Allowances Held Inside");
        for r in &rows {
            println!("{:<8} {:>12.4} {:>28.1}", r.case, r.welfare, r.allowances_held);
            tb.row([r.case.clone(), num(r.welfare), num(r.allowances_held), r.converged.to_string()]);
            all_converged &= r.converged;
        }
        write(&out_dir, "cases.csv", &tb.finish())?;
    }
    if args.sweep {
        let re = parse_grid("r-e-grid", &args.r_e_grid)?;
        let rc = parse_grid("r-c-grid", &args.r_c_grid)?;
        let rows = run_sweep(&cfg, &re, &rc, emode);
        let mut tb = Table::new(&["r_e", "r_c", "welfare", "allowances_sold", "pv_sold", "converged", "error"]);
        for r in &rows {
            tb.row([
                num(r.r_e),
                num(r.r_c),
                num(r.welfare),
                num(r.allowances_sold),
                num(r.pv_sold),
                r.converged.to_string(),
                r.error.clone().unwrap_or_default(),
            ]);
            all_converged &= r.converged;
        }
        println!("sweep: {} points written", rows.len());
        write(&out_dir, "sweep.csv", &tb.finish())?;
    }
    Ok(all_converged)
}
