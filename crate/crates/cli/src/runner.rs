//! The `run`, `validate` and `bounds` commands.

use std::fs;
use std::path::{Path, PathBuf};

use duca_core::nalgebra::DVector;
use serde::Serialize;

use duca_core::engine::{Engine, EngineOptions, NetworkState};
use duca_core::linalg::block_sum;
use duca_core::metrics::{inner_slack, write_csv, BoundConstants, Certificate, MetricsContext, MetricsRow};
use duca_core::oracle::centralized_solve_with;
use duca_core::setting::{validate_setting, Tuning};
use duca_core::{make_setting, Error as CoreError, ExchangeMode, Graph, ParamSetting, Problem};

use crate::config::{Config, ConfigError};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("assumption violated: {0}")]
    Assumption(String),
    #[error("invariant breach: {0}")]
    Invariant(String),
    #[error("oracle failure: {0}")]
    Oracle(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Core(CoreError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Assumption(_) => 3,
            CliError::Invariant(_) => 4,
            CliError::Oracle(_) => 5,
            CliError::Io(_) | CliError::Core(_) => 1,
        }
    }
}

fn classify(e: CoreError) -> CliError {
    match e {
        CoreError::Disconnected(_) | CoreError::AssumptionViolated(_) | CoreError::PatternMismatch(..) => {
            CliError::Assumption(e.to_string())
        }
        CoreError::InvalidEdge(..) | CoreError::MissingTuning(_) | CoreError::Format(_) | CoreError::Json(_) => {
            CliError::Config(ConfigError::Invalid(e.to_string()))
        }
        CoreError::NotConverged(_) => CliError::Oracle(e.to_string()),
        other => CliError::Core(other),
    }
}

pub fn build_graph(cfg: &Config) -> Result<Graph, CliError> {
    let g = &cfg.graph;
    match (&g.edges, g.n_edges) {
        (Some(edges), _) => {
            let pairs: Vec<(usize, usize)> = edges.iter().map(|e| (e[0], e[1])).collect();
            Graph::new(g.n_nodes, &pairs).map_err(classify)
        }
        (None, Some(m)) => Graph::random_connected(g.n_nodes, m, g.seed).map_err(classify),
        (None, None) => Err(ConfigError::Invalid("graph needs either edges or n_edges".into()).into()),
    }
}

pub fn build_problem(cfg: &Config) -> Result<Problem, CliError> {
    let p = &cfg.problem;
    let pb = match &p.path {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| ConfigError::Read(path.clone(), e))?;
            Problem::from_json(&text).map_err(classify)?
        }
        None => Problem::generate_example_scaled(cfg.graph.n_nodes, p.dim, p.m, p.p, p.seed, p.q_range),
    };
    if pb.n_agents() != cfg.graph.n_nodes {
        return Err(ConfigError::Invalid(format!(
            "problem has {} agents but the graph has {} nodes",
            pb.n_agents(),
            cfg.graph.n_nodes
        ))
        .into());
    }
    Ok(pb)
}

/// One `(variant, α)` pair of the sweep.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub label: String,
    pub setting: ParamSetting,
}

pub fn run_label(variant: &str, alpha: f64) -> String {
    format!("{variant}__{alpha}")
}

pub fn build_settings(cfg: &Config, g: &Graph) -> Result<Vec<RunSpec>, CliError> {
    let mut out = Vec::new();
    for sc in &cfg.setting {
        let tuning: Tuning = sc.tuning.clone();
        for &alpha in &sc.alphas {
            let mut s = make_setting(sc.variant, g, sc.rho, alpha, &tuning).map_err(classify)?;
            if let Some(scale) = sc.p_htilde_scale {
                s.p_htilde *= scale;
                let report = validate_setting(&s);
                if !report.pass {
                    return Err(CliError::Assumption(format!("{}: {}", sc.variant, report.failures().join("; "))));
                }
            }
            out.push(RunSpec { label: run_label(sc.variant.name(), alpha), setting: s });
        }
    }
    Ok(out)
}

pub fn obtain_certificate(cfg: &Config, pb: &Problem) -> Result<Certificate, CliError> {
    if let Some(path) = &cfg.oracle.certificate {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Read(path.clone(), e))?;
        let cert = Certificate::from_json(&text).map_err(classify)?;
        let dims_ok = cert.x_star.len() == pb.n_agents()
            && cert.x_star.iter().zip(&pb.agents).all(|(x, a)| x.len() == a.dim())
            && cert.y_star.len() == pb.dual_dim();
        if !dims_ok {
            return Err(ConfigError::Invalid("stored certificate does not match the problem".into()).into());
        }
        return Ok(Certificate { constants: None, ..cert });
    }
    let sol = centralized_solve_with(pb, cfg.oracle.tol, cfg.oracle.max_outer).map_err(|e| CliError::Oracle(e.to_string()))?;
    Certificate::new(&sol, pb).map_err(classify)
}

/// Per-round checks; each returns a description of the first failure.
#[derive(Debug, Clone, Copy)]
pub struct InvariantLimits {
    pub exact: f64,
    pub cumulative: f64,
    pub slack: f64,
    pub lyapunov: f64,
}

impl InvariantLimits {
    pub fn for_tol(tol: f64) -> Self {
        InvariantLimits { exact: 1e-10, cumulative: 1e-8, slack: inner_slack(tol), lyapunov: 1e3 * tol }
    }
}

fn check_round(row: &MetricsRow, st: &NetworkState, s: &ParamSetting, m: usize, lim: &InvariantLimits) -> Vec<String> {
    let mut out = Vec::new();
    let k = row.k;
    let mut flag = |ok: bool, what: String| {
        if !ok {
            out.push(format!("k={k}: {what}"));
        }
    };
    flag(row.moreau_residual <= lim.exact, format!("moreau residual {:e}", row.moreau_residual));
    flag(row.complementarity <= lim.exact, format!("complementarity {:e}", row.complementarity));
    flag(row.cumulative_residual <= lim.cumulative, format!("cumulative residual {:e}", row.cumulative_residual));
    flag(row.bound_fe_slack >= -lim.slack, format!("feasibility bound slack {:e}", row.bound_fe_slack));
    flag(row.bound_fe_y_slack >= -lim.slack, format!("dual feasibility bound slack {:e}", row.bound_fe_y_slack));
    flag(row.bound_oe_lower_slack >= -lim.slack, format!("objective lower slack {:e}", row.bound_oe_lower_slack));
    flag(row.bound_oe_upper_slack >= -lim.slack, format!("objective upper slack {:e}", row.bound_oe_upper_slack));
    flag(!(row.lyapunov_residual > lim.lyapunov), format!("descent residual {:e}", row.lyapunov_residual));
    let mu_min = st.agents.iter().flat_map(|a| a.y.rows(0, m).iter().copied().collect::<Vec<_>>()).fold(0.0, f64::min);
    flag(mu_min >= -1e-14, format!("negative multiplier {mu_min:e}"));
    let sigma_ok = st.agents.iter().all(|a| a.sigma.iter().enumerate().all(|(r, v)| if r < m { *v >= -1e-14 } else { *v == 0.0 }));
    flag(sigma_ok, "polar-cone structure of sigma".into());
    if s.exchange_mode == ExchangeMode::Single {
        let drift = block_sum(&st.v_stack(s)).amax();
        flag(drift <= 1e-9 * k as f64, format!("tracking sum drift {drift:e}"));
    }
    out
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub label: String,
    pub rows: Vec<MetricsRow>,
    pub last: NetworkState,
    pub breaches: Vec<String>,
    pub constants: BoundConstants,
}

/// Runs one setting from the default start (`x⁰ = 0`, `y⁰ = 0`) and records
/// a metrics row per round.
pub fn run_trajectory(
    pb: &Problem,
    spec: &RunSpec,
    cert: &Certificate,
    opts: EngineOptions,
    rounds: usize,
) -> Result<Trajectory, CliError> {
    let s = &spec.setting;
    let engine = Engine::new(pb, s, opts).map_err(classify)?;
    let st = engine.init(None, None).map_err(classify)?;
    let v0 = st.v_stack(s);
    let cert = cert.clone().with_constants(s, &st.x0, &st.y0, &v0);
    let ctx = MetricsContext::new(pb, s, &cert).map_err(classify)?;
    let limits = InvariantLimits::for_tol(opts.tol);
    let mut rows = Vec::with_capacity(rounds);
    let mut breaches = Vec::new();
    let last = engine
        .run(st, rounds, |prev, next| {
            let row = ctx.compute_row(Some(prev), next)?;
            breaches.extend(check_round(&row, next, s, pb.m(), &limits));
            rows.push(row);
            Ok(())
        })
        .map_err(classify)?;
    if last.solver_failures > 0 {
        breaches.push(format!("{} inner solves hit the iteration cap", last.solver_failures));
    }
    let constants = cert.constants.clone().expect("set above");
    Ok(Trajectory { label: spec.label.clone(), rows, last, breaches, constants })
}

#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub label: String,
    pub csv: String,
    pub rounds: usize,
    pub comm_total: u64,
    pub solver_failures: u64,
    pub breach_count: usize,
    pub first_breaches: Vec<String>,
    pub constants: BoundConstants,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub config_sha256: String,
    pub config: String,
    pub graph_seed: u64,
    pub problem_seed: u64,
    pub tool_version: String,
    pub f_star: f64,
    pub runs: Vec<RunRecord>,
}

pub fn engine_options(cfg: &Config) -> EngineOptions {
    EngineOptions { tol: cfg.run.tol_inner, max_iters: cfg.run.max_inner_iters, tracking: cfg.run.tracking.into() }
}

fn check_slater(pb: &Problem) -> Result<(), CliError> {
    let report = pb.slater_check();
    if report.pass {
        Ok(())
    } else {
        Err(CliError::Assumption(format!("Slater check failed at x = 0: {report:?}")))
    }
}

/// Runs every `(variant, α)` of the sweep and writes CSVs, the problem,
/// the certificate and a manifest into `out`.
pub fn cmd_run(cfg: &Config, out: &Path, strict: bool) -> Result<Manifest, CliError> {
    let g = build_graph(cfg)?;
    let pb = build_problem(cfg)?;
    check_slater(&pb)?;
    let specs = build_settings(cfg, &g)?;
    let cert = obtain_certificate(cfg, &pb)?;
    let opts = engine_options(cfg);
    let rounds = cfg.run.rounds;

    let results: Vec<Result<Trajectory, CliError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = specs
            .iter()
            .map(|spec| {
                let (pb, cert) = (&pb, &cert);
                scope.spawn(move || run_trajectory(pb, spec, cert, opts, rounds))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("run thread panicked")).collect()
    });
    let trajectories = results.into_iter().collect::<Result<Vec<_>, _>>()?;

    fs::create_dir_all(out)?;
    let mut runs = Vec::new();
    for t in &trajectories {
        let name = format!("{}.csv", t.label);
        let mut buf = Vec::new();
        write_csv(&mut buf, &t.rows)?;
        fs::write(out.join(&name), buf)?;
        runs.push(RunRecord {
            label: t.label.clone(),
            csv: name,
            rounds,
            comm_total: t.last.comm_total,
            solver_failures: t.last.solver_failures,
            breach_count: t.breaches.len(),
            first_breaches: t.breaches.iter().take(5).cloned().collect(),
            constants: t.constants.clone(),
        });
    }
    fs::write(out.join("problem.json"), pb.to_json().map_err(classify)?)?;
    fs::write(out.join("certificate.json"), cert.to_json().map_err(classify)?)?;
    let manifest = Manifest {
        config_sha256: cfg.digest()?,
        config: cfg.to_toml()?,
        graph_seed: cfg.graph.seed,
        problem_seed: cfg.problem.seed,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        f_star: cert.f_star,
        runs,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Core(e.into()))?;
    fs::write(out.join("manifest.json"), text)?;

    if strict {
        if let Some(r) = manifest.runs.iter().find(|r| r.breach_count > 0) {
            return Err(CliError::Invariant(format!("{}: {}", r.label, r.first_breaches.join("; "))));
        }
    }
    Ok(manifest)
}

#[derive(Debug, Clone, Default)]
pub struct ValidateReport {
    pub lines: Vec<String>,
    pub pass: bool,
}

/// Checks graph connectivity, Slater's condition and every setting without
/// running any rounds.
pub fn cmd_validate(cfg: &Config) -> ValidateReport {
    let mut lines = Vec::new();
    let mut pass = true;
    let mut record = |ok: bool, line: String| {
        pass &= ok;
        lines.push(format!("{} {line}", if ok { "PASS" } else { "FAIL" }));
    };
    let g = match build_graph(cfg) {
        Ok(g) => {
            record(true, format!("graph: {} nodes, {} edges, connected", g.n_nodes(), g.n_edges()));
            g
        }
        Err(e) => {
            record(false, format!("graph: {e}"));
            return ValidateReport { lines, pass };
        }
    };
    match build_problem(cfg) {
        Ok(pb) => {
            let r = pb.slater_check();
            record(r.pass, format!("slater: sum_g={:?} |sum_h|={:e} min ball margin={:e}", r.sum_g, r.sum_h_norm,
                r.ball_margins.iter().copied().fold(f64::INFINITY, f64::min)));
        }
        Err(e) => record(false, format!("problem: {e}")),
    }
    for sc in &cfg.setting {
        for &alpha in &sc.alphas {
            let label = run_label(sc.variant.name(), alpha);
            match make_setting(sc.variant, &g, sc.rho, alpha, &sc.tuning) {
                Ok(mut s) => {
                    if let Some(scale) = sc.p_htilde_scale {
                        s.p_htilde *= scale;
                    }
                    let report = validate_setting(&s);
                    for c in &report.checks {
                        record(c.pass, format!("{label}: {} ({:e})", c.name, c.value));
                    }
                }
                Err(e) => record(false, format!("{label}: {e}")),
            }
        }
    }
    ValidateReport { lines, pass }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundRow {
    pub label: String,
    pub k: usize,
    pub fe_bound: f64,
    pub oe_lower: f64,
    pub oe_upper: f64,
}

/// Rate bounds at each requested `k` for the default starting point.
pub fn cmd_bounds(cfg: &Config, ks: &[usize]) -> Result<Vec<BoundRow>, CliError> {
    if ks.iter().any(|k| *k == 0) {
        return Err(ConfigError::Invalid("k must be at least 1".into()).into());
    }
    let g = build_graph(cfg)?;
    let pb = build_problem(cfg)?;
    let specs = build_settings(cfg, &g)?;
    let cert = obtain_certificate(cfg, &pb)?;
    let mut rows = Vec::new();
    for spec in &specs {
        let n = pb.n_agents();
        let x0: Vec<_> = pb.agents.iter().map(|a| DVector::zeros(a.dim())).collect();
        let y0 = vec![DVector::zeros(pb.dual_dim()); n];
        let c = cert.clone().with_constants(&spec.setting, &x0, &y0, &y0);
        for &k in ks {
            let b = duca_core::metrics::theorem_bounds(&c, k).map_err(classify)?;
            rows.push(BoundRow { label: spec.label.clone(), k, fe_bound: b.fe_bound, oe_lower: b.oe_lower, oe_upper: b.oe_upper });
        }
    }
    Ok(rows)
}

pub fn default_out() -> PathBuf {
    PathBuf::from("out")
}
