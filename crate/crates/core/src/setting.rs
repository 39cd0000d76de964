//! Weight-matrix parameterizations of the dual consensus iteration.
//!
//! A setting fixes `P_H`, `P_H̃`, the diagonal `P_D`, the penalty `ρ` and the
//! proximal weight `α`; `P_A = P_D − ρ P_H` follows. Single-exchange settings
//! use one graph-sparse matrix for both `P_H` and `P_H̃`; double-exchange
//! settings factor them as `P_H = L M`, `P_H̃ = L²` with graph-sparse `L`, `M`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{metropolis_matrix, uniform_laplacian, Graph};
use crate::linalg::{eigenvalues, pinv_sym, sym_eigen};

/// Eigenvalue tolerance for positive semidefiniteness.
pub const PSD_TOL: f64 = -1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Variant {
    DucaI,
    Pextra,
    Pgc,
    Dpga,
    DistAdmm,
    Alt,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::DucaI,
        Variant::Pextra,
        Variant::Pgc,
        Variant::Dpga,
        Variant::DistAdmm,
        Variant::Alt,
    ];

    pub fn exchange_mode(self) -> ExchangeMode {
        match self {
            Variant::DistAdmm | Variant::Alt => ExchangeMode::Double,
            _ => ExchangeMode::Single,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::DucaI => "DUCA_I",
            Variant::Pextra => "PEXTRA",
            Variant::Pgc => "PGC",
            Variant::Dpga => "DPGA",
            Variant::DistAdmm => "DIST_ADMM",
            Variant::Alt => "ALT",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Format(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExchangeMode {
    Single,
    Double,
}

/// Extra knobs some variants need: `rho_prime` (PGC), `c_dpga` (DPGA) and
/// `c_duca_i` (DUCA_I, default 2).
pub type Tuning = BTreeMap<String, f64>;

#[derive(Debug, Clone)]
pub struct ParamSetting {
    pub variant: Option<Variant>,
    pub graph: Graph,
    pub p_h: DMatrix<f64>,
    pub p_htilde: DMatrix<f64>,
    /// Diagonal of `P_D`.
    pub p_d: DVector<f64>,
    pub rho: f64,
    pub alpha: f64,
    pub exchange_mode: ExchangeMode,
    /// `L` of the double-exchange factorization.
    pub l_matrix: Option<DMatrix<f64>>,
    /// `M` of the double-exchange factorization.
    pub m_matrix: Option<DMatrix<f64>>,
}

impl ParamSetting {
    /// `P_A = P_D − ρ P_H`.
    pub fn p_a(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.p_d) - &self.p_h * self.rho
    }

    pub fn n_agents(&self) -> usize {
        self.p_d.len()
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn label(&self) -> String {
        self.variant.map_or_else(|| "CUSTOM".to_string(), |v| v.name().to_string())
    }
}

fn tuning_value(tuning: &Tuning, key: &'static str) -> Result<f64> {
    tuning.get(key).copied().ok_or(Error::MissingTuning(key))
}

/// Builds and validates one of the six named parameterizations.
///
/// PGC and DPGA fix `ρ = 1`; the `rho` argument is used by the others.
pub fn make_setting(
    variant: Variant,
    g: &Graph,
    rho: f64,
    alpha: f64,
    tuning: &Tuning,
) -> Result<ParamSetting> {
    if !(rho > 0.0) || !(alpha >= 0.0) {
        return Err(Error::AssumptionViolated(format!(
            "rho must be positive and alpha nonnegative (rho={rho}, alpha={alpha})"
        )));
    }
    let n = g.n_nodes();
    let mg = metropolis_matrix(g);
    let eye = DMatrix::<f64>::identity(n, n);
    let single = |p_h: DMatrix<f64>, p_d: DVector<f64>, rho: f64| ParamSetting {
        variant: Some(variant),
        graph: g.clone(),
        p_htilde: p_h.clone(),
        p_h,
        p_d,
        rho,
        alpha,
        exchange_mode: ExchangeMode::Single,
        l_matrix: None,
        m_matrix: None,
    };
    let double = |l: DMatrix<f64>, m: DMatrix<f64>, p_d: DVector<f64>| ParamSetting {
        variant: Some(variant),
        graph: g.clone(),
        p_h: &l * &m,
        p_htilde: &l * &l,
        p_d,
        rho,
        alpha,
        exchange_mode: ExchangeMode::Double,
        l_matrix: Some(l),
        m_matrix: Some(m),
    };

    let setting = match variant {
        Variant::DucaI => {
            let c = tuning.get("c_duca_i").copied().unwrap_or(2.0);
            let p_d = mg.diagonal() * (c * rho);
            single(mg, p_d, rho)
        }
        Variant::Pextra => single(&mg * 0.5, DVector::from_element(n, rho), rho),
        Variant::Pgc => {
            let rho_prime = tuning_value(tuning, "rho_prime")?;
            let l1 = uniform_laplacian(g, -2.0 * rho_prime);
            let p_d = l1.diagonal();
            single(l1 * 0.5, p_d, 1.0)
        }
        Variant::Dpga => {
            let c = tuning_value(tuning, "c_dpga")?;
            let min_degree = (0..n).map(|i| g.degree(i)).min().unwrap_or(0).max(1);
            let scale = (c * n as f64 / (g.n_edges().max(1) as f64 * min_degree as f64)).sqrt();
            let l2 = uniform_laplacian(g, -0.5 * scale);
            let p_d = DVector::from_fn(n, |i, _| g.degree(i) as f64 * scale);
            single(l2, p_d, 1.0)
        }
        Variant::DistAdmm => {
            let p_d = DVector::from_fn(n, |i, _| {
                (0..n).map(|j| (g.degree(j) as f64 + 1.0) * sq_entry(&mg, i, j)).sum()
            });
            double(mg.clone(), mg, p_d)
        }
        Variant::Alt => {
            let w4 = &eye - &mg * 0.5;
            let l = &eye - &w4;
            let m = &eye + &w4;
            double(l, m, DVector::from_element(n, rho))
        }
    };
    let report = validate_setting(&setting);
    if !report.pass {
        return Err(Error::AssumptionViolated(report.failures().join("; ")));
    }
    Ok(setting)
}

fn sq_entry(m: &DMatrix<f64>, i: usize, j: usize) -> f64 {
    m[(i, j)] * m[(i, j)]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    /// The eigenvalue or residual that decided the check.
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
    pub pass: bool,
}

impl ValidationReport {
    pub fn failures(&self) -> Vec<String> {
        self.checks
            .iter()
            .filter(|c| !c.pass)
            .map(|c| format!("{} failed (value {:e})", c.name, c.value))
            .collect()
    }
}

fn asymmetry(m: &DMatrix<f64>) -> f64 {
    (m - m.transpose()).amax()
}

/// Null space equals span(1): one (near) zero eigenvalue whose eigenvector
/// is constant, and a strictly positive second eigenvalue.
fn consensus_nullspace(m: &DMatrix<f64>) -> (bool, f64) {
    let (values, vectors) = sym_eigen(m);
    let n = m.nrows();
    if n == 1 {
        return (values[0].abs() < 1e-9, values[0]);
    }
    let v0 = vectors.column(0);
    let mean = v0.sum() / n as f64;
    let spread = v0.iter().map(|x| (x - mean).abs()).fold(0.0, f64::max);
    let ok = values[0].abs() < 1e-9 && values[1] > 1e-9 && spread < 1e-6;
    (ok, values[1])
}

/// Checks every structural assumption on a setting and reports each one.
pub fn validate_setting(s: &ParamSetting) -> ValidationReport {
    let mut checks = Vec::new();
    let mut push = |name, pass, value| checks.push(Check { name, pass, value });

    let min_d = s.p_d.iter().copied().fold(f64::INFINITY, f64::min);
    push("p_d_positive_diagonal", min_d > 0.0, min_d);
    push("rho_positive", s.rho > 0.0, s.rho);
    push("alpha_nonnegative", s.alpha >= 0.0, s.alpha);

    let asym = asymmetry(&s.p_h).max(asymmetry(&s.p_htilde));
    push("symmetric", asym <= 1e-12, asym);

    let p_a = s.p_a();
    let lam_pa = eigenvalues(&p_a)[0];
    push("p_a_psd", lam_pa >= PSD_TOL, lam_pa);
    let lam_ph = eigenvalues(&s.p_h)[0];
    push("p_h_psd", lam_ph >= PSD_TOL, lam_ph);
    let lam_pht = eigenvalues(&s.p_htilde)[0];
    push("p_htilde_psd", lam_pht >= PSD_TOL, lam_pht);
    let lam_dom = eigenvalues(&(&s.p_h - &s.p_htilde))[0];
    push("p_h_dominates_p_htilde", lam_dom >= PSD_TOL, lam_dom);
    let (ok, second) = consensus_nullspace(&s.p_h);
    push("p_h_nullspace_consensus", ok, second);
    let (ok, second) = consensus_nullspace(&s.p_htilde);
    push("p_htilde_nullspace_consensus", ok, second);

    match s.exchange_mode {
        ExchangeMode::Single => {
            let sparse = s.graph.is_compatible(&s.p_h) && s.graph.is_compatible(&s.p_htilde);
            push("graph_compatible", sparse, if sparse { 0.0 } else { 1.0 });
            let same = (&s.p_h - &s.p_htilde).amax();
            push("single_exchange_p_h_equals_p_htilde", same <= 1e-12, same);
        }
        ExchangeMode::Double => match (&s.l_matrix, &s.m_matrix) {
            (Some(l), Some(m)) => {
                let sparse = s.graph.is_compatible(l) && s.graph.is_compatible(m);
                push("graph_compatible", sparse, if sparse { 0.0 } else { 1.0 });
                let r1 = (&s.p_h - l * m).amax();
                push("p_h_equals_lm", r1 <= 1e-12, r1);
                let r2 = (&s.p_htilde - l * l).amax();
                push("p_htilde_equals_l_squared", r2 <= 1e-12, r2);
            }
            _ => push("double_exchange_factors_present", false, f64::NAN),
        },
    }

    let pass = checks.iter().all(|c| c.pass);
    ValidationReport { checks, pass }
}

/// Spectral constants that enter the convergence bounds.
#[derive(Debug, Clone)]
pub struct SpectralQuantities {
    /// Largest eigenvalue of `P_A`.
    pub lam1_pa: f64,
    /// Second-smallest eigenvalue of `P_H̃`.
    pub lam_nm1_phtilde: f64,
    pub pinv_phtilde: DMatrix<f64>,
}

pub fn spectral_quantities(s: &ParamSetting) -> SpectralQuantities {
    let pa = eigenvalues(&s.p_a());
    let pht = eigenvalues(&s.p_htilde);
    SpectralQuantities {
        lam1_pa: pa.last().copied().unwrap_or(0.0).max(0.0),
        lam_nm1_phtilde: pht.get(1).copied().unwrap_or(0.0),
        pinv_phtilde: pinv_sym(&s.p_htilde),
    }
}
