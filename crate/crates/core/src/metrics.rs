//! Per-round diagnostics: errors, invariant residuals and bound slacks.

use std::io::Write;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::engine::NetworkState;
use crate::error::{Error, Result};
use crate::linalg::{block_apply, block_norm, block_quad, block_sub, block_sum, fmt_f64};
use crate::localsolver::solve_local_dualfun;
use crate::oracle::OracleSolution;
use crate::problem::{Problem, StackedPoint};
use crate::setting::{spectral_quantities, ParamSetting};

/// Slack granted to inequalities that assume exact local minimizers.
pub fn inner_slack(tol: f64) -> f64 {
    100.0 * tol
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub k: usize,
    pub objective_error: f64,
    /// `f(x̄^k) − f*`, signed.
    pub ergodic_objective_error: f64,
    pub constraint_violation: f64,
    pub ergodic_feasibility: f64,
    pub consensus_error: f64,
    pub bound_fe_slack: f64,
    pub bound_oe_lower_slack: f64,
    pub bound_oe_upper_slack: f64,
    /// Slack of the feasibility bound written in terms of `‖y^k − y⁰‖_A`.
    pub bound_fe_y_slack: f64,
    pub moreau_residual: f64,
    pub complementarity: f64,
    pub cumulative_residual: f64,
    pub lyapunov_residual: f64,
    pub lyapunov_value: f64,
    pub comm_total: u64,
    pub inner_iters_total: u64,
}

pub const CSV_COLUMNS: [&str; 14] = [
    "k",
    "objective_error",
    "ergodic_objective_error",
    "constraint_violation",
    "ergodic_feasibility",
    "consensus_error",
    "bound_fe_slack",
    "bound_oe_lower_slack",
    "bound_oe_upper_slack",
    "moreau_residual",
    "cumulative_residual",
    "lyapunov_residual",
    "comm_total",
    "inner_iters_total",
];

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        let floats = [
            self.objective_error,
            self.ergodic_objective_error,
            self.constraint_violation,
            self.ergodic_feasibility,
            self.consensus_error,
            self.bound_fe_slack,
            self.bound_oe_lower_slack,
            self.bound_oe_upper_slack,
            self.moreau_residual,
            self.cumulative_residual,
            self.lyapunov_residual,
        ];
        let mut cells = vec![self.k.to_string()];
        cells.extend(floats.iter().map(|v| fmt_f64(*v)));
        cells.push(self.comm_total.to_string());
        cells.push(self.inner_iters_total.to_string());
        cells.join(",")
    }
}

pub fn write_csv<W: Write>(mut out: W, rows: &[MetricsRow]) -> std::io::Result<()> {
    writeln!(out, "{}", CSV_COLUMNS.join(","))?;
    for r in rows {
        writeln!(out, "{}", r.csv_line())?;
    }
    Ok(())
}

/// Constants in the `1/k` bounds for one setting and one starting point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundConstants {
    pub lam1_pa: f64,
    pub lam_nm1_phtilde: f64,
    pub c1: f64,
    pub c2: f64,
    pub r1: f64,
    pub r2: f64,
    pub r1_prox: f64,
    pub r2_prox: f64,
    /// `k · fe_bound(k)` for the active variant family.
    pub fe: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub fe_bound: f64,
    pub oe_lower: f64,
    pub oe_upper: f64,
}

impl BoundConstants {
    pub fn at(&self, k: usize) -> Bounds {
        let inv = 1.0 / k as f64;
        let (lo, hi) = if self.alpha > 0.0 { (self.r1_prox, self.r2_prox) } else { (self.r1, self.r2) };
        Bounds { fe_bound: self.fe * inv, oe_lower: lo * inv, oe_upper: hi * inv }
    }
}

/// Optimal primal-dual data plus the derived tracking multiplier `v*`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub x_star: Vec<DVector<f64>>,
    pub f_star: f64,
    pub y_star: DVector<f64>,
    /// `g̃(x*) − 1 ⊗ mean_i g̃_i(x*)`.
    pub v_star: Vec<DVector<f64>>,
    pub kkt_residual: f64,
    pub constants: Option<BoundConstants>,
}

impl Certificate {
    pub fn new(sol: &OracleSolution, pb: &Problem) -> Result<Self> {
        let x = sol.x_point();
        let gt = pb.eval_gtilde(&x)?;
        let mean = block_sum(&gt) / pb.n_agents() as f64;
        let v_star = gt.iter().map(|g| g - &mean).collect();
        Ok(Certificate {
            x_star: sol.x_star.clone(),
            f_star: sol.f_star,
            y_star: sol.y_star.clone(),
            v_star,
            kkt_residual: sol.kkt_residual(),
            constants: None,
        })
    }

    pub fn x_point(&self) -> StackedPoint {
        StackedPoint { blocks: self.x_star.clone() }
    }

    /// Fills in the bound constants for `s` from the starting point `(x⁰, y⁰, v⁰)`.
    pub fn with_constants(mut self, s: &ParamSetting, x0: &[DVector<f64>], y0: &[DVector<f64>], v0: &[DVector<f64>]) -> Self {
        self.constants = Some(theorem_constants(&self, s, x0, y0, v0));
        self
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

pub fn theorem_constants(
    cert: &Certificate,
    s: &ParamSetting,
    x0: &[DVector<f64>],
    y0: &[DVector<f64>],
    v0: &[DVector<f64>],
) -> BoundConstants {
    let n = s.n_agents();
    let sq = spectral_quantities(s);
    let pa = s.p_a();
    let root = (n as f64 * sq.lam1_pa).sqrt();
    let y_star_stack = vec![cert.y_star.clone(); n];
    let y0_a = block_norm(&pa, y0);
    let y0_dev = block_norm(&pa, &block_sub(y0, &y_star_stack));
    let v_dev_sq = block_quad(&sq.pinv_phtilde, &block_sub(v0, &cert.v_star)).max(0.0);
    let y_star_norm = cert.y_star.norm();
    let x_dev_sq: f64 = x0.iter().zip(&cert.x_star).map(|(a, b)| (a - b).norm_squared()).sum();

    let g_norm = (y0_dev * y0_dev + v_dev_sq / s.rho).sqrt();
    let duca_sum = y0_dev + g_norm;
    let r1 = y_star_norm * root * duca_sum;
    let r2 = v_dev_sq / (2.0 * s.rho) + 0.5 * y0_a * y0_a;

    let c1 = root * y_star_norm;
    let c2 = ((y0_a + c1).powi(2) + s.alpha * x_dev_sq + v_dev_sq / s.rho).sqrt();
    let prox_sum = y0_a + c1 + c2;
    let r1_prox = c1 * prox_sum;
    let r2_prox = r2 + 0.5 * s.alpha * x_dev_sq;
    let fe = if s.alpha > 0.0 { root * prox_sum } else { root * duca_sum };
    BoundConstants {
        lam1_pa: sq.lam1_pa,
        lam_nm1_phtilde: sq.lam_nm1_phtilde,
        c1,
        c2,
        r1,
        r2,
        r1_prox,
        r2_prox,
        fe,
        alpha: s.alpha,
    }
}

/// Feasibility and objective bounds at round `k`.
pub fn theorem_bounds(cert: &Certificate, k: usize) -> Result<Bounds> {
    let c = cert.constants.as_ref().ok_or(Error::CertificateMissing)?;
    if k == 0 {
        return Err(Error::InsufficientData(1, 0));
    }
    Ok(c.at(k))
}

/// Shared per-setting data reused across rounds.
pub struct MetricsContext<'a> {
    pub pb: &'a Problem,
    pub s: &'a ParamSetting,
    pub cert: &'a Certificate,
    pa: nalgebra::DMatrix<f64>,
    pinv: nalgebra::DMatrix<f64>,
    lam1: f64,
}

impl<'a> MetricsContext<'a> {
    pub fn new(pb: &'a Problem, s: &'a ParamSetting, cert: &'a Certificate) -> Result<Self> {
        if cert.constants.is_none() {
            return Err(Error::CertificateMissing);
        }
        let sq = spectral_quantities(s);
        Ok(MetricsContext { pb, s, cert, pa: s.p_a(), pinv: sq.pinv_phtilde, lam1: sq.lam1_pa })
    }

    /// `V = ½‖y‖²_A + (1/2ρ)‖v − v*‖²_{H̃†} + (α/2)‖x − x*‖²`.
    pub fn lyapunov_value(&self, st: &NetworkState) -> f64 {
        let y = st.y_stack();
        let v = st.v_stack(self.s);
        let x_dev: f64 = st.agents.iter().zip(&self.cert.x_star).map(|(a, b)| (&a.x - b).norm_squared()).sum();
        0.5 * block_quad(&self.pa, &y).max(0.0)
            + block_quad(&self.pinv, &block_sub(&v, &self.cert.v_star)).max(0.0) / (2.0 * self.s.rho)
            + 0.5 * self.s.alpha * x_dev
    }

    /// `f(x^{k+1}) − f* − (V^k − V^{k+1})`; nonpositive up to inner accuracy.
    pub fn lyapunov_descent_check(&self, prev: &NetworkState, next: &NetworkState) -> f64 {
        let f_next = self.pb.eval_objective(&next.x_point()).unwrap_or(f64::NAN);
        f_next - self.cert.f_star - (self.lyapunov_value(prev) - self.lyapunov_value(next))
    }

    pub fn cumulative_residual(&self, st: &NetworkState) -> f64 {
        let dy = block_sub(&st.y_stack(), &st.y0);
        let rhs = block_sum(&block_apply(&self.pa, &dy));
        (&st.cumulative_gs - rhs).amax()
    }

    pub fn compute_row(&self, prev: Option<&NetworkState>, st: &NetworkState) -> Result<MetricsRow> {
        let pb = self.pb;
        let x = st.x_point();
        let erg = st.ergodic_point()?;
        let f_k = pb.eval_objective(&x)?;
        let f_bar = pb.eval_objective(&erg.x)?;
        let ergodic_objective_error = f_bar - self.cert.f_star;
        let ergodic_feasibility = pb.coupled_violation(&erg.x);
        let bounds = theorem_bounds(self.cert, st.k)?;
        let root = (pb.n_agents() as f64 * self.lam1).sqrt();
        let y_dev = block_norm(&self.pa, &block_sub(&st.y_stack(), &st.y0));
        let (lyapunov_residual, lyapunov_value) = match prev {
            Some(p) => (self.lyapunov_descent_check(p, st), self.lyapunov_value(st)),
            None => (f64::NAN, self.lyapunov_value(st)),
        };
        Ok(MetricsRow {
            k: st.k,
            objective_error: (self.cert.f_star - f_k).abs(),
            ergodic_objective_error,
            constraint_violation: pb.constraint_violation(&x),
            ergodic_feasibility,
            consensus_error: block_quad(&self.s.p_htilde, &erg.y).max(0.0).sqrt(),
            bound_fe_slack: bounds.fe_bound - ergodic_feasibility,
            bound_oe_lower_slack: ergodic_objective_error + bounds.oe_lower,
            bound_oe_upper_slack: bounds.oe_upper - ergodic_objective_error,
            bound_fe_y_slack: root * y_dev / st.k as f64 - ergodic_feasibility,
            moreau_residual: st.moreau_residual,
            complementarity: st.complementarity,
            cumulative_residual: self.cumulative_residual(st),
            lyapunov_residual,
            lyapunov_value,
            comm_total: st.comm_total,
            inner_iters_total: st.inner_iters_total,
        })
    }
}

/// `Σ_i q_i(ȳ)` at the mean of the agents' running dual averages.
pub fn dual_value(st: &NetworkState, pb: &Problem, tol: f64) -> Result<f64> {
    let y = st.ergodic_point()?.y_mean;
    Ok(pb.agents.iter().map(|a| solve_local_dualfun(a, &y, tol).value).sum())
}

/// Least-squares slope of `log err` against `log k` over `k ∈ [k_lo, k_hi]`.
/// `series[j]` is the value at `k = j + 1`.
pub fn loglog_slope(series: &[f64], k_lo: usize, k_hi: usize) -> Result<f64> {
    let pts: Vec<(f64, f64)> = series
        .iter()
        .enumerate()
        .map(|(j, v)| (j + 1, *v))
        .filter(|(k, v)| *k >= k_lo && *k <= k_hi && *v > 0.0 && v.is_finite())
        .map(|(k, v)| ((k as f64).ln(), v.ln()))
        .collect();
    if pts.len() < 2 {
        return Err(Error::InsufficientData(2, pts.len()));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InsufficientData(2, 1));
    }
    Ok(sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{Engine, EngineOptions};
    use crate::graph::Graph;
    use crate::oracle::centralized_solve;
    use crate::setting::{make_setting, Tuning, Variant};
    use nalgebra::DMatrix;

    #[test]
    fn slope_of_power_laws() {
        let inv: Vec<f64> = (1..=1000).map(|k| 3.0 / k as f64).collect();
        assert!((loglog_slope(&inv, 100, 1000).unwrap() + 1.0).abs() < 1e-6);
        let sqrt: Vec<f64> = (1..=1000).map(|k| 2.0 / (k as f64).sqrt()).collect();
        assert!((loglog_slope(&sqrt, 100, 1000).unwrap() + 0.5).abs() < 1e-6);
        assert!(matches!(loglog_slope(&inv, 5, 5), Err(Error::InsufficientData(..))));
    }

    #[test]
    fn csv_has_fixed_columns_and_digits() {
        let row = MetricsRow {
            k: 3,
            objective_error: 0.1,
            ergodic_objective_error: -0.2,
            constraint_violation: 0.0,
            ergodic_feasibility: 0.0,
            consensus_error: 0.0,
            bound_fe_slack: 1.0,
            bound_oe_lower_slack: 1.0,
            bound_oe_upper_slack: 1.0,
            bound_fe_y_slack: 1.0,
            moreau_residual: 0.0,
            complementarity: 0.0,
            cumulative_residual: 0.0,
            lyapunov_residual: 0.0,
            lyapunov_value: 0.0,
            comm_total: 480,
            inner_iters_total: 7,
        };
        let mut buf = Vec::new();
        write_csv(&mut buf, &[row]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0].split(',').count(), 14);
        assert_eq!(lines[1].split(',').count(), 14);
        assert!(lines[1].contains("1.0000000000000001e-1"));
        assert!(lines[1].ends_with(",480,7"));
    }

    fn small_run() -> (Problem, ParamSetting, Certificate) {
        let pb = Problem::generate_example(4, 2, 1, 2, 11);
        let g = Graph::new(4, &[(0, 1), (1, 2), (2, 3), (0, 2)]).unwrap();
        let s = make_setting(Variant::Pextra, &g, 1.0, 0.0, &Tuning::new()).unwrap();
        let sol = centralized_solve(&pb, 1e-10).unwrap();
        let zeros_x: Vec<_> = pb.agents.iter().map(|a| DVector::zeros(a.dim())).collect();
        let zeros_y = vec![DVector::zeros(pb.dual_dim()); 4];
        let cert = Certificate::new(&sol, &pb).unwrap().with_constants(&s, &zeros_x, &zeros_y, &zeros_y);
        (pb, s, cert)
    }

    #[test]
    fn v_star_lies_in_range_and_bounds_scale() {
        let (_, s, cert) = small_run();
        let sum = block_sum(&cert.v_star);
        assert!(sum.amax() < 1e-12);
        let sq = spectral_quantities(&s);
        let back = block_apply(&s.p_htilde, &block_apply(&sq.pinv_phtilde, &cert.v_star));
        assert!(block_sub(&back, &cert.v_star).iter().all(|d| d.amax() < 1e-8));
        let b1 = theorem_bounds(&cert, 10).unwrap();
        let b2 = theorem_bounds(&cert, 20).unwrap();
        assert!((b1.fe_bound - 2.0 * b2.fe_bound).abs() < 1e-12 * b1.fe_bound.max(1.0));
        let mut bare = cert.clone();
        bare.constants = None;
        assert!(matches!(theorem_bounds(&bare, 1), Err(Error::CertificateMissing)));
    }

    #[test]
    fn prox_upper_constant_at_zero_start() {
        let (_, s, cert) = small_run();
        let s = s.with_alpha(0.3);
        let n = s.n_agents();
        let zx: Vec<_> = cert.x_star.iter().map(|x| DVector::zeros(x.len())).collect();
        let zy = vec![DVector::zeros(cert.y_star.len()); n];
        let c = theorem_constants(&cert, &s, &zx, &zy, &zy);
        let sq = spectral_quantities(&s);
        let x_sq: f64 = cert.x_star.iter().map(|x| x.norm_squared()).sum();
        let expect = block_quad(&sq.pinv_phtilde, &cert.v_star) / (2.0 * s.rho) + 0.15 * x_sq;
        assert!((c.r2_prox - expect).abs() < 1e-12);
    }

    #[test]
    fn rows_respect_bounds_on_short_run() {
        let (pb, s, cert) = small_run();
        let ctx = MetricsContext::new(&pb, &s, &cert).unwrap();
        let engine = Engine::new(&pb, &s, EngineOptions::default()).unwrap();
        let st = engine.init(None, None).unwrap();
        let mut rows = Vec::new();
        engine
            .run(st, 60, |prev, next| {
                rows.push(ctx.compute_row(Some(prev), next)?);
                Ok(())
            })
            .unwrap();
        let eps = inner_slack(1e-8);
        for r in &rows {
            assert!(r.bound_fe_slack >= -eps, "{r:?}");
            assert!(r.bound_fe_y_slack >= -eps, "{r:?}");
            assert!(r.bound_oe_lower_slack >= -eps && r.bound_oe_upper_slack >= -eps, "{r:?}");
            assert!(r.lyapunov_residual <= 1e-5, "{r:?}");
            assert!(r.cumulative_residual <= 1e-10);
        }
        // k = 1 from y⁰ = 0: ergodic and instantaneous iterates coincide.
        assert!(rows.windows(2).all(|w| w[1].comm_total > w[0].comm_total));
    }

    #[test]
    fn dense_forms_match_block_forms() {
        let (_, s, cert) = small_run();
        let pa = s.p_a();
        let d = cert.y_star.len();
        let dense = DMatrix::from_fn(4 * d, 4 * d, |r, c| if r % d == c % d { pa[(r / d, c / d)] } else { 0.0 });
        let flat = DVector::from_iterator(4 * d, cert.v_star.iter().flat_map(|v| v.iter().copied()));
        let want = (flat.transpose() * &dense * &flat)[(0, 0)];
        assert!((block_quad(&pa, &cert.v_star) - want).abs() < 1e-12);
    }
}
