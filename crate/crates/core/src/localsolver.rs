//! Per-agent subproblem solver.
//!
//! Each round an agent minimizes, over its ball `X_i`,
//!
//! ```text
//! L(x) = f_i(x) + (1/2d')(‖[μ̃ + g_i(x)]_+‖² + ‖λ̃ + h_i(x)‖²) + (α/2)‖x − x^k‖²
//! ```
//!
//! The ℓ1 term and the ball are handled together by an exact proximal map;
//! everything else is smooth (the squared hinge is C¹) and goes through an
//! accelerated proximal-gradient loop with backtracking and objective restart.

use nalgebra::DVector;

use crate::linalg::eigenvalues;
use crate::problem::Agent;

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITERS: usize = 20_000;

fn soft_threshold(z: &DVector<f64>, t: f64) -> DVector<f64> {
    z.map(|v| v.signum() * (v.abs() - t).max(0.0))
}

/// `argmin_x ‖x‖₁ + (1/2η)‖x − w‖²` subject to `‖x − a‖² ≤ c`.
///
/// For a multiplier `ν ≥ 0` on the ball the minimizer is a soft-threshold of
/// a convex combination of `w` and `a`; `ν` is found by bisection on the
/// (monotone) ball residual.
pub fn prox_l1_ball(w: &DVector<f64>, eta: f64, a: &DVector<f64>, c: f64) -> DVector<f64> {
    let inv = 1.0 / eta;
    let at = |nu: f64| {
        let kappa = inv + nu;
        let z = (w * inv + a * nu) / kappa;
        soft_threshold(&z, 1.0 / kappa)
    };
    let excess = |x: &DVector<f64>| (x - a).norm_squared() - c;
    let free = at(0.0);
    if excess(&free) <= 0.0 {
        return free;
    }
    let mut lo = 0.0;
    let mut hi = inv.max(1.0);
    let mut x_hi = at(hi);
    while excess(&x_hi) > 0.0 {
        lo = hi;
        hi *= 2.0;
        x_hi = at(hi);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let x_mid = at(mid);
        if excess(&x_mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
            x_hi = x_mid;
        }
    }
    x_hi
}

/// Outcome of an inner solve.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalSolution {
    pub x: DVector<f64>,
    /// Proximal-gradient fixed-point gap `‖x − prox_η(x − η∇F(x))‖/η`.
    pub residual: f64,
    pub iters: usize,
    pub converged: bool,
}

/// Smooth part of a composite objective whose nonsmooth part is `‖x‖₁ + δ_X`.
pub trait SmoothPart {
    fn value(&self, x: &DVector<f64>) -> f64;
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64>;
    /// Curvature estimate used for the first step size.
    fn curvature_hint(&self, x: &DVector<f64>) -> f64;
}

/// Accelerated proximal gradient on `F(x) + ‖x‖₁ + δ_X(x)` with backtracking
/// and function-value restart. Returns the best certified iterate.
pub fn minimize_composite<S: SmoothPart>(
    smooth: &S,
    agent: &Agent,
    warm: &DVector<f64>,
    tol: f64,
    max_iters: usize,
) -> LocalSolution {
    let a = &agent.ball_center;
    let c = agent.ball_radius_sq;
    let total = |x: &DVector<f64>| smooth.value(x) + x.lp_norm(1);
    let gap = |x: &DVector<f64>, lip: f64| {
        let step = 1.0 / lip;
        let moved = prox_l1_ball(&(x - smooth.gradient(x) * step), step, a, c);
        (x - moved).norm() * lip
    };

    let mut lip = smooth.curvature_hint(warm).max(1e-8);
    let mut x = agent.project(warm);
    let mut obj_x = total(&x);
    let mut y = x.clone();
    let mut t = 1.0_f64;
    let mut best = LocalSolution { residual: gap(&x, lip), x: x.clone(), iters: 0, converged: false };
    if best.residual <= tol {
        best.converged = true;
        return best;
    }

    for iter in 1..=max_iters {
        let fy = smooth.value(&y);
        let gy = smooth.gradient(&y);
        let (x_new, f_new) = loop {
            let step = 1.0 / lip;
            let cand = prox_l1_ball(&(&y - &gy * step), step, a, c);
            let diff = &cand - &y;
            let f_cand = smooth.value(&cand);
            let model = fy + gy.dot(&diff) + 0.5 * lip * diff.norm_squared();
            if f_cand <= model + 1e-12 * (1.0 + fy.abs()) {
                break (cand, f_cand);
            }
            lip *= 2.0;
        };
        let obj_new = f_new + x_new.lp_norm(1);
        let step_gap = (&x_new - &y).norm() * lip;

        if obj_new > obj_x && t > 1.0 {
            // Momentum overshoot: restart from the last iterate.
            y = x.clone();
            t = 1.0;
            continue;
        }
        let t_new = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = &x_new + (&x_new - &x) * ((t - 1.0) / t_new);
        t = t_new;
        x = x_new;
        obj_x = obj_new;

        if step_gap <= 10.0 * tol || iter % 50 == 0 {
            let r = gap(&x, lip);
            if r < best.residual {
                best = LocalSolution { x: x.clone(), residual: r, iters: iter, converged: false };
            }
            if r <= tol {
                best.iters = iter;
                best.converged = true;
                return best;
            }
        }
    }
    best.iters = max_iters;
    best
}

/// The per-round agent subproblem.
#[derive(Debug, Clone)]
pub struct LocalSubproblem<'a> {
    pub agent: &'a Agent,
    /// `ỹ = (μ̃, λ̃)`.
    pub shift: DVector<f64>,
    /// `d'_i`, the agent's entry of `P_D`.
    pub scale: f64,
    pub alpha: f64,
    /// `x_i^k`, the proximal anchor.
    pub anchor: DVector<f64>,
}

impl LocalSubproblem<'_> {
    fn hinge(&self, x: &DVector<f64>) -> DVector<f64> {
        let m = self.agent.m();
        DVector::from_fn(m, |j, _| (self.shift[j] + self.agent.ineq[j].value(x)).max(0.0))
    }

    fn affine_residual(&self, x: &DVector<f64>) -> DVector<f64> {
        let m = self.agent.m();
        self.shift.rows(m, self.agent.p_count()) + self.agent.h(x)
    }

    /// Full objective `L(x)`; the ball constraint is not included.
    pub fn value(&self, x: &DVector<f64>) -> f64 {
        SmoothPart::value(self, x) + x.lp_norm(1)
    }

    /// `∂f_i(x) + (1/d')Σ_j [μ̃_j + g_ij(x)]_+ ∇g_ij(x) + (1/d')Bᵀ(λ̃ + h_i(x)) + α(x − x^k)`
    /// with the zero subgradient of `|·|` at zero.
    pub fn composite_subgradient(&self, x: &DVector<f64>) -> DVector<f64> {
        self.gradient(x) + x.map(|v| if v == 0.0 { 0.0 } else { v.signum() })
    }
}

impl SmoothPart for LocalSubproblem<'_> {
    fn value(&self, x: &DVector<f64>) -> f64 {
        let hinge = self.hinge(x).norm_squared();
        let affine = self.affine_residual(x).norm_squared();
        self.agent.smooth_value(x)
            + (hinge + affine) / (2.0 * self.scale)
            + 0.5 * self.alpha * (x - &self.anchor).norm_squared()
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut g = self.agent.smooth_gradient(x);
        let inv = 1.0 / self.scale;
        for (j, w) in self.hinge(x).iter().enumerate() {
            if *w > 0.0 {
                g.axpy(inv * w, &self.agent.ineq[j].gradient(x), 1.0);
            }
        }
        g += self.agent.b.transpose() * self.affine_residual(x) * inv;
        g += (x - &self.anchor) * self.alpha;
        g
    }

    fn curvature_hint(&self, x: &DVector<f64>) -> f64 {
        let inv = 1.0 / self.scale;
        let quad = &self.agent.p * 2.0 + self.agent.b.transpose() * &self.agent.b * inv;
        let top = eigenvalues(&quad).last().copied().unwrap_or(0.0);
        let hinge: f64 = self
            .agent
            .ineq
            .iter()
            .zip(self.hinge(x).iter())
            .filter(|(_, w)| **w > 0.0)
            .map(|(t, w)| inv * (2.0 * w + 4.0 * (x - &t.center).norm_squared()))
            .sum();
        top + hinge + self.alpha
    }
}

/// Solves one agent's subproblem from a warm start.
pub fn solve_local(
    sp: &LocalSubproblem<'_>,
    warm: &DVector<f64>,
    tol: f64,
    max_iters: usize,
) -> LocalSolution {
    minimize_composite(sp, sp.agent, warm, tol, max_iters)
}

/// Lagrangian `f_i(x) + μᵀg_i(x) + λᵀh_i(x)` at a fixed multiplier.
struct LagrangianPart<'a> {
    agent: &'a Agent,
    y: &'a DVector<f64>,
}

impl SmoothPart for LagrangianPart<'_> {
    fn value(&self, x: &DVector<f64>) -> f64 {
        self.agent.smooth_value(x) + self.y.dot(&self.agent.gtilde(x))
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let m = self.agent.m();
        let mut g = self.agent.smooth_gradient(x);
        for j in 0..m {
            g.axpy(self.y[j], &self.agent.ineq[j].gradient(x), 1.0);
        }
        g += self.agent.b.transpose() * self.y.rows(m, self.agent.p_count());
        g
    }

    fn curvature_hint(&self, _x: &DVector<f64>) -> f64 {
        let top = eigenvalues(&(&self.agent.p * 2.0)).last().copied().unwrap_or(0.0);
        let mu: f64 = (0..self.agent.m()).map(|j| self.y[j].max(0.0)).sum();
        top + 2.0 * mu
    }
}

/// Local dual function `q_i(y) = min_{x∈X_i} f_i(x) + ⟨μ, g_i(x)⟩ + ⟨λ, h_i(x)⟩`.
#[derive(Debug, Clone)]
pub struct DualValue {
    pub value: f64,
    pub x: DVector<f64>,
    pub residual: f64,
}

pub fn solve_local_dualfun(agent: &Agent, y: &DVector<f64>, tol: f64) -> DualValue {
    let part = LagrangianPart { agent, y };
    let warm = DVector::zeros(agent.dim());
    let sol = minimize_composite(&part, agent, &warm, tol, 200_000);
    let value = part.value(&sol.x) + sol.x.lp_norm(1);
    DualValue { value, x: sol.x, residual: sol.residual }
}
