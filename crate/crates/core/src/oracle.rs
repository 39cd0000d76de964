//! Ground-truth references computed without the distributed iteration.
//!
//! [`centralized_solve`] runs a classical method of multipliers over the full
//! stacked variable with its own accelerated inner loop; only the ℓ1-ball
//! proximal map is shared with the agent solver. [`grid_oracle`] is a
//! brute-force reference for tiny instances.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::localsolver::{prox_l1_ball, solve_local_dualfun};
use crate::problem::{Problem, StackedPoint};

/// Primal-dual optimal pair `(x*, (μ*, λ*))` with its KKT residuals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSolution {
    pub x_star: Vec<DVector<f64>>,
    pub f_star: f64,
    /// `(μ*, λ*)`.
    pub y_star: DVector<f64>,
    pub stationarity: f64,
    pub feasibility: f64,
    pub complementarity: f64,
    pub outer_iters: usize,
}

impl OracleSolution {
    pub fn x_point(&self) -> StackedPoint {
        StackedPoint { blocks: self.x_star.clone() }
    }

    pub fn kkt_residual(&self) -> f64 {
        self.stationarity.max(self.feasibility).max(self.complementarity)
    }
}

/// Smooth part of the stacked Lagrangian-type functions used by the oracle.
struct Stacked<'a> {
    pb: &'a Problem,
}

impl Stacked<'_> {
    fn quad_value(&self, x: &[DVector<f64>]) -> f64 {
        self.pb.agents.iter().zip(x).map(|(a, xi)| a.smooth_value(xi)).sum()
    }

    fn sums(&self, x: &[DVector<f64>]) -> (DVector<f64>, DVector<f64>) {
        let mut g = DVector::zeros(self.pb.m());
        let mut h = DVector::zeros(self.pb.p());
        for (a, xi) in self.pb.agents.iter().zip(x) {
            g += a.g(xi);
            h += a.h(xi);
        }
        (g, h)
    }

    /// Gradient of `Σ smooth_i + ⟨wg, Σg⟩ + ⟨wh, Σh⟩` for fixed weights.
    fn weighted_gradient(&self, x: &[DVector<f64>], wg: &DVector<f64>, wh: &DVector<f64>) -> Vec<DVector<f64>> {
        self.pb
            .agents
            .iter()
            .zip(x)
            .map(|(a, xi)| {
                let mut grad = a.smooth_gradient(xi);
                for (j, t) in a.ineq.iter().enumerate() {
                    if wg[j] != 0.0 {
                        grad.axpy(wg[j], &t.gradient(xi), 1.0);
                    }
                }
                grad += a.b.transpose() * wh;
                grad
            })
            .collect()
    }

    /// Augmented Lagrangian smooth part and its gradient.
    fn augmented(&self, x: &[DVector<f64>], mu: &DVector<f64>, lam: &DVector<f64>, pen: f64) -> (f64, Vec<DVector<f64>>) {
        let (g, h) = self.sums(x);
        let shifted = (mu + &g * pen).map(|v| v.max(0.0));
        let value = self.quad_value(x)
            + (shifted.norm_squared() - mu.norm_squared()) / (2.0 * pen)
            + lam.dot(&h)
            + 0.5 * pen * h.norm_squared();
        let wh = lam + &h * pen;
        (value, self.weighted_gradient(x, &shifted, &wh))
    }

    fn prox(&self, x: &[DVector<f64>], step: f64) -> Vec<DVector<f64>> {
        self.pb
            .agents
            .iter()
            .zip(x)
            .map(|(a, xi)| prox_l1_ball(xi, step, &a.ball_center, a.ball_radius_sq))
            .collect()
    }
}

fn axpy_blocks(x: &[DVector<f64>], d: &[DVector<f64>], t: f64) -> Vec<DVector<f64>> {
    x.iter().zip(d).map(|(a, b)| a + b * t).collect()
}

fn diff_sq(a: &[DVector<f64>], b: &[DVector<f64>]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v).norm_squared()).sum()
}

/// Minimizes the augmented Lagrangian at fixed multipliers.
fn solve_augmented(
    st: &Stacked<'_>,
    x0: Vec<DVector<f64>>,
    mu: &DVector<f64>,
    lam: &DVector<f64>,
    pen: f64,
    tol: f64,
    max_iters: usize,
) -> Vec<DVector<f64>> {
    let mut lip = 1.0;
    let mut x = x0;
    let mut prev = x.clone();
    let mut theta = 1.0_f64;
    for _ in 0..max_iters {
        let beta = if theta > 1.0 { (theta - 1.0) / (0.5 * (1.0 + (1.0 + 4.0 * theta * theta).sqrt())) } else { 0.0 };
        let momentum: Vec<_> = x.iter().zip(&prev).map(|(a, b)| a - b).collect();
        let y = axpy_blocks(&x, &momentum, beta);
        let (fy, gy) = st.augmented(&y, mu, lam, pen);
        let cand = loop {
            let cand = st.prox(&axpy_blocks(&y, &gy, -1.0 / lip), 1.0 / lip);
            let inner: f64 = cand.iter().zip(&y).zip(&gy).map(|((c, yy), g)| (c - yy).dot(g)).sum();
            let f_cand = st.augmented(&cand, mu, lam, pen).0;
            if f_cand <= fy + inner + 0.5 * lip * diff_sq(&cand, &y) + 1e-13 * (1.0 + fy.abs()) {
                break cand;
            }
            lip *= 2.0;
        };
        let gap = diff_sq(&cand, &y).sqrt() * lip;
        // Gradient-based restart: the step opposes the momentum direction.
        let uphill: f64 = y.iter().zip(&cand).zip(&x).map(|((yy, c), xx)| (yy - c).dot(&(c - xx))).sum();
        theta = if uphill > 0.0 { 1.0 } else { 0.5 * (1.0 + (1.0 + 4.0 * theta * theta).sqrt()) };
        prev = std::mem::replace(&mut x, cand);
        if gap <= tol {
            break;
        }
        // Let the step grow back slowly after conservative backtracking.
        lip *= 0.98;
    }
    x
}

/// Unit-step proximal-gradient residual of the ordinary Lagrangian at `(μ, λ)`.
fn lagrangian_stationarity(st: &Stacked<'_>, x: &[DVector<f64>], mu: &DVector<f64>, lam: &DVector<f64>) -> f64 {
    let grad = st.weighted_gradient(x, mu, lam);
    let moved = st.prox(&axpy_blocks(x, &grad, -1.0), 1.0);
    diff_sq(x, &moved).sqrt()
}

/// Method of multipliers on the coupled constraints; stops when the KKT
/// residual (stationarity, feasibility, complementarity) is at most `tol`.
pub fn centralized_solve(pb: &Problem, tol: f64) -> Result<OracleSolution> {
    centralized_solve_with(pb, tol, 500)
}

pub fn centralized_solve_with(pb: &Problem, tol: f64, max_outer: usize) -> Result<OracleSolution> {
    let st = Stacked { pb };
    let mut x: Vec<DVector<f64>> = pb.agents.iter().map(|a| DVector::zeros(a.dim())).collect();
    let mut mu = DVector::zeros(pb.m());
    let mut lam = DVector::zeros(pb.p());
    let mut pen = 1.0;
    let mut inner_tol = 1e-4;
    let mut last_feas = f64::INFINITY;
    for outer in 1..=max_outer {
        x = solve_augmented(&st, x, &mu, &lam, pen, inner_tol, 200_000);
        let (g, h) = st.sums(&x);
        mu = (&mu + &g * pen).map(|v| v.max(0.0));
        lam += &h * pen;

        let feasibility = (g.map(|v| v.max(0.0)).norm_squared() + h.norm_squared()).sqrt();
        let complementarity = mu.dot(&g).abs();
        let stationarity = lagrangian_stationarity(&st, &x, &mu, &lam);
        if stationarity.max(feasibility).max(complementarity) <= tol {
            let x_point = StackedPoint { blocks: x.clone() };
            return Ok(OracleSolution {
                f_star: pb.eval_objective(&x_point)?,
                x_star: x,
                y_star: DVector::from_iterator(pb.dual_dim(), mu.iter().chain(lam.iter()).copied()),
                stationarity,
                feasibility,
                complementarity,
                outer_iters: outer,
            });
        }
        if feasibility > 0.25 * last_feas {
            pen = (pen * 4.0).min(1e3);
        }
        last_feas = feasibility;
        inner_tol = (inner_tol * 0.2).max(tol * 1e-2);
    }
    Err(Error::NotConverged(format!("no KKT point within {tol:e} after {max_outer} outer iterations")))
}

/// `|f* − Σ_i q_i(y*)|` with each `q_i` evaluated by an inner minimization.
pub fn duality_gap_check(sol: &OracleSolution, pb: &Problem, tol: f64) -> f64 {
    let dual: f64 = pb.agents.iter().map(|a| solve_local_dualfun(a, &sol.y_star, tol * 1e-2).value).sum();
    (sol.f_star - dual).abs()
}

#[derive(Debug, Clone)]
pub struct GridResult {
    pub x_best: Vec<DVector<f64>>,
    pub f_best: f64,
    pub points_evaluated: u64,
}

/// Brute-force grid over the product of balls (total dimension at most 4).
///
/// A first exhaustive pass at a coarse spacing is followed by zoomed passes
/// around the incumbent until the spacing reaches `resolution`. Coupled
/// constraints are accepted within a band of `spacing × L₁`, where `L₁`
/// bounds the constraint change per unit of coordinate movement.
pub fn grid_oracle(pb: &Problem, resolution: f64) -> Result<GridResult> {
    let dims: Vec<usize> = pb.agents.iter().map(|a| a.dim()).collect();
    let total: usize = dims.iter().sum();
    if total > 4 {
        return Err(Error::TooLarge(total));
    }
    let mut lo = Vec::with_capacity(total);
    let mut hi = Vec::with_capacity(total);
    for a in &pb.agents {
        let r = a.ball_radius_sq.sqrt();
        for k in 0..a.dim() {
            lo.push(a.ball_center[k] - r);
            hi.push(a.ball_center[k] + r);
        }
    }
    let lip_g: Vec<f64> = (0..pb.m())
        .map(|j| {
            pb.agents
                .iter()
                .map(|a| {
                    let far = (&a.ball_center - &a.ineq[j].center).norm() + a.ball_radius_sq.sqrt();
                    2.0 * far * (a.dim() as f64).sqrt()
                })
                .sum()
        })
        .collect();
    let lip_h: Vec<f64> = (0..pb.p())
        .map(|r| pb.agents.iter().map(|a| a.b.row(r).iter().map(|v| v.abs()).sum::<f64>()).sum())
        .collect();

    let split = |flat: &[f64]| -> Vec<DVector<f64>> {
        let mut out = Vec::with_capacity(dims.len());
        let mut off = 0;
        for &d in &dims {
            out.push(DVector::from_row_slice(&flat[off..off + d]));
            off += d;
        }
        out
    };
    let evaluate = |flat: &[f64], spacing: f64| -> Option<f64> {
        let blocks = split(flat);
        if pb.agents.iter().zip(&blocks).any(|(a, x)| a.ball_violation(x) > 0.0) {
            return None;
        }
        let point = StackedPoint { blocks };
        let g = pb.sum_g(&point);
        let h = pb.sum_h(&point);
        if g.iter().zip(&lip_g).any(|(v, l)| *v > spacing * l) || h.iter().zip(&lip_h).any(|(v, l)| v.abs() > spacing * l) {
            return None;
        }
        pb.eval_objective(&point).ok()
    };

    let budget = 4.0e6_f64;
    let per_dim = budget.powf(1.0 / total as f64).floor().max(2.0);
    let widest = lo.iter().zip(&hi).map(|(l, h)| h - l).fold(0.0, f64::max);
    let mut spacing = (widest / per_dim).max(resolution);
    let mut evaluated = 0u64;
    let mut best: Option<(Vec<f64>, f64)> = None;

    let mut axes: Vec<Vec<f64>> = lo
        .iter()
        .zip(&hi)
        .map(|(l, h)| {
            let n = ((h - l) / spacing).floor() as usize;
            (0..=n).map(|t| l + t as f64 * spacing).collect()
        })
        .collect();
    loop {
        let mut idx = vec![0usize; total];
        let mut point = vec![0.0; total];
        'outer: loop {
            for k in 0..total {
                point[k] = axes[k][idx[k]];
            }
            evaluated += 1;
            if let Some(f) = evaluate(&point, spacing) {
                if best.as_ref().map_or(true, |(_, fb)| f < *fb) {
                    best = Some((point.clone(), f));
                }
            }
            for k in 0..total {
                idx[k] += 1;
                if idx[k] < axes[k].len() {
                    continue 'outer;
                }
                idx[k] = 0;
            }
            break;
        }
        let (center, _) = best.clone().ok_or(Error::NoFeasiblePoint)?;
        if spacing <= resolution {
            break;
        }
        let half = 3.0 * spacing;
        spacing = (spacing / 4.0).max(resolution);
        let cells = (half / spacing).ceil() as i64;
        axes = center
            .iter()
            .zip(lo.iter().zip(&hi))
            .map(|(c, (l, h))| {
                (-cells..=cells).map(|t| c + t as f64 * spacing).filter(|v| v >= l && v <= h).collect()
            })
            .collect();
        // The incumbent was accepted under a wider band; re-rank from scratch.
        best = None;
    }
    let (flat, f_best) = best.ok_or(Error::NoFeasiblePoint)?;
    Ok(GridResult { x_best: split(&flat), f_best, points_evaluated: evaluated })
}
