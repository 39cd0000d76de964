//! Synchronous round-based execution of the dual consensus iteration.
//!
//! Every round each agent forms its dual shift `ỹ_i` from its own state and
//! the values last received from neighbors, solves its local subproblem,
//! takes the projected dual step, and exchanges the new `y_i` (and, in the
//! double-exchange form, the tracking variable `u_i`). All cross-agent reads
//! go through [`Mailbox`]; within a phase the agents run in parallel.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::block_apply;
use crate::localsolver::{solve_local, LocalSubproblem, DEFAULT_MAX_ITERS, DEFAULT_TOL};
use crate::mailbox::{Mailbox, Tag};
use crate::problem::{Problem, StackedPoint};
use crate::setting::{ExchangeMode, ParamSetting};

/// How the double-exchange tracking variable is refreshed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackingUpdate {
    /// `u^{k+1} = z^{k+1} + ρ M y^{k+1}`, which keeps `u = z + ρ M y`.
    Tracking,
    /// `u^{k+1} = z^k + ρ M y^{k+1}`.
    StaleZ,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EngineOptions {
    pub tol: f64,
    pub max_iters: usize,
    pub tracking: TrackingUpdate,
}

impl Default for EngineOptions {
    fn default() -> Self {
        EngineOptions { tol: DEFAULT_TOL, max_iters: DEFAULT_MAX_ITERS, tracking: TrackingUpdate::Tracking }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    /// Single exchange: `v_i`, the agent's block of `H̃^{1/2} z`.
    pub v: DVector<f64>,
    /// Double exchange: `z_i`.
    pub z: DVector<f64>,
    /// Double exchange: `u_i = z_i + ρ Σ_j M_ij y_j`.
    pub u: DVector<f64>,
    /// Multiplier of the dual cone constraint from the last dual step.
    pub sigma: DVector<f64>,
    /// Dual shift used in the last round.
    pub ytilde: DVector<f64>,
    /// Latest `y_j` received from each neighbor, in neighbor-list order.
    pub nbr_y: Vec<DVector<f64>>,
    /// Latest `u_j` received from each neighbor (double exchange).
    pub nbr_u: Vec<DVector<f64>>,
    pub inner_iters: usize,
    pub inner_residual: f64,
    pub inner_converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkState {
    pub k: usize,
    pub mode: ExchangeMode,
    pub agents: Vec<AgentState>,
    pub x0: Vec<DVector<f64>>,
    pub y0: Vec<DVector<f64>>,
    pub sum_x: Vec<DVector<f64>>,
    pub sum_y: Vec<DVector<f64>>,
    /// `Σ_{l=1}^k Σ_i (g̃_i(x_i^l) + σ_i^l)`.
    pub cumulative_gs: DVector<f64>,
    /// Reals sent while initializing (not part of `comm_total`).
    pub comm_init: u64,
    /// Reals sent during rounds.
    pub comm_total: u64,
    pub inner_iters_total: u64,
    pub solver_failures: u64,
    /// Max over agents of `‖d'_i y_i − σ_i − (ỹ_i + g̃_i(x_i))‖` in the last round.
    pub moreau_residual: f64,
    /// Max over agents of `|⟨d'_i y_i, σ_i⟩|` in the last round.
    pub complementarity: f64,
}

impl NetworkState {
    pub fn x_point(&self) -> StackedPoint {
        StackedPoint { blocks: self.agents.iter().map(|a| a.x.clone()).collect() }
    }

    pub fn y_stack(&self) -> Vec<DVector<f64>> {
        self.agents.iter().map(|a| a.y.clone()).collect()
    }

    pub fn sigma_stack(&self) -> Vec<DVector<f64>> {
        self.agents.iter().map(|a| a.sigma.clone()).collect()
    }

    /// `v = H̃^{1/2} z`: tracked directly in single mode, `(L ⊗ I) z` in double mode.
    pub fn v_stack(&self, s: &ParamSetting) -> Vec<DVector<f64>> {
        match (self.mode, &s.l_matrix) {
            (ExchangeMode::Double, Some(l)) => {
                let z: Vec<_> = self.agents.iter().map(|a| a.z.clone()).collect();
                block_apply(l, &z)
            }
            _ => self.agents.iter().map(|a| a.v.clone()).collect(),
        }
    }

    /// Running averages `x̄^k`, `ȳ^k`, and the mean of the `ȳ_i^k`.
    pub fn ergodic_point(&self) -> Result<Ergodic> {
        if self.k == 0 {
            return Err(Error::InsufficientData(1, 0));
        }
        let inv = 1.0 / self.k as f64;
        let x = StackedPoint { blocks: self.sum_x.iter().map(|s| s * inv).collect() };
        let y: Vec<_> = self.sum_y.iter().map(|s| s * inv).collect();
        let mean = y.iter().fold(DVector::zeros(y[0].len()), |acc, v| acc + v) / y.len() as f64;
        Ok(Ergodic { x, y, y_mean: mean })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Debug, Clone)]
pub struct Ergodic {
    pub x: StackedPoint,
    pub y: Vec<DVector<f64>>,
    pub y_mean: DVector<f64>,
}

/// Projection onto the dual cone block `ℝ^m_+ × ℝ^p`.
pub fn project_dual_cone(w: &DVector<f64>, m: usize) -> DVector<f64> {
    DVector::from_fn(w.len(), |r, _| if r < m { w[r].max(0.0) } else { w[r] })
}

/// Projection onto the polar cone `ℝ^m_- × {0}^p`.
pub fn project_polar_cone(w: &DVector<f64>, m: usize) -> DVector<f64> {
    DVector::from_fn(w.len(), |r, _| if r < m { w[r].min(0.0) } else { 0.0 })
}

struct LocalUpdate {
    x: DVector<f64>,
    y: DVector<f64>,
    sigma: DVector<f64>,
    ytilde: DVector<f64>,
    iters: usize,
    residual: f64,
    converged: bool,
    moreau: f64,
    complementarity: f64,
    gs: DVector<f64>,
}

pub struct Engine<'a> {
    pub pb: &'a Problem,
    pub s: &'a ParamSetting,
    pub opts: EngineOptions,
}

impl<'a> Engine<'a> {
    pub fn new(pb: &'a Problem, s: &'a ParamSetting, opts: EngineOptions) -> Result<Self> {
        if s.n_agents() != pb.n_agents() || s.graph.n_nodes() != pb.n_agents() {
            return Err(Error::DimMismatch { expected: pb.n_agents(), got: s.n_agents() });
        }
        if s.exchange_mode == ExchangeMode::Double && (s.l_matrix.is_none() || s.m_matrix.is_none()) {
            return Err(Error::AssumptionViolated("double exchange needs L and M".into()));
        }
        Ok(Engine { pb, s, opts })
    }

    /// Initial state; `None` means zeros. Exchanges `y⁰` (and `u⁰`).
    pub fn init(&self, x0: Option<Vec<DVector<f64>>>, y0: Option<Vec<DVector<f64>>>) -> Result<NetworkState> {
        let n = self.pb.n_agents();
        let dd = self.pb.dual_dim();
        let m = self.pb.m();
        let x0 = x0.unwrap_or_else(|| self.pb.agents.iter().map(|a| DVector::zeros(a.dim())).collect());
        let y0 = y0.unwrap_or_else(|| vec![DVector::zeros(dd); n]);
        if x0.len() != n || y0.len() != n {
            return Err(Error::InvalidInit("initial point must have one block per agent".into()));
        }
        for (i, (x, y)) in x0.iter().zip(&y0).enumerate() {
            if x.len() != self.pb.agents[i].dim() || y.len() != dd {
                return Err(Error::InvalidInit(format!("agent {i} has wrongly sized blocks")));
            }
            if y.rows(0, m).iter().any(|v| *v < 0.0) {
                return Err(Error::InvalidInit(format!("agent {i} starts with a negative inequality multiplier")));
            }
        }

        let g = &self.s.graph;
        let mut mailbox = Mailbox::new(n);
        for (i, y) in y0.iter().enumerate() {
            mailbox.broadcast(g, i, 0, Tag::Y, y);
        }
        let nbr_y = mailbox.deliver(g, 0, Tag::Y)?;
        let zeros = vec![DVector::zeros(dd); n];
        let (u0, nbr_u) = match self.s.exchange_mode {
            ExchangeMode::Single => (zeros.clone(), vec![Vec::new(); n]),
            ExchangeMode::Double => {
                let m_mat = self.s.m_matrix.as_ref().expect("checked in new");
                let u0: Vec<_> = (0..n)
                    .map(|i| &zeros[i] + mix_row(m_mat, g.neighbors(i), i, &y0[i], &nbr_y[i]) * self.s.rho)
                    .collect();
                for (i, u) in u0.iter().enumerate() {
                    mailbox.broadcast(g, i, 0, Tag::U, u);
                }
                let nbr_u = mailbox.deliver(g, 0, Tag::U)?;
                (u0, nbr_u)
            }
        };

        let agents = (0..n)
            .map(|i| AgentState {
                x: x0[i].clone(),
                y: y0[i].clone(),
                v: DVector::zeros(dd),
                z: DVector::zeros(dd),
                u: u0[i].clone(),
                sigma: DVector::zeros(dd),
                ytilde: DVector::zeros(dd),
                nbr_y: nbr_y[i].clone(),
                nbr_u: nbr_u[i].clone(),
                inner_iters: 0,
                inner_residual: 0.0,
                inner_converged: true,
            })
            .collect();
        Ok(NetworkState {
            k: 0,
            mode: self.s.exchange_mode,
            agents,
            sum_x: x0.iter().map(|x| DVector::zeros(x.len())).collect(),
            sum_y: vec![DVector::zeros(dd); n],
            x0,
            y0,
            cumulative_gs: DVector::zeros(dd),
            comm_init: mailbox.sent_reals(),
            comm_total: 0,
            inner_iters_total: 0,
            solver_failures: 0,
            moreau_residual: 0.0,
            complementarity: 0.0,
        })
    }

    fn local_update(&self, i: usize, agent: &AgentState, ytilde: DVector<f64>) -> LocalUpdate {
        let data = &self.pb.agents[i];
        let m = self.pb.m();
        let scale = self.s.p_d[i];
        let sp = LocalSubproblem { agent: data, shift: ytilde.clone(), scale, alpha: self.s.alpha, anchor: agent.x.clone() };
        let sol = solve_local(&sp, &agent.x, self.opts.tol, self.opts.max_iters);
        let gt = data.gtilde(&sol.x);
        let w = &ytilde + &gt;
        let scaled_y = project_dual_cone(&w, m);
        let sigma = -project_polar_cone(&w, m);
        let y = &scaled_y / scale;
        let dy = &y * scale;
        let moreau = (&dy - &sigma - &w).amax();
        let complementarity = dy.dot(&sigma).abs();
        LocalUpdate {
            gs: gt + &sigma,
            x: sol.x,
            y,
            sigma,
            ytilde,
            iters: sol.iters,
            residual: sol.residual,
            converged: sol.converged,
            moreau,
            complementarity,
        }
    }

    fn apply_updates(&self, st: &mut NetworkState, updates: Vec<LocalUpdate>) {
        let dd = self.pb.dual_dim();
        let mut gs_sum = DVector::zeros(dd);
        st.moreau_residual = 0.0;
        st.complementarity = 0.0;
        for (i, up) in updates.into_iter().enumerate() {
            let a = &mut st.agents[i];
            st.sum_x[i] += &up.x;
            st.sum_y[i] += &up.y;
            gs_sum += &up.gs;
            st.moreau_residual = st.moreau_residual.max(up.moreau);
            st.complementarity = st.complementarity.max(up.complementarity);
            st.inner_iters_total += up.iters as u64;
            if !up.converged {
                st.solver_failures += 1;
            }
            a.x = up.x;
            a.y = up.y;
            a.sigma = up.sigma;
            a.ytilde = up.ytilde;
            a.inner_iters = up.iters;
            a.inner_residual = up.residual;
            a.inner_converged = up.converged;
        }
        st.cumulative_gs += gs_sum;
        st.k += 1;
    }

    fn exchange(&self, st: &mut NetworkState, mailbox: &mut Mailbox, tag: Tag) -> Result<()> {
        let g = &self.s.graph;
        for (i, a) in st.agents.iter().enumerate() {
            let payload = match tag {
                Tag::Y => &a.y,
                Tag::U => &a.u,
            };
            mailbox.broadcast(g, i, st.k, tag, payload);
        }
        let received = mailbox.deliver(g, st.k, tag)?;
        for (a, r) in st.agents.iter_mut().zip(received) {
            match tag {
                Tag::Y => a.nbr_y = r,
                Tag::U => a.nbr_u = r,
            }
        }
        Ok(())
    }

    /// One round of the single-exchange form (one broadcast of `y`).
    pub fn single_exchange_round(&self, st: &NetworkState) -> Result<NetworkState> {
        if st.mode != ExchangeMode::Single || self.s.exchange_mode != ExchangeMode::Single {
            return Err(Error::AssumptionViolated("single exchange round on a double-exchange setting".into()));
        }
        let g = &self.s.graph;
        let rho = self.s.rho;
        let updates: Vec<LocalUpdate> = st
            .agents
            .par_iter()
            .enumerate()
            .map(|(i, a)| {
                let mix = mix_row(&self.s.p_h, g.neighbors(i), i, &a.y, &a.nbr_y);
                let ytilde = &a.y * self.s.p_d[i] - mix * rho - &a.v;
                self.local_update(i, a, ytilde)
            })
            .collect();
        let mut next = st.clone();
        self.apply_updates(&mut next, updates);
        let mut mailbox = Mailbox::new(self.pb.n_agents());
        self.exchange(&mut next, &mut mailbox, Tag::Y)?;
        for (i, a) in next.agents.iter_mut().enumerate() {
            let mix = mix_row(&self.s.p_htilde, g.neighbors(i), i, &a.y, &a.nbr_y);
            a.v += mix * rho;
        }
        next.comm_total += mailbox.sent_reals();
        Ok(next)
    }

    /// One round of the double-exchange form (broadcasts of `y`, then `u`).
    pub fn double_exchange_round(&self, st: &NetworkState) -> Result<NetworkState> {
        if st.mode != ExchangeMode::Double || self.s.exchange_mode != ExchangeMode::Double {
            return Err(Error::AssumptionViolated("double exchange round on a single-exchange setting".into()));
        }
        let g = &self.s.graph;
        let rho = self.s.rho;
        let l = self.s.l_matrix.as_ref().expect("checked in new");
        let m_mat = self.s.m_matrix.as_ref().expect("checked in new");
        let updates: Vec<LocalUpdate> = st
            .agents
            .par_iter()
            .enumerate()
            .map(|(i, a)| {
                let mix = mix_row(l, g.neighbors(i), i, &a.u, &a.nbr_u);
                let ytilde = &a.y * self.s.p_d[i] - mix;
                self.local_update(i, a, ytilde)
            })
            .collect();
        let mut next = st.clone();
        self.apply_updates(&mut next, updates);
        let mut mailbox = Mailbox::new(self.pb.n_agents());
        self.exchange(&mut next, &mut mailbox, Tag::Y)?;
        for (i, a) in next.agents.iter_mut().enumerate() {
            let z_old = a.z.clone();
            a.z += mix_row(l, g.neighbors(i), i, &a.y, &a.nbr_y) * rho;
            let base = match self.opts.tracking {
                TrackingUpdate::Tracking => &a.z,
                TrackingUpdate::StaleZ => &z_old,
            };
            a.u = base + mix_row(m_mat, g.neighbors(i), i, &a.y, &a.nbr_y) * rho;
        }
        self.exchange(&mut next, &mut mailbox, Tag::U)?;
        next.comm_total += mailbox.sent_reals();
        Ok(next)
    }

    pub fn step(&self, st: &NetworkState) -> Result<NetworkState> {
        match self.s.exchange_mode {
            ExchangeMode::Single => self.single_exchange_round(st),
            ExchangeMode::Double => self.double_exchange_round(st),
        }
    }

    /// Runs `rounds` rounds from `st`, calling `hook(prev, next)` after each.
    pub fn run<F>(&self, mut st: NetworkState, rounds: usize, mut hook: F) -> Result<NetworkState>
    where
        F: FnMut(&NetworkState, &NetworkState) -> Result<()>,
    {
        if rounds == 0 {
            return Err(Error::NoRounds);
        }
        for _ in 0..rounds {
            let next = self.step(&st)?;
            hook(&st, &next)?;
            st = next;
        }
        Ok(st)
    }
}

/// `Σ_{j ∈ N_i ∪ {i}} W_ij y_j` from the agent's own value and its inbox.
fn mix_row(
    w: &nalgebra::DMatrix<f64>,
    nbrs: &[usize],
    i: usize,
    own: &DVector<f64>,
    received: &[DVector<f64>],
) -> DVector<f64> {
    let mut acc = own * w[(i, i)];
    for (slot, &j) in nbrs.iter().enumerate() {
        acc.axpy(w[(i, j)], &received[slot], 1.0);
    }
    acc
}
