//! Coupled-constraint problem instances.
//!
//! Each agent `i` owns
//! `f_i(x) = xᵀP_i x + Q_iᵀx + ‖x‖₁`,
//! inequality terms `g_ij(x) = ‖x − a'_ij‖² − c'_ij`,
//! an affine map `h_i(x) = B_i x + c_i^eq`,
//! and a ball `X_i = {x : ‖x − a_i‖² ≤ c_i}`.
//! The network must satisfy `Σ_i g_i(x_i) ≤ 0` and `Σ_i h_i(x_i) = 0`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{matrix_from_rows, matrix_rows};

/// One squared-distance inequality term `‖x − center‖² − offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct SquaredDistance {
    pub center: DVector<f64>,
    pub offset: f64,
}

impl SquaredDistance {
    pub fn value(&self, x: &DVector<f64>) -> f64 {
        (x - &self.center).norm_squared() - self.offset
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        (x - &self.center) * 2.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub ineq: Vec<SquaredDistance>,
    pub b: DMatrix<f64>,
    pub c_eq: DVector<f64>,
    pub ball_center: DVector<f64>,
    pub ball_radius_sq: f64,
}

impl Agent {
    pub fn dim(&self) -> usize {
        self.q.len()
    }

    pub fn m(&self) -> usize {
        self.ineq.len()
    }

    pub fn p_count(&self) -> usize {
        self.c_eq.len()
    }

    /// Smooth part `xᵀPx + Qᵀx`.
    pub fn smooth_value(&self, x: &DVector<f64>) -> f64 {
        x.dot(&(&self.p * x)) + self.q.dot(x)
    }

    pub fn smooth_gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        (&self.p * x) * 2.0 + &self.q
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        self.smooth_value(x) + x.lp_norm(1)
    }

    /// `2Px + Q + sign(x)` with `sign(0) = 0`.
    pub fn subgradient(&self, x: &DVector<f64>) -> DVector<f64> {
        self.smooth_gradient(x) + x.map(sign0)
    }

    pub fn g(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.m(), self.ineq.iter().map(|t| t.value(x)))
    }

    pub fn h(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.b * x + &self.c_eq
    }

    /// Local constraint stack `[g_i(x); h_i(x)]`.
    pub fn gtilde(&self, x: &DVector<f64>) -> DVector<f64> {
        let g = self.g(x);
        let h = self.h(x);
        DVector::from_iterator(g.len() + h.len(), g.iter().chain(h.iter()).copied())
    }

    pub fn ball_violation(&self, x: &DVector<f64>) -> f64 {
        (x - &self.ball_center).norm_squared() - self.ball_radius_sq
    }

    pub fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        project_ball(&self.ball_center, self.ball_radius_sq, x)
    }

    fn check_dim(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimMismatch { expected: self.dim(), got: x.len() });
        }
        Ok(())
    }
}

fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Euclidean projection onto `{x : ‖x − a‖² ≤ c}`.
pub fn project_ball(a: &DVector<f64>, c: f64, x: &DVector<f64>) -> DVector<f64> {
    let diff = x - a;
    let dist_sq = diff.norm_squared();
    if dist_sq <= c {
        return x.clone();
    }
    a + diff * (c.sqrt() / dist_sq.sqrt())
}

/// Concatenation of per-agent decision vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedPoint {
    pub blocks: Vec<DVector<f64>>,
}

impl StackedPoint {
    pub fn zeros(pb: &Problem) -> Self {
        StackedPoint { blocks: pb.agents.iter().map(|a| DVector::zeros(a.dim())).collect() }
    }

    pub fn block(&self, i: usize) -> &DVector<f64> {
        &self.blocks[i]
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.blocks.iter().flat_map(|b| b.iter().copied()).collect()
    }

    pub fn distance_sq(&self, other: &StackedPoint) -> f64 {
        self.blocks.iter().zip(&other.blocks).map(|(a, b)| (a - b).norm_squared()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub agents: Vec<Agent>,
    m: usize,
    p: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlaterReport {
    pub sum_g: Vec<f64>,
    pub sum_h_norm: f64,
    /// `c_i − ‖a_i‖²` per agent; positive means 0 is interior to `X_i`.
    pub ball_margins: Vec<f64>,
    pub pass: bool,
}

impl Problem {
    pub fn new(agents: Vec<Agent>) -> Result<Self> {
        let first = agents.first().ok_or_else(|| Error::Format("no agents".into()))?;
        let (m, p) = (first.m(), first.p_count());
        for a in &agents {
            let d = a.dim();
            let shapes_ok = a.m() == m
                && a.p_count() == p
                && a.p.nrows() == d
                && a.p.ncols() == d
                && a.b.nrows() == p
                && a.b.ncols() == d
                && a.ball_center.len() == d
                && a.ineq.iter().all(|t| t.center.len() == d);
            if !shapes_ok {
                return Err(Error::Format("inconsistent agent dimensions".into()));
            }
        }
        Ok(Problem { agents, m, p })
    }

    /// Random instance of the quadratic + ℓ1 family with ball sets; `x = 0`
    /// is a Slater point by construction and `h_i(x) = B_i x`.
    pub fn generate_example(n: usize, d: usize, m: usize, p: usize, seed: u64) -> Self {
        Self::generate_example_scaled(n, d, m, p, seed, 1.0)
    }

    /// Same family with `Q_i` drawn from `(−q_range, q_range)`. With
    /// `q_range ≤ 1` the ℓ1 term dominates the linear term and `x* = 0`.
    pub fn generate_example_scaled(n: usize, d: usize, m: usize, p: usize, seed: u64, q_range: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let uniform_vec =
            |rng: &mut ChaCha8Rng, len: usize| DVector::from_fn(len, |_, _| rng.gen_range(-1.0..1.0));
        let scale = 1.0 / (d as f64).sqrt();
        let agents = (0..n)
            .map(|_| {
                let r = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0) * scale);
                let p_mat = r.transpose() * &r;
                let q = uniform_vec(&mut rng, d) * q_range;
                let ball_center = uniform_vec(&mut rng, d);
                let ball_radius_sq = ball_center.norm_squared() + rng.gen_range(0.5..1.5);
                let ineq = (0..m)
                    .map(|_| {
                        let center = uniform_vec(&mut rng, d);
                        let offset = center.norm_squared() + rng.gen_range(0.5..1.5);
                        SquaredDistance { center, offset }
                    })
                    .collect();
                let b = DMatrix::from_fn(p, d, |_, _| rng.gen_range(-1.0..1.0));
                Agent {
                    p: (&p_mat + p_mat.transpose()) * 0.5,
                    q,
                    ineq,
                    b,
                    c_eq: DVector::zeros(p),
                    ball_center,
                    ball_radius_sq,
                }
            })
            .collect();
        Problem::new(agents).expect("generated dimensions are consistent")
    }

    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn p(&self) -> usize {
        self.p
    }

    /// Length of each agent's dual block.
    pub fn dual_dim(&self) -> usize {
        self.m + self.p
    }

    pub fn total_dim(&self) -> usize {
        self.agents.iter().map(Agent::dim).sum()
    }

    fn check_point(&self, x: &StackedPoint) -> Result<()> {
        if x.blocks.len() != self.n_agents() {
            return Err(Error::DimMismatch { expected: self.n_agents(), got: x.blocks.len() });
        }
        for (a, xi) in self.agents.iter().zip(&x.blocks) {
            a.check_dim(xi)?;
        }
        Ok(())
    }

    pub fn eval_objective(&self, x: &StackedPoint) -> Result<f64> {
        self.check_point(x)?;
        Ok(self.agents.iter().zip(&x.blocks).map(|(a, xi)| a.objective(xi)).sum())
    }

    /// Per-agent `[g_i(x_i); h_i(x_i)]` blocks in agent order.
    pub fn eval_gtilde(&self, x: &StackedPoint) -> Result<Vec<DVector<f64>>> {
        self.check_point(x)?;
        Ok(self.agents.iter().zip(&x.blocks).map(|(a, xi)| a.gtilde(xi)).collect())
    }

    pub fn subgradient_f(&self, i: usize, x_i: &DVector<f64>) -> Result<DVector<f64>> {
        self.agents[i].check_dim(x_i)?;
        Ok(self.agents[i].subgradient(x_i))
    }

    /// `Σ_i g_i(x_i)`.
    pub fn sum_g(&self, x: &StackedPoint) -> DVector<f64> {
        self.agents
            .iter()
            .zip(&x.blocks)
            .fold(DVector::zeros(self.m), |acc, (a, xi)| acc + a.g(xi))
    }

    /// `Σ_i h_i(x_i)`.
    pub fn sum_h(&self, x: &StackedPoint) -> DVector<f64> {
        self.agents
            .iter()
            .zip(&x.blocks)
            .fold(DVector::zeros(self.p), |acc, (a, xi)| acc + a.h(xi))
    }

    /// `‖[Σg]_+ ; Σh‖`.
    pub fn coupled_violation(&self, x: &StackedPoint) -> f64 {
        let g = self.sum_g(x).map(|v| v.max(0.0));
        (g.norm_squared() + self.sum_h(x).norm_squared()).sqrt()
    }

    /// Local ball excess plus coupled inequality excess plus `‖Σh‖`.
    pub fn constraint_violation(&self, x: &StackedPoint) -> f64 {
        let local: f64 =
            self.agents.iter().zip(&x.blocks).map(|(a, xi)| a.ball_violation(xi).max(0.0)).sum();
        let ineq: f64 = self.sum_g(x).iter().map(|v| v.max(0.0)).sum();
        local + ineq + self.sum_h(x).norm()
    }

    /// Slater check at the candidate point `x̃ = 0`.
    pub fn slater_check(&self) -> SlaterReport {
        let zero = StackedPoint::zeros(self);
        let sum_g = self.sum_g(&zero);
        let sum_h_norm = self.sum_h(&zero).norm();
        let ball_margins: Vec<f64> =
            self.agents.iter().map(|a| -a.ball_violation(&DVector::zeros(a.dim()))).collect();
        let pass = sum_g.iter().all(|v| *v < 0.0)
            && sum_h_norm <= 1e-10
            && ball_margins.iter().all(|v| *v > 0.0);
        SlaterReport { sum_g: sum_g.iter().copied().collect(), sum_h_norm, ball_margins, pass }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ProblemDoc::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ProblemDoc = serde_json::from_str(text)?;
        doc.try_into()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct ProblemDoc {
    n_agents: usize,
    m: usize,
    p: usize,
    dims: Vec<usize>,
    agents: Vec<AgentDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AgentDoc {
    p_matrix: Vec<Vec<f64>>,
    q: Vec<f64>,
    ineq_centers: Vec<Vec<f64>>,
    ineq_offsets: Vec<f64>,
    b_matrix: Vec<Vec<f64>>,
    c_eq: Vec<f64>,
    ball_center: Vec<f64>,
    ball_radius_sq: f64,
}

impl From<&Problem> for ProblemDoc {
    fn from(pb: &Problem) -> Self {
        ProblemDoc {
            n_agents: pb.n_agents(),
            m: pb.m,
            p: pb.p,
            dims: pb.agents.iter().map(Agent::dim).collect(),
            agents: pb
                .agents
                .iter()
                .map(|a| AgentDoc {
                    p_matrix: matrix_rows(&a.p),
                    q: a.q.iter().copied().collect(),
                    ineq_centers: a.ineq.iter().map(|t| t.center.iter().copied().collect()).collect(),
                    ineq_offsets: a.ineq.iter().map(|t| t.offset).collect(),
                    b_matrix: matrix_rows(&a.b),
                    c_eq: a.c_eq.iter().copied().collect(),
                    ball_center: a.ball_center.iter().copied().collect(),
                    ball_radius_sq: a.ball_radius_sq,
                })
                .collect(),
        }
    }
}

impl TryFrom<ProblemDoc> for Problem {
    type Error = Error;
    fn try_from(doc: ProblemDoc) -> Result<Self> {
        if doc.agents.len() != doc.n_agents || doc.dims.len() != doc.n_agents {
            return Err(Error::Format("agent count mismatch".into()));
        }
        let bad = |what: &str| Error::Format(format!("bad shape for {what}"));
        let agents = doc
            .agents
            .into_iter()
            .zip(&doc.dims)
            .map(|(a, &d)| {
                if a.ineq_centers.len() != a.ineq_offsets.len() {
                    return Err(bad("inequality data"));
                }
                Ok(Agent {
                    p: matrix_from_rows(&a.p_matrix, d).ok_or_else(|| bad("p_matrix"))?,
                    q: DVector::from_vec(a.q),
                    ineq: a
                        .ineq_centers
                        .into_iter()
                        .zip(a.ineq_offsets)
                        .map(|(c, offset)| SquaredDistance { center: DVector::from_vec(c), offset })
                        .collect(),
                    b: if doc.p == 0 {
                        DMatrix::zeros(0, d)
                    } else {
                        matrix_from_rows(&a.b_matrix, d).ok_or_else(|| bad("b_matrix"))?
                    },
                    c_eq: DVector::from_vec(a.c_eq),
                    ball_center: DVector::from_vec(a.ball_center),
                    ball_radius_sq: a.ball_radius_sq,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let pb = Problem::new(agents)?;
        if pb.m != doc.m || pb.p != doc.p {
            return Err(Error::Format("constraint counts disagree with agent data".into()));
        }
        Ok(pb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec(v: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(v)
    }

    fn scalar_agent() -> Agent {
        Agent {
            p: DMatrix::zeros(1, 1),
            q: vec(&[0.0]),
            ineq: vec![SquaredDistance { center: vec(&[0.0]), offset: 1.0 }],
            b: DMatrix::from_element(1, 1, 2.0),
            c_eq: vec(&[0.0]),
            ball_center: vec(&[0.0]),
            ball_radius_sq: 4.0,
        }
    }

    #[test]
    fn generated_sizes_and_slater() {
        let pb = Problem::generate_example(20, 3, 1, 5, 11);
        assert_eq!(pb.n_agents(), 20);
        assert_eq!(pb.m(), 1);
        assert_eq!(pb.p(), 5);
        assert!(pb.agents.iter().all(|a| a.dim() == 3));
        let slack: f64 = pb
            .agents
            .iter()
            .map(|a| a.ineq[0].offset - a.ineq[0].center.norm_squared())
            .sum();
        assert!(slack > 0.0);
        let report = pb.slater_check();
        assert!(report.pass);
        assert!(report.sum_g.iter().all(|v| *v < 0.0));
        assert_eq!(report.sum_h_norm, 0.0);
    }

    #[test]
    fn objective_examples() {
        let pb = Problem::generate_example(4, 3, 1, 2, 0);
        assert_eq!(pb.eval_objective(&StackedPoint::zeros(&pb)).unwrap(), 0.0);
        let a = Agent {
            p: DMatrix::identity(2, 2),
            q: vec(&[0.0, 0.0]),
            ineq: vec![],
            b: DMatrix::zeros(0, 2),
            c_eq: DVector::zeros(0),
            ball_center: vec(&[0.0, 0.0]),
            ball_radius_sq: 1.0,
        };
        assert_eq!(a.objective(&vec(&[1.0, -1.0])), 4.0);
        let bad = StackedPoint { blocks: vec![DVector::zeros(2); 4] };
        assert!(matches!(pb.eval_objective(&bad), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn gtilde_examples() {
        let pb = Problem::new(vec![scalar_agent()]).unwrap();
        let out = pb.eval_gtilde(&StackedPoint { blocks: vec![vec(&[1.0])] }).unwrap();
        assert_eq!(out[0], vec(&[0.0, 2.0]));

        let gen = Problem::generate_example(5, 3, 1, 2, 4);
        let zero = gen.eval_gtilde(&StackedPoint::zeros(&gen)).unwrap();
        for (a, blk) in gen.agents.iter().zip(&zero) {
            let expect = a.ineq[0].center.norm_squared() - a.ineq[0].offset;
            assert!((blk[0] - expect).abs() < 1e-15);
        }

        // Swapping two agents swaps the output blocks.
        let x = StackedPoint {
            blocks: (0..5).map(|i| DVector::from_element(3, 0.1 * i as f64)).collect(),
        };
        let base = gen.eval_gtilde(&x).unwrap();
        let mut agents = gen.agents.clone();
        agents.swap(1, 3);
        let swapped_pb = Problem::new(agents).unwrap();
        let mut xs = x.clone();
        xs.blocks.swap(1, 3);
        let swapped = swapped_pb.eval_gtilde(&xs).unwrap();
        assert_eq!(swapped[1], base[3]);
        assert_eq!(swapped[3], base[1]);
    }

    #[test]
    fn projection_examples() {
        assert_eq!(project_ball(&vec(&[0.0, 0.0]), 1.0, &vec(&[2.0, 0.0])), vec(&[1.0, 0.0]));
        let inside = vec(&[0.3, -0.2]);
        assert_eq!(project_ball(&vec(&[0.0, 0.0]), 1.0, &inside), inside);
        assert_eq!(project_ball(&vec(&[1.0, 1.0]), 4.0, &vec(&[5.0, 1.0])), vec(&[3.0, 1.0]));
    }

    #[test]
    fn subgradient_examples() {
        let mut a = scalar_agent();
        a.p = DMatrix::zeros(3, 3);
        a.q = DVector::zeros(3);
        assert_eq!(a.subgradient(&vec(&[1.0, -2.0, 0.0])), vec(&[1.0, -1.0, 0.0]));
        a.p = DMatrix::identity(3, 3);
        a.q = DVector::from_element(3, 1.0);
        assert_eq!(a.subgradient(&DVector::zeros(3)), a.q);
    }

    #[test]
    fn smooth_gradient_matches_central_differences() {
        let pb = Problem::generate_example(3, 3, 1, 2, 9);
        let h = 1e-6;
        for a in &pb.agents {
            let x = vec(&[0.3, -0.7, 0.2]);
            let g = a.smooth_gradient(&x);
            for k in 0..3 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[k] += h;
                xm[k] -= h;
                let fd = (a.smooth_value(&xp) - a.smooth_value(&xm)) / (2.0 * h);
                assert!((fd - g[k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn slater_failures() {
        let mut pb = Problem::generate_example(3, 2, 1, 1, 2);
        pb.agents[0].ball_radius_sq = pb.agents[0].ball_center.norm_squared();
        assert!(!pb.slater_check().pass);

        let mut pb = Problem::generate_example(3, 2, 1, 1, 2);
        pb.agents[1].c_eq = vec(&[0.5]);
        let report = pb.slater_check();
        assert!(!report.pass && report.sum_h_norm > 0.4);
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let pb = Problem::generate_example(6, 3, 2, 3, 5);
        let text = pb.to_json().unwrap();
        let back = Problem::from_json(&text).unwrap();
        assert_eq!(pb, back);
        assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn generator_is_reproducible() {
        let a = Problem::generate_example(5, 3, 1, 5, 42);
        let b = Problem::generate_example(5, 3, 1, 5, 42);
        assert_eq!(a, b);
        assert_ne!(a, Problem::generate_example(5, 3, 1, 5, 43));
    }
}
