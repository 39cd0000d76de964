//! Undirected communication topologies and Laplacian-type weight matrices.

use std::collections::{BTreeSet, VecDeque};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Connected undirected graph without self-loops.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "GraphDoc", into = "GraphDoc")]
pub struct Graph {
    n: usize,
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct GraphDoc {
    n_nodes: usize,
    edges: Vec<(usize, usize)>,
}

impl TryFrom<GraphDoc> for Graph {
    type Error = Error;
    fn try_from(doc: GraphDoc) -> Result<Self> {
        Graph::new(doc.n_nodes, &doc.edges)
    }
}

impl From<Graph> for GraphDoc {
    fn from(g: Graph) -> Self {
        GraphDoc { n_nodes: g.n, edges: g.edges }
    }
}

impl Graph {
    /// Builds a graph from an edge list; duplicates, self-loops, out-of-range
    /// indices and disconnected inputs are rejected.
    pub fn new(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidEdge(0, 0, 0));
        }
        let mut set = BTreeSet::new();
        for &(a, b) in edges {
            if a >= n || b >= n || a == b {
                return Err(Error::InvalidEdge(a, b, n));
            }
            if !set.insert((a.min(b), a.max(b))) {
                return Err(Error::InvalidEdge(a, b, n));
            }
        }
        let edges: Vec<(usize, usize)> = set.into_iter().collect();
        let mut neighbors = vec![Vec::new(); n];
        for &(a, b) in &edges {
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }
        let g = Graph { n, edges, neighbors };
        if let Some(node) = g.first_unreachable() {
            return Err(Error::Disconnected(node));
        }
        Ok(g)
    }

    /// Random connected graph: a uniform spanning tree from a random Prüfer
    /// sequence, then uniformly chosen extra edges up to `n_edges`.
    pub fn random_connected(n: usize, n_edges: usize, seed: u64) -> Result<Self> {
        let max_edges = n * (n - 1) / 2;
        if n == 0 || n_edges + 1 < n || n_edges > max_edges {
            return Err(Error::Format(format!(
                "cannot build a connected graph with {n} nodes and {n_edges} edges"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut edges = BTreeSet::new();
        if n == 2 {
            edges.insert((0, 1));
        } else if n > 2 {
            let prufer: Vec<usize> = (0..n - 2).map(|_| rng.gen_range(0..n)).collect();
            for (a, b) in prufer_to_edges(n, &prufer) {
                edges.insert((a.min(b), a.max(b)));
            }
        }
        let mut candidates: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .filter(|e| !edges.contains(e))
            .collect();
        candidates.shuffle(&mut rng);
        let missing = n_edges - edges.len();
        edges.extend(candidates.into_iter().take(missing));
        let list: Vec<_> = edges.into_iter().collect();
        Graph::new(n, &list)
    }

    pub fn n_nodes(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.neighbors[i].binary_search(&j).is_ok()
    }

    fn first_unreachable(&self) -> Option<usize> {
        let mut seen = vec![false; self.n];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(u) = queue.pop_front() {
            for &v in &self.neighbors[u] {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        seen.iter().position(|s| !s)
    }

    /// True when `m` is zero off the graph (diagonal allowed).
    pub fn is_compatible(&self, m: &DMatrix<f64>) -> bool {
        (0..self.n).all(|i| {
            (0..self.n).all(|j| i == j || self.has_edge(i, j) || m[(i, j)] == 0.0)
        })
    }
}

fn prufer_to_edges(n: usize, seq: &[usize]) -> Vec<(usize, usize)> {
    let mut degree = vec![1usize; n];
    for &s in seq {
        degree[s] += 1;
    }
    let mut leaves: BTreeSet<usize> = (0..n).filter(|&i| degree[i] == 1).collect();
    let mut edges = Vec::with_capacity(n - 1);
    for &s in seq {
        let leaf = *leaves.iter().next().expect("prufer leaf");
        leaves.remove(&leaf);
        edges.push((leaf, s));
        degree[s] -= 1;
        if degree[s] == 1 {
            leaves.insert(s);
        }
    }
    let rest: Vec<usize> = leaves.into_iter().collect();
    edges.push((rest[0], rest[1]));
    edges
}

/// Laplacian-type matrix with Metropolis weights:
/// off-diagonal `-1/(max(deg_i, deg_j) + 1)` on edges, rows summing to zero.
pub fn metropolis_matrix(g: &Graph) -> DMatrix<f64> {
    let n = g.n_nodes();
    let mut m = DMatrix::zeros(n, n);
    for &(i, j) in g.edges() {
        let w = -1.0 / (g.degree(i).max(g.degree(j)) as f64 + 1.0);
        m[(i, j)] = w;
        m[(j, i)] = w;
    }
    set_laplacian_diagonal(&mut m);
    m
}

/// Laplacian-type matrix with a constant off-diagonal value on every edge.
pub fn uniform_laplacian(g: &Graph, off_diagonal: f64) -> DMatrix<f64> {
    let n = g.n_nodes();
    let mut m = DMatrix::zeros(n, n);
    for &(i, j) in g.edges() {
        m[(i, j)] = off_diagonal;
        m[(j, i)] = off_diagonal;
    }
    set_laplacian_diagonal(&mut m);
    m
}

fn set_laplacian_diagonal(m: &mut DMatrix<f64>) {
    for i in 0..m.nrows() {
        let off: f64 = (0..m.ncols()).filter(|&j| j != i).map(|j| m[(i, j)]).sum();
        m[(i, i)] = -off;
    }
}

/// Graph Laplacian `Λ − W` of a nonnegative symmetric weight matrix with
/// `ℓ_i = Σ_j w_ij` (the diagonal weight cancels).
pub fn laplacian_from_weights(w: &DMatrix<f64>, g: &Graph) -> Result<DMatrix<f64>> {
    let n = g.n_nodes();
    if w.nrows() != n || w.ncols() != n {
        return Err(Error::DimMismatch { expected: n, got: w.nrows() });
    }
    for i in 0..n {
        for j in 0..n {
            let v = w[(i, j)];
            let ok = if i == j {
                v >= 0.0
            } else if g.has_edge(i, j) {
                v > 0.0 && v == w[(j, i)]
            } else {
                v == 0.0
            };
            if !ok {
                return Err(Error::PatternMismatch(i, j));
            }
        }
    }
    let mut l = -w.clone();
    for i in 0..n {
        let row_sum: f64 = w.row(i).sum();
        l[(i, i)] = row_sum - w[(i, i)];
    }
    Ok(l)
}
