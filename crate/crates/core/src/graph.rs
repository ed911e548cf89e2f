//! Agent communication topology and the two weight families built on it.
//!
//! Agents are 0-indexed here. Files and messages use 1-based indices and
//! convert through [`Graph::from_one_based`].

use std::collections::{BTreeSet, VecDeque};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Connected, undirected, self-arced graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    n_agents: usize,
    edges: BTreeSet<(usize, usize)>,
    // Sorted neighbor lists, each including the node itself.
    neighbors: Vec<Vec<usize>>,
}

impl Graph {
    /// Builds a graph from 0-based undirected edges.
    pub fn new(n_agents: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if n_agents == 0 {
            return Err(Error::config("graph.n_agents", "must be at least 1"));
        }
        let mut set = BTreeSet::new();
        for &(i, j) in edges {
            for k in [i, j] {
                if k >= n_agents {
                    return Err(Error::IndexOutOfRange {
                        index: k + 1,
                        n_agents,
                    });
                }
            }
            if i == j {
                return Err(Error::config(
                    "graph.edges",
                    format!("self-loop ({}, {}) given explicitly; self-arcs are implicit", i + 1, j + 1),
                ));
            }
            set.insert((i.min(j), i.max(j)));
        }
        let mut neighbors: Vec<Vec<usize>> = (0..n_agents).map(|i| vec![i]).collect();
        for &(i, j) in &set {
            neighbors[i].push(j);
            neighbors[j].push(i);
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }
        let graph = Graph {
            n_agents,
            edges: set,
            neighbors,
        };
        if !graph.is_connected() {
            return Err(Error::DisconnectedGraph { n_agents });
        }
        Ok(graph)
    }

    /// Builds a graph from 1-based edges, as written in config files.
    pub fn from_one_based(n_agents: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut zero = Vec::with_capacity(edges.len());
        for &(i, j) in edges {
            for k in [i, j] {
                if k == 0 || k > n_agents {
                    return Err(Error::IndexOutOfRange { index: k, n_agents });
                }
            }
            zero.push((i - 1, j - 1));
        }
        Self::new(n_agents, &zero)
    }

    pub fn ring(n_agents: usize) -> Result<Self> {
        let edges: Vec<_> = match n_agents {
            0 | 1 => vec![],
            2 => vec![(0, 1)],
            n => (0..n).map(|i| (i, (i + 1) % n)).collect(),
        };
        Self::new(n_agents, &edges)
    }

    pub fn complete(n_agents: usize) -> Result<Self> {
        let mut edges = Vec::new();
        for i in 0..n_agents {
            for j in (i + 1)..n_agents {
                edges.push((i, j));
            }
        }
        Self::new(n_agents, &edges)
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    /// Undirected edges as 0-based `(i, j)` with `i < j`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    /// Neighbor set of `i`, including `i` itself.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    /// Number of neighbors excluding the self-arc.
    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len() - 1
    }

    pub fn is_regular(&self) -> bool {
        (1..self.n_agents).all(|i| self.degree(i) == self.degree(0))
    }

    fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.n_agents];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(i) = queue.pop_front() {
            for &j in &self.neighbors[i] {
                if !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// Symmetric weights `w_ij` of the matrix-consensus update, with `d_i = sum_j w_ij`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusWeights {
    pub w: DMatrix<f64>,
    pub d: DVector<f64>,
}

impl ConsensusWeights {
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.w[(i, j)]
    }
}

/// `w_ij = 1` on every neighbor pair (self-arc included).
pub fn uniform_consensus_weights(g: &Graph) -> ConsensusWeights {
    let n = g.n_agents();
    let mut w = DMatrix::zeros(n, n);
    for i in 0..n {
        for &j in g.neighbors(i) {
            w[(i, j)] = 1.0;
        }
    }
    let d = DVector::from_iterator(n, (0..n).map(|i| w.row(i).sum()));
    ConsensusWeights { w, d }
}

/// Doubly stochastic mixing matrix for the parameter update.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingWeights {
    pub w_hat: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MixingRule {
    #[default]
    Metropolis,
    UniformRows,
}

/// Metropolis-Hastings weights: doubly stochastic on any connected graph.
pub fn metropolis_weights(g: &Graph) -> MixingWeights {
    let n = g.n_agents();
    let mut w_hat = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut off = 0.0;
        for &j in g.neighbors(i) {
            if j != i {
                let wij = 1.0 / (1.0 + g.degree(i).max(g.degree(j)) as f64);
                w_hat[(i, j)] = wij;
                off += wij;
            }
        }
        w_hat[(i, i)] = 1.0 - off;
    }
    MixingWeights { w_hat }
}

/// Equal weights `1/|N_i|` per row. Doubly stochastic only on regular graphs,
/// so anything else is rejected.
pub fn uniform_row_weights(g: &Graph) -> Result<MixingWeights> {
    if !g.is_regular() {
        return Err(Error::config(
            "graph.mixing",
            "uniform-rows is only doubly stochastic on regular graphs; use metropolis",
        ));
    }
    let n = g.n_agents();
    let mut w_hat = DMatrix::zeros(n, n);
    for i in 0..n {
        let share = 1.0 / g.neighbors(i).len() as f64;
        for &j in g.neighbors(i) {
            w_hat[(i, j)] = share;
        }
    }
    Ok(MixingWeights { w_hat })
}

pub fn mixing_weights(g: &Graph, rule: MixingRule) -> Result<MixingWeights> {
    match rule {
        MixingRule::Metropolis => Ok(metropolis_weights(g)),
        MixingRule::UniformRows => uniform_row_weights(g),
    }
}

impl MixingWeights {
    pub fn is_doubly_stochastic(&self, tol: f64) -> bool {
        let n = self.w_hat.nrows();
        (0..n).all(|i| {
            (self.w_hat.row(i).sum() - 1.0).abs() <= tol
                && (self.w_hat.column(i).sum() - 1.0).abs() <= tol
        }) && self.w_hat.iter().all(|&x| x >= 0.0)
    }

    /// Second-largest eigenvalue magnitude. Below one means repeated mixing
    /// drives every agent to the average.
    pub fn second_largest_eigen_magnitude(&self) -> f64 {
        let n = self.w_hat.nrows();
        if n < 2 {
            return 0.0;
        }
        let sym = (&self.w_hat + self.w_hat.transpose()) * 0.5;
        let mut mags: Vec<f64> = SymmetricEigen::new(sym)
            .eigenvalues
            .iter()
            .map(|l| l.abs())
            .collect();
        mags.sort_by(|a, b| b.total_cmp(a));
        mags[1]
    }
}
