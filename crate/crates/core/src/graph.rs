//! Undirected network topology and the directed-pair index used by the
//! message-passing layers.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::{Error, Result};

/// Edge list of the eight-node benchmark network.
pub const PAPER8_SRC: [usize; 8] = [0, 1, 2, 3, 0, 0, 5, 6];
pub const PAPER8_DST: [usize; 8] = [1, 2, 3, 4, 5, 3, 6, 7];

/// Undirected graph without self-loops.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GraphSpec", into = "GraphSpec")]
pub struct NetworkGraph {
    n_nodes: usize,
    edges: Vec<(usize, usize)>,
    adjacency: Tensor,
    neighbors: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GraphSpec {
    pub n_nodes: usize,
    pub edges: Vec<[usize; 2]>,
}

impl TryFrom<GraphSpec> for NetworkGraph {
    type Error = Error;

    fn try_from(spec: GraphSpec) -> Result<Self> {
        NetworkGraph::new(spec.n_nodes, spec.edges.iter().map(|e| (e[0], e[1])))
    }
}

impl From<NetworkGraph> for GraphSpec {
    fn from(g: NetworkGraph) -> Self {
        GraphSpec { n_nodes: g.n_nodes, edges: g.edges.iter().map(|&(s, d)| [s, d]).collect() }
    }
}

impl NetworkGraph {
    /// Builds the graph; each `(src, dst)` pair is an undirected edge.
    /// Duplicate pairs (in either orientation) collapse to one edge.
    pub fn new(n_nodes: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if n_nodes == 0 {
            return Err(Error::Argument("graph needs at least one node".into()));
        }
        let mut adjacency = Tensor::zeros(n_nodes, n_nodes);
        let mut kept = Vec::new();
        for (s, d) in edges {
            if s >= n_nodes || d >= n_nodes {
                return Err(Error::Argument(format!("edge ({s}, {d}) references a node outside 0..{n_nodes}")));
            }
            if s == d {
                return Err(Error::Argument(format!("self-loop on node {s}")));
            }
            if adjacency.get(s, d) == 0.0 {
                adjacency.set(s, d, 1.0);
                adjacency.set(d, s, 1.0);
                kept.push((s, d));
            }
        }
        let neighbors = (0..n_nodes)
            .map(|i| (0..n_nodes).filter(|&j| adjacency.get(i, j) == 1.0).collect())
            .collect();
        Ok(Self { n_nodes, edges: kept, adjacency, neighbors })
    }

    pub fn paper8() -> Self {
        Self::new(8, PAPER8_SRC.into_iter().zip(PAPER8_DST)).expect("static edge list is valid")
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Dense symmetric 0/1 matrix with zero diagonal.
    pub fn adjacency(&self) -> &Tensor {
        &self.adjacency
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    /// Copy with node `i` renamed to `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.n_nodes)?;
        Self::new(self.n_nodes, self.edges.iter().map(|&(s, d)| (perm[s], perm[d])))
    }

    /// Same topology without any edges.
    pub fn without_edges(&self) -> Self {
        Self::new(self.n_nodes, []).expect("edgeless graph is valid")
    }

    pub fn edge_index(&self) -> EdgeIndex {
        let mut targets = Vec::new();
        let mut sources = Vec::new();
        for i in 0..self.n_nodes {
            for &j in &self.neighbors[i] {
                targets.push(i);
                sources.push(j);
            }
        }
        let degree: Vec<f64> = (0..self.n_nodes).map(|i| self.degree(i) as f64).collect();
        EdgeIndex {
            n_rows: self.n_nodes,
            targets: targets.into(),
            sources: sources.into(),
            degree: degree.into(),
        }
    }
}

pub(crate) fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if perm.len() != n {
        return Err(Error::Argument(format!("permutation of length {} for {n} nodes", perm.len())));
    }
    for &p in perm {
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return Err(Error::Argument("not a permutation".into()));
        }
    }
    Ok(())
}

/// Ordered neighbor pairs `(target i, source j)` with `a_ij = 1`, in the
/// row layout of a (possibly batched) node-feature matrix.
///
/// Both orientations of every undirected edge are present, so summing
/// messages over `targets` aggregates each node's full neighborhood.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeIndex {
    n_rows: usize,
    targets: Arc<[usize]>,
    sources: Arc<[usize]>,
    degree: Arc<[f64]>,
}

impl EdgeIndex {
    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_pairs(&self) -> usize {
        self.targets.len()
    }

    pub fn targets(&self) -> &Arc<[usize]> {
        &self.targets
    }

    pub fn sources(&self) -> &Arc<[usize]> {
        &self.sources
    }

    /// Neighbor count per row.
    pub fn degree(&self) -> &Arc<[f64]> {
        &self.degree
    }

    /// Block-diagonal copy for `copies` stacked graphs.
    pub fn replicate(&self, copies: usize) -> Self {
        let shift = |v: &[usize]| -> Arc<[usize]> {
            (0..copies).flat_map(|b| v.iter().map(move |&i| i + b * self.n_rows)).collect()
        };
        EdgeIndex {
            n_rows: self.n_rows * copies,
            targets: shift(&self.targets),
            sources: shift(&self.sources),
            degree: (0..copies).flat_map(|_| self.degree.iter().copied()).collect(),
        }
    }
}
