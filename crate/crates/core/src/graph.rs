//! Spatial graphs, Laplacians and Laplacian-eigenvector positional encodings.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::eigen::sym_eigen;
use crate::error::{Error, Result};
use crate::partition::partition_kway;
use crate::tensor::Tensor;

/// Undirected weighted graph over sensor locations.
///
/// Adjacency is kept as sorted neighbor lists; every edge is stored in both
/// endpoint lists with the same weight.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGraph {
    n: usize,
    coords: Option<Vec<[f64; 2]>>,
    neighbors: Vec<Vec<(usize, f64)>>,
    epsilon: Option<f64>,
}

impl SpatialGraph {
    /// Builds a graph from undirected edges listed once each.
    ///
    /// Zero-weight edges are dropped. Self-loops, duplicates, out-of-range ids
    /// and negative or non-finite weights are rejected.
    pub fn from_edges(n: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let mut neighbors = vec![Vec::new(); n];
        for &(a, b, w) in edges {
            if a >= n || b >= n {
                return Err(Error::Input(format!("edge ({a}, {b}) references a node outside 0..{n}")));
            }
            if a == b {
                return Err(Error::Input(format!("self-loop on node {a}")));
            }
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Input(format!("edge ({a}, {b}) has invalid weight {w}")));
            }
            if w == 0.0 {
                continue;
            }
            neighbors[a].push((b, w));
            neighbors[b].push((a, w));
        }
        for (node, list) in neighbors.iter_mut().enumerate() {
            list.sort_by_key(|&(j, _)| j);
            if list.windows(2).any(|p| p[0].0 == p[1].0) {
                return Err(Error::Input(format!("duplicate edge at node {node}")));
            }
        }
        Ok(Self { n, coords: None, neighbors, epsilon: None })
    }

    pub fn with_coords(mut self, coords: Vec<[f64; 2]>) -> Result<Self> {
        if coords.len() != self.n {
            return Err(Error::Input(format!("{} coordinates for {} nodes", coords.len(), self.n)));
        }
        self.coords = Some(coords);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn coords(&self) -> Option<&[[f64; 2]]> {
        self.coords.as_deref()
    }

    /// Distance threshold used by [`build_epsilon_graph`], when applicable.
    pub fn epsilon(&self) -> Option<f64> {
        self.epsilon
    }

    pub fn neighbors(&self, node: usize) -> &[(usize, f64)] {
        &self.neighbors[node]
    }

    pub fn weight(&self, a: usize, b: usize) -> f64 {
        self.neighbors[a].binary_search_by_key(&b, |&(j, _)| j).map_or(0.0, |at| self.neighbors[a][at].1)
    }

    pub fn degree(&self, node: usize) -> f64 {
        self.neighbors[node].iter().map(|&(_, w)| w).sum()
    }

    /// Each undirected edge once, as `(low, high, weight)` in lexicographic order.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for (a, list) in self.neighbors.iter().enumerate() {
            out.extend(list.iter().filter(|&&(b, _)| b > a).map(|&(b, w)| (a, b, w)));
        }
        out
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn total_weight(&self) -> f64 {
        self.edges().iter().map(|e| e.2).sum()
    }

    /// Component id per node, numbered in order of first appearance.
    pub fn components(&self) -> Vec<usize> {
        let mut comp = vec![usize::MAX; self.n];
        let mut next = 0;
        let mut queue = VecDeque::new();
        for start in 0..self.n {
            if comp[start] != usize::MAX {
                continue;
            }
            comp[start] = next;
            queue.push_back(start);
            while let Some(u) = queue.pop_front() {
                for &(v, _) in &self.neighbors[u] {
                    if comp[v] == usize::MAX {
                        comp[v] = next;
                        queue.push_back(v);
                    }
                }
            }
            next += 1;
        }
        comp
    }

    pub fn is_connected(&self) -> bool {
        self.n <= 1 || self.components().iter().all(|&c| c == 0)
    }

    /// Subgraph induced by `nodes`; node `i` of the result is `nodes[i]`.
    pub fn induced(&self, nodes: &[usize]) -> SpatialGraph {
        let mut local = vec![usize::MAX; self.n];
        for (i, &v) in nodes.iter().enumerate() {
            local[v] = i;
        }
        let neighbors = nodes
            .iter()
            .map(|&v| {
                let mut list: Vec<(usize, f64)> = self.neighbors[v]
                    .iter()
                    .filter(|&&(u, _)| local[u] != usize::MAX)
                    .map(|&(u, w)| (local[u], w))
                    .collect();
                list.sort_by_key(|&(j, _)| j);
                list
            })
            .collect();
        let coords = self.coords.as_ref().map(|c| nodes.iter().map(|&v| c[v]).collect());
        SpatialGraph { n: nodes.len(), coords, neighbors, epsilon: self.epsilon }
    }

    /// Relabels nodes so that old node `perm[i]` becomes new node `i`.
    pub fn permuted(&self, perm: &[usize]) -> SpatialGraph {
        self.induced(perm)
    }
}

fn check_coords(coords: &[[f64; 2]]) -> Result<()> {
    if coords.is_empty() {
        return Err(Error::Input("graph needs at least one node".into()));
    }
    if let Some(i) = coords.iter().position(|c| !c[0].is_finite() || !c[1].is_finite()) {
        return Err(Error::Input(format!("node {i} has non-finite coordinates")));
    }
    Ok(())
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (a[0] - b[0], a[1] - b[1]);
    dx * dx + dy * dy
}

/// Unit-weight edges between every pair closer than `epsilon`.
pub fn build_epsilon_graph(coords: &[[f64; 2]], epsilon: f64) -> Result<SpatialGraph> {
    check_coords(coords)?;
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::Input(format!("epsilon must be positive and finite, got {epsilon}")));
    }
    let mut edges = Vec::new();
    for i in 0..coords.len() {
        for j in i + 1..coords.len() {
            if libm::sqrt(dist2(coords[i], coords[j])) < epsilon {
                edges.push((i, j, 1.0));
            }
        }
    }
    let mut g = SpatialGraph::from_edges(coords.len(), &edges)?.with_coords(coords.to_vec())?;
    g.epsilon = Some(epsilon);
    Ok(g)
}

/// Thresholded Gaussian kernel weights `exp(-d²/σ²)`, kept when `≥ threshold`.
pub fn build_gaussian_graph(coords: &[[f64; 2]], sigma: f64, threshold: f64) -> Result<SpatialGraph> {
    check_coords(coords)?;
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Input(format!("sigma must be positive and finite, got {sigma}")));
    }
    if !(0.0..1.0).contains(&threshold) {
        return Err(Error::Input(format!("threshold must lie in [0, 1), got {threshold}")));
    }
    let mut edges = Vec::new();
    for i in 0..coords.len() {
        for j in i + 1..coords.len() {
            let w = libm::exp(-dist2(coords[i], coords[j]) / (sigma * sigma));
            if w >= threshold && w > 0.0 {
                edges.push((i, j, w));
            }
        }
    }
    SpatialGraph::from_edges(coords.len(), &edges)?.with_coords(coords.to_vec())
}

/// Combinatorial Laplacian `L = D − A` as a dense `n×n` tensor.
pub fn laplacian(g: &SpatialGraph) -> Tensor {
    let n = g.n();
    let mut l = Tensor::zeros(&[n, n]);
    let data = l.data_mut();
    for i in 0..n {
        for &(j, w) in g.neighbors(i) {
            data[i * n + j] = -w;
        }
        // Degree from the same weights so each row sums to zero.
        data[i * n + i] = g.neighbors(i).iter().map(|&(_, w)| w).sum();
    }
    l
}

/// Where a positional encoding's eigenvectors were computed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum PeSource {
    WholeGraph,
    PerSubgraph { blocks: usize },
}

/// One `k`-vector per node from Laplacian eigenvectors of the smallest eigenvalues.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalEncoding {
    pub k: usize,
    /// `n×k`, row `i` belongs to node `i`.
    pub vectors: Tensor,
    /// Eigenvalues per eigensolve block, ascending.
    pub eigenvalues: Vec<Vec<f64>>,
    /// Node ids per eigensolve block.
    pub blocks: Vec<Vec<usize>>,
    pub source: PeSource,
    pub warnings: Vec<String>,
}

/// Laplacian eigenvector encoding, solved blockwise when the graph exceeds `block_limit`.
pub fn laplacian_pe(g: &SpatialGraph, k: usize, block_limit: usize) -> Result<PositionalEncoding> {
    if k == 0 {
        return Err(Error::Input("positional encoding needs k >= 1".into()));
    }
    if block_limit < k + 1 {
        return Err(Error::Input(format!("block_limit {block_limit} must be at least k + 1 = {}", k + 1)));
    }
    let n = g.n();
    let (blocks, source) = if n <= block_limit {
        (vec![(0..n).collect::<Vec<_>>()], PeSource::WholeGraph)
    } else {
        let mut parts = n.div_ceil(block_limit);
        loop {
            let plan = partition_kway(g, parts, crate::partition::DEFAULT_BALANCE, 0)?;
            if plan.m <= block_limit {
                let blocks = plan.members();
                let count = blocks.len();
                break (blocks, PeSource::PerSubgraph { blocks: count });
            }
            parts += 1;
        }
    };

    let mut vectors = Tensor::zeros(&[n, k]);
    let mut eigenvalues = Vec::with_capacity(blocks.len());
    let mut warnings = Vec::new();
    for (b, nodes) in blocks.iter().enumerate() {
        let size = nodes.len();
        let k_block = k.min(size);
        if size < k + 1 {
            warnings
                .push(format!("block {b} has {size} nodes; using {k_block} of {k} eigenvectors, the rest zero-padded"));
        }
        let sub = if matches!(source, PeSource::WholeGraph) { g.clone() } else { g.induced(nodes) };
        let eig = sym_eigen(&laplacian(&sub), k_block)?;
        for (local, &node) in nodes.iter().enumerate() {
            for c in 0..k_block {
                vectors.set(&[node, c], eig.vectors.get(&[local, c]));
            }
        }
        eigenvalues.push(eig.values);
    }
    Ok(PositionalEncoding { k, vectors, eigenvalues, blocks, source, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epsilon_graph_thresholds() {
        let g = build_epsilon_graph(&[[0.0, 0.0], [0.5, 0.0]], 1.0).unwrap();
        assert_eq!(g.edges(), vec![(0, 1, 1.0)]);
        let g = build_epsilon_graph(&[[0.0, 0.0], [2.0, 0.0]], 1.0).unwrap();
        assert!(g.edges().is_empty());
        let line: Vec<[f64; 2]> = (0..4).map(|i| [f64::from(i), 0.0]).collect();
        let g = build_epsilon_graph(&line, 1.5).unwrap();
        assert_eq!(g.edges(), vec![(0, 1, 1.0), (1, 2, 1.0), (2, 3, 1.0)]);
        assert_eq!(g.epsilon(), Some(1.5));
    }

    #[test]
    fn epsilon_graph_rejects_bad_input() {
        assert!(build_epsilon_graph(&[[f64::NAN, 0.0]], 1.0).is_err());
        assert!(build_epsilon_graph(&[[0.0, 0.0]], 0.0).is_err());
    }

    #[test]
    fn gaussian_graph_weights() {
        let g = build_gaussian_graph(&[[1.0, 1.0], [1.0, 1.0]], 2.0, 0.5).unwrap();
        assert_eq!(g.weight(0, 1), 1.0);
        let g = build_gaussian_graph(&[[0.0, 0.0], [2.0, 0.0]], 2.0, 0.0).unwrap();
        assert!((g.weight(0, 1) - 0.367_879_441_171_442_3).abs() < 1e-15);
        // exp(-d²/σ²) = 0.1 at d = σ·√ln 10.
        let d = libm::sqrt(libm::log(10.0));
        let g = build_gaussian_graph(&[[0.0, 0.0], [d, 0.0]], 1.0, 0.2).unwrap();
        assert_eq!(g.weight(0, 1), 0.0);
        assert!(build_gaussian_graph(&[[0.0, 0.0]], 1.0, 1.0).is_err());
    }

    #[test]
    fn laplacian_examples() {
        let g = SpatialGraph::from_edges(2, &[(0, 1, 1.0)]).unwrap();
        assert_eq!(laplacian(&g).data(), &[1.0, -1.0, -1.0, 1.0]);
        let g = SpatialGraph::from_edges(1, &[]).unwrap();
        assert_eq!(laplacian(&g).data(), &[0.0]);
        let g = SpatialGraph::from_edges(3, &[(0, 1, 1.0), (1, 2, 1.0), (0, 2, 1.0)]).unwrap();
        let l = laplacian(&g);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(l.get(&[i, j]), if i == j { 2.0 } else { -1.0 });
            }
        }
    }

    #[test]
    fn from_edges_validation() {
        assert!(SpatialGraph::from_edges(2, &[(0, 0, 1.0)]).is_err());
        assert!(SpatialGraph::from_edges(2, &[(0, 2, 1.0)]).is_err());
        assert!(SpatialGraph::from_edges(2, &[(0, 1, -1.0)]).is_err());
        assert!(SpatialGraph::from_edges(2, &[(0, 1, 1.0), (1, 0, 1.0)]).is_err());
    }

    #[test]
    fn components_and_induced() {
        let g = SpatialGraph::from_edges(5, &[(0, 1, 1.0), (3, 4, 2.0)]).unwrap();
        assert_eq!(g.components(), vec![0, 0, 1, 2, 2]);
        assert!(!g.is_connected());
        let sub = g.induced(&[4, 3]);
        assert_eq!(sub.edges(), vec![(0, 1, 2.0)]);
    }

    #[test]
    fn pe_on_two_node_path() {
        let g = SpatialGraph::from_edges(2, &[(0, 1, 1.0)]).unwrap();
        let pe = laplacian_pe(&g, 1, 1000).unwrap();
        let s = 1.0 / libm::sqrt(2.0);
        assert!((pe.vectors.get(&[0, 0]) - s).abs() < 1e-12);
        assert!((pe.vectors.get(&[1, 0]) - s).abs() < 1e-12);
        assert_eq!(pe.source, PeSource::WholeGraph);
    }

    #[test]
    fn pe_whole_graph_matches_direct_eigensolve() {
        let g =
            SpatialGraph::from_edges(5, &[(0, 1, 1.0), (1, 2, 2.0), (2, 3, 1.0), (3, 4, 0.5), (0, 4, 1.0)]).unwrap();
        let pe = laplacian_pe(&g, 3, 1000).unwrap();
        let eig = sym_eigen(&laplacian(&g), 3).unwrap();
        assert_eq!(pe.vectors, eig.vectors);
    }

    #[test]
    fn pe_pads_small_blocks() {
        let g = SpatialGraph::from_edges(2, &[(0, 1, 1.0)]).unwrap();
        let pe = laplacian_pe(&g, 3, 4).unwrap();
        assert_eq!(pe.warnings.len(), 1);
        assert_eq!(pe.vectors.get(&[0, 2]), 0.0);
        assert!(laplacian_pe(&g, 3, 3).is_err());
    }
}
