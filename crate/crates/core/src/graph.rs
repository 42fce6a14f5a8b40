//! Undirected weighted interaction graphs and their Laplacian-like weight matrix.
//!
//! The weight matrix `L` has nonnegative off-diagonal weights and a diagonal
//! chosen so every row sums to zero. A graph is accepted only if it is
//! connected and `||I + L - 11'/m|| < 1`.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Redraw budget for [`random_connected_graph`].
pub const MAX_GRAPH_REDRAWS: usize = 100;

/// One undirected edge, 0-indexed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub weight: f64,
}

impl Edge {
    pub fn new(a: usize, b: usize, weight: f64) -> Self {
        Self { a, b, weight }
    }
}

#[derive(Debug, Clone)]
pub struct InteractionGraph {
    weights: DMatrix<f64>,
    neighbors: Vec<Vec<(usize, f64)>>,
    /// Ascending: `eigenvalues[0]` is the most negative, the last entry is the zero eigenvalue.
    eigenvalues: Vec<f64>,
}

impl InteractionGraph {
    pub fn players(&self) -> usize {
        self.neighbors.len()
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    /// `(j, L_ij)` for every neighbor `j` of `i`.
    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.neighbors[i]
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Second-largest eigenvalue of `L` (`rho_2`). Zero for a single player.
    pub fn rho2(&self) -> f64 {
        let n = self.eigenvalues.len();
        if n < 2 {
            0.0
        } else {
            self.eigenvalues[n - 2]
        }
    }

    /// Smallest eigenvalue of `L` (`rho_m`).
    pub fn rho_min(&self) -> f64 {
        self.eigenvalues[0]
    }

    /// `|rho_2|`. A single player has no second eigenvalue and reports 0.
    pub fn spectral_gap(&self) -> f64 {
        self.rho2().abs()
    }

    /// Spectral norm of `W = I + chi L - 11'/m`, computed from an explicit
    /// eigen-decomposition of `W` rather than the cached spectrum of `L`.
    pub fn mixing_norm(&self, chi: f64) -> f64 {
        let w = mixing_matrix(&self.weights, chi);
        spectral_norm_symmetric(w)
    }

    /// `sum_j L_ij (s_j - s_i)` accumulated into `out`, where `shared(j)` is
    /// the message agent `j` broadcasts.
    pub fn laplacian_combine<'a, F>(&self, i: usize, shared: F, out: &mut [f64])
    where
        F: Fn(usize) -> &'a [f64],
    {
        out.iter_mut().for_each(|o| *o = 0.0);
        let own = shared(i);
        for &(j, w) in &self.neighbors[i] {
            let other = shared(j);
            for ((o, sj), si) in out.iter_mut().zip(other).zip(own) {
                *o += w * (sj - si);
            }
        }
    }

    /// Every undirected edge once, with `a < b`.
    pub fn edges(&self) -> Vec<Edge> {
        let mut edges = Vec::new();
        for (a, row) in self.neighbors.iter().enumerate() {
            for &(b, weight) in row {
                if a < b {
                    edges.push(Edge { a, b, weight });
                }
            }
        }
        edges
    }

    /// Edge-list text: a header `m <count>` then `i j weight` per edge, 1-indexed.
    pub fn to_edge_list(&self) -> String {
        let mut text = format!("m {}\n", self.players());
        for e in self.edges() {
            let _ = writeln!(text, "{} {} {}", e.a + 1, e.b + 1, e.weight);
        }
        text
    }

    pub fn from_edge_list(text: &str) -> Result<Self> {
        let mut players = None;
        let mut edges = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let parse_err = |message: String| Error::Parse { line: idx + 1, message };
            match (players, fields.as_slice()) {
                (None, ["m", count]) => {
                    let m = count
                        .parse::<usize>()
                        .map_err(|e| parse_err(format!("bad player count: {e}")))?;
                    players = Some(m);
                }
                (None, _) => return Err(parse_err("expected header `m <count>`".into())),
                (Some(_), [i, j, w]) => {
                    let i: usize = i.parse().map_err(|e| parse_err(format!("bad index: {e}")))?;
                    let j: usize = j.parse().map_err(|e| parse_err(format!("bad index: {e}")))?;
                    let w: f64 = w.parse().map_err(|e| parse_err(format!("bad weight: {e}")))?;
                    if i == 0 || j == 0 {
                        return Err(parse_err("indices are 1-based".into()));
                    }
                    edges.push(Edge::new(i - 1, j - 1, w));
                }
                (Some(_), _) => return Err(parse_err("expected `i j weight`".into())),
            }
        }
        let m = players.ok_or(Error::Parse { line: 0, message: "empty graph file".into() })?;
        build_graph(m, &edges)
    }
}

fn mixing_matrix(weights: &DMatrix<f64>, chi: f64) -> DMatrix<f64> {
    let m = weights.nrows();
    let avg = 1.0 / m as f64;
    DMatrix::from_fn(m, m, |r, c| {
        let identity = if r == c { 1.0 } else { 0.0 };
        identity + chi * weights[(r, c)] - avg
    })
}

fn spectral_norm_symmetric(matrix: DMatrix<f64>) -> f64 {
    SymmetricEigen::new(matrix)
        .eigenvalues
        .iter()
        .fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

fn check_edge(m: usize, e: &Edge) -> Result<()> {
    if e.a >= m || e.b >= m {
        return Err(Error::MalformedEdge(format!(
            "edge ({}, {}) out of range for {m} players",
            e.a, e.b
        )));
    }
    if e.a == e.b {
        return Err(Error::MalformedEdge(format!("self-loop at {}", e.a)));
    }
    if !(e.weight.is_finite() && e.weight > 0.0) {
        return Err(Error::MalformedEdge(format!(
            "edge ({}, {}) has non-positive weight {}",
            e.a, e.b, e.weight
        )));
    }
    Ok(())
}

/// Builds and validates a graph on `m` players from 0-indexed edges.
pub fn build_graph(m: usize, edges: &[Edge]) -> Result<InteractionGraph> {
    if m == 0 {
        return Err(Error::MalformedEdge("graph needs at least one player".into()));
    }
    let mut weights = DMatrix::<f64>::zeros(m, m);
    for e in edges {
        check_edge(m, e)?;
        if weights[(e.a, e.b)] != 0.0 {
            return Err(Error::MalformedEdge(format!("duplicate edge ({}, {})", e.a, e.b)));
        }
        weights[(e.a, e.b)] = e.weight;
        weights[(e.b, e.a)] = e.weight;
    }
    for i in 0..m {
        let off: f64 = (0..m).filter(|&j| j != i).map(|j| weights[(i, j)]).sum();
        weights[(i, i)] = -off;
    }

    let neighbors = (0..m)
        .map(|i| {
            (0..m)
                .filter(|&j| j != i && weights[(i, j)] > 0.0)
                .map(|j| (j, weights[(i, j)]))
                .collect()
        })
        .collect();

    let mut eigenvalues: Vec<f64> = SymmetricEigen::new(weights.clone()).eigenvalues.iter().copied().collect();
    eigenvalues.sort_by(f64::total_cmp);
    let graph = InteractionGraph { weights, neighbors, eigenvalues };

    if m > 1 {
        let scale = graph.rho_min().abs().max(f64::MIN_POSITIVE);
        let rho2 = graph.rho2();
        if rho2 > -1e-8 * scale {
            return Err(Error::DisconnectedGraph { rho2 });
        }
        let norm = (1.0 + rho2).abs().max((1.0 + graph.rho_min()).abs());
        if norm >= 1.0 {
            return Err(Error::SpectralNormViolation { norm });
        }
    }
    Ok(graph)
}

fn is_connected(m: usize, edges: &[Edge]) -> bool {
    let mut adjacency = vec![Vec::new(); m];
    for e in edges {
        adjacency[e.a].push(e.b);
        adjacency[e.b].push(e.a);
    }
    let mut seen = vec![false; m];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(v) = stack.pop() {
        for &u in &adjacency[v] {
            if !seen[u] {
                seen[u] = true;
                stack.push(u);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

/// Erdos-Renyi graph conditioned on connectivity, with every weight equal to
/// `weight_scale` and then shrunk uniformly until the mixing condition holds.
pub fn random_connected_graph(
    m: usize,
    edge_probability: f64,
    weight_scale: f64,
    seed: u64,
) -> Result<InteractionGraph> {
    if !(edge_probability > 0.0 && edge_probability <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "edge probability {edge_probability} not in (0, 1]"
        )));
    }
    if !(weight_scale.is_finite() && weight_scale > 0.0) {
        return Err(Error::InvalidParameter(format!("weight scale {weight_scale} must be positive")));
    }
    if m == 1 {
        return build_graph(1, &[]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_GRAPH_REDRAWS {
        let mut edges = Vec::new();
        for a in 0..m {
            for b in (a + 1)..m {
                if rng.random::<f64>() < edge_probability {
                    edges.push(Edge::new(a, b, weight_scale));
                }
            }
        }
        if !is_connected(m, &edges) {
            continue;
        }
        match build_graph(m, &edges) {
            Err(Error::SpectralNormViolation { norm }) => {
                let shrink = 0.9 / norm;
                for e in &mut edges {
                    e.weight *= shrink;
                }
                return build_graph(m, &edges);
            }
            other => return other,
        }
    }
    Err(Error::GenerationFailed {
        attempts: MAX_GRAPH_REDRAWS,
        reason: format!("no connected draw with m = {m}, p = {edge_probability}"),
    })
}

/// Complete graph with uniform weight `weight` on every edge.
pub fn complete_graph(m: usize, weight: f64) -> Result<InteractionGraph> {
    let mut edges = Vec::new();
    for a in 0..m {
        for b in (a + 1)..m {
            edges.push(Edge::new(a, b, weight));
        }
    }
    build_graph(m, &edges)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn two_node_half_weight() {
        let g = build_graph(2, &[Edge::new(0, 1, 0.5)]).unwrap();
        assert_eq!(g.weights()[(0, 0)], -0.5);
        assert_eq!(g.weights()[(0, 1)], 0.5);
        assert!(close(g.rho2(), -1.0, 1e-12));
        assert!(close(g.spectral_gap(), 1.0, 1e-12));
        assert!(close(g.mixing_norm(1.0), 0.0, 1e-12));
        assert!(close(g.mixing_norm(0.5), 0.5, 1e-12));
    }

    #[test]
    fn unit_weight_pair_violates_norm() {
        let err = build_graph(2, &[Edge::new(0, 1, 1.0)]).unwrap_err();
        assert!(matches!(err, Error::SpectralNormViolation { norm } if close(norm, 1.0, 1e-12)));
    }

    #[test]
    fn path_of_three_matches_characteristic_roots() {
        // Path 1-2-3 with weight w has L eigenvalues {0, -w, -3w}.
        let w = 0.3;
        let g = build_graph(3, &[Edge::new(0, 1, w), Edge::new(1, 2, w)]).unwrap();
        let expected = [-3.0 * w, -w, 0.0];
        for (got, want) in g.eigenvalues().iter().zip(expected) {
            assert!(close(*got, want, 1e-12), "{got} vs {want}");
        }
        assert!(close(g.spectral_gap(), 0.3, 1e-12));
    }

    #[test]
    fn complete_four_gap() {
        let g = complete_graph(4, 0.1).unwrap();
        assert!(close(g.spectral_gap(), 0.4, 1e-12));
        assert!(close(g.mixing_norm(1.0), 0.6, 1e-12));
    }

    #[test]
    fn zero_chi_projector_norm() {
        let g = complete_graph(5, 0.05).unwrap();
        assert!(close(g.mixing_norm(0.0), 1.0, 1e-12));
    }

    #[test]
    fn disconnected_rejected() {
        let err = build_graph(4, &[Edge::new(0, 1, 0.2), Edge::new(2, 3, 0.2)]).unwrap_err();
        assert!(matches!(err, Error::DisconnectedGraph { .. }));
    }

    #[test]
    fn malformed_edges_rejected() {
        assert!(matches!(build_graph(3, &[Edge::new(0, 0, 0.1)]), Err(Error::MalformedEdge(_))));
        assert!(matches!(build_graph(3, &[Edge::new(0, 3, 0.1)]), Err(Error::MalformedEdge(_))));
        assert!(matches!(build_graph(3, &[Edge::new(0, 1, -0.1)]), Err(Error::MalformedEdge(_))));
        assert!(matches!(
            build_graph(3, &[Edge::new(0, 1, 0.1), Edge::new(1, 0, 0.1)]),
            Err(Error::MalformedEdge(_))
        ));
    }

    #[test]
    fn random_graph_reproducible_and_valid() {
        let a = random_connected_graph(20, 0.25, 0.1, 7).unwrap();
        let b = random_connected_graph(20, 0.25, 0.1, 7).unwrap();
        assert_eq!(a.weights(), b.weights());
        assert!(a.spectral_gap() > 0.0);
        assert!(a.mixing_norm(1.0) < 1.0);
    }

    #[test]
    fn two_node_full_probability_rescaled() {
        let g = random_connected_graph(2, 1.0, 5.0, 1).unwrap();
        assert_eq!(g.edges().len(), 1);
        assert!(g.mixing_norm(1.0) < 1.0);
    }

    #[test]
    fn edge_list_round_trip() {
        let g = random_connected_graph(12, 0.3, 0.1, 3).unwrap();
        let text = g.to_edge_list();
        let back = InteractionGraph::from_edge_list(&text).unwrap();
        assert_eq!(g.weights(), back.weights());
    }

    #[test]
    fn combine_matches_matrix_product() {
        let g = random_connected_graph(6, 0.6, 0.1, 11).unwrap();
        let values: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64 * 0.7 - 1.0, (i * i) as f64]).collect();
        for i in 0..6 {
            let mut out = vec![0.0; 2];
            g.laplacian_combine(i, |j| values[j].as_slice(), &mut out);
            for c in 0..2 {
                let direct: f64 = (0..6).map(|j| g.weights()[(i, j)] * values[j][c]).sum();
                assert!(close(out[c], direct, 1e-12));
            }
        }
    }
}
