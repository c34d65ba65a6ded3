//! Recursive normalized-cut partitioning of the view graph.
//!
//! Each bisection finds the Fiedler vector of the symmetric normalized
//! Laplacian `L = I - D^-1/2 W D^-1/2` by inverse iteration (conjugate
//! gradient solves restricted to the complement of the trivial eigenvector
//! `D^1/2 1`), then sweeps every split of the vertices sorted by
//! `v / sqrt(d)` for the smallest `Ncut = cut/assoc(A) + cut/assoc(B)`.
//! Components no larger than the cap are left alone.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;

use rand::Rng as _;
use serde::Serialize;
use thiserror::Error;

use crate::seed;
use crate::view_graph::ViewGraph;

pub const EIGEN_TOLERANCE: f64 = 1e-8;
pub const EIGEN_MAX_ITERS: usize = 5000;

#[derive(Debug, Error, PartialEq)]
pub enum PartitionError {
    #[error("graph is disconnected; bisect its components separately")]
    Disconnected,
    #[error("need at least 2 vertices, got {0}")]
    TooSmall(usize),
    #[error("eigensolver did not converge after {0} iterations")]
    NoConvergence(usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Undirected graph on vertices `0..n` with positive edge weights.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightedGraph {
    adj: Vec<Vec<(u32, f64)>>,
}

impl WeightedGraph {
    pub fn new(n: usize) -> Self {
        Self { adj: vec![Vec::new(); n] }
    }

    pub fn add_edge(&mut self, a: usize, b: usize, w: f64) {
        assert!(a != b, "self loops are not allowed");
        self.adj[a].push((b as u32, w));
        self.adj[b].push((a as u32, w));
    }

    pub fn len(&self) -> usize {
        self.adj.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adj.is_empty()
    }

    pub fn neighbors(&self, v: usize) -> &[(u32, f64)] {
        &self.adj[v]
    }

    pub fn degree(&self, v: usize) -> f64 {
        self.adj[v].iter().map(|e| e.1).sum()
    }

    /// Connected components, each sorted, ordered by smallest member.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let mut seen = vec![false; self.len()];
        let mut out = Vec::new();
        for start in 0..self.len() {
            if seen[start] {
                continue;
            }
            seen[start] = true;
            let mut comp = vec![start];
            let mut queue = VecDeque::from([start]);
            while let Some(v) = queue.pop_front() {
                for &(u, _) in &self.adj[v] {
                    if !seen[u as usize] {
                        seen[u as usize] = true;
                        comp.push(u as usize);
                        queue.push_back(u as usize);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }

    /// Subgraph induced by `members`, renumbered in the given order.
    pub fn induced(&self, members: &[usize]) -> WeightedGraph {
        let mut local = vec![u32::MAX; self.len()];
        for (k, &v) in members.iter().enumerate() {
            local[v] = k as u32;
        }
        let adj = members
            .iter()
            .map(|&v| self.adj[v].iter().filter(|e| local[e.0 as usize] != u32::MAX).map(|e| (local[e.0 as usize], e.1)).collect())
            .collect();
        WeightedGraph { adj }
    }

    /// `Ncut(A, B)` for the side mask `in_a`.
    pub fn ncut(&self, in_a: &[bool]) -> f64 {
        let (mut cut, mut assoc_a, mut assoc_b) = (0.0, 0.0, 0.0);
        for v in 0..self.len() {
            for &(u, w) in &self.adj[v] {
                if in_a[v] {
                    assoc_a += w;
                } else {
                    assoc_b += w;
                }
                if in_a[v] && !in_a[u as usize] {
                    cut += w;
                }
            }
        }
        cut / assoc_a + cut / assoc_b
    }
}

struct Laplacian<'a> {
    g: &'a WeightedGraph,
    inv_sqrt_d: Vec<f64>,
    /// Unit trivial eigenvector `sqrt(d) / |sqrt(d)|`.
    u0: Vec<f64>,
}

impl<'a> Laplacian<'a> {
    fn new(g: &'a WeightedGraph) -> Self {
        let d: Vec<f64> = (0..g.len()).map(|v| g.degree(v)).collect();
        let norm = d.iter().sum::<f64>().sqrt();
        Self { g, inv_sqrt_d: d.iter().map(|x| 1.0 / x.sqrt()).collect(), u0: d.iter().map(|x| x.sqrt() / norm).collect() }
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        for v in 0..x.len() {
            let mut acc = 0.0;
            for &(u, w) in self.g.neighbors(v) {
                acc += w * self.inv_sqrt_d[u as usize] * x[u as usize];
            }
            y[v] = x[v] - self.inv_sqrt_d[v] * acc;
        }
    }

    fn deflate(&self, x: &mut [f64]) {
        let c = dot(x, &self.u0);
        x.iter_mut().zip(&self.u0).for_each(|(a, b)| *a -= c * b);
    }

    /// Solves `L x = b` for `b` orthogonal to `u0`, within that complement.
    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = b.len();
        let mut x = vec![0.0; n];
        let mut r = b.to_vec();
        let mut p = r.clone();
        let mut ap = vec![0.0; n];
        let mut rs = dot(&r, &r);
        let stop = 1e-28 * rs.max(f64::MIN_POSITIVE);
        for _ in 0..(20 * n).clamp(100, 200_000) {
            if rs <= stop {
                break;
            }
            self.apply(&p, &mut ap);
            let pap = dot(&p, &ap);
            if pap <= 0.0 {
                break;
            }
            let alpha = rs / pap;
            axpy(alpha, &p, &mut x);
            axpy(-alpha, &ap, &mut r);
            self.deflate(&mut r);
            let rs_new = dot(&r, &r);
            let beta = rs_new / rs;
            rs = rs_new;
            p.iter_mut().zip(&r).for_each(|(pi, ri)| *pi = ri + beta * *pi);
        }
        self.deflate(&mut x);
        x
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += alpha * xi);
}

fn normalize(x: &mut [f64]) -> f64 {
    let n = dot(x, x).sqrt();
    if n > 0.0 {
        x.iter_mut().for_each(|v| *v /= n);
    }
    n
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fiedler {
    /// Unit eigenvector of `L_sym` orthogonal to `D^1/2 1`.
    pub vector: Vec<f64>,
    pub eigenvalue: f64,
    pub residual: f64,
    pub iterations: usize,
}

/// Second-smallest eigenpair of the normalized Laplacian of a connected graph.
pub fn fiedler_vector(g: &WeightedGraph, seed: u64) -> Result<Fiedler, PartitionError> {
    let n = g.len();
    if n < 2 {
        return Err(PartitionError::TooSmall(n));
    }
    if g.components().len() > 1 {
        return Err(PartitionError::Disconnected);
    }
    let lap = Laplacian::new(g);
    let mut rng = seed::rng(seed);
    let mut v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
    lap.deflate(&mut v);
    normalize(&mut v);
    let mut lv = vec![0.0; n];
    for it in 1..=EIGEN_MAX_ITERS {
        let mut next = lap.solve(&v);
        if normalize(&mut next) == 0.0 {
            break;
        }
        v = next;
        lap.apply(&v, &mut lv);
        let lambda = dot(&v, &lv);
        let residual = lv.iter().zip(&v).map(|(a, b)| (a - lambda * b).powi(2)).sum::<f64>().sqrt();
        if residual <= EIGEN_TOLERANCE {
            return Ok(Fiedler { vector: v, eigenvalue: lambda, residual, iterations: it });
        }
    }
    Err(PartitionError::NoConvergence(EIGEN_MAX_ITERS))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bisection {
    pub side_a: Vec<usize>,
    pub side_b: Vec<usize>,
    pub ncut: f64,
    pub cut: f64,
    /// The spectral solver failed and the greedy split was used.
    pub fallback: bool,
}

/// Best prefix split of `order`; returns (prefix length, ncut, cut).
fn sweep(g: &WeightedGraph, order: &[usize]) -> (usize, f64, f64) {
    let n = g.len();
    let total: f64 = (0..n).map(|v| g.degree(v)).sum();
    let mut in_a = vec![false; n];
    let (mut cut, mut assoc_a) = (0.0, 0.0);
    let mut best = (1, f64::INFINITY, 0.0);
    for (k, &v) in order[..n - 1].iter().enumerate() {
        for &(u, w) in g.neighbors(v) {
            if in_a[u as usize] {
                cut -= w;
            } else {
                cut += w;
            }
        }
        in_a[v] = true;
        assoc_a += g.degree(v);
        let assoc_b = total - assoc_a;
        let ncut = cut / assoc_a + cut / assoc_b;
        if ncut < best.1 {
            best = (k + 1, ncut, cut);
        }
    }
    best
}

/// Grows one side from the heaviest vertex, always adding the outside vertex
/// most strongly tied to it, and keeps the best sweep prefix.
fn greedy_order(g: &WeightedGraph) -> Vec<usize> {
    let n = g.len();
    let start = (0..n).max_by(|&a, &b| g.degree(a).total_cmp(&g.degree(b)).then(b.cmp(&a))).unwrap();
    let mut tie = vec![0.0; n];
    let mut taken = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut next = start;
    loop {
        taken[next] = true;
        order.push(next);
        for &(u, w) in g.neighbors(next) {
            tie[u as usize] += w;
        }
        let Some(best) = (0..n).filter(|&v| !taken[v]).max_by(|&a, &b| tie[a].total_cmp(&tie[b]).then(b.cmp(&a))) else {
            break;
        };
        next = best;
    }
    order
}

fn split_from_order(g: &WeightedGraph, order: &[usize], fallback: bool) -> Bisection {
    let (k, ncut, cut) = sweep(g, order);
    let mut side_a = order[..k].to_vec();
    let mut side_b = order[k..].to_vec();
    side_a.sort_unstable();
    side_b.sort_unstable();
    Bisection { side_a, side_b, ncut, cut, fallback }
}

/// Two-way normalized cut of a connected graph.
pub fn normalized_cut_bisect(g: &WeightedGraph, seed: u64) -> Result<Bisection, PartitionError> {
    let n = g.len();
    if n < 2 {
        return Err(PartitionError::TooSmall(n));
    }
    if g.components().len() > 1 {
        return Err(PartitionError::Disconnected);
    }
    match fiedler_vector(g, seed) {
        Ok(f) => {
            let y: Vec<f64> = (0..n).map(|v| f.vector[v] / g.degree(v).sqrt()).collect();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| y[a].total_cmp(&y[b]).then(a.cmp(&b)));
            Ok(split_from_order(g, &order, false))
        }
        Err(e) => {
            log::warn!("spectral bisection failed on {n} vertices ({e}); using greedy split");
            Ok(split_from_order(g, &greedy_order(g), true))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitRecord {
    pub size: usize,
    pub size_a: usize,
    pub size_b: usize,
    pub ncut: f64,
    pub cut: f64,
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionResult {
    /// Image id to cluster id.
    pub assignment: BTreeMap<u64, usize>,
    /// Members of each cluster, sorted; clusters ordered by smallest member.
    pub clusters: Vec<Vec<u64>>,
    /// Total weight of edges between different clusters.
    pub cut_cost: f64,
    pub splits: Vec<SplitRecord>,
}

impl PartitionResult {
    pub fn cluster_count(&self) -> usize {
        self.clusters.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.clusters.iter().map(|c| c.len()).collect()
    }

    /// `image_id cluster_id` per line, sorted by image id.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (id, c) in &self.assignment {
            writeln!(out, "{id} {c}").unwrap();
        }
        out
    }

    pub fn summary_json(&self, max_size: usize) -> String {
        #[derive(Serialize)]
        struct Summary<'a> {
            max_size: usize,
            cluster_count: usize,
            sizes: Vec<usize>,
            cut_cost: f64,
            splits: &'a [SplitRecord],
        }
        serde_json::to_string_pretty(&Summary {
            max_size,
            cluster_count: self.cluster_count(),
            sizes: self.sizes(),
            cut_cost: self.cut_cost,
            splits: &self.splits,
        })
        .expect("summary serializes")
    }
}

/// Splits `g` into connected pieces of at most `max_size` vertices.
/// Returns local vertex groups plus the bisection records.
pub fn partition_graph(g: &WeightedGraph, max_size: usize, seed: u64) -> Result<(Vec<Vec<usize>>, Vec<SplitRecord>), PartitionError> {
    if max_size == 0 {
        return Err(PartitionError::InvalidParameter("max_size must be >= 1".into()));
    }
    let mut done: Vec<Vec<usize>> = Vec::new();
    let mut splits = Vec::new();
    let mut work: Vec<Vec<usize>> = vec![(0..g.len()).collect()];
    while let Some(set) = work.pop() {
        let sub = g.induced(&set);
        for comp in sub.components() {
            let members: Vec<usize> = comp.iter().map(|&k| set[k]).collect();
            if members.len() <= max_size {
                done.push(members);
                continue;
            }
            let piece = g.induced(&members);
            let label = format!("ncut-{}-{}", members[0], members.len());
            let b = normalized_cut_bisect(&piece, seed::derive(seed, &label))?;
            splits.push(SplitRecord {
                size: members.len(),
                size_a: b.side_a.len(),
                size_b: b.side_b.len(),
                ncut: b.ncut,
                cut: b.cut,
                fallback: b.fallback,
            });
            work.push(b.side_b.iter().map(|&k| members[k]).collect());
            work.push(b.side_a.iter().map(|&k| members[k]).collect());
        }
    }
    for c in &mut done {
        c.sort_unstable();
    }
    done.sort();
    Ok((done, splits))
}

pub fn partition_view_graph(graph: &ViewGraph, max_size: usize, seed: u64) -> Result<PartitionResult, PartitionError> {
    let ids: Vec<u64> = graph.vertices.iter().map(|v| v.image_id).collect();
    let index: BTreeMap<u64, usize> = ids.iter().enumerate().map(|(k, &id)| (id, k)).collect();
    let mut g = WeightedGraph::new(ids.len());
    for e in &graph.edges {
        if let (Some(&a), Some(&b)) = (index.get(&e.i), index.get(&e.j)) {
            if a != b && e.w > 0.0 {
                g.add_edge(a, b, e.w);
            }
        }
    }
    let (groups, splits) = partition_graph(&g, max_size, seed)?;
    let clusters: Vec<Vec<u64>> = groups.iter().map(|grp| grp.iter().map(|&k| ids[k]).collect()).collect();
    let mut assignment = BTreeMap::new();
    for (c, members) in clusters.iter().enumerate() {
        for &id in members {
            assignment.insert(id, c);
        }
    }
    let cut_cost = graph
        .edges
        .iter()
        .filter(|e| assignment.get(&e.i) != assignment.get(&e.j))
        .map(|e| e.w)
        .sum();
    Ok(PartitionResult { assignment, clusters, cut_cost, splits })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clique_bridge(a: usize, b: usize, eps: f64) -> WeightedGraph {
        let mut g = WeightedGraph::new(a + b);
        for i in 0..a {
            for j in i + 1..a {
                g.add_edge(i, j, 1.0);
            }
        }
        for i in a..a + b {
            for j in i + 1..a + b {
                g.add_edge(i, j, 1.0);
            }
        }
        g.add_edge(a - 1, a, eps);
        g
    }

    fn exhaustive_min(g: &WeightedGraph) -> f64 {
        let n = g.len();
        let mut best = f64::INFINITY;
        for mask in 1u32..(1 << (n - 1)) {
            let in_a: Vec<bool> = (0..n).map(|v| mask >> v & 1 == 1).collect();
            best = best.min(g.ncut(&in_a));
        }
        best
    }

    #[test]
    fn bridge_split_is_optimal() {
        for a in 4..=8 {
            for b in 4..=8 {
                let g = clique_bridge(a, b, 0.01);
                let r = normalized_cut_bisect(&g, 1).unwrap();
                assert!(!r.fallback);
                assert_eq!(r.side_a.len().min(r.side_b.len()), a.min(b));
                assert!((r.ncut - exhaustive_min(&g)).abs() < 1e-12);
                let in_a: Vec<bool> = (0..a + b).map(|v| r.side_a.contains(&v)).collect();
                assert!((g.ncut(&in_a) - r.ncut).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn k4_split_value() {
        let mut g = WeightedGraph::new(4);
        for i in 0..4 {
            for j in i + 1..4 {
                g.add_edge(i, j, 1.0);
            }
        }
        let r = normalized_cut_bisect(&g, 2).unwrap();
        // Balanced split: cut 4, both associations 6.
        assert!((r.ncut - 4.0 / 3.0).abs() < 1e-12);
        assert!((exhaustive_min(&g) - 4.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn single_edge_splits_into_singletons() {
        let mut g = WeightedGraph::new(2);
        g.add_edge(0, 1, 3.0);
        let r = normalized_cut_bisect(&g, 0).unwrap();
        assert_eq!((r.side_a.len(), r.side_b.len()), (1, 1));
    }

    #[test]
    fn errors() {
        assert_eq!(normalized_cut_bisect(&WeightedGraph::new(1), 0), Err(PartitionError::TooSmall(1)));
        assert_eq!(normalized_cut_bisect(&WeightedGraph::new(3), 0), Err(PartitionError::Disconnected));
    }

    #[test]
    fn fiedler_residual_is_small() {
        let g = clique_bridge(7, 9, 0.3);
        let f = fiedler_vector(&g, 3).unwrap();
        let lap = Laplacian::new(&g);
        let mut lv = vec![0.0; g.len()];
        lap.apply(&f.vector, &mut lv);
        let r: f64 = lv.iter().zip(&f.vector).map(|(a, b)| (a - f.eigenvalue * b).powi(2)).sum::<f64>().sqrt();
        assert!(r <= 1e-6);
        assert!(dot(&f.vector, &lap.u0).abs() < 1e-9);
    }

    #[test]
    fn greedy_fallback_splits() {
        let g = clique_bridge(5, 6, 0.01);
        let r = split_from_order(&g, &greedy_order(&g), true);
        assert_eq!(r.side_a.len() + r.side_b.len(), 11);
        assert!((r.ncut - exhaustive_min(&g)).abs() < 1e-12);
    }

    #[test]
    fn cap_and_components() {
        // Two disjoint paths of 30 vertices plus an isolated vertex.
        let mut g = WeightedGraph::new(61);
        for i in 0..29 {
            g.add_edge(i, i + 1, 1.0);
            g.add_edge(30 + i, 31 + i, 1.0);
        }
        let (groups, splits) = partition_graph(&g, 100, 0).unwrap();
        assert_eq!(groups.len(), 3);
        assert!(splits.is_empty());
        let (groups, _) = partition_graph(&g, 7, 0).unwrap();
        assert!(groups.iter().all(|c| c.len() <= 7));
        let mut all: Vec<usize> = groups.concat();
        all.sort_unstable();
        assert_eq!(all, (0..61).collect::<Vec<_>>());
    }
}
