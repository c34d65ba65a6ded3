//! Weighted view graph over verified image pairs.
//!
//! Edge weight `w = R * w_inlier + (1 - R) * w_overlap`, with
//! `w_inlier = ln N / ln N_max` and `w_overlap = (CH_i + CH_j) / (A_i + A_j)`,
//! where `CH` is the convex hull area of a pair's inlier keypoints in each
//! image and `A` the image area.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::descriptor::DescriptorSet;
use crate::hull::convex_hull;
use crate::verification::VerifiedPair;

#[derive(Debug, Error)]
pub enum ViewGraphError {
    #[error("image dimensions must be positive, got {0}x{1}")]
    InvalidDims(u32, u32),
    #[error("invalid inlier counts: {n_inlier} of max {n_max}")]
    InvalidCount { n_inlier: usize, n_max: usize },
    #[error("R_ew must lie in [0, 1], got {0}")]
    InvalidRatio(f64),
    #[error("image {0} has no descriptor set")]
    MissingImage(u64),
    #[error("inlier index out of range for image {0}")]
    BadInlier(u64),
    #[error("malformed view graph: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vertex {
    pub image_id: u64,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeWeights {
    pub w: f64,
    pub w_inlier: f64,
    pub w_overlap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub i: u64,
    pub j: u64,
    pub w: f64,
    pub n_inlier: usize,
    pub w_inlier: f64,
    pub w_overlap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewGraph {
    /// Sorted by image id.
    pub vertices: Vec<Vertex>,
    /// Sorted by `(i, j)` with `i < j`.
    pub edges: Vec<Edge>,
    pub r_ew: f64,
    pub n_max_inlier: usize,
}

/// Weights for one pair from its inlier keypoints in each image.
pub fn edge_weight(
    inliers_a: &[[f64; 2]],
    inliers_b: &[[f64; 2]],
    dims_a: (u32, u32),
    dims_b: (u32, u32),
    n_max_inlier: usize,
    r_ew: f64,
) -> Result<EdgeWeights, ViewGraphError> {
    for d in [dims_a, dims_b] {
        if d.0 == 0 || d.1 == 0 {
            return Err(ViewGraphError::InvalidDims(d.0, d.1));
        }
    }
    if !(0.0..=1.0).contains(&r_ew) {
        return Err(ViewGraphError::InvalidRatio(r_ew));
    }
    let n = inliers_a.len();
    if n != inliers_b.len() || n < 2 || n_max_inlier < n {
        return Err(ViewGraphError::InvalidCount { n_inlier: n, n_max: n_max_inlier });
    }
    let w_inlier = if n == n_max_inlier { 1.0 } else { (n as f64).ln() / (n_max_inlier as f64).ln() };
    let area = |d: (u32, u32)| d.0 as f64 * d.1 as f64;
    let hulls = convex_hull(inliers_a).area + convex_hull(inliers_b).area;
    let w_overlap = (hulls / (area(dims_a) + area(dims_b))).clamp(0.0, 1.0);
    let w = r_ew * w_inlier + (1.0 - r_ew) * w_overlap;
    Ok(EdgeWeights { w, w_inlier, w_overlap })
}

/// One edge per verified pair; every image with a descriptor set becomes a
/// vertex, connected or not.
pub fn build_view_graph(pairs: &[VerifiedPair], sets: &[DescriptorSet], r_ew: f64) -> Result<ViewGraph, ViewGraphError> {
    if !(0.0..=1.0).contains(&r_ew) {
        return Err(ViewGraphError::InvalidRatio(r_ew));
    }
    let by_id: HashMap<u64, &DescriptorSet> = sets.iter().map(|s| (s.image_id, s)).collect();
    let mut vertices: Vec<Vertex> =
        sets.iter().map(|s| Vertex { image_id: s.image_id, width: s.image_width, height: s.image_height }).collect();
    vertices.sort_by_key(|v| v.image_id);
    let n_max_inlier = pairs.iter().map(|p| p.n_inlier()).max().unwrap_or(0);
    let mut edges = Vec::with_capacity(pairs.len());
    for p in pairs {
        let a = by_id.get(&p.i).ok_or(ViewGraphError::MissingImage(p.i))?;
        let b = by_id.get(&p.j).ok_or(ViewGraphError::MissingImage(p.j))?;
        let mut pa = Vec::with_capacity(p.inliers.len());
        let mut pb = Vec::with_capacity(p.inliers.len());
        for m in &p.inliers {
            let fa = a.features.get(m.index_a as usize).ok_or(ViewGraphError::BadInlier(p.i))?;
            let fb = b.features.get(m.index_b as usize).ok_or(ViewGraphError::BadInlier(p.j))?;
            pa.push([fa.x as f64, fa.y as f64]);
            pb.push([fb.x as f64, fb.y as f64]);
        }
        let w = edge_weight(
            &pa,
            &pb,
            (a.image_width, a.image_height),
            (b.image_width, b.image_height),
            n_max_inlier,
            r_ew,
        )?;
        let (i, j) = (p.i.min(p.j), p.i.max(p.j));
        edges.push(Edge { i, j, w: w.w, n_inlier: p.n_inlier(), w_inlier: w.w_inlier, w_overlap: w.w_overlap });
    }
    edges.sort_by_key(|e| (e.i, e.j));
    edges.dedup_by_key(|e| (e.i, e.j));
    Ok(ViewGraph { vertices, edges, r_ew, n_max_inlier })
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    vertex_count: usize,
    edge_count: usize,
    r_ew: f64,
    n_max_inlier: usize,
    isolated: Vec<u64>,
    vertices: Vec<Vertex>,
}

impl ViewGraph {
    pub fn isolated(&self) -> Vec<u64> {
        let connected: BTreeSet<u64> = self.edges.iter().flat_map(|e| [e.i, e.j]).collect();
        self.vertices.iter().map(|v| v.image_id).filter(|id| !connected.contains(id)).collect()
    }

    pub fn edge(&self, a: u64, b: u64) -> Option<&Edge> {
        let key = (a.min(b), a.max(b));
        self.edges.binary_search_by_key(&key, |e| (e.i, e.j)).ok().map(|k| &self.edges[k])
    }

    /// `i j w_ij N_inlier w_inlier w_overlap` per line.
    pub fn edges_text(&self) -> String {
        let mut out = String::new();
        for e in &self.edges {
            writeln!(out, "{} {} {:.9} {} {:.9} {:.9}", e.i, e.j, e.w, e.n_inlier, e.w_inlier, e.w_overlap).unwrap();
        }
        out
    }

    pub fn header_json(&self) -> String {
        let h = Header {
            vertex_count: self.vertices.len(),
            edge_count: self.edges.len(),
            r_ew: self.r_ew,
            n_max_inlier: self.n_max_inlier,
            isolated: self.isolated(),
            vertices: self.vertices.clone(),
        };
        serde_json::to_string_pretty(&h).expect("header serializes")
    }

    pub fn from_text(header_json: &str, edges_text: &str) -> Result<Self, ViewGraphError> {
        let h: Header = serde_json::from_str(header_json).map_err(|e| ViewGraphError::Malformed(e.to_string()))?;
        let ids: BTreeSet<u64> = h.vertices.iter().map(|v| v.image_id).collect();
        let mut edges = Vec::new();
        for (n, line) in edges_text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = || ViewGraphError::Malformed(format!("edge line {}", n + 1));
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 6 {
                return Err(bad());
            }
            let e = Edge {
                i: f[0].parse().map_err(|_| bad())?,
                j: f[1].parse().map_err(|_| bad())?,
                w: f[2].parse().map_err(|_| bad())?,
                n_inlier: f[3].parse().map_err(|_| bad())?,
                w_inlier: f[4].parse().map_err(|_| bad())?,
                w_overlap: f[5].parse().map_err(|_| bad())?,
            };
            if e.i >= e.j || !ids.contains(&e.i) || !ids.contains(&e.j) {
                return Err(bad());
            }
            edges.push(e);
        }
        edges.sort_by_key(|e| (e.i, e.j));
        let mut vertices = h.vertices;
        vertices.sort_by_key(|v| v.image_id);
        Ok(Self { vertices, edges, r_ew: h.r_ew, n_max_inlier: h.n_max_inlier })
    }

    /// Adjacency lists keyed by image id, each sorted by neighbor id.
    pub fn adjacency(&self) -> BTreeMap<u64, Vec<(u64, f64)>> {
        let mut adj: BTreeMap<u64, Vec<(u64, f64)>> = self.vertices.iter().map(|v| (v.image_id, Vec::new())).collect();
        for e in &self.edges {
            adj.entry(e.i).or_default().push((e.j, e.w));
            adj.entry(e.j).or_default().push((e.i, e.w));
        }
        for list in adj.values_mut() {
            list.sort_by_key(|x| x.0);
        }
        adj
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor::LocalFeature;
    use crate::verification::FeatureMatch;
    use nalgebra::Matrix3;

    fn corners(w: f64, h: f64, n: usize) -> Vec<[f64; 2]> {
        let mut p = vec![[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]];
        while p.len() < n {
            p.push([w / 2.0, h / 2.0]);
        }
        p
    }

    #[test]
    fn maxima_give_unit_weight() {
        let p = corners(100.0, 50.0, 20);
        let w = edge_weight(&p, &p, (100, 50), (100, 50), 20, 0.5).unwrap();
        assert_eq!((w.w, w.w_inlier, w.w_overlap), (1.0, 1.0, 1.0));
    }

    #[test]
    fn log_ratio_hand_case() {
        let p = corners(10.0, 10.0, 100);
        let w = edge_weight(&p, &p, (100, 100), (100, 100), 10_000, 0.5).unwrap();
        assert!((w.w_inlier - 0.5).abs() < 1e-15);
    }

    #[test]
    fn corner_cluster_covers_one_percent() {
        // 10x10 corner patch on 100x100 images.
        let p = corners(10.0, 10.0, 30);
        let w = edge_weight(&p, &p, (100, 100), (100, 100), 30, 0.0).unwrap();
        assert!((w.w_overlap - 0.01).abs() < 1e-15);
        assert!((w.w - 0.01).abs() < 1e-15);
    }

    #[test]
    fn invalid_inputs() {
        let p = corners(1.0, 1.0, 20);
        assert!(matches!(edge_weight(&p, &p, (0, 5), (5, 5), 20, 0.5), Err(ViewGraphError::InvalidDims(0, 5))));
        assert!(edge_weight(&p, &p, (5, 5), (5, 5), 10, 0.5).is_err());
        assert!(edge_weight(&p, &p, (5, 5), (5, 5), 20, 1.5).is_err());
    }

    #[test]
    fn inlier_weight_increases_with_count() {
        let mut last = 0.0;
        for n in 16..200 {
            let p = corners(1.0, 1.0, n);
            let w = edge_weight(&p, &p, (5, 5), (5, 5), 500, 0.5).unwrap();
            assert!(w.w_inlier > last);
            assert!(w.w >= w.w_inlier.min(w.w_overlap) && w.w <= w.w_inlier.max(w.w_overlap));
            last = w.w_inlier;
        }
    }

    fn set(id: u64, pts: &[[f64; 2]]) -> DescriptorSet {
        let features = pts
            .iter()
            .map(|p| LocalFeature { x: p[0] as f32, y: p[1] as f32, scale: 1.0, orientation: 0.0, descriptor: [1; 128] })
            .collect();
        DescriptorSet { image_id: id, image_width: 100, image_height: 100, features }
    }

    fn pair(i: u64, j: u64, n: usize) -> VerifiedPair {
        VerifiedPair {
            i,
            j,
            inliers: (0..n as u32).map(|k| FeatureMatch { index_a: k, index_b: k, distance: 0.0 }).collect(),
            fundamental: Matrix3::identity(),
            mean_error: 0.0,
        }
    }

    #[test]
    fn graph_assembly() {
        let pts: Vec<[f64; 2]> = (0..40).map(|k| [(k % 7) as f64 * 10.0, (k / 7) as f64 * 12.0]).collect();
        let sets = vec![set(0, &pts), set(1, &pts), set(2, &pts), set(3, &pts)];
        let empty = build_view_graph(&[], &sets, 0.5).unwrap();
        assert_eq!(empty.vertices.len(), 4);
        assert!(empty.edges.is_empty());
        assert_eq!(empty.isolated(), vec![0, 1, 2, 3]);

        let one = build_view_graph(&[pair(1, 0, 20)], &sets, 0.5).unwrap();
        assert_eq!(one.edges.len(), 1);
        assert_eq!(one.edges[0].w_inlier, 1.0);
        assert_eq!((one.edges[0].i, one.edges[0].j), (0, 1));

        let g = build_view_graph(&[pair(0, 1, 40), pair(1, 2, 20)], &sets, 0.5).unwrap();
        assert_eq!(g.n_max_inlier, 40);
        assert_eq!(g.isolated(), vec![3]);
        let back = ViewGraph::from_text(&g.header_json(), &g.edges_text()).unwrap();
        assert_eq!(back.vertices, g.vertices);
        assert_eq!(back.edges.len(), 2);
        for (a, b) in back.edges.iter().zip(&g.edges) {
            assert!((a.w - b.w).abs() < 1e-8);
            assert_eq!(a.n_inlier, b.n_inlier);
        }
        assert!(matches!(build_view_graph(&[pair(0, 9, 20)], &sets, 0.5), Err(ViewGraphError::MissingImage(9))));
    }
}
