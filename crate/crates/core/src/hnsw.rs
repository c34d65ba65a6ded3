//! Hierarchical navigable small world graph over global image vectors.
//!
//! Vertices are inserted one at a time. Each draws a top layer from a
//! geometric distribution, descends greedily through the layers above it and
//! then runs a best-first search of width `ef_construction` on every layer it
//! joins. Its neighbors are picked with the diversity heuristic (keep a
//! candidate only if it is closer to the new vertex than to any neighbor
//! already kept), topped up nearest-first to `M`.
//!
//! Edges are kept symmetric. When a reciprocal edge pushes a vertex past its
//! degree cap, its farthest neighbor is dropped from both lists, skipping
//! neighbors for which that edge is the last one on the layer.
//!
//! The graph is immutable after [`HnswIndex::build`]; searches allocate their
//! own scratch and may run concurrently.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::binio::{ByteReader, PutLe};
use crate::distance::l2_sq;
use crate::seed;
use crate::vlad::VladDescriptor;

const MAGIC: &[u8; 4] = b"UVH1";
const VERSION: u32 = 1;
const MAX_LEVEL: usize = 16;

#[derive(Debug, Error)]
pub enum HnswError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("duplicate image id {0}")]
    DuplicateImageId(u64),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("index is empty")]
    EmptyIndex,
    #[error("no vectors to search")]
    EmptyInput,
    #[error("malformed index file: {0}")]
    Malformed(String),
    #[error("vector file does not match the one the index was built from")]
    VectorHashMismatch,
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HnswParams {
    /// Friend number: degree cap on layers above 0, and the number of
    /// neighbors a new vertex links to on each layer.
    pub m: usize,
    /// Degree cap on layer 0.
    pub m0: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
    /// Level multiplier; levels are `floor(-ln(U) * ml)`.
    pub ml: f64,
    pub seed: u64,
}

impl HnswParams {
    pub fn with_m(m: usize) -> Self {
        Self {
            m,
            m0: 2 * m,
            ef_construction: 200,
            ef_search: 128,
            ml: 1.0 / (m.max(2) as f64).ln(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), HnswError> {
        if self.m < 2 {
            return Err(HnswError::InvalidParams(format!("M must be >= 2, got {}", self.m)));
        }
        if self.m0 < self.m {
            return Err(HnswError::InvalidParams("M0 must be >= M".into()));
        }
        if self.ef_construction < self.m {
            return Err(HnswError::InvalidParams(format!(
                "ef_construction ({}) must be >= M ({})",
                self.ef_construction, self.m
            )));
        }
        if self.ef_search < 1 {
            return Err(HnswError::InvalidParams("ef_search must be >= 1".into()));
        }
        if !(self.ml > 0.0 && self.ml.is_finite()) {
            return Err(HnswError::InvalidParams("ml must be positive".into()));
        }
        Ok(())
    }
}

impl Default for HnswParams {
    fn default() -> Self {
        Self::with_m(32)
    }
}

/// Distance-ordered key with the vertex id as tie-breaker.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Key(f32, u32);

impl Eq for Key {}

impl PartialOrd for Key {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Key {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Link {
    id: u32,
    /// Squared distance to the list owner.
    dist: f32,
}

/// Counters gathered during one query.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SearchStats {
    pub distance_computations: usize,
    /// Vertices visited per layer, highest layer first.
    pub visited_per_layer: Vec<usize>,
    /// Set if some vertex was expanded twice on one layer; always false.
    pub revisited: bool,
}

/// Per-query scratch: generation-stamped visited marks and a distance cache
/// shared across layers so no vertex is measured twice per query.
pub struct Searcher {
    visit_stamp: Vec<u32>,
    dist_stamp: Vec<u32>,
    dist_cache: Vec<f32>,
    layer_gen: u32,
    query_gen: u32,
    stats: SearchStats,
}

impl Searcher {
    fn new(n: usize) -> Self {
        Self {
            visit_stamp: vec![0; n],
            dist_stamp: vec![0; n],
            dist_cache: vec![0.0; n],
            layer_gen: 0,
            query_gen: 0,
            stats: SearchStats::default(),
        }
    }

    fn grow(&mut self, n: usize) {
        if self.visit_stamp.len() < n {
            self.visit_stamp.resize(n, 0);
            self.dist_stamp.resize(n, 0);
            self.dist_cache.resize(n, 0.0);
        }
    }

    fn begin_query(&mut self) {
        self.query_gen = self.query_gen.wrapping_add(1);
        if self.query_gen == 0 {
            self.dist_stamp.iter_mut().for_each(|s| *s = 0);
            self.query_gen = 1;
        }
        self.stats = SearchStats::default();
    }

    fn begin_layer(&mut self) {
        self.layer_gen = self.layer_gen.wrapping_add(1);
        if self.layer_gen == 0 {
            self.visit_stamp.iter_mut().for_each(|s| *s = 0);
            self.layer_gen = 1;
        }
        self.stats.visited_per_layer.push(0);
    }

    /// Returns false if `v` was already visited on the current layer.
    fn visit(&mut self, v: u32) -> bool {
        let slot = &mut self.visit_stamp[v as usize];
        if *slot == self.layer_gen {
            return false;
        }
        *slot = self.layer_gen;
        *self.stats.visited_per_layer.last_mut().unwrap() += 1;
        true
    }
}

#[derive(Debug, Clone)]
pub struct HnswIndex {
    params: HnswParams,
    dim: usize,
    ids: Vec<u64>,
    data: Vec<f32>,
    /// `links[v][layer]`, one list per layer the vertex lives on.
    links: Vec<Vec<Vec<Link>>>,
    entry: Option<u32>,
    max_level: usize,
}

impl HnswIndex {
    /// Indexes the non-degenerate descriptors in input order.
    pub fn build(vectors: &[VladDescriptor], params: HnswParams) -> Result<Self, HnswError> {
        let usable: Vec<&VladDescriptor> = vectors.iter().filter(|v| !v.degenerate).collect();
        if usable.len() < vectors.len() {
            log::warn!("skipping {} degenerate VLAD vectors", vectors.len() - usable.len());
        }
        let dim = usable.first().map_or(0, |v| v.vector.len());
        let mut data = Vec::with_capacity(usable.len() * dim);
        let mut ids = Vec::with_capacity(usable.len());
        for v in usable {
            if v.vector.len() != dim {
                return Err(HnswError::DimensionMismatch { expected: dim, actual: v.vector.len() });
            }
            ids.push(v.image_id);
            data.extend_from_slice(&v.vector);
        }
        Self::build_from_rows(ids, data, dim, params)
    }

    pub fn build_from_rows(ids: Vec<u64>, data: Vec<f32>, dim: usize, params: HnswParams) -> Result<Self, HnswError> {
        params.validate()?;
        if (dim == 0 && !data.is_empty()) || (dim > 0 && data.len() != ids.len() * dim) {
            return Err(HnswError::DimensionMismatch { expected: ids.len() * dim, actual: data.len() });
        }
        let mut seen = std::collections::HashSet::with_capacity(ids.len());
        for &id in &ids {
            if !seen.insert(id) {
                return Err(HnswError::DuplicateImageId(id));
            }
        }
        let n = ids.len();
        let mut index = Self { params, dim, ids, data, links: Vec::with_capacity(n), entry: None, max_level: 0 };
        let mut rng = seed::rng(params.seed);
        let mut searcher = Searcher::new(n);
        for v in 0..n {
            let u: f64 = 1.0 - rng.random::<f64>();
            let level = ((-u.ln() * params.ml).floor() as usize).min(MAX_LEVEL);
            index.insert(v as u32, level, &mut searcher);
        }
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> &HnswParams {
        &self.params
    }

    pub fn max_level(&self) -> usize {
        self.max_level
    }

    pub fn entry_point(&self) -> Option<u64> {
        self.entry.map(|e| self.ids[e as usize])
    }

    pub fn image_ids(&self) -> &[u64] {
        &self.ids
    }

    fn vector(&self, v: u32) -> &[f32] {
        &self.data[v as usize * self.dim..(v as usize + 1) * self.dim]
    }

    fn level_of(&self, v: u32) -> usize {
        self.links[v as usize].len() - 1
    }

    fn cap(&self, layer: usize) -> usize {
        if layer == 0 {
            self.params.m0
        } else {
            self.params.m
        }
    }

    /// Neighbor image ids of the vertex holding `image_id` on `layer`.
    pub fn neighbors(&self, image_id: u64, layer: usize) -> Option<Vec<u64>> {
        let v = self.ids.iter().position(|&i| i == image_id)?;
        let lists = &self.links[v];
        lists.get(layer).map(|l| l.iter().map(|n| self.ids[n.id as usize]).collect())
    }

    fn distance(&self, q: &[f32], v: u32, s: &mut Searcher) -> f32 {
        let vi = v as usize;
        if s.dist_stamp[vi] == s.query_gen {
            return s.dist_cache[vi];
        }
        let d = l2_sq(q, self.vector(v));
        s.dist_stamp[vi] = s.query_gen;
        s.dist_cache[vi] = d;
        s.stats.distance_computations += 1;
        d
    }

    /// Best-first search on one layer; returns up to `ef` keys, nearest first.
    fn search_layer(&self, q: &[f32], entry: &[Key], ef: usize, layer: usize, s: &mut Searcher) -> Vec<Key> {
        s.begin_layer();
        let mut candidates: BinaryHeap<Reverse<Key>> = BinaryHeap::new();
        let mut results: BinaryHeap<Key> = BinaryHeap::new();
        for &k in entry {
            if s.visit(k.1) {
                candidates.push(Reverse(k));
                results.push(k);
                if results.len() > ef {
                    results.pop();
                }
            }
        }
        while let Some(Reverse(c)) = candidates.pop() {
            if results.len() >= ef && c > *results.peek().unwrap() {
                break;
            }
            for link in &self.links[c.1 as usize][layer] {
                if !s.visit(link.id) {
                    continue;
                }
                let key = Key(self.distance(q, link.id, s), link.id);
                if results.len() < ef || key < *results.peek().unwrap() {
                    candidates.push(Reverse(key));
                    results.push(key);
                    if results.len() > ef {
                        results.pop();
                    }
                }
            }
        }
        results.into_sorted_vec()
    }

    /// Diversity heuristic over `candidates` (nearest first), topped up
    /// nearest-first from the pruned ones.
    fn select_neighbors(&self, candidates: &[Key], m: usize) -> Vec<Key> {
        let mut kept: Vec<Key> = Vec::with_capacity(m);
        let mut pruned: Vec<Key> = Vec::new();
        for &c in candidates {
            if kept.len() >= m {
                break;
            }
            let cv = self.vector(c.1);
            let diverse = kept.iter().all(|r| l2_sq(cv, self.vector(r.1)) > c.0);
            if diverse {
                kept.push(c);
            } else {
                pruned.push(c);
            }
        }
        for c in pruned {
            if kept.len() >= m {
                break;
            }
            kept.push(c);
        }
        kept
    }

    fn insert(&mut self, v: u32, level: usize, s: &mut Searcher) {
        s.grow(v as usize + 1);
        self.links.push(vec![Vec::new(); level + 1]);
        let Some(entry) = self.entry else {
            self.entry = Some(v);
            self.max_level = level;
            return;
        };
        s.begin_query();
        let q = self.vector(v).to_vec();
        let mut eps = vec![Key(self.distance(&q, entry, s), entry)];
        for layer in (level + 1..=self.max_level).rev() {
            eps = self.search_layer(&q, &eps, 1, layer, s);
        }
        for layer in (0..=level.min(self.max_level)).rev() {
            let found = self.search_layer(&q, &eps, self.params.ef_construction, layer, s);
            let chosen = self.select_neighbors(&found, self.params.m);
            self.links[v as usize][layer] = chosen.iter().map(|k| Link { id: k.1, dist: k.0 }).collect();
            for k in &chosen {
                self.links[k.1 as usize][layer].push(Link { id: v, dist: k.0 });
                self.shrink(k.1, layer);
            }
            eps = found;
        }
        if level > self.max_level {
            self.entry = Some(v);
            self.max_level = level;
        }
    }

    fn shrink(&mut self, e: u32, layer: usize) {
        let cap = self.cap(layer);
        while self.links[e as usize][layer].len() > cap {
            let list = &self.links[e as usize][layer];
            let mut order: Vec<usize> = (0..list.len()).collect();
            order.sort_by(|&a, &b| Key(list[b].dist, list[b].id).cmp(&Key(list[a].dist, list[a].id)));
            let victim = order
                .iter()
                .copied()
                .find(|&i| self.links[list[i].id as usize][layer].len() > 1)
                .unwrap_or(order[0]);
            let x = self.links[e as usize][layer].remove(victim).id;
            self.links[x as usize][layer].retain(|l| l.id != e);
        }
    }

    fn check_query(&self, query: &[f32]) -> Result<(), HnswError> {
        if self.is_empty() {
            return Err(HnswError::EmptyIndex);
        }
        if query.len() != self.dim {
            return Err(HnswError::DimensionMismatch { expected: self.dim, actual: query.len() });
        }
        Ok(())
    }

    pub fn searcher(&self) -> Searcher {
        Searcher::new(self.len())
    }

    /// k nearest neighbors as `(image_id, distance)`, nearest first.
    pub fn knn_search(&self, query: &[f32], topk: usize, ef_search: usize) -> Result<Vec<(u64, f32)>, HnswError> {
        let mut s = self.searcher();
        self.knn_search_with(&mut s, query, topk, ef_search).map(|(r, _)| r)
    }

    pub fn knn_search_with(
        &self,
        s: &mut Searcher,
        query: &[f32],
        topk: usize,
        ef_search: usize,
    ) -> Result<(Vec<(u64, f32)>, SearchStats), HnswError> {
        self.check_query(query)?;
        s.grow(self.len());
        s.begin_query();
        let entry = self.entry.expect("non-empty index has an entry point");
        let mut eps = vec![Key(self.distance(query, entry, s), entry)];
        for layer in (1..=self.max_level).rev() {
            eps = self.search_layer(query, &eps, 1, layer, s);
        }
        let ef = ef_search.max(topk).max(1);
        let found = self.search_layer(query, &eps, ef, 0, s);
        let mut out: Vec<(u64, f32)> = found.iter().map(|k| (self.ids[k.1 as usize], k.0)).collect();
        out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        out.truncate(topk);
        for r in &mut out {
            r.1 = r.1.sqrt();
        }
        Ok((out, s.stats.clone()))
    }

    /// Checks layer nesting, degree caps, symmetry and list hygiene.
    pub fn audit(&self) -> Result<(), String> {
        let n = self.len();
        if n == 0 {
            return if self.entry.is_none() { Ok(()) } else { Err("empty index with entry point".into()) };
        }
        let entry = self.entry.ok_or("missing entry point")?;
        if self.level_of(entry) != self.max_level {
            return Err("entry point is not on the top layer".into());
        }
        for v in 0..n as u32 {
            let lists = &self.links[v as usize];
            if lists.len() > self.max_level + 1 {
                return Err(format!("vertex {v} lives above the top layer"));
            }
            for (layer, list) in lists.iter().enumerate() {
                if list.len() > self.cap(layer) {
                    return Err(format!("vertex {v} has degree {} on layer {layer}", list.len()));
                }
                let mut seen = std::collections::HashSet::new();
                for l in list {
                    if l.id == v {
                        return Err(format!("self loop at {v}"));
                    }
                    if !seen.insert(l.id) {
                        return Err(format!("duplicate edge {v}-{}", l.id));
                    }
                    // Layer nesting: a neighbor on this layer must live on it.
                    let other = self.links.get(l.id as usize).ok_or("dangling edge")?;
                    if other.len() <= layer {
                        return Err(format!("edge {v}-{} on layer {layer} above the neighbor's level", l.id));
                    }
                    if !other[layer].iter().any(|b| b.id == v) {
                        return Err(format!("edge {v}->{} on layer {layer} is one-way", l.id));
                    }
                }
            }
        }
        Ok(())
    }

    /// Hash over ids and vectors, used to bind a saved graph to its vectors.
    pub fn content_hash(&self) -> [u8; 32] {
        content_hash(&self.ids, &self.data)
    }

    /// Serializes the graph; vectors are referenced by `vector_ref` plus hash.
    pub fn encode(&self, vector_ref: &str) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.put_u32(VERSION);
        let p = &self.params;
        out.put_u32(p.m as u32);
        out.put_u32(p.m0 as u32);
        out.put_u32(p.ef_construction as u32);
        out.put_u32(p.ef_search as u32);
        out.put_f64(p.ml);
        out.put_u64(p.seed);
        out.put_u32(self.dim as u32);
        out.put_u64(self.len() as u64);
        out.put_u64(self.entry.map_or(u64::MAX, |e| e as u64));
        out.put_u32(self.max_level as u32);
        for (v, lists) in self.links.iter().enumerate() {
            out.put_u64(self.ids[v]);
            out.put_u32(lists.len() as u32);
        }
        let records: usize = self.links.iter().map(|l| l.len()).sum();
        out.put_u64(records as u64);
        for (v, lists) in self.links.iter().enumerate() {
            for (layer, list) in lists.iter().enumerate() {
                out.put_u32(layer as u32);
                out.put_u64(v as u64);
                out.put_u32(list.len() as u32);
                for l in list {
                    out.put_u64(l.id as u64);
                }
            }
        }
        out.put_u32(vector_ref.len() as u32);
        out.extend_from_slice(vector_ref.as_bytes());
        out.extend_from_slice(&self.content_hash());
        out
    }

    /// Restores a graph. `vectors` must be the descriptors the graph was built
    /// from; their hash is checked against the stored one.
    pub fn decode(bytes: &[u8], vectors: &[VladDescriptor]) -> Result<(Self, String), HnswError> {
        let mut r = ByteReader::new(bytes);
        let bad = |e: crate::binio::UnexpectedEof| HnswError::Malformed(e.to_string());
        let magic: [u8; 4] = r.array().map_err(bad)?;
        if &magic != MAGIC {
            return Err(HnswError::Malformed("bad magic".into()));
        }
        if r.u32().map_err(bad)? != VERSION {
            return Err(HnswError::Malformed("unsupported version".into()));
        }
        let params = HnswParams {
            m: r.u32().map_err(bad)? as usize,
            m0: r.u32().map_err(bad)? as usize,
            ef_construction: r.u32().map_err(bad)? as usize,
            ef_search: r.u32().map_err(bad)? as usize,
            ml: r.f64().map_err(bad)?,
            seed: r.u64().map_err(bad)?,
        };
        let dim = r.u32().map_err(bad)? as usize;
        let n = r.u64().map_err(bad)? as usize;
        let entry = r.u64().map_err(bad)?;
        let max_level = r.u32().map_err(bad)? as usize;
        let mut ids = Vec::with_capacity(n);
        let mut links: Vec<Vec<Vec<Link>>> = Vec::with_capacity(n);
        for _ in 0..n {
            ids.push(r.u64().map_err(bad)?);
            let layers = r.u32().map_err(bad)? as usize;
            if layers == 0 || layers > MAX_LEVEL + 1 {
                return Err(HnswError::Malformed("bad vertex level".into()));
            }
            links.push(vec![Vec::new(); layers]);
        }
        let records = r.u64().map_err(bad)? as usize;
        for _ in 0..records {
            let layer = r.u32().map_err(bad)? as usize;
            let v = r.u64().map_err(bad)? as usize;
            let degree = r.u32().map_err(bad)? as usize;
            let mut list = Vec::with_capacity(degree);
            for _ in 0..degree {
                let id = r.u64().map_err(bad)?;
                if id as usize >= n {
                    return Err(HnswError::Malformed("neighbor out of range".into()));
                }
                list.push(id as u32);
            }
            let slot = links
                .get_mut(v)
                .and_then(|l| l.get_mut(layer))
                .ok_or_else(|| HnswError::Malformed("adjacency record out of range".into()))?;
            *slot = list.into_iter().map(|id| Link { id, dist: 0.0 }).collect();
        }
        let ref_len = r.u32().map_err(bad)? as usize;
        let vector_ref = String::from_utf8(r.bytes(ref_len).map_err(bad)?.to_vec())
            .map_err(|_| HnswError::Malformed("vector reference is not utf-8".into()))?;
        let stored: [u8; 32] = r.array().map_err(bad)?;

        let by_id: std::collections::HashMap<u64, &VladDescriptor> =
            vectors.iter().map(|v| (v.image_id, v)).collect();
        let mut data = Vec::with_capacity(n * dim);
        for id in &ids {
            let v = by_id.get(id).ok_or(HnswError::VectorHashMismatch)?;
            if v.vector.len() != dim {
                return Err(HnswError::VectorHashMismatch);
            }
            data.extend_from_slice(&v.vector);
        }
        if content_hash(&ids, &data) != stored {
            return Err(HnswError::VectorHashMismatch);
        }
        let mut index = Self {
            params,
            dim,
            ids,
            data,
            links,
            entry: (entry != u64::MAX).then_some(entry as u32),
            max_level,
        };
        // Distances are not serialized; recompute them for later shrinking.
        for v in 0..index.links.len() {
            for layer in 0..index.links[v].len() {
                for i in 0..index.links[v][layer].len() {
                    let other = index.links[v][layer][i].id;
                    let d = l2_sq(index.vector(v as u32), index.vector(other));
                    index.links[v][layer][i].dist = d;
                }
            }
        }
        Ok((index, vector_ref))
    }

    pub fn save(&self, path: &Path, vector_ref: &str) -> Result<(), HnswError> {
        fs::write(path, self.encode(vector_ref))
            .map_err(|source| HnswError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path, vectors: &[VladDescriptor]) -> Result<(Self, String), HnswError> {
        let bytes =
            fs::read(path).map_err(|source| HnswError::Io { path: path.display().to_string(), source })?;
        Self::decode(&bytes, vectors)
    }
}

fn content_hash(ids: &[u64], data: &[f32]) -> [u8; 32] {
    let mut h = Sha256::new();
    for id in ids {
        h.update(id.to_le_bytes());
    }
    for x in data {
        h.update(x.to_le_bytes());
    }
    h.finalize().into()
}

/// Exhaustive k nearest neighbors; ties go to the lower image id.
pub fn brute_force_knn(
    vectors: &[VladDescriptor],
    query: &[f32],
    topk: usize,
) -> Result<Vec<(u64, f32)>, HnswError> {
    let usable: Vec<&VladDescriptor> = vectors.iter().filter(|v| !v.degenerate).collect();
    if usable.is_empty() {
        return Err(HnswError::EmptyInput);
    }
    let mut scored = Vec::with_capacity(usable.len());
    for v in usable {
        if v.vector.len() != query.len() {
            return Err(HnswError::DimensionMismatch { expected: v.vector.len(), actual: query.len() });
        }
        scored.push((v.image_id, l2_sq(query, &v.vector)));
    }
    scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    scored.truncate(topk);
    for s in &mut scored {
        s.1 = s.1.sqrt();
    }
    Ok(scored)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn random_vlads(n: usize, dim: usize, seed: u64) -> Vec<VladDescriptor> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let mut v: Vec<f32> = (0..dim).map(|_| rng.random::<f32>() - 0.5).collect();
                crate::distance::normalize_in_place(&mut v);
                VladDescriptor { image_id: i as u64 * 3 + 1, k: 1, dim, vector: v, degenerate: false }
            })
            .collect()
    }

    fn small_params() -> HnswParams {
        HnswParams { ef_construction: 40, ..HnswParams::with_m(8) }
    }

    #[test]
    fn single_vector_has_no_edges() {
        let v = random_vlads(1, 16, 0);
        let idx = HnswIndex::build(&v, small_params()).unwrap();
        assert_eq!(idx.entry_point(), Some(v[0].image_id));
        assert!(idx.links[0].iter().all(|l| l.is_empty()));
        let r = idx.knn_search(&v[0].vector, 1, 10).unwrap();
        assert_eq!(r, vec![(v[0].image_id, 0.0)]);
    }

    #[test]
    fn two_vectors_share_one_edge() {
        let v = random_vlads(2, 16, 1);
        let idx = HnswIndex::build(&v, small_params()).unwrap();
        assert_eq!(idx.neighbors(v[0].image_id, 0).unwrap(), vec![v[1].image_id]);
        assert_eq!(idx.neighbors(v[1].image_id, 0).unwrap(), vec![v[0].image_id]);
        idx.audit().unwrap();
    }

    #[test]
    fn structural_audit_after_build() {
        let v = random_vlads(600, 24, 2);
        let idx = HnswIndex::build(&v, small_params()).unwrap();
        idx.audit().unwrap();
        assert!(idx.max_level() >= 1);
    }

    #[test]
    fn full_width_search_equals_brute_force() {
        let v = random_vlads(300, 32, 3);
        let idx = HnswIndex::build(&v, small_params()).unwrap();
        let queries = random_vlads(20, 32, 4);
        for q in &queries {
            let a = idx.knn_search(&q.vector, 300, 300).unwrap();
            let b = brute_force_knn(&v, &q.vector, 300).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn self_query_returns_itself_at_zero() {
        let v = random_vlads(200, 16, 5);
        let idx = HnswIndex::build(&v, small_params()).unwrap();
        for q in v.iter().take(20) {
            let r = idx.knn_search(&q.vector, 1, 32).unwrap();
            assert_eq!(r[0], (q.image_id, 0.0));
        }
    }

    #[test]
    fn search_stats_respect_visit_contract() {
        let v = random_vlads(400, 16, 6);
        let idx = HnswIndex::build(&v, small_params()).unwrap();
        let mut s = idx.searcher();
        for q in random_vlads(10, 16, 7) {
            let (_, stats) = idx.knn_search_with(&mut s, &q.vector, 10, 400).unwrap();
            assert!(stats.distance_computations <= idx.len());
            assert!(stats.visited_per_layer.iter().all(|&c| c <= idx.len()));
            assert!(!stats.revisited);
        }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let v = random_vlads(150, 8, 8);
        let a = HnswIndex::build(&v, small_params()).unwrap();
        let b = HnswIndex::build(&v, small_params()).unwrap();
        assert_eq!(a.encode("x"), b.encode("x"));
    }

    #[test]
    fn errors() {
        let mut v = random_vlads(3, 8, 9);
        v[2].image_id = v[0].image_id;
        assert!(matches!(HnswIndex::build(&v, small_params()), Err(HnswError::DuplicateImageId(_))));
        let mut v = random_vlads(3, 8, 9);
        v[1].vector.pop();
        assert!(matches!(HnswIndex::build(&v, small_params()), Err(HnswError::DimensionMismatch { .. })));
        let empty = HnswIndex::build(&[], small_params()).unwrap();
        assert!(matches!(empty.knn_search(&[0.0; 8], 1, 1), Err(HnswError::EmptyIndex)));
        let idx = HnswIndex::build(&random_vlads(3, 8, 9), small_params()).unwrap();
        assert!(matches!(idx.knn_search(&[0.0; 7], 1, 1), Err(HnswError::DimensionMismatch { .. })));
        assert!(HnswIndex::build(&[], HnswParams { m: 1, ..small_params() }).is_err());
        assert!(HnswIndex::build(&[], HnswParams { ef_construction: 4, ..small_params() }).is_err());
        assert!(matches!(brute_force_knn(&[], &[0.0], 1), Err(HnswError::EmptyInput)));
    }

    #[test]
    fn degenerate_vectors_are_not_indexed() {
        let mut v = random_vlads(5, 8, 10);
        v[2].vector = vec![0.0; 8];
        v[2].degenerate = true;
        let idx = HnswIndex::build(&v, small_params()).unwrap();
        assert_eq!(idx.len(), 4);
        assert!(!idx.image_ids().contains(&v[2].image_id));
    }

    #[test]
    fn brute_force_ties_prefer_lower_id() {
        let mk = |id, x: f32| VladDescriptor { image_id: id, k: 1, dim: 1, vector: vec![x], degenerate: false };
        let v = vec![mk(9, 1.0), mk(4, -1.0), mk(7, 3.0)];
        let r = brute_force_knn(&v, &[0.0], 3).unwrap();
        assert_eq!(r.iter().map(|x| x.0).collect::<Vec<_>>(), vec![4, 9, 7]);
        assert_eq!(brute_force_knn(&v[..1], &[5.0], 4).unwrap(), vec![(9, 4.0)]);
    }

    #[test]
    fn brute_force_matches_independent_scan() {
        let v = random_vlads(120, 12, 11);
        for q in random_vlads(10, 12, 12) {
            let mut oracle: Vec<(f64, u64)> = v
                .iter()
                .map(|x| {
                    let d: f64 = x.vector.iter().zip(&q.vector).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
                    (d, x.image_id)
                })
                .collect();
            oracle.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let got = brute_force_knn(&v, &q.vector, 15).unwrap();
            let ids: Vec<u64> = got.iter().map(|g| g.0).collect();
            let want: Vec<u64> = oracle.iter().take(15).map(|o| o.1).collect();
            assert_eq!(ids, want);
            for (g, o) in got.iter().zip(&oracle) {
                assert!((g.1 as f64 - o.0.sqrt()).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn file_round_trip_checks_vector_hash() {
        let v = random_vlads(80, 8, 13);
        let idx = HnswIndex::build(&v, small_params()).unwrap();
        let bytes = idx.encode("vlad.uvl");
        assert_eq!(&bytes[..4], b"UVH1");
        let (back, r) = HnswIndex::decode(&bytes, &v).unwrap();
        assert_eq!(r, "vlad.uvl");
        assert_eq!(back.encode("vlad.uvl"), bytes);
        back.audit().unwrap();
        let q = &v[5].vector;
        assert_eq!(back.knn_search(q, 5, 20).unwrap(), idx.knn_search(q, 5, 20).unwrap());
        let mut other = v.clone();
        other[3].vector[0] += 0.5;
        assert!(matches!(HnswIndex::decode(&bytes, &other), Err(HnswError::VectorHashMismatch)));
    }
}
