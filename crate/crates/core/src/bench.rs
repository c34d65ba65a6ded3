//! Benchmark harness comparing VLAD+HNSW, exhaustive VLAD search and the
//! vocabulary-tree BoW baseline on a synthetic collection.
//!
//! Images are generated in chunks and dropped after encoding, so memory stays
//! bounded by the global vectors. Every method returns the same fixed number
//! of neighbors per query; the union of the resulting unordered pairs is
//! scored against the footprint-overlap ground truth.
//!
//! Timings are wall-clock. `aggregation` is descriptor encoding (VLAD
//! aggregation or vocabulary quantization), `index` is HNSW construction or
//! inverted-file construction, `query` covers every query, and `total` is the
//! sum of the three. Codebook and vocabulary training happen once, offline,
//! and are reported separately.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::bow::{self, BowDatabase, VocabularyTree};
use crate::codebook::{sampled_image_count, train_codebook, Codebook, KMeansParams};
use crate::descriptor::{unit_descriptor, DescriptorSet, DESCRIPTOR_DIM};
use crate::hnsw::{brute_force_knn, HnswIndex, HnswParams};
use crate::seed;
use crate::synthetic::{Layout, SyntheticConfig, SyntheticWorld};
use crate::vlad::{aggregate_vlad, VladDescriptor};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("unknown benchmark method `{0}` (expected vlad_hnsw, vlad_brute or bow)")]
    UnknownMethod(String),
    #[error("invalid benchmark config: {0}")]
    InvalidConfig(String),
    #[error("{stage}: {message}")]
    Stage { stage: &'static str, message: String },
}

fn stage_err(stage: &'static str) -> impl Fn(&dyn std::fmt::Display) -> BenchError {
    move |e| BenchError::Stage { stage, message: e.to_string() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Method {
    VladHnsw,
    VladBrute,
    Bow,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::VladHnsw => "vlad_hnsw",
            Method::VladBrute => "vlad_brute",
            Method::Bow => "bow",
        }
    }
}

impl FromStr for Method {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "vlad_hnsw" => Ok(Method::VladHnsw),
            "vlad_brute" => Ok(Method::VladBrute),
            "bow" => Ok(Method::Bow),
            other => Err(BenchError::UnknownMethod(other.to_string())),
        }
    }
}

/// Parses a comma-separated method list. An empty list is an error.
pub fn parse_methods(list: &str) -> Result<Vec<Method>, BenchError> {
    let methods: Vec<Method> =
        list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect::<Result<_, _>>()?;
    if methods.is_empty() {
        return Err(BenchError::UnknownMethod(String::new()));
    }
    let mut methods = methods;
    methods.sort();
    methods.dedup();
    Ok(methods)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub synthetic: SyntheticConfig,
    pub codebook_k: usize,
    /// Fraction of images whose features train the codebook and vocabulary.
    pub sample_fraction: f64,
    pub sample_features: usize,
    pub kmeans_max_iters: usize,
    pub hnsw: HnswParams,
    /// Neighbors returned per query, excluding the query itself.
    pub depth: usize,
    /// Depth at which HNSW results are compared with exhaustive search.
    pub recall_k: usize,
    /// Number of evenly spaced query images; `None` queries every image.
    pub query_count: Option<usize>,
    /// Evenly spaced subset of the queries answered by exhaustive search,
    /// both for the `vlad_brute` method and as the recall@k reference.
    /// `None` uses every query.
    pub brute_query_count: Option<usize>,
    pub vocab_branching: usize,
    pub vocab_depth: usize,
    /// Images generated per encoding batch.
    pub chunk: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            synthetic: SyntheticConfig {
                n_images: 5000,
                features_per_image: 2000,
                layout: Layout::Grid { cols: 100 },
                ..SyntheticConfig::default()
            },
            codebook_k: 32,
            sample_fraction: 0.02,
            sample_features: 1500,
            kmeans_max_iters: 50,
            hnsw: HnswParams::default(),
            depth: 30,
            recall_k: 10,
            query_count: None,
            brute_query_count: None,
            vocab_branching: 10,
            vocab_depth: 4,
            chunk: 256,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: &str| Err(BenchError::InvalidConfig(m.to_string()));
        self.synthetic.validate().map_err(|e| BenchError::InvalidConfig(e.to_string()))?;
        self.hnsw.validate().map_err(|e| BenchError::InvalidConfig(e.to_string()))?;
        if self.depth == 0 || self.depth >= self.synthetic.n_images {
            return bad("depth must lie in [1, n_images)");
        }
        if self.recall_k == 0 || self.recall_k > self.depth {
            return bad("recall_k must lie in [1, depth]");
        }
        if self.codebook_k == 0 || self.sample_features == 0 || self.chunk == 0 {
            return bad("codebook_k, sample_features and chunk must be positive");
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return bad("sample_fraction must lie in (0,1]");
        }
        if self.query_count == Some(0) || self.brute_query_count == Some(0) {
            return bad("query counts must be positive");
        }
        Ok(())
    }

    /// Applies one `key=value` setting; synthetic keys are forwarded to the
    /// generator config.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), BenchError> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T, BenchError> {
            value.trim().parse().map_err(|_| BenchError::InvalidConfig(format!("bad value `{value}` for {key}")))
        }
        match key {
            "codebook_k" => self.codebook_k = num(key, value)?,
            "sample_fraction" => self.sample_fraction = num(key, value)?,
            "sample_features" => self.sample_features = num(key, value)?,
            "kmeans_max_iters" => self.kmeans_max_iters = num(key, value)?,
            "hnsw_m" => {
                let m = num(key, value)?;
                self.hnsw = HnswParams {
                    ef_construction: self.hnsw.ef_construction,
                    ef_search: self.hnsw.ef_search,
                    seed: self.hnsw.seed,
                    ..HnswParams::with_m(m)
                };
            }
            "ef_construction" => self.hnsw.ef_construction = num(key, value)?,
            "ef_search" => self.hnsw.ef_search = num(key, value)?,
            "depth" => self.depth = num(key, value)?,
            "recall_k" => self.recall_k = num(key, value)?,
            "query_count" => self.query_count = Some(num(key, value)?),
            "brute_query_count" => self.brute_query_count = Some(num(key, value)?),
            "vocab_branching" => self.vocab_branching = num(key, value)?,
            "vocab_depth" => self.vocab_depth = num(key, value)?,
            "chunk" => self.chunk = num(key, value)?,
            "seed" => {
                self.seed = num(key, value)?;
                self.synthetic.seed = self.seed;
            }
            _ => {
                let known = self.synthetic.set(key, value).map_err(|e| BenchError::InvalidConfig(e.to_string()))?;
                if !known {
                    return Err(BenchError::InvalidConfig(format!("unknown key `{key}`")));
                }
            }
        }
        Ok(())
    }

    fn queries(&self) -> Vec<usize> {
        evenly_spaced(&(0..self.synthetic.n_images).collect::<Vec<_>>(), self.query_count)
    }

    fn brute_queries(&self) -> Vec<usize> {
        evenly_spaced(&self.queries(), self.brute_query_count)
    }
}

fn evenly_spaced(items: &[usize], count: Option<usize>) -> Vec<usize> {
    let n = items.len();
    match count {
        Some(q) if q < n => (0..q).map(|t| items[t * n / q]).collect(),
        _ => items.to_vec(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodReport {
    pub method: String,
    /// Offline codebook or vocabulary training.
    pub training_s: f64,
    pub aggregation_s: f64,
    pub index_s: f64,
    pub query_s: f64,
    pub total_s: f64,
    pub query_latency_ms: f64,
    pub pairs: usize,
    pub correct_pairs: usize,
    pub precision: f64,
    pub recall: f64,
    /// Mean overlap of the first `recall_k` neighbors with exhaustive VLAD
    /// search; absent for BoW.
    pub recall_at_k: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Speedup {
    pub baseline: String,
    pub method: String,
    pub query_ratio: f64,
    pub total_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub parameter: String,
    pub value: usize,
    pub aggregation_s: f64,
    pub index_s: f64,
    pub query_s: f64,
    pub precision: f64,
    pub recall: f64,
    pub recall_at_k: f64,
    pub distance_computations_per_query: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkReport {
    pub n_images: usize,
    pub queries: usize,
    pub depth: usize,
    pub recall_k: usize,
    pub codebook_k: usize,
    pub vlad_dim: usize,
    pub vocabulary_words: Option<usize>,
    pub ground_truth_pairs: usize,
    pub methods: Vec<MethodReport>,
    pub speedups: Vec<Speedup>,
    pub sweeps: Vec<SweepPoint>,
}

impl BenchmarkReport {
    pub fn method(&self, m: Method) -> Option<&MethodReport> {
        self.methods.iter().find(|r| r.method == m.name())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per method followed by one row per sweep point.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "kind,name,value,training_s,aggregation_s,index_s,query_s,total_s,precision,recall,recall_at_k\n",
        );
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for m in &self.methods {
            let _ = writeln!(
                out,
                "method,{},,{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
                m.method,
                m.training_s,
                m.aggregation_s,
                m.index_s,
                m.query_s,
                m.total_s,
                m.precision,
                m.recall,
                opt(m.recall_at_k)
            );
        }
        for s in &self.sweeps {
            let _ = writeln!(
                out,
                "sweep,{},{},,{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                s.parameter,
                s.value,
                s.aggregation_s,
                s.index_s,
                s.query_s,
                s.aggregation_s + s.index_s + s.query_s,
                s.precision,
                s.recall,
                s.recall_at_k
            );
        }
        out
    }
}

/// Pair precision and recall of the union of per-query neighbor lists.
pub fn score_pairs(
    lists: &[(u64, Vec<u64>)],
    ground_truth: &BTreeSet<(u64, u64)>,
) -> (usize, usize, f64, f64) {
    let queries: BTreeSet<u64> = lists.iter().map(|(q, _)| *q).collect();
    let mut pairs = BTreeSet::new();
    for (q, neighbors) in lists {
        for &n in neighbors {
            if n != *q {
                pairs.insert((n.min(*q), n.max(*q)));
            }
        }
    }
    let correct = pairs.iter().filter(|p| ground_truth.contains(p)).count();
    let reachable =
        ground_truth.iter().filter(|(a, b)| queries.contains(a) || queries.contains(b)).count();
    let precision = if pairs.is_empty() { 0.0 } else { correct as f64 / pairs.len() as f64 };
    let recall = if reachable == 0 { 1.0 } else { correct as f64 / reachable as f64 };
    (pairs.len(), correct, precision, recall)
}

/// Mean fraction of `truth`'s first `k` ids present in `found`'s first `k`,
/// over the queries listed in `truth`.
pub fn recall_at(found: &[(u64, Vec<u64>)], truth: &[(u64, Vec<u64>)], k: usize) -> f64 {
    if truth.is_empty() {
        return 1.0;
    }
    let found: std::collections::BTreeMap<u64, &Vec<u64>> = found.iter().map(|(q, l)| (*q, l)).collect();
    let total: f64 = truth
        .iter()
        .map(|(q, t)| {
            let want: BTreeSet<u64> = t.iter().take(k).copied().collect();
            if want.is_empty() {
                return 1.0;
            }
            let hits = found.get(q).map_or(0, |f| f.iter().take(k).filter(|id| want.contains(id)).count());
            hits as f64 / want.len() as f64
        })
        .sum();
    total / truth.len() as f64
}

fn drop_self(query: u64, ids: impl Iterator<Item = u64>, depth: usize) -> Vec<u64> {
    ids.filter(|&id| id != query).take(depth).collect()
}

/// Training descriptors: the largest-scale features of a seeded image sample.
fn training_rows(world: &SyntheticWorld, cfg: &BenchConfig) -> Vec<f32> {
    let n = world.len();
    let pick = sampled_image_count(n, cfg.sample_fraction);
    let mut rng = seed::rng(seed::derive(cfg.seed, "sampling"));
    let mut ids = rand::seq::index::sample(&mut rng, n, pick).into_vec();
    ids.sort_unstable();
    let per_image: Vec<Vec<f32>> = ids
        .par_iter()
        .map(|&i| {
            let set = world.image(i);
            let mut order: Vec<usize> = (0..set.features.len()).collect();
            order.sort_by(|&a, &b| set.features[b].scale.total_cmp(&set.features[a].scale));
            order
                .iter()
                .take(cfg.sample_features)
                .flat_map(|&f| unit_descriptor(&set.features[f].descriptor))
                .collect()
        })
        .collect();
    per_image.concat()
}

fn train_k(rows: &[f32], k: usize, cfg: &BenchConfig) -> Result<(Codebook, f64), BenchError> {
    let clock = Instant::now();
    let mut params = KMeansParams::new(k, seed::derive(cfg.seed, "kmeans"));
    params.max_iters = cfg.kmeans_max_iters;
    let cb = train_codebook(rows, DESCRIPTOR_DIM, &params).map_err(|e| stage_err("codebook")(&e))?;
    Ok((cb, clock.elapsed().as_secs_f64()))
}

/// Encoded collection: VLADs per codebook and BoW term counts, with the
/// wall-clock time spent encoding (generation excluded).
struct Encoded {
    vlads: Vec<Vec<VladDescriptor>>,
    vlad_s: Vec<f64>,
    counts: Vec<(u64, Vec<(u32, u32)>)>,
    bow_s: f64,
}

fn encode_collection(
    world: &SyntheticWorld,
    cfg: &BenchConfig,
    codebooks: &[&Codebook],
    tree: Option<&VocabularyTree>,
) -> Result<Encoded, BenchError> {
    let n = world.len();
    let mut out = Encoded {
        vlads: vec![Vec::with_capacity(n); codebooks.len()],
        vlad_s: vec![0.0; codebooks.len()],
        counts: Vec::new(),
        bow_s: 0.0,
    };
    for start in (0..n).step_by(cfg.chunk) {
        let end = (start + cfg.chunk).min(n);
        let sets: Vec<DescriptorSet> = (start..end).into_par_iter().map(|i| world.image(i)).collect();
        for (c, cb) in codebooks.iter().enumerate() {
            let clock = Instant::now();
            let vlads: Vec<VladDescriptor> = sets
                .par_iter()
                .map(|s| aggregate_vlad(s, cb))
                .collect::<Result<_, _>>()
                .map_err(|e| stage_err("aggregation")(&e))?;
            out.vlad_s[c] += clock.elapsed().as_secs_f64();
            out.vlads[c].extend(vlads);
        }
        if let Some(tree) = tree {
            let clock = Instant::now();
            let counts: Vec<(u64, Vec<(u32, u32)>)> = sets
                .par_iter()
                .map(|s| bow::quantize_image(tree, s).map(|c| (s.image_id, c)))
                .collect::<Result<_, _>>()
                .map_err(|e| stage_err("quantization")(&e))?;
            out.bow_s += clock.elapsed().as_secs_f64();
            out.counts.extend(counts);
        }
    }
    Ok(out)
}

struct HnswRun {
    index_s: f64,
    query_s: f64,
    lists: Vec<(u64, Vec<u64>)>,
    distance_computations: f64,
}

fn run_hnsw(vlads: &[VladDescriptor], queries: &[usize], cfg: &BenchConfig, params: HnswParams) -> Result<HnswRun, BenchError> {
    let clock = Instant::now();
    let index = HnswIndex::build(vlads, params).map_err(|e| stage_err("index")(&e))?;
    let index_s = clock.elapsed().as_secs_f64();
    let ef = params.ef_search.max(cfg.depth + 1);
    let clock = Instant::now();
    let results: Vec<((u64, Vec<u64>), usize)> = queries
        .par_iter()
        .map_init(
            || index.searcher(),
            |s, &q| {
                let v = &vlads[q];
                let (hits, stats) = index
                    .knn_search_with(s, &v.vector, cfg.depth + 1, ef)
                    .map_err(|e| stage_err("query")(&e))?;
                Ok(((v.image_id, drop_self(v.image_id, hits.into_iter().map(|h| h.0), cfg.depth)), stats.distance_computations))
            },
        )
        .collect::<Result<_, BenchError>>()?;
    let query_s = clock.elapsed().as_secs_f64();
    let distance_computations = results.iter().map(|r| r.1 as f64).sum::<f64>() / queries.len().max(1) as f64;
    Ok(HnswRun { index_s, query_s, lists: results.into_iter().map(|r| r.0).collect(), distance_computations })
}

/// Neighbor ids per query image.
type NeighborLists = Vec<(u64, Vec<u64>)>;

fn run_brute(vlads: &[VladDescriptor], queries: &[usize], depth: usize) -> Result<(f64, NeighborLists), BenchError> {
    let clock = Instant::now();
    let lists = queries
        .par_iter()
        .map(|&q| {
            let v = &vlads[q];
            let hits = brute_force_knn(vlads, &v.vector, depth + 1).map_err(|e| stage_err("query")(&e))?;
            Ok((v.image_id, drop_self(v.image_id, hits.into_iter().map(|h| h.0), depth)))
        })
        .collect::<Result<Vec<_>, BenchError>>()?;
    Ok((clock.elapsed().as_secs_f64(), lists))
}

fn method_report(
    method: Method,
    times: [f64; 4],
    lists: &[(u64, Vec<u64>)],
    gt: &BTreeSet<(u64, u64)>,
    recall_at_k: Option<f64>,
) -> MethodReport {
    let [training_s, aggregation_s, index_s, query_s] = times;
    let (pairs, correct_pairs, precision, recall) = score_pairs(lists, gt);
    MethodReport {
        method: method.name().into(),
        training_s,
        aggregation_s,
        index_s,
        query_s,
        total_s: aggregation_s + index_s + query_s,
        query_latency_ms: 1000.0 * query_s / lists.len().max(1) as f64,
        pairs,
        correct_pairs,
        precision,
        recall,
        recall_at_k,
    }
}

/// Runs the selected methods on one synthetic collection.
pub fn run_benchmark(cfg: &BenchConfig, methods: &[Method]) -> Result<BenchmarkReport, BenchError> {
    if methods.is_empty() {
        return Err(BenchError::UnknownMethod(String::new()));
    }
    cfg.validate()?;
    let world = SyntheticWorld::new(cfg.synthetic.clone()).map_err(|e| BenchError::InvalidConfig(e.to_string()))?;
    let gt = world.ground_truth_pairs();
    let queries = cfg.queries();
    let rows = training_rows(&world, cfg);
    let uses_vlad = methods.iter().any(|m| *m != Method::Bow);

    let codebook = if uses_vlad { Some(train_k(&rows, cfg.codebook_k, cfg)?) } else { None };
    let tree = if methods.contains(&Method::Bow) {
        let clock = Instant::now();
        let tree = bow::train_vocabulary(&rows, DESCRIPTOR_DIM, cfg.vocab_branching, cfg.vocab_depth, seed::derive(cfg.seed, "vocabulary"))
            .map_err(|e| stage_err("vocabulary")(&e))?;
        Some((tree, clock.elapsed().as_secs_f64()))
    } else {
        None
    };
    drop(rows);
    let codebooks: Vec<&Codebook> = codebook.iter().map(|c| &c.0).collect();
    let enc = encode_collection(&world, cfg, &codebooks, tree.as_ref().map(|t| &t.0))?;
    log::info!("encoded {} images", world.len());

    let mut reports = Vec::new();
    let mut brute_lists = None;
    if let Some((_, train_s)) = &codebook {
        let vlads = &enc.vlads[0];
        if methods.contains(&Method::VladHnsw) || methods.contains(&Method::VladBrute) {
            let (brute_s, lists) = run_brute(vlads, &cfg.brute_queries(), cfg.depth)?;
            if methods.contains(&Method::VladBrute) {
                reports.push(method_report(Method::VladBrute, [*train_s, enc.vlad_s[0], 0.0, brute_s], &lists, &gt, Some(1.0)));
            }
            brute_lists = Some(lists);
        }
        if methods.contains(&Method::VladHnsw) {
            let params = HnswParams { seed: seed::derive(cfg.seed, "hnsw"), ..cfg.hnsw };
            let run = run_hnsw(vlads, &queries, cfg, params)?;
            let r = brute_lists.as_ref().map(|b| recall_at(&run.lists, b, cfg.recall_k));
            reports.push(method_report(Method::VladHnsw, [*train_s, enc.vlad_s[0], run.index_s, run.query_s], &run.lists, &gt, r));
        }
    }
    if let Some((tree, train_s)) = &tree {
        let clock = Instant::now();
        let db: BowDatabase = bow::build_from_counts(tree.word_count(), &enc.counts).map_err(|e| stage_err("inverted file")(&e))?;
        let index_s = clock.elapsed().as_secs_f64();
        let clock = Instant::now();
        let lists = queries
            .par_iter()
            .map(|&q| {
                let v = &db.vectors[q];
                let hits = bow::bow_query(&db, v, cfg.depth + 1).map_err(|e| stage_err("query")(&e))?;
                Ok((v.image_id, drop_self(v.image_id, hits.into_iter().map(|h| h.0), cfg.depth)))
            })
            .collect::<Result<Vec<_>, BenchError>>()?;
        let query_s = clock.elapsed().as_secs_f64();
        reports.push(method_report(Method::Bow, [*train_s, enc.bow_s, index_s, query_s], &lists, &gt, None));
    }
    reports.sort_by_key(|r| r.method.parse::<Method>().ok());

    let mut speedups = Vec::new();
    for baseline in [Method::Bow, Method::VladBrute] {
        let (Some(b), Some(h)) = (
            reports.iter().find(|r| r.method == baseline.name()),
            reports.iter().find(|r| r.method == Method::VladHnsw.name()),
        ) else {
            continue;
        };
        speedups.push(Speedup {
            baseline: baseline.name().into(),
            method: Method::VladHnsw.name().into(),
            query_ratio: b.query_s / h.query_s.max(f64::MIN_POSITIVE),
            total_ratio: b.total_s / h.total_s.max(f64::MIN_POSITIVE),
        });
    }
    Ok(BenchmarkReport {
        n_images: world.len(),
        queries: queries.len(),
        depth: cfg.depth,
        recall_k: cfg.recall_k,
        codebook_k: cfg.codebook_k,
        vlad_dim: cfg.codebook_k * DESCRIPTOR_DIM,
        vocabulary_words: tree.as_ref().map(|t| t.0.word_count()),
        ground_truth_pairs: gt.len(),
        methods: reports,
        speedups,
        sweeps: Vec::new(),
    })
}

/// VLAD+HNSW retrieval for each codebook size. Every codebook is trained
/// on the same sample and every index uses the configured HNSW parameters.
pub fn sweep_codebook_size(cfg: &BenchConfig, ks: &[usize]) -> Result<Vec<SweepPoint>, BenchError> {
    cfg.validate()?;
    let world = SyntheticWorld::new(cfg.synthetic.clone()).map_err(|e| BenchError::InvalidConfig(e.to_string()))?;
    let gt = world.ground_truth_pairs();
    let queries = cfg.queries();
    let rows = training_rows(&world, cfg);
    let mut points = Vec::new();
    for &k in ks {
        let (cb, _) = train_k(&rows, k, cfg)?;
        let enc = encode_collection(&world, cfg, &[&cb], None)?;
        let vlads = &enc.vlads[0];
        let params = HnswParams { seed: seed::derive(cfg.seed, "hnsw"), ..cfg.hnsw };
        let run = run_hnsw(vlads, &queries, cfg, params)?;
        let (_, brute) = run_brute(vlads, &cfg.brute_queries(), cfg.depth)?;
        let (_, _, precision, recall) = score_pairs(&run.lists, &gt);
        log::info!("k={k}: precision {precision:.4}, aggregation {:.2}s, index {:.2}s", enc.vlad_s[0], run.index_s);
        points.push(SweepPoint {
            parameter: "k".into(),
            value: k,
            aggregation_s: enc.vlad_s[0],
            index_s: run.index_s,
            query_s: run.query_s,
            precision,
            recall,
            recall_at_k: recall_at(&run.lists, &brute, cfg.recall_k),
            distance_computations_per_query: run.distance_computations,
        });
    }
    Ok(points)
}

/// VLAD+HNSW retrieval for each friend number on one encoded collection.
pub fn sweep_friend_number(cfg: &BenchConfig, ms: &[usize]) -> Result<Vec<SweepPoint>, BenchError> {
    cfg.validate()?;
    let world = SyntheticWorld::new(cfg.synthetic.clone()).map_err(|e| BenchError::InvalidConfig(e.to_string()))?;
    let gt = world.ground_truth_pairs();
    let queries = cfg.queries();
    let rows = training_rows(&world, cfg);
    let (cb, _) = train_k(&rows, cfg.codebook_k, cfg)?;
    drop(rows);
    let enc = encode_collection(&world, cfg, &[&cb], None)?;
    let vlads = &enc.vlads[0];
    let (_, brute) = run_brute(vlads, &cfg.brute_queries(), cfg.depth)?;
    let mut points = Vec::new();
    for &m in ms {
        let params = HnswParams {
            ef_construction: cfg.hnsw.ef_construction.max(m),
            ef_search: cfg.hnsw.ef_search,
            seed: seed::derive(cfg.seed, "hnsw"),
            ..HnswParams::with_m(m)
        };
        let run = run_hnsw(vlads, &queries, cfg, params)?;
        let (_, _, precision, recall) = score_pairs(&run.lists, &gt);
        log::info!("M={m}: index {:.2}s, query {:.2}s", run.index_s, run.query_s);
        points.push(SweepPoint {
            parameter: "M".into(),
            value: m,
            aggregation_s: enc.vlad_s[0],
            index_s: run.index_s,
            query_s: run.query_s,
            precision,
            recall,
            recall_at_k: recall_at(&run.lists, &brute, cfg.recall_k),
            distance_computations_per_query: run.distance_computations,
        });
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_parsing() {
        assert_eq!(parse_methods("bow,vlad_hnsw").unwrap(), vec![Method::VladHnsw, Method::Bow]);
        assert!(matches!(parse_methods(""), Err(BenchError::UnknownMethod(_))));
        assert!(matches!(parse_methods(" , "), Err(BenchError::UnknownMethod(_))));
        assert!(matches!(parse_methods("vlad_hnsw,faiss"), Err(BenchError::UnknownMethod(m)) if m == "faiss"));
    }

    #[test]
    fn pair_scoring_counts_unordered_union() {
        let gt: BTreeSet<(u64, u64)> = [(0, 1), (1, 2), (2, 3)].into_iter().collect();
        let lists = vec![(0, vec![1, 3]), (1, vec![0, 2])];
        let (pairs, correct, p, r) = score_pairs(&lists, &gt);
        // {0,1} {0,3} {1,2}; gt pairs touching queries 0 or 1: {0,1} {1,2}.
        assert_eq!((pairs, correct), (3, 2));
        assert!((p - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r, 1.0);
    }

    #[test]
    fn recall_against_truth() {
        let truth = vec![(0, vec![1, 2, 3]), (5, vec![6, 7, 8])];
        let found = vec![(0, vec![2, 1, 9]), (3, vec![1]), (5, vec![9, 9, 9])];
        assert!((recall_at(&found, &truth, 2) - 0.5).abs() < 1e-12);
        assert!((recall_at(&found, &truth[..1], 2) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_method_set_is_rejected() {
        assert!(matches!(run_benchmark(&BenchConfig::default(), &[]), Err(BenchError::UnknownMethod(_))));
    }

    #[test]
    fn small_run_reports_sane_values() {
        let mut cfg = BenchConfig::default();
        cfg.synthetic.n_images = 60;
        cfg.synthetic.layout = Layout::Grid { cols: 10 };
        cfg.synthetic.features_per_image = 200;
        cfg.sample_fraction = 0.2;
        cfg.sample_features = 200;
        cfg.codebook_k = 8;
        cfg.vocab_depth = 2;
        cfg.depth = 10;
        let report = run_benchmark(&cfg, &[Method::VladHnsw, Method::VladBrute, Method::Bow]).unwrap();
        assert_eq!(report.methods.len(), 3);
        for m in &report.methods {
            assert!(m.aggregation_s >= 0.0 && m.index_s >= 0.0 && m.query_s >= 0.0);
            assert!((0.0..=1.0).contains(&m.precision) && (0.0..=1.0).contains(&m.recall));
        }
        let hnsw = report.method(Method::VladHnsw).unwrap();
        let brute = report.method(Method::VladBrute).unwrap();
        // The whole collection fits in one ef_search window.
        assert_eq!(hnsw.recall_at_k, Some(1.0));
        assert_eq!(hnsw.precision, brute.precision);
        assert_eq!(report.to_csv().lines().count(), 4);
    }
}
