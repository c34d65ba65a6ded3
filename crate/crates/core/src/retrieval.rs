//! Adaptive match-pair selection from nearest-neighbor lists.
//!
//! Distances are mapped linearly to similarities in [0, 1]
//! (`s = (d_max - d) / (d_max - d_min)`), a power law `y = a * x^b` is fitted
//! over rank positions by log-log least squares, and candidates scoring above
//! `mu + kappa * delta` of the fitted sample become match pairs.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hnsw::{HnswError, HnswIndex};
use crate::vlad::VladDescriptor;

/// Similarities at or below this are left out of the log-log fit.
pub const FIT_EPSILON: f64 = 1e-6;
const MIN_FIT_SAMPLES: usize = 8;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("empty candidate list")]
    EmptyList,
    #[error("only {positive} positive similarities among the top {sample} ranks; need {MIN_FIT_SAMPLES}")]
    InsufficientSamples { positive: usize, sample: usize },
    #[error("all similarity scores are equal")]
    DegenerateScores,
    #[error("invalid retrieval parameter: {0}")]
    InvalidParameter(String),
    #[error("search failed for image {image_id}: {source}")]
    Search {
        image_id: u64,
        #[source]
        source: HnswError,
    },
    #[error("malformed pair list line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub image_id: u64,
    pub distance: f64,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityList {
    pub query: u64,
    /// Ordered by non-decreasing distance.
    pub candidates: Vec<Candidate>,
    pub d_min: f64,
    pub d_max: f64,
    /// `d_max == d_min`; every similarity was set to 1.
    pub degenerate: bool,
}

impl SimilarityList {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    /// Wraps already-normalized scores, ordered best first, for fitting and
    /// selection. Distances are set to `1 - s`.
    pub fn from_scores(query: u64, scores: &[f64]) -> Self {
        let candidates = scores
            .iter()
            .enumerate()
            .map(|(i, &s)| Candidate { image_id: i as u64, distance: 1.0 - s, similarity: s })
            .collect();
        Self { query, candidates, d_min: 0.0, d_max: 1.0, degenerate: false }
    }
}

/// Linear inverse normalization of an ascending distance list.
pub fn normalize_similarities(query: u64, neighbors: &[(u64, f64)]) -> Result<SimilarityList, RetrievalError> {
    if neighbors.is_empty() {
        return Err(RetrievalError::EmptyList);
    }
    let d_min = neighbors.iter().map(|n| n.1).fold(f64::INFINITY, f64::min);
    let d_max = neighbors.iter().map(|n| n.1).fold(f64::NEG_INFINITY, f64::max);
    let span = d_max - d_min;
    let degenerate = span <= 0.0;
    let candidates = neighbors
        .iter()
        .map(|&(image_id, distance)| Candidate {
            image_id,
            distance,
            similarity: if degenerate { 1.0 } else { (d_max - distance) / span },
        })
        .collect();
    Ok(SimilarityList { query, candidates, d_min, d_max, degenerate })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerFit {
    pub a: f64,
    pub b: f64,
    /// Mean of the fitted similarities.
    pub mu: f64,
    /// Population standard deviation of the fitted similarities.
    pub delta: f64,
    pub samples: usize,
    /// Root-mean-square residual in log space.
    pub log_rmse: f64,
}

impl PowerFit {
    pub fn predict(&self, rank: f64) -> f64 {
        self.a * rank.powf(self.b)
    }
}

/// Least-squares fit of `ln s = ln a + b ln x` over ranks `1..=min(m, sample_count)`.
pub fn fit_power_curve(list: &SimilarityList, sample_count: usize) -> Result<PowerFit, RetrievalError> {
    if list.is_empty() {
        return Err(RetrievalError::EmptyList);
    }
    let sample = &list.candidates[..list.len().min(sample_count.max(1))];
    let first = sample[0].similarity;
    if sample.len() > 1 && sample.iter().all(|c| c.similarity == first) {
        return Err(RetrievalError::DegenerateScores);
    }
    let points: Vec<(f64, f64)> = sample
        .iter()
        .enumerate()
        .filter(|(_, c)| c.similarity > FIT_EPSILON)
        .map(|(i, c)| (((i + 1) as f64).ln(), c.similarity))
        .collect();
    if points.len() < MIN_FIT_SAMPLES {
        return Err(RetrievalError::InsufficientSamples { positive: points.len(), sample: sample.len() });
    }
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1.ln()).sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for &(x, s) in &points {
        sxy += (x - mean_x) * (s.ln() - mean_y);
        sxx += (x - mean_x) * (x - mean_x);
    }
    let b = sxy / sxx;
    let ln_a = mean_y - b * mean_x;
    let log_rmse = (points.iter().map(|&(x, s)| (s.ln() - ln_a - b * x).powi(2)).sum::<f64>() / n).sqrt();
    let mu = points.iter().map(|p| p.1).sum::<f64>() / n;
    let delta = (points.iter().map(|p| (p.1 - mu).powi(2)).sum::<f64>() / n).sqrt();
    Ok(PowerFit { a: ln_a.exp(), b, mu, delta, samples: points.len(), log_rmse })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionLimits {
    pub min_select: usize,
    pub max_select: usize,
}

/// Prefix of candidates scoring above `mu + kappa * delta`, clamped to the
/// selection limits and the list length.
pub fn select_pairs(list: &SimilarityList, fit: &PowerFit, kappa: f64, limits: SelectionLimits) -> Vec<Candidate> {
    let threshold = fit.mu + kappa * fit.delta;
    let above = list.candidates.iter().take_while(|c| c.similarity > threshold).count();
    let count = above.max(limits.min_select).min(limits.max_select).min(list.len());
    list.candidates[..count].to_vec()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub sample_count: usize,
    pub kappa: f64,
    pub min_select: usize,
    pub max_select: usize,
    pub ef_search: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self { sample_count: 300, kappa: 0.4, min_select: 5, max_select: 300, ef_search: 128 }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        if self.sample_count == 0 {
            return Err(RetrievalError::InvalidParameter("sample_count must be >= 1".into()));
        }
        if self.min_select > self.max_select {
            return Err(RetrievalError::InvalidParameter("min_select exceeds max_select".into()));
        }
        if !self.kappa.is_finite() {
            return Err(RetrievalError::InvalidParameter("kappa must be finite".into()));
        }
        Ok(())
    }

    pub fn limits(&self) -> SelectionLimits {
        SelectionLimits { min_select: self.min_select, max_select: self.max_select }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairInfo {
    pub similarity: f64,
    /// Queries whose selection produced this pair, ascending.
    pub found_by: Vec<u64>,
}

/// Unordered image pairs stored as `(i, j)` with `i < j`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchPairCandidateSet {
    pub pairs: BTreeMap<(u64, u64), PairInfo>,
}

impl MatchPairCandidateSet {
    /// Adds a pair, keeping the larger similarity on repeats. Self pairs are ignored.
    pub fn insert(&mut self, a: u64, b: u64, similarity: f64, query: u64) {
        if a == b {
            return;
        }
        let key = (a.min(b), a.max(b));
        let entry = self.pairs.entry(key).or_insert(PairInfo { similarity, found_by: Vec::new() });
        entry.similarity = entry.similarity.max(similarity);
        if let Err(pos) = entry.found_by.binary_search(&query) {
            entry.found_by.insert(pos, query);
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn contains(&self, a: u64, b: u64) -> bool {
        self.pairs.contains_key(&(a.min(b), a.max(b)))
    }

    /// One `i j similarity` line per pair, sorted by `(i, j)`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for ((i, j), info) in &self.pairs {
            writeln!(out, "{i} {j} {:.9}", info.similarity).unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, RetrievalError> {
        let mut set = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |reason: &str| RetrievalError::Malformed { line: n + 1, reason: reason.into() };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(bad("expected `i j similarity`"));
            }
            let i: u64 = fields[0].parse().map_err(|_| bad("bad image id"))?;
            let j: u64 = fields[1].parse().map_err(|_| bad("bad image id"))?;
            let s: f64 = fields[2].parse().map_err(|_| bad("bad similarity"))?;
            if i == j {
                return Err(bad("self pair"));
            }
            set.insert(i, j, s, i.min(j));
        }
        Ok(set)
    }
}

/// Per-query record of the fit and selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryReport {
    pub query: u64,
    pub candidates: usize,
    pub fit: Option<PowerFit>,
    pub fit_error: Option<String>,
    pub threshold: Option<f64>,
    pub selected: usize,
    pub degenerate_distances: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalOutput {
    pub pairs: MatchPairCandidateSet,
    pub reports: Vec<QueryReport>,
}

#[derive(Serialize)]
struct Summary<'a> {
    config: &'a RetrievalConfig,
    pair_count: usize,
    queries: &'a [QueryReport],
}

impl RetrievalOutput {
    pub fn summary_json(&self, cfg: &RetrievalConfig) -> String {
        serde_json::to_string_pretty(&Summary { config: cfg, pair_count: self.pairs.len(), queries: &self.reports })
            .expect("summary serializes")
    }
}

/// Fits and selects for one query. A failed fit falls back to the top
/// `min_select` candidates and is recorded in the report.
pub fn select_for_query(list: &SimilarityList, cfg: &RetrievalConfig) -> (Vec<Candidate>, QueryReport) {
    let mut report = QueryReport {
        query: list.query,
        candidates: list.len(),
        fit: None,
        fit_error: None,
        threshold: None,
        selected: 0,
        degenerate_distances: list.degenerate,
    };
    let chosen = match fit_power_curve(list, cfg.sample_count) {
        Ok(fit) => {
            report.fit = Some(fit);
            report.threshold = Some(fit.mu + cfg.kappa * fit.delta);
            select_pairs(list, &fit, cfg.kappa, cfg.limits())
        }
        Err(e) => {
            report.fit_error = Some(e.to_string());
            list.candidates[..cfg.min_select.min(list.len())].to_vec()
        }
    };
    report.selected = chosen.len();
    (chosen, report)
}

/// Runs kNN retrieval and adaptive selection for every indexed image.
pub fn retrieve_all_pairs(
    index: &HnswIndex,
    vlads: &[VladDescriptor],
    cfg: &RetrievalConfig,
) -> Result<RetrievalOutput, RetrievalError> {
    cfg.validate()?;
    let queries: Vec<&VladDescriptor> = vlads.iter().filter(|v| !v.degenerate).collect();
    let depth = (cfg.sample_count + 1).min(index.len());
    let per_query: Vec<Result<(Vec<Candidate>, QueryReport), RetrievalError>> = queries
        .par_iter()
        .map_init(
            || index.searcher(),
            |searcher, v| {
                let (hits, _) = index
                    .knn_search_with(searcher, &v.vector, depth, cfg.ef_search.max(depth))
                    .map_err(|source| RetrievalError::Search { image_id: v.image_id, source })?;
                let neighbors: Vec<(u64, f64)> =
                    hits.into_iter().filter(|h| h.0 != v.image_id).map(|(id, d)| (id, d as f64)).collect();
                if neighbors.is_empty() {
                    let report = QueryReport {
                        query: v.image_id,
                        candidates: 0,
                        fit: None,
                        fit_error: Some(RetrievalError::EmptyList.to_string()),
                        threshold: None,
                        selected: 0,
                        degenerate_distances: false,
                    };
                    return Ok((Vec::new(), report));
                }
                let list = normalize_similarities(v.image_id, &neighbors)?;
                Ok(select_for_query(&list, cfg))
            },
        )
        .collect();
    let mut out = RetrievalOutput { pairs: MatchPairCandidateSet::default(), reports: Vec::with_capacity(queries.len()) };
    for (v, r) in queries.iter().zip(per_query) {
        let (chosen, report) = r?;
        for c in chosen {
            out.pairs.insert(v.image_id, c.image_id, c.similarity, v.image_id);
        }
        out.reports.push(report);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn limits() -> SelectionLimits {
        SelectionLimits { min_select: 5, max_select: 300 }
    }

    #[test]
    fn linear_normalization() {
        let l = normalize_similarities(0, &[(1, 2.0), (2, 4.0), (3, 6.0)]).unwrap();
        let s: Vec<f64> = l.candidates.iter().map(|c| c.similarity).collect();
        assert_eq!(s, vec![1.0, 0.5, 0.0]);
        assert!(!l.degenerate);
        let l = normalize_similarities(0, &[(1, 3.0), (2, 3.0)]).unwrap();
        assert!(l.degenerate);
        assert!(l.candidates.iter().all(|c| c.similarity == 1.0));
        assert!(matches!(normalize_similarities(0, &[]), Err(RetrievalError::EmptyList)));
    }

    #[test]
    fn exact_power_laws_are_recovered() {
        for &(a, b) in &[(2.0, -0.7), (1.0, -1.0), (0.5, -0.2)] {
            let scores: Vec<f64> = (1..=300).map(|x| a * (x as f64).powf(b)).collect();
            let fit = fit_power_curve(&SimilarityList::from_scores(0, &scores), 300).unwrap();
            assert!((fit.a - a).abs() < 1e-9, "{fit:?}");
            assert!((fit.b - b).abs() < 1e-9, "{fit:?}");
            assert!(fit.log_rmse < 1e-9);
            assert_eq!(fit.samples, 300);
        }
    }

    #[test]
    fn fit_error_cases() {
        let flat = SimilarityList::from_scores(0, &[0.5; 40]);
        assert!(matches!(fit_power_curve(&flat, 300), Err(RetrievalError::DegenerateScores)));
        let few: Vec<f64> = (0..20).map(|i| if i < 5 { 1.0 / (i + 1) as f64 } else { 0.0 }).collect();
        assert!(matches!(
            fit_power_curve(&SimilarityList::from_scores(0, &few), 300),
            Err(RetrievalError::InsufficientSamples { positive: 5, .. })
        ));
    }

    #[test]
    fn sample_count_limits_the_fit() {
        let mut scores: Vec<f64> = (1..=10).map(|x| (x as f64).powf(-0.5)).collect();
        scores.extend(std::iter::repeat_n(0.3, 30));
        let fit = fit_power_curve(&SimilarityList::from_scores(0, &scores), 10).unwrap();
        assert!((fit.b + 0.5).abs() < 1e-12);
        assert_eq!(fit.samples, 10);
    }

    #[test]
    fn head_and_floor_selects_head() {
        let mut scores: Vec<f64> = (1..=20).map(|x| (x as f64).powf(-0.5)).collect();
        scores.extend(std::iter::repeat_n(0.02, 280));
        let list = SimilarityList::from_scores(0, &scores);
        let fit = fit_power_curve(&list, 300).unwrap();
        // Independent evaluation of the threshold from the raw scores.
        let mu = scores.iter().sum::<f64>() / 300.0;
        let var = scores.iter().map(|s| (s - mu) * (s - mu)).sum::<f64>() / 300.0;
        assert!((fit.mu - mu).abs() < 1e-12);
        assert!((fit.delta - var.sqrt()).abs() < 1e-12);
        assert_eq!(select_pairs(&list, &fit, 0.4, limits()).len(), 20);
    }

    #[test]
    fn selection_clamps() {
        let scores: Vec<f64> = (1..=300).map(|x| (x as f64).powf(-0.5)).collect();
        let list = SimilarityList::from_scores(0, &scores);
        let fit = fit_power_curve(&list, 300).unwrap();
        assert_eq!(select_pairs(&list, &fit, 1e6, limits()).len(), 5);
        assert_eq!(select_pairs(&list, &fit, -1e6, limits()).len(), 300);
        let short = SimilarityList::from_scores(0, &scores[..3]);
        assert_eq!(select_pairs(&short, &fit, 1e6, limits()).len(), 3);
    }

    #[test]
    fn failed_fit_falls_back_to_minimum() {
        let list = SimilarityList::from_scores(0, &[0.5; 12]);
        let cfg = RetrievalConfig::default();
        let (chosen, report) = select_for_query(&list, &cfg);
        assert_eq!(chosen.len(), 5);
        assert!(report.fit_error.is_some());
    }

    #[test]
    fn candidate_set_canonicalizes() {
        let mut set = MatchPairCandidateSet::default();
        set.insert(5, 2, 0.3, 5);
        set.insert(2, 5, 0.7, 2);
        set.insert(4, 4, 1.0, 4);
        assert_eq!(set.len(), 1);
        let info = &set.pairs[&(2, 5)];
        assert_eq!(info.similarity, 0.7);
        assert_eq!(info.found_by, vec![2, 5]);
        let text = set.to_text();
        assert_eq!(text, "2 5 0.700000000\n");
        let back = MatchPairCandidateSet::from_text(&text).unwrap();
        assert!(back.contains(5, 2));
        assert!(MatchPairCandidateSet::from_text("1 1 0.5").is_err());
        assert!(MatchPairCandidateSet::from_text("1 x 0.5").is_err());
    }

    proptest! {
        #[test]
        fn normalization_is_affine_and_bounded(mut d in proptest::collection::vec(0.0f64..100.0, 2..300)) {
            d.sort_by(f64::total_cmp);
            let list = normalize_similarities(0, &d.iter().enumerate().map(|(i, &x)| (i as u64, x)).collect::<Vec<_>>()).unwrap();
            let (lo, hi) = (d[0], d[d.len() - 1]);
            for (c, &x) in list.candidates.iter().zip(&d) {
                prop_assert!((0.0..=1.0).contains(&c.similarity));
                if hi > lo {
                    prop_assert!((c.similarity - (hi - x) / (hi - lo)).abs() < 1e-12);
                }
            }
            prop_assert!(list.candidates.windows(2).all(|w| w[0].similarity >= w[1].similarity));
        }

        #[test]
        fn selection_is_a_prefix(scores in proptest::collection::vec(0.0f64..1.0, 10..300), kappa in -3.0f64..3.0) {
            let mut s = scores;
            s.sort_by(|a, b| b.total_cmp(a));
            let list = SimilarityList::from_scores(0, &s);
            if let Ok(fit) = fit_power_curve(&list, 300) {
                let chosen = select_pairs(&list, &fit, kappa, limits());
                prop_assert_eq!(&chosen[..], &list.candidates[..chosen.len()]);
                prop_assert!(chosen.len() >= 5.min(list.len()));
            }
        }
    }
}
