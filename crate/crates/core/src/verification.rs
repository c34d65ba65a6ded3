//! Pairwise descriptor matching and epipolar verification.
//!
//! Matches are exhaustive 2-NN with a ratio test, kept only when they are
//! mutual. A fundamental matrix is then estimated with RANSAC over the
//! Hartley-normalized 8-point solver; pairs keep their inliers if more than
//! `min_inliers` survive.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::seq::index::sample;
use rayon::prelude::*;
use thiserror::Error;

use crate::binio::{ByteReader, PutLe};
use crate::descriptor::{DescriptorSet, DESCRIPTOR_DIM};
use crate::distance::l2_sq;
use crate::retrieval::MatchPairCandidateSet;
use crate::seed;

const MAGIC: &[u8; 4] = b"UVM1";
const VERSION: u32 = 1;
const SAMPLE_SIZE: usize = 8;

#[derive(Debug, Error)]
pub enum VerificationError {
    #[error("descriptor set is empty")]
    EmptySet,
    #[error("need at least 8 matches, got {0}")]
    TooFewMatches(usize),
    #[error("no non-degenerate sample found")]
    DegenerateConfiguration,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("image {0} has no descriptor set")]
    MissingImage(u64),
    #[error("malformed verified pair file: {0}")]
    Malformed(String),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureMatch {
    pub index_a: u32,
    pub index_b: u32,
    /// Euclidean distance between the unit descriptors.
    pub distance: f32,
}

#[derive(Debug, Clone, Copy)]
struct Best2 {
    d1: f32,
    d2: f32,
    idx: u32,
}

impl Best2 {
    const EMPTY: Self = Self { d1: f32::INFINITY, d2: f32::INFINITY, idx: u32::MAX };

    fn offer(&mut self, d: f32, idx: u32) {
        if d < self.d1 {
            self.d2 = self.d1;
            self.d1 = d;
            self.idx = idx;
        } else if d < self.d2 {
            self.d2 = d;
        }
    }

    /// Best index if it passes `d1 < ratio * d2` (compared squared).
    fn accepted(&self, ratio_sq: f64) -> Option<u32> {
        let pass = self.idx != u32::MAX && (self.d1 as f64) < ratio_sq * self.d2 as f64;
        pass.then_some(self.idx)
    }
}

/// Mutual ratio-test matches between two row-major descriptor matrices.
pub fn match_rows(a: &[f32], b: &[f32], dim: usize, ratio: f64) -> Vec<FeatureMatch> {
    let na = a.len() / dim;
    let nb = b.len() / dim;
    let mut rows = vec![Best2::EMPTY; na];
    let mut cols = vec![Best2::EMPTY; nb];
    let mut dists = vec![0f32; nb];
    for (i, ra) in a.chunks_exact(dim).enumerate() {
        for (j, rb) in b.chunks_exact(dim).enumerate() {
            let d = l2_sq(ra, rb);
            dists[j] = d;
            rows[i].offer(d, j as u32);
        }
        for (j, &d) in dists.iter().enumerate() {
            cols[j].offer(d, i as u32);
        }
    }
    let ratio_sq = ratio * ratio;
    let mut out = Vec::new();
    for (i, r) in rows.iter().enumerate() {
        let Some(j) = r.accepted(ratio_sq) else { continue };
        if cols[j as usize].accepted(ratio_sq) == Some(i as u32) {
            out.push(FeatureMatch { index_a: i as u32, index_b: j, distance: r.d1.sqrt() });
        }
    }
    out
}

/// Ratio-test plus cross-check matching on unit-normalized descriptors.
pub fn match_descriptors(a: &DescriptorSet, b: &DescriptorSet, ratio: f64) -> Result<Vec<FeatureMatch>, VerificationError> {
    if a.is_empty() || b.is_empty() {
        return Err(VerificationError::EmptySet);
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(VerificationError::InvalidParameter(format!("ratio must be in (0, 1], got {ratio}")));
    }
    Ok(match_rows(&a.unit_descriptors(), &b.unit_descriptors(), DESCRIPTOR_DIM, ratio))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ResidualKind {
    /// Mean of the point-to-epiline distances in both images.
    Symmetric,
    /// Distance of the second point to the epiline of the first.
    OneSided,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacParams {
    pub max_error_px: f64,
    pub confidence: f64,
    pub max_iters: usize,
    pub residual: ResidualKind,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self { max_error_px: 1.0, confidence: 0.999, max_iters: 10_000, residual: ResidualKind::Symmetric, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacResult {
    /// Rank 2, unit Frobenius norm; `x_b^T F x_a = 0` for inliers.
    pub fundamental: Matrix3<f64>,
    pub inliers: Vec<bool>,
    pub inlier_count: usize,
    pub mean_error: f64,
    pub iterations: usize,
}

/// Similarity transform moving the centroid to the origin with mean distance sqrt(2).
fn hartley(points: &[[f64; 2]]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = points.iter().map(|p| p[1]).sum::<f64>() / n;
    let mean = points.iter().map(|p| ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt()).sum::<f64>() / n;
    let s = if mean > 0.0 { std::f64::consts::SQRT_2 / mean } else { 1.0 };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

fn apply(t: &Matrix3<f64>, p: [f64; 2]) -> [f64; 2] {
    [t[(0, 0)] * p[0] + t[(0, 2)], t[(1, 1)] * p[1] + t[(1, 2)]]
}

fn enforce_rank2(f: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = f.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut s = svd.singular_values;
    let (min_i, _) = s.iter().enumerate().fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
    s[min_i] = 0.0;
    u * Matrix3::from_diagonal(&s) * vt
}

fn unit_norm(f: Matrix3<f64>) -> Matrix3<f64> {
    let f = f / f.norm();
    // Fix the sign so equal solutions compare equal.
    let pivot = f.iter().copied().fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
    if pivot < 0.0 {
        -f
    } else {
        f
    }
}

/// Normalized 8-point estimate from `n >= 8` correspondences (least squares
/// when `n > 8`). Returns `None` when the linear system has no unique
/// solution.
pub fn eight_point(pa: &[[f64; 2]], pb: &[[f64; 2]]) -> Option<Matrix3<f64>> {
    let n = pa.len();
    if n < SAMPLE_SIZE || pb.len() != n {
        return None;
    }
    let (ta, tb) = (hartley(pa), hartley(pb));
    let rows = n.max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for k in 0..n {
        let [xa, ya] = apply(&ta, pa[k]);
        let [xb, yb] = apply(&tb, pb[k]);
        let row = [xb * xa, xb * ya, xb, yb * xa, yb * ya, yb, xa, ya, 1.0];
        for (c, v) in row.iter().enumerate() {
            a[(k, c)] = *v;
        }
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t?;
    let s = &svd.singular_values;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&i, &j| s[i].total_cmp(&s[j]));
    // A second near-zero singular value means a family of solutions.
    if s[order[1]] <= 1e-10 * s[order[s.len() - 1]] {
        return None;
    }
    let v = vt.row(order[0]);
    let fn_ = Matrix3::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8]);
    let f = tb.transpose() * enforce_rank2(&fn_) * ta;
    let norm = f.norm();
    (norm > 0.0 && norm.is_finite()).then(|| unit_norm(f))
}

/// Epipolar residual of one correspondence in pixels.
pub fn epipolar_residual(f: &Matrix3<f64>, a: [f64; 2], b: [f64; 2], kind: ResidualKind) -> f64 {
    let xa = Vector3::new(a[0], a[1], 1.0);
    let xb = Vector3::new(b[0], b[1], 1.0);
    let lb = f * xa;
    let alg = xb.dot(&lb).abs();
    let db = alg / (lb.x * lb.x + lb.y * lb.y).sqrt();
    match kind {
        ResidualKind::OneSided => db,
        ResidualKind::Symmetric => {
            let la = f.transpose() * xb;
            let da = alg / (la.x * la.x + la.y * la.y).sqrt();
            0.5 * (da + db)
        }
    }
}

/// Rejects samples with coincident points or with all points on one line
/// in either image.
fn degenerate_sample(points: &[[f64; 2]]) -> bool {
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d = (points[i][0] - points[j][0]).hypot(points[i][1] - points[j][1]);
            if d < 1e-6 {
                return true;
            }
        }
    }
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = points.iter().map(|p| p[1]).sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in points {
        let (dx, dy) = (p[0] - cx, p[1] - cy);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    let tr = sxx + syy;
    let det = sxx * syy - sxy * sxy;
    let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
    let small = tr / 2.0 - disc;
    let large = tr / 2.0 + disc;
    small <= 1e-12 * large
}

fn score(
    f: &Matrix3<f64>,
    pa: &[[f64; 2]],
    pb: &[[f64; 2]],
    params: &RansacParams,
) -> (Vec<bool>, usize, f64) {
    let mut mask = vec![false; pa.len()];
    let (mut count, mut total) = (0, 0.0);
    for k in 0..pa.len() {
        let r = epipolar_residual(f, pa[k], pb[k], params.residual);
        if r < params.max_error_px {
            mask[k] = true;
            count += 1;
            total += r;
        }
    }
    (mask, count, if count > 0 { total / count as f64 } else { 0.0 })
}

fn required_iterations(inlier_ratio: f64, confidence: f64, cap: usize) -> usize {
    let w8 = inlier_ratio.powi(SAMPLE_SIZE as i32);
    if w8 >= 1.0 {
        return 1;
    }
    if w8 <= 0.0 {
        return cap;
    }
    let n = (1.0 - confidence).ln() / (1.0 - w8).ln();
    if n.is_finite() {
        (n.ceil() as usize).clamp(1, cap)
    } else {
        cap
    }
}

/// RANSAC fundamental-matrix estimate over point correspondences.
pub fn estimate_fundamental_ransac(
    pa: &[[f64; 2]],
    pb: &[[f64; 2]],
    params: &RansacParams,
) -> Result<RansacResult, VerificationError> {
    if pa.len() != pb.len() {
        return Err(VerificationError::InvalidParameter("point lists differ in length".into()));
    }
    if !(params.confidence > 0.0 && params.confidence < 1.0) {
        return Err(VerificationError::InvalidParameter("confidence must be in (0, 1)".into()));
    }
    if !(params.max_error_px > 0.0) || params.max_iters == 0 {
        return Err(VerificationError::InvalidParameter("threshold and iteration cap must be positive".into()));
    }
    let n = pa.len();
    if n < SAMPLE_SIZE {
        return Err(VerificationError::TooFewMatches(n));
    }
    let mut rng = seed::rng(params.seed);
    let mut best: Option<(Matrix3<f64>, Vec<bool>, usize, f64)> = None;
    let mut needed = params.max_iters;
    let mut iterations = 0;
    let mut draws = 0;
    let (mut sa, mut sb) = (Vec::with_capacity(SAMPLE_SIZE), Vec::with_capacity(SAMPLE_SIZE));
    while iterations < needed && draws < params.max_iters * 10 {
        draws += 1;
        let idx = sample(&mut rng, n, SAMPLE_SIZE);
        sa.clear();
        sb.clear();
        for i in idx.iter() {
            sa.push(pa[i]);
            sb.push(pb[i]);
        }
        if degenerate_sample(&sa) || degenerate_sample(&sb) {
            continue;
        }
        iterations += 1;
        let Some(f) = eight_point(&sa, &sb) else { continue };
        let (mask, count, err) = score(&f, pa, pb, params);
        if best.as_ref().is_none_or(|b| count > b.2) {
            needed = required_iterations(count as f64 / n as f64, params.confidence, params.max_iters);
            best = Some((f, mask, count, err));
        }
    }
    let Some((mut f, mut mask, mut count, mut err)) = best else {
        return Err(VerificationError::DegenerateConfiguration);
    };
    // Refit on the consensus set while that does not lose inliers.
    for _ in 0..5 {
        if count < SAMPLE_SIZE {
            break;
        }
        let ia: Vec<[f64; 2]> = (0..n).filter(|&k| mask[k]).map(|k| pa[k]).collect();
        let ib: Vec<[f64; 2]> = (0..n).filter(|&k| mask[k]).map(|k| pb[k]).collect();
        let Some(f2) = eight_point(&ia, &ib) else { break };
        let (mask2, count2, err2) = score(&f2, pa, pb, params);
        if count2 < count || (count2 == count && err2 >= err) {
            break;
        }
        let same = mask2 == mask;
        (f, mask, count, err) = (f2, mask2, count2, err2);
        if same {
            break;
        }
    }
    Ok(RansacResult { fundamental: f, inliers: mask, inlier_count: count, mean_error: err, iterations })
}

/// RANSAC on the keypoints referenced by `matches`.
pub fn estimate_for_matches(
    matches: &[FeatureMatch],
    keypoints_a: &[[f64; 2]],
    keypoints_b: &[[f64; 2]],
    params: &RansacParams,
) -> Result<RansacResult, VerificationError> {
    let mut pa = Vec::with_capacity(matches.len());
    let mut pb = Vec::with_capacity(matches.len());
    for m in matches {
        let a = keypoints_a.get(m.index_a as usize);
        let b = keypoints_b.get(m.index_b as usize);
        let (Some(a), Some(b)) = (a, b) else {
            return Err(VerificationError::InvalidParameter("match index out of range".into()));
        };
        pa.push(*a);
        pb.push(*b);
    }
    estimate_fundamental_ransac(&pa, &pb, params)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct VerificationConfig {
    pub ratio: f64,
    pub max_error_px: f64,
    pub confidence: f64,
    pub max_iters: usize,
    /// Pairs need strictly more inliers than this.
    pub min_inliers: usize,
    pub residual: ResidualKind,
    pub seed: u64,
}

impl Default for VerificationConfig {
    fn default() -> Self {
        Self {
            ratio: 0.8,
            max_error_px: 1.0,
            confidence: 0.999,
            max_iters: 10_000,
            min_inliers: 15,
            residual: ResidualKind::Symmetric,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifiedPair {
    pub i: u64,
    pub j: u64,
    /// Indices into image `i` (`index_a`) and image `j` (`index_b`).
    pub inliers: Vec<FeatureMatch>,
    pub fundamental: Matrix3<f64>,
    pub mean_error: f64,
}

impl VerifiedPair {
    pub fn n_inlier(&self) -> usize {
        self.inliers.len()
    }
}

/// Why a candidate pair was dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct Rejection {
    pub i: u64,
    pub j: u64,
    pub matches: usize,
    pub inliers: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct VerificationOutput {
    /// Sorted by `(i, j)`.
    pub verified: Vec<VerifiedPair>,
    pub rejected: Vec<Rejection>,
}

struct Prepared {
    rows: Vec<f32>,
    keypoints: Vec<[f64; 2]>,
}

/// Verifies one pair of images. Failures become rejections.
pub fn verify_pair(
    i: u64,
    a: (&[f32], &[[f64; 2]]),
    j: u64,
    b: (&[f32], &[[f64; 2]]),
    cfg: &VerificationConfig,
) -> Result<VerifiedPair, Rejection> {
    let reject = |matches: usize, inliers: usize, reason: String| Rejection { i, j, matches, inliers, reason };
    if a.1.is_empty() || b.1.is_empty() {
        return Err(reject(0, 0, VerificationError::EmptySet.to_string()));
    }
    let matches = match_rows(a.0, b.0, DESCRIPTOR_DIM, cfg.ratio);
    let params = RansacParams {
        max_error_px: cfg.max_error_px,
        confidence: cfg.confidence,
        max_iters: cfg.max_iters,
        residual: cfg.residual,
        seed: seed::derive_pair(cfg.seed, i, j),
    };
    let fit = estimate_for_matches(&matches, a.1, b.1, &params).map_err(|e| reject(matches.len(), 0, e.to_string()))?;
    if fit.inlier_count <= cfg.min_inliers {
        return Err(reject(
            matches.len(),
            fit.inlier_count,
            format!("{} inliers, need more than {}", fit.inlier_count, cfg.min_inliers),
        ));
    }
    let inliers = matches.iter().zip(&fit.inliers).filter(|(_, &k)| k).map(|(m, _)| *m).collect();
    Ok(VerifiedPair { i, j, inliers, fundamental: fit.fundamental, mean_error: fit.mean_error })
}

/// Matches and verifies every candidate pair in parallel.
pub fn verify_pairs(
    candidates: &MatchPairCandidateSet,
    sets: &[DescriptorSet],
    cfg: &VerificationConfig,
) -> Result<VerificationOutput, VerificationError> {
    if !(cfg.ratio > 0.0 && cfg.ratio <= 1.0) {
        return Err(VerificationError::InvalidParameter(format!("ratio must be in (0, 1], got {}", cfg.ratio)));
    }
    let by_id: HashMap<u64, &DescriptorSet> = sets.iter().map(|s| (s.image_id, s)).collect();
    let mut needed: Vec<u64> = candidates.pairs.keys().flat_map(|&(i, j)| [i, j]).collect();
    needed.sort_unstable();
    needed.dedup();
    let prepared: HashMap<u64, Prepared> = needed
        .par_iter()
        .map(|id| {
            let set = by_id.get(id).ok_or(VerificationError::MissingImage(*id))?;
            Ok((*id, Prepared { rows: set.unit_descriptors(), keypoints: set.keypoints() }))
        })
        .collect::<Result<_, VerificationError>>()?;
    let pairs: Vec<(u64, u64)> = candidates.pairs.keys().copied().collect();
    let results: Vec<Result<VerifiedPair, Rejection>> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let (a, b) = (&prepared[&i], &prepared[&j]);
            verify_pair(i, (&a.rows, &a.keypoints), j, (&b.rows, &b.keypoints), cfg)
        })
        .collect();
    let mut out = VerificationOutput::default();
    for r in results {
        match r {
            Ok(v) => out.verified.push(v),
            Err(rej) => out.rejected.push(rej),
        }
    }
    Ok(out)
}

pub fn encode_verified(pairs: &[VerifiedPair]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.put_u32(VERSION);
    out.put_u64(pairs.len() as u64);
    for p in pairs {
        out.put_u64(p.i);
        out.put_u64(p.j);
        out.put_u32(p.inliers.len() as u32);
        for r in 0..3 {
            for c in 0..3 {
                out.put_f64(p.fundamental[(r, c)]);
            }
        }
        out.put_f64(p.mean_error);
        for m in &p.inliers {
            out.put_u32(m.index_a);
            out.put_u32(m.index_b);
            out.put_f32(m.distance);
        }
    }
    out
}

pub fn decode_verified(bytes: &[u8]) -> Result<Vec<VerifiedPair>, VerificationError> {
    let mut r = ByteReader::new(bytes);
    let bad = |e: crate::binio::UnexpectedEof| VerificationError::Malformed(e.to_string());
    if &r.array::<4>().map_err(bad)? != MAGIC {
        return Err(VerificationError::Malformed("bad magic".into()));
    }
    if r.u32().map_err(bad)? != VERSION {
        return Err(VerificationError::Malformed("unsupported version".into()));
    }
    let count = r.u64().map_err(bad)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let i = r.u64().map_err(bad)?;
        let j = r.u64().map_err(bad)?;
        let n = r.u32().map_err(bad)? as usize;
        let mut f = Matrix3::zeros();
        for row in 0..3 {
            for col in 0..3 {
                f[(row, col)] = r.f64().map_err(bad)?;
            }
        }
        let mean_error = r.f64().map_err(bad)?;
        if n > r.remaining() / 12 {
            return Err(VerificationError::Malformed("inlier count exceeds file length".into()));
        }
        let mut inliers = Vec::with_capacity(n);
        for _ in 0..n {
            inliers.push(FeatureMatch {
                index_a: r.u32().map_err(bad)?,
                index_b: r.u32().map_err(bad)?,
                distance: r.f32().map_err(bad)?,
            });
        }
        out.push(VerifiedPair { i, j, inliers, fundamental: f, mean_error });
    }
    if r.remaining() != 0 {
        return Err(VerificationError::Malformed("trailing bytes".into()));
    }
    Ok(out)
}

pub fn save_verified(pairs: &[VerifiedPair], path: &Path) -> Result<(), VerificationError> {
    fs::write(path, encode_verified(pairs))
        .map_err(|source| VerificationError::Io { path: path.display().to_string(), source })
}

pub fn load_verified(path: &Path) -> Result<Vec<VerifiedPair>, VerificationError> {
    let bytes =
        fs::read(path).map_err(|source| VerificationError::Io { path: path.display().to_string(), source })?;
    decode_verified(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor::LocalFeature;
    use crate::synthetic::two_view_scene;
    use rand::{Rng, SeedableRng};

    fn random_set(id: u64, n: usize, seed: u64) -> DescriptorSet {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let features = (0..n)
            .map(|_| {
                let mut d = [0u8; DESCRIPTOR_DIM];
                rng.fill(&mut d[..]);
                LocalFeature {
                    x: rng.random_range(0.0..1000.0),
                    y: rng.random_range(0.0..700.0),
                    scale: rng.random_range(1.0..10.0),
                    orientation: 0.0,
                    descriptor: d,
                }
            })
            .collect();
        DescriptorSet { image_id: id, image_width: 1000, image_height: 700, features }
    }

    #[test]
    fn identical_sets_match_identically() {
        let a = random_set(0, 60, 1);
        let m = match_descriptors(&a, &a, 0.8).unwrap();
        assert_eq!(m.len(), 60);
        assert!(m.iter().all(|x| x.index_a == x.index_b && x.distance == 0.0));
    }

    #[test]
    fn equidistant_neighbors_fail_ratio_test() {
        let rows_a = vec![0.0, 0.0];
        let rows_b = vec![1.0, 0.0, -1.0, 0.0];
        assert!(match_rows(&rows_a, &rows_b, 2, 0.8).is_empty());
        assert!(match_rows(&rows_a, &rows_b, 2, 1.0).is_empty());
    }

    #[test]
    fn matching_is_symmetric_and_one_to_one() {
        let a = random_set(0, 80, 2);
        let mut b = random_set(1, 80, 3);
        for k in 0..40 {
            b.features[k * 2].descriptor = a.features[k].descriptor;
        }
        let ab = match_descriptors(&a, &b, 0.8).unwrap();
        let ba = match_descriptors(&b, &a, 0.8).unwrap();
        let mut fwd: Vec<(u32, u32)> = ab.iter().map(|m| (m.index_a, m.index_b)).collect();
        let mut back: Vec<(u32, u32)> = ba.iter().map(|m| (m.index_b, m.index_a)).collect();
        fwd.sort_unstable();
        back.sort_unstable();
        assert_eq!(fwd, back);
        let mut used_b: Vec<u32> = fwd.iter().map(|p| p.1).collect();
        used_b.sort_unstable();
        used_b.dedup();
        assert_eq!(used_b.len(), fwd.len());
        assert!(fwd.len() >= 36);
        assert!(matches!(match_descriptors(&a, &random_set(2, 0, 0), 0.8), Err(VerificationError::EmptySet)));
    }

    #[test]
    fn zero_noise_recovers_exact_geometry() {
        let scene = two_view_scene(150, 0, 0.0, 4);
        let r = estimate_fundamental_ransac(&scene.points_a, &scene.points_b, &RansacParams::default()).unwrap();
        assert_eq!(r.inlier_count, 150);
        for k in 0..150 {
            let xa = Vector3::new(scene.points_a[k][0], scene.points_a[k][1], 1.0);
            let xb = Vector3::new(scene.points_b[k][0], scene.points_b[k][1], 1.0);
            assert!(xb.dot(&(r.fundamental * xa)).abs() <= 1e-8);
        }
        assert!(r.fundamental.determinant().abs() <= 1e-10);
        assert!((r.fundamental.norm() - 1.0).abs() < 1e-12);
        let truth = scene.fundamental * scene.fundamental[(2, 2)].signum();
        let got = r.fundamental * r.fundamental[(2, 2)].signum();
        assert!((truth - got).norm() < 1e-6);
    }

    #[test]
    fn outliers_are_rejected() {
        let scene = two_view_scene(200, 200, 1.0, 5);
        let params = RansacParams { seed: 9, ..Default::default() };
        let r = estimate_fundamental_ransac(&scene.points_a, &scene.points_b, &params).unwrap();
        let planted = scene.inlier.iter().filter(|&&x| x).count();
        let hit = r.inliers.iter().zip(&scene.inlier).filter(|(&a, &b)| a && b).count();
        let false_in = r.inliers.iter().zip(&scene.inlier).filter(|(&a, &b)| a && !b).count();
        assert!(hit as f64 / planted as f64 >= 0.95);
        assert!(false_in as f64 / r.inlier_count as f64 <= 0.05);
        for k in 0..r.inliers.len() {
            if r.inliers[k] {
                let e = epipolar_residual(&r.fundamental, scene.points_a[k], scene.points_b[k], ResidualKind::Symmetric);
                assert!(e < 1.0);
            }
        }
    }

    #[test]
    fn seven_matches_is_too_few() {
        let scene = two_view_scene(7, 0, 0.0, 6);
        assert!(matches!(
            estimate_fundamental_ransac(&scene.points_a, &scene.points_b, &RansacParams::default()),
            Err(VerificationError::TooFewMatches(7))
        ));
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let pa: Vec<[f64; 2]> = (0..20).map(|i| [i as f64 * 10.0, 5.0 + i as f64 * 3.0]).collect();
        let pb: Vec<[f64; 2]> = (0..20).map(|i| [i as f64 * 7.0 + 2.0, i as f64 * 2.0]).collect();
        assert!(matches!(
            estimate_fundamental_ransac(&pa, &pb, &RansacParams { max_iters: 50, ..Default::default() }),
            Err(VerificationError::DegenerateConfiguration)
        ));
        assert!(degenerate_sample(&[[1.0, 1.0], [1.0, 1.0], [5.0, 3.0]]));
    }

    #[test]
    fn solver_is_invariant_to_similarity_transforms() {
        let scene = two_view_scene(40, 0, 0.0, 7);
        let f = eight_point(&scene.points_a, &scene.points_b).unwrap();
        let sa = Matrix3::new(2.5, 0.0, 300.0, 0.0, 2.5, -40.0, 0.0, 0.0, 1.0);
        let (c, s) = (0.3f64.cos(), 0.3f64.sin());
        let sb = Matrix3::new(0.7 * c, -0.7 * s, 12.0, 0.7 * s, 0.7 * c, 9.0, 0.0, 0.0, 1.0);
        let map = |t: &Matrix3<f64>, p: [f64; 2]| {
            let v = t * Vector3::new(p[0], p[1], 1.0);
            [v.x / v.z, v.y / v.z]
        };
        let pa: Vec<[f64; 2]> = scene.points_a.iter().map(|&p| map(&sa, p)).collect();
        let pb: Vec<[f64; 2]> = scene.points_b.iter().map(|&p| map(&sb, p)).collect();
        let g = eight_point(&pa, &pb).unwrap();
        let expected = unit_norm(sb.try_inverse().unwrap().transpose() * f * sa.try_inverse().unwrap());
        assert!((g - expected).norm() < 1e-6, "{g} vs {expected}");
    }

    #[test]
    fn iteration_count_formula() {
        assert_eq!(required_iterations(1.0, 0.999, 10_000), 1);
        assert_eq!(required_iterations(0.0, 0.999, 10_000), 10_000);
        let n = required_iterations(0.5, 0.999, 10_000);
        let expected = (0.001f64.ln() / (1.0 - 0.5f64.powi(8)).ln()).ceil() as usize;
        assert_eq!(n, expected);
        assert_eq!(required_iterations(0.1, 0.999, 10_000), 10_000);
    }

    fn planted_pair(n_shared: usize, seed: u64) -> (DescriptorSet, DescriptorSet) {
        let scene = two_view_scene(n_shared, 0, 0.0, seed);
        let mut a = random_set(0, n_shared + 50, seed + 100);
        let mut b = random_set(1, n_shared + 50, seed + 200);
        for k in 0..n_shared {
            b.features[k].descriptor = a.features[k].descriptor;
            a.features[k].x = scene.points_a[k][0] as f32;
            a.features[k].y = scene.points_a[k][1] as f32;
            b.features[k].x = scene.points_b[k][0] as f32;
            b.features[k].y = scene.points_b[k][1] as f32;
        }
        (a, b)
    }

    #[test]
    fn planted_pair_is_retained() {
        let (a, b) = planted_pair(60, 8);
        let mut cands = MatchPairCandidateSet::default();
        cands.insert(0, 1, 0.9, 0);
        let out = verify_pairs(&cands, &[a, b], &VerificationConfig::default()).unwrap();
        assert_eq!(out.verified.len(), 1);
        assert!(out.verified[0].n_inlier() >= 57);
    }

    #[test]
    fn unrelated_pair_is_dropped() {
        let a = random_set(0, 100, 10);
        let b = random_set(1, 100, 11);
        let mut cands = MatchPairCandidateSet::default();
        cands.insert(0, 1, 0.9, 0);
        let out = verify_pairs(&cands, &[a, b], &VerificationConfig::default()).unwrap();
        assert!(out.verified.is_empty());
        assert_eq!(out.rejected.len(), 1);
    }

    #[test]
    fn exactly_min_inliers_is_dropped() {
        let (a, b) = planted_pair(16, 12);
        let (pa, pb) = (a.unit_descriptors(), b.unit_descriptors());
        let (ka, kb) = (a.keypoints(), b.keypoints());
        let cfg = VerificationConfig::default();
        assert!(verify_pair(0, (&pa, &ka), 1, (&pb, &kb), &cfg).is_ok());
        let tight = VerificationConfig { min_inliers: 16, ..cfg };
        let rej = verify_pair(0, (&pa, &ka), 1, (&pb, &kb), &tight).unwrap_err();
        assert_eq!(rej.inliers, 16);
    }

    #[test]
    fn missing_image_errors() {
        let mut cands = MatchPairCandidateSet::default();
        cands.insert(0, 7, 0.9, 0);
        assert!(matches!(
            verify_pairs(&cands, &[random_set(0, 10, 1)], &VerificationConfig::default()),
            Err(VerificationError::MissingImage(7))
        ));
    }

    #[test]
    fn verification_is_deterministic_and_round_trips() {
        let (a, b) = planted_pair(40, 13);
        let mut cands = MatchPairCandidateSet::default();
        cands.insert(0, 1, 0.9, 0);
        let sets = [a, b];
        let x = verify_pairs(&cands, &sets, &VerificationConfig::default()).unwrap();
        let y = verify_pairs(&cands, &sets, &VerificationConfig::default()).unwrap();
        assert_eq!(x, y);
        let bytes = encode_verified(&x.verified);
        assert_eq!(&bytes[..4], b"UVM1");
        assert_eq!(decode_verified(&bytes).unwrap(), x.verified);
        assert!(decode_verified(&bytes[..bytes.len() - 1]).is_err());
    }
}
