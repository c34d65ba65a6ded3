//! Online codebook training.
//!
//! Training descriptors come from a random subset of images and, within each
//! image, only the largest-scale features. Centers are fitted with Lloyd's
//! k-means. The assignment pass runs in fixed-size chunks whose partial sums
//! are reduced in chunk order, so results do not depend on the thread count.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;
use thiserror::Error;

use crate::binio::{ByteReader, PutLe};
use crate::descriptor::{unit_descriptor, DescriptorSet, DESCRIPTOR_DIM};
use crate::distance::l2_sq;
use crate::seed;

const MAGIC: &[u8; 4] = b"UVC1";
const VERSION: u32 = 1;
const CHUNK: usize = 1024;

#[derive(Debug, Error)]
pub enum CodebookError {
    #[error("no descriptor sets to sample from")]
    EmptyInput,
    #[error("need at least k={k} descriptors, got {count}")]
    TooFewDescriptors { count: usize, k: usize },
    #[error("descriptor {0} contains a non-finite value")]
    NaNInput(usize),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("malformed codebook file: {0}")]
    Malformed(String),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingConfig {
    /// Fraction of images drawn for training.
    pub image_fraction: f64,
    /// Largest-scale features taken per sampled image.
    pub features_per_image: usize,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { image_fraction: 0.20, features_per_image: 1500, seed: 0 }
    }
}

/// Training descriptors plus the images they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub image_ids: Vec<u64>,
    /// Unit-normalized rows, flattened `count * 128`.
    pub descriptors: Vec<f32>,
}

impl TrainingSample {
    pub fn len(&self) -> usize {
        self.descriptors.len() / DESCRIPTOR_DIM
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }
}

/// Number of images drawn for a given fraction, `ceil(p * n)` clamped to `[1, n]`.
pub fn sampled_image_count(n: usize, fraction: f64) -> usize {
    // The epsilon keeps 0.2 * 10 from rounding up to 3.
    (((fraction * n as f64) - 1e-9).ceil() as usize).clamp(1, n)
}

pub fn sample_training_descriptors(
    sets: &[DescriptorSet],
    cfg: &SamplingConfig,
) -> Result<TrainingSample, CodebookError> {
    if sets.is_empty() {
        return Err(CodebookError::EmptyInput);
    }
    if !(cfg.image_fraction > 0.0 && cfg.image_fraction <= 1.0) {
        return Err(CodebookError::InvalidParameter(format!(
            "image fraction must lie in (0,1], got {}",
            cfg.image_fraction
        )));
    }
    if cfg.features_per_image == 0 {
        return Err(CodebookError::InvalidParameter("features per image must be >= 1".into()));
    }
    let n_pick = sampled_image_count(sets.len(), cfg.image_fraction);
    let mut rng = seed::rng(cfg.seed);
    let mut picked = rand::seq::index::sample(&mut rng, sets.len(), n_pick).into_vec();
    picked.sort_unstable();

    let ids: Vec<u64> = picked.iter().map(|&i| sets[i].image_id).collect();
    collect_training_descriptors(sets, &ids, cfg.features_per_image)
}

/// Rebuilds a training sample from its image ids: the `features_per_image`
/// largest-scale features of each listed image, in list order.
pub fn collect_training_descriptors(
    sets: &[DescriptorSet],
    image_ids: &[u64],
    features_per_image: usize,
) -> Result<TrainingSample, CodebookError> {
    let mut descriptors = Vec::new();
    for &id in image_ids {
        let set = sets
            .iter()
            .find(|s| s.image_id == id)
            .ok_or_else(|| CodebookError::InvalidParameter(format!("image {id} is not in the descriptor set")))?;
        let mut order: Vec<usize> = (0..set.features.len()).collect();
        order.sort_by(|&a, &b| set.features[b].scale.total_cmp(&set.features[a].scale));
        for &f in order.iter().take(features_per_image) {
            descriptors.extend_from_slice(&unit_descriptor(&set.features[f].descriptor));
        }
    }
    Ok(TrainingSample { image_ids: image_ids.to_vec(), descriptors })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Initialization {
    /// D^2-weighted seeding.
    KMeansPlusPlus,
    /// k distinct descriptors drawn uniformly.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansParams {
    pub k: usize,
    pub max_iters: usize,
    /// Stop once the relative inertia decrease drops below this.
    pub tol: f64,
    pub seed: u64,
    pub init: Initialization,
}

impl KMeansParams {
    pub fn new(k: usize, seed: u64) -> Self {
        Self { k, max_iters: 50, tol: 1e-4, seed, init: Initialization::KMeansPlusPlus }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub k: usize,
    pub dim: usize,
    /// Flattened `k * dim` centers.
    pub centers: Vec<f32>,
    pub iterations: usize,
    pub inertia: f64,
    /// Inertia measured at each assignment pass, in order.
    pub inertia_history: Vec<f64>,
}

impl Codebook {
    pub fn from_centers(centers: Vec<f32>, dim: usize) -> Result<Self, CodebookError> {
        if dim == 0 || centers.is_empty() || !centers.len().is_multiple_of(dim) {
            return Err(CodebookError::InvalidParameter(format!(
                "{} values do not form centers of dimension {dim}",
                centers.len()
            )));
        }
        Ok(Self {
            k: centers.len() / dim,
            dim,
            centers,
            iterations: 0,
            inertia: 0.0,
            inertia_history: Vec::new(),
        })
    }

    pub fn center(&self, j: usize) -> &[f32] {
        &self.centers[j * self.dim..(j + 1) * self.dim]
    }

    /// Index of the closest center; ties go to the lowest index.
    pub fn nearest_center(&self, v: &[f32]) -> Result<usize, CodebookError> {
        if v.len() != self.dim {
            return Err(CodebookError::DimensionMismatch { expected: self.dim, actual: v.len() });
        }
        Ok(self.nearest_unchecked(v).0)
    }

    pub(crate) fn nearest_unchecked(&self, v: &[f32]) -> (usize, f32) {
        nearest(&self.centers, self.dim, v)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.centers.len() * 4);
        out.extend_from_slice(MAGIC);
        out.put_u32(VERSION);
        out.put_u32(self.k as u32);
        out.put_u32(self.dim as u32);
        out.put_f32s(&self.centers);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodebookError> {
        let mut r = ByteReader::new(bytes);
        let bad = |e: crate::binio::UnexpectedEof| CodebookError::Malformed(e.to_string());
        let magic: [u8; 4] = r.array().map_err(bad)?;
        if &magic != MAGIC {
            return Err(CodebookError::Malformed("bad magic".into()));
        }
        let version = r.u32().map_err(bad)?;
        if version != VERSION {
            return Err(CodebookError::Malformed(format!("unsupported version {version}")));
        }
        let k = r.u32().map_err(bad)? as usize;
        let dim = r.u32().map_err(bad)? as usize;
        let centers = r.f32_vec(k * dim).map_err(bad)?;
        if r.remaining() != 0 {
            return Err(CodebookError::Malformed("trailing bytes".into()));
        }
        Self::from_centers(centers, dim)
    }

    /// Sidecar `key=value` training metadata.
    pub fn metadata_text(&self) -> String {
        let history: Vec<String> = self.inertia_history.iter().map(|v| v.to_string()).collect();
        format!(
            "k={}\ndim={}\niterations={}\ninertia={}\ninertia_history={}\n",
            self.k,
            self.dim,
            self.iterations,
            self.inertia,
            history.join(",")
        )
    }

    pub fn save(&self, path: &Path) -> Result<(), CodebookError> {
        let io = |source| CodebookError::Io { path: path.display().to_string(), source };
        fs::write(path, self.encode()).map_err(io)?;
        fs::write(path.with_extension("meta.txt"), self.metadata_text()).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CodebookError> {
        let bytes = fs::read(path)
            .map_err(|source| CodebookError::Io { path: path.display().to_string(), source })?;
        Self::decode(&bytes)
    }
}

fn nearest(centers: &[f32], dim: usize, v: &[f32]) -> (usize, f32) {
    let mut best = (0usize, f32::INFINITY);
    for (j, c) in centers.chunks_exact(dim).enumerate() {
        let d = l2_sq(v, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

struct ChunkStats {
    sums: Vec<f64>,
    counts: Vec<usize>,
    inertia: f64,
}

fn assign(data: &[f32], dim: usize, centers: &[f32], labels: &mut [u32], dists: &mut [f32]) -> Vec<ChunkStats> {
    let k = centers.len() / dim;
    data.par_chunks(CHUNK * dim)
        .zip(labels.par_chunks_mut(CHUNK))
        .zip(dists.par_chunks_mut(CHUNK))
        .map(|((rows, lab), dst)| {
            let mut stats = ChunkStats { sums: vec![0.0; k * dim], counts: vec![0; k], inertia: 0.0 };
            for ((row, l), d) in rows.chunks_exact(dim).zip(lab.iter_mut()).zip(dst.iter_mut()) {
                let (j, dist) = nearest(centers, dim, row);
                *l = j as u32;
                *d = dist;
                stats.inertia += dist as f64;
                stats.counts[j] += 1;
                for (s, &x) in stats.sums[j * dim..(j + 1) * dim].iter_mut().zip(row) {
                    *s += x as f64;
                }
            }
            stats
        })
        .collect()
}

fn init_centers(data: &[f32], dim: usize, params: &KMeansParams, rng: &mut seed::Rng) -> Vec<f32> {
    let n = data.len() / dim;
    let k = params.k;
    let row = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    match params.init {
        Initialization::Random => {
            chosen = rand::seq::index::sample(rng, n, k).into_vec();
        }
        Initialization::KMeansPlusPlus => {
            chosen.push(rng.random_range(0..n));
            let mut d2: Vec<f64> = (0..n).map(|i| l2_sq(row(i), row(chosen[0])) as f64).collect();
            let mut taken = vec![false; n];
            taken[chosen[0]] = true;
            while chosen.len() < k {
                let total: f64 = d2.iter().sum();
                let next = if total > 0.0 {
                    let target = rng.random::<f64>() * total;
                    let mut acc = 0.0;
                    let mut pick = None;
                    for (i, &w) in d2.iter().enumerate() {
                        acc += w;
                        if acc > target && w > 0.0 {
                            pick = Some(i);
                            break;
                        }
                    }
                    // Rounding can leave `target` just past the last positive weight.
                    pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap())
                } else {
                    // Remaining points duplicate chosen centers.
                    let free: Vec<usize> = (0..n).filter(|&i| !taken[i]).collect();
                    free[rng.random_range(0..free.len())]
                };
                taken[next] = true;
                chosen.push(next);
                let c = row(next);
                for (i, w) in d2.iter_mut().enumerate() {
                    let d = l2_sq(row(i), c) as f64;
                    if d < *w {
                        *w = d;
                    }
                }
            }
        }
    }
    chosen.iter().flat_map(|&i| row(i).iter().copied()).collect()
}

/// Lloyd's k-means over `data` (flattened rows of length `dim`).
pub fn train_codebook(data: &[f32], dim: usize, params: &KMeansParams) -> Result<Codebook, CodebookError> {
    if dim == 0 || !data.len().is_multiple_of(dim) {
        return Err(CodebookError::InvalidParameter(format!(
            "{} values are not rows of dimension {dim}",
            data.len()
        )));
    }
    if params.k == 0 {
        return Err(CodebookError::InvalidParameter("k must be >= 1".into()));
    }
    let n = data.len() / dim;
    if n < params.k {
        return Err(CodebookError::TooFewDescriptors { count: n, k: params.k });
    }
    if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
        return Err(CodebookError::NaNInput(bad / dim));
    }

    let mut rng = seed::rng(params.seed);
    let centers = init_centers(data, dim, params, &mut rng);
    Ok(lloyd(data, dim, centers, params))
}

/// Runs Lloyd iterations from caller-supplied initial centers.
pub fn refine_codebook(
    data: &[f32],
    dim: usize,
    initial_centers: Vec<f32>,
    params: &KMeansParams,
) -> Result<Codebook, CodebookError> {
    if dim == 0 || !data.len().is_multiple_of(dim) || initial_centers.len() != params.k * dim || params.k == 0 {
        return Err(CodebookError::InvalidParameter("shape mismatch between data, centers and k".into()));
    }
    if data.len() / dim < params.k {
        return Err(CodebookError::TooFewDescriptors { count: data.len() / dim, k: params.k });
    }
    if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
        return Err(CodebookError::NaNInput(bad / dim));
    }
    Ok(lloyd(data, dim, initial_centers, params))
}

fn lloyd(data: &[f32], dim: usize, mut centers: Vec<f32>, params: &KMeansParams) -> Codebook {
    let n = data.len() / dim;
    let k = params.k;
    let mut labels = vec![0u32; n];
    let mut dists = vec![0f32; n];
    let mut history = Vec::new();
    let mut iterations = 0;

    loop {
        let stats = assign(data, dim, &centers, &mut labels, &mut dists);
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        let mut inertia = 0.0;
        for s in &stats {
            inertia += s.inertia;
            for (a, b) in sums.iter_mut().zip(&s.sums) {
                *a += b;
            }
            for (a, b) in counts.iter_mut().zip(&s.counts) {
                *a += b;
            }
        }
        let prev = history.last().copied();
        history.push(inertia);
        let converged = match prev {
            Some(p) if p > 0.0 => (p - inertia) / p < params.tol,
            Some(_) => true,
            None => inertia == 0.0,
        };
        if converged || iterations >= params.max_iters {
            break;
        }
        iterations += 1;

        for j in 0..k {
            if counts[j] > 0 {
                let inv = 1.0 / counts[j] as f64;
                for (c, s) in centers[j * dim..(j + 1) * dim].iter_mut().zip(&sums[j * dim..(j + 1) * dim]) {
                    *c = (s * inv) as f32;
                }
            }
        }
        // Empty clusters take over the points farthest from their centers,
        // one distinct point each. Ties resolve to the lower index.
        let empty: Vec<usize> = (0..k).filter(|&j| counts[j] == 0).collect();
        if !empty.is_empty() {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| dists[b].total_cmp(&dists[a]).then(a.cmp(&b)));
            for (&j, &i) in empty.iter().zip(order.iter()) {
                centers[j * dim..(j + 1) * dim].copy_from_slice(&data[i * dim..(i + 1) * dim]);
            }
        }
    }

    Codebook {
        k,
        dim,
        centers,
        iterations,
        inertia: *history.last().unwrap(),
        inertia_history: history,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor::LocalFeature;
    use rand_chacha::rand_core::SeedableRng;

    fn params(k: usize, seed: u64) -> KMeansParams {
        KMeansParams::new(k, seed)
    }

    fn dummy_set(id: u64, n: usize) -> DescriptorSet {
        DescriptorSet {
            image_id: id,
            image_width: 10,
            image_height: 10,
            features: (0..n)
                .map(|i| LocalFeature {
                    x: 0.0,
                    y: 0.0,
                    scale: (n - i) as f32,
                    orientation: 0.0,
                    descriptor: [(i % 251) as u8 + 1; DESCRIPTOR_DIM],
                })
                .collect(),
        }
    }

    #[test]
    fn ten_images_at_twenty_percent_draws_two() {
        let sets: Vec<_> = (0..10).map(|i| dummy_set(i, 2000)).collect();
        let cfg = SamplingConfig { seed: 3, ..Default::default() };
        let s = sample_training_descriptors(&sets, &cfg).unwrap();
        assert_eq!(s.image_ids.len(), 2);
        assert_eq!(s.len(), 2 * 1500);
        assert_eq!(s, sample_training_descriptors(&sets, &cfg).unwrap());
    }

    #[test]
    fn full_sampling_takes_everything() {
        let sets: Vec<_> = (0..4).map(|i| dummy_set(i, 30 + i as usize)).collect();
        let cfg = SamplingConfig { image_fraction: 1.0, features_per_image: usize::MAX, seed: 1 };
        let s = sample_training_descriptors(&sets, &cfg).unwrap();
        assert_eq!(s.len(), 30 + 31 + 32 + 33);
        assert_eq!(s.image_ids, vec![0, 1, 2, 3]);
    }

    #[test]
    fn small_image_contributes_all_features() {
        let sets = vec![dummy_set(0, 100)];
        let s = sample_training_descriptors(&sets, &SamplingConfig::default()).unwrap();
        assert_eq!(s.len(), 100);
    }

    #[test]
    fn sampling_prefers_large_scales() {
        let mut set = dummy_set(0, 5);
        set.features.reverse();
        let cfg = SamplingConfig { image_fraction: 1.0, features_per_image: 2, seed: 0 };
        let s = sample_training_descriptors(&[set.clone()], &cfg).unwrap();
        let expect: Vec<f32> = [4usize, 3]
            .iter()
            .flat_map(|&i| unit_descriptor(&set.features[i].descriptor))
            .collect();
        assert_eq!(s.descriptors, expect);
    }

    #[test]
    fn sampling_errors() {
        assert!(matches!(
            sample_training_descriptors(&[], &SamplingConfig::default()),
            Err(CodebookError::EmptyInput)
        ));
        let cfg = SamplingConfig { image_fraction: 0.0, ..Default::default() };
        assert!(sample_training_descriptors(&[dummy_set(0, 3)], &cfg).is_err());
    }

    #[test]
    fn square_corners_with_k4_are_exact() {
        let data = vec![0.0f32, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let cb = train_codebook(&data, 2, &params(4, 9)).unwrap();
        assert_eq!(cb.inertia, 0.0);
        let mut centers: Vec<(i32, i32)> =
            cb.centers.chunks(2).map(|c| (c[0] as i32, c[1] as i32)).collect();
        centers.sort();
        assert_eq!(centers, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
    }

    #[test]
    fn too_few_descriptors() {
        let data = vec![0.0f32; 6];
        assert!(matches!(
            train_codebook(&data, 2, &params(4, 0)),
            Err(CodebookError::TooFewDescriptors { count: 3, k: 4 })
        ));
    }

    #[test]
    fn nan_input_rejected() {
        let data = vec![0.0f32, 1.0, f32::NAN, 0.0];
        assert!(matches!(train_codebook(&data, 2, &params(1, 0)), Err(CodebookError::NaNInput(1))));
    }

    #[test]
    fn nearest_center_rules() {
        let cb = Codebook::from_centers(vec![0.0, 0.0, 2.0, 0.0, 5.0, 5.0], 2).unwrap();
        assert_eq!(cb.nearest_center(&[5.0, 5.0]).unwrap(), 2);
        assert_eq!(cb.nearest_center(&[1.0, 0.0]).unwrap(), 0);
        assert!(matches!(cb.nearest_center(&[1.0]), Err(CodebookError::DimensionMismatch { .. })));
    }

    #[test]
    fn nearest_center_matches_exhaustive_scan() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let dim = 128;
        let centers: Vec<f32> = (0..256 * dim).map(|_| rng.random::<f32>()).collect();
        let cb = Codebook::from_centers(centers.clone(), dim).unwrap();
        for _ in 0..200 {
            let v: Vec<f32> = (0..dim).map(|_| rng.random::<f32>()).collect();
            let oracle = (0..256)
                .map(|j| {
                    let d: f64 = v
                        .iter()
                        .zip(&centers[j * dim..(j + 1) * dim])
                        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                        .sum();
                    (d, j)
                })
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
                .unwrap()
                .1;
            assert_eq!(cb.nearest_center(&v).unwrap(), oracle);
        }
    }

    #[test]
    fn centers_are_means_of_final_assignment() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let data: Vec<f32> = (0..600 * 4).map(|_| rng.random::<f32>()).collect();
        let p = KMeansParams { max_iters: 500, tol: 0.0, ..params(5, 4) };
        let cb = train_codebook(&data, 4, &p).unwrap();
        let mut sums = [0.0f64; 5 * 4];
        let mut counts = [0usize; 5];
        for row in data.chunks(4) {
            let j = cb.nearest_center(row).unwrap();
            counts[j] += 1;
            for d in 0..4 {
                sums[j * 4 + d] += row[d] as f64;
            }
        }
        for j in 0..5 {
            for d in 0..4 {
                let mean = sums[j * 4 + d] / counts[j] as f64;
                assert!((mean - cb.centers[j * 4 + d] as f64).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn permuted_input_gives_same_centers_up_to_relabeling() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let n = 3000;
        let data: Vec<f32> = (0..n * 3).map(|_| rng.random::<f32>()).collect();
        let init: Vec<f32> = data[..4 * 3].to_vec();
        let p = KMeansParams { max_iters: 200, tol: 0.0, ..params(4, 0) };
        let run = |rows: &[f32]| {
            let cb = refine_codebook(rows, 3, init.clone(), &p).unwrap();
            let mut c: Vec<Vec<i64>> =
                cb.centers.chunks(3).map(|c| c.iter().map(|&v| (v * 1e5).round() as i64).collect()).collect();
            c.sort();
            c
        };
        let mut rows: Vec<&[f32]> = data.chunks(3).collect();
        let a = run(&rows.concat());
        rows.reverse();
        let b = run(&rows.concat());
        assert_eq!(a, b);
    }

    #[test]
    fn codebook_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.uvc");
        let cb = train_codebook(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0], 2, &params(2, 1)).unwrap();
        cb.save(&path).unwrap();
        let back = Codebook::load(&path).unwrap();
        assert_eq!(back.centers, cb.centers);
        assert_eq!(back.k, 2);
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"UVC1");
        assert!(fs::read_to_string(path.with_extension("meta.txt")).unwrap().contains("iterations="));
    }
}
