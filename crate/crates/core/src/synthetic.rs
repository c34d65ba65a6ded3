//! Synthetic image collections with known overlap.
//!
//! The world is a textured ground plane covered by landmarks. Each landmark
//! carries a descriptor drawn around one of a small set of Zipf-weighted
//! prototypes, so the descriptor space has cluster structure and uneven word
//! frequencies like real SIFT data. Images are axis-aligned footprints laid
//! out along a strip or a grid; an image observes every landmark inside its
//! footprint (with bounded descriptor and keypoint noise) plus private
//! distractor features. Keypoints of the same landmark in two images are
//! related by a translation, which is a planar homography.
//!
//! Landmarks are derived per world cell from `(seed, cell)` and images from
//! `(seed, image)`, so any image can be generated independently and the
//! whole dataset is a pure function of the configuration.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::seq::SliceRandom as _;
use rand::Rng as _;
use thiserror::Error;

use crate::descriptor::{DescriptorSet, LocalFeature, DEFAULT_FEATURE_CAP, DESCRIPTOR_DIM};
use crate::seed::{self, splitmix64};

const CELL: f64 = 64.0;
const MIN_SCALE: f64 = 1.6;
const MAX_SCALE: f64 = 24.0;
const ZIPF_EXPONENT: f64 = 0.8;

#[derive(Debug, Error, PartialEq)]
pub enum SyntheticError {
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// One row of images; image i+1 is shifted along track.
    Strip,
    /// Rows of `cols` images; overlap along a row is the forward overlap,
    /// between rows the side overlap.
    Grid { cols: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub n_images: usize,
    /// Expected feature count per image before capping.
    pub features_per_image: usize,
    pub layout: Layout,
    /// Fraction of a footprint shared with the next image along track.
    pub forward_overlap: f64,
    pub side_overlap: f64,
    /// Fraction of each image's features that are private to it.
    pub distractor_fraction: f64,
    /// Bounded per-component noise (in u8 units) added at each observation.
    pub descriptor_noise: u8,
    /// Keypoints are displaced uniformly within a disk of this radius.
    pub keypoint_noise_px: f64,
    pub image_width: u32,
    pub image_height: u32,
    pub prototypes: usize,
    /// Per-component spread of landmark descriptors around their prototype.
    pub landmark_spread: u8,
    /// Number of land-cover classes. Each class ranks the prototypes in its
    /// own order; class weights vary smoothly over the ground plane, so
    /// image content drifts with distance. 1 gives one global ranking.
    pub land_cover_classes: usize,
    /// Lattice spacing of the land-cover noise field, in pixels.
    pub land_cover_scale: f64,
    /// Image pairs whose footprint intersection covers at least this
    /// fraction of a footprint are ground-truth overlaps.
    pub min_gt_overlap: f64,
    pub feature_cap: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_images: 50,
            features_per_image: 400,
            layout: Layout::Strip,
            forward_overlap: 2.0 / 3.0,
            side_overlap: 0.5,
            distractor_fraction: 0.2,
            descriptor_noise: 6,
            keypoint_noise_px: 0.3,
            image_width: 1000,
            image_height: 750,
            prototypes: 64,
            landmark_spread: 48,
            land_cover_classes: 8,
            land_cover_scale: 3000.0,
            min_gt_overlap: 0.05,
            feature_cap: DEFAULT_FEATURE_CAP,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), SyntheticError> {
        let bad = |m: String| Err(SyntheticError::InvalidConfig(m));
        if self.n_images < 2 {
            return bad(format!("n_images must be >= 2, got {}", self.n_images));
        }
        for (name, v) in [
            ("forward_overlap", self.forward_overlap),
            ("side_overlap", self.side_overlap),
            ("distractor_fraction", self.distractor_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0,1], got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.min_gt_overlap) || self.min_gt_overlap == 0.0 {
            return bad(format!("min_gt_overlap must lie in (0,1], got {}", self.min_gt_overlap));
        }
        if self.image_width == 0 || self.image_height == 0 {
            return bad("image dimensions must be positive".into());
        }
        if self.prototypes == 0 {
            return bad("prototypes must be >= 1".into());
        }
        if self.land_cover_classes == 0 {
            return bad("land_cover_classes must be >= 1".into());
        }
        if !(self.land_cover_scale > 0.0 && self.land_cover_scale.is_finite()) {
            return bad(format!("land_cover_scale must be positive, got {}", self.land_cover_scale));
        }
        if let Layout::Grid { cols } = self.layout {
            if cols == 0 {
                return bad("grid_cols must be >= 1".into());
            }
        }
        if !(self.keypoint_noise_px >= 0.0) {
            return bad("keypoint_noise_px must be >= 0".into());
        }
        Ok(())
    }

    /// Applies one `key=value` setting. Returns `Ok(false)` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool, SyntheticError> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, SyntheticError> {
            v.parse()
                .map_err(|_| SyntheticError::InvalidConfig(format!("cannot parse {key}={v}")))
        }
        match key {
            "n_images" => self.n_images = num(key, value)?,
            "features_per_image" => self.features_per_image = num(key, value)?,
            "layout" => {
                self.layout = match value {
                    "strip" => Layout::Strip,
                    "grid" => Layout::Grid {
                        cols: match self.layout {
                            Layout::Grid { cols } => cols,
                            Layout::Strip => 10,
                        },
                    },
                    other => {
                        return Err(SyntheticError::InvalidConfig(format!("unknown layout {other}")))
                    }
                }
            }
            "grid_cols" => self.layout = Layout::Grid { cols: num(key, value)? },
            "overlap" | "forward_overlap" => self.forward_overlap = num(key, value)?,
            "side_overlap" => self.side_overlap = num(key, value)?,
            "distractor_fraction" => self.distractor_fraction = num(key, value)?,
            "descriptor_noise" => self.descriptor_noise = num(key, value)?,
            "keypoint_noise_px" => self.keypoint_noise_px = num(key, value)?,
            "image_width" => self.image_width = num(key, value)?,
            "image_height" => self.image_height = num(key, value)?,
            "prototypes" => self.prototypes = num(key, value)?,
            "landmark_spread" => self.landmark_spread = num(key, value)?,
            "land_cover_classes" => self.land_cover_classes = num(key, value)?,
            "land_cover_scale" => self.land_cover_scale = num(key, value)?,
            "min_gt_overlap" => self.min_gt_overlap = num(key, value)?,
            "feature_cap" => self.feature_cap = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out = vec![
            ("n_images".to_string(), self.n_images.to_string()),
            ("features_per_image".into(), self.features_per_image.to_string()),
        ];
        match self.layout {
            Layout::Strip => out.push(("layout".into(), "strip".into())),
            Layout::Grid { cols } => {
                out.push(("layout".into(), "grid".into()));
                out.push(("grid_cols".into(), cols.to_string()));
            }
        }
        out.extend([
            ("forward_overlap".into(), self.forward_overlap.to_string()),
            ("side_overlap".into(), self.side_overlap.to_string()),
            ("distractor_fraction".into(), self.distractor_fraction.to_string()),
            ("descriptor_noise".into(), self.descriptor_noise.to_string()),
            ("keypoint_noise_px".into(), self.keypoint_noise_px.to_string()),
            ("image_width".into(), self.image_width.to_string()),
            ("image_height".into(), self.image_height.to_string()),
            ("prototypes".into(), self.prototypes.to_string()),
            ("landmark_spread".into(), self.landmark_spread.to_string()),
            ("land_cover_classes".into(), self.land_cover_classes.to_string()),
            ("land_cover_scale".into(), self.land_cover_scale.to_string()),
            ("min_gt_overlap".into(), self.min_gt_overlap.to_string()),
            ("feature_cap".into(), self.feature_cap.to_string()),
            ("seed".into(), self.seed.to_string()),
        ]);
        out
    }
}

/// Overlapping pairs plus the planted feature correspondences of each.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SyntheticGroundTruth {
    pub pairs: BTreeSet<(u64, u64)>,
    /// (feature index in the lower id, feature index in the higher id).
    pub correspondences: BTreeMap<(u64, u64), Vec<(u32, u32)>>,
}

impl SyntheticGroundTruth {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for &(i, j) in &self.pairs {
            s.push_str(&format!("{i} {j}\n"));
        }
        s
    }

    pub fn correspondences_text(&self) -> String {
        let mut s = String::new();
        for (&(i, j), c) in &self.correspondences {
            s.push_str(&format!("{i} {j}"));
            for (a, b) in c {
                s.push_str(&format!(" {a}:{b}"));
            }
            s.push('\n');
        }
        s
    }

    /// Parses the `i j` pair list written by [`Self::to_text`].
    pub fn pairs_from_text(text: &str) -> Result<BTreeSet<(u64, u64)>, String> {
        let mut out = BTreeSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut it = line.split_whitespace();
            let parse = |t: Option<&str>| -> Result<u64, String> {
                t.ok_or_else(|| format!("line {}: missing field", n + 1))?
                    .parse()
                    .map_err(|e| format!("line {}: {e}", n + 1))
            };
            let a = parse(it.next())?;
            let b = parse(it.next())?;
            out.insert((a.min(b), a.max(b)));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Footprint {
    pub u0: f64,
    pub v0: f64,
    pub width: f64,
    pub height: f64,
}

struct Landmark {
    id: u64,
    u: f64,
    v: f64,
    scale: f32,
    orientation: f32,
    descriptor: [u8; DESCRIPTOR_DIM],
}

/// Lazily evaluated synthetic dataset.
pub struct SyntheticWorld {
    cfg: SyntheticConfig,
    prototypes: Vec<[u8; DESCRIPTOR_DIM]>,
    zipf_cdf: Vec<f64>,
    /// Per land-cover class, prototype index by Zipf rank.
    class_ranking: Vec<Vec<usize>>,
    landmarks_per_cell: f64,
}

impl SyntheticWorld {
    pub fn new(cfg: SyntheticConfig) -> Result<Self, SyntheticError> {
        cfg.validate()?;
        let mut rng = seed::rng(seed::derive(cfg.seed, "synthetic/prototypes"));
        let prototypes = (0..cfg.prototypes)
            .map(|_| {
                let mut p = [0u8; DESCRIPTOR_DIM];
                for v in p.iter_mut() {
                    // Skewed toward small values like SIFT histograms.
                    let u: f64 = rng.random();
                    *v = (u * u * 200.0) as u8;
                }
                p
            })
            .collect();
        let weights: Vec<f64> =
            (0..cfg.prototypes).map(|p| 1.0 / ((p + 1) as f64).powf(ZIPF_EXPONENT)).collect();
        let total: f64 = weights.iter().sum();
        let mut acc = 0.0;
        let zipf_cdf = weights
            .iter()
            .map(|w| {
                acc += w / total;
                acc
            })
            .collect();
        let mut class_rng = seed::rng(seed::derive(cfg.seed, "synthetic/land-cover"));
        let class_ranking = (0..cfg.land_cover_classes)
            .map(|c| {
                let mut order: Vec<usize> = (0..cfg.prototypes).collect();
                if c > 0 {
                    order.shuffle(&mut class_rng);
                }
                order
            })
            .collect();
        let area = cfg.image_width as f64 * cfg.image_height as f64;
        let landmark_features = cfg.features_per_image as f64 * (1.0 - cfg.distractor_fraction);
        let landmarks_per_cell = landmark_features / area * CELL * CELL;
        Ok(Self { cfg, prototypes, zipf_cdf, class_ranking, landmarks_per_cell })
    }

    pub fn config(&self) -> &SyntheticConfig {
        &self.cfg
    }

    pub fn len(&self) -> usize {
        self.cfg.n_images
    }

    pub fn is_empty(&self) -> bool {
        self.cfg.n_images == 0
    }

    fn grid_position(&self, i: usize) -> (usize, usize) {
        match self.cfg.layout {
            Layout::Strip => (0, i),
            Layout::Grid { cols } => (i / cols, i % cols),
        }
    }

    pub fn footprint(&self, i: usize) -> Footprint {
        let (row, col) = self.grid_position(i);
        let w = self.cfg.image_width as f64;
        let h = self.cfg.image_height as f64;
        Footprint {
            u0: col as f64 * w * (1.0 - self.cfg.forward_overlap),
            v0: row as f64 * h * (1.0 - self.cfg.side_overlap),
            width: w,
            height: h,
        }
    }

    /// Intersection area of two footprints as a fraction of one footprint.
    pub fn overlap_fraction(&self, i: usize, j: usize) -> f64 {
        let a = self.footprint(i);
        let b = self.footprint(j);
        let ix = (a.width - (a.u0 - b.u0).abs()).max(0.0);
        let iy = (a.height - (a.v0 - b.v0).abs()).max(0.0);
        ix * iy / (a.width * a.height)
    }

    /// Overlap test with a small tolerance so that configured overlaps
    /// landing exactly on the threshold are not split by rounding.
    pub fn is_overlapping(&self, i: usize, j: usize) -> bool {
        i != j && self.overlap_fraction(i, j) >= self.cfg.min_gt_overlap - 1e-9
    }

    pub fn ground_truth_pairs(&self) -> BTreeSet<(u64, u64)> {
        let n = self.cfg.n_images;
        let mut out = BTreeSet::new();
        // Footprints only overlap within a bounded index window, but the
        // quadratic scan is cheap next to descriptor generation.
        for i in 0..n {
            for j in i + 1..n {
                if self.is_overlapping(i, j) {
                    out.insert((i as u64, j as u64));
                }
            }
        }
        out
    }

    /// Bilinear value noise in [0,1) for one land-cover class.
    fn class_field(&self, class: usize, u: f64, v: f64) -> f64 {
        let root = seed::derive(self.cfg.seed, "synthetic/land-cover-field") ^ (class as u64).wrapping_mul(0x9e37_79b9);
        let (x, y) = (u / self.cfg.land_cover_scale, v / self.cfg.land_cover_scale);
        let (ix, iy) = (x.floor(), y.floor());
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        let (fx, fy) = (smooth(x - ix), smooth(y - iy));
        let corner = |dx: u64, dy: u64| {
            let h = splitmix64(root ^ splitmix64(((ix as u64 + dx) << 32) ^ (iy as u64 + dy)));
            (h >> 11) as f64 / (1u64 << 53) as f64
        };
        let top = corner(0, 0) * (1.0 - fx) + corner(1, 0) * fx;
        let bottom = corner(0, 1) * (1.0 - fx) + corner(1, 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Draws a prototype for a feature at ground position `(u, v)`.
    fn prototype(&self, u: f64, v: f64, rng: &mut seed::Rng) -> usize {
        let classes = self.class_ranking.len();
        let class = if classes == 1 {
            0
        } else {
            // Sharpened weights: one class usually dominates a neighborhood.
            let weights: Vec<f64> = (0..classes).map(|c| self.class_field(c, u, v).powi(4)).collect();
            let total: f64 = weights.iter().sum();
            let mut t = rng.random::<f64>() * total;
            let mut pick = classes - 1;
            for (c, w) in weights.iter().enumerate() {
                if t < *w {
                    pick = c;
                    break;
                }
                t -= w;
            }
            pick
        };
        let r: f64 = rng.random();
        let rank = self.zipf_cdf.partition_point(|&c| c < r).min(self.prototypes.len() - 1);
        self.class_ranking[class][rank]
    }

    fn spread_descriptor(&self, proto: usize, spread: u8, rng: &mut seed::Rng) -> [u8; DESCRIPTOR_DIM] {
        let base = &self.prototypes[proto];
        let mut out = [0u8; DESCRIPTOR_DIM];
        let s = spread as i32;
        for (o, &b) in out.iter_mut().zip(base) {
            let delta = if s > 0 { rng.random_range(-s..=s) } else { 0 };
            *o = (b as i32 + delta).clamp(0, 255) as u8;
        }
        out
    }

    fn random_scale(rng: &mut seed::Rng) -> f32 {
        let u: f64 = rng.random();
        (MIN_SCALE * (MAX_SCALE / MIN_SCALE).powf(u)) as f32
    }

    fn cell_landmarks(&self, cx: u64, cy: u64) -> Vec<Landmark> {
        let cell_seed = splitmix64(seed::derive(self.cfg.seed, "synthetic/cell") ^ (cx << 32 | cy));
        let mut rng = seed::rng(cell_seed);
        let base = self.landmarks_per_cell.floor();
        let extra = if rng.random::<f64>() < self.landmarks_per_cell - base { 1 } else { 0 };
        let count = base as usize + extra;
        (0..count)
            .map(|j| {
                let u = (cx as f64 + rng.random::<f64>()) * CELL;
                let v = (cy as f64 + rng.random::<f64>()) * CELL;
                let scale = Self::random_scale(&mut rng);
                let orientation = rng.random_range(-std::f32::consts::PI..std::f32::consts::PI);
                let proto = self.prototype(u, v, &mut rng);
                let descriptor = self.spread_descriptor(proto, self.cfg.landmark_spread, &mut rng);
                Landmark { id: (cx << 40) | (cy << 16) | j as u64, u, v, scale, orientation, descriptor }
            })
            .collect()
    }

    fn observe(&self, base: &[u8; DESCRIPTOR_DIM], rng: &mut seed::Rng) -> [u8; DESCRIPTOR_DIM] {
        let mut out = *base;
        let s = self.cfg.descriptor_noise as i32;
        if s > 0 {
            for o in out.iter_mut() {
                *o = (*o as i32 + rng.random_range(-s..=s)).clamp(0, 255) as u8;
            }
        }
        out
    }

    fn jitter(&self, rng: &mut seed::Rng) -> (f64, f64) {
        let r = self.cfg.keypoint_noise_px;
        if r <= 0.0 {
            return (0.0, 0.0);
        }
        let rho = r * rng.random::<f64>().sqrt();
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        (rho * theta.cos(), rho * theta.sin())
    }

    /// Image `i` plus, per retained feature, the landmark it observes.
    pub fn image_with_landmarks(&self, i: usize) -> (DescriptorSet, Vec<Option<u64>>) {
        let fp = self.footprint(i);
        let mut tagged: Vec<(LocalFeature, Option<u64>)> = Vec::new();
        let obs_root = seed::derive(self.cfg.seed, "synthetic/observe");
        let cx0 = (fp.u0 / CELL).floor() as u64;
        let cx1 = ((fp.u0 + fp.width) / CELL).ceil() as u64;
        let cy0 = (fp.v0 / CELL).floor() as u64;
        let cy1 = ((fp.v0 + fp.height) / CELL).ceil() as u64;
        let (w, h) = (fp.width, fp.height);
        for cy in cy0..cy1 {
            for cx in cx0..cx1 {
                for lm in self.cell_landmarks(cx, cy) {
                    let (x, y) = (lm.u - fp.u0, lm.v - fp.v0);
                    if !(0.0..w).contains(&x) || !(0.0..h).contains(&y) {
                        continue;
                    }
                    let mut rng = seed::rng(seed::derive_pair(obs_root, i as u64, lm.id));
                    let (dx, dy) = self.jitter(&mut rng);
                    let descriptor = self.observe(&lm.descriptor, &mut rng);
                    tagged.push((
                        LocalFeature {
                            x: (x + dx).clamp(0.0, w) as f32,
                            y: (y + dy).clamp(0.0, h) as f32,
                            scale: lm.scale,
                            orientation: lm.orientation,
                            descriptor,
                        },
                        Some(lm.id),
                    ));
                }
            }
        }
        let n_distractors =
            (self.cfg.features_per_image as f64 * self.cfg.distractor_fraction).round() as usize;
        let mut rng = seed::rng(seed::derive_pair(
            seed::derive(self.cfg.seed, "synthetic/distractors"),
            i as u64,
            0,
        ));
        for _ in 0..n_distractors {
            let x = rng.random_range(0.0..w);
            let y = rng.random_range(0.0..h);
            let scale = Self::random_scale(&mut rng);
            let orientation = rng.random_range(-std::f32::consts::PI..std::f32::consts::PI);
            let proto = self.prototype(fp.u0 + x, fp.v0 + y, &mut rng);
            let base = self.spread_descriptor(proto, self.cfg.landmark_spread, &mut rng);
            let descriptor = self.observe(&base, &mut rng);
            tagged.push((
                LocalFeature { x: x as f32, y: y as f32, scale, orientation, descriptor },
                None,
            ));
        }
        tagged.sort_by(|a, b| b.0.scale.total_cmp(&a.0.scale));
        tagged.truncate(self.cfg.feature_cap);
        let (features, tags) = tagged.into_iter().unzip();
        (
            DescriptorSet {
                image_id: i as u64,
                image_width: self.cfg.image_width,
                image_height: self.cfg.image_height,
                features,
            },
            tags,
        )
    }

    pub fn image(&self, i: usize) -> DescriptorSet {
        self.image_with_landmarks(i).0
    }

    /// Planted correspondences between two generated images.
    pub fn correspondences(
        tags_a: &[Option<u64>],
        tags_b: &[Option<u64>],
    ) -> Vec<(u32, u32)> {
        let index_b: HashMap<u64, u32> = tags_b
            .iter()
            .enumerate()
            .filter_map(|(k, t)| t.map(|id| (id, k as u32)))
            .collect();
        tags_a
            .iter()
            .enumerate()
            .filter_map(|(k, t)| t.and_then(|id| index_b.get(&id).map(|&kb| (k as u32, kb))))
            .collect()
    }
}

/// Generates the whole dataset in memory together with its ground truth.
pub fn generate_synthetic_dataset(
    cfg: &SyntheticConfig,
) -> Result<(Vec<DescriptorSet>, SyntheticGroundTruth), SyntheticError> {
    let world = SyntheticWorld::new(cfg.clone())?;
    use rayon::prelude::*;
    let images: Vec<(DescriptorSet, Vec<Option<u64>>)> =
        (0..cfg.n_images).into_par_iter().map(|i| world.image_with_landmarks(i)).collect();
    let pairs = world.ground_truth_pairs();
    let correspondences = pairs
        .iter()
        .map(|&(i, j)| {
            let c = SyntheticWorld::correspondences(&images[i as usize].1, &images[j as usize].1);
            ((i, j), c)
        })
        .collect();
    let sets = images.into_iter().map(|(s, _)| s).collect();
    Ok((sets, SyntheticGroundTruth { pairs, correspondences }))
}

/// Two calibrated views of a random 3D point cloud with known geometry.
#[derive(Debug, Clone)]
pub struct TwoViewScene {
    pub points_a: Vec<[f64; 2]>,
    pub points_b: Vec<[f64; 2]>,
    /// Generator label: true for planted correspondences, false for outliers.
    pub inlier: Vec<bool>,
    /// Ground-truth fundamental matrix (unit Frobenius norm).
    pub fundamental: Matrix3<f64>,
    pub width: f64,
    pub height: f64,
}

/// Builds a two-view scene. Inlier keypoints are each displaced uniformly
/// within a disk of radius `noise_px / 2`, so corresponding points move by at
/// most `noise_px` relative to each other. Outliers pair random pixels and
/// are shuffled in among the inliers.
pub fn two_view_scene(n_inliers: usize, n_outliers: usize, noise_px: f64, seed: u64) -> TwoViewScene {
    let mut rng = seed::rng(seed);
    let (width, height, focal) = (1024.0, 768.0, 900.0);
    let k = Matrix3::new(focal, 0.0, width / 2.0, 0.0, focal, height / 2.0, 0.0, 0.0, 1.0);
    let rot = Rotation3::from_euler_angles(
        rng.random_range(-0.08..0.08),
        rng.random_range(-0.25..0.25),
        rng.random_range(-0.08..0.08),
    );
    let t = Vector3::new(rng.random_range(0.6..1.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2));
    let project = |p: Vector3<f64>| -> Option<[f64; 2]> {
        if p.z <= 0.1 {
            return None;
        }
        let q = k * p;
        let (x, y) = (q.x / q.z, q.y / q.z);
        ((0.0..width).contains(&x) && (0.0..height).contains(&y)).then_some([x, y])
    };
    let disk = |rng: &mut seed::Rng, r: f64| -> [f64; 2] {
        if r <= 0.0 {
            return [0.0, 0.0];
        }
        let rho = r * rng.random::<f64>().sqrt();
        let th = rng.random_range(0.0..std::f64::consts::TAU);
        [rho * th.cos(), rho * th.sin()]
    };

    let mut entries: Vec<([f64; 2], [f64; 2], bool)> = Vec::with_capacity(n_inliers + n_outliers);
    while entries.len() < n_inliers {
        let p = Vector3::new(
            rng.random_range(-4.0..4.0),
            rng.random_range(-3.0..3.0),
            rng.random_range(5.0..12.0),
        );
        let (Some(a), Some(b)) = (project(p), project(rot * p + t)) else { continue };
        let na = disk(&mut rng, noise_px / 2.0);
        let nb = disk(&mut rng, noise_px / 2.0);
        entries.push(([a[0] + na[0], a[1] + na[1]], [b[0] + nb[0], b[1] + nb[1]], true));
    }
    for _ in 0..n_outliers {
        let a = [rng.random_range(0.0..width), rng.random_range(0.0..height)];
        let b = [rng.random_range(0.0..width), rng.random_range(0.0..height)];
        entries.push((a, b, false));
    }
    use rand::seq::SliceRandom;
    entries.shuffle(&mut rng);

    let tx = Matrix3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0);
    let k_inv = k.try_inverse().expect("calibration is invertible");
    let f = k_inv.transpose() * tx * rot.matrix() * k_inv;
    let f = f / f.norm();
    TwoViewScene {
        points_a: entries.iter().map(|e| e.0).collect(),
        points_b: entries.iter().map(|e| e.1).collect(),
        inlier: entries.iter().map(|e| e.2).collect(),
        fundamental: f,
        width,
        height,
    }
}
