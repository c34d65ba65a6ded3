//! Per-image local features and the `UVD1` descriptor file format.
//!
//! Layout (little-endian):
//!
//! ```text
//! "UVD1" | version u32 = 1 | image_id u64 | width u32 | height u32
//!        | feature count u32 | descriptor dim u32 = 128
//! then per feature: x f32 | y f32 | scale f32 | orientation f32 | 128 x u8
//! ```
//!
//! Loading sorts features by descending scale (stable, so ties keep file
//! order) and keeps at most `cap` of them.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::binio::{ByteReader, PutLe};

pub const DESCRIPTOR_DIM: usize = 128;
pub const DEFAULT_FEATURE_CAP: usize = 8192;

const MAGIC: &[u8; 4] = b"UVD1";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 4 + 4 + 4 + 4;
const RECORD_LEN: usize = 16 + DESCRIPTOR_DIM;

#[derive(Debug, Error)]
pub enum DescriptorError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated file: header declares {declared} features, payload holds {actual} bytes")]
    TruncatedFile { declared: u32, actual: usize },
    #[error("descriptor dimension {0} is not 128")]
    BadDimension(u32),
    #[error("invalid descriptor set: {0}")]
    Invalid(String),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalFeature {
    pub x: f32,
    pub y: f32,
    pub scale: f32,
    pub orientation: f32,
    pub descriptor: [u8; DESCRIPTOR_DIM],
}

/// All local features of one image. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet {
    pub image_id: u64,
    pub image_width: u32,
    pub image_height: u32,
    pub features: Vec<LocalFeature>,
}

impl DescriptorSet {
    pub fn validate(&self) -> Result<(), DescriptorError> {
        if self.image_width == 0 || self.image_height == 0 {
            return Err(DescriptorError::Invalid(format!(
                "image {} has zero-sized plane {}x{}",
                self.image_id, self.image_width, self.image_height
            )));
        }
        if self.features.len() > u32::MAX as usize {
            return Err(DescriptorError::Invalid("too many features".into()));
        }
        for (i, f) in self.features.iter().enumerate() {
            if !(f.scale > 0.0) || !f.scale.is_finite() {
                return Err(DescriptorError::Invalid(format!(
                    "feature {i} of image {} has non-positive scale {}",
                    self.image_id, f.scale
                )));
            }
            if !f.x.is_finite() || !f.y.is_finite() || !f.orientation.is_finite() {
                return Err(DescriptorError::Invalid(format!(
                    "feature {i} of image {} has a non-finite coordinate",
                    self.image_id
                )));
            }
        }
        Ok(())
    }

    /// Sorts by descending scale (stable) and truncates to `cap`.
    pub fn canonicalize(&mut self, cap: usize) {
        self.features
            .sort_by(|a, b| b.scale.total_cmp(&a.scale));
        self.features.truncate(cap);
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// Descriptors as unit-length f32 rows, flattened `len() * 128`.
    pub fn unit_descriptors(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.features.len() * DESCRIPTOR_DIM);
        for f in &self.features {
            out.extend_from_slice(&unit_descriptor(&f.descriptor));
        }
        out
    }

    pub fn keypoints(&self) -> Vec<[f64; 2]> {
        self.features.iter().map(|f| [f.x as f64, f.y as f64]).collect()
    }

    pub fn encode(&self) -> Result<Vec<u8>, DescriptorError> {
        self.validate()?;
        let mut out = Vec::with_capacity(HEADER_LEN + self.features.len() * RECORD_LEN);
        out.extend_from_slice(MAGIC);
        out.put_u32(VERSION);
        out.put_u64(self.image_id);
        out.put_u32(self.image_width);
        out.put_u32(self.image_height);
        out.put_u32(self.features.len() as u32);
        out.put_u32(DESCRIPTOR_DIM as u32);
        for f in &self.features {
            out.put_f32(f.x);
            out.put_f32(f.y);
            out.put_f32(f.scale);
            out.put_f32(f.orientation);
            out.extend_from_slice(&f.descriptor);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8], cap: usize) -> Result<Self, DescriptorError> {
        let mut r = ByteReader::new(bytes);
        let short = |_| DescriptorError::MalformedHeader("file shorter than header".into());
        let magic: [u8; 4] = r.array().map_err(short)?;
        if &magic != MAGIC {
            return Err(DescriptorError::MalformedHeader(format!("bad magic {magic:?}")));
        }
        let version = r.u32().map_err(short)?;
        if version != VERSION {
            return Err(DescriptorError::MalformedHeader(format!("unsupported version {version}")));
        }
        let image_id = r.u64().map_err(short)?;
        let image_width = r.u32().map_err(short)?;
        let image_height = r.u32().map_err(short)?;
        let count = r.u32().map_err(short)?;
        let dim = r.u32().map_err(short)?;
        if dim as usize != DESCRIPTOR_DIM {
            return Err(DescriptorError::BadDimension(dim));
        }
        if r.remaining() != count as usize * RECORD_LEN {
            return Err(DescriptorError::TruncatedFile { declared: count, actual: r.remaining() });
        }
        let mut features = Vec::with_capacity(count as usize);
        for _ in 0..count {
            // Length was checked up front.
            let x = r.f32().unwrap();
            let y = r.f32().unwrap();
            let scale = r.f32().unwrap();
            let orientation = r.f32().unwrap();
            let descriptor = r.array::<DESCRIPTOR_DIM>().unwrap();
            features.push(LocalFeature { x, y, scale, orientation, descriptor });
        }
        let mut set = DescriptorSet { image_id, image_width, image_height, features };
        set.validate()?;
        set.canonicalize(cap);
        Ok(set)
    }
}

/// Converts a raw u8 descriptor to a unit-length f32 vector (zero stays zero).
pub fn unit_descriptor(raw: &[u8; DESCRIPTOR_DIM]) -> [f32; DESCRIPTOR_DIM] {
    let mut out = [0.0f32; DESCRIPTOR_DIM];
    let norm = raw.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
    if norm > 0.0 {
        for (o, &v) in out.iter_mut().zip(raw) {
            *o = (v as f64 / norm) as f32;
        }
    }
    out
}

pub fn load_descriptor_set(path: &Path, cap: usize) -> Result<DescriptorSet, DescriptorError> {
    let bytes = fs::read(path).map_err(|source| DescriptorError::Io {
        path: path.display().to_string(),
        source,
    })?;
    DescriptorSet::decode(&bytes, cap)
}

/// Validates before touching the filesystem.
pub fn save_descriptor_set(set: &DescriptorSet, path: &Path) -> Result<(), DescriptorError> {
    let bytes = set.encode()?;
    fs::write(path, bytes).map_err(|source| DescriptorError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Loads every `*.uvd` file under `dir`, ordered by file name.
pub fn load_directory(dir: &Path, cap: usize) -> Result<Vec<DescriptorSet>, DescriptorError> {
    let io_err = |source| DescriptorError::Io { path: dir.display().to_string(), source };
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(io_err)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "uvd"))
        .collect();
    paths.sort();
    use rayon::prelude::*;
    let sets = paths
        .par_iter()
        .map(|p| load_descriptor_set(p, cap))
        .collect::<Result<Vec<_>, _>>()?;
    let mut seen = std::collections::HashSet::new();
    for s in &sets {
        if !seen.insert(s.image_id) {
            return Err(DescriptorError::Invalid(format!("duplicate image id {}", s.image_id)));
        }
    }
    Ok(sets)
}

pub fn descriptor_file_name(image_id: u64) -> String {
    format!("image_{image_id:06}.uvd")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn feature(scale: f32, fill: u8) -> LocalFeature {
        LocalFeature { x: 1.5, y: 2.5, scale, orientation: 0.25, descriptor: [fill; DESCRIPTOR_DIM] }
    }

    fn set_with(features: Vec<LocalFeature>) -> DescriptorSet {
        DescriptorSet { image_id: 9, image_width: 640, image_height: 480, features }
    }

    #[test]
    fn empty_set_round_trips() {
        let s = set_with(vec![]);
        let back = DescriptorSet::decode(&s.encode().unwrap(), DEFAULT_FEATURE_CAP).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn three_feature_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.uvd");
        let s = set_with(vec![feature(3.0, 1), feature(2.0, 2), feature(1.0, 3)]);
        save_descriptor_set(&s, &path).unwrap();
        assert_eq!(load_descriptor_set(&path, DEFAULT_FEATURE_CAP).unwrap(), s);
    }

    #[test]
    fn header_layout_is_bit_exact() {
        let s = set_with(vec![feature(2.0, 7)]);
        let bytes = s.encode().unwrap();
        assert_eq!(&bytes[0..4], b"UVD1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 9);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 640);
        assert_eq!(u32::from_le_bytes(bytes[20..24].try_into().unwrap()), 480);
        assert_eq!(u32::from_le_bytes(bytes[24..28].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[28..32].try_into().unwrap()), 128);
        assert_eq!(f32::from_le_bytes(bytes[40..44].try_into().unwrap()), 2.0);
        assert_eq!(bytes.len(), 32 + 16 + 128);
        assert!(bytes[48..].iter().all(|&b| b == 7));
    }

    #[test]
    fn cap_keeps_largest_scales() {
        // Scales are a fixed permutation so the oracle can partial-sort them.
        let n = 10_000usize;
        let scales: Vec<f32> = (0..n).map(|i| ((i * 7919) % n) as f32 * 0.01 + 0.5).collect();
        let feats = scales.iter().map(|&s| feature(s, 0)).collect();
        let raw = set_with(feats).encode().unwrap();
        let loaded = DescriptorSet::decode(&raw, 8192).unwrap();
        assert_eq!(loaded.len(), 8192);

        let mut oracle = scales.clone();
        oracle.sort_by(|a, b| b.total_cmp(a));
        let max_dropped = oracle[8192];
        assert!(loaded.features.iter().all(|f| f.scale >= max_dropped));
        let kept: Vec<f32> = loaded.features.iter().map(|f| f.scale).collect();
        assert_eq!(kept, oracle[..8192]);
    }

    #[test]
    fn scale_ties_keep_file_order() {
        let s = set_with(vec![feature(1.0, 1), feature(2.0, 2), feature(1.0, 3), feature(1.0, 4)]);
        let loaded = DescriptorSet::decode(&s.encode().unwrap(), 3).unwrap();
        let fills: Vec<u8> = loaded.features.iter().map(|f| f.descriptor[0]).collect();
        assert_eq!(fills, vec![2, 1, 3]);
    }

    #[test]
    fn bad_dimension_rejected() {
        let mut bytes = set_with(vec![]).encode().unwrap();
        bytes[28..32].copy_from_slice(&64u32.to_le_bytes());
        assert!(matches!(
            DescriptorSet::decode(&bytes, DEFAULT_FEATURE_CAP),
            Err(DescriptorError::BadDimension(64))
        ));
    }

    #[test]
    fn bad_magic_and_version_rejected() {
        let good = set_with(vec![]).encode().unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(DescriptorSet::decode(&bad, 10), Err(DescriptorError::MalformedHeader(_))));
        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(DescriptorSet::decode(&bad, 10), Err(DescriptorError::MalformedHeader(_))));
        assert!(matches!(DescriptorSet::decode(&good[..10], 10), Err(DescriptorError::MalformedHeader(_))));
    }

    #[test]
    fn record_count_mismatch_is_truncation() {
        let bytes = set_with(vec![feature(1.0, 1), feature(2.0, 1)]).encode().unwrap();
        assert!(matches!(
            DescriptorSet::decode(&bytes[..bytes.len() - 1], 10),
            Err(DescriptorError::TruncatedFile { declared: 2, .. })
        ));
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(DescriptorSet::decode(&longer, 10), Err(DescriptorError::TruncatedFile { .. })));
    }

    #[test]
    fn unwritable_path_is_io_failure() {
        let s = set_with(vec![feature(1.0, 1)]);
        let err = save_descriptor_set(&s, Path::new("/nonexistent-dir/xyz/a.uvd")).unwrap_err();
        assert!(matches!(err, DescriptorError::Io { .. }));
    }

    #[test]
    fn invalid_set_rejected_before_write() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.uvd");
        let s = set_with(vec![feature(0.0, 1)]);
        assert!(matches!(save_descriptor_set(&s, &path), Err(DescriptorError::Invalid(_))));
        assert!(!path.exists());
        let mut s = set_with(vec![]);
        s.image_width = 0;
        assert!(matches!(save_descriptor_set(&s, &path), Err(DescriptorError::Invalid(_))));
    }

    #[test]
    fn unit_descriptor_has_unit_norm() {
        let mut raw = [0u8; DESCRIPTOR_DIM];
        raw[0] = 3;
        raw[5] = 4;
        let u = unit_descriptor(&raw);
        assert!((u[0] - 0.6).abs() < 1e-7 && (u[5] - 0.8).abs() < 1e-7);
        assert!(unit_descriptor(&[0; DESCRIPTOR_DIM]).iter().all(|&v| v == 0.0));
    }

    fn arb_feature() -> impl Strategy<Value = LocalFeature> {
        (
            -1e4f32..1e4,
            -1e4f32..1e4,
            0.01f32..100.0,
            -3.2f32..3.2,
            proptest::collection::vec(any::<u8>(), DESCRIPTOR_DIM),
        )
            .prop_map(|(x, y, scale, orientation, d)| LocalFeature {
                x,
                y,
                scale,
                orientation,
                descriptor: d.try_into().unwrap(),
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn round_trip_is_bit_exact(
            id in any::<u64>(),
            w in 1u32..10_000,
            h in 1u32..10_000,
            feats in proptest::collection::vec(arb_feature(), 0..40),
        ) {
            let mut s = DescriptorSet { image_id: id, image_width: w, image_height: h, features: feats };
            s.canonicalize(DEFAULT_FEATURE_CAP);
            let bytes = s.encode().unwrap();
            let back = DescriptorSet::decode(&bytes, DEFAULT_FEATURE_CAP).unwrap();
            prop_assert_eq!(back.encode().unwrap(), bytes);
            prop_assert_eq!(back, s);
        }

        #[test]
        fn loading_returns_scale_descending_prefix(
            feats in proptest::collection::vec(arb_feature(), 0..60),
            cap in 0usize..50,
        ) {
            let s = DescriptorSet { image_id: 1, image_width: 4, image_height: 4, features: feats };
            let back = DescriptorSet::decode(&s.encode().unwrap(), cap).unwrap();
            prop_assert!(back.len() <= cap);
            prop_assert!(back.features.windows(2).all(|w| w[0].scale >= w[1].scale));
            let mut all: Vec<f32> = s.features.iter().map(|f| f.scale).collect();
            all.sort_by(|a, b| b.total_cmp(a));
            let kept: Vec<f32> = back.features.iter().map(|f| f.scale).collect();
            prop_assert_eq!(&kept[..], &all[..kept.len()]);
        }
    }
}
