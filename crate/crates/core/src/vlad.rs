//! VLAD aggregation.
//!
//! Each local descriptor adds its residual against the nearest codebook
//! center into that center's block of the global vector. Blocks are then
//! L2-normalized independently (empty blocks stay zero) and the whole vector
//! is L2-normalized. Images whose residuals are all zero produce a zero
//! vector flagged as degenerate; such vectors are never indexed.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::binio::{ByteReader, PutLe};
use crate::codebook::Codebook;
use crate::descriptor::{unit_descriptor, DescriptorSet};

const MAGIC: &[u8; 4] = b"UVL1";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum VladError {
    #[error("dimension mismatch: codebook has dimension {expected}, descriptors have {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("image {image_id}: {source}")]
    Image {
        image_id: u64,
        #[source]
        source: Box<VladError>,
    },
    #[error("malformed VLAD file: {0}")]
    Malformed(String),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct VladDescriptor {
    pub image_id: u64,
    pub k: usize,
    pub dim: usize,
    /// `k` contiguous blocks of `dim` values.
    pub vector: Vec<f32>,
    /// True when the image contributed no residual mass.
    pub degenerate: bool,
}

impl VladDescriptor {
    pub fn block(&self, j: usize) -> &[f32] {
        &self.vector[j * self.dim..(j + 1) * self.dim]
    }
}

/// Per-block residual sums before normalization.
pub fn residual_sums(descriptors: &[f32], codebook: &Codebook) -> Result<Vec<f64>, VladError> {
    let dim = codebook.dim;
    if !descriptors.len().is_multiple_of(dim) {
        return Err(VladError::DimensionMismatch { expected: dim, actual: descriptors.len() });
    }
    let mut sums = vec![0.0f64; codebook.k * dim];
    for row in descriptors.chunks_exact(dim) {
        let (j, _) = codebook.nearest_unchecked(row);
        let center = codebook.center(j);
        for ((s, &x), &c) in sums[j * dim..(j + 1) * dim].iter_mut().zip(row).zip(center) {
            *s += x as f64 - c as f64;
        }
    }
    Ok(sums)
}

/// Aggregates flattened descriptor rows of the codebook's dimension.
pub fn aggregate_rows(image_id: u64, descriptors: &[f32], codebook: &Codebook) -> Result<VladDescriptor, VladError> {
    let dim = codebook.dim;
    let mut sums = residual_sums(descriptors, codebook)?;
    for block in sums.chunks_exact_mut(dim) {
        let n = block.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            block.iter_mut().for_each(|v| *v /= n);
        }
    }
    let total = sums.iter().map(|v| v * v).sum::<f64>().sqrt();
    let degenerate = total == 0.0;
    let vector = if degenerate {
        vec![0.0; sums.len()]
    } else {
        sums.iter().map(|&v| (v / total) as f32).collect()
    };
    Ok(VladDescriptor { image_id, k: codebook.k, dim, vector, degenerate })
}

pub fn aggregate_vlad(set: &DescriptorSet, codebook: &Codebook) -> Result<VladDescriptor, VladError> {
    if codebook.dim != crate::DESCRIPTOR_DIM {
        return Err(VladError::DimensionMismatch { expected: codebook.dim, actual: crate::DESCRIPTOR_DIM });
    }
    let mut rows = Vec::with_capacity(set.features.len() * codebook.dim);
    for f in &set.features {
        rows.extend_from_slice(&unit_descriptor(&f.descriptor));
    }
    aggregate_rows(set.image_id, &rows, codebook)
}

/// Aggregates images in parallel; output order follows input order.
pub fn batch_aggregate(sets: &[DescriptorSet], codebook: &Codebook) -> Result<Vec<VladDescriptor>, VladError> {
    sets.par_iter()
        .map(|s| {
            aggregate_vlad(s, codebook)
                .map_err(|e| VladError::Image { image_id: s.image_id, source: Box::new(e) })
        })
        .collect()
}

pub fn encode_matrix(vlads: &[VladDescriptor]) -> Result<Vec<u8>, VladError> {
    let (k, dim) = vlads.first().map_or((0, 0), |v| (v.k, v.dim));
    let mut out = Vec::with_capacity(24 + vlads.len() * (8 + k * dim * 4));
    out.extend_from_slice(MAGIC);
    out.put_u32(VERSION);
    out.put_u64(vlads.len() as u64);
    out.put_u32(k as u32);
    out.put_u32(dim as u32);
    for v in vlads {
        if v.k != k || v.dim != dim {
            return Err(VladError::DimensionMismatch { expected: k * dim, actual: v.vector.len() });
        }
        out.put_u64(v.image_id);
        out.put_f32s(&v.vector);
    }
    Ok(out)
}

pub fn decode_matrix(bytes: &[u8]) -> Result<Vec<VladDescriptor>, VladError> {
    let mut r = ByteReader::new(bytes);
    let bad = |e: crate::binio::UnexpectedEof| VladError::Malformed(e.to_string());
    let magic: [u8; 4] = r.array().map_err(bad)?;
    if &magic != MAGIC {
        return Err(VladError::Malformed("bad magic".into()));
    }
    let version = r.u32().map_err(bad)?;
    if version != VERSION {
        return Err(VladError::Malformed(format!("unsupported version {version}")));
    }
    let count = r.u64().map_err(bad)? as usize;
    let k = r.u32().map_err(bad)? as usize;
    let dim = r.u32().map_err(bad)? as usize;
    if r.remaining() != count * (8 + k * dim * 4) {
        return Err(VladError::Malformed("payload size does not match header".into()));
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let image_id = r.u64().map_err(bad)?;
        let vector = r.f32_vec(k * dim).map_err(bad)?;
        let degenerate = vector.iter().all(|&v| v == 0.0);
        out.push(VladDescriptor { image_id, k, dim, vector, degenerate });
    }
    Ok(out)
}

pub fn save_matrix(vlads: &[VladDescriptor], path: &Path) -> Result<(), VladError> {
    fs::write(path, encode_matrix(vlads)?)
        .map_err(|source| VladError::Io { path: path.display().to_string(), source })
}

pub fn load_matrix(path: &Path) -> Result<Vec<VladDescriptor>, VladError> {
    let bytes =
        fs::read(path).map_err(|source| VladError::Io { path: path.display().to_string(), source })?;
    decode_matrix(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor::LocalFeature;
    use rand::{Rng, SeedableRng};

    fn two_center_book() -> Codebook {
        Codebook::from_centers(vec![0.0, 0.0, 1.0, 1.0], 2).unwrap()
    }

    #[test]
    fn worked_example_matches_hand_computation() {
        // Features (0.2,0) -> center 0, (0.9,1.1) -> center 1.
        let rows = [0.2f32, 0.0, 0.9, 1.1];
        let sums = residual_sums(&rows, &two_center_book()).unwrap();
        let expect = [0.2, 0.0, -0.1, 0.1];
        for (a, b) in sums.iter().zip(expect) {
            assert!((a - b).abs() < 1e-6, "{sums:?}");
        }
        // Intra-normalized blocks (1,0) and (-1,1)/sqrt(2), then global norm sqrt(2).
        let v = aggregate_rows(0, &rows, &two_center_book()).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let expect = [s, 0.0, -0.5, 0.5];
        for (a, b) in v.vector.iter().zip(expect) {
            assert!((*a as f64 - b).abs() < 1e-6, "{:?}", v.vector);
        }
        assert!(!v.degenerate);
    }

    #[test]
    fn descriptors_on_centers_are_degenerate() {
        let rows = [0.0f32, 0.0, 1.0, 1.0, 1.0, 1.0];
        let v = aggregate_rows(3, &rows, &two_center_book()).unwrap();
        assert!(v.degenerate);
        assert!(v.vector.iter().all(|&x| x == 0.0));
        let empty = aggregate_rows(4, &[], &two_center_book()).unwrap();
        assert!(empty.degenerate);
        assert_eq!(empty.vector.len(), 4);
    }

    #[test]
    fn single_center_points_along_mean_residual() {
        let cb = Codebook::from_centers(vec![0.5, -0.5, 0.0], 3).unwrap();
        let rows = [1.0f32, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0];
        let v = aggregate_rows(0, &rows, &cb).unwrap();
        let mean = [0.5f64, 0.5, 0.25];
        let dir: Vec<f64> = mean.iter().zip([0.5, -0.5, 0.0]).map(|(m, c)| m - c).collect();
        let n = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (a, b) in v.vector.iter().zip(&dir) {
            assert!((*a as f64 - b / n).abs() < 1e-6);
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        assert!(matches!(
            aggregate_rows(0, &[1.0, 2.0, 3.0], &two_center_book()),
            Err(VladError::DimensionMismatch { .. })
        ));
        let set = DescriptorSet { image_id: 1, image_width: 1, image_height: 1, features: vec![] };
        assert!(matches!(aggregate_vlad(&set, &two_center_book()), Err(VladError::DimensionMismatch { .. })));
        match batch_aggregate(&[set], &two_center_book()) {
            Err(VladError::Image { image_id: 1, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    fn random_set(id: u64, n: usize, rng: &mut rand_chacha::ChaCha8Rng) -> DescriptorSet {
        DescriptorSet {
            image_id: id,
            image_width: 100,
            image_height: 100,
            features: (0..n)
                .map(|_| {
                    let mut d = [0u8; 128];
                    rng.fill(&mut d[..]);
                    LocalFeature { x: 0.0, y: 0.0, scale: 1.0, orientation: 0.0, descriptor: d }
                })
                .collect(),
        }
    }

    #[test]
    fn batch_matches_sequential_and_keeps_order() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let centers: Vec<f32> = (0..8 * 128).map(|_| rng.random::<f32>() * 0.2).collect();
        let cb = Codebook::from_centers(centers, 128).unwrap();
        let sets: Vec<_> = (0..20).map(|i| random_set(i, 30, &mut rng)).collect();
        let batch = batch_aggregate(&sets, &cb).unwrap();
        for (s, v) in sets.iter().zip(&batch) {
            assert_eq!(&aggregate_vlad(s, &cb).unwrap(), v);
            assert!((crate::distance::norm(&v.vector) - 1.0).abs() < 1e-5);
        }
        assert!(batch_aggregate(&[], &cb).unwrap().is_empty());
        assert_eq!(batch_aggregate(&sets[..1], &cb).unwrap()[0], aggregate_vlad(&sets[0], &cb).unwrap());
    }

    #[test]
    fn matrix_file_round_trips() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let centers: Vec<f32> = (0..4 * 128).map(|_| rng.random::<f32>() * 0.2).collect();
        let cb = Codebook::from_centers(centers, 128).unwrap();
        let sets: Vec<_> = (0..3).map(|i| random_set(i * 10, 5, &mut rng)).collect();
        let vl = batch_aggregate(&sets, &cb).unwrap();
        let bytes = encode_matrix(&vl).unwrap();
        assert_eq!(&bytes[..4], b"UVL1");
        assert_eq!(decode_matrix(&bytes).unwrap(), vl);
        assert!(decode_matrix(&bytes[..bytes.len() - 2]).is_err());
    }
}
