//! Pipeline configuration as plain `key = value` text.
//!
//! Blank lines and lines starting with `#` are ignored. [`PipelineConfig::to_text`]
//! writes every key, so a recorded configuration reproduces its run when fed back.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codebook::{Initialization, KMeansParams, SamplingConfig};
use crate::descriptor::DEFAULT_FEATURE_CAP;
use crate::hnsw::HnswParams;
use crate::retrieval::RetrievalConfig;
use crate::seed;
use crate::verification::{ResidualKind, VerificationConfig};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for `{key}`: {reason}")]
    BadValue { key: String, value: String, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub input_dir: PathBuf,
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Worker cap; `None` uses every core.
    pub threads: Option<usize>,
    pub feature_cap: usize,
    pub codebook_k: usize,
    pub kmeans_max_iters: usize,
    pub kmeans_tol: f64,
    pub kmeans_init: Initialization,
    pub sample_fraction: f64,
    pub sample_features: usize,
    pub hnsw_m: usize,
    /// Layer-0 degree cap; `None` means `2 * M`.
    pub hnsw_m0: Option<usize>,
    pub ef_construction: usize,
    pub ef_search: usize,
    pub sample_count: usize,
    pub kappa: f64,
    pub min_select: usize,
    pub max_select: usize,
    pub ratio: f64,
    pub max_error_px: f64,
    pub min_inliers: usize,
    pub ransac_confidence: f64,
    pub ransac_max_iters: usize,
    pub residual: ResidualKind,
    pub r_ew: f64,
    pub max_cluster_size: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            input_dir: PathBuf::from("descriptors"),
            output_dir: PathBuf::from("out"),
            seed: 0,
            threads: None,
            feature_cap: DEFAULT_FEATURE_CAP,
            codebook_k: 256,
            kmeans_max_iters: 50,
            kmeans_tol: 1e-4,
            kmeans_init: Initialization::KMeansPlusPlus,
            sample_fraction: 0.2,
            sample_features: 1500,
            hnsw_m: 32,
            hnsw_m0: None,
            ef_construction: 200,
            ef_search: 128,
            sample_count: 300,
            kappa: 0.4,
            min_select: 5,
            max_select: 300,
            ratio: 0.8,
            max_error_px: 1.0,
            min_inliers: 15,
            ransac_confidence: 0.999,
            ransac_max_iters: 10_000,
            residual: ResidualKind::Symmetric,
            r_ew: 0.5,
            max_cluster_size: 500,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue { key: key.into(), value: value.into(), reason: e.to_string() })
}

fn bad(key: &str, value: &str, reason: &str) -> ConfigError {
    ConfigError::BadValue { key: key.into(), value: value.into(), reason: reason.into() }
}

/// Splits config text into `(key, value)` pairs in file order.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: n + 1 })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(ConfigError::Syntax { line: n + 1 });
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl PipelineConfig {
    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (k, v) in parse_pairs(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "input_dir" => self.input_dir = PathBuf::from(value),
            "output_dir" => self.output_dir = PathBuf::from(value),
            "seed" => self.seed = parse(key, value)?,
            "threads" => self.threads = if value == "auto" { None } else { Some(parse(key, value)?) },
            "feature_cap" => self.feature_cap = parse(key, value)?,
            "codebook.k" => self.codebook_k = parse(key, value)?,
            "codebook.max_iters" => self.kmeans_max_iters = parse(key, value)?,
            "codebook.tol" => self.kmeans_tol = parse(key, value)?,
            "codebook.init" => {
                self.kmeans_init = match value {
                    "kmeans++" => Initialization::KMeansPlusPlus,
                    "random" => Initialization::Random,
                    _ => return Err(bad(key, value, "expected kmeans++ or random")),
                }
            }
            "sampling.fraction" => self.sample_fraction = parse(key, value)?,
            "sampling.features_per_image" => self.sample_features = parse(key, value)?,
            "hnsw.m" => self.hnsw_m = parse(key, value)?,
            "hnsw.m0" => self.hnsw_m0 = if value == "auto" { None } else { Some(parse(key, value)?) },
            "hnsw.ef_construction" => self.ef_construction = parse(key, value)?,
            "hnsw.ef_search" => self.ef_search = parse(key, value)?,
            "retrieval.sample_count" => self.sample_count = parse(key, value)?,
            "retrieval.kappa" => self.kappa = parse(key, value)?,
            "retrieval.min_select" => self.min_select = parse(key, value)?,
            "retrieval.max_select" => self.max_select = parse(key, value)?,
            "verify.ratio" => self.ratio = parse(key, value)?,
            "verify.max_error_px" => self.max_error_px = parse(key, value)?,
            "verify.min_inliers" => self.min_inliers = parse(key, value)?,
            "verify.confidence" => self.ransac_confidence = parse(key, value)?,
            "verify.max_iters" => self.ransac_max_iters = parse(key, value)?,
            "verify.residual" => {
                self.residual = match value {
                    "symmetric" => ResidualKind::Symmetric,
                    "one_sided" => ResidualKind::OneSided,
                    _ => return Err(bad(key, value, "expected symmetric or one_sided")),
                }
            }
            "graph.r_ew" => self.r_ew = parse(key, value)?,
            "partition.max_size" => self.max_cluster_size = parse(key, value)?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let check = |ok: bool, key: &str, value: String, reason: &str| if ok { Ok(()) } else { Err(bad(key, &value, reason)) };
        check(self.codebook_k >= 1, "codebook.k", self.codebook_k.to_string(), "must be >= 1")?;
        check(
            self.sample_fraction > 0.0 && self.sample_fraction <= 1.0,
            "sampling.fraction",
            self.sample_fraction.to_string(),
            "must lie in (0, 1]",
        )?;
        check(self.sample_features >= 1, "sampling.features_per_image", self.sample_features.to_string(), "must be >= 1")?;
        check(self.feature_cap >= 1, "feature_cap", self.feature_cap.to_string(), "must be >= 1")?;
        check(self.hnsw_m >= 2, "hnsw.m", self.hnsw_m.to_string(), "must be >= 2")?;
        check(self.ef_construction >= self.hnsw_m, "hnsw.ef_construction", self.ef_construction.to_string(), "must be >= M")?;
        check(self.ef_search >= 1, "hnsw.ef_search", self.ef_search.to_string(), "must be >= 1")?;
        check(self.sample_count >= 1, "retrieval.sample_count", self.sample_count.to_string(), "must be >= 1")?;
        check(self.min_select <= self.max_select, "retrieval.min_select", self.min_select.to_string(), "exceeds max_select")?;
        check(self.kappa.is_finite(), "retrieval.kappa", self.kappa.to_string(), "must be finite")?;
        check(self.ratio > 0.0 && self.ratio <= 1.0, "verify.ratio", self.ratio.to_string(), "must lie in (0, 1]")?;
        check(self.max_error_px > 0.0, "verify.max_error_px", self.max_error_px.to_string(), "must be positive")?;
        check(
            self.ransac_confidence > 0.0 && self.ransac_confidence < 1.0,
            "verify.confidence",
            self.ransac_confidence.to_string(),
            "must lie in (0, 1)",
        )?;
        check(self.ransac_max_iters >= 1, "verify.max_iters", self.ransac_max_iters.to_string(), "must be >= 1")?;
        check((0.0..=1.0).contains(&self.r_ew), "graph.r_ew", self.r_ew.to_string(), "must lie in [0, 1]")?;
        check(self.max_cluster_size >= 1, "partition.max_size", self.max_cluster_size.to_string(), "must be >= 1")?;
        Ok(())
    }

    /// Every key in canonical order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| writeln!(out, "{k} = {v}").unwrap();
        put("input_dir", self.input_dir.display().to_string());
        put("output_dir", self.output_dir.display().to_string());
        put("seed", self.seed.to_string());
        put("threads", self.threads.map_or("auto".into(), |t| t.to_string()));
        put("feature_cap", self.feature_cap.to_string());
        put("codebook.k", self.codebook_k.to_string());
        put("codebook.max_iters", self.kmeans_max_iters.to_string());
        put("codebook.tol", format!("{:?}", self.kmeans_tol));
        put(
            "codebook.init",
            match self.kmeans_init {
                Initialization::KMeansPlusPlus => "kmeans++".into(),
                Initialization::Random => "random".into(),
            },
        );
        put("sampling.fraction", format!("{:?}", self.sample_fraction));
        put("sampling.features_per_image", self.sample_features.to_string());
        put("hnsw.m", self.hnsw_m.to_string());
        put("hnsw.m0", self.hnsw_m0.map_or("auto".into(), |m| m.to_string()));
        put("hnsw.ef_construction", self.ef_construction.to_string());
        put("hnsw.ef_search", self.ef_search.to_string());
        put("retrieval.sample_count", self.sample_count.to_string());
        put("retrieval.kappa", format!("{:?}", self.kappa));
        put("retrieval.min_select", self.min_select.to_string());
        put("retrieval.max_select", self.max_select.to_string());
        put("verify.ratio", format!("{:?}", self.ratio));
        put("verify.max_error_px", format!("{:?}", self.max_error_px));
        put("verify.min_inliers", self.min_inliers.to_string());
        put("verify.confidence", format!("{:?}", self.ransac_confidence));
        put("verify.max_iters", self.ransac_max_iters.to_string());
        put(
            "verify.residual",
            match self.residual {
                ResidualKind::Symmetric => "symmetric".into(),
                ResidualKind::OneSided => "one_sided".into(),
            },
        );
        put("graph.r_ew", format!("{:?}", self.r_ew));
        put("partition.max_size", self.max_cluster_size.to_string());
        out
    }

    /// SHA-256 of the settings that affect results (paths and thread count excluded).
    pub fn hash(&self) -> String {
        let text: String = self
            .to_text()
            .lines()
            .filter(|l| !(l.starts_with("input_dir") || l.starts_with("output_dir") || l.starts_with("threads")))
            .map(|l| format!("{l}\n"))
            .collect();
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn sampling(&self) -> SamplingConfig {
        SamplingConfig {
            image_fraction: self.sample_fraction,
            features_per_image: self.sample_features,
            seed: seed::derive(self.seed, "sampling"),
        }
    }

    pub fn kmeans(&self) -> KMeansParams {
        KMeansParams {
            k: self.codebook_k,
            max_iters: self.kmeans_max_iters,
            tol: self.kmeans_tol,
            seed: seed::derive(self.seed, "kmeans"),
            init: self.kmeans_init,
        }
    }

    pub fn hnsw(&self) -> HnswParams {
        HnswParams {
            m0: self.hnsw_m0.unwrap_or(2 * self.hnsw_m),
            ef_construction: self.ef_construction,
            ef_search: self.ef_search,
            seed: seed::derive(self.seed, "hnsw"),
            ..HnswParams::with_m(self.hnsw_m)
        }
    }

    pub fn retrieval(&self) -> RetrievalConfig {
        RetrievalConfig {
            sample_count: self.sample_count,
            kappa: self.kappa,
            min_select: self.min_select,
            max_select: self.max_select,
            ef_search: self.ef_search,
        }
    }

    pub fn verification(&self) -> VerificationConfig {
        VerificationConfig {
            ratio: self.ratio,
            max_error_px: self.max_error_px,
            confidence: self.ransac_confidence,
            max_iters: self.ransac_max_iters,
            min_inliers: self.min_inliers,
            residual: self.residual,
            seed: seed::derive(self.seed, "ransac"),
        }
    }

    pub fn partition_seed(&self) -> u64 {
        seed::derive(self.seed, "partition")
    }
}
