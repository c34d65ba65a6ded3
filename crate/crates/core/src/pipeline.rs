//! Stage-by-stage pipeline driver.
//!
//! Every stage reads its inputs from the descriptor directory and from
//! artifacts earlier stages wrote into the output directory, so any stage can
//! be rerun on its own. A finished run writes `manifest.json` with the
//! configuration hash and a SHA-256 for each artifact.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::codebook::{collect_training_descriptors, sample_training_descriptors, train_codebook, Codebook};
use crate::config::PipelineConfig;
use crate::descriptor::{load_directory, DescriptorSet};
use crate::hnsw::HnswIndex;
use crate::partition::partition_view_graph;
use crate::retrieval::{retrieve_all_pairs, MatchPairCandidateSet};
use crate::verification::{load_verified, save_verified, verify_pairs};
use crate::view_graph::{build_view_graph, ViewGraph};
use crate::vlad::{batch_aggregate, load_matrix, save_matrix};

pub const TRAINING_SAMPLE: &str = "training_sample.txt";
pub const CODEBOOK: &str = "codebook.uvc";
pub const CODEBOOK_META: &str = "codebook.meta.txt";
pub const VLAD: &str = "vlad.uvl";
pub const INDEX: &str = "index.uvh";
pub const PAIRS: &str = "pairs.txt";
pub const RETRIEVAL_SUMMARY: &str = "retrieval.json";
pub const VERIFIED: &str = "verified.uvm";
pub const VERIFICATION_SUMMARY: &str = "verification.json";
pub const VIEW_GRAPH: &str = "view_graph.txt";
pub const VIEW_GRAPH_HEADER: &str = "view_graph.json";
pub const PARTITION: &str = "partition.txt";
pub const PARTITION_SUMMARY: &str = "partition.json";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Load,
    Sample,
    Codebook,
    Vlad,
    Index,
    Retrieve,
    Verify,
    Graph,
    Partition,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Load,
        Stage::Sample,
        Stage::Codebook,
        Stage::Vlad,
        Stage::Index,
        Stage::Retrieve,
        Stage::Verify,
        Stage::Graph,
        Stage::Partition,
    ];

    pub fn number(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Load => "load",
            Stage::Sample => "sample",
            Stage::Codebook => "codebook",
            Stage::Vlad => "vlad",
            Stage::Index => "index",
            Stage::Retrieve => "retrieve",
            Stage::Verify => "verify",
            Stage::Graph => "graph",
            Stage::Partition => "partition",
        }
    }

    /// Files the stage writes into the output directory.
    pub fn artifacts(self) -> &'static [&'static str] {
        match self {
            Stage::Load => &[],
            Stage::Sample => &[TRAINING_SAMPLE],
            Stage::Codebook => &[CODEBOOK, CODEBOOK_META],
            Stage::Vlad => &[VLAD],
            Stage::Index => &[INDEX],
            Stage::Retrieve => &[PAIRS, RETRIEVAL_SUMMARY],
            Stage::Verify => &[VERIFIED, VERIFICATION_SUMMARY],
            Stage::Graph => &[VIEW_GRAPH, VIEW_GRAPH_HEADER],
            Stage::Partition => &[PARTITION, PARTITION_SUMMARY],
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("stage {} ({}) failed: {message}", stage.number(), stage.name())]
pub struct PipelineError {
    pub stage: Stage,
    pub message: String,
}

fn fail(stage: Stage) -> impl Fn(&dyn std::fmt::Display) -> PipelineError {
    move |e| PipelineError { stage, message: e.to_string() }
}

fn out_path(cfg: &PipelineConfig, name: &str) -> PathBuf {
    cfg.output_dir.join(name)
}

fn read_artifact(cfg: &PipelineConfig, stage: Stage, name: &str) -> Result<String, PipelineError> {
    let path = out_path(cfg, name);
    fs::read_to_string(&path)
        .map_err(|e| fail(stage)(&format!("cannot read {} (run the earlier stages first): {e}", path.display())))
}

fn write_artifact(cfg: &PipelineConfig, stage: Stage, name: &str, contents: &str) -> Result<(), PipelineError> {
    let path = out_path(cfg, name);
    fs::write(&path, contents).map_err(|e| fail(stage)(&format!("cannot write {}: {e}", path.display())))
}

/// Stage 0: reads every descriptor file and prepares the output directory.
pub fn load_inputs(cfg: &PipelineConfig) -> Result<Vec<DescriptorSet>, PipelineError> {
    let f = fail(Stage::Load);
    cfg.validate().map_err(|e| f(&e))?;
    if !cfg.input_dir.is_dir() {
        return Err(f(&format!("descriptor directory {} does not exist", cfg.input_dir.display())));
    }
    let sets = load_directory(&cfg.input_dir, cfg.feature_cap).map_err(|e| f(&e))?;
    if sets.is_empty() {
        return Err(f(&format!("no .uvd descriptor files in {}", cfg.input_dir.display())));
    }
    fs::create_dir_all(&cfg.output_dir).map_err(|e| f(&format!("cannot create {}: {e}", cfg.output_dir.display())))?;
    Ok(sets)
}

/// Stage 1: picks the training images and records them.
pub fn stage_sample(cfg: &PipelineConfig, sets: &[DescriptorSet]) -> Result<(), PipelineError> {
    let f = fail(Stage::Sample);
    let sample = sample_training_descriptors(sets, &cfg.sampling()).map_err(|e| f(&e))?;
    let mut text = format!("# features_per_image {}\n# descriptors {}\n", cfg.sample_features, sample.len());
    for id in &sample.image_ids {
        text.push_str(&format!("{id}\n"));
    }
    write_artifact(cfg, Stage::Sample, TRAINING_SAMPLE, &text)
}

/// Stage 2: trains the codebook on the recorded sample.
pub fn stage_codebook(cfg: &PipelineConfig, sets: &[DescriptorSet]) -> Result<Codebook, PipelineError> {
    let f = fail(Stage::Codebook);
    let text = read_artifact(cfg, Stage::Codebook, TRAINING_SAMPLE)?;
    let mut per_image = cfg.sample_features;
    let mut ids = Vec::new();
    for line in text.lines() {
        if let Some(v) = line.strip_prefix("# features_per_image ") {
            per_image = v.trim().parse().map_err(|_| f(&"bad features_per_image line"))?;
        } else if !line.starts_with('#') && !line.trim().is_empty() {
            ids.push(line.trim().parse::<u64>().map_err(|_| f(&format!("bad image id `{line}`")))?);
        }
    }
    let sample = collect_training_descriptors(sets, &ids, per_image).map_err(|e| f(&e))?;
    let codebook = train_codebook(&sample.descriptors, crate::DESCRIPTOR_DIM, &cfg.kmeans()).map_err(|e| f(&e))?;
    codebook.save(&out_path(cfg, CODEBOOK)).map_err(|e| f(&e))?;
    Ok(codebook)
}

/// Stage 3: aggregates one VLAD vector per image.
pub fn stage_vlad(cfg: &PipelineConfig, sets: &[DescriptorSet]) -> Result<(), PipelineError> {
    let f = fail(Stage::Vlad);
    let codebook = Codebook::load(&out_path(cfg, CODEBOOK)).map_err(|e| f(&e))?;
    let vlads = batch_aggregate(sets, &codebook).map_err(|e| f(&e))?;
    let degenerate = vlads.iter().filter(|v| v.degenerate).count();
    if degenerate > 0 {
        log::warn!("{degenerate} images have no features and will not be indexed");
    }
    save_matrix(&vlads, &out_path(cfg, VLAD)).map_err(|e| f(&e))
}

/// Stage 4: builds the HNSW graph over the VLAD vectors.
pub fn stage_index(cfg: &PipelineConfig) -> Result<(), PipelineError> {
    let f = fail(Stage::Index);
    let vlads = load_matrix(&out_path(cfg, VLAD)).map_err(|e| f(&e))?;
    let index = HnswIndex::build(&vlads, cfg.hnsw()).map_err(|e| f(&e))?;
    index.save(&out_path(cfg, INDEX), VLAD).map_err(|e| f(&e))
}

/// Stage 5: adaptive retrieval for every image.
pub fn stage_retrieve(cfg: &PipelineConfig) -> Result<MatchPairCandidateSet, PipelineError> {
    let f = fail(Stage::Retrieve);
    let vlads = load_matrix(&out_path(cfg, VLAD)).map_err(|e| f(&e))?;
    let (index, _) = HnswIndex::load(&out_path(cfg, INDEX), &vlads).map_err(|e| f(&e))?;
    let rcfg = cfg.retrieval();
    let out = retrieve_all_pairs(&index, &vlads, &rcfg).map_err(|e| f(&e))?;
    write_artifact(cfg, Stage::Retrieve, PAIRS, &out.pairs.to_text())?;
    write_artifact(cfg, Stage::Retrieve, RETRIEVAL_SUMMARY, &out.summary_json(&rcfg))?;
    Ok(out.pairs)
}

/// Stage 6: descriptor matching and RANSAC on every candidate pair.
pub fn stage_verify(cfg: &PipelineConfig, sets: &[DescriptorSet]) -> Result<(), PipelineError> {
    let f = fail(Stage::Verify);
    let pairs = MatchPairCandidateSet::from_text(&read_artifact(cfg, Stage::Verify, PAIRS)?).map_err(|e| f(&e))?;
    let out = verify_pairs(&pairs, sets, &cfg.verification()).map_err(|e| f(&e))?;
    save_verified(&out.verified, &out_path(cfg, VERIFIED)).map_err(|e| f(&e))?;
    let rejected: Vec<serde_json::Value> = out
        .rejected
        .iter()
        .map(|r| serde_json::json!({"i": r.i, "j": r.j, "matches": r.matches, "inliers": r.inliers, "reason": r.reason}))
        .collect();
    let summary = serde_json::json!({
        "candidates": pairs.len(),
        "verified": out.verified.len(),
        "rejected": rejected,
    });
    write_artifact(cfg, Stage::Verify, VERIFICATION_SUMMARY, &serde_json::to_string_pretty(&summary).unwrap())
}

/// Stage 7: weighted view graph from the verified pairs.
pub fn stage_graph(cfg: &PipelineConfig, sets: &[DescriptorSet]) -> Result<ViewGraph, PipelineError> {
    let f = fail(Stage::Graph);
    let verified = load_verified(&out_path(cfg, VERIFIED)).map_err(|e| f(&e))?;
    let graph = build_view_graph(&verified, sets, cfg.r_ew).map_err(|e| f(&e))?;
    write_artifact(cfg, Stage::Graph, VIEW_GRAPH, &graph.edges_text())?;
    write_artifact(cfg, Stage::Graph, VIEW_GRAPH_HEADER, &graph.header_json())?;
    Ok(graph)
}

/// Stage 8: recursive normalized-cut clustering of the view graph.
pub fn stage_partition(cfg: &PipelineConfig) -> Result<(), PipelineError> {
    let f = fail(Stage::Partition);
    let header = read_artifact(cfg, Stage::Partition, VIEW_GRAPH_HEADER)?;
    let edges = read_artifact(cfg, Stage::Partition, VIEW_GRAPH)?;
    let graph = ViewGraph::from_text(&header, &edges).map_err(|e| f(&e))?;
    let result = partition_view_graph(&graph, cfg.max_cluster_size, cfg.partition_seed()).map_err(|e| f(&e))?;
    write_artifact(cfg, Stage::Partition, PARTITION, &result.to_text())?;
    write_artifact(cfg, Stage::Partition, PARTITION_SUMMARY, &result.summary_json(cfg.max_cluster_size))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArtifactRecord {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageRecord {
    pub number: usize,
    pub name: String,
    pub artifacts: Vec<ArtifactRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub config_hash: String,
    /// The full configuration as `key = value` lines.
    pub config: Vec<String>,
    pub stages: Vec<StageRecord>,
}

fn sha256_file(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Checksums every artifact present in the output directory.
pub fn build_manifest(cfg: &PipelineConfig) -> std::io::Result<Manifest> {
    let mut stages = Vec::new();
    for stage in Stage::ALL {
        let mut artifacts = Vec::new();
        for name in stage.artifacts() {
            let path = out_path(cfg, name);
            if path.exists() {
                artifacts.push(ArtifactRecord { file: name.to_string(), sha256: sha256_file(&path)? });
            }
        }
        stages.push(StageRecord { number: stage.number(), name: stage.name().into(), artifacts });
    }
    Ok(Manifest { config_hash: cfg.hash(), config: cfg.to_text().lines().map(String::from).collect(), stages })
}

/// Runs every stage in order and writes the manifest.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<Manifest, PipelineError> {
    let mut clock = Instant::now();
    let mut lap = |stage: Stage| {
        log::info!("stage {} ({}) done in {:.2?}", stage.number(), stage.name(), clock.elapsed());
        clock = Instant::now();
    };
    let sets = load_inputs(cfg)?;
    lap(Stage::Load);
    stage_sample(cfg, &sets)?;
    lap(Stage::Sample);
    stage_codebook(cfg, &sets)?;
    lap(Stage::Codebook);
    stage_vlad(cfg, &sets)?;
    lap(Stage::Vlad);
    stage_index(cfg)?;
    lap(Stage::Index);
    stage_retrieve(cfg)?;
    lap(Stage::Retrieve);
    stage_verify(cfg, &sets)?;
    lap(Stage::Verify);
    stage_graph(cfg, &sets)?;
    lap(Stage::Graph);
    stage_partition(cfg)?;
    lap(Stage::Partition);
    let manifest = build_manifest(cfg).map_err(|e| fail(Stage::Partition)(&e))?;
    write_artifact(cfg, Stage::Partition, MANIFEST, &serde_json::to_string_pretty(&manifest).unwrap())?;
    Ok(manifest)
}
