//! `vladmatch` command line.
//!
//! Exit codes: 0 on success, 1 on usage or configuration errors, 2 when a
//! pipeline stage or the benchmark fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vladmatch::bench::{self, BenchConfig};
use vladmatch::config::{parse_pairs, PipelineConfig};
use vladmatch::descriptor::{descriptor_file_name, save_descriptor_set};
use vladmatch::pipeline::{self, Stage, MANIFEST};
use vladmatch::synthetic::{SyntheticConfig, SyntheticWorld};

#[derive(Parser, Debug)]
#[command(name = "vladmatch", version, about = "Match pair retrieval with VLAD, HNSW and adaptive selection")]
struct Cli {
    /// Root seed for every random choice.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker thread cap for parallel stages.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, short = 'o', global = true)]
    output_dir: Option<PathBuf>,
    /// Plain-text `key = value` configuration file; flags override it.
    #[arg(long, short = 'c', global = true)]
    config: Option<PathBuf>,
    /// Extra `key=value` setting, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic descriptor collection and its ground truth.
    Gen(GenArgs),
    /// Sample training features and train the codebook.
    Codebook(PipelineArgs),
    /// Aggregate one VLAD vector per image.
    Vlad(PipelineArgs),
    /// Build the HNSW index over the VLAD vectors.
    Index(PipelineArgs),
    /// Adaptive match pair retrieval.
    Retrieve(PipelineArgs),
    /// Descriptor matching and RANSAC on the retrieved pairs.
    Verify(PipelineArgs),
    /// Weighted view graph from the verified pairs.
    Graph(PipelineArgs),
    /// Recursive normalized-cut partition of the view graph.
    Partition(PipelineArgs),
    /// Run every stage in order and write the manifest.
    Pipeline(PipelineArgs),
    /// Compare VLAD+HNSW, exhaustive VLAD and BoW retrieval.
    Bench(BenchArgs),
}

#[derive(Args, Debug, Default)]
struct GenArgs {
    #[arg(long)]
    n_images: Option<usize>,
    #[arg(long)]
    features_per_image: Option<usize>,
    /// `strip` or `grid`.
    #[arg(long)]
    layout: Option<String>,
    #[arg(long)]
    grid_cols: Option<usize>,
    #[arg(long)]
    forward_overlap: Option<f64>,
    #[arg(long)]
    side_overlap: Option<f64>,
    #[arg(long)]
    distractor_fraction: Option<f64>,
    #[arg(long)]
    descriptor_noise: Option<u8>,
    #[arg(long)]
    keypoint_noise_px: Option<f64>,
    #[arg(long)]
    image_width: Option<u32>,
    #[arg(long)]
    image_height: Option<u32>,
    #[arg(long)]
    prototypes: Option<usize>,
    #[arg(long)]
    landmark_spread: Option<u8>,
    #[arg(long)]
    min_gt_overlap: Option<f64>,
    #[arg(long)]
    feature_cap: Option<usize>,
    #[arg(long)]
    land_cover_classes: Option<usize>,
    #[arg(long)]
    land_cover_scale: Option<f64>,
}

impl GenArgs {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        macro_rules! push {
            ($($field:ident),*) => {$(
                if let Some(v) = &self.$field {
                    out.push((stringify!($field), v.to_string()));
                }
            )*};
        }
        // `layout` before `grid_cols` so an explicit column count survives.
        push!(
            n_images, features_per_image, layout, grid_cols, forward_overlap, side_overlap, distractor_fraction,
            descriptor_noise, keypoint_noise_px, image_width, image_height, prototypes, landmark_spread,
            min_gt_overlap, feature_cap, land_cover_classes, land_cover_scale
        );
        out
    }
}

#[derive(Args, Debug, Default)]
struct PipelineArgs {
    /// Directory of `.uvd` descriptor files.
    #[arg(long, short = 'i')]
    input_dir: Option<PathBuf>,
    #[arg(long)]
    feature_cap: Option<usize>,
    #[arg(long)]
    codebook_k: Option<usize>,
    #[arg(long)]
    kmeans_max_iters: Option<usize>,
    #[arg(long)]
    kmeans_tol: Option<f64>,
    /// `kmeans++` or `random`.
    #[arg(long)]
    kmeans_init: Option<String>,
    #[arg(long)]
    sample_fraction: Option<f64>,
    #[arg(long)]
    sample_features: Option<usize>,
    #[arg(long)]
    hnsw_m: Option<usize>,
    #[arg(long)]
    hnsw_m0: Option<usize>,
    #[arg(long)]
    ef_construction: Option<usize>,
    #[arg(long)]
    ef_search: Option<usize>,
    #[arg(long)]
    sample_count: Option<usize>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    min_select: Option<usize>,
    #[arg(long)]
    max_select: Option<usize>,
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long)]
    max_error_px: Option<f64>,
    #[arg(long)]
    min_inliers: Option<usize>,
    #[arg(long)]
    ransac_confidence: Option<f64>,
    #[arg(long)]
    ransac_max_iters: Option<usize>,
    /// `symmetric` or `one_sided`.
    #[arg(long)]
    residual: Option<String>,
    #[arg(long)]
    r_ew: Option<f64>,
    #[arg(long)]
    max_cluster_size: Option<usize>,
}

impl PipelineArgs {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        macro_rules! push {
            ($($field:ident => $key:literal),*) => {$(
                if let Some(v) = &self.$field {
                    out.push(($key, v.to_string()));
                }
            )*};
        }
        if let Some(dir) = &self.input_dir {
            out.push(("input_dir", dir.display().to_string()));
        }
        push!(
            feature_cap => "feature_cap",
            codebook_k => "codebook.k",
            kmeans_max_iters => "codebook.max_iters",
            kmeans_tol => "codebook.tol",
            kmeans_init => "codebook.init",
            sample_fraction => "sampling.fraction",
            sample_features => "sampling.features_per_image",
            hnsw_m => "hnsw.m",
            hnsw_m0 => "hnsw.m0",
            ef_construction => "hnsw.ef_construction",
            ef_search => "hnsw.ef_search",
            sample_count => "retrieval.sample_count",
            kappa => "retrieval.kappa",
            min_select => "retrieval.min_select",
            max_select => "retrieval.max_select",
            ratio => "verify.ratio",
            max_error_px => "verify.max_error_px",
            min_inliers => "verify.min_inliers",
            ransac_confidence => "verify.confidence",
            ransac_max_iters => "verify.max_iters",
            residual => "verify.residual",
            r_ew => "graph.r_ew",
            max_cluster_size => "partition.max_size"
        );
        out
    }
}

#[derive(Args, Debug, Default)]
struct BenchArgs {
    /// Comma-separated subset of vlad_hnsw, vlad_brute, bow.
    #[arg(long, default_value = "vlad_hnsw,vlad_brute,bow")]
    methods: String,
    /// Also sweep the codebook size over these values.
    #[arg(long, value_delimiter = ',')]
    k_sweep: Vec<usize>,
    /// Also sweep the friend number over these values.
    #[arg(long, value_delimiter = ',')]
    m_sweep: Vec<usize>,
    #[arg(long)]
    n_images: Option<usize>,
    #[arg(long)]
    features_per_image: Option<usize>,
    #[arg(long)]
    grid_cols: Option<usize>,
    #[arg(long)]
    codebook_k: Option<usize>,
    #[arg(long)]
    hnsw_m: Option<usize>,
    #[arg(long)]
    ef_construction: Option<usize>,
    #[arg(long)]
    ef_search: Option<usize>,
    /// Neighbors per query.
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    query_count: Option<usize>,
    /// Queries answered by exhaustive search (baseline and recall reference).
    #[arg(long)]
    brute_query_count: Option<usize>,
    #[arg(long)]
    vocab_branching: Option<usize>,
    #[arg(long)]
    vocab_depth: Option<usize>,
}

impl BenchArgs {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        macro_rules! push {
            ($($field:ident),*) => {$(
                if let Some(v) = &self.$field {
                    out.push((stringify!($field), v.to_string()));
                }
            )*};
        }
        push!(
            n_images, features_per_image, grid_cols, codebook_k, hnsw_m, ef_construction, ef_search, depth,
            query_count, brute_query_count, vocab_branching, vocab_depth
        );
        out
    }
}

/// Usage errors exit with 1, run failures with 2.
enum Failure {
    Usage(String),
    Run(String),
}

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn run_failure(e: impl std::fmt::Display) -> Failure {
    Failure::Run(e.to_string())
}

/// Settings in precedence order: config file, `--set`, then dedicated flags.
fn collect_settings(cli: &Cli, flags: Vec<(&'static str, String)>) -> Result<Vec<(String, String)>, Failure> {
    let mut settings = Vec::new();
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
        settings.extend(parse_pairs(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?);
    }
    for s in &cli.set {
        let (k, v) = s.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{s}`")))?;
        settings.push((k.trim().to_string(), v.trim().to_string()));
    }
    settings.extend(flags.into_iter().map(|(k, v)| (k.to_string(), v)));
    Ok(settings)
}

fn pipeline_config(cli: &Cli, args: &PipelineArgs) -> Result<PipelineConfig, Failure> {
    let mut cfg = PipelineConfig::default();
    for (k, v) in collect_settings(cli, args.pairs())? {
        cfg.set(&k, &v).map_err(usage)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(t) = cli.threads {
        cfg.threads = Some(t);
    }
    if let Some(dir) = &cli.output_dir {
        cfg.output_dir = dir.clone();
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn configure_threads(threads: Option<usize>) -> Result<(), Failure> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(usage("--threads must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(run_failure)?;
    }
    Ok(())
}

fn write_manifest(cfg: &PipelineConfig) -> Result<(), Failure> {
    let manifest = pipeline::build_manifest(cfg).map_err(run_failure)?;
    let json = serde_json::to_string_pretty(&manifest).map_err(run_failure)?;
    fs::write(cfg.output_dir.join(MANIFEST), json).map_err(run_failure)
}

fn run_stage(cli: &Cli, stage: Stage, args: &PipelineArgs) -> Result<(), Failure> {
    let cfg = pipeline_config(cli, args)?;
    configure_threads(cfg.threads)?;
    let stage_failure = |e: pipeline::PipelineError| Failure::Run(e.to_string());
    let needs_inputs = matches!(stage, Stage::Codebook | Stage::Vlad | Stage::Verify | Stage::Graph);
    let sets = if needs_inputs { pipeline::load_inputs(&cfg).map_err(stage_failure)? } else { Vec::new() };
    match stage {
        Stage::Codebook => {
            pipeline::stage_sample(&cfg, &sets).map_err(stage_failure)?;
            pipeline::stage_codebook(&cfg, &sets).map(drop).map_err(stage_failure)?;
        }
        Stage::Vlad => pipeline::stage_vlad(&cfg, &sets).map_err(stage_failure)?,
        Stage::Index => pipeline::stage_index(&cfg).map_err(stage_failure)?,
        Stage::Retrieve => pipeline::stage_retrieve(&cfg).map(drop).map_err(stage_failure)?,
        Stage::Verify => pipeline::stage_verify(&cfg, &sets).map_err(stage_failure)?,
        Stage::Graph => pipeline::stage_graph(&cfg, &sets).map(drop).map_err(stage_failure)?,
        Stage::Partition => pipeline::stage_partition(&cfg).map_err(stage_failure)?,
        Stage::Load | Stage::Sample => unreachable!("not exposed as subcommands"),
    }
    write_manifest(&cfg)
}

fn run_gen(cli: &Cli, args: &GenArgs) -> Result<(), Failure> {
    let mut cfg = SyntheticConfig::default();
    for (k, v) in collect_settings(cli, args.pairs())? {
        if !cfg.set(&k, &v).map_err(usage)? {
            return Err(usage(format!("unknown synthetic key `{k}`")));
        }
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    configure_threads(cli.threads)?;
    let out = cli.output_dir.clone().ok_or_else(|| usage("gen requires --output-dir"))?;
    let world = SyntheticWorld::new(cfg.clone()).map_err(usage)?;
    fs::create_dir_all(&out).map_err(|e| run_failure(format!("cannot create {}: {e}", out.display())))?;
    let (sets, gt) = vladmatch::synthetic::generate_synthetic_dataset(&cfg).map_err(run_failure)?;
    for set in &sets {
        save_descriptor_set(set, &out.join(descriptor_file_name(set.image_id))).map_err(run_failure)?;
    }
    let echo: String = cfg.to_pairs().iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
    write(&out.join("synthetic.txt"), &echo)?;
    write(&out.join("ground_truth.txt"), &gt.to_text())?;
    write(&out.join("correspondences.txt"), &gt.correspondences_text())?;
    log::info!("wrote {} images and {} ground-truth pairs to {}", world.len(), gt.pairs.len(), out.display());
    Ok(())
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| run_failure(format!("cannot write {}: {e}", path.display())))
}

fn run_bench(cli: &Cli, args: &BenchArgs) -> Result<(), Failure> {
    let methods = bench::parse_methods(&args.methods).map_err(usage)?;
    let mut cfg = BenchConfig::default();
    for (k, v) in collect_settings(cli, args.pairs())? {
        cfg.set(&k, &v).map_err(usage)?;
    }
    if let Some(seed) = cli.seed {
        cfg.set("seed", &seed.to_string()).map_err(usage)?;
    }
    cfg.validate().map_err(usage)?;
    configure_threads(cli.threads)?;
    let out = cli.output_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&out).map_err(|e| run_failure(format!("cannot create {}: {e}", out.display())))?;
    let mut report = bench::run_benchmark(&cfg, &methods).map_err(run_failure)?;
    if !args.k_sweep.is_empty() {
        report.sweeps.extend(bench::sweep_codebook_size(&cfg, &args.k_sweep).map_err(run_failure)?);
    }
    if !args.m_sweep.is_empty() {
        report.sweeps.extend(bench::sweep_friend_number(&cfg, &args.m_sweep).map_err(run_failure)?);
    }
    write(&out.join("bench_report.json"), &report.to_json())?;
    write(&out.join("bench_report.csv"), &report.to_csv())?;
    for m in &report.methods {
        println!(
            "{:<10} aggregation {:>8.3}s  index {:>8.3}s  query {:>8.3}s  total {:>8.3}s  precision {:.4}  recall {:.4}",
            m.method, m.aggregation_s, m.index_s, m.query_s, m.total_s, m.precision, m.recall
        );
    }
    for s in &report.speedups {
        println!("{} vs {}: query {:.2}x, total {:.2}x", s.method, s.baseline, s.query_ratio, s.total_ratio);
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Gen(a) => run_gen(cli, a),
        Command::Codebook(a) => run_stage(cli, Stage::Codebook, a),
        Command::Vlad(a) => run_stage(cli, Stage::Vlad, a),
        Command::Index(a) => run_stage(cli, Stage::Index, a),
        Command::Retrieve(a) => run_stage(cli, Stage::Retrieve, a),
        Command::Verify(a) => run_stage(cli, Stage::Verify, a),
        Command::Graph(a) => run_stage(cli, Stage::Graph, a),
        Command::Partition(a) => run_stage(cli, Stage::Partition, a),
        Command::Pipeline(a) => {
            let cfg = pipeline_config(cli, a)?;
            configure_threads(cfg.threads)?;
            pipeline::run_pipeline(&cfg).map(drop).map_err(|e| Failure::Run(e.to_string()))
        }
        Command::Bench(a) => run_bench(cli, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Run(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
