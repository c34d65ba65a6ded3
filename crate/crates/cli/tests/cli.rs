use std::path::Path;
use std::process::{Command, Output};

fn vladmatch(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vladmatch")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn gen(dir: &Path, n: usize) {
    let out = vladmatch(&["gen", "--n-images", &n.to_string(), "--seed", "3", "-o", dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn config_line(m: &serde_json::Value, key: &str) -> String {
    m["config"]
        .as_array()
        .unwrap()
        .iter()
        .map(|l| l.as_str().unwrap().to_string())
        .find(|l| l.split('=').next().unwrap().trim() == key)
        .unwrap()
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&vladmatch(&["--help"])), 0);
    assert_eq!(code(&vladmatch(&["--version"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&vladmatch(&["no-such-command"])), 1);
    assert_eq!(code(&vladmatch(&["pipeline", "--codebook-k", "many"])), 1);
    assert_eq!(code(&vladmatch(&["pipeline", "--set", "codebook.k"])), 1);
    assert_eq!(code(&vladmatch(&["pipeline", "--set", "no.such.key=1"])), 1);
    assert_eq!(code(&vladmatch(&["gen", "--n-images", "3"])), 1, "gen needs an output directory");
}

#[test]
fn bench_rejects_empty_and_unknown_methods() {
    let tmp = tempfile::tempdir().unwrap();
    let o = tmp.path().to_str().unwrap();
    assert_eq!(code(&vladmatch(&["bench", "--methods", "", "-o", o])), 1);
    assert_eq!(code(&vladmatch(&["bench", "--methods", "vlad_hnsw,sift", "-o", o])), 1);
}

#[test]
fn missing_input_directory_fails_in_stage_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("absent");
    let out = vladmatch(&["pipeline", "-i", missing.to_str().unwrap(), "-o", tmp.path().join("out").to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("stage 0 (load)"), "{stderr}");
}

#[test]
fn flags_override_set_which_overrides_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, 12);
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(&cfg, "codebook.k = 4\nhnsw.m = 6\npartition.max_size = 9\n").unwrap();
    let out_dir = tmp.path().join("out");
    let out = vladmatch(&[
        "pipeline",
        "-c",
        cfg.to_str().unwrap(),
        "--set",
        "hnsw.m=8",
        "--set",
        "codebook.k=5",
        "--codebook-k",
        "6",
        "-i",
        data.to_str().unwrap(),
        "-o",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let m = manifest(&out_dir);
    assert_eq!(config_line(&m, "codebook.k"), "codebook.k = 6");
    assert_eq!(config_line(&m, "hnsw.m"), "hnsw.m = 8");
    assert_eq!(config_line(&m, "partition.max_size"), "partition.max_size = 9");
}

#[test]
fn gen_is_deterministic_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen(&a, 8);
    gen(&b, 8);
    let mut names: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 8 + 3);
    for name in names {
        assert_eq!(std::fs::read(a.join(&name)).unwrap(), std::fs::read(b.join(&name)).unwrap(), "{name:?}");
    }
}

#[test]
fn stage_commands_chain_and_manifest_checksums_match() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, 20);
    let out_dir = tmp.path().join("out");
    let (i, o) = (data.to_str().unwrap(), out_dir.to_str().unwrap());
    for stage in ["codebook", "vlad", "index", "retrieve", "verify", "graph", "partition"] {
        let out = vladmatch(&[stage, "-i", i, "-o", o]);
        assert_eq!(code(&out), 0, "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let m = manifest(&out_dir);
    let stages = m["stages"].as_array().unwrap();
    assert!(stages.len() >= 8);
    for stage in stages {
        for artifact in stage["artifacts"].as_array().unwrap() {
            let file = artifact["file"].as_str().unwrap();
            let bytes = std::fs::read(out_dir.join(file)).unwrap();
            let digest: String = sha256_hex(&bytes);
            assert_eq!(artifact["sha256"].as_str().unwrap(), digest, "{file}");
        }
    }
    let rerun = tmp.path().join("rerun");
    let out = vladmatch(&["pipeline", "-i", i, "-o", rerun.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    for name in ["codebook.uvc", "vlad.uvl", "index.uvh", "pairs.txt", "verified.uvm", "partition.txt"] {
        assert_eq!(std::fs::read(out_dir.join(name)).unwrap(), std::fs::read(rerun.join(name)).unwrap(), "{name}");
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::Digest;
    sha2::Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[test]
fn bench_writes_json_and_csv_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let o = tmp.path().to_str().unwrap();
    let out = vladmatch(&[
        "bench", "--n-images", "120", "--features-per-image", "150", "--grid-cols", "12", "--codebook-k", "8",
        "--hnsw-m", "8", "--ef-construction", "40", "--depth", "10", "--query-count", "30", "--brute-query-count",
        "10", "--vocab-branching", "4", "--vocab-depth", "2", "--k-sweep", "8,16", "--m-sweep", "8", "-o", o,
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("bench_report.json")).unwrap()).unwrap();
    let methods: Vec<&str> = report["methods"].as_array().unwrap().iter().map(|m| m["method"].as_str().unwrap()).collect();
    assert_eq!(methods, ["vlad_hnsw", "vlad_brute", "bow"]);
    assert_eq!(report["sweeps"].as_array().unwrap().len(), 3);
    let csv = std::fs::read_to_string(tmp.path().join("bench_report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 + 3);
}
