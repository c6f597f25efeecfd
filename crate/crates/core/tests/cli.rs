use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 7
input_dim = 4
n_classes = 3
n_train = 120
n_test = 30
trace_probes = 40
sketch_dim = 10
snapshot_every = 5
small_batch_trials = 2
n_influence_train = 2
c1_batch_sizes = [8, 16]
c1_probes = 50
runs = 100
t_max = 4
n_docs = 20
n_items = 8
"#;

fn lissa(args: &[&str], dir: &Path, config: &str) -> Output {
    let cfg = dir.join("run.toml");
    fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_lissa"))
        .args(args)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .output()
        .unwrap()
}

fn out_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir.join("out"))
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn every_subcommand_writes_headed_csvs_and_one_manifest() {
    for cmd in [
        "stats",
        "lissa",
        "convergence",
        "pbrf-compare",
        "condition-c1",
        "counterexample",
        "tfidf-check",
        "similarity",
    ] {
        let dir = tempfile::tempdir().unwrap();
        let out = lissa(&[cmd], dir.path(), SMALL);
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
        let files = out_files(dir.path());
        let manifests = files.iter().filter(|(n, _)| n == "manifest.json").count();
        assert_eq!(manifests, 1, "{cmd}");
        let manifest: serde_json::Value = serde_json::from_slice(&files.iter().find(|(n, _)| n == "manifest.json").unwrap().1).unwrap();
        assert_eq!(manifest["command"], cmd);
        assert_eq!(manifest["seed"], 7);
        for (name, bytes) in files.iter().filter(|(n, _)| n.ends_with(".csv")) {
            let text = String::from_utf8(bytes.clone()).unwrap();
            let header = text.lines().next().unwrap_or_default();
            assert!(
                header.split(',').all(|f| f.parse::<f64>().is_err() && !f.is_empty()),
                "{cmd}/{name} header: {header}"
            );
            assert!(text.lines().count() > 1, "{cmd}/{name} has no rows");
            let listed = manifest["outputs"].as_array().unwrap().iter().any(|o| o["file"] == name.as_str());
            assert!(listed, "{cmd}/{name} missing from manifest");
        }
    }
}

#[test]
fn same_seed_gives_identical_bytes() {
    for cmd in ["lissa", "pbrf-compare", "counterexample"] {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        assert!(lissa(&[cmd], a.path(), SMALL).status.success());
        assert!(lissa(&[cmd, "--threads", "1"], b.path(), SMALL).status.success());
        assert_eq!(out_files(a.path()), out_files(b.path()), "{cmd}");
    }
}

#[test]
fn seed_flag_changes_output() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert!(lissa(&["lissa"], a.path(), SMALL).status.success());
    assert!(lissa(&["lissa", "--seed", "8"], b.path(), SMALL).status.success());
    assert_ne!(out_files(a.path()), out_files(b.path()));
}

#[test]
fn recommend_prints_resnet18_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "trace_per_param = 1.32e-3\nn_params = 11000000\nlambda_max = 270.0\nlambda_damp = 5.0\n";
    let out = lissa(&["recommend"], dir.path(), cfg);
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.starts_with("eta=0.003636 batch_size=108 t_steps=11"), "{stdout}");
}

#[test]
fn bad_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = lissa(&["lissa"], dir.path(), "no_such_field = 1\n");
    assert_eq!(out.status.code(), Some(2));
    let out = lissa(&["lissa"], dir.path(), "n_train = 0\n");
    assert_eq!(out.status.code(), Some(2));
    let out = lissa(&["not-a-command"], dir.path(), SMALL);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!("{SMALL}eta = 1000.0\nbatch_size = 1\nt_steps = 400\n");
    let out = lissa(&["lissa"], dir.path(), &cfg);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn oracle_mismatch_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!("{SMALL}tolerance = 1e-12\n");
    let out = lissa(&["lissa"], dir.path(), &cfg);
    assert_eq!(out.status.code(), Some(4));
    assert!(dir.path().join("out/manifest.json").exists());
}
