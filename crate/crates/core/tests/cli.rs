//! Command-line behavior: artifacts, manifests and exit codes.

use std::path::Path;
use std::process::{Command, Output};

use carleman_rt::config::RunConfig;

fn run(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_carleman-rt"))
        .args(args)
        .arg("--output-dir")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn assert_manifest(dir: &Path, files: &[&str]) {
    let m = json(&dir.join("manifest.json"));
    let outputs = m["outputs"].as_array().expect("outputs listed");
    for f in files {
        assert!(dir.join(f).exists(), "{f} missing");
        let entry = outputs.iter().find(|o| o["path"] == *f).unwrap_or_else(|| panic!("{f} not in manifest"));
        let bytes = std::fs::read(dir.join(f)).unwrap();
        assert_eq!(entry["sha256"].as_str().unwrap(), carleman_rt::manifest::sha256_hex(&bytes));
    }
}

#[test]
fn task_subcommands_write_their_artifacts() {
    let cases: [(&[&str], &[&str]); 7] = [
        (&["design-polys"], &["sign_poly.txt", "clip_poly.txt", "polys.json"]),
        (&["expand-step", "--config", "toy_affine"], &["window.json", "trajectory_exact.csv", "trajectory_poly.csv", "domain.json"]),
        (&["build-lift", "--config", "toy_affine"], &["B_0.mtx", "c_0.txt", "lift.json"]),
        (&["assemble", "--config", "toy_affine", "--n", "2"], &["M.mtx", "Mbar.mtx", "rhs.txt", "horizon.json"]),
        (&["solve", "--config", "toy_affine"], &["solution.txt", "solve.json"]),
        (&["certify", "--config", "toy_affine"], &["certificate.json"]),
        (&["bench-compare", "--config", "toy_quadratic"], &["comparison.json"]),
    ];
    for (args, files) in cases {
        let dir = tempfile::tempdir().unwrap();
        let out = run(args, dir.path());
        assert_eq!(out.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        assert_manifest(dir.path(), files);
    }
}

#[test]
fn certify_passes_every_hypothesis_on_toy_affine() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["certify", "--config", "toy_affine"], dir.path()).status.code(), Some(0));
    let cert = json(&dir.path().join("certificate.json"));
    assert_eq!(cert["all_pass"], true);
    for h in cert["hypotheses"].as_array().unwrap() {
        assert_eq!(h["pass"], true, "{}", h["id"]);
    }
}

#[test]
fn estimate_resources_echoes_inputs_and_formulas() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["estimate-resources", "--kappa", "3", "--sm", "8", "--nh", "1048576", "--eps-ls", "1e-3"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("1048576") && stdout.contains("kappa"), "{stdout}");
    let r = json(&dir.path().join("resources.json"));
    assert_eq!(r["inputs"]["kappa"], 3.0);
    assert!(r["query_formula"].as_str().is_some_and(|s| !s.is_empty()));
    assert_manifest(dir.path(), &["resources.json"]);
}

#[test]
fn bench_train_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        assert_eq!(run(&["bench-train", "--steps", "200", "--seed", "4"], d.path()).status.code(), Some(0));
    }
    let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("metrics.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
    let header = String::from_utf8(read(&a)).unwrap();
    assert!(header.starts_with("step,mode,alpha,clean_acc,robust_acc,clean_loss"));
    assert_manifest(a.path(), &["metrics.csv", "metadata.json"]);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = run(&["certify", "--config", "/nonexistent/run.toml"], dir.path());
    assert_eq!(missing.status.code(), Some(3));
    assert!(!missing.stderr.is_empty());
    assert_eq!(run(&["no-such-command"], dir.path()).status.code(), Some(2));
    assert_eq!(run(&["estimate-resources", "--kappa", "3"], dir.path()).status.code(), Some(2));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[budget]\nunknown_key = 1\n").unwrap();
    assert_eq!(run(&["certify", "--config", bad.to_str().unwrap()], dir.path()).status.code(), Some(2));

    let mut cfg = RunConfig::load("toy_quadratic").unwrap();
    cfg.budget.eps_out = 1e-14;
    cfg.lift.n_max = 2;
    let tight = dir.path().join("tight.toml");
    std::fs::write(&tight, cfg.to_toml()).unwrap();
    assert_eq!(run(&["certify", "--config", tight.to_str().unwrap()], dir.path()).status.code(), Some(4));
}
