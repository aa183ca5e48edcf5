use std::path::Path;
use std::process::{Command, Output};

fn sure(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sure"))
        .args(args)
        .current_dir(dir)
        .env("SURE_LOG", "error")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn small_corpus(dir: &Path) {
    std::fs::write(
        dir.join("lab.json"),
        r#"{"synth":{"n_studies":60,"seed":4}}"#,
    )
    .unwrap();
    let o = sure(
        dir,
        &[
            "lab",
            "generate",
            "--config",
            "lab.json",
            "--out-dir",
            "data",
        ],
    );
    assert!(o.status.success(), "{o:?}");
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = sure(dir.path(), &["gradcheck", "--seed", "7", "--tol", "1e-4"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("PASS"));
}

#[test]
fn missing_config_is_a_validation_failure() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        sure(dir.path(), &["run", "--config", "missing.json"])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn unknown_flag_is_a_validation_failure() {
    let dir = tempfile::tempdir().unwrap();
    let o = sure(dir.path(), &["gradcheck", "--seed", "1", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn every_subcommand_has_help() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in [
        vec!["repair-views"],
        vec!["cef-filter"],
        vec!["tsl-weights"],
        vec!["favr-fuse"],
        vec!["run"],
        vec!["gradcheck"],
        vec!["lab", "imbalance"],
        vec!["lab", "filter-ablation"],
    ] {
        let mut args = cmd.clone();
        args.push("--help");
        let o = sure(dir.path(), &args);
        assert_eq!(o.status.code(), Some(0), "{cmd:?}");
        assert!(stdout(&o).contains("Usage"), "{cmd:?}");
    }
}

#[test]
fn cef_filter_defaults_tau_high() {
    let dir = tempfile::tempdir().unwrap();
    small_corpus(dir.path());
    let o = sure(
        dir.path(),
        &[
            "cef-filter",
            "--corpus",
            "data/corpus.jsonl",
            "--mode",
            "dynamic",
            "--out",
            "f.jsonl",
        ],
    );
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.contains("\"tau_high_plus\": 0.3"), "{out}");
    assert!(out.contains("\"mode\": \"dynamic\""));
    let lines = std::fs::read_to_string(dir.path().join("f.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 60);
}

#[test]
fn run_writes_outputs_and_echoes_config() {
    let dir = tempfile::tempdir().unwrap();
    small_corpus(dir.path());
    std::fs::write(
        dir.path().join("pipe.json"),
        r#"{"paths":{"corpus":"data/corpus.jsonl","out_dir":"out"},"resampler":{"n_queries":4,"out_dim":8,"seed":1}}"#,
    )
    .unwrap();
    let o = sure(
        dir.path(),
        &["run", "--config", "pipe.json", "--workers", "2"],
    );
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    for f in [
        "bundles.jsonl",
        "audit.jsonl",
        "skipped.jsonl",
        "summary.json",
        "effective_config.json",
    ] {
        assert!(dir.path().join("out").join(f).is_file(), "{f}");
    }
    let eff = std::fs::read_to_string(dir.path().join("out/effective_config.json")).unwrap();
    for key in [
        "theta_assign",
        "tau_high_plus",
        "t1",
        "model_dim",
        "workers",
    ] {
        assert!(eff.contains(key), "{key} missing from {eff}");
    }
}

#[test]
fn invalid_threshold_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    small_corpus(dir.path());
    let o = sure(
        dir.path(),
        &[
            "cef-filter",
            "--corpus",
            "data/corpus.jsonl",
            "--tau",
            "0.4",
            "--tau-high",
            "0.3",
            "--out",
            "f.jsonl",
        ],
    );
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn repair_tsl_and_fuse_commands() {
    let dir = tempfile::tempdir().unwrap();
    small_corpus(dir.path());
    let d = dir.path();
    let o = sure(
        d,
        &[
            "repair-views",
            "--corpus",
            "data/corpus.jsonl",
            "--out",
            "r.jsonl",
            "--audit",
            "a.jsonl",
        ],
    );
    assert_eq!(o.status.code(), Some(0));
    let audit = std::fs::read_to_string(d.join("a.jsonl")).unwrap();
    let corpus = std::fs::read_to_string(d.join("data/corpus.jsonl")).unwrap();
    assert_eq!(
        audit.lines().count(),
        corpus.matches("\"image_id\"").count()
    );

    let o = sure(
        d,
        &[
            "tsl-weights",
            "--corpus",
            "data/corpus.jsonl",
            "--t1",
            "20",
            "--t2",
            "8",
            "--write-freq",
            "freq.json",
            "--out",
            "p.jsonl",
        ],
    );
    assert_eq!(o.status.code(), Some(0));
    assert!(d.join("freq.json").is_file());

    let o = sure(
        d,
        &[
            "favr-fuse",
            "--corpus",
            "data/corpus.jsonl",
            "--seed",
            "3",
            "--n-queries",
            "5",
            "--out",
            "z.jsonl",
        ],
    );
    assert_eq!(o.status.code(), Some(0));
    let first = std::fs::read_to_string(d.join("z.jsonl")).unwrap();
    assert!(first.lines().next().unwrap().contains("\"rows\":5"));
}
