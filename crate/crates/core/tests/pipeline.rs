//! End-to-end runs of the minimal configuration, through the library and
//! through the command-line binary.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use oslo_lab::harness::{run_pipeline, ExperimentConfig, Summary};
use oslo_lab::metrics::QueryRecord;
use std::collections::BTreeMap;

const MINIMAL: &str = include_str!("../../../configs/minimal.toml");

fn scratch(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("oslo-lab-test-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    d
}

fn minimal(out: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::parse(MINIMAL).unwrap();
    c.out_dir = out.to_path_buf();
    c
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_oslo-lab"))
}

#[test]
fn minimal_run_writes_every_artifact() {
    let out = scratch("full");
    let t = Instant::now();
    let m = run_pipeline(minimal(&out)).unwrap();
    let secs = t.elapsed().as_secs_f64();
    assert!(secs < 180.0, "minimal pipeline took {secs:.1}s");
    assert!(m.failure.is_none());
    for f in [
        "summary.json",
        "manifest.json",
        "config.toml",
        "queries.json",
        "data/split.json",
        "attack/oslo_archive.jsonl",
        "attack/target_flip.jsonl",
        "eval/oslo_tau_curve.csv",
        "eval/roc.svg",
        "eval/perturbation_cdf.csv",
        "baselines/gaussian.csv",
        "baselines/augmentation.csv",
        "baselines/shadow.csv",
        "baselines/global-threshold.csv",
        "defenses/defense.csv",
        "analysis/report.md",
        "analysis/report.csv",
    ] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    m.verify(&out).unwrap();
    assert!(m.model_checksums.contains_key("target"));

    // every query counter agrees with its expectation
    let q: BTreeMap<String, QueryRecord> =
        serde_json::from_str(&std::fs::read_to_string(out.join("queries.json")).unwrap()).unwrap();
    assert_eq!(q["oslo"].audited, 40);
    assert_eq!(q["oslo-multishot"].audited, 40);
    assert!(q["shadow"].audited > 0);
    assert!(q["gaussian"].audited <= 40 * 8);
    oslo_lab::metrics::query_report(&q.values().cloned().collect::<Vec<_>>()).unwrap();

    let s: Summary = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(s.config_hash, minimal(&out).hash());
    assert!(s.metrics.contains_key("oslo") && s.metrics.contains_key("global-threshold"));
    let defense = std::fs::read_to_string(out.join("defenses/defense.csv")).unwrap();
    assert!(defense.starts_with("defense,param,test_acc,tpr_at_1pct_fpr\ndropout,0.3,"));

    // evaluate on the finished run prints the fixed-FPR table
    let cfg_path = out.join("config.toml");
    let o = bin().args(["evaluate", "--config"]).arg(&cfg_path).arg("--out").arg(&out).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("TPR@0.1%FPR") && text.contains("TPR@1%FPR") && text.contains("| oslo |"), "{text}");
    let _ = std::fs::remove_dir_all(&out);
}

#[test]
fn staged_cli_matches_single_run() {
    let a = scratch("single");
    let b = scratch("staged");
    run_pipeline(minimal(&a)).unwrap();
    let cfg = a.join("config.toml");
    let stages: [&[&str]; 10] = [
        &["gen-data"],
        &["train"],
        &["attack", "oslo"],
        &["sweep-tau"],
        &["attack", "baseline", "gaussian"],
        &["attack", "baseline", "augmentation"],
        &["attack", "baseline", "shadow"],
        &["attack", "baseline", "global-threshold"],
        &["defend"],
        &["evaluate"],
    ];
    for s in stages {
        let o = bin().args(s).arg("--config").arg(&cfg).arg("--out").arg(&b).output().unwrap();
        assert!(o.status.success(), "{s:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let sa = std::fs::read(a.join("summary.json")).unwrap();
    let sb = std::fs::read(b.join("summary.json")).unwrap();
    assert_eq!(sa, sb);
    let o = bin().args(["report", "--config"]).arg(&cfg).arg("--out").arg(&b).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(b.join("analysis/report.md").exists());
    let _ = std::fs::remove_dir_all(&a);
    let _ = std::fs::remove_dir_all(&b);
}

#[test]
fn cli_exit_codes() {
    let code = |args: &[&str]| bin().args(args).output().unwrap().status.code();
    assert_eq!(code(&["frobnicate"]), Some(2));
    assert_eq!(code(&["run", "--no-such-flag"]), Some(2));
    assert_eq!(code(&["attack", "baseline", "hopskipjump"]), Some(2));
    assert_eq!(code(&["--help"]), Some(0));
    assert_eq!(code(&["run", "--config", "/definitely/not/here.toml"]), Some(1));

    let dir = scratch("cli");
    std::fs::create_dir_all(&dir).unwrap();
    let bad = dir.join("bad.toml");
    std::fs::write(&bad, "[evaluation]\ntaus = [0.01, 0.1]\n").unwrap();
    let o = bin().args(["sweep-tau", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("evaluation.taus"));

    std::fs::write(&bad, "[attack]\ntau = 1.5\n").unwrap();
    let o = bin().args(["run", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("attack.tau"));

    // a stage whose inputs are missing fails with a non-zero, non-config code
    let o = bin().args(["train", "--out"]).arg(dir.join("empty")).output().unwrap();
    assert_eq!(o.status.code(), Some(3));
    let _ = std::fs::remove_dir_all(&dir);
}
