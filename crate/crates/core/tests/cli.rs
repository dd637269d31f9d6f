use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use copl_core::conditioners::{Method, PromptParams};
use copl_core::eval::{ResultSet, RunConfig};
use copl_core::synthdata::FeatureCache;
use serde_json::Value;

fn copl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_copl"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn copl")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn hm_check_prints_two_decimals() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["hm-check", "96.8", "94.0"][..], &["eval", "hm_check", "96.8", "94.0"]] {
        let o = copl(dir.path(), args);
        assert_eq!(o.status.code(), Some(0));
        assert_eq!(stdout(&o).trim(), "95.38");
    }
    assert_eq!(copl(dir.path(), &["eval", "hm_check", "96.8"]).status.code(), Some(2));
}

#[test]
fn gen_data_header_matches_config_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("c.json"),
        r#"{"num_classes": 6, "patches": 5, "image_dim": 7}"#,
    )
    .unwrap();
    for out in ["a.cpfc", "b.cpfc"] {
        let o = copl(dir.path(), &["gen-data", "--config", "c.json", "--out", out]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let a = std::fs::read(dir.path().join("a.cpfc")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b.cpfc")).unwrap());
    let cache = FeatureCache::from_bytes(&a).unwrap();
    assert_eq!((cache.num_classes, cache.patches, cache.image_dim), (6, 5, 7));

    let echo: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("a.cpfc.config.json")).unwrap()).unwrap();
    assert_eq!(echo["command"], "gen-data");
    assert_eq!(echo["config"]["num_classes"], 6);
    assert_eq!(echo["config_file"], "c.json");
}

#[test]
fn config_errors_exit_two_with_a_reason() {
    let dir = tempfile::tempdir().unwrap();
    let o = copl(dir.path(), &["gen-data", "--patches", "3", "--foreground-patches", "4"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(
        stderr(&o).contains("foreground_patches (4) must not exceed patches (3)"),
        "{}",
        stderr(&o)
    );

    let o = copl(dir.path(), &["eval", "leave_one_out"]);
    assert_eq!(o.status.code(), Some(2));
    let msg = stderr(&o);
    for name in [
        "base_to_new",
        "cross_dataset",
        "incremental",
        "ablation_global_vs_local",
        "hm_check",
    ] {
        assert!(msg.contains(name), "{msg}");
    }

    std::fs::write(dir.path().join("typo.json"), r#"{"epoch": 3}"#).unwrap();
    let o = copl(dir.path(), &["train", "--config", "typo.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("epoch"));

    assert_eq!(copl(dir.path(), &["train", "--method", "clip"]).status.code(), Some(2));
    assert_eq!(
        copl(dir.path(), &["train", "--config", "missing.json"]).status.code(),
        Some(2)
    );
    assert_eq!(copl(dir.path(), &["frobnicate"]).status.code(), Some(2));
}

#[test]
fn zero_epochs_writes_the_initial_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let o = copl(
        dir.path(),
        &[
            "train",
            "--epochs",
            "0",
            "--warmup-epochs",
            "0",
            "--seeds",
            "5",
            "--method",
            "cocoop",
        ],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let saved = PromptParams::load(dir.path().join("model.copl")).unwrap();
    let init = RunConfig::default().model(Method::Cocoop, 16, 5).params;
    assert_eq!(saved, init);
    let history = std::fs::read_to_string(dir.path().join("history.csv")).unwrap();
    assert_eq!(history.trim(), "step,epoch,lr,loss");
}

#[test]
fn default_training_run_is_reproducible_and_fast() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let o = copl(
        dir.path(),
        &["train", "--checkpoint-path", "a.copl", "--history-path", "a.csv"],
    );
    let elapsed = start.elapsed().as_secs_f64();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(elapsed < 60.0, "default run took {elapsed:.1} s");
    let o = copl(
        dir.path(),
        &["train", "--checkpoint-path", "b.copl", "--history-path", "b.csv"],
    );
    assert_eq!(o.status.code(), Some(0));
    let read = |n: &str| std::fs::read(dir.path().join(n)).unwrap();
    assert_eq!(read("a.copl"), read("b.copl"));
    assert_eq!(read("a.csv"), read("b.csv"));
    assert_eq!(&read("a.copl")[..5], b"COPL1");

    let echo: Value = serde_json::from_slice(&read("a.copl.config.json")).unwrap();
    assert_eq!(echo["overrides"]["checkpoint_path"], "a.copl");
    assert_eq!(echo["config"]["prompt_len"], 4);
    assert_eq!(echo["config"]["base_lr"], 0.002);
}

#[test]
fn train_from_a_feature_cache() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        copl(dir.path(), &["gen-data", "--data-seed", "4"]).status.code(),
        Some(0)
    );
    let o = copl(dir.path(), &["train", "--data-path", "data.cpfc", "--epochs", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    std::fs::write(dir.path().join("junk.cpfc"), b"not a cache").unwrap();
    let o = copl(dir.path(), &["train", "--data-path", "junk.cpfc"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bad magic"));
}

#[test]
fn non_finite_training_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let o = copl(
        dir.path(),
        &["train", "--base-lr", "1e300", "--warmup-lr", "1e300", "--epochs", "2"],
    );
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("seed 0"), "{}", stderr(&o));
}

#[test]
fn eval_rows_per_method_and_idempotent_merge() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "eval",
        "base_to_new",
        "--jobs",
        "4",
        "--epochs",
        "1",
        "--shots",
        "4",
        "--samples-per-class",
        "12",
        "--methods",
        "coop,copl",
        "--seeds",
        "0,1,2,3,4,5,6,7,8,9",
    ];
    let o = copl(dir.path(), &args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let first = std::fs::read(dir.path().join("results.csv")).unwrap();
    let set = ResultSet::from_csv(std::str::from_utf8(&first).unwrap()).unwrap();
    assert_eq!(set.len(), 20);
    for m in ["coop", "copl"] {
        assert_eq!(set.rows().filter(|r| r.method.name() == m).count(), 10);
    }
    let full = ResultSet::from_json(&std::fs::read_to_string(dir.path().join("results.json")).unwrap()).unwrap();
    assert_eq!(full.len(), 20);
    assert!(full.rows().all(|r| r.is_consistent()));

    let mut single = args;
    single[3] = "1";
    let o = copl(dir.path(), &single);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(std::fs::read(dir.path().join("results.csv")).unwrap(), first);

    let o = copl(
        dir.path(),
        &[
            "eval",
            "incremental",
            "--epochs",
            "1",
            "--shots",
            "4",
            "--samples-per-class",
            "12",
            "--methods",
            "copl",
            "--seeds",
            "0",
        ],
    );
    assert_eq!(o.status.code(), Some(0));
    let text = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
    assert_eq!(text.lines().count(), 22);
    assert!(text.lines().next().unwrap() == "protocol,method,seed,seen_acc,unseen_acc,hm");
    assert!(text.contains("incremental,copl,0,"));
    assert!(dir.path().join("results.json").exists());
    assert!(dir.path().join("results.incremental.config.json").exists());
}

#[test]
fn cross_dataset_and_ablation_run_from_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let common = [
        "--epochs",
        "1",
        "--shots",
        "4",
        "--samples-per-class",
        "12",
        "--seeds",
        "0,1",
    ];
    let o = copl(
        dir.path(),
        &[&["eval", "cross_dataset", "--methods", "cocoop"][..], &common].concat(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = copl(
        dir.path(),
        &[&["eval", "ablation_global_vs_local"][..], &common].concat(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let set = ResultSet::from_csv(&std::fs::read_to_string(dir.path().join("results.csv")).unwrap()).unwrap();
    assert_eq!(set.len(), 6);
    assert_eq!(set.rows().filter(|r| r.method == Method::CoplGlobal).count(), 2);
}

#[test]
fn gradcheck_exit_status_tracks_failures() {
    let dir = tempfile::tempdir().unwrap();
    let o = copl(dir.path(), &["gradcheck"]);
    assert_eq!(o.status.code(), Some(0));
    let report = stdout(&o);
    for g in ["V", "W_a", "U1", "c1", "U2", "c2"] {
        assert!(report.contains(&format!("copl/{g} ")), "{report}");
    }
    let o = copl(dir.path(), &["gradcheck", "--flip-sign", "W_a", "--instances", "3"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(
        stdout(&o).contains("FAILED: worst") && stdout(&o).contains("W_a"),
        "{}",
        stdout(&o)
    );
    assert_eq!(
        copl(dir.path(), &["gradcheck", "--flip-sign", "Q"]).status.code(),
        Some(2)
    );
}
