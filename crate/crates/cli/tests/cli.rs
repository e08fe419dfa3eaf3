use std::path::Path;
use std::process::{Command, Output};

fn mlk(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mlk"))
        .args(args)
        .current_dir(dir)
        .env("MLK_THREADS", "1")
        .output()
        .expect("spawn mlk")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

const SMALL_SCENE: &[&str] = &["--frames", "16", "--queries", "3", "--landmarks", "150", "--grid", "3x3"];

fn gen(dir: &Path, name: &str, seed: &str) {
    let mut args = vec!["gen-scene", "--seed", seed, "-o", name];
    args.extend_from_slice(SMALL_SCENE);
    ok(&mlk(&args, dir));
}

#[test]
fn gen_scene_is_deterministic_and_loadable() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let out = ok(&mlk(&["gen-scene", "--seed", "0", "--frames", "32", "--landmarks", "500", "-o", "s.json"], p));
    assert!(out.contains("landmarks"), "{out}");
    ok(&mlk(&["gen-scene", "--seed", "0", "--frames", "32", "--landmarks", "500", "-o", "t.json"], p));
    let a = std::fs::read(p.join("s.json")).unwrap();
    assert_eq!(a, std::fs::read(p.join("t.json")).unwrap());
    mlk_core::data::load_scene(p.join("s.json")).unwrap();
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(mlk(&["gen-scene", "--frames", "0"], p).status.code(), Some(2));
    assert_eq!(mlk(&["gen-scene", "--trap-fraction", "1.5"], p).status.code(), Some(2));
    assert_eq!(mlk(&["no-such-command"], p).status.code(), Some(2));
    gen(p, "s.json", "1");
    // Evaluating a network without a checkpoint is a usage error.
    assert_eq!(mlk(&["eval", "--scene", "s.json"], p).status.code(), Some(2));
    assert_eq!(mlk(&["eval", "--scene", "missing.json", "--oracle"], p).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    gen(p, "s.json", "1");
    let out = mlk(&["retrieve", "--scene", "s.json", "--query", "nope"], p);
    assert_eq!(out.status.code(), Some(1));
    std::fs::write(p.join("bad.json"), "{\"schema\": \"mlk-scene/1\", ").unwrap();
    assert_eq!(mlk(&["retrieve", "--scene", "bad.json", "--query", "q000"], p).status.code(), Some(1));
}

#[test]
fn train_with_zero_lr_keeps_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    gen(p, "s.json", "2");
    let args = [
        "train", "--scene", "s.json", "--steps", "10", "--lr", "0", "--token-dim", "8", "--blocks", "1", "--heads", "2",
        "--head-layers", "1", "--ff-mult", "1", "--registers", "1", "-o", "w.json",
    ];
    ok(&mlk(&args, p));
    let csv = std::fs::read_to_string(p.join("w.csv")).unwrap();
    assert_eq!(csv.lines().count(), 11);
    let trained = mlk_core::regressor::Weights::load(p.join("w.json")).unwrap();
    let init = mlk_core::regressor::Weights::init(trained.config()).unwrap();
    assert_eq!(trained, init);
    // Same flags give the same files.
    ok(&mlk(&[&args[..args.len() - 1], &["v.json"]].concat(), p));
    assert_eq!(std::fs::read(p.join("w.json")).unwrap(), std::fs::read(p.join("v.json")).unwrap());
}

#[test]
fn train_last_only_and_pairwise_variants_run() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    gen(p, "s.json", "3");
    let small = ["--steps", "3", "--token-dim", "8", "--blocks", "1", "--heads", "2", "--head-layers", "1", "--registers", "1"];
    let mut a = vec!["train", "--scene", "s.json", "--token-mode", "last_only", "-o", "a.json"];
    a.extend_from_slice(&small);
    ok(&mlk(&a, p));
    let w = mlk_core::regressor::Weights::load(p.join("a.json")).unwrap();
    assert_eq!(w.config().token_mode, mlk_core::regressor::TokenMode::LastOnly);
    let mut b = vec!["train", "--scene", "s.json", "--pairwise", "-o", "b.json"];
    b.extend_from_slice(&small);
    ok(&mlk(&b, p));
    assert!(!mlk_core::regressor::Weights::load(p.join("b.json")).unwrap().config().pose_guidance);
    // The trained checkpoint drives eval and localize.
    ok(&mlk(&["eval", "--scene", "s.json", "--checkpoint", "a.json", "--k", "3", "-o", "r.json"], p));
    ok(&mlk(&["eval", "--scene", "s.json", "--checkpoint", "b.json", "--pairwise", "--k", "3", "-o", "r2.json"], p));
    let out = ok(&mlk(&["localize", "--scene", "s.json", "--query", "q000", "--checkpoint", "a.json", "--k", "3"], p));
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["references"].as_array().unwrap().len(), 3);
}

#[test]
fn oracle_eval_has_near_zero_medians() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    gen(p, "s.json", "4");
    let args = ["eval", "--scene", "s.json", "--oracle", "--k", "10", "--retrieval", "covis", "--scale", "motion", "--no-timing"];
    ok(&mlk(&[&args[..], &["-o", "r.json"]].concat(), p));
    let report = mlk_core::eval::EvalReport::load(p.join("r.json")).unwrap();
    assert_eq!(report.cells.len(), 1);
    assert!(report.cells[0].median_trans < 1e-6 && report.cells[0].median_rot < 1e-6);
    assert!(p.join("r.csv").exists());
    ok(&mlk(&[&args[..], &["-o", "s2.json"]].concat(), p));
    assert_eq!(std::fs::read(p.join("r.json")).unwrap(), std::fs::read(p.join("s2.json")).unwrap());
}

#[test]
fn eval_grid_emits_one_row_per_k() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    gen(p, "s.json", "5");
    ok(&mlk(&["eval", "--scene", "s.json", "--noise", "--grid-k", "2,4,6,8,10", "-o", "r.json"], p));
    let report = mlk_core::eval::EvalReport::load(p.join("r.json")).unwrap();
    let ks: Vec<usize> = report.cells.iter().map(|c| c.k).collect();
    assert_eq!(ks, vec![2, 4, 6, 8, 10]);
}

#[test]
fn umeyama_with_two_references_records_failures() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    gen(p, "s.json", "6");
    ok(&mlk(&["eval", "--scene", "s.json", "--oracle", "--scale", "umeyama", "--k", "2", "-o", "r.json"], p));
    let report = mlk_core::eval::EvalReport::load(p.join("r.json")).unwrap();
    assert_eq!(report.cells[0].failures, report.cells[0].queries);
    assert!(report.records.iter().all(|r| r.failure.as_deref().is_some_and(|f| f.contains("degenerate"))));
}

#[test]
fn dump_config_reflects_flags_over_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("c.json"), r#"{"num_landmarks": 77, "seed": 3}"#).unwrap();
    let out = ok(&mlk(&["gen-scene", "--config", "c.json", "--seed", "9", "--dump-config"], p));
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["num_landmarks"], 77);
    assert_eq!(v["seed"], 9);
    assert!(!p.join("scene.json").exists());
}

#[test]
fn retrieve_lists_k_frames() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    gen(p, "s.json", "7");
    for strategy in ["covis", "vpr", "embedding"] {
        let out = ok(&mlk(&["retrieve", "--scene", "s.json", "--query", "q001", "--k", "4", "--retrieval", strategy], p));
        assert_eq!(out.lines().count(), 5, "{out}");
    }
}
