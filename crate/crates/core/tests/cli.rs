use std::path::Path;
use std::process::{Command, Output};

use gid_core::trainer::{AblationTable, RunManifest, MANIFEST_FILE};

fn gid(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gid"))
        .args(args)
        .env("GID_OUTPUT_ROOT", root)
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

const TINY: [&str; 6] = ["--steps", "4", "--batch-size", "2", "--log-every", "0"];

fn with<'a>(base: &[&'a str], extra: &[&'a str]) -> Vec<&'a str> {
    base.iter().chain(extra).copied().collect()
}

fn gen_tiny(root: &Path, name: &str) -> String {
    ok(&gid(
        root,
        &["gen-data", "--seed", "7", "--train-count", "8", "--val-count", "3", "--out", name],
    ))
}

#[test]
fn gen_data_is_deterministic() {
    let root = tempfile::tempdir().unwrap();
    let a = gen_tiny(root.path(), "a");
    let b = gen_tiny(root.path(), "b");
    let checksum = |s: &str| s.split_whitespace().last().unwrap().to_string();
    assert_eq!(checksum(&a), checksum(&b));
    assert!(root.path().join("a/dataset.json").is_file());
}

#[test]
fn distill_with_k_zero_matches_the_baseline() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    gen_tiny(r, "data");
    let data = r.join("data");
    let data = data.to_str().unwrap();
    ok(&gid(r, &with(&["train-teacher", "--data", data, "--out", "teacher"], &TINY)));
    ok(&gid(r, &with(&["train-baseline", "--data", data, "--seed", "3", "--out", "base"], &TINY)));
    let teacher = r.join("teacher/checkpoint.gid");
    ok(&gid(
        r,
        &with(
            &["distill", "--data", data, "--seed", "3", "--teacher", teacher.to_str().unwrap(), "--k", "0", "--out", "k0"],
            &TINY,
        ),
    ));
    let base = RunManifest::load(&r.join("base").join(MANIFEST_FILE)).unwrap();
    let k0 = RunManifest::load(&r.join("k0").join(MANIFEST_FILE)).unwrap();
    assert_eq!(base.final_eval, k0.final_eval);
    assert_eq!(base.final_loss, k0.final_loss);
    assert_eq!(k0.distill.unwrap().k, 0);

    // the report renders from the recorded runs alone
    ok(&gid(r, &["report", "--input", r.to_str().unwrap(), "--out", "rep"]));
    let md = std::fs::read_to_string(r.join("rep/report.md")).unwrap();
    assert!(md.contains("_base | baseline |") && md.contains("_k0 | distill |"), "{md}");
    assert!(r.join("rep/runs.csv").is_file());
    assert!(std::fs::read_dir(r.join("rep")).unwrap().any(|e| e.unwrap().file_name().to_string_lossy().ends_with("_k0.svg")));
}

#[test]
fn ablate_knowledge_grid_has_the_table_rows() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    gen_tiny(r, "data");
    let data = r.join("data");
    let data = data.to_str().unwrap();
    ok(&gid(r, &with(&["train-teacher", "--data", data, "--out", "teacher"], &TINY)));
    let teacher = r.join("teacher/checkpoint.gid");
    let stdout = ok(&gid(
        r,
        &with(
            &["ablate", "--grid", "knowledge", "--data", data, "--teacher", teacher.to_str().unwrap(), "--out", "abl"],
            &["--steps", "2", "--batch-size", "2", "--log-every", "0"],
        ),
    ));
    let table = AblationTable::load(&r.join("abl")).unwrap();
    let labels: Vec<&str> = table.rows.iter().map(|row| row.label.as_str()).collect();
    assert_eq!(labels, ["none", "feature", "relation", "response", "feature+response", "all"]);
    assert!(table.all_completed());
    assert!(stdout.contains("| feature+response |"), "{stdout}");
}

#[test]
fn errors_map_to_exit_codes() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    gen_tiny(r, "data");
    let data = r.join("data");
    let data = data.to_str().unwrap();

    let bad = r.join("train.json");
    std::fs::write(&bad, r#"{"steps": 4, "optim": {"lr": "fast"}}"#).unwrap();
    let out = gid(r, &["train-baseline", "--data", data, "--train", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.optim.lr"));

    let out = gid(r, &["distill", "--data", data, "--teacher", "nowhere.gid"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`teacher`"));

    let out = gid(r, &["distill", "--data", data, "--teacher", data, "--knowledge", "feature,telepathy"]);
    assert_eq!(out.status.code(), Some(2));

    // a file that exists but is not a checkpoint is a runtime failure
    let junk = r.join("junk.gid");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let out = gid(r, &["eval", "--data", data, "--checkpoint", junk.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));

    assert_eq!(gid(r, &["no-such-command"]).status.code(), Some(2));
    assert_eq!(gid(r, &["--help"]).status.code(), Some(0));
}
