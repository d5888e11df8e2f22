use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::tempdir;

fn csta(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_csta"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = csta(args, cwd);
    assert!(
        out.status.success(),
        "csta {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn err(args: &[&str], cwd: &Path) -> String {
    let out = csta(args, cwd);
    assert!(!out.status.success(), "csta {args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn read_dir(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
        })
        .collect()
}

const SMALL: &str = "[model]\nreduction = 4\nhidden_widths = [4, 8]\n[train]\nepochs = 2\n";

#[test]
fn gen_is_byte_identical_for_a_seed() {
    let tmp = tempdir().unwrap();
    let p = tmp.path();
    ok(&["gen", "--videos", "8", "--seed", "7", "--out", "a"], p);
    ok(&["gen", "--videos", "8", "--seed", "7", "--out", "b"], p);
    ok(&["gen", "--videos", "8", "--seed", "8", "--out", "c"], p);
    let a = read_dir(&p.join("a"));
    assert_eq!(a.len(), 9);
    assert_eq!(a, read_dir(&p.join("b")));
    assert_ne!(a, read_dir(&p.join("c")));
}

#[test]
fn summaries_fit_the_budget() {
    let tmp = tempdir().unwrap();
    let p = tmp.path();
    fs::write(p.join("run.toml"), SMALL).unwrap();
    ok(&["gen", "--videos", "5", "--dim", "16", "--seed", "2", "--out", "ds"], p);
    ok(
        &["train", "--config", "run.toml", "--data", "ds", "--out", "tr", "--folds", "5", "--repeats", "1", "--final-model"],
        p,
    );
    ok(&["summarize", "--data", "ds", "--checkpoint", "tr/final.ckpt", "--out", "sum"], p);
    let csv = fs::read_to_string(p.join("sum/summaries.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 5);
    for row in rows {
        let f: Vec<&str> = row.split(',').collect();
        let frames: usize = f[1].parse().unwrap();
        let selected: usize = f[3].parse().unwrap();
        assert_eq!(f[4].len(), frames, "mask length of {}", f[0]);
        assert_eq!(f[4].matches('1').count(), selected);
        assert!(selected <= frames * 15 / 100, "{} over budget", f[0]);
    }
    assert!(p.join("sum/config.toml").exists());
}

// ChaCha8(seed + repeat) shuffle of 0..n, cut into contiguous chunks.
fn documented_folds(n: usize, folds: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    (0..folds)
        .map(|k| {
            let mut f = perm[k * n / folds..(k + 1) * n / folds].to_vec();
            f.sort();
            f
        })
        .collect()
}

#[test]
fn train_partition_follows_the_seeded_rule() {
    let tmp = tempdir().unwrap();
    let p = tmp.path();
    fs::write(p.join("run.toml"), SMALL).unwrap();
    ok(&["gen", "--videos", "12", "--dim", "8", "--min-frames", "12", "--max-frames", "16", "--out", "ds"], p);
    ok(
        &["train", "--config", "run.toml", "--data", "ds", "--out", "tr", "--repeats", "1", "--folds", "5", "--seed", "1"],
        p,
    );
    let csv = fs::read_to_string(p.join("tr/folds.csv")).unwrap();
    let got: Vec<Vec<String>> = csv
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().split(' ').map(String::from).collect())
        .collect();
    let want: Vec<Vec<String>> = documented_folds(12, 5, 1)
        .into_iter()
        .map(|f| f.into_iter().map(|i| format!("video_{i:03}")).collect())
        .collect();
    assert_eq!(got, want);
    assert_eq!(fs::read_dir(p.join("tr/checkpoints")).unwrap().count(), 5);
    let resolved = fs::read_to_string(p.join("tr/config.toml")).unwrap();
    assert!(resolved.contains("seed = 1"));
    assert!(resolved.contains("epochs = 2"));
}

#[test]
fn failures_have_distinct_messages() {
    let tmp = tempdir().unwrap();
    let p = tmp.path();
    assert!(err(&["train", "--data", "missing", "--out", "x"], p).contains("does not exist"));
    assert!(err(&["train", "--out", "x"], p).contains("no dataset given"));
    fs::write(p.join("bad.toml"), "[model\nreduction = 4\n").unwrap();
    assert!(err(&["macs", "--config", "bad.toml"], p).contains("malformed config file"));
    fs::write(p.join("run.toml"), SMALL).unwrap();
    ok(&["gen", "--videos", "5", "--dim", "16", "--out", "d16"], p);
    ok(&["gen", "--videos", "5", "--dim", "8", "--out", "d8"], p);
    ok(&["train", "--config", "run.toml", "--data", "d16", "--out", "tr", "--repeats", "1", "--final-model"], p);
    assert!(err(&["eval", "--data", "d8", "--checkpoint", "tr/final.ckpt"], p).contains("shape mismatch"));
    assert!(err(&["eval", "--data", "d16", "--checkpoint", "none.ckpt"], p).contains("cannot load checkpoint"));
    let report = ok(&["eval", "--data", "d16", "--checkpoint", "tr/final.ckpt"], p);
    assert!(report.contains("overall: tau"));
}

#[test]
fn macs_prints_totals() {
    let tmp = tempdir().unwrap();
    let out = ok(&["macs", "--frames", "40", "--out", "m"], tmp.path());
    assert!(out.contains("total:"));
    let csv = fs::read_to_string(tmp.path().join("m/macs.csv")).unwrap();
    assert!(csv.lines().last().unwrap().starts_with("total,"));
}
