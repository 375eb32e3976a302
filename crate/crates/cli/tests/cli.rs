use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn tclab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tclab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = tclab(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, extra: &[&str]) -> PathBuf {
    let path = dir.join("data.jsonl");
    let mut args = vec![
        "synth",
        "--out",
        s(&path),
        "--classes",
        "3",
        "--per-class",
        "30",
        "--min-packets",
        "20",
        "--max-packets",
        "40",
        "--seed",
        "1",
    ];
    args.extend_from_slice(extra);
    ok(&args);
    path
}

#[test]
fn usage_errors_exit_with_1() {
    assert_eq!(tclab(&[]).status.code(), Some(1));
    assert_eq!(tclab(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(tclab(&["train"]).status.code(), Some(1));
    assert_eq!(tclab(&["stats", "ci", "/does/not/exist.csv"]).status.code(), Some(1));
    assert_eq!(tclab(&["--help"]).status.code(), Some(0));
}

#[test]
fn curate_split_flowpic() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), &[]);
    let curated = tmp.path().join("curated.jsonl");
    let out = ok(&[
        "curate",
        s(&data),
        "--out",
        s(&curated),
        "--min-packets",
        "25",
        "--min-class-size",
        "5",
    ]);
    assert!(out.starts_with("kept "), "{out}");

    let manifest = tmp.path().join("folds.json");
    ok(&[
        "split",
        s(&data),
        "--k",
        "2",
        "--per-class",
        "5",
        "--seed",
        "3",
        "--out",
        s(&manifest),
    ]);
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&manifest).unwrap()).unwrap();
    assert_eq!(m["folds"].as_array().unwrap().len(), 2);
    assert_eq!(m["folds"][0]["train_ids"].as_array().unwrap().len(), 15);
    assert_eq!(m["folds"][0]["test_ids"].as_array().unwrap().len(), 75);

    let strat = tmp.path().join("strat.json");
    ok(&["split", s(&data), "--scheme", "stratified", "--out", s(&strat)]);
    let bad = tclab(&[
        "split",
        s(&data),
        "--scheme",
        "stratified",
        "--ratios",
        "0.5,0.5",
        "--out",
        s(&strat),
    ]);
    assert_eq!(bad.status.code(), Some(1));

    let csv = ok(&["flowpic", s(&data), "--flow-id", "c0-00000"]);
    assert_eq!(csv.lines().count(), 32);
    let total: u64 = csv
        .lines()
        .flat_map(|l| l.split(','))
        .map(|v| v.parse::<u64>().unwrap())
        .sum();
    assert!(total > 0);
    let pgm = ok(&[
        "flowpic",
        s(&data),
        "--flow-id",
        "c0-00000",
        "--format",
        "pgm",
        "--resolution",
        "64",
    ]);
    assert!(pgm.starts_with("P2"));
    assert_eq!(
        tclab(&["flowpic", s(&data), "--flow-id", "nope"]).status.code(),
        Some(1)
    );
}

#[test]
fn single_runs_write_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), &[]);
    let manifest = tmp.path().join("folds.json");
    ok(&[
        "split",
        s(&data),
        "--k",
        "1",
        "--per-class",
        "10",
        "--out",
        s(&manifest),
    ]);

    let sup = tmp.path().join("sup");
    let out = ok(&[
        "train",
        s(&data),
        "--manifest",
        s(&manifest),
        "--times",
        "2",
        "--augmentation",
        "rotate",
        "--max-epochs",
        "3",
        "--out",
        s(&sup),
    ]);
    assert!(out.contains("test accuracy"), "{out}");
    for f in ["checkpoint.bin", "history.json", "metrics.json", "classes.json"] {
        assert!(sup.join(f).exists(), "{f}");
    }

    let pre = tmp.path().join("pre");
    ok(&[
        "pretrain",
        s(&data),
        "--manifest",
        s(&manifest),
        "--max-epochs",
        "2",
        "--batch-size",
        "8",
        "--out",
        s(&pre),
    ]);
    let ft = tmp.path().join("ft");
    ok(&[
        "finetune",
        s(&data),
        "--checkpoint",
        s(&pre.join("checkpoint.bin")),
        "--manifest",
        s(&manifest),
        "--max-epochs",
        "5",
        "--out",
        s(&ft),
    ]);
    assert!(ft.join("metrics.json").exists());
    // A supervised checkpoint cannot be fine-tuned.
    let wrong = tclab(&[
        "finetune",
        s(&data),
        "--checkpoint",
        s(&sup.join("checkpoint.bin")),
        "--manifest",
        s(&manifest),
        "--out",
        s(&tmp.path().join("x")),
    ]);
    assert_eq!(wrong.status.code(), Some(1));

    let base = tmp.path().join("base");
    let out = ok(&[
        "baseline",
        s(&data),
        "--manifest",
        s(&manifest),
        "--rounds",
        "10",
        "--out",
        s(&base),
    ]);
    assert!(out.contains("test accuracy"), "{out}");
    let ts = ok(&[
        "baseline",
        s(&data),
        "--manifest",
        s(&manifest),
        "--features",
        "early-timeseries",
        "--rounds",
        "5",
        "--out",
        s(&tmp.path().join("base_ts")),
    ]);
    assert!(ts.contains("rounds"));
    assert_eq!(
        tclab(&[
            "train",
            s(&data),
            "--manifest",
            s(&manifest),
            "--augmentation",
            "warp",
            "--out",
            s(&sup)
        ])
        .status
        .code(),
        Some(1)
    );
}

#[test]
fn campaign_report_and_failures() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), &["--partitions", "script,human", "--drift", "30"]);
    let grid = tmp.path().join("grid.toml");
    std::fs::write(
        &grid,
        r#"
name = "cli"
dataset = "data.jsonl"
methods = ["supervised", "boost_baseline"]
augmentations = [{ kind = "no_aug" }, { kind = "horizontal_flip" }]
split = { scheme = "fewshot_folds", k = 2, per_class = 5 }
splits_per_fold = 2
times = 1
drift = true
supervised_train = { max_epochs = 2 }
boost = { n_rounds = 5 }
"#,
    )
    .unwrap();
    let plan = ok(&["campaign", "plan", s(&grid)]);
    assert!(plan.contains("total: 12"), "{plan}");
    let out = tmp.path().join("camp");
    let msg = ok(&["campaign", "run", s(&grid), "--workers", "2", "--out", s(&out)]);
    assert!(msg.contains("12 planned, 12 completed, 0 failed"), "{msg}");
    for f in ["summary.md", "cells.csv", "summary.json", "drift/drift_kde.csv"] {
        assert!(out.join("report").join(f).exists(), "{f}");
    }
    assert!(std::fs::read_dir(out.join("report")).unwrap().any(|e| e
        .unwrap()
        .file_name()
        .to_string_lossy()
        .ends_with(".svg")));
    let md = ok(&["report", s(&out)]);
    assert!(md.contains("| supervised | no_aug |"), "{md}");

    // Too few flows per class for the requested pools: every run fails.
    let bad = tmp.path().join("bad.json");
    std::fs::write(
        &bad,
        serde_json::json!({
            "name": "bad",
            "dataset": s(&data),
            "split": {"scheme": "fewshot_folds", "k": 1, "per_class": 500},
            "splits_per_fold": 1,
        })
        .to_string(),
    )
    .unwrap();
    let failed = tclab(&["campaign", "run", s(&bad), "--out", s(&tmp.path().join("bad_out"))]);
    assert_eq!(failed.status.code(), Some(2));
    assert_eq!(
        tclab(&["report", s(&tmp.path().join("bad_out"))]).status.code(),
        Some(2)
    );

    let drift = tmp.path().join("drift");
    ok(&["drift", s(&data), "--partitions", "script,human", "--out", s(&drift)]);
    let kde = std::fs::read_to_string(drift.join("drift_kde.csv")).unwrap();
    assert!(kde.contains("script") && kde.contains("human"));
    assert_eq!(
        tclab(&["drift", s(&data), "--partitions", "lab", "--out", s(&drift)])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn stats_subcommands() {
    let tmp = tempfile::tempdir().unwrap();
    let table = tmp.path().join("acc.csv");
    let mut rows = String::from("a,b,c\n");
    for i in 0..10 {
        let v = i as f64 / 100.0;
        rows += &format!("{},{},{}\n", 0.9 + v, 0.8 + v, 0.85 + v);
    }
    std::fs::write(&table, rows).unwrap();
    let svg = tmp.path().join("cd.svg");
    let cd = ok(&["stats", "cd", s(&table), "--svg", s(&svg)]);
    assert!(
        cd.contains("a,1.0000") && cd.contains("b,3.0000") && cd.contains("c,2.0000"),
        "{cd}"
    );
    assert!(cd.contains("critical distance"));
    assert!(std::fs::read_to_string(&svg).unwrap().starts_with("<svg"));

    let ci = ok(&["stats", "ci", s(&table)]);
    assert!(ci.lines().nth(1).unwrap().starts_with("a,10,"), "{ci}");

    let groups = tmp.path().join("groups.csv");
    std::fs::write(&groups, "x,y,z\n1,2,7\n2,3,8\n3,4,8\n4,5,9\n5,9,10\n").unwrap();
    let tukey = ok(&["stats", "tukey", s(&groups)]);
    assert_eq!(tukey.lines().count(), 4, "{tukey}");

    std::fs::write(&groups, "x,y\n1,\n2,3\n").unwrap();
    assert_eq!(tclab(&["stats", "cd", s(&groups)]).status.code(), Some(1));
}

#[test]
fn shipped_grids_plan() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../grids");
    for (name, total) in [
        ("smoke", 20),
        ("augmentations", 105),
        ("resolutions", 630),
        ("simclr", 60),
        ("boost", 30),
    ] {
        let out = ok(&["campaign", "plan", s(&dir.join(format!("{name}.toml")))]);
        assert!(out.contains(&format!("total: {total}")), "{name}: {out}");
    }
}
