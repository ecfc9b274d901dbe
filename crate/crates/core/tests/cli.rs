use std::path::Path;
use std::process::{Command, Output};

use vitprune::trainer::{alternates, EpochLog, EpochMode};

fn vitprune(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vitprune")).current_dir(dir).args(args).output().expect("spawn vitprune")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&[][..], &["frobnicate"], &["flops", "--no-such-flag"], &["flops", "--density", "abc"]] {
        let o = vitprune(dir.path(), args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
    }
    assert_eq!(vitprune(dir.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(vitprune(dir.path(), &["--version"]).status.code(), Some(0));
    assert_eq!(vitprune(dir.path(), &["train", "--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_1_with_category() {
    let dir = tempfile::tempdir().unwrap();
    let o = vitprune(dir.path(), &["eval", "--checkpoint", "missing.ckpt"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error [io]"), "{}", stderr(&o));

    std::fs::write(dir.path().join("bad.cfg"), "preset = deit-s\ndensity = lots\n").unwrap();
    let o = vitprune(dir.path(), &["flops", "--config", "bad.cfg"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error [config]"), "{}", stderr(&o));

    let o = vitprune(dir.path(), &["flops", "--preset", "vit-huge"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr(&o).lines().count(), 1);
}

#[test]
fn flops_report_for_deit_small() {
    let dir = tempfile::tempdir().unwrap();
    let o = vitprune(dir.path(), &["flops", "--preset", "deit-s", "--density", "0.42", "--prune-layer", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("total 4598882304 (4.599 GFLOPs)"), "{out}");
    assert!(out.contains("reduction 42.3% (4.599 -> 2.655 GFLOPs)"), "{out}");
    assert!(out.contains("# seed 0"));
    assert!(out.contains("density=0.42"));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("run.cfg"),
        "# comment\npreset = deit-s\nprune_layer = 9\ndensity = 0.42\nseed = 5\n",
    )
    .unwrap();
    let o = vitprune(dir.path(), &["flops", "--config", "run.cfg", "--prune-layer", "3", "--csv", "f.csv"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("prune_layer=3"), "{out}");
    assert!(out.contains("# seed 5"), "{out}");
    assert!(out.contains("reduction 42.3%"), "{out}");
    let csv = std::fs::read_to_string(dir.path().join("f.csv")).unwrap();
    assert!(csv.lines().count() > 12);
}

fn read_logs(path: &Path) -> Vec<EpochLog> {
    std::fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn train_eval_and_tools_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let ok = |args: &[&str]| {
        let o = vitprune(d, args);
        assert_eq!(o.status.code(), Some(0), "{args:?}\n{}\n{}", stdout(&o), stderr(&o));
        stdout(&o)
    };
    ok(&["gen-data", "--count", "96", "--out", "train.bin", "--seed", "1"]);
    ok(&["gen-data", "--count", "40", "--out", "eval.bin", "--seed", "2", "--split", "eval"]);
    assert_eq!(std::fs::metadata(d.join("train.bin")).unwrap().len(), 96 * 3073);

    let common = ["--train-data", "train.bin", "--eval-data", "eval.bin", "--batch-size", "32"];
    let mut teacher = vec!["train-teacher", "--epochs", "1", "--out", "teacher.ckpt"];
    teacher.extend(common);
    ok(&teacher);

    let mut student = vec![
        "train",
        "--epochs",
        "2",
        "--teacher",
        "teacher.ckpt",
        "--beta",
        "4",
        "--mass-th",
        "0.7",
        "--prune-layer",
        "1",
        "--out",
        "student.ckpt",
    ];
    student.extend(common);
    let out = ok(&student);
    assert!(out.contains("# train config"), "{out}");
    let logs = read_logs(&d.join("student.log.jsonl"));
    assert_eq!(logs.len(), 2);
    assert!(alternates(&logs, false));
    assert_eq!(logs[0].mode, EpochMode::Sparse);
    assert!(logs.iter().all(|l| l.distill_loss > 0.0));

    // Same resolved config and seed, same checkpoint.
    let first = std::fs::read(d.join("student.ckpt")).unwrap();
    let mut again = student.clone();
    *again.iter_mut().find(|a| **a == "student.ckpt").unwrap() = "again.ckpt";
    ok(&again);
    assert_eq!(std::fs::read(d.join("again.ckpt")).unwrap(), first);

    let out = ok(&[
        "eval",
        "--checkpoint",
        "student.ckpt",
        "--data",
        "eval.bin",
        "--mass-th",
        "0.6,0.7,0.8,1.0",
        "--csv",
        "e.csv",
    ]);
    let csv = std::fs::read_to_string(d.join("e.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 1 + 1 + 4, "{out}");
    assert!(rows[2].starts_with("mass:0.6,1,"));
    let field = |row: &str, i: usize| row.split(',').nth(i).unwrap().to_string();
    assert_eq!(field(rows[5], 2), field(rows[1], 2), "threshold 1.0 matches dense accuracy");
    assert_eq!(field(rows[5], 3), "1.000000");

    let out = ok(&["density-stats", "--checkpoint", "student.ckpt", "--data", "eval.bin", "--density", "0.5"]);
    assert!(out.contains("std 0.0000"), "{out}");
    ok(&[
        "sweep",
        "--checkpoint",
        "student.ckpt",
        "--data",
        "eval.bin",
        "--prune-layers",
        "0,2",
        "--thresholds",
        "0.5,1.0",
        "--csv",
        "s.csv",
    ]);
    assert_eq!(std::fs::read_to_string(d.join("s.csv")).unwrap().lines().count(), 1 + 4);
    ok(&["visualize", "--checkpoint", "student.ckpt", "--data", "eval.bin", "--index", "2", "--out", "m.ppm"]);
    assert!(std::fs::read(d.join("m.ppm")).unwrap().starts_with(b"P6"));
    let out = ok(&["benchmark", "--batch", "2", "--repetitions", "2", "--warmup", "1"]);
    assert!(out.contains("compacted"));

    // Index out of range is a runtime failure.
    let o = vitprune(d, &["visualize", "--checkpoint", "student.ckpt", "--data", "eval.bin", "--index", "400"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn in_process_entry_point() {
    assert_eq!(vitprune::cli::run(["vitprune", "flops", "--preset", "toy"]), 0);
    assert_eq!(vitprune::cli::run(["vitprune", "bogus"]), 2);
    assert_eq!(
        vitprune::cli::run(["vitprune", "flops", "--preset", "toy", "--prune-layer", "9", "--density", "0.5"]),
        1
    );
}
