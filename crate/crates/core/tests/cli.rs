use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn czsl(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_czsl")).args(args).env("CZSL_RUN_ROOT", root).output().unwrap()
}

fn tiny() -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/common_tiny.toml").display().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn train_then_eval_reproduces() {
    let root = tempfile::tempdir().unwrap();
    let out = czsl(&["train", "--config", &tiny(), "--seed", "4"], root.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let runs: Vec<PathBuf> = fs::read_dir(root.path()).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(runs.len(), 1);
    let run = &runs[0];
    assert!(run.file_name().unwrap().to_str().unwrap().ends_with("-seed4"));
    for f in ["config.toml", "model.ckpt", "history.csv", "summary.csv", "val_summary.csv", "test_curve.csv"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let eval = czsl(&["eval", run.to_str().unwrap()], root.path());
    assert!(eval.status.success());
    assert!(stdout(&eval).contains("reproduced"));

    let summary = run.join("summary.csv").display().to_string();
    let report = czsl(&["report", &summary, &summary], root.path());
    assert!(report.status.success());
    assert!(stdout(&report).contains("| synthetic | closed | 2 |"));
}

#[test]
fn tampered_metrics_fail_eval() {
    let root = tempfile::tempdir().unwrap();
    assert!(czsl(&["train", "--config", &tiny()], root.path()).status.success());
    let run = fs::read_dir(root.path()).unwrap().next().unwrap().unwrap().path();
    let path = run.join("val_summary.csv");
    let text = fs::read_to_string(&path).unwrap();
    let (head, row) = text.split_once('\n').unwrap();
    let mut cells: Vec<String> = row.trim().split(',').map(String::from).collect();
    let last = cells.len() - 1;
    cells[last] = "0.123".into();
    fs::write(&path, format!("{head}\n{}\n", cells.join(","))).unwrap();
    let eval = czsl(&["eval", run.to_str().unwrap()], root.path());
    assert_eq!(eval.status.code(), Some(1));
    assert!(stdout(&eval).contains("NOT reproduced"));
}

#[test]
fn malformed_config_is_a_usage_error_naming_the_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[aggregation]\nn_lo = 2\n[loss]\nalpha = 1.0\n").unwrap();
    let out = czsl(&["train", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("aggregation.n_lo") && err.contains("loss.alpha"), "{err}");
    assert_eq!(err.lines().count(), 1);
}

#[test]
fn gen_data_writes_a_loadable_split_directory() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("data");
    let out = czsl(&["gen-data", "--config", &tiny(), "--out", out_dir.to_str().unwrap()], dir.path());
    assert!(out.status.success());
    for f in ["states.txt", "objects.txt", "train_pairs.txt", "test_unseen_pairs.txt", "samples.txt", "features.txt"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
    let cfg = dir.path().join("from_dir.toml");
    let text = fs::read_to_string(tiny()).unwrap().replace("seed = 0\n", &format!("seed = 0\n\n[data]\ndir = {:?}\n", out_dir.display().to_string()));
    fs::write(&cfg, text).unwrap();
    let train = czsl(&["train", "--config", cfg.to_str().unwrap()], dir.path());
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
}

#[test]
fn gradcheck_subcommand_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = czsl(&["gradcheck"], dir.path());
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("full_loss") && !text.contains("FAIL"));
}

#[test]
fn ablate_and_sweep_write_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("one_epoch.toml");
    fs::write(&cfg, fs::read_to_string(tiny()).unwrap().replace("epochs = 3", "epochs = 1")).unwrap();
    let abl = dir.path().join("abl.csv");
    let out = czsl(
        &["ablate", "--config", cfg.to_str().unwrap(), "--variants", "full,df", "--seeds", "0,1", "--out", abl.to_str().unwrap()],
        dir.path(),
    );
    assert!(out.status.success());
    assert_eq!(fs::read_to_string(&abl).unwrap().lines().count(), 5);
    let sweep = dir.path().join("sweep.csv");
    let out = czsl(
        &["sweep-layers", "--config", cfg.to_str().unwrap(), "--n", "1,2", "--seeds", "0", "--out", sweep.to_str().unwrap()],
        dir.path(),
    );
    assert!(out.status.success());
    assert!(fs::read_to_string(&sweep).unwrap().starts_with("n,seed,S,U,HM,AUC\n"));
    let bad = czsl(&["sweep-layers", "--config", cfg.to_str().unwrap(), "--n", "3"], dir.path());
    assert_eq!(bad.status.code(), Some(1));
}
