use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_compositenet"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMOKE: &[&str] = &[
    "--j0", "4", "--m", "4", "--k", "4", "--epochs", "1", "--points", "96", "--shapes", "sphere,cube",
    "--train_per_class", "4", "--test_per_class", "2",
];

#[test]
fn train_smoke_run_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train"];
    args.extend_from_slice(SMOKE);
    let o = run(dir.path(), &args);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("train_out");
    for f in ["model.cpnt", "train_log.csv", "predictions.csv", "metrics.csv", "config.txt"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let log = std::fs::read_to_string(out.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(log.starts_with("epoch,loss,accuracy\n"));
    let preds = std::fs::read_to_string(out.join("predictions.csv")).unwrap();
    assert_eq!(preds.lines().count(), 5);
    assert!(stdout(&o).contains("test OA"));

    let e = run(dir.path(), &["eval", "--mode", "classification", "--predictions", "train_out/predictions.csv"]);
    assert!(e.status.success(), "{}", stderr(&e));
    assert!(stdout(&e).starts_with("OA "));
}

#[test]
fn configuration_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["train", "--m", "4", "--k", "4"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("j0"));
    let o = run(dir.path(), &["train", "--j0", "4", "--m", "4", "--k", "4", "--colour", "red"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(dir.path(), &["train", "--j0", "0", "--m", "4", "--k", "4"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(dir.path(), &["detect", "--detector", "svm"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(dir.path(), &["detect", "--normal_shape", "sphere", "--anomaly_shapes", "sphere"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(dir.path(), &["detect", "--config", "missing.cfg"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--lr", "1e30", "--epochs", "3"];
    args.extend_from_slice(&SMOKE[..6]);
    args.extend_from_slice(&["--points", "96", "--train_per_class", "4", "--test_per_class", "0"]);
    let o = run(dir.path(), &args);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn single_class_test_set_exits_4_after_writing_scores() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        dir.path(),
        &["detect", "--detector", "good_ifor", "--anomaly_shapes", "", "--train_count", "20", "--test_normal", "5", "--points", "96"],
    );
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("AUC undefined"));
    let scores = std::fs::read_to_string(dir.path().join("detect_out/scores.csv")).unwrap();
    assert_eq!(scores.lines().count(), 6);
}

#[test]
fn detect_prints_auc_with_three_decimals() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        dir.path(),
        &["detect", "--detector", "good_ifor", "--train_count", "40", "--test_normal", "10", "--test_anomalous", "10", "--points", "256"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let line = stdout(&o).lines().find(|l| l.starts_with("AUC ")).unwrap().to_string();
    let value = line.trim_start_matches("AUC ");
    assert_eq!(value.split('.').nth(1).unwrap().len(), 3, "{line}");
    let auc: f64 = value.parse().unwrap();
    assert!(auc > 0.5);

    let e = run(dir.path(), &["eval", "--mode", "auc", "--scores", "detect_out/scores.csv"]);
    assert!(stdout(&e).contains(&line), "{}", stdout(&e));
}

#[test]
fn dumped_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--dump-config", "run.cfg", "--accumulation", "sorted"];
    args.extend_from_slice(SMOKE);
    assert!(run(dir.path(), &args).status.success());
    let cfg = std::fs::read_to_string(dir.path().join("run.cfg")).unwrap();
    assert!(cfg.contains("j0 = 4\n") && cfg.contains("output_dir = train_out\n"));

    let mut direct = vec!["train", "--accumulation", "sorted"];
    direct.extend_from_slice(SMOKE);
    direct.extend_from_slice(&["--output_dir", "direct"]);
    assert!(run(dir.path(), &direct).status.success());
    let o = run(dir.path(), &["train", "--config", "run.cfg", "--output_dir", "from_file"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["model.cpnt", "train_log.csv", "predictions.csv", "metrics.csv"] {
        let a = std::fs::read(dir.path().join("direct").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("from_file").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
}

#[test]
fn paramcount_is_csv_with_expected_growth() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["paramcount", "--output", "counts.csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(text, std::fs::read_to_string(dir.path().join("counts.csv")).unwrap());
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("layer_kind,m,parameters"));
    let rows: Vec<(String, usize, usize)> = lines
        .map(|l| {
            let c: Vec<&str> = l.split(',').collect();
            (c[0].to_string(), c[1].parse().unwrap(), c[2].parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 18);
    let get = |kind: &str, m: usize| rows.iter().find(|r| r.0 == kind && r.1 == m).unwrap().2 as f64;
    for kind in ["conv_composite", "aggr_composite"] {
        assert!(get(kind, 256) / get(kind, 8) < 1.01);
    }
    for m in [8, 16, 32, 64, 128] {
        let ratio = get("baseline", 2 * m) / get("baseline", m);
        assert!((1.9..=2.1).contains(&ratio), "{m}: {ratio}");
    }
    let o = run(dir.path(), &["paramcount", "--j0", "64", "--m_values", "64", "--k", "16", "--kinds", "conv"]);
    assert!(o.status.success());
}

#[test]
fn eval_compare_prints_rank_and_wilcoxon_rows() {
    let dir = tempfile::tempdir().unwrap();
    let table = "class,A,B,C\nc1,0.9,0.8,0.5\nc2,0.8,0.7,0.6\nc3,0.95,0.6,0.7\nc4,0.7,0.65,0.6\nc5,0.85,0.8,0.75\nc6,0.9,0.7,0.65\n";
    std::fs::write(dir.path().join("t.csv"), table).unwrap();
    let o = run(dir.path(), &["eval", "--mode", "compare", "--table", "t.csv", "--output", "cmp.csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("Avg. Rank"), "{text}");
    assert!(text.contains("Wilcoxon-p"), "{text}");
    assert!(dir.path().join("cmp.csv").is_file());
}

#[test]
fn list_keys_and_help() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["detect", "--list-keys"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("good_bins"));
    let o = run(dir.path(), &["--threads", "1", "bench", "--kinds", "aggr", "--m_values", "4", "--j0", "2", "--k", "2", "--points", "64", "--repeats", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.starts_with("layer_kind,m,parameters,forward_mean_ms"));
    assert_eq!(text.lines().count(), 2);
}
