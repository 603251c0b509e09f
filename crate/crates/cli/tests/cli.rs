use std::path::Path;
use std::process::{Command, Output};

use saspec_core::linalg::Matrix;
use saspec_core::sa::ActivationBatch;
use saspec_core::snapshot::{write_snapshot, NamedTensor, Snapshot};

fn saspec(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_saspec"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("SASPEC_LOG_LEVEL")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

// Rows share a positive first coordinate when `one_sided`, otherwise they alternate.
fn write_series(dir: &Path, steps: u64, one_sided: bool) {
    let w = Matrix::from_rows(&[vec![3.0, 0.0], vec![0.0, 1.0]]).unwrap();
    for step in 0..steps {
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|i| {
                let s = if one_sided || i % 2 == 0 { 1.0 } else { -1.0 };
                vec![s * (1.0 + 0.01 * i as f64), 0.3]
            })
            .collect();
        let snap = Snapshot::new(step)
            .with(NamedTensor::from_matrix("fc.weight", &w))
            .with(NamedTensor::from_batch("fc.input", &ActivationBatch::from_rows(&rows, step).unwrap()));
        write_snapshot(dir.join(format!("s{step:04}.sasn")), &snap).unwrap();
    }
}

#[test]
fn analyze_exit_codes_follow_the_verdict() {
    let tmp = tempfile::tempdir().unwrap();
    let collapsed = tmp.path().join("collapsed");
    let balanced = tmp.path().join("balanced");
    std::fs::create_dir(&collapsed).unwrap();
    std::fs::create_dir(&balanced).unwrap();
    write_series(&collapsed, 6, true);
    write_series(&balanced, 6, false);
    let args = ["analyze", "--weight", "fc.weight", "--input", "fc.input"];

    let out = tmp.path().join("out");
    let o = saspec(&out, &[&args[..], &[collapsed.to_str().unwrap()]].concat());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stdout(&o).contains("verdict: collapsed (onset step 0)"), "{}", stdout(&o));
    let log = std::fs::read_to_string(out.join("analyze.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 6);

    let o = saspec(&out, &[&args[..], &[balanced.to_str().unwrap()]].concat());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("verdict: healthy"));

    for _ in 0..2 {
        let o = saspec(&out, &["analyze", "--weight", "fc.weight", "--input", "nope", collapsed.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(1));
        assert!(stderr(&o).contains("'nope'"), "{}", stderr(&o));
    }
}

#[test]
fn train_toy_scenarios() {
    let tmp = tempfile::tempdir().unwrap();
    let o = saspec(tmp.path(), &["train-toy", "--scenario", "stable", "--steps", "30"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let s = stdout(&o);
    assert!(s.contains("explosion step: none") && s.contains("collapse onset: none"), "{s}");

    let o = saspec(tmp.path(), &["train-toy", "--scenario", "explosive"]);
    assert_eq!(o.status.code(), Some(0));
    let s = stdout(&o);
    let grab = |key: &str| -> u64 {
        let line = s.lines().find(|l| l.starts_with(key)).unwrap();
        line[key.len()..].trim().parse().unwrap()
    };
    assert!(grab("collapse onset:") < grab("explosion step:"), "{s}");

    let o = saspec(tmp.path(), &["train-toy", "--steps", "0"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(std::fs::read_to_string(tmp.path().join("train.jsonl")).unwrap(), "");

    let o = saspec(tmp.path(), &["train-toy", "--eta", "-1"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn report_reads_training_logs() {
    let tmp = tempfile::tempdir().unwrap();
    let log = tmp.path().join("train.jsonl");
    let log_arg = log.to_str().unwrap();

    saspec(tmp.path(), &["train-toy", "--scenario", "explosive"]);
    let o = saspec(tmp.path(), &["report", log_arg]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let s = stdout(&o);
    let explosion: i64 = s.lines().find_map(|l| l.strip_prefix("explosion at step ")).unwrap().trim().parse().unwrap();
    let row = s.lines().find(|l| l.contains("sa_collapse")).unwrap();
    let cols: Vec<&str> = row.split_whitespace().collect();
    let onset: i64 = cols[cols.len() - 2].parse().unwrap();
    let lead: i64 = cols[cols.len() - 1].parse().unwrap();
    assert!(onset < explosion && lead == explosion - onset, "{s}");

    saspec(tmp.path(), &["train-toy", "--scenario", "stable", "--steps", "30"]);
    let o = saspec(tmp.path(), &["report", log_arg]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("no explosion; verdict healthy"), "{}", stdout(&o));

    let empty = tmp.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    assert_eq!(saspec(tmp.path(), &["report", empty.to_str().unwrap()]).status.code(), Some(1));
    assert_eq!(saspec(tmp.path(), &["report", "--frobnicate", log_arg]).status.code(), Some(1));
}

#[test]
fn verify_suites() {
    let tmp = tempfile::tempdir().unwrap();
    let o = saspec(tmp.path(), &["verify", "--suite", "lemma"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("[PASS] lemma (1000 trials)"));

    let o = saspec(tmp.path(), &["verify", "--suite", "perturbation", "--trials", "3"]);
    assert_eq!(o.status.code(), Some(0));
    let s = stdout(&o);
    assert!(
        s.contains("ratio") && s.lines().filter(|l| l.trim_start().starts_with(char::is_numeric)).count() == 3,
        "{s}"
    );

    let o = saspec(tmp.path(), &["verify", "--suite", "growth", "--trials", "50"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));

    assert_eq!(saspec(tmp.path(), &["verify", "--suite", "everything"]).status.code(), Some(1));
}

#[test]
fn help_and_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(saspec(tmp.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(saspec(tmp.path(), &[]).status.code(), Some(1));
    assert_eq!(saspec(tmp.path(), &["bogus"]).status.code(), Some(1));
}
