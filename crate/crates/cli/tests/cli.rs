use std::path::Path;
use std::process::{Command, Output};

fn bkprune(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_bkprune")).args(args).output().unwrap();
    if !out.status.success() {
        panic!("bkprune {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_keygen_enroll_trial_eval() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let key = dir.path().join("key");
    let enrolled = dir.path().join("enrolled");
    let scores = dir.path().join("scores.tsv");

    bkprune(&["synth", "--small", "--seed", "3", "--out", path(&corpus)]);
    assert!(corpus.join("trials.tsv").exists());
    bkprune(&["keygen", "--key-bits", "256", "--seed", "4", "--out", path(&key)]);
    assert!(dir.path().join("key.pub").exists());

    // a handful of trials keeps the protected run short
    let trials: Vec<String> = std::fs::read_to_string(corpus.join("trials.tsv"))
        .unwrap()
        .lines()
        .step_by(20)
        .map(String::from)
        .collect();
    let trial_file = dir.path().join("few.tsv");
    std::fs::write(&trial_file, trials.join("\n") + "\n").unwrap();
    let refs: Vec<&str> = trials.iter().map(|l| l.split('\t').next().unwrap()).collect();
    let ids = refs.join(",");

    bkprune(&[
        "enroll", "--corpus", path(&corpus), "--key", path(&key), "--key-bits", "256", "--n", "8", "--ids", &ids, "--out",
        path(&enrolled),
    ]);
    assert!(enrolled.join("server0.shr").exists() && enrolled.join("server1.shr").exists());

    bkprune(&[
        "trial", "--corpus", path(&corpus), "--trials", path(&trial_file), "--key", path(&key), "--mode", "protected",
        "--n", "8", "--enrolled", path(&enrolled), "--audit", "--out", path(&scores),
    ]);
    let text = std::fs::read_to_string(&scores).unwrap();
    assert_eq!(text.lines().count(), trials.len());
    for (line, trial) in text.lines().zip(&trials) {
        let f: Vec<&str> = line.split('\t').collect();
        let t: Vec<&str> = trial.split('\t').collect();
        assert_eq!(f.len(), 5);
        assert_eq!((f[0], f[1], f[4]), (t[0], t[1], t[2]));
        f[3].parse::<f64>().unwrap();
    }

    // plaintext_bk gives the same normalised scores
    let plain = dir.path().join("plain.tsv");
    bkprune(&[
        "trial", "--corpus", path(&corpus), "--trials", path(&trial_file), "--key", path(&key), "--mode", "plaintext_bk",
        "--n", "8", "--out", path(&plain),
    ]);
    let plain = std::fs::read_to_string(&plain).unwrap();
    for (a, b) in text.lines().zip(plain.lines()) {
        let x: f64 = a.split('\t').nth(3).unwrap().parse().unwrap();
        let y: f64 = b.split('\t').nth(3).unwrap().parse().unwrap();
        assert!((x - y).abs() <= 1e-3, "{a} vs {b}");
    }

    let eval = bkprune(&["eval", path(&scores)]);
    let eval = String::from_utf8(eval.stdout).unwrap();
    assert!(eval.contains("raw") && eval.contains("normalised"));
}

#[test]
fn report_reproduces_published_ratios() {
    let out = String::from_utf8(bkprune(&["report"]).stdout).unwrap();
    assert_eq!(out.lines().count(), 15);
    assert!(out.contains("az-norm") && out.contains("18.542"));
    assert!(out.contains("at-norm") && out.contains("5.116"));
}

#[test]
fn bench_dry_run_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let records = dir.path().join("bench.jsonl");
    let out = bkprune(&["bench", "--small", "--dry-run", "--grid", "8,16,32", "--key-bits", "256", "--out", path(&records)]);
    let table = String::from_utf8(out.stdout).unwrap();
    assert_eq!(table.lines().count(), 2 + 4);
    assert!(table.contains("baseline"));
    assert_eq!(std::fs::read_to_string(&records).unwrap().lines().count(), 1 + 4);
    let again = String::from_utf8(bkprune(&["report", path(&records)]).stdout).unwrap();
    assert_eq!(again, table);
}

#[test]
fn bad_input_fails_cleanly() {
    let out = Command::new(env!("CARGO_BIN_EXE_bkprune")).args(["trial", "--corpus", "/nonexistent"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    let out = Command::new(env!("CARGO_BIN_EXE_bkprune")).args(["--mode", "secret", "report"]).output().unwrap();
    assert!(!out.status.success());
}
