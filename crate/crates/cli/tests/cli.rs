use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

const SMALL: &str = "\
seeds = 3
model.dim = 6
data.n_source_users = 4
data.n_target_users = 2
data.source_log_dialogues = 4
data.target_train_dialogues = 4
data.target_test_dialogues = 4
source.dialogues = 40
target.epochs = 1
baseline.bandit_budget = 4
";

fn petal(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_petal"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.cfg"), SMALL).unwrap();
    dir
}

fn pipeline(dir: &Path, out: &str) {
    for cmd in ["gen-data", "train-source", "transfer", "eval-offline", "eval-online"] {
        let o = petal(dir, &["--config", "small.cfg", "--out", out, "--baseline", "all", cmd]);
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

fn files(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn chat(dir: &Path, input: &str) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_petal"))
        .current_dir(dir)
        .args(["--config", "small.cfg", "--out", "o", "--baseline", "petal", "chat", "--user", "t01"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(input.as_bytes()).unwrap();
    child.wait_with_output().unwrap()
}

#[test]
fn missing_input_is_a_data_error() {
    let dir = setup();
    let o = petal(dir.path(), &["--config", "small.cfg", "--out", "empty", "eval-online"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("source_profiles.json"));
    let o = petal(dir.path(), &["--config", "nope.cfg", "gen-data"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_1() {
    let dir = setup();
    assert_eq!(petal(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(petal(dir.path(), &["--baseline", "nope", "gen-data"]).status.code(), Some(1));
    std::fs::write(dir.path().join("bad.cfg"), "model.width = 3\n").unwrap();
    assert_eq!(petal(dir.path(), &["--config", "bad.cfg", "gen-data"]).status.code(), Some(1));
    assert!(petal(dir.path(), &["--help"]).status.success());
    let o = petal(dir.path(), &["--config", "small.cfg", "--out", "o", "--baseline", "none_tl,pooled", "gen-data"]);
    assert!(o.status.success());
}

#[test]
fn full_pipeline_emits_reports_and_repeats_exactly() {
    let dir = setup();
    pipeline(dir.path(), "a");
    pipeline(dir.path(), "b");
    let reports = dir.path().join("a/reports");
    for f in ["auc.csv", "online.csv", "auc_summary.csv", "online_summary.csv"] {
        assert!(reports.join(f).exists(), "{f}");
    }
    let online = std::fs::read_to_string(reports.join("online_summary.csv")).unwrap();
    for k in ["none_tl", "all", "sim", "bandit", "prior_sim", "prior_all", "petal"] {
        assert!(online.lines().any(|l| l.starts_with(&format!("{k},"))), "{k} missing");
    }
    // The saved config records its own output root; everything else matches.
    let (mut a, mut b) = (files(&dir.path().join("a")), files(&dir.path().join("b")));
    let ca = String::from_utf8(a.remove("seed-3/config.txt").unwrap()).unwrap();
    let cb = String::from_utf8(b.remove("seed-3/config.txt").unwrap()).unwrap();
    assert_eq!(ca.replace("= a", "= b"), cb);
    assert_eq!(a, b);
}

#[test]
fn chat_session() {
    let dir = setup();
    for cmd in ["gen-data", "train-source", "transfer"] {
        let o = petal(dir.path(), &["--config", "small.cfg", "--out", "o", "--baseline", "petal", cmd]);
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }

    let o = chat(dir.path(), "/quit\n");
    assert!(o.status.success());
    assert!(o.stdout.is_empty());

    let o = chat(dir.path(), "i want a coffee\n/quit\nthis is never read\n");
    assert!(o.status.success());
    assert_eq!(String::from_utf8(o.stdout).unwrap().lines().count(), 1);

    let o = chat(dir.path(), "i want a coffee\nlatte please\n/reset\ni want a coffee\n");
    assert!(o.status.success());
    let lines: Vec<String> = String::from_utf8(o.stdout).unwrap().lines().map(String::from).collect();
    assert_eq!(lines.len(), 3);
    // Same opening after a reset.
    assert_eq!(lines[0], lines[2]);

    let o = petal(dir.path(), &["--config", "small.cfg", "--out", "o", "--baseline", "petal", "chat", "--user", "nobody"]);
    assert_eq!(o.status.code(), Some(2));
}
