use std::path::Path;
use std::process::{Command, Output};

use qflow::checkpoint::load_checkpoint;
use qflow::evaluation::{AttentionHistogram, EvalReport};

const BASE: &str = "\
data.seed = 3
data.n = 45
data.path = data.txt
paradigm.kind = score_only
grpo.learning_rate = 0.5
train.batch_size = 5
run.seed = 4
";

fn qflow(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qflow"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn setup(extra: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.cfg"), format!("{BASE}{extra}")).unwrap();
    let out = qflow(dir.path(), &["gen-data", "--config", "run.cfg"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    dir
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn gen_data_writes_summary_and_is_reproducible() {
    let dir = setup("");
    let first = std::fs::read(dir.path().join("data.txt")).unwrap();
    let out = qflow(dir.path(), &["gen-data", "--config", "run.cfg", "--out", "again.txt"]);
    assert!(out.status.success());
    assert!(stdout(&out).contains("records=45"));
    assert_eq!(first, std::fs::read(dir.path().join("again.txt")).unwrap());
}

#[test]
fn gen_data_rejects_zero_records() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.cfg"), "data.n = 0\n").unwrap();
    let out = qflow(dir.path(), &["gen-data", "--config", "bad.cfg", "--out", "x.txt"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("data.n"), "{}", stderr(&out));
    assert!(!dir.path().join("x.txt").exists());
}

#[test]
fn train_logs_one_line_per_iteration() {
    let dir = setup("train.iterations = 50\n");
    let out = qflow(dir.path(), &["train", "--config", "run.cfg", "--out-dir", "run"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let log = std::fs::read_to_string(dir.path().join("run/train.log")).unwrap();
    assert_eq!(log.lines().count(), 50);
    assert!(log.lines().all(|l| l.starts_with("iter=") && l.contains("paradigm=score_only")));
    let last = stdout(&out);
    assert!(last.trim_end().ends_with("iterations=50"), "{last}");
    assert!(last.contains("mean_reward="));
    let ck = load_checkpoint(dir.path().join("run/checkpoint.txt")).unwrap();
    assert_eq!(ck.meta("paradigm"), Some("score_only"));
}

#[test]
fn train_without_dataset_fails_validation() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.cfg"), BASE).unwrap();
    let out = qflow(dir.path(), &["train", "--config", "run.cfg", "--out-dir", "run"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("data.path"));
}

#[test]
fn eval_writes_report_histograms_and_gap() {
    let dir = setup("train.iterations = 0\ndata.n = 120\n");
    assert!(qflow(dir.path(), &["train", "--config", "run.cfg", "--out-dir", "run"]).status.success());
    let out = qflow(
        dir.path(),
        &[
            "eval", "--ckpt", "run/checkpoint.txt", "--data", "data.txt",
            "--modes", "image,text,text_stripped", "--out-dir", "ev", "--config", "run.cfg",
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let text = std::fs::read_to_string(dir.path().join("ev/report.txt")).unwrap();
    let report = EvalReport::parse(&text).unwrap();
    assert_eq!(report.rows.len(), 3);
    assert_eq!(text.lines().filter(|l| l.starts_with("gap_")).count(), 2);
    assert!(report.rows.iter().all(|r| r.n == 40));
    let gap_line = stdout(&out).lines().find(|l| l.starts_with("gap_plcc=")).unwrap().to_string();
    assert_eq!(Some(gap_line), report.gap_line());
    for mode in ["image", "text", "text_stripped"] {
        let csv = std::fs::read_to_string(dir.path().join(format!("ev/attention_{mode}.csv"))).unwrap();
        let h = AttentionHistogram::parse_csv(&csv).unwrap();
        assert_eq!(h.entries.iter().any(|e| e.label == "IMAGE_SLOT"), mode == "image");
        assert!(h.entries.windows(2).all(|w| w[0].mean_weight >= w[1].mean_weight));
    }
}

#[test]
fn eval_rejects_corrupt_checkpoint() {
    let dir = setup("");
    std::fs::write(dir.path().join("bad.txt"), "QFLOW-CKPT v1\ntoken_emb 2,2\n1 2\n").unwrap();
    let out = qflow(dir.path(), &["eval", "--ckpt", "bad.txt", "--data", "data.txt", "--out-dir", "ev"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("bad.txt"));
}

#[test]
fn eval_surfaces_undefined_correlation() {
    let dir = setup("train.iterations = 0\n");
    assert!(qflow(dir.path(), &["train", "--config", "run.cfg", "--out-dir", "run"]).status.success());
    // zero every weight: all scores become the uniform mean
    let text = std::fs::read_to_string(dir.path().join("run/checkpoint.txt")).unwrap();
    let zeroed: String = text
        .lines()
        .map(|l| {
            if l.starts_with(|c: char| c == '-' || c.is_ascii_digit()) {
                l.split_whitespace().map(|_| "0").collect::<Vec<_>>().join(" ")
            } else {
                l.to_string()
            }
        })
        .collect::<Vec<_>>()
        .join("\n");
    std::fs::write(dir.path().join("zero.txt"), zeroed).unwrap();
    let out = qflow(dir.path(), &["eval", "--ckpt", "zero.txt", "--data", "data.txt", "--modes", "image", "--out-dir", "ev"]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

#[test]
fn ablate_writes_two_rows_per_setting_independent_of_order() {
    let dir = setup("train.iterations = 3\nparadigm.kind = self_consistency\n");
    let a = qflow(dir.path(), &["ablate", "--config", "run.cfg", "--grid", "1,0;0,1;1,1", "--out-dir", "a"]);
    assert!(a.status.success(), "{}", stderr(&a));
    let b = qflow(dir.path(), &["ablate", "--config", "run.cfg", "--grid", "1,1;1,0;0,1", "--out-dir", "b"]);
    assert!(b.status.success());
    let rows = |d: &str| -> Vec<String> {
        let t = std::fs::read_to_string(dir.path().join(d).join("ablation.txt")).unwrap();
        let mut r: Vec<String> = t.lines().filter(|l| l.starts_with("alpha=")).map(String::from).collect();
        r.sort();
        r
    };
    let ra = rows("a");
    assert_eq!(ra.len(), 6);
    assert_eq!(ra, rows("b"));
    assert!(ra.iter().filter(|r| r.contains("condition=image")).count() == 3);
    assert!(dir.path().join("a/alpha1_beta0/train.log").exists());
}

#[test]
fn ablate_rejects_empty_grid() {
    let dir = setup("");
    let out = qflow(dir.path(), &["ablate", "--config", "run.cfg", "--grid", "", "--out-dir", "a"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn numerical_abort_keeps_last_finite_checkpoint() {
    let dir = setup("train.iterations = 20\ngrpo.learning_rate = 1e300\n");
    let out = qflow(dir.path(), &["train", "--config", "run.cfg", "--out-dir", "run"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    let ck = load_checkpoint(dir.path().join("run/checkpoint.txt")).unwrap();
    assert!(ck.params.is_finite());
}
