use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"seed = 3

[prompts]
sft = 40
eval = 60

[sft]
epochs = 2

[train]
steps = 6
freq = 6
batch_size = 4
ensemble = 2
lr = 0.01
"#;

fn bpo(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bpo"))
        .args(args)
        .current_dir(cwd)
        .env_remove("BPO_OUTPUT_ROOT")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    (dir, cfg)
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn last_stderr_line(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr)
        .lines()
        .last()
        .unwrap_or_default()
        .to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn entries(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

#[test]
fn missing_config_flag_is_usage_error() {
    let (dir, _) = setup();
    let o = bpo(&["sft"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(last_stderr_line(&o).starts_with("error: "));
    assert!(o.stdout.is_empty());
}

#[test]
fn missing_config_file_is_io_error() {
    let (dir, _) = setup();
    let o = bpo(&["sft", "--config", "nope.toml"], dir.path());
    assert_eq!(code(&o), 4);
    assert!(
        last_stderr_line(&o).starts_with("error: io: "),
        "{}",
        last_stderr_line(&o)
    );
}

#[test]
fn unknown_config_key_is_named() {
    let (dir, _) = setup();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nstepz = 4\n").unwrap();
    let o = bpo(&["sft", "--config", s(&cfg)], dir.path());
    assert_eq!(code(&o), 2);
    assert!(last_stderr_line(&o).contains("stepz"), "{}", last_stderr_line(&o));
}

#[test]
fn unknown_study_is_rejected() {
    let (dir, cfg) = setup();
    let o = bpo(&["ablate", "--config", s(&cfg), "--study", "width"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(last_stderr_line(&o).starts_with("error: config: "));
}

#[test]
fn sft_twice_gives_identical_artifacts() {
    let (dir, cfg) = setup();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = bpo(&["sft", "--config", s(&cfg), "--out", s(out)], dir.path());
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(o.stdout.is_empty(), "stdout must stay silent");
    }
    for f in [
        "sft.ckpt",
        "references.jsonl",
        "prompts.json",
        "gold.json",
        "config.toml",
    ] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn align_eval_and_report_pipeline() {
    let (dir, cfg) = setup();
    let root = dir.path();
    let sft = root.join("sft");
    assert_eq!(code(&bpo(&["sft", "--config", s(&cfg), "--out", s(&sft)], root)), 0);
    let ckpt = sft.join("sft.ckpt");

    let run = root.join("runs").join("F3");
    let o = bpo(
        &[
            "align",
            "--config",
            s(&cfg),
            "--sft",
            s(&ckpt),
            "--out",
            s(&run),
            "--freq",
            "3",
            "--loss",
            "ipo",
        ],
        root,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(o.stdout.is_empty());
    for f in [
        "final.ckpt",
        "metrics.jsonl",
        "prefs.jsonl",
        "result.json",
        "manifest.json",
        "config.toml",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }
    let saved = std::fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(saved.contains("freq = 3") && saved.contains("\"ipo\""), "{saved}");

    let final_ckpt = run.join("final.ckpt");
    let csv = root.join("eval.csv");
    let o = bpo(
        &[
            "eval",
            "--policy",
            s(&final_ckpt),
            "--references",
            s(&sft),
            "--out",
            s(&csv),
        ],
        root,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 1 + 60 + 1);
    assert!(text.lines().last().unwrap().starts_with("all,"));

    let self_csv = root.join("self.csv");
    let o = bpo(
        &[
            "eval",
            "--policy",
            s(&final_ckpt),
            "--opponent",
            s(&final_ckpt),
            "--shared-transcript",
            "--out",
            s(&self_csv),
        ],
        root,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let last = std::fs::read_to_string(&self_csv)
        .unwrap()
        .lines()
        .last()
        .unwrap()
        .to_string();
    assert!(last.ends_with(",0.5"), "{last}");

    let agg = root.join("agg.csv");
    let o = bpo(
        &[
            "report",
            "--runs",
            s(&root.join("runs")),
            "--out",
            s(&agg),
            "--resamples",
            "100",
        ],
        root,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = std::fs::read_to_string(&agg).unwrap();
    assert_eq!(rows.lines().count(), 1 + 3);
}

#[test]
fn eval_requires_exactly_one_target() {
    let (dir, _) = setup();
    let root = dir.path();
    let neither = bpo(&["eval", "--policy", "p.ckpt", "--out", "o.csv"], root);
    assert_eq!(code(&neither), 2);
    let both = bpo(
        &[
            "eval",
            "--policy",
            "p.ckpt",
            "--references",
            "r",
            "--opponent",
            "q.ckpt",
            "--out",
            "o.csv",
        ],
        root,
    );
    assert_eq!(code(&both), 2);
    assert!(!root.join("o.csv").exists());
}

#[test]
fn corrupt_checkpoint_is_format_error() {
    let (dir, _) = setup();
    let root = dir.path();
    std::fs::write(root.join("p.ckpt"), "{\"format_version\":1,\"lab").unwrap();
    let o = bpo(
        &["eval", "--policy", "p.ckpt", "--references", ".", "--out", "o.csv"],
        root,
    );
    assert_eq!(code(&o), 4, "{}", last_stderr_line(&o));
}

#[test]
fn empty_report_directory_is_config_error() {
    let (dir, _) = setup();
    let runs = dir.path().join("empty");
    std::fs::create_dir(&runs).unwrap();
    let o = bpo(&["report", "--runs", s(&runs), "--out", "agg.csv"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(!dir.path().join("agg.csv").exists());
}

#[test]
fn golden_mode_without_checkpoint_fails_before_work() {
    let (dir, cfg) = setup();
    let o = bpo(
        &[
            "align",
            "--config",
            s(&cfg),
            "--sft",
            "missing.ckpt",
            "--ref-mode",
            "golden",
            "--out",
            "run",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 2);
    assert!(
        last_stderr_line(&o).contains("train.golden"),
        "{}",
        last_stderr_line(&o)
    );
    assert!(!dir.path().join("run").exists());
}

#[test]
fn sweep_rejects_bad_frequency_before_any_run() {
    let (dir, cfg) = setup();
    let o = bpo(
        &["sweep", "--config", s(&cfg), "--freqs", "1,4", "--out", "sw"],
        dir.path(),
    );
    assert_eq!(code(&o), 2);
    assert!(last_stderr_line(&o).contains("train.freq"), "{}", last_stderr_line(&o));
    assert!(!dir.path().join("sw").exists());
}

#[test]
fn dry_run_prints_plan_and_writes_nothing() {
    let (dir, cfg) = setup();
    let before = entries(dir.path());
    let o = bpo(
        &[
            "--dry-run",
            "sweep",
            "--config",
            s(&cfg),
            "--freqs",
            "1,3",
            "--seeds",
            "0,1",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = String::from_utf8(o.stdout).unwrap();
    assert_eq!(out.lines().filter(|l| l.starts_with("# run ")).count(), 4);
    assert!(out.contains("steps = 6"));
    assert_eq!(entries(dir.path()), before);
}

#[test]
fn output_root_env_is_honored() {
    let (dir, cfg) = setup();
    let root = dir.path().join("elsewhere");
    let o = Command::new(env!("CARGO_BIN_EXE_bpo"))
        .args(["--seed", "5", "sft", "--config", s(&cfg)])
        .current_dir(dir.path())
        .env("BPO_OUTPUT_ROOT", &root)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(root.join("sft-s5").join("sft.ckpt").exists());
    assert!(!dir.path().join("runs").exists());
}

#[test]
fn help_goes_to_stdout() {
    let (dir, _) = setup();
    let o = bpo(&["--help"], dir.path());
    assert_eq!(code(&o), 0);
    let out = String::from_utf8(o.stdout).unwrap();
    for sub in ["sft", "align", "eval", "sweep", "ablate", "report"] {
        assert!(out.contains(sub), "{sub}");
    }
}
