use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: [&str; 10] = [
    "--set",
    "model.d_model=8",
    "--set",
    "model.n_layers=1",
    "--set",
    "model.n_heads=2",
    "--set",
    "model.d_ff=16",
    "--set",
    "train.batch_size=2",
];

fn morepair(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_morepair"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = morepair(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn tiny(extra: &[&str]) -> Vec<String> {
    TINY.iter().chain(extra).map(|s| s.to_string()).collect()
}

fn ok_tiny(dir: &Path, extra: &[&str]) -> String {
    let args = tiny(extra);
    ok(dir, &args.iter().map(String::as_str).collect::<Vec<_>>())
}

fn with<'a>(prefix: &[&'a str], extra: &[&'a str]) -> Vec<&'a str> {
    prefix.iter().chain(extra).copied().collect()
}

fn setup(dir: &Path) {
    ok(
        dir,
        &[
            "synth",
            "--count",
            "2",
            "--dataset",
            "raw.jsonl",
            "--benchmark",
            "bench",
        ],
    );
    ok(dir, &["prepare", "--dataset", "raw.jsonl", "--output", "data.jsonl"]);
}

#[test]
fn exit_codes_separate_validation_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(morepair(p, &["--set", "train.nope=1", "train"]).status.code(), Some(1));
    assert_eq!(
        morepair(p, &["--set", "train.lambda=-1", "train"]).status.code(),
        Some(1)
    );
    assert_eq!(morepair(p, &["train", "--output", "x.ckpt"]).status.code(), Some(1));
    assert_eq!(
        morepair(p, &["--config", "missing.toml", "train"]).status.code(),
        Some(2)
    );
    assert_eq!(
        morepair(p, &["train", "--dataset", "absent.jsonl", "--output", "x.ckpt"])
            .status
            .code(),
        Some(2)
    );
    fs::write(p.join("bad.jsonl"), "{\"id\": 1}\n").unwrap();
    let out = morepair(p, &["prepare", "--dataset", "bad.jsonl", "--output", "o.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.jsonl:1"));
}

#[test]
fn config_file_and_overrides_compose() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    setup(p);
    fs::write(
        p.join("run.toml"),
        "[train]\nsteps = 5\nlambda = 0.25\n[paths]\ndataset = \"data.jsonl\"\n",
    )
    .unwrap();
    ok_tiny(
        p,
        &[
            "--config",
            "run.toml",
            "--set",
            "train.steps=2",
            "train",
            "--output",
            "m.ckpt",
        ],
    );
    let echoed: toml::Table = fs::read_to_string(p.join("m.ckpt.config.toml"))
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(echoed["train"]["steps"].as_integer(), Some(2));
    assert_eq!(echoed["train"]["lambda"].as_float(), Some(0.25));
    assert_eq!(echoed["model"]["d_model"].as_integer(), Some(8));
}

#[test]
fn zero_steps_writes_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    setup(p);
    ok_tiny(
        p,
        &[
            "--set",
            "train.steps=0",
            "train",
            "--dataset",
            "data.jsonl",
            "--output",
            "m.ckpt",
            "--loss-log",
            "l.jsonl",
        ],
    );
    assert!(p.join("m.ckpt").is_file());
    assert_eq!(fs::read_to_string(p.join("l.jsonl")).unwrap(), "");
}

#[test]
fn resumed_training_log_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    setup(p);
    ok_tiny(
        p,
        &[
            "--set",
            "train.steps=4",
            "train",
            "--dataset",
            "data.jsonl",
            "--output",
            "full.ckpt",
            "--loss-log",
            "full.jsonl",
        ],
    );
    ok_tiny(
        p,
        &[
            "--set",
            "train.steps=2",
            "train",
            "--dataset",
            "data.jsonl",
            "--output",
            "half.ckpt",
            "--loss-log",
            "half.jsonl",
        ],
    );
    ok_tiny(
        p,
        &[
            "--set",
            "train.steps=4",
            "train",
            "--dataset",
            "data.jsonl",
            "--resume",
            "half.ckpt",
            "--output",
            "rest.ckpt",
            "--loss-log",
            "half.jsonl",
        ],
    );
    assert_eq!(
        fs::read(p.join("full.jsonl")).unwrap(),
        fs::read(p.join("half.jsonl")).unwrap()
    );
    assert_eq!(
        fs::read(p.join("full.ckpt")).unwrap(),
        fs::read(p.join("rest.ckpt")).unwrap()
    );
}

#[test]
fn strict_teacher_failure_stops_prepare() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(
        p,
        &[
            "synth",
            "--count",
            "2",
            "--dataset",
            "raw.jsonl",
            "--benchmark",
            "bench",
        ],
    );
    let first_id: String = {
        let line = fs::read_to_string(p.join("raw.jsonl")).unwrap();
        let v: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
        v["id"].as_str().unwrap().to_string()
    };
    let refuse = format!("teacher.fail_ids=[\"{first_id}\"]");
    let out = ok(
        p,
        &[
            "--set",
            &refuse,
            "prepare",
            "--dataset",
            "raw.jsonl",
            "--output",
            "lenient.jsonl",
        ],
    );
    assert!(out.contains("1 failed"), "{out}");
    let strict = morepair(
        p,
        &[
            "--set",
            &refuse,
            "--set",
            "teacher.strict=true",
            "prepare",
            "--dataset",
            "raw.jsonl",
            "--output",
            "strict.jsonl",
        ],
    );
    assert_ne!(strict.status.code(), Some(0));
    assert!(!p.join("strict.jsonl").exists());
}

#[test]
fn eval_from_checkpoint_matches_eval_from_dump() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    setup(p);
    let sampling = [
        "--set",
        "sampling.num_candidates=2",
        "--set",
        "sampling.max_new_tokens=16",
        "--set",
        "harness.ks=[1, 2]",
    ];
    ok_tiny(
        p,
        &[
            "--set",
            "train.steps=1",
            "train",
            "--dataset",
            "data.jsonl",
            "--output",
            "m.ckpt",
        ],
    );
    ok_tiny(
        p,
        &with(
            &sampling,
            &[
                "generate",
                "--checkpoint",
                "m.ckpt",
                "--benchmark",
                "bench",
                "--dump-dir",
                "dumps",
            ],
        ),
    );
    let a = ok_tiny(
        p,
        &with(
            &sampling,
            &[
                "eval",
                "--benchmark",
                "bench",
                "--dump-dir",
                "dumps",
                "--report",
                "a.jsonl",
            ],
        ),
    );
    let b = ok_tiny(
        p,
        &with(
            &sampling,
            &[
                "eval",
                "--benchmark",
                "bench",
                "--checkpoint",
                "m.ckpt",
                "--report",
                "b.jsonl",
            ],
        ),
    );
    assert!(a.contains("TOP-1") && a.contains("TOP-2"));
    assert_eq!(a, b);
    let rows = |f: &str| {
        fs::read_to_string(p.join(f))
            .unwrap()
            .lines()
            .skip(1)
            .map(String::from)
            .collect::<Vec<_>>()
    };
    assert_eq!(rows("a.jsonl"), rows("b.jsonl"));
    assert!(p.join("dumps.config.toml").is_file());
    assert!(p.join("a.jsonl.config.toml").is_file());
}
