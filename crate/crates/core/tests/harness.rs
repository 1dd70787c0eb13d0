use std::fs;

use morepair::dataprep::synth;
use morepair::evalharness::{
    evaluate, load_benchmark, Benchmark, HarnessConfig, Status, ToolchainProfile, WorkdirPolicy,
};
use serde_json::Value;

fn synth_bench(dir: &std::path::Path, n: usize) -> (Benchmark, Vec<synth::SynthProblem>) {
    let problems = synth::generate(n, 21).unwrap();
    synth::write_benchmark(dir, "synth", &problems).unwrap();
    (load_benchmark(dir, true).unwrap(), problems)
}

fn with_profile(profile: ToolchainProfile) -> HarnessConfig {
    let mut cfg = HarnessConfig {
        ks: vec![1],
        ..HarnessConfig::default()
    };
    cfg.profiles.insert("cpp".into(), profile);
    cfg
}

#[test]
fn fixed_code_passes_and_buggy_code_fails() {
    let dir = tempfile::tempdir().unwrap();
    let (bench, problems) = synth_bench(dir.path(), 3);
    let patches: Vec<Vec<String>> = problems
        .iter()
        .map(|p| {
            vec![
                p.example.fixed_code.clone(),
                p.example.buggy_code.clone(),
                p.example.fixed_code.clone(),
            ]
        })
        .collect();
    let cfg = HarnessConfig {
        ks: vec![1, 2],
        ..HarnessConfig::default()
    };
    let report = evaluate(&bench, &patches, &cfg, Value::Null).unwrap();
    for row in &report.rows {
        assert_eq!(
            row.statuses,
            [Status::Pass, Status::TestFail, Status::Pass],
            "{}",
            row.id
        );
    }
    assert_eq!(report.top_k[0].value, 100.0);
    // the repeated patch was run once and its outcome copied
    let first = &report.outcomes[0];
    let third = &report.outcomes[2];
    assert_eq!(first.wall_time_secs, third.wall_time_secs);
    assert_eq!(third.candidate_index, 2);

    let text = report.to_jsonl().unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].contains("\"top_k\""));
}

#[test]
fn secrets_are_not_passed_to_candidates() {
    std::env::set_var("MOREPAIR_TEACHER_KEY", "hunter2");
    let dir = tempfile::tempdir().unwrap();
    let (bench, _) = synth_bench(dir.path(), 1);
    let cfg = with_profile(ToolchainProfile {
        compile: None,
        run: "env".into(),
        max_output_bytes: 1 << 20,
        ..ToolchainProfile::cpp()
    });
    let report = evaluate(&bench, &[vec!["x".into()]], &cfg, Value::Null).unwrap();
    let out = &report.outcomes[0];
    assert_eq!(out.status, Status::Pass);
    assert!(out.output.contains("PATH="));
    assert!(!out.output.contains("hunter2"));
}

#[test]
fn scratch_directories_are_removed_unless_kept() {
    let dir = tempfile::tempdir().unwrap();
    let scratch = tempfile::tempdir().unwrap();
    let (bench, problems) = synth_bench(dir.path(), 1);
    let patches = vec![vec![problems[0].example.fixed_code.clone()]];
    let mut cfg = HarnessConfig {
        ks: vec![1],
        scratch_root: Some(scratch.path().to_path_buf()),
        ..HarnessConfig::default()
    };
    evaluate(&bench, &patches, &cfg, Value::Null).unwrap();
    assert_eq!(fs::read_dir(scratch.path()).unwrap().count(), 0);
    cfg.keep_scratch = true;
    evaluate(&bench, &patches, &cfg, Value::Null).unwrap();
    let kept: Vec<_> = fs::read_dir(scratch.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    assert_eq!(kept.len(), 1);
    assert!(kept[0].join("solution.cpp").is_file());
    assert!(kept[0].join("tests/test_main.cpp").is_file());
}

#[test]
fn tests_workdir_policy() {
    let dir = tempfile::tempdir().unwrap();
    let (bench, _) = synth_bench(dir.path(), 1);
    let cfg = with_profile(ToolchainProfile {
        compile: None,
        run: "cat test_main.cpp".into(),
        workdir: WorkdirPolicy::Tests,
        ..ToolchainProfile::cpp()
    });
    let report = evaluate(&bench, &[vec!["x".into()]], &cfg, Value::Null).unwrap();
    assert_eq!(report.outcomes[0].status, Status::Pass);
    assert!(report.outcomes[0].output.contains("int main()"));
}

#[test]
fn missing_toolchain_is_an_environment_error() {
    let dir = tempfile::tempdir().unwrap();
    let (bench, _) = synth_bench(dir.path(), 1);
    let cfg = with_profile(ToolchainProfile {
        compile: Some("morepair-no-such-compiler {src}".into()),
        ..ToolchainProfile::cpp()
    });
    let err = evaluate(&bench, &[vec!["x".into()]], &cfg, Value::Null).unwrap_err();
    assert!(err.is_environment(), "{err}");
}

#[test]
fn crashing_candidate_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let (bench, _) = synth_bench(dir.path(), 1);
    let patch = "#include <cstdlib>\nint solve(int a) { std::abort(); }\nint solve(int a, int b) { std::abort(); }\n";
    let cfg = HarnessConfig {
        ks: vec![1],
        ..HarnessConfig::default()
    };
    let report = evaluate(&bench, &[vec![patch.into()]], &cfg, Value::Null).unwrap();
    assert_eq!(report.outcomes[0].status, Status::RuntimeError);
}

#[test]
fn candidate_width_is_checked() {
    let dir = tempfile::tempdir().unwrap();
    let (bench, _) = synth_bench(dir.path(), 2);
    let cfg = HarnessConfig::default();
    assert!(evaluate(&bench, &[vec!["a".into()], vec!["b".into()]], &cfg, Value::Null).is_err());
    let ragged = vec![vec!["a".to_string(); 10], vec!["b".to_string(); 9]];
    assert!(evaluate(&bench, &ragged, &cfg, Value::Null).is_err());
}
