use std::fs::{self, File};
use std::io::Read;
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitStatus, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::BenchmarkProblem;
use crate::error::{Error, Result};

pub const BUILTIN_CPP_PROFILE: &str = "cpp";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkdirPolicy {
    /// Commands run in the scratch root.
    #[default]
    Scratch,
    /// Commands run in the scratch copy of the problem's tests directory.
    Tests,
}

/// How to build and test one candidate.
///
/// Templates are split on whitespace into argv (no shell) after substituting
/// `{src}` (the candidate source), `{bin}` (an output binary path) and `{dir}`
/// (the scratch root, which holds a copy of `tests/`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToolchainProfile {
    pub compile: Option<String>,
    pub run: String,
    pub compile_timeout_secs: f64,
    pub test_timeout_secs: f64,
    pub workdir: WorkdirPolicy,
    pub success_exit_code: i32,
    pub max_output_bytes: usize,
}

impl Default for ToolchainProfile {
    fn default() -> Self {
        Self::cpp()
    }
}

impl ToolchainProfile {
    pub fn cpp() -> Self {
        Self {
            compile: Some("g++ -std=c++17 -O0 -include {src} -o {bin} {dir}/tests/test_main.cpp".into()),
            run: "{bin}".into(),
            compile_timeout_secs: 60.0,
            test_timeout_secs: 120.0,
            workdir: WorkdirPolicy::Scratch,
            success_exit_code: 0,
            max_output_bytes: 8192,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, t) in [("compile", self.compile_timeout_secs), ("test", self.test_timeout_secs)] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::invalid(format!("{name} timeout must be positive, got {t}")));
            }
        }
        let templates = self.compile.iter().chain(std::iter::once(&self.run));
        for tpl in templates {
            let mut words = tpl.split_whitespace();
            if words.next().is_none() {
                return Err(Error::invalid("empty command template"));
            }
            // only the program itself may be an absolute host path
            for w in words {
                if w.starts_with('/') || w.split('/').any(|seg| seg == "..") {
                    return Err(Error::invalid(format!(
                        "template argument {w:?} escapes the scratch directory"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    CompileError,
    TestFail,
    Timeout,
    RuntimeError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateOutcome {
    pub problem_id: String,
    pub candidate_index: usize,
    pub status: Status,
    pub wall_time_secs: f64,
    pub output: String,
}

/// Sandbox knobs shared by every run.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub scratch_root: Option<PathBuf>,
    pub keep_scratch: bool,
    pub env_denylist: Regex,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            scratch_root: None,
            keep_scratch: false,
            env_denylist: Regex::new(DEFAULT_ENV_DENYLIST).expect("valid pattern"),
        }
    }
}

pub const DEFAULT_ENV_DENYLIST: &str = "(?i)(key|token|secret|password|credential)";

enum Phase {
    Exited(ExitStatus),
    TimedOut,
}

struct PhaseResult {
    phase: Phase,
    output: String,
}

fn copy_dir(from: &Path, to: &Path) -> Result<()> {
    fs::create_dir_all(to).map_err(|e| Error::io(to, e))?;
    for entry in fs::read_dir(from).map_err(|e| Error::io(from, e))? {
        let entry = entry.map_err(|e| Error::io(from, e))?;
        let src = entry.path();
        let dst = to.join(entry.file_name());
        if src.is_dir() {
            copy_dir(&src, &dst)?;
        } else {
            fs::copy(&src, &dst).map_err(|e| Error::io(&src, e))?;
        }
    }
    Ok(())
}

fn read_truncated(path: &Path, limit: usize) -> String {
    let mut buf = Vec::new();
    if let Ok(f) = File::open(path) {
        let _ = f.take(limit as u64 + 1).read_to_end(&mut buf);
    }
    let cut = buf.len() > limit;
    buf.truncate(limit);
    let mut s = String::from_utf8_lossy(&buf).into_owned();
    if cut {
        s.push_str("\n[output truncated]");
    }
    s
}

fn substitute(template: &str, src: &Path, bin: &Path, dir: &Path) -> Vec<String> {
    template
        .split_whitespace()
        .map(|w| {
            w.replace("{src}", &src.to_string_lossy())
                .replace("{bin}", &bin.to_string_lossy())
                .replace("{dir}", &dir.to_string_lossy())
        })
        .collect()
}

fn run_phase(
    argv: &[String],
    cwd: &Path,
    scratch: &Path,
    log: &Path,
    timeout: Duration,
    opts: &RunOptions,
    limit: usize,
) -> Result<std::result::Result<PhaseResult, ()>> {
    let out = File::create(log).map_err(|e| Error::io(log, e))?;
    let err = out.try_clone().map_err(|e| Error::io(log, e))?;
    let mut cmd = Command::new(&argv[0]);
    cmd.args(&argv[1..])
        .current_dir(cwd)
        .env_clear()
        .envs(std::env::vars().filter(|(k, _)| !opts.env_denylist.is_match(k)))
        .stdin(Stdio::null())
        .stdout(out)
        .stderr(err)
        .process_group(0);
    let mut child = match cmd.spawn() {
        Ok(c) => c,
        // a missing program inside scratch means the build produced nothing
        Err(e) if e.kind() == std::io::ErrorKind::NotFound && Path::new(&argv[0]).starts_with(scratch) => {
            return Ok(Err(()));
        }
        Err(e) => {
            return Err(Error::Environment(format!("cannot run {:?}: {e}", argv[0])));
        }
    };
    let start = Instant::now();
    let mut poll = Duration::from_millis(2);
    let phase = loop {
        match child.try_wait() {
            Ok(Some(status)) => break Phase::Exited(status),
            Ok(None) if start.elapsed() >= timeout => {
                // SAFETY: kill(2) on our own child's process group; no memory is touched.
                unsafe {
                    libc::kill(-(child.id() as libc::pid_t), libc::SIGKILL);
                }
                let _ = child.wait();
                break Phase::TimedOut;
            }
            Ok(None) => {
                thread::sleep(poll.min(timeout.saturating_sub(start.elapsed())));
                poll = (poll * 2).min(Duration::from_millis(25));
            }
            Err(e) => return Err(Error::Environment(format!("waiting on {:?}: {e}", argv[0]))),
        }
    };
    Ok(Ok(PhaseResult {
        phase,
        output: read_truncated(log, limit),
    }))
}

/// Compiles and tests `patch` as the problem's source inside a fresh scratch
/// directory. Returns `Err` only for environment failures.
pub fn run_candidate(
    problem: &BenchmarkProblem,
    candidate_index: usize,
    patch: &str,
    profile: &ToolchainProfile,
    opts: &RunOptions,
) -> Result<CandidateOutcome> {
    let started = Instant::now();
    let mut builder = tempfile::Builder::new();
    builder.prefix("morepair-run-");
    let scratch = match &opts.scratch_root {
        Some(root) => builder.tempdir_in(root),
        None => builder.tempdir(),
    }
    .map_err(|e| Error::Environment(format!("cannot create scratch directory: {e}")))?;
    let dir = scratch.path().to_path_buf();

    let result = (|| -> Result<(Status, String)> {
        let src = dir.join(&problem.source_filename);
        fs::write(&src, patch).map_err(|e| Error::io(&src, e))?;
        let tests = dir.join("tests");
        copy_dir(&problem.tests_dir, &tests)?;
        let bin = dir.join("candidate.bin");
        let cwd = match profile.workdir {
            WorkdirPolicy::Scratch => dir.clone(),
            WorkdirPolicy::Tests => tests.clone(),
        };
        let limit = profile.max_output_bytes;

        if let Some(compile) = &profile.compile {
            let argv = substitute(compile, &src, &bin, &dir);
            let timeout = Duration::from_secs_f64(profile.compile_timeout_secs);
            match run_phase(&argv, &cwd, &dir, &dir.join("compile.log"), timeout, opts, limit)? {
                Err(()) => return Ok((Status::CompileError, String::new())),
                Ok(r) => match r.phase {
                    Phase::TimedOut => return Ok((Status::Timeout, r.output)),
                    Phase::Exited(s) if !s.success() => return Ok((Status::CompileError, r.output)),
                    Phase::Exited(_) => {}
                },
            }
        }

        let argv = substitute(&profile.run, &src, &bin, &dir);
        let timeout = Duration::from_secs_f64(profile.test_timeout_secs);
        Ok(
            match run_phase(&argv, &cwd, &dir, &dir.join("test.log"), timeout, opts, limit)? {
                Err(()) => (Status::RuntimeError, format!("{} was not produced", argv[0])),
                Ok(r) => {
                    let status = match r.phase {
                        Phase::TimedOut => Status::Timeout,
                        Phase::Exited(s) if s.signal().is_some() => Status::RuntimeError,
                        Phase::Exited(s) if s.code() == Some(profile.success_exit_code) => Status::Pass,
                        Phase::Exited(_) => Status::TestFail,
                    };
                    (status, r.output)
                }
            },
        )
    })();

    if opts.keep_scratch {
        let kept = scratch.keep();
        log::info!("kept scratch directory {}", kept.display());
    }
    let (status, output) = result?;
    Ok(CandidateOutcome {
        problem_id: problem.id.clone(),
        candidate_index,
        status,
        wall_time_secs: started.elapsed().as_secs_f64(),
        output,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_profile_is_valid() {
        ToolchainProfile::cpp().validate().unwrap();
    }

    #[test]
    fn rejects_escaping_templates() {
        let mut p = ToolchainProfile::cpp();
        p.run = "{bin} /etc/passwd".into();
        assert!(p.validate().is_err());
        p.run = "{bin} {dir}/../x".into();
        assert!(p.validate().is_err());
        p.run = "/usr/bin/env {bin}".into();
        assert!(p.validate().is_ok());
        p.test_timeout_secs = 0.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn placeholders_substituted() {
        let argv = substitute(
            "cc -o {bin} {src} {dir}/tests/a.c",
            Path::new("/s/x.c"),
            Path::new("/s/b"),
            Path::new("/s"),
        );
        assert_eq!(argv, ["cc", "-o", "/s/b", "/s/x.c", "/s/tests/a.c"]);
    }

    #[test]
    fn denylist_matches_secrets() {
        let re = Regex::new(DEFAULT_ENV_DENYLIST).unwrap();
        assert!(re.is_match("MOREPAIR_TEACHER_KEY"));
        assert!(re.is_match("github_token"));
        assert!(!re.is_match("PATH"));
    }
}
