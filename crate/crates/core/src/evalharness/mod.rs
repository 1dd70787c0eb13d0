//! Benchmark loading, sandboxed candidate validation and TOP-k metrics.

mod sandbox;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::{SystemTime, UNIX_EPOCH};

use log::warn;
use regex::Regex;
use serde::{Deserialize, Serialize};

pub use sandbox::{
    run_candidate, CandidateOutcome, RunOptions, Status, ToolchainProfile, WorkdirPolicy, BUILTIN_CPP_PROFILE,
    DEFAULT_ENV_DENYLIST,
};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub name: String,
    pub toolchain_profile: String,
    pub problem_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemMeta {
    pub source_filename: String,
    pub test_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub toolchain_profile: Option<String>,
    #[serde(default)]
    pub task_description: String,
    #[serde(default = "default_language")]
    pub language_tag: String,
}

fn default_language() -> String {
    "cpp".into()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkProblem {
    pub id: String,
    pub buggy_source: String,
    pub source_filename: String,
    pub toolchain_profile: String,
    pub tests_dir: PathBuf,
    pub test_count: usize,
    pub task_description: String,
    pub language_tag: String,
}

#[derive(Debug, Clone)]
pub struct Benchmark {
    pub name: String,
    pub problems: Vec<BenchmarkProblem>,
    /// `(id, reason)` for problems skipped in non-strict loading.
    pub skipped: Vec<(String, String)>,
}

fn load_problem(dir: &Path, id: &str, default_profile: &str) -> std::result::Result<BenchmarkProblem, String> {
    let pdir = dir.join("problems").join(id);
    if !pdir.is_dir() {
        return Err(format!("missing directory {}", pdir.display()));
    }
    let meta_path = pdir.join("meta.json");
    let meta_text = fs::read_to_string(&meta_path).map_err(|e| format!("{}: {e}", meta_path.display()))?;
    let meta: ProblemMeta = serde_json::from_str(&meta_text).map_err(|e| format!("{}: {e}", meta_path.display()))?;
    if meta.test_count == 0 {
        return Err("declared test_count must be at least 1".into());
    }
    if meta.source_filename.is_empty() || meta.source_filename.contains('/') {
        return Err(format!("invalid source_filename {:?}", meta.source_filename));
    }
    let mut buggy: Vec<PathBuf> = fs::read_dir(&pdir)
        .map_err(|e| format!("{}: {e}", pdir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.file_stem().is_some_and(|s| s == "buggy"))
        .collect();
    buggy.sort();
    let buggy_path = buggy.first().ok_or_else(|| "missing buggy.<ext>".to_string())?;
    let buggy_source = fs::read_to_string(buggy_path).map_err(|e| format!("{}: {e}", buggy_path.display()))?;
    let tests_dir = pdir.join("tests");
    if !tests_dir.is_dir() {
        return Err("missing tests/ directory".into());
    }
    Ok(BenchmarkProblem {
        id: id.to_string(),
        buggy_source,
        source_filename: meta.source_filename,
        toolchain_profile: meta.toolchain_profile.unwrap_or_else(|| default_profile.to_string()),
        tests_dir,
        test_count: meta.test_count,
        task_description: meta.task_description,
        language_tag: meta.language_tag,
    })
}

/// Reads `manifest.json` and every listed problem under `dir`.
pub fn load_benchmark(dir: &Path, strict: bool) -> Result<Benchmark> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| {
        Error::invalid(format!(
            "cannot read benchmark manifest {}: {e}",
            manifest_path.display()
        ))
    })?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: manifest_path.clone(),
        line: e.line(),
        message: e.to_string(),
    })?;
    let mut seen = HashSet::new();
    for id in &manifest.problem_ids {
        if !seen.insert(id) {
            return Err(Error::invalid(format!("duplicate problem id {id:?} in manifest")));
        }
    }
    let mut problems = Vec::new();
    let mut skipped = Vec::new();
    for id in &manifest.problem_ids {
        match load_problem(dir, id, &manifest.toolchain_profile) {
            Ok(p) => problems.push(p),
            Err(reason) if strict => {
                return Err(Error::invalid(format!("problem {id}: {reason}")));
            }
            Err(reason) => {
                warn!("skipping problem {id}: {reason}");
                skipped.push((id.clone(), reason));
            }
        }
    }
    Ok(Benchmark {
        name: manifest.name,
        problems,
        skipped,
    })
}

/// Percentage of problems with a passing candidate among the first `k`,
/// rounded half away from zero to one decimal.
pub fn top_k(matrix: &[Vec<bool>], k: usize) -> Result<f64> {
    let width = matrix.first().map_or(0, Vec::len);
    if matrix.is_empty() {
        return Err(Error::invalid("TOP-k of an empty matrix"));
    }
    if matrix.iter().any(|r| r.len() != width) {
        return Err(Error::invalid("ragged pass matrix"));
    }
    if k == 0 || k > width {
        return Err(Error::invalid(format!("k = {k} outside 1..={width}")));
    }
    let hits = matrix.iter().filter(|row| row[..k].iter().any(|&p| p)).count() as u64;
    let p = matrix.len() as u64;
    let scaled = 1000 * hits;
    let mut tenths = scaled / p;
    if 2 * (scaled % p) >= p {
        tenths += 1;
    }
    Ok(tenths as f64 / 10.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    pub ks: Vec<usize>,
    pub workers: usize,
    pub strict: bool,
    pub keep_scratch: bool,
    pub scratch_root: Option<PathBuf>,
    /// Environment variables whose names match are not passed to candidates.
    pub env_denylist: String,
    /// Extra or overriding profiles, by name. `cpp` is built in.
    pub profiles: BTreeMap<String, ToolchainProfile>,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            ks: vec![1, 5, 10],
            workers: 1,
            strict: false,
            keep_scratch: false,
            scratch_root: None,
            env_denylist: DEFAULT_ENV_DENYLIST.into(),
            profiles: BTreeMap::new(),
        }
    }
}

impl HarnessConfig {
    pub fn profile(&self, name: &str) -> Result<ToolchainProfile> {
        match self.profiles.get(name) {
            Some(p) => Ok(p.clone()),
            None if name == BUILTIN_CPP_PROFILE => Ok(ToolchainProfile::cpp()),
            None => Err(Error::invalid(format!("unknown toolchain profile {name:?}"))),
        }
    }

    pub fn run_options(&self) -> Result<RunOptions> {
        Ok(RunOptions {
            scratch_root: self.scratch_root.clone(),
            keep_scratch: self.keep_scratch,
            env_denylist: Regex::new(&self.env_denylist)
                .map_err(|e| Error::invalid(format!("bad env_denylist: {e}")))?,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::invalid("workers must be at least 1"));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::invalid("ks must be a nonempty list of positive integers"));
        }
        for p in self.profiles.values() {
            p.validate()?;
        }
        self.run_options().map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemRow {
    pub id: String,
    pub passed: Vec<bool>,
    pub statuses: Vec<Status>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopK {
    pub k: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub benchmark: String,
    pub rows: Vec<ProblemRow>,
    pub top_k: Vec<TopK>,
    pub config: serde_json::Value,
    pub skipped: Vec<(String, String)>,
    pub started_at: u64,
    pub finished_at: u64,
    /// Every outcome, problem-major, candidate order.
    #[serde(skip)]
    pub outcomes: Vec<CandidateOutcome>,
}

impl EvalReport {
    pub fn matrix(&self) -> Vec<Vec<bool>> {
        self.rows.iter().map(|r| r.passed.clone()).collect()
    }

    /// Line-oriented JSON: a summary line then one line per problem.
    pub fn to_jsonl(&self) -> Result<String> {
        let summary = serde_json::json!({
            "benchmark": self.benchmark,
            "problems": self.rows.len(),
            "candidates": self.rows.first().map_or(0, |r| r.passed.len()),
            "top_k": self.top_k,
            "skipped": self.skipped,
            "config": self.config,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
        });
        let mut out = serde_json::to_string(&summary)?;
        out.push('\n');
        for row in &self.rows {
            out.push_str(&serde_json::to_string(row)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }

    pub fn table(&self) -> String {
        let mut s = format!("benchmark: {} ({} problems)\n", self.benchmark, self.rows.len());
        s.push_str(&format!("{:<8}{:>8}\n", "metric", "value"));
        for t in &self.top_k {
            s.push_str(&format!("{:<8}{:>8.1}\n", format!("TOP-{}", t.k), t.value));
        }
        s
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Validates every `(problem, candidate)` patch and builds the report.
///
/// `patches[i]` holds the extracted patches for `benchmark.problems[i]`.
/// Identical patch texts for the same problem are run once. Environment
/// errors abort the whole evaluation.
pub fn evaluate(
    benchmark: &Benchmark,
    patches: &[Vec<String>],
    cfg: &HarnessConfig,
    config_snapshot: serde_json::Value,
) -> Result<EvalReport> {
    cfg.validate()?;
    if patches.len() != benchmark.problems.len() {
        return Err(Error::invalid(format!(
            "{} candidate lists for {} problems",
            patches.len(),
            benchmark.problems.len()
        )));
    }
    if benchmark.problems.is_empty() {
        return Err(Error::invalid("benchmark has no problems"));
    }
    let width = patches[0].len();
    let max_k = *cfg.ks.iter().max().expect("validated nonempty");
    if let Some((i, p)) = patches.iter().enumerate().find(|(_, p)| p.len() != width) {
        return Err(Error::invalid(format!(
            "problem {} has {} candidates, expected {width}",
            benchmark.problems[i].id,
            p.len()
        )));
    }
    if width < max_k {
        return Err(Error::invalid(format!(
            "{width} candidates per problem, need at least {max_k}"
        )));
    }
    let profiles: Vec<ToolchainProfile> = benchmark
        .problems
        .iter()
        .map(|p| cfg.profile(&p.toolchain_profile))
        .collect::<Result<_>>()?;
    for p in &profiles {
        p.validate()?;
    }
    let opts = cfg.run_options()?;
    let started_at = unix_now();

    // unique (problem, patch) jobs; `owner[p][c]` points at the job for that cell
    let mut jobs: Vec<(usize, usize)> = Vec::new();
    let mut owner = vec![vec![0usize; width]; patches.len()];
    for (p, cands) in patches.iter().enumerate() {
        let mut first: HashMap<&str, usize> = HashMap::new();
        for (c, patch) in cands.iter().enumerate() {
            owner[p][c] = *first.entry(patch.as_str()).or_insert_with(|| {
                jobs.push((p, c));
                jobs.len() - 1
            });
        }
    }

    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let results: Mutex<Vec<Option<Result<CandidateOutcome>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    thread::scope(|s| {
        for _ in 0..cfg.workers.min(jobs.len()) {
            s.spawn(|| {
                while !abort.load(Ordering::Relaxed) {
                    let j = next.fetch_add(1, Ordering::Relaxed);
                    let Some(&(p, c)) = jobs.get(j) else { break };
                    let r = run_candidate(&benchmark.problems[p], c, &patches[p][c], &profiles[p], &opts);
                    if r.is_err() {
                        abort.store(true, Ordering::Relaxed);
                    }
                    results.lock().expect("no panics while holding the lock")[j] = Some(r);
                }
            });
        }
    });
    let results = results.into_inner().expect("workers joined");
    let mut done = Vec::with_capacity(jobs.len());
    for r in results {
        match r {
            Some(Ok(o)) => done.push(o),
            Some(Err(e)) => return Err(e),
            None => return Err(Error::Environment("evaluation aborted".into())),
        }
    }

    let mut rows = Vec::with_capacity(patches.len());
    let mut outcomes = Vec::with_capacity(patches.len() * width);
    for (p, problem) in benchmark.problems.iter().enumerate() {
        let mut row = ProblemRow {
            id: problem.id.clone(),
            passed: Vec::with_capacity(width),
            statuses: Vec::with_capacity(width),
        };
        for c in 0..width {
            let mut o = done[owner[p][c]].clone();
            o.candidate_index = c;
            row.passed.push(o.status == Status::Pass);
            row.statuses.push(o.status);
            outcomes.push(o);
        }
        rows.push(row);
    }
    let matrix: Vec<Vec<bool>> = rows.iter().map(|r| r.passed.clone()).collect();
    let mut ks = cfg.ks.clone();
    ks.sort_unstable();
    ks.dedup();
    let top_k = ks
        .into_iter()
        .map(|k| {
            Ok(TopK {
                k,
                value: top_k(&matrix, k)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(EvalReport {
        benchmark: benchmark.name.clone(),
        rows,
        top_k,
        config: config_snapshot,
        skipped: benchmark.skipped.clone(),
        started_at,
        finished_at: unix_now(),
        outcomes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k(&vec![vec![false; 10]; 4], 10).unwrap(), 0.0);
        let mut m = vec![vec![false; 10]; 164];
        for row in m.iter_mut().take(114) {
            row[9] = true;
        }
        assert_eq!(top_k(&m, 10).unwrap(), 69.5);
        assert_eq!(top_k(&m, 9).unwrap(), 0.0);
        assert!(top_k(&m, 0).is_err());
        assert!(top_k(&m, 11).is_err());
        assert!(top_k(&[], 1).is_err());
    }

    #[test]
    fn rounding_half_away_from_zero() {
        // 1/8 = 12.5%, 1/16 = 6.25% → 6.3, 1/3 = 33.33 → 33.3, 2/3 → 66.7
        let one_of = |n: usize| {
            let mut m = vec![vec![false]; n];
            m[0][0] = true;
            m
        };
        assert_eq!(top_k(&one_of(8), 1).unwrap(), 12.5);
        assert_eq!(top_k(&one_of(16), 1).unwrap(), 6.3);
        assert_eq!(top_k(&one_of(3), 1).unwrap(), 33.3);
        assert_eq!(top_k(&[vec![true], vec![true], vec![false]], 1).unwrap(), 66.7);
    }

    #[test]
    fn missing_manifest_is_fatal() {
        let d = tempfile::tempdir().unwrap();
        assert!(load_benchmark(d.path(), false).is_err());
    }

    #[test]
    fn duplicate_ids_are_fatal() {
        let d = tempfile::tempdir().unwrap();
        let m = Manifest {
            name: "x".into(),
            toolchain_profile: "cpp".into(),
            problem_ids: vec!["a".into(), "a".into()],
        };
        fs::write(d.path().join("manifest.json"), serde_json::to_string(&m).unwrap()).unwrap();
        assert!(load_benchmark(d.path(), false).is_err());
    }

    #[test]
    fn malformed_problem_strictness() {
        let d = tempfile::tempdir().unwrap();
        let m = Manifest {
            name: "x".into(),
            toolchain_profile: "cpp".into(),
            problem_ids: vec!["gone".into()],
        };
        fs::write(d.path().join("manifest.json"), serde_json::to_string(&m).unwrap()).unwrap();
        let b = load_benchmark(d.path(), false).unwrap();
        assert!(b.problems.is_empty());
        assert_eq!(b.skipped.len(), 1);
        assert!(load_benchmark(d.path(), true).is_err());
    }
}
