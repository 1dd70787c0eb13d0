//! Guidance acquisition from a teacher model.

use std::collections::HashSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use log::warn;
use serde::{Deserialize, Serialize};

use super::{build_guidance_prompt, RepairExample};
use crate::error::{Error, Result};

/// Environment variable holding the bearer key for the HTTP teacher.
pub const API_KEY_VAR: &str = "MOREPAIR_TEACHER_KEY";

pub trait TeacherClient: Send + Sync {
    /// Returns guidance text for `ex`, given the rendered teacher prompt.
    fn guidance(&self, ex: &RepairExample, prompt: &str) -> Result<String>;
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherKind {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub kind: TeacherKind,
    pub url: Option<String>,
    pub model_name: String,
    pub temperature: f64,
    pub max_retries: u32,
    pub retry_delay_ms: u64,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
    /// Ids the mock teacher refuses, for exercising failure handling.
    pub fail_ids: Vec<String>,
    /// Treat any per-example failure as fatal for the whole pass.
    pub strict: bool,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            kind: TeacherKind::Mock,
            url: None,
            model_name: "gpt-4".into(),
            temperature: 0.0,
            max_retries: 3,
            retry_delay_ms: 500,
            timeout_secs: 120,
            max_in_flight: 4,
            fail_ids: Vec::new(),
            strict: false,
        }
    }
}

impl TeacherConfig {
    pub fn build(&self) -> Result<Box<dyn TeacherClient>> {
        if self.max_in_flight == 0 {
            return Err(Error::invalid("teacher.max_in_flight must be positive"));
        }
        match self.kind {
            TeacherKind::Mock => Ok(Box::new(MockTeacher {
                fail_ids: self.fail_ids.iter().cloned().collect(),
            })),
            TeacherKind::Http => {
                let url = self
                    .url
                    .clone()
                    .ok_or_else(|| Error::invalid("teacher.url is required for the http teacher"))?;
                Ok(Box::new(HttpTeacher::new(
                    url,
                    self.model_name.clone(),
                    self.temperature,
                    Duration::from_secs(self.timeout_secs),
                )?))
            }
        }
    }
}

/// Offline teacher that describes the line diff between buggy and fixed code.
#[derive(Debug, Clone, Default)]
pub struct MockTeacher {
    pub fail_ids: HashSet<String>,
}

impl TeacherClient for MockTeacher {
    fn guidance(&self, ex: &RepairExample, _prompt: &str) -> Result<String> {
        if self.fail_ids.contains(&ex.id) {
            return Err(Error::Teacher(format!("mock teacher refused {}", ex.id)));
        }
        Ok(describe_diff(&ex.buggy_code, &ex.fixed_code))
    }
}

enum Edit<'a> {
    Keep,
    Remove(&'a str),
    Insert(&'a str),
}

fn line_diff<'a>(a: &[&'a str], b: &[&'a str]) -> Vec<Edit<'a>> {
    let (n, m) = (a.len(), b.len());
    let mut lcs = vec![vec![0usize; m + 1]; n + 1];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            lcs[i][j] = if a[i] == b[j] {
                lcs[i + 1][j + 1] + 1
            } else {
                lcs[i + 1][j].max(lcs[i][j + 1])
            };
        }
    }
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::new();
    while i < n || j < m {
        if i < n && j < m && a[i] == b[j] {
            out.push(Edit::Keep);
            i += 1;
            j += 1;
        } else if j < m && (i == n || lcs[i][j + 1] >= lcs[i + 1][j]) {
            out.push(Edit::Insert(b[j]));
            j += 1;
        } else {
            out.push(Edit::Remove(a[i]));
            i += 1;
        }
    }
    out
}

/// Smallest whitespace-delimited spans that differ between two lines.
fn changed_span(old: &str, new: &str) -> (String, String) {
    let a: Vec<char> = old.chars().collect();
    let b: Vec<char> = new.chars().collect();
    let mut pre = a.iter().zip(&b).take_while(|(x, y)| x == y).count();
    let max_suf = a.len().min(b.len()) - pre;
    let mut suf = a
        .iter()
        .rev()
        .zip(b.iter().rev())
        .take(max_suf)
        .take_while(|(x, y)| x == y)
        .count();
    while pre > 0 && !a[pre - 1].is_whitespace() {
        pre -= 1;
    }
    while suf > 0 && !a[a.len() - suf].is_whitespace() {
        suf -= 1;
    }
    let pick = |v: &[char]| v[pre..v.len() - suf].iter().collect::<String>().trim().to_string();
    (pick(&a), pick(&b))
}

/// Deterministic step list derived from a line diff.
pub fn describe_diff(buggy: &str, fixed: &str) -> String {
    let a: Vec<&str> = buggy.lines().collect();
    let b: Vec<&str> = fixed.lines().collect();
    let edits = line_diff(&a, &b);
    let mut steps = Vec::new();
    let mut line = 0usize;
    let mut k = 0;
    while k < edits.len() {
        if let Edit::Keep = edits[k] {
            line += 1;
            k += 1;
            continue;
        }
        let mut removed = Vec::new();
        let mut inserted = Vec::new();
        while k < edits.len() {
            match edits[k] {
                Edit::Remove(s) => removed.push(s),
                Edit::Insert(s) => inserted.push(s),
                Edit::Keep => break,
            }
            k += 1;
        }
        let paired = removed.len().min(inserted.len());
        for (off, (old, new)) in removed.iter().zip(&inserted).enumerate() {
            let (o, n) = changed_span(old, new);
            steps.push(format!("Line {}: replace `{o}` with `{n}`.", line + off + 1));
        }
        for (off, old) in removed.iter().enumerate().skip(paired) {
            steps.push(format!("Line {}: remove `{}`.", line + off + 1, old.trim()));
        }
        for new in inserted.iter().skip(paired) {
            steps.push(format!("After line {}: insert `{}`.", line + removed.len(), new.trim()));
        }
        line += removed.len();
    }
    if steps.is_empty() {
        return "The buggy code already matches the repaired code.".into();
    }
    let mut out = format!("The buggy code needs {} change(s).", steps.len());
    for (i, s) in steps.iter().enumerate() {
        out.push_str(&format!("\n{}. {s}", i + 1));
    }
    out
}

/// Teacher reached over HTTP: POST `{prompt, model_name, temperature}`,
/// reply `{text}`.
pub struct HttpTeacher {
    client: reqwest::blocking::Client,
    url: String,
    model_name: String,
    temperature: f64,
    api_key: Option<String>,
}

#[derive(Serialize)]
struct TeacherRequest<'a> {
    prompt: &'a str,
    model_name: &'a str,
    temperature: f64,
}

#[derive(Deserialize)]
struct TeacherReply {
    text: String,
}

impl HttpTeacher {
    pub fn new(url: String, model_name: String, temperature: f64, timeout: Duration) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Environment(format!("cannot build HTTP client: {e}")))?;
        Ok(Self {
            client,
            url,
            model_name,
            temperature,
            api_key: std::env::var(API_KEY_VAR).ok(),
        })
    }
}

impl TeacherClient for HttpTeacher {
    fn guidance(&self, _ex: &RepairExample, prompt: &str) -> Result<String> {
        let mut req = self.client.post(&self.url).json(&TeacherRequest {
            prompt,
            model_name: &self.model_name,
            temperature: self.temperature,
        });
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| Error::Teacher(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(Error::Teacher(format!("{} returned {status}", self.url)));
        }
        let reply: TeacherReply = resp.json().map_err(|e| Error::Teacher(format!("bad reply: {e}")))?;
        Ok(reply.text)
    }
}

/// Fills in guidance for one example, retrying transport failures.
/// Examples that already carry guidance are returned unchanged.
pub fn acquire_guidance(
    ex: &RepairExample,
    client: &dyn TeacherClient,
    max_retries: u32,
    retry_delay: Duration,
) -> Result<RepairExample> {
    if ex.guidance.is_some() {
        return Ok(ex.clone());
    }
    let prompt = build_guidance_prompt(ex)?;
    let mut delay = retry_delay;
    let mut attempt = 0;
    loop {
        match client.guidance(ex, &prompt) {
            Ok(text) => {
                let mut out = ex.clone();
                out.guidance = Some(text);
                return Ok(out);
            }
            Err(e) if attempt < max_retries => {
                warn!("teacher attempt {} for {} failed: {e}", attempt + 1, ex.id);
                attempt += 1;
                thread::sleep(delay);
                delay *= 2;
            }
            Err(e) => return Err(e),
        }
    }
}

#[derive(Debug)]
pub struct GuidanceOutcome {
    /// Same order as the input; failed examples are kept without guidance.
    pub examples: Vec<RepairExample>,
    pub failures: Vec<(String, String)>,
    pub newly_guided: usize,
}

/// Runs [`acquire_guidance`] over a dataset with at most `cfg.max_in_flight`
/// requests outstanding. Per-example failures are collected, not raised.
pub fn acquire_all(examples: &[RepairExample], client: &dyn TeacherClient, cfg: &TeacherConfig) -> GuidanceOutcome {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<RepairExample>>>> = Mutex::new((0..examples.len()).map(|_| None).collect());
    let delay = Duration::from_millis(cfg.retry_delay_ms);
    let workers = cfg.max_in_flight.clamp(1, examples.len().max(1));
    thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(ex) = examples.get(i) else { break };
                let r = acquire_guidance(ex, client, cfg.max_retries, delay);
                slots.lock().expect("no panics while holding the lock")[i] = Some(r);
            });
        }
    });
    let mut out = GuidanceOutcome {
        examples: Vec::with_capacity(examples.len()),
        failures: Vec::new(),
        newly_guided: 0,
    };
    let slots = slots.into_inner().expect("workers joined");
    for (ex, slot) in examples.iter().zip(slots) {
        match slot.expect("every index visited") {
            Ok(g) => {
                if ex.guidance.is_none() {
                    out.newly_guided += 1;
                }
                out.examples.push(g);
            }
            Err(e) => {
                out.failures.push((ex.id.clone(), e.to_string()));
                out.examples.push(ex.clone());
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(id: &str, buggy: &str, fixed: &str) -> RepairExample {
        RepairExample {
            id: id.into(),
            task_description: "Return a plus 3.".into(),
            buggy_code: buggy.into(),
            fixed_code: fixed.into(),
            guidance: None,
            language_tag: "cpp".into(),
        }
    }

    #[test]
    fn mock_fixture_text() {
        let e = ex(
            "a",
            "int solve(int a) {\n    return a - 3;\n}\n",
            "int solve(int a) {\n    return a + 3;\n}\n",
        );
        let g = MockTeacher::default().guidance(&e, "").unwrap();
        assert_eq!(g, "The buggy code needs 1 change(s).\n1. Line 2: replace `-` with `+`.");
    }

    #[test]
    fn span_expands_to_word() {
        assert_eq!(
            changed_span("    for (int i = 1; i < n; i++)", "    for (int i = 1; i <= n; i++)"),
            ("<".into(), "<=".into())
        );
        assert_eq!(changed_span("int r = 0;", "int r = 1;"), ("0;".into(), "1;".into()));
    }

    #[test]
    fn insert_and_remove_lines() {
        let g = describe_diff("a\nb\nc", "a\nc\nd");
        assert_eq!(
            g,
            "The buggy code needs 2 change(s).\n1. Line 2: remove `b`.\n2. After line 3: insert `d`."
        );
    }

    #[test]
    fn existing_guidance_untouched() {
        let mut e = ex("a", "x", "y");
        e.guidance = Some("keep".into());
        let t = MockTeacher {
            fail_ids: ["a".to_string()].into(),
        };
        assert_eq!(acquire_guidance(&e, &t, 0, Duration::ZERO).unwrap(), e);
    }

    struct Flaky(AtomicUsize);

    impl TeacherClient for Flaky {
        fn guidance(&self, _: &RepairExample, _: &str) -> Result<String> {
            if self.0.fetch_add(1, Ordering::SeqCst) < 2 {
                Err(Error::Teacher("down".into()))
            } else {
                Ok("ok".into())
            }
        }
    }

    #[test]
    fn retries_then_succeeds() {
        let t = Flaky(AtomicUsize::new(0));
        let e = ex("a", "x", "y");
        assert!(acquire_guidance(&e, &t, 1, Duration::ZERO).is_err());
        let got = acquire_guidance(&e, &t, 1, Duration::ZERO).unwrap();
        assert_eq!(got.guidance.as_deref(), Some("ok"));
    }

    #[test]
    fn batch_continues_past_failure() {
        let data = vec![ex("a", "x", "y"), ex("b", "x", "z"), ex("c", "p", "q")];
        let cfg = TeacherConfig {
            fail_ids: vec!["b".into()],
            retry_delay_ms: 0,
            ..Default::default()
        };
        let client = cfg.build().unwrap();
        let out = acquire_all(&data, client.as_ref(), &cfg);
        assert_eq!(out.failures.len(), 1);
        assert_eq!(out.failures[0].0, "b");
        assert_eq!(out.newly_guided, 2);
        assert!(out.examples[1].guidance.is_none());
        assert_eq!(
            out.examples.iter().map(|e| e.id.as_str()).collect::<Vec<_>>(),
            ["a", "b", "c"]
        );
    }
}
