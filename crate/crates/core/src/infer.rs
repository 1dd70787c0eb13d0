//! Candidate generation and patch extraction.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::softmax_row;
use crate::dataprep::{decode, render_prompt, RenderOptions, EOS};
use crate::error::{Error, Result};
use crate::evalharness::BenchmarkProblem;
use crate::model::{ModelWeights, TokenId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub do_sample: bool,
    pub max_new_tokens: usize,
    pub seed: u64,
    pub num_candidates: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_p: 1.0,
            do_sample: true,
            max_new_tokens: 256,
            seed: 0,
            num_candidates: 10,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::invalid(format!("top_p must be in (0, 1], got {}", self.top_p)));
        }
        if self.num_candidates == 0 {
            return Err(Error::invalid("num_candidates must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Eos,
    Length,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub candidate_index: usize,
    pub raw_text: String,
    pub extracted_patch: String,
    pub tokens_generated: usize,
    pub finish_reason: FinishReason,
}

fn argmax(logits: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Tokens surviving temperature and nucleus filtering, with renormalized
/// probabilities, most probable first (ties by ascending id).
pub fn nucleus_distribution(logits: &[f64], temperature: f64, top_p: f64) -> Result<Vec<(TokenId, f64)>> {
    if logits.is_empty() || logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("logits must be nonempty and finite"));
    }
    let scaled: Vec<f64> = logits.iter().map(|v| v / temperature).collect();
    let probs = softmax_row(&scaled);
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for i in order {
        kept.push(i);
        mass += probs[i];
        if mass >= top_p {
            break;
        }
    }
    Ok(kept.into_iter().map(|i| (i as TokenId, probs[i] / mass)).collect())
}

pub fn sample_next(logits: &[f64], cfg: &SamplingConfig, rng: &mut ChaCha8Rng) -> Result<TokenId> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite logits"));
    }
    if !cfg.do_sample {
        return Ok(argmax(logits));
    }
    let dist = nucleus_distribution(logits, cfg.temperature, cfg.top_p)?;
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for &(id, p) in &dist {
        acc += p;
        if u < acc {
            return Ok(id);
        }
    }
    Ok(dist.last().expect("nucleus keeps the top token").0)
}

/// Contents of the first fenced block, the remainder after an unclosed
/// fence, or the trimmed text when there is no fence.
pub fn extract_patch(raw: &str) -> String {
    let Some(open) = raw.find("```") else {
        return raw.trim().to_string();
    };
    let after = &raw[open + 3..];
    let body = match after.find('\n') {
        Some(nl) => &after[nl + 1..],
        None => "",
    };
    match body.find("```") {
        Some(close) => body[..close].to_string(),
        None => body.to_string(),
    }
}

/// Draws `cfg.num_candidates` completions of `prompt`. Candidate `i` uses
/// the seed `cfg.seed ^ i`; greedy decoding runs once and is repeated.
pub fn generate(weights: &ModelWeights, prompt: &[TokenId], cfg: &SamplingConfig) -> Result<Vec<GenerationResult>> {
    cfg.validate()?;
    let max_len = weights.config.max_seq_len;
    if prompt.is_empty() {
        return Err(Error::invalid("empty prompt"));
    }
    if prompt.len() > max_len {
        return Err(Error::invalid(format!(
            "prompt of {} tokens exceeds max_seq_len {max_len}",
            prompt.len()
        )));
    }
    let model = weights.inference()?;
    let one = |index: usize| -> Result<GenerationResult> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ index as u64);
        let mut session = model.session();
        let mut logits = session.prefill(prompt)?;
        let mut out = Vec::new();
        let mut finish = FinishReason::Length;
        while out.len() < cfg.max_new_tokens {
            let tok = sample_next(&logits, cfg, &mut rng)?;
            if tok == EOS {
                finish = FinishReason::Eos;
                break;
            }
            out.push(tok);
            if session.len() >= max_len {
                break;
            }
            logits = session.step(tok)?;
        }
        let raw_text = decode(&out);
        Ok(GenerationResult {
            candidate_index: index,
            extracted_patch: extract_patch(&raw_text),
            raw_text,
            tokens_generated: out.len(),
            finish_reason: finish,
        })
    };
    if cfg.do_sample {
        (0..cfg.num_candidates).map(one).collect()
    } else {
        let first = one(0)?;
        Ok((0..cfg.num_candidates)
            .map(|i| GenerationResult {
                candidate_index: i,
                ..first.clone()
            })
            .collect())
    }
}

/// Repair prompt for a benchmark problem, built like a training prompt.
pub fn problem_prompt(problem: &BenchmarkProblem, opts: &RenderOptions) -> Vec<TokenId> {
    render_prompt(
        &problem.task_description,
        &problem.buggy_source,
        &problem.language_tag,
        opts,
    )
}

/// One line of a candidate dump file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateRecord {
    pub candidate_index: usize,
    pub raw_text: String,
    pub extracted_patch: String,
}

impl From<&GenerationResult> for CandidateRecord {
    fn from(g: &GenerationResult) -> Self {
        Self {
            candidate_index: g.candidate_index,
            raw_text: g.raw_text.clone(),
            extracted_patch: g.extracted_patch.clone(),
        }
    }
}

pub fn dump_path(dir: &Path, problem_id: &str) -> PathBuf {
    dir.join(format!("{problem_id}.jsonl"))
}

pub fn write_dump(dir: &Path, problem_id: &str, records: &[CandidateRecord]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut body = String::new();
    for r in records {
        body.push_str(&serde_json::to_string(r)?);
        body.push('\n');
    }
    let path = dump_path(dir, problem_id);
    fs::write(&path, body).map_err(|e| Error::io(&path, e))
}

/// Reads one problem's candidates, ordered by `candidate_index`.
pub fn load_dump(dir: &Path, problem_id: &str) -> Result<Vec<CandidateRecord>> {
    let path = dump_path(dir, problem_id);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out: Vec<CandidateRecord> = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        out.push(serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.clone(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    out.sort_by_key(|r| r.candidate_index);
    if out.iter().enumerate().any(|(i, r)| r.candidate_index != i) {
        return Err(Error::invalid(format!(
            "{}: candidate indices must be 0..{}",
            path.display(),
            out.len()
        )));
    }
    Ok(out)
}
