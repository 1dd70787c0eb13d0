//! Repair datasets, the byte tokenizer and training-pair rendering.

pub mod synth;
pub mod teacher;

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenId;

pub use teacher::{
    acquire_all, acquire_guidance, GuidanceOutcome, HttpTeacher, MockTeacher, TeacherClient, TeacherConfig, TeacherKind,
};

pub const BOS: TokenId = 256;
pub const EOS: TokenId = 257;
pub const PAD: TokenId = 258;
pub const SEP: TokenId = 259;
pub const VOCAB_SIZE: usize = 260;

/// First line of every repair prompt.
pub const INSTRUCTION: &str = "Fix the following buggy program.";

/// One buggy/fixed program pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RepairExample {
    pub id: String,
    pub task_description: String,
    pub buggy_code: String,
    pub fixed_code: String,
    #[serde(deserialize_with = "nullable")]
    pub guidance: Option<String>,
    pub language_tag: String,
}

// present-but-null is allowed, absent is not
fn nullable<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<String>, D::Error> {
    Option::<String>::deserialize(d)
}

/// Which target a pair trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Objective {
    /// Repaired code only.
    Code = 1,
    /// Guidance plus repaired code.
    Guided = 2,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidancePosition {
    #[default]
    Before,
    After,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderOptions {
    pub include_description: bool,
    pub guidance_position: GuidancePosition,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            include_description: true,
            guidance_position: GuidancePosition::Before,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPair {
    pub input_tokens: Vec<TokenId>,
    pub target_tokens: Vec<TokenId>,
    /// Over `input ⊕ target`; true exactly on target positions.
    pub loss_mask: Vec<bool>,
    pub objective: Objective,
    pub guidance_token_count: usize,
}

impl RenderedPair {
    /// Builds a pair from raw parts; mask is derived.
    pub fn new(input_tokens: Vec<TokenId>, target_tokens: Vec<TokenId>, objective: Objective, n: usize) -> Self {
        let mut loss_mask = vec![false; input_tokens.len()];
        loss_mask.resize(input_tokens.len() + target_tokens.len(), true);
        Self {
            input_tokens,
            target_tokens,
            loss_mask,
            objective,
            guidance_token_count: n,
        }
    }

    pub fn sequence(&self) -> Vec<TokenId> {
        let mut s = self.input_tokens.clone();
        s.extend_from_slice(&self.target_tokens);
        s
    }

    pub fn len(&self) -> usize {
        self.input_tokens.len() + self.target_tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Next-token view: `(inputs, targets, mask)` each of length `len - 1`.
    pub fn shifted(&self) -> (Vec<TokenId>, Vec<usize>, Vec<bool>) {
        let seq = self.sequence();
        let n = seq.len().saturating_sub(1);
        let inputs = seq[..n].to_vec();
        let targets = seq[1..].iter().map(|&t| t as usize).collect();
        let mask = self.loss_mask[1..].to_vec();
        (inputs, targets, mask)
    }
}

pub fn encode_bytes(bytes: &[u8]) -> Vec<TokenId> {
    bytes.iter().map(|&b| TokenId::from(b)).collect()
}

pub fn encode(text: &str) -> Vec<TokenId> {
    encode_bytes(text.as_bytes())
}

/// Special tokens decode to nothing.
pub fn decode_bytes(ids: &[TokenId]) -> Vec<u8> {
    ids.iter().filter_map(|&id| u8::try_from(id).ok()).collect()
}

pub fn decode(ids: &[TokenId]) -> String {
    String::from_utf8_lossy(&decode_bytes(ids)).into_owned()
}

/// Wraps code in a markdown fence tagged with `lang`.
pub fn fence(code: &str, lang: &str) -> String {
    let mut s = format!("```{lang}\n{code}");
    if !code.ends_with('\n') {
        s.push('\n');
    }
    s.push_str("```\n");
    s
}

/// Prompt tokens: BOS, instruction, optional description, fenced program, SEP.
pub fn render_prompt(description: &str, buggy_code: &str, lang: &str, opts: &RenderOptions) -> Vec<TokenId> {
    let mut text = format!("{INSTRUCTION}\n");
    if opts.include_description {
        text.push_str(description);
        text.push('\n');
    }
    text.push_str(&fence(buggy_code, lang));
    let mut ids = vec![BOS];
    ids.extend(encode(&text));
    ids.push(SEP);
    ids
}

pub fn render_training_pair(ex: &RepairExample, objective: Objective, opts: &RenderOptions) -> Result<RenderedPair> {
    let input = render_prompt(&ex.task_description, &ex.buggy_code, &ex.language_tag, opts);
    let code = encode(&fence(&ex.fixed_code, &ex.language_tag));
    match objective {
        Objective::Code => {
            let mut target = code;
            target.push(EOS);
            Ok(RenderedPair::new(input, target, objective, 0))
        }
        Objective::Guided => {
            let guidance = ex
                .guidance
                .as_deref()
                .ok_or_else(|| Error::invalid(format!("example {} has no guidance for the guided objective", ex.id)))?;
            let g = encode(guidance);
            let n = g.len();
            let mut target = Vec::with_capacity(n + code.len() + 2);
            match opts.guidance_position {
                GuidancePosition::Before => {
                    target.extend(g);
                    target.push(SEP);
                    target.extend(code);
                }
                GuidancePosition::After => {
                    target.extend(code);
                    target.push(SEP);
                    target.extend(g);
                }
            }
            target.push(EOS);
            Ok(RenderedPair::new(input, target, objective, n))
        }
    }
}

/// Prompt asking a teacher model to explain a repair.
pub fn build_guidance_prompt(ex: &RepairExample) -> Result<String> {
    if ex.buggy_code.is_empty() {
        return Err(Error::invalid(format!("example {} has no buggy code", ex.id)));
    }
    if ex.fixed_code.is_empty() {
        return Err(Error::invalid(format!("example {} has no repaired code", ex.id)));
    }
    Ok(format!(
        "This is a programming task description along with a buggy code:\n\
         {}\n\
         {}\n\
         This is a repaired code:\n\
         {}\n\
         Please think step by step and tell me how to fix the buggy code.",
        ex.task_description, ex.buggy_code, ex.fixed_code
    ))
}

fn check_example(ex: &RepairExample) -> std::result::Result<(), String> {
    if ex.id.is_empty() {
        return Err("empty id".into());
    }
    if ex.buggy_code == ex.fixed_code {
        return Err(format!("example {} has identical buggy and fixed code", ex.id));
    }
    Ok(())
}

/// Reads a line-oriented JSON dataset. Blank lines are ignored.
pub fn load_dataset(path: &Path) -> Result<Vec<RepairExample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let ex: RepairExample = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        check_example(&ex).map_err(parse_err)?;
        if !seen.insert(ex.id.clone()) {
            return Err(parse_err(format!("duplicate id {:?}", ex.id)));
        }
        out.push(ex);
    }
    Ok(out)
}

pub fn dataset_to_string(examples: &[RepairExample]) -> Result<String> {
    let mut s = String::new();
    for ex in examples {
        s.push_str(&serde_json::to_string(ex)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn write_dataset(path: &Path, examples: &[RepairExample]) -> Result<()> {
    let body = dataset_to_string(examples)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
}
