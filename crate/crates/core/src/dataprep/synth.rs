//! Synthetic repair corpus: tiny C++ integer functions with one injected fault,
//! plus a matching benchmark directory whose harness checks each function.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::RepairExample;
use crate::error::{Error, Result};
use crate::evalharness::{Manifest, ProblemMeta, BUILTIN_CPP_PROFILE};

type Eval = fn(i64, i64, i64) -> i64;

struct Template {
    name: &'static str,
    arity: usize,
    description: &'static str,
    fixed: &'static str,
    buggy: &'static str,
    eval_fixed: Eval,
    eval_buggy: Eval,
    /// Inputs are restricted to `0..=8` for loop-based bodies.
    nonneg: bool,
}

const TEMPLATES: [Template; 16] = [
    Template {
        name: "add_k",
        arity: 1,
        description: "Return a plus K.",
        fixed: "    return a + K;",
        buggy: "    return a - K;",
        eval_fixed: |k, a, _| a + k,
        eval_buggy: |k, a, _| a - k,
        nonneg: false,
    },
    Template {
        name: "mul_k",
        arity: 1,
        description: "Return a times K.",
        fixed: "    return a * K;",
        buggy: "    return a + K;",
        eval_fixed: |k, a, _| a * k,
        eval_buggy: |k, a, _| a + k,
        nonneg: false,
    },
    Template {
        name: "max2",
        arity: 2,
        description: "Return the larger of a and b.",
        fixed: "    return a > b ? a : b;",
        buggy: "    return a < b ? a : b;",
        eval_fixed: |_, a, b| a.max(b),
        eval_buggy: |_, a, b| a.min(b),
        nonneg: false,
    },
    Template {
        name: "min2",
        arity: 2,
        description: "Return the smaller of a and b.",
        fixed: "    return a < b ? a : b;",
        buggy: "    return a > b ? a : b;",
        eval_fixed: |_, a, b| a.min(b),
        eval_buggy: |_, a, b| a.max(b),
        nonneg: false,
    },
    Template {
        name: "is_even",
        arity: 1,
        description: "Return 1 if a is even, else 0.",
        fixed: "    return a % 2 == 0;",
        buggy: "    return a % 2 == 1;",
        eval_fixed: |_, a, _| i64::from(a % 2 == 0),
        eval_buggy: |_, a, _| i64::from(a % 2 == 1),
        nonneg: false,
    },
    Template {
        name: "square",
        arity: 1,
        description: "Return a squared.",
        fixed: "    return a * a;",
        buggy: "    return a + a;",
        eval_fixed: |_, a, _| a * a,
        eval_buggy: |_, a, _| a + a,
        nonneg: false,
    },
    Template {
        name: "abs",
        arity: 1,
        description: "Return the absolute value of a.",
        fixed: "    return a < 0 ? -a : a;",
        buggy: "    return a > 0 ? -a : a;",
        eval_fixed: |_, a, _| a.abs(),
        eval_buggy: |_, a, _| if a > 0 { -a } else { a },
        nonneg: false,
    },
    Template {
        name: "sum_to",
        arity: 1,
        description: "Return 1 + 2 + ... + a.",
        fixed: "    int s = 0;\n    for (int i = 1; i <= a; i++) s += i;\n    return s;",
        buggy: "    int s = 0;\n    for (int i = 1; i < a; i++) s += i;\n    return s;",
        eval_fixed: |_, a, _| (1..=a).sum(),
        eval_buggy: |_, a, _| (1..a).sum(),
        nonneg: true,
    },
    Template {
        name: "sub",
        arity: 2,
        description: "Return a minus b.",
        fixed: "    return a - b;",
        buggy: "    return b - a;",
        eval_fixed: |_, a, b| a - b,
        eval_buggy: |_, a, b| b - a,
        nonneg: false,
    },
    Template {
        name: "clamp_k",
        arity: 1,
        description: "Return a, but at most K.",
        fixed: "    return a > K ? K : a;",
        buggy: "    return a < K ? K : a;",
        eval_fixed: |k, a, _| a.min(k),
        eval_buggy: |k, a, _| a.max(k),
        nonneg: false,
    },
    Template {
        name: "mod_k",
        arity: 1,
        description: "Return a modulo K.",
        fixed: "    return a % K;",
        buggy: "    return a / K;",
        eval_fixed: |k, a, _| a % k,
        eval_buggy: |k, a, _| a / k,
        nonneg: false,
    },
    Template {
        name: "diff_k",
        arity: 1,
        description: "Return a minus K.",
        fixed: "    return a - K;",
        buggy: "    return K - a;",
        eval_fixed: |k, a, _| a - k,
        eval_buggy: |k, a, _| k - a,
        nonneg: false,
    },
    Template {
        name: "avg",
        arity: 2,
        description: "Return the average of a and b, rounded toward zero.",
        fixed: "    return (a + b) / 2;",
        buggy: "    return a + b / 2;",
        eval_fixed: |_, a, b| (a + b) / 2,
        eval_buggy: |_, a, b| a + b / 2,
        nonneg: false,
    },
    Template {
        name: "is_pos",
        arity: 1,
        description: "Return 1 if a is positive, else 0.",
        fixed: "    return a > 0;",
        buggy: "    return a >= 0;",
        eval_fixed: |_, a, _| i64::from(a > 0),
        eval_buggy: |_, a, _| i64::from(a >= 0),
        nonneg: false,
    },
    Template {
        name: "fact",
        arity: 1,
        description: "Return a factorial.",
        fixed: "    int r = 1;\n    for (int i = 2; i <= a; i++) r *= i;\n    return r;",
        buggy: "    int r = 0;\n    for (int i = 2; i <= a; i++) r *= i;\n    return r;",
        eval_fixed: |_, a, _| (2..=a).product(),
        eval_buggy: |_, _, _| 0,
        nonneg: true,
    },
    Template {
        name: "count_div_k",
        arity: 1,
        description: "Count the numbers from 1 to a divisible by K.",
        fixed: "    int c = 0;\n    for (int i = 1; i <= a; i++) if (i % K == 0) c++;\n    return c;",
        buggy: "    int c = 0;\n    for (int i = 1; i <= a; i++) if (i % K != 0) c++;\n    return c;",
        eval_fixed: |k, a, _| (1..=a).filter(|i| i % k == 0).count() as i64,
        eval_buggy: |k, a, _| (1..=a).filter(|i| i % k != 0).count() as i64,
        nonneg: true,
    },
];

const SIGNED_INPUTS: [i64; 8] = [-5, -1, 0, 1, 2, 3, 7, 10];
const NONNEG_INPUTS: [i64; 7] = [0, 1, 2, 3, 5, 6, 8];
const PAIRS: [(i64, i64); 6] = [(1, 2), (5, 3), (-4, 7), (0, 0), (9, -2), (6, 6)];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TestCase {
    pub a: i64,
    pub b: i64,
    pub want: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthProblem {
    pub example: RepairExample,
    pub arity: usize,
    pub cases: Vec<TestCase>,
}

fn function_source(arity: usize, body: &str, k: i64) -> String {
    let params = if arity == 1 { "int a" } else { "int a, int b" };
    format!("int solve({params}) {{\n{}\n}}\n", body.replace('K', &k.to_string()))
}

/// Generates `count` problems, cycling through the templates with a
/// seeded constant per problem.
pub fn generate(count: usize, seed: u64) -> Result<Vec<SynthProblem>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let t = &TEMPLATES[i % TEMPLATES.len()];
        let k: i64 = rng.gen_range(2..=9);
        let inputs: Vec<(i64, i64)> = match (t.arity, t.nonneg) {
            (2, _) => PAIRS.to_vec(),
            (_, true) => NONNEG_INPUTS.iter().map(|&a| (a, 0)).collect(),
            _ => SIGNED_INPUTS.iter().map(|&a| (a, 0)).collect(),
        };
        let cases: Vec<TestCase> = inputs
            .iter()
            .map(|&(a, b)| TestCase {
                a,
                b,
                want: (t.eval_fixed)(k, a, b),
            })
            .collect();
        if inputs
            .iter()
            .all(|&(a, b)| (t.eval_buggy)(k, a, b) == (t.eval_fixed)(k, a, b))
        {
            return Err(Error::invalid(format!("tests for {} do not detect its fault", t.name)));
        }
        out.push(SynthProblem {
            example: RepairExample {
                id: format!("synth-{i:03}-{}", t.name),
                task_description: t.description.replace('K', &k.to_string()),
                buggy_code: function_source(t.arity, t.buggy, k),
                fixed_code: function_source(t.arity, t.fixed, k),
                guidance: None,
                language_tag: "cpp".into(),
            },
            arity: t.arity,
            cases,
        });
    }
    Ok(out)
}

/// Harness that calls `solve` on every case and exits nonzero at the first mismatch.
pub fn harness_source(p: &SynthProblem) -> String {
    let mut s = String::from(
        "#include <cstdio>\n\nint main() {\n    struct Case { int a; int b; int want; };\n    const Case cases[] = {\n",
    );
    for c in &p.cases {
        s.push_str(&format!("        {{{}, {}, {}}},\n", c.a, c.b, c.want));
    }
    let call = if p.arity == 1 { "solve(c.a)" } else { "solve(c.a, c.b)" };
    s.push_str(&format!(
        "    }};\n    int n = 0;\n    for (const Case &c : cases) {{\n        int got = {call};\n        if (got != c.want) {{\n            std::printf(\"case %d failed: got %d, want %d\\n\", n, got, c.want);\n            return 1;\n        }}\n        n++;\n    }}\n    std::printf(\"%d cases passed\\n\", n);\n    return 0;\n}}\n"
    ));
    s
}

fn write(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Writes problems as a benchmark directory under `dir`.
pub fn write_benchmark(dir: &Path, name: &str, problems: &[SynthProblem]) -> Result<()> {
    let manifest = Manifest {
        name: name.to_string(),
        toolchain_profile: BUILTIN_CPP_PROFILE.to_string(),
        problem_ids: problems.iter().map(|p| p.example.id.clone()).collect(),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join("manifest.json"), &serde_json::to_string_pretty(&manifest)?)?;
    for p in problems {
        let pdir = dir.join("problems").join(&p.example.id);
        let tests = pdir.join("tests");
        fs::create_dir_all(&tests).map_err(|e| Error::io(&tests, e))?;
        write(&pdir.join("buggy.cpp"), &p.example.buggy_code)?;
        write(&tests.join("test_main.cpp"), &harness_source(p))?;
        let meta = ProblemMeta {
            source_filename: "solution.cpp".into(),
            test_count: p.cases.len(),
            toolchain_profile: None,
            task_description: p.example.task_description.clone(),
            language_tag: p.example.language_tag.clone(),
        };
        write(&pdir.join("meta.json"), &serde_json::to_string_pretty(&meta)?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_template_fault_is_caught() {
        let ps = generate(32, 1).unwrap();
        assert_eq!(ps.len(), 32);
        for p in &ps {
            assert_ne!(p.example.buggy_code, p.example.fixed_code);
            assert!(!p.cases.is_empty());
        }
    }

    #[test]
    fn deterministic_and_seeded() {
        assert_eq!(generate(16, 7).unwrap(), generate(16, 7).unwrap());
        let a: Vec<_> = generate(16, 7).unwrap().into_iter().map(|p| p.example).collect();
        let b: Vec<_> = generate(16, 8).unwrap().into_iter().map(|p| p.example).collect();
        assert_ne!(a, b);
    }

    #[test]
    fn source_shape() {
        let p = &generate(1, 0).unwrap()[0];
        assert!(p.example.fixed_code.starts_with("int solve(int a) {\n    return a + "));
        assert!(harness_source(p).contains("solve(c.a)"));
    }
}
