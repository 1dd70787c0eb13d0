use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Result;
use log::{info, warn};

use morepair::dataprep::{acquire_all, load_dataset, synth, write_dataset};
use morepair::evalharness::{evaluate, load_benchmark, Benchmark, BenchmarkProblem};
use morepair::infer::{self, load_dump, problem_prompt, write_dump, CandidateRecord, SamplingConfig};
use morepair::model::{trainable_fraction, ModelWeights};
use morepair::train::{load_checkpoint, save_checkpoint, Trainer};
use morepair::Error;

use crate::config::{write_sidecar, RunConfig};
use crate::{EvalArgs, GenerateArgs, PrepareArgs, SynthArgs, TrainArgs};

fn require<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Error::Validation(format!("no {what} given (flag or paths.{what})")).into())
}

fn merge(slot: &mut Option<PathBuf>, flag: Option<PathBuf>) {
    if flag.is_some() {
        *slot = flag;
    }
}

pub fn prepare(mut cfg: RunConfig, a: PrepareArgs) -> Result<()> {
    merge(&mut cfg.paths.dataset, a.dataset);
    merge(&mut cfg.paths.output, a.output);
    let input = require(&cfg.paths.dataset, "dataset")?;
    let output = require(&cfg.paths.output, "output")?;

    let examples = load_dataset(input)?;
    let client = cfg.teacher.build()?;
    let outcome = acquire_all(&examples, client.as_ref(), &cfg.teacher);
    for (id, reason) in &outcome.failures {
        warn!("no guidance for {id}: {reason}");
    }
    if cfg.teacher.strict && !outcome.failures.is_empty() {
        return Err(Error::Teacher(format!(
            "{} of {} examples could not be guided",
            outcome.failures.len(),
            examples.len()
        ))
        .into());
    }
    write_dataset(output, &outcome.examples)?;
    write_sidecar(output, &cfg)?;
    println!(
        "{} examples, {} newly guided, {} failed -> {}",
        examples.len(),
        outcome.newly_guided,
        outcome.failures.len(),
        output.display()
    );
    Ok(())
}

pub fn train(mut cfg: RunConfig, a: TrainArgs) -> Result<()> {
    merge(&mut cfg.paths.dataset, a.dataset);
    merge(&mut cfg.paths.checkpoint, a.output);
    merge(&mut cfg.paths.resume, a.resume);
    merge(&mut cfg.paths.loss_log, a.loss_log);
    let dataset = require(&cfg.paths.dataset, "dataset")?;
    let output = require(&cfg.paths.checkpoint, "checkpoint")?;
    let data = load_dataset(dataset)?;

    let mut trainer = match &cfg.paths.resume {
        Some(path) => {
            let mut t = load_checkpoint(path, Some(&cfg.model))?;
            if t.cfg.train_embeddings != cfg.train.train_embeddings {
                return Err(Error::Validation("train.train_embeddings differs from the checkpoint".into()).into());
            }
            if t.render != cfg.render {
                warn!("render options differ from the checkpoint; using the run configuration");
            }
            t.cfg = cfg.train.clone();
            t.render = cfg.render.clone();
            info!("resuming from {} at step {}", path.display(), t.step_count());
            t
        }
        None => Trainer::new(
            ModelWeights::init(cfg.model.clone())?,
            cfg.train.clone(),
            cfg.render.clone(),
        )?,
    };
    info!(
        "{} examples, mode {:?}, trainable fraction {:.4}%",
        data.len(),
        cfg.train.mode,
        100.0 * trainable_fraction(&trainer.weights)
    );

    let mut log = match &cfg.paths.loss_log {
        Some(path) => {
            let append = cfg.paths.resume.is_some();
            let f = OpenOptions::new()
                .create(true)
                .write(true)
                .append(append)
                .truncate(!append)
                .open(path)
                .map_err(|e| Error::Io {
                    path: path.clone(),
                    source: e,
                })?;
            write_sidecar(path, &cfg)?;
            Some((path.clone(), f))
        }
        None => None,
    };

    let every = cfg.train.checkpoint_every;
    while trainer.step_count() < cfg.train.steps {
        let rec = trainer.step(&data)?;
        if let Some((path, f)) = &mut log {
            writeln!(f, "{}", rec.to_json(cfg.train.mode)).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
        }
        if rec.step % 10 == 0 || rec.step == cfg.train.steps {
            info!("step {} loss {:.6}", rec.step, rec.losses.combined);
        }
        if every > 0 && rec.step % every == 0 && rec.step < cfg.train.steps {
            save_checkpoint(&trainer, output)?;
        }
    }
    save_checkpoint(&trainer, output)?;
    write_sidecar(output, &cfg)?;
    println!("step {} -> {}", trainer.step_count(), output.display());
    Ok(())
}

/// Loads a checkpoint for inference, preferring its stored model and render
/// settings over the run configuration.
fn load_for_inference(path: &Path, cfg: &RunConfig) -> Result<Trainer> {
    let t = load_checkpoint(path, None)?;
    if t.weights.config != cfg.model {
        warn!("model settings differ from the checkpoint; using the checkpoint's");
    }
    if t.render != cfg.render {
        warn!("render options differ from the checkpoint; using the checkpoint's");
    }
    Ok(t)
}

fn candidates_for(t: &Trainer, problem: &BenchmarkProblem, sampling: &SamplingConfig) -> Result<Vec<CandidateRecord>> {
    let prompt = problem_prompt(problem, &t.render);
    if prompt.len() >= t.weights.config.max_seq_len {
        warn!(
            "prompt for {} has {} tokens, model context is {}; emitting empty candidates",
            problem.id,
            prompt.len(),
            t.weights.config.max_seq_len
        );
        return Ok((0..sampling.num_candidates)
            .map(|i| CandidateRecord {
                candidate_index: i,
                raw_text: String::new(),
                extracted_patch: String::new(),
            })
            .collect());
    }
    let results = infer::generate(&t.weights, &prompt, sampling)?;
    Ok(results.iter().map(CandidateRecord::from).collect())
}

fn generate_all(t: &Trainer, bench: &Benchmark, sampling: &SamplingConfig) -> Result<Vec<Vec<CandidateRecord>>> {
    sampling.validate()?;
    bench
        .problems
        .iter()
        .map(|p| {
            info!("generating {} candidates for {}", sampling.num_candidates, p.id);
            candidates_for(t, p, sampling)
        })
        .collect()
}

pub fn generate(mut cfg: RunConfig, a: GenerateArgs) -> Result<()> {
    merge(&mut cfg.paths.checkpoint, a.checkpoint);
    merge(&mut cfg.paths.benchmark, a.benchmark);
    merge(&mut cfg.paths.dump_dir, a.dump_dir);
    let ckpt = require(&cfg.paths.checkpoint, "checkpoint")?;
    let bench_dir = require(&cfg.paths.benchmark, "benchmark")?;
    let dump_dir = require(&cfg.paths.dump_dir, "dump_dir")?;

    let trainer = load_for_inference(ckpt, &cfg)?;
    let bench = load_benchmark(bench_dir, cfg.harness.strict)?;
    let all = generate_all(&trainer, &bench, &cfg.sampling)?;
    fs::create_dir_all(dump_dir).map_err(|e| Error::Io {
        path: dump_dir.to_path_buf(),
        source: e,
    })?;
    for (p, records) in bench.problems.iter().zip(&all) {
        write_dump(dump_dir, &p.id, records)?;
    }
    write_sidecar(dump_dir, &cfg)?;
    println!("{} problems -> {}", bench.problems.len(), dump_dir.display());
    Ok(())
}

pub fn eval(mut cfg: RunConfig, a: EvalArgs) -> Result<()> {
    merge(&mut cfg.paths.benchmark, a.benchmark);
    merge(&mut cfg.paths.dump_dir, a.dump_dir);
    merge(&mut cfg.paths.checkpoint, a.checkpoint);
    merge(&mut cfg.paths.report, a.report);
    let bench_dir = require(&cfg.paths.benchmark, "benchmark")?;
    let bench = load_benchmark(bench_dir, cfg.harness.strict)?;

    let records: Vec<Vec<CandidateRecord>> = match (&cfg.paths.dump_dir, &cfg.paths.checkpoint) {
        (Some(dir), _) => bench
            .problems
            .iter()
            .map(|p| load_dump(dir, &p.id))
            .collect::<Result<_, _>>()?,
        (None, Some(ckpt)) => generate_all(&load_for_inference(ckpt, &cfg)?, &bench, &cfg.sampling)?,
        (None, None) => {
            return Err(Error::Validation("eval needs --dump-dir or --checkpoint".into()).into());
        }
    };
    let patches: Vec<Vec<String>> = records
        .into_iter()
        .map(|rs| rs.into_iter().map(|r| r.extracted_patch).collect())
        .collect();

    let snapshot = serde_json::to_value(&cfg)?;
    let report = evaluate(&bench, &patches, &cfg.harness, snapshot)?;
    if let Some(path) = &cfg.paths.report {
        report.write(path)?;
        write_sidecar(path, &cfg)?;
    }
    print!("{}", report.table());
    Ok(())
}

pub fn synth(cfg: RunConfig, a: SynthArgs) -> Result<()> {
    let problems = synth::generate(a.count, cfg.train.seed)?;
    let examples: Vec<_> = problems.iter().map(|p| p.example.clone()).collect();
    if let Some(parent) = a.dataset.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    write_dataset(&a.dataset, &examples)?;
    synth::write_benchmark(&a.benchmark, &a.name, &problems)?;
    println!(
        "{} problems -> {} and {}",
        problems.len(),
        a.dataset.display(),
        a.benchmark.display()
    );
    Ok(())
}
