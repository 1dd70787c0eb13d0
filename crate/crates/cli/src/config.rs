use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use morepair::dataprep::{RenderOptions, TeacherConfig};
use morepair::evalharness::HarnessConfig;
use morepair::infer::SamplingConfig;
use morepair::model::ModelConfig;
use morepair::train::TrainConfig;

/// Input and output locations. Subcommand flags take precedence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub dataset: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub loss_log: Option<PathBuf>,
    pub benchmark: Option<PathBuf>,
    pub dump_dir: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

/// Everything a run can be configured with, one section per component.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub render: RenderOptions,
    pub sampling: SamplingConfig,
    pub teacher: TeacherConfig,
    pub harness: HarnessConfig,
    pub paths: PathsConfig,
}

/// Parses the right-hand side of `--set key=value` as a TOML value, falling
/// back to a bare string.
fn parse_value(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match doc.parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

fn set_dotted(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("malformed override key {key:?}");
    }
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => bail!("override {key:?}: {p:?} is not a section"),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    /// File values, then `--set` overrides, then `--seed`.
    pub fn load(file: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let mut table = match file {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| morepair::Error::Io {
                    path: path.to_path_buf(),
                    source: e,
                })?;
                text.parse::<Table>()
                    .map_err(|e| morepair::Error::Validation(format!("{}: {e}", path.display())))?
            }
            None => Table::new(),
        };
        for ov in overrides {
            let Some((k, v)) = ov.split_once('=') else {
                return Err(morepair::Error::Validation(format!("override {ov:?} is not key=value")).into());
            };
            set_dotted(&mut table, k.trim(), parse_value(v.trim()))
                .map_err(|e| morepair::Error::Validation(e.to_string()))?;
        }
        let mut cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| morepair::Error::Validation(format!("config: {e}")))?;
        if let Some(s) = seed {
            cfg.model.init_seed = s;
            cfg.train.seed = s;
            cfg.sampling.seed = s;
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        cfg.sampling.validate()?;
        cfg.harness.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("serializing effective config")
    }
}

/// Writes the effective configuration next to an artifact as
/// `<artifact>.config.toml`.
pub fn write_sidecar(artifact: &Path, cfg: &RunConfig) -> Result<PathBuf> {
    let mut name = artifact.as_os_str().to_owned();
    name.push(".config.toml");
    let path = PathBuf::from(name);
    fs::write(&path, cfg.to_toml()?).map_err(|e| morepair::Error::Io {
        path: path.clone(),
        source: e,
    })?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_beat_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "[train]\nlambda = 0.5\nsteps = 7\n").unwrap();
        let cfg = RunConfig::load(Some(&path), &["train.lambda=2.0".into(), "train.mode=cot".into()], None).unwrap();
        assert_eq!(cfg.train.lambda, 2.0);
        assert_eq!(cfg.train.steps, 7);
        assert_eq!(cfg.train.mode, morepair::train::TrainMode::Cot);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::load(None, &["train.lamda=1".into()], None).is_err());
        assert!(RunConfig::load(None, &["bogus.x=1".into()], None).is_err());
        assert!(RunConfig::load(None, &["train".into()], None).is_err());
    }

    #[test]
    fn seed_flag_reaches_every_stream() {
        let cfg = RunConfig::load(None, &[], Some(9)).unwrap();
        assert_eq!((cfg.model.init_seed, cfg.train.seed, cfg.sampling.seed), (9, 9, 9));
    }

    #[test]
    fn sidecar_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.paths.dataset = Some("d.jsonl".into());
        let text = cfg.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn string_fallback_for_bare_words() {
        assert_eq!(parse_value("hello"), Value::String("hello".into()));
        assert_eq!(parse_value("3"), Value::Integer(3));
        assert_eq!(
            parse_value("[1, 5]"),
            Value::Array(vec![Value::Integer(1), Value::Integer(5)])
        );
    }
}
