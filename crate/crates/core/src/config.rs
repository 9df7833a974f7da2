//! Experiment configuration: one TOML document plus `key=value` overrides.
//!
//! Overrides use dotted paths (`train.epochs=10`). The value is parsed as a
//! TOML value and falls back to a plain string, so `train.mode=vanilla`
//! and `eval.epsilon=0.0` both work. The top-level `seed` is authoritative
//! and is copied into the training sections.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data_io::{load_dataset, make_synthetic_dataset, DatasetFormat, ImageDataset, Split, SyntheticSpec};
use crate::error::{Error, Result};
use crate::evaluation::AttackSuite;
use crate::models::{ClassifierSpec, GeneratorSpec};
use crate::trainer::{TeacherConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Render a synthetic dataset instead of reading files.
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default)]
    pub synthetic_seed: u64,
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    #[serde(default = "default_format")]
    pub format: DatasetFormat,
}

fn default_format() -> DatasetFormat {
    DatasetFormat::RawBinary
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    /// Seeds for the multi-seed comparisons.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_entropy_batches")]
    pub entropy_batches: usize,
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}
fn default_entropy_batches() -> usize {
    8
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            seeds: default_seeds(),
            entropy_batches: default_entropy_batches(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Teacher checkpoint read by `distill`, `temp-experiment` and `entropy-report`.
    pub teacher_checkpoint: Option<PathBuf>,
    pub data: DataConfig,
    pub teacher: ClassifierSpec,
    #[serde(default)]
    pub teacher_training: TeacherConfig,
    pub student: ClassifierSpec,
    pub generator: GeneratorSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: AttackSuite,
    #[serde(default)]
    pub experiment: ExperimentSection,
}

fn parse_override(text: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override '{text}' is not KEY=VALUE")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("override key '{key}' has an empty segment")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((path, value))
}

fn apply_override(root: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut table = root;
    for p in parents {
        let entry = table
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override path '{}' crosses non-table key '{p}'", path.join("."))))?;
    }
    table.insert(last.clone(), value);
    Ok(())
}

impl ExperimentConfig {
    /// Parses a document and applies overrides; `origin` names the source in diagnostics.
    pub fn parse(text: &str, origin: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::config(format!("{origin}: {e}")))?;
        for o in overrides {
            let (path, value) = parse_override(o)?;
            apply_override(&mut table, &path, value)?;
        }
        let mut config: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(format!("{origin}: {}", e.message())))?;
        config.sync_seed();
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string(), overrides)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.sync_seed();
    }

    fn sync_seed(&mut self) {
        self.train.seed = self.seed;
        self.teacher_training.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.teacher.validate()?;
        self.student.validate()?;
        self.generator.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.teacher.num_classes != self.student.num_classes {
            return Err(Error::config("teacher and student class counts differ"));
        }
        match (&self.data.synthetic, &self.data.test) {
            (Some(_), None) | (None, Some(_)) => {}
            _ => return Err(Error::config("data needs exactly one of `synthetic` or `test`")),
        }
        if self.experiment.seeds.is_empty() {
            return Err(Error::config("experiment.seeds must not be empty"));
        }
        Ok(())
    }

    /// Canonical TOML rendering of the resolved configuration.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is always representable as TOML")
    }

    /// SHA-256 of the canonical rendering, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Train and test splits, rendering them if synthetic.
    pub fn datasets(&self) -> Result<(Option<ImageDataset>, ImageDataset)> {
        if let Some(spec) = &self.data.synthetic {
            let (train, test) = make_synthetic_dataset(spec, self.data.synthetic_seed)?;
            return Ok((Some(train), test));
        }
        let test_path = self.data.test.as_ref().expect("validated");
        let test = load_dataset(test_path, self.data.format, Split::Test)?;
        let train = match &self.data.train {
            Some(p) => Some(load_dataset(p, self.data.format, Split::Train)?),
            None => None,
        };
        Ok((train, test))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
seed = 4
out_dir = "runs/x"

[data.synthetic]
num_classes = 4
train_per_class = 2
test_per_class = 2
image_size = 8

[teacher]
in_channels = 3
image_size = 8
width = 4
stages = 2
num_classes = 4

[student]
in_channels = 3
image_size = 8
width = 2
stages = 2
num_classes = 4

[generator]
latent_dim = 8
num_classes = 4
base_size = 2
channels = [8, 4, 4]
"#;

    #[test]
    fn overrides_and_seed_propagation() {
        let c = ExperimentConfig::parse(
            BASE,
            "base",
            &["train.mode=vanilla".into(), "train.epochs=7".into(), "eval.epsilon=0.0".into()],
        )
        .unwrap();
        assert_eq!(c.train.epochs, 7);
        assert_eq!(c.train.mode, crate::trainer::TrainMode::Vanilla);
        assert_eq!(c.train.seed, 4);
        assert_eq!(c.eval.epsilon, 0.0);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = ExperimentConfig::parse(BASE, "base", &["train.epochz=3".into()]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("epochz"), "{err}");
        let err = ExperimentConfig::parse(&format!("{BASE}\nbogus = 1\n"), "base", &[]).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn syntax_error_reports_line() {
        let err = ExperimentConfig::parse("seed = \n", "cfg.toml", &[]).unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::parse(BASE, "base", &[]).unwrap();
        let b = ExperimentConfig::parse(BASE, "base", &["train.epochs=9".into()]).unwrap();
        assert_eq!(a.hash(), ExperimentConfig::parse(&a.to_toml(), "copy", &[]).unwrap().hash());
        assert_ne!(a.hash(), b.hash());
    }
}
