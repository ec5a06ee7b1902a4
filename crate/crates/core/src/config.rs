//! Experiment configuration: one TOML document plus `key=value` overrides of
//! dotted keys. Relative paths resolve against `$ZEMI_ROOT` when it is set.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::nn::ModelConfig;
use crate::prompting::SynthConfig;
use crate::retrieval::{Bm25Params, RetrievalSettings};
use crate::train::TrainConfig;

pub const ROOT_ENV: &str = "ZEMI_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    /// Hits stored per instance in the cache.
    pub k: usize,
    pub max_query_tokens: usize,
    pub max_doc_tokens: usize,
    /// Share of the corpus kept when indexing, in (0, 1].
    pub corpus_fraction: f64,
    pub k1: f64,
    pub b: f64,
    /// Per-task query field, overriding the task manifest.
    pub query_keys: BTreeMap<String, String>,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            k: 5,
            max_query_tokens: 20,
            max_doc_tokens: 256,
            corpus_fraction: 1.0,
            k1: 1.2,
            b: 0.75,
            query_keys: BTreeMap::new(),
        }
    }
}

impl RetrievalConfig {
    pub fn settings(&self) -> RetrievalSettings {
        RetrievalSettings { k: self.k, max_query_tokens: self.max_query_tokens, max_doc_tokens: self.max_doc_tokens }
    }

    pub fn bm25(&self) -> Bm25Params {
        Bm25Params { k1: self.k1, b: self.b }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.max_query_tokens == 0 || self.max_doc_tokens == 0 {
            v.push("retrieval.max_query_tokens and retrieval.max_doc_tokens must be positive".into());
        }
        if !(self.corpus_fraction > 0.0 && self.corpus_fraction <= 1.0) {
            v.push(format!("retrieval.corpus_fraction {} outside (0, 1]", self.corpus_fraction));
        }
        if self.k1.is_nan() || self.k1 < 0.0 || !(0.0..=1.0).contains(&self.b) {
            v.push("retrieval.k1 must be non-negative and retrieval.b within [0, 1]".into());
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub corpus: PathBuf,
    /// Directory with one sub-directory per task.
    pub tasks: PathBuf,
    pub index: PathBuf,
    pub cache: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            corpus: "data/corpus.jsonl".into(),
            tasks: "data/tasks".into(),
            index: "data/index.bm25".into(),
            cache: "data/retrieval.jsonl".into(),
            checkpoints: "checkpoints".into(),
            reports: "reports".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub fusion: FusionConfig,
    pub train: TrainConfig,
    pub retrieval: RetrievalConfig,
    pub synth: SynthConfig,
    pub paths: PathsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            model: ModelConfig::default(),
            fusion: FusionConfig::default(),
            train: TrainConfig::default(),
            retrieval: RetrievalConfig::default(),
            synth: SynthConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `a.b.c = value` inside `table`, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override {assignment:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("override key {key:?} is malformed")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override {key:?}: {p:?} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl ExperimentConfig {
    /// Parses `text`, applies `overrides` in order and validates the result.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: ExperimentConfig =
            toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    /// Canonical TOML form; parsing it gives back an equal config.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = self.model.violations();
        v.extend(self.fusion.violations());
        v.extend(self.train.violations());
        v.extend(self.retrieval.violations());
        v.extend(self.synth.violations());
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    /// `path` itself if absolute, else joined onto `$ZEMI_ROOT` when set.
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            return path.to_path_buf();
        }
        match std::env::var_os(ROOT_ENV) {
            Some(root) => PathBuf::from(root).join(path),
            None => path.to_path_buf(),
        }
    }

    /// Points every path at `dir`, keeping the default file names.
    pub fn rooted_at(mut self, dir: &Path) -> Self {
        let d = PathsConfig::default();
        self.paths = PathsConfig {
            corpus: dir.join(d.corpus),
            tasks: dir.join(d.tasks),
            index: dir.join(d.index),
            cache: dir.join(d.cache),
            checkpoints: dir.join(d.checkpoints),
            reports: dir.join(d.reports),
        };
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::Strategy;

    #[test]
    fn defaults_roundtrip_canonically() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml();
        let back = ExperimentConfig::from_toml(&text, &[]).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml(), text);
    }

    #[test]
    fn dotted_overrides() {
        let cfg = ExperimentConfig::from_toml(
            "[model]\nd_model = 32\n",
            &["fusion.strategy=noaug".into(), "train.learning_rate=0.001".into(), "retrieval.query_keys.qa=question".into()],
        )
        .unwrap();
        assert_eq!(cfg.model.d_model, 32);
        assert_eq!(cfg.fusion.strategy, Strategy::NoAug);
        assert_eq!(cfg.train.learning_rate, 0.001);
        assert_eq!(cfg.retrieval.query_keys["qa"], "question");
    }

    #[test]
    fn every_violation_is_reported() {
        let err = ExperimentConfig::from_toml("", &["model.n_heads=3".into(), "train.epochs=0".into(), "retrieval.corpus_fraction=0".into()])
            .unwrap_err();
        let Error::Config(v) = err else { panic!("{err}") };
        assert_eq!(v.len(), 3, "{v:?}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml("[model]\nwidth = 3\n", &[]).is_err());
        assert!(ExperimentConfig::from_toml("", &["novalue".into()]).is_err());
    }
}
