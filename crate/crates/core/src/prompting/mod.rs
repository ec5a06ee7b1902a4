//! Prompt templates, task datasets and their on-disk form.

pub mod mixture;
pub mod synth;

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_util;

pub use mixture::{make_training_mixture, prompt_task, MixtureOptions};
pub use synth::{noise_corpus, synth_lookup_task, synth_selfcontained_task, synth_suite, SynthConfig, SynthSuite};

/// Field name under which the gold choice is visible to templates.
pub const ANSWER_FIELD: &str = "answer";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub name: String,
    pub input_template: String,
    pub target_template: String,
}

impl PromptTemplate {
    pub fn new(name: impl Into<String>, input: impl Into<String>, target: impl Into<String>) -> Self {
        PromptTemplate { name: name.into(), input_template: input.into(), target_template: target.into() }
    }

    pub fn placeholders(&self) -> Vec<String> {
        let mut out = placeholders(&self.input_template);
        out.extend(placeholders(&self.target_template));
        out
    }
}

/// A raw task record before templating.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawInstance {
    pub id: String,
    pub fields: BTreeMap<String, String>,
    pub choices: Vec<String>,
    pub label: usize,
}

impl RawInstance {
    pub fn gold(&self) -> &str {
        &self.choices[self.label]
    }

    fn field(&self, name: &str) -> Option<&str> {
        if name == ANSWER_FIELD {
            return self.choices.get(self.label).map(String::as_str);
        }
        self.fields.get(name).map(String::as_str)
    }
}

/// A templated instance: the prompt `I`, the answer choices and the attached
/// augmentation texts `A_1..A_k`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptedInstance {
    pub id: String,
    pub task: String,
    pub template: String,
    pub input_text: String,
    pub target_text: String,
    pub answer_choices: Vec<String>,
    pub label: usize,
    pub augmentations: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskManifest {
    pub name: String,
    pub split: Split,
    pub schema: Vec<String>,
    pub templates: Vec<PromptTemplate>,
    pub query_key: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskDataset {
    pub name: String,
    pub split: Split,
    pub schema: Vec<String>,
    pub templates: Vec<PromptTemplate>,
    pub query_key: String,
    pub instances: Vec<RawInstance>,
}

fn placeholders(template: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) => {
                out.push(after[..close].to_string());
                rest = &after[close + 1..];
            }
            None => break,
        }
    }
    out
}

fn render(template: &str, inst: &RawInstance, template_name: &str) -> Result<String> {
    let mut out = String::with_capacity(template.len() + 32);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        let Some(close) = after.find('}') else { break };
        let name = &after[..close];
        let value = inst.field(name).ok_or_else(|| {
            Error::Template(format!(
                "placeholder {{{name}}} of template {template_name:?} is not a field of instance {:?}",
                inst.id
            ))
        })?;
        out.push_str(&rest[..open]);
        out.push_str(value);
        rest = &after[close + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Literal substitution of `{field}` placeholders; `{answer}` is the gold
/// choice. Returns `(input_text, target_text)`.
pub fn apply_template(inst: &RawInstance, template: &PromptTemplate) -> Result<(String, String)> {
    Ok((
        render(&template.input_template, inst, &template.name)?,
        render(&template.target_template, inst, &template.name)?,
    ))
}

impl TaskDataset {
    pub fn manifest(&self) -> TaskManifest {
        TaskManifest {
            name: self.name.clone(),
            split: self.split,
            schema: self.schema.clone(),
            templates: self.templates.clone(),
            query_key: self.query_key.clone(),
        }
    }

    pub fn template(&self, name: &str) -> Result<&PromptTemplate> {
        self.templates
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Template(format!("task {:?} has no template {name:?}", self.name)))
    }

    /// Every schema, label and template violation, not only the first.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let n = &self.name;
        if self.templates.is_empty() {
            v.push(format!("task {n:?} has no templates"));
        }
        if self.split == Split::Eval && self.templates.len() < 2 {
            v.push(format!("eval task {n:?} needs at least 2 templates"));
        }
        let known: HashSet<&str> = self.schema.iter().map(String::as_str).chain([ANSWER_FIELD]).collect();
        for t in &self.templates {
            for p in t.placeholders() {
                if !known.contains(p.as_str()) {
                    v.push(format!("template {:?} of task {n:?} uses unknown field {{{p}}}", t.name));
                }
            }
        }
        let mut ids = HashSet::new();
        for inst in &self.instances {
            if !ids.insert(inst.id.as_str()) {
                v.push(format!("task {n:?}: duplicate instance id {:?}", inst.id));
            }
            for f in &self.schema {
                if !inst.fields.contains_key(f) {
                    v.push(format!("task {n:?}: instance {:?} lacks field {f:?}", inst.id));
                }
            }
            if inst.choices.is_empty() || inst.label >= inst.choices.len() {
                v.push(format!("task {n:?}: instance {:?} has label {} for {} choices", inst.id, inst.label, inst.choices.len()));
            }
            let distinct: HashSet<&String> = inst.choices.iter().collect();
            if distinct.len() != inst.choices.len() {
                v.push(format!("task {n:?}: instance {:?} has duplicate choices", inst.id));
            }
        }
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

    /// Writes `manifest.json` and `instances.jsonl` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let manifest = serde_json::to_vec_pretty(&self.manifest()).map_err(|e| Error::format(dir, e.to_string()))?;
        io_util::write_atomic(&dir.join("manifest.json"), &manifest)?;
        io_util::write_atomic(&dir.join("instances.jsonl"), &io_util::jsonl_bytes(&self.instances)?)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: TaskManifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        let instances = io_util::read_jsonl(&dir.join("instances.jsonl"))?;
        let task = TaskDataset {
            name: m.name,
            split: m.split,
            schema: m.schema,
            templates: m.templates,
            query_key: m.query_key,
            instances,
        };
        task.validate()?;
        Ok(task)
    }
}

/// Saves each task into `root/<task name>/`.
pub fn save_tasks(root: &Path, tasks: &[TaskDataset]) -> Result<()> {
    for t in tasks {
        t.save(&root.join(&t.name))?;
    }
    Ok(())
}

/// Loads every task directory under `root`, sorted by name.
pub fn load_tasks(root: &Path) -> Result<Vec<TaskDataset>> {
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs = Vec::new();
    for e in entries {
        let e = e.map_err(|e| Error::io(root, e))?;
        if e.path().join("manifest.json").is_file() {
            dirs.push(e.path());
        }
    }
    dirs.sort();
    dirs.iter().map(|d| TaskDataset::load(d)).collect()
}
