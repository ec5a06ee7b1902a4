//! Token-level views of prompted instances, as consumed by training and
//! evaluation.

use crate::error::{Error, Result};
use crate::model::ModelInput;
use crate::prompting::mixture::select_templates;
use crate::prompting::{prompt_task, PromptedInstance, TaskDataset};
use crate::retrieval::{RetrievalCache, Vocabulary, EOS, PAD};

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedInstance {
    pub id: String,
    pub task: String,
    pub template: String,
    pub x: ModelInput,
    /// Target tokens followed by EOS.
    pub target: Vec<u32>,
    pub choices: Vec<Vec<u32>>,
    pub label: usize,
}

impl EncodedInstance {
    pub fn target_tokens(&self) -> usize {
        self.target.iter().filter(|&&t| t != PAD).count()
    }
}

pub fn encode_instance(vocab: &Vocabulary, p: &PromptedInstance) -> Result<EncodedInstance> {
    let mut target = vocab.encode(&p.target_text);
    target.push(EOS);
    let choices: Vec<Vec<u32>> = p.answer_choices.iter().map(|c| vocab.encode(c)).collect();
    if let Some(i) = choices.iter().position(Vec::is_empty) {
        return Err(Error::Contract(format!("instance {}: answer choice {i} has no tokens", p.id)));
    }
    Ok(EncodedInstance {
        id: p.id.clone(),
        task: p.task.clone(),
        template: p.template.clone(),
        x: ModelInput {
            input: vocab.encode(&p.input_text),
            augmentations: p.augmentations.iter().map(|a| vocab.encode(a)).collect(),
        },
        target,
        choices,
        label: p.label,
    })
}

pub fn encode_all(vocab: &Vocabulary, items: &[PromptedInstance]) -> Result<Vec<EncodedInstance>> {
    items.iter().map(|p| encode_instance(vocab, p)).collect()
}

/// One evaluation task: its instances under each template.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalTask {
    pub name: String,
    pub templates: Vec<(String, Vec<EncodedInstance>)>,
}

/// Encodes `task` under every template, or under the `n` templates the
/// training mixture would draw when `templates` is `Some((n, seed))`.
pub fn encode_eval_task(
    task: &TaskDataset,
    vocab: &Vocabulary,
    cache: Option<&RetrievalCache>,
    k: usize,
    templates: Option<(usize, u64)>,
) -> Result<EvalTask> {
    let chosen = match templates {
        Some((n, seed)) => select_templates(task, n, seed)?,
        None => task.templates.iter().collect(),
    };
    let mut out = Vec::with_capacity(chosen.len());
    for t in chosen {
        let prompted = prompt_task(task, &[t], cache, k)?;
        out.push((t.name.clone(), encode_all(vocab, &prompted)?));
    }
    Ok(EvalTask { name: task.name.clone(), templates: out })
}
