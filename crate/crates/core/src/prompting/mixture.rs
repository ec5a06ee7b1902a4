use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{apply_template, PromptTemplate, PromptedInstance, TaskDataset};
use crate::error::{Error, Result};
use crate::fusion::Strategy;
use crate::retrieval::RetrievalCache;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MixtureOptions {
    pub templates_per_task: usize,
    /// Seed of the instance shuffle.
    pub shuffle_seed: u64,
    /// Seed of the per-task template draw, kept apart from the shuffle seed.
    pub template_seed: u64,
    pub strategy: Strategy,
    /// Maximum augmentations attached per instance.
    pub k: usize,
}

impl Default for MixtureOptions {
    fn default() -> Self {
        MixtureOptions { templates_per_task: 2, shuffle_seed: 0, template_seed: 0, strategy: Strategy::Zemi, k: 5 }
    }
}

/// 64-bit FNV-1a; stable across platforms and compiler versions.
pub(crate) fn stable_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Draws `n` distinct templates of `task`, returned in their declared order.
pub fn select_templates(task: &TaskDataset, n: usize, template_seed: u64) -> Result<Vec<&PromptTemplate>> {
    if task.templates.len() < n {
        return Err(Error::config(format!(
            "task {:?} has {} templates, {n} requested per task",
            task.name,
            task.templates.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(template_seed ^ stable_hash(&task.name));
    let idx: Vec<usize> = (0..task.templates.len()).collect();
    let mut chosen: Vec<usize> = idx.choose_multiple(&mut rng, n).copied().collect();
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| &task.templates[i]).collect())
}

/// Templated instances of one task, instance-major, with up to `k`
/// augmentations from `cache` when one is given.
pub fn prompt_task(
    task: &TaskDataset,
    templates: &[&PromptTemplate],
    cache: Option<&RetrievalCache>,
    k: usize,
) -> Result<Vec<PromptedInstance>> {
    let mut out = Vec::with_capacity(task.instances.len() * templates.len());
    for inst in &task.instances {
        let augmentations = match cache {
            Some(c) => {
                let rec = c.get(&task.name, &inst.id).ok_or_else(|| {
                    Error::Contract(format!("retrieval cache has no record for {}/{}", task.name, inst.id))
                })?;
                rec.hits.iter().take(k).map(|h| h.text.clone()).collect()
            }
            None => Vec::new(),
        };
        for t in templates {
            let (input_text, target_text) = apply_template(inst, t)?;
            out.push(PromptedInstance {
                id: format!("{}/{}/{}", task.name, inst.id, t.name),
                task: task.name.clone(),
                template: t.name.clone(),
                input_text,
                target_text,
                answer_choices: inst.choices.clone(),
                label: inst.label,
                augmentations: augmentations.clone(),
            });
        }
    }
    Ok(out)
}

/// All tasks under `templates_per_task` sampled templates each, interleaved
/// by a seeded shuffle. A retrieval strategy without a cache is an error.
pub fn make_training_mixture(
    tasks: &[TaskDataset],
    cache: Option<&RetrievalCache>,
    opts: &MixtureOptions,
) -> Result<Vec<PromptedInstance>> {
    let cache = if opts.strategy.uses_retrieval() {
        Some(cache.ok_or_else(|| {
            Error::config(format!("strategy {} needs a retrieval cache; run retrieval first", opts.strategy))
        })?)
    } else {
        None
    };
    let mut out = Vec::new();
    for task in tasks {
        let templates = select_templates(task, opts.templates_per_task, opts.template_seed)?;
        out.extend(prompt_task(task, &templates, cache, opts.k)?);
    }
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.shuffle_seed));
    Ok(out)
}
