//! Zero-shot evaluation by rank classification: every answer choice is
//! scored by its log-likelihood under the model and the argmax is the
//! prediction. Accuracies are averaged over templates, then over tasks.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::{EncodedInstance, EvalTask};
use crate::error::{Error, Result};
use crate::fusion::{GateValues, Strategy};
use crate::model::Model;
use crate::nn::EncodedSequence;
use crate::params::Graph;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateAccuracy {
    pub template: String,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: String,
    pub templates: Vec<TemplateAccuracy>,
    /// Mean over templates.
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub strategy: Strategy,
    pub length_normalized: bool,
    pub tasks: Vec<TaskReport>,
    /// Mean of the per-task means.
    pub macro_average: f64,
    pub gates: Option<GateValues>,
}

/// `(task, [(template, correct, total)])`.
pub type TaskCounts = (String, Vec<(String, usize, usize)>);

fn mean(xs: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = xs.len();
    if n == 0 {
        0.0
    } else {
        xs.sum::<f64>() / n as f64
    }
}

impl EvalReport {
    /// Builds the report from raw correct/total counts.
    pub fn from_counts(
        strategy: Strategy,
        length_normalized: bool,
        counts: Vec<TaskCounts>,
        gates: Option<GateValues>,
    ) -> Result<Self> {
        let mut tasks = Vec::with_capacity(counts.len());
        for (task, per_template) in counts {
            let mut templates = Vec::with_capacity(per_template.len());
            for (template, correct, total) in per_template {
                if total == 0 || correct > total {
                    return Err(Error::Contract(format!("task {task:?} template {template:?}: {correct}/{total}")));
                }
                templates.push(TemplateAccuracy { template, correct, total, accuracy: correct as f64 / total as f64 });
            }
            let m = mean(templates.iter().map(|t| t.accuracy));
            tasks.push(TaskReport { task, templates, mean: m });
        }
        let macro_average = mean(tasks.iter().map(|t| t.mean));
        Ok(EvalReport { strategy, length_normalized, tasks, macro_average, gates })
    }

    /// Largest disagreement between the stored means and a recomputation
    /// from the per-template accuracies.
    pub fn arithmetic_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        let mut sum = 0.0;
        for t in &self.tasks {
            let m = t.templates.iter().map(|a| a.accuracy).sum::<f64>() / t.templates.len() as f64;
            worst = worst.max((m - t.mean).abs());
            sum += m;
        }
        if !self.tasks.is_empty() {
            worst = worst.max((sum / self.tasks.len() as f64 - self.macro_average).abs());
        }
        worst
    }

    /// Same accuracies, ignoring strategy and gate telemetry.
    pub fn same_results(&self, other: &EvalReport) -> bool {
        self.tasks == other.tasks && self.macro_average.to_bits() == other.macro_average.to_bits()
    }

    /// Aligned plain-text table.
    pub fn summary(&self) -> String {
        let width = self.tasks.iter().map(|t| t.task.len()).max().unwrap_or(4).max(4);
        let mut out = format!("strategy {}\n{:<width$}  {:>8}  per-template\n", self.strategy, "task", "mean");
        for t in &self.tasks {
            let per: Vec<String> = t.templates.iter().map(|a| format!("{}={:.4}", a.template, a.accuracy)).collect();
            out.push_str(&format!("{:<width$}  {:>8.4}  {}\n", t.task, t.mean, per.join(" ")));
        }
        out.push_str(&format!("{:<width$}  {:>8.4}\n", "macro", self.macro_average));
        if let Some(g) = &self.gates {
            out.push_str(&format!("tanh(g_attn) {:.4}  tanh(g_ff) {:.4}\n", g.attn_tanh, g.ff_tanh));
        }
        out
    }
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax_choice(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Summed log-probability of `choice` given the decoder memory.
pub fn score_choice(model: &Model, g: &mut Graph, memory: &EncodedSequence, choice: &[u32], length_normalized: bool) -> Result<f64> {
    model.score_tokens(g, memory, choice, length_normalized)
}

/// Scores of every choice of `inst`; the memory is computed once.
pub fn choice_scores(model: &Model, strategy: Strategy, inst: &EncodedInstance, length_normalized: bool) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let mut g = Graph::new(&mut tape, &model.store, false);
    let memory = model.fuse(&mut g, strategy, &inst.x)?;
    inst.choices
        .iter()
        .map(|c| score_choice(model, &mut g, &memory, c, length_normalized))
        .collect()
}

/// Rank-classification accuracies without the zero-shot name check (used
/// for held-in validation).
pub fn accuracy_report(model: &Model, strategy: Strategy, tasks: &[EvalTask], length_normalized: bool) -> Result<EvalReport> {
    let mut counts = Vec::with_capacity(tasks.len());
    for task in tasks {
        let mut per = Vec::with_capacity(task.templates.len());
        for (template, instances) in &task.templates {
            let mut correct = 0;
            for inst in instances {
                let scores = choice_scores(model, strategy, inst, length_normalized)?;
                correct += (argmax_choice(&scores) == Some(inst.label)) as usize;
            }
            per.push((template.clone(), correct, instances.len()));
        }
        counts.push((task.name.clone(), per));
    }
    let gates = if strategy == Strategy::Zemi { model.gate_values().ok() } else { None };
    EvalReport::from_counts(strategy, length_normalized, counts, gates)
}

/// Zero-shot evaluation: refuses any task whose name was trained on.
pub fn evaluate(
    model: &Model,
    strategy: Strategy,
    tasks: &[EvalTask],
    train_task_names: &[String],
    length_normalized: bool,
) -> Result<EvalReport> {
    let trained: HashSet<&str> = train_task_names.iter().map(String::as_str).collect();
    let overlap: Vec<&str> = tasks.iter().map(|t| t.name.as_str()).filter(|n| trained.contains(n)).collect();
    if !overlap.is_empty() {
        return Err(Error::Contract(format!(
            "zero-shot violation: evaluation tasks {} appear in the training mixture",
            overlap.join(", ")
        )));
    }
    accuracy_report(model, strategy, tasks, length_normalized)
}
