//! End-to-end experiment steps over on-disk artifacts: synthesize, index,
//! retrieve, train, evaluate, gradient-check and ablate.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{grad_check, GradCheckOptions, GradCheckReport, Tensor};
use crate::checkpoint;
use crate::config::{apply_override, ExperimentConfig};
use crate::data::{encode_all, encode_eval_task, EvalTask};
use crate::error::{Error, Result};
use crate::eval::{accuracy_report, evaluate, EvalReport};
use crate::fusion::{FusionConfig, GateValues, Strategy};
use crate::io_util;
use crate::model::{Model, ModelInput};
use crate::nn::ModelConfig;
use crate::params::Graph;
use crate::prompting::{
    apply_template, load_tasks, make_training_mixture, save_tasks, synth_suite, MixtureOptions, Split, SynthSuite,
    TaskDataset,
};
use crate::retrieval::{
    batch_retrieve_offline, load_corpus, save_corpus, subsample, Bm25Index, RetrievalCache, Vocabulary, EOS,
};
use crate::train::{train, TrainLog};

pub const VOCAB_FILE: &str = "vocab.txt";
pub const TRAIN_TASKS_FILE: &str = "train_tasks.json";
pub const INITIAL_CHECKPOINT: &str = "initial.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

/// Knob names accepted by [`Experiment::ablate`] and the config keys they set.
pub const ABLATION_KNOBS: [(&str, &str); 6] = [
    ("gate", "fusion.gated"),
    ("num_augs", "fusion.k"),
    ("latent", "fusion.l_q"),
    ("aug_len", "fusion.aug_max_tokens"),
    ("frozen_aug_encoder", "fusion.frozen_aug_encoder"),
    ("strategy", "fusion.strategy"),
];

/// Above this many augmentations, ablation rows switch to the frozen
/// augmentation encoder.
pub const FROZEN_ENCODER_ABOVE: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub log: TrainLog,
    pub train_tasks: Vec<String>,
    pub instances: usize,
    /// Validation macro accuracy after each epoch (empty without a split).
    pub val_scores: Vec<f64>,
    pub best_epoch: usize,
    pub gates: Option<GateValues>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub knobs: BTreeMap<String, String>,
    pub macro_average: f64,
    pub gate_params_present: bool,
    pub gates: Option<GateValues>,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub knobs: Vec<String>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Aligned text table: one row per grid point.
    pub fn summary(&self) -> String {
        let mut header: Vec<String> = self.knobs.clone();
        header.extend(["gate_params".into(), "tanh_g_attn".into(), "macro_acc".into()]);
        let mut rows: Vec<Vec<String>> = Vec::new();
        for r in &self.rows {
            let mut cells: Vec<String> = self.knobs.iter().map(|k| r.knobs[k].clone()).collect();
            cells.push(if r.gate_params_present { "yes" } else { "no" }.into());
            cells.push(r.gates.map_or("-".into(), |g| format!("{:.4}", g.attn_tanh)));
            cells.push(format!("{:.4}", r.macro_average));
            rows.push(cells);
        }
        let widths: Vec<usize> = (0..header.len())
            .map(|i| rows.iter().map(|r| r[i].len()).chain([header[i].len()]).max().unwrap_or(0))
            .collect();
        let line = |cells: &[String]| {
            cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect::<Vec<_>>().join("  ").trim_end().to_string()
        };
        let mut out = line(&header);
        out.push('\n');
        for r in &rows {
            out.push_str(&line(r));
            out.push('\n');
        }
        out
    }
}

pub struct Experiment {
    pub cfg: ExperimentConfig,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    bytes.push(b'\n');
    io_util::write_atomic(path, &bytes)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// First `n - round(n·fraction)` instances train, the rest validate; at
/// least one instance always trains.
fn split_validation(task: &TaskDataset, fraction: f64) -> (TaskDataset, Option<TaskDataset>) {
    let n = task.instances.len();
    let n_val = ((n as f64 * fraction).round() as usize).min(n.saturating_sub(1));
    if n_val == 0 {
        return (task.clone(), None);
    }
    let mut train = task.clone();
    let mut val = task.clone();
    val.instances = train.instances.split_off(n - n_val);
    (train, Some(val))
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig) -> Self {
        Experiment { cfg }
    }

    pub fn path(&self, p: &Path) -> PathBuf {
        self.cfg.resolve(p)
    }

    fn checkpoint_dir(&self) -> PathBuf {
        self.path(&self.cfg.paths.checkpoints)
    }

    fn reports_dir(&self) -> PathBuf {
        self.path(&self.cfg.paths.reports)
    }

    /// Generates the synthetic suite and writes the corpus and task files.
    /// Task directories from an earlier run that are not part of the new
    /// suite are removed.
    pub fn synth(&self) -> Result<SynthSuite> {
        let suite = synth_suite(&self.cfg.synth, self.cfg.seed)?;
        save_corpus(&self.path(&self.cfg.paths.corpus), &suite.corpus)?;
        let root = self.path(&self.cfg.paths.tasks);
        let keep: HashSet<&str> = suite.train.iter().chain(&suite.eval).map(|t| t.name.as_str()).collect();
        if let Ok(entries) = std::fs::read_dir(&root) {
            for e in entries.flatten() {
                let stale = e.file_name().to_str().is_some_and(|n| !keep.contains(n));
                if stale && e.path().join("manifest.json").is_file() {
                    std::fs::remove_dir_all(e.path()).map_err(|err| Error::io(e.path(), err))?;
                }
            }
        }
        save_tasks(&root, &suite.train)?;
        save_tasks(&root, &suite.eval)?;
        Ok(suite)
    }

    pub fn index(&self) -> Result<Bm25Index> {
        let corpus = load_corpus(&self.path(&self.cfg.paths.corpus))?;
        let corpus = subsample(corpus, self.cfg.retrieval.corpus_fraction, self.cfg.seed)?;
        let index = Bm25Index::build(corpus, self.cfg.retrieval.bm25())?;
        index.save(&self.path(&self.cfg.paths.index))?;
        Ok(index)
    }

    /// All tasks with configured query-key overrides applied, split into
    /// (train, eval).
    pub fn tasks(&self) -> Result<(Vec<TaskDataset>, Vec<TaskDataset>)> {
        let mut tasks = load_tasks(&self.path(&self.cfg.paths.tasks))?;
        for t in &mut tasks {
            if let Some(k) = self.cfg.retrieval.query_keys.get(&t.name) {
                t.query_key = k.clone();
            }
        }
        let (train, eval): (Vec<_>, Vec<_>) = tasks.into_iter().partition(|t| t.split == Split::Train);
        Ok((train, eval))
    }

    pub fn retrieve(&self) -> Result<RetrievalCache> {
        let index = Bm25Index::load(&self.path(&self.cfg.paths.index))?;
        let (mut tasks, eval) = self.tasks()?;
        tasks.extend(eval);
        let missing: Vec<String> = tasks
            .iter()
            .filter(|t| t.query_key.is_empty())
            .map(|t| format!("task {:?} has no query_key", t.name))
            .collect();
        if !missing.is_empty() {
            return Err(Error::Config(missing));
        }
        batch_retrieve_offline(&index, &tasks, &self.cfg.retrieval.settings(), &self.path(&self.cfg.paths.cache))
    }

    fn cache_for(&self, strategy: Strategy) -> Result<Option<RetrievalCache>> {
        if !strategy.uses_retrieval() {
            return Ok(None);
        }
        let path = self.path(&self.cfg.paths.cache);
        if !path.is_file() {
            return Err(Error::config(format!(
                "strategy {strategy} needs the retrieval cache {}; run retrieve first",
                path.display()
            )));
        }
        let cache = RetrievalCache::load(&path)?;
        if cache.settings().k < self.cfg.fusion.k {
            return Err(Error::config(format!(
                "retrieval cache holds {} hits per instance but fusion.k is {}; re-run retrieve with retrieval.k >= {}",
                cache.settings().k,
                self.cfg.fusion.k,
                self.cfg.fusion.k
            )));
        }
        Ok(Some(cache))
    }

    /// Vocabulary over the corpus and every prompt, target and choice.
    pub fn build_vocabulary(&self, tasks: &[TaskDataset]) -> Result<Vocabulary> {
        let corpus = load_corpus(&self.path(&self.cfg.paths.corpus))?;
        let mut texts: Vec<String> = corpus.into_iter().map(|d| d.text).collect();
        for t in tasks {
            for inst in &t.instances {
                for tpl in &t.templates {
                    let (i, o) = apply_template(inst, tpl)?;
                    texts.push(i);
                    texts.push(o);
                }
                texts.extend(inst.choices.iter().cloned());
            }
        }
        Ok(Vocabulary::build(texts.iter().map(String::as_str)))
    }

    pub fn train(&self) -> Result<TrainOutcome> {
        let cfg = &self.cfg;
        let strategy = cfg.fusion.strategy;
        let (train_tasks, eval_tasks) = self.tasks()?;
        if train_tasks.is_empty() {
            return Err(Error::config("no training tasks found; run synth first"));
        }
        let cache = self.cache_for(strategy)?;
        let mut all = train_tasks.clone();
        all.extend(eval_tasks);
        let vocab = self.build_vocabulary(&all)?;

        let (fit, val): (Vec<TaskDataset>, Vec<Option<TaskDataset>>) =
            train_tasks.iter().map(|t| split_validation(t, cfg.train.val_fraction)).unzip();
        let opts = MixtureOptions {
            templates_per_task: cfg.train.templates_per_task,
            shuffle_seed: cfg.seed,
            template_seed: cfg.train.template_seed,
            strategy,
            k: cfg.fusion.k,
        };
        let mixture = make_training_mixture(&fit, cache.as_ref(), &opts)?;
        let data = encode_all(&vocab, &mixture)?;
        let val_tasks: Vec<EvalTask> = val
            .iter()
            .flatten()
            .map(|t| {
                let templates = Some((cfg.train.templates_per_task, cfg.train.template_seed));
                encode_eval_task(t, &vocab, cache.as_ref(), cfg.fusion.k, templates)
            })
            .collect::<Result<_>>()?;

        let mut model_cfg = cfg.model.clone();
        model_cfg.vocab_size = vocab.len();
        let mut model = Model::new(model_cfg, cfg.fusion.clone(), cfg.seed)?;

        let ckpt_dir = self.checkpoint_dir();
        vocab.save(&ckpt_dir.join(VOCAB_FILE))?;
        let names: Vec<String> = train_tasks.iter().map(|t| t.name.clone()).collect();
        write_json(&ckpt_dir.join(TRAIN_TASKS_FILE), &names)?;
        checkpoint::save(&model, &ckpt_dir.join(INITIAL_CHECKPOINT))?;

        let mut val_scores = Vec::new();
        let mut best: Option<(usize, f64)> = None;
        let ln = cfg.train.length_normalized;
        let log = train(&mut model, &data, &cfg.train, cfg.seed, |m, summary| {
            checkpoint::save(m, &ckpt_dir.join(format!("epoch-{:02}.ckpt", summary.epoch)))?;
            let score = if val_tasks.is_empty() {
                None
            } else {
                let s = accuracy_report(m, strategy, &val_tasks, ln)?.macro_average;
                val_scores.push(s);
                Some(s)
            };
            let improved = match (score, best) {
                (_, None) => true,
                (Some(s), Some((_, b))) => s > b,
                (None, Some(_)) => true,
            };
            if improved {
                best = Some((summary.epoch, score.unwrap_or(f64::NAN)));
                checkpoint::save(m, &ckpt_dir.join(BEST_CHECKPOINT))?;
            }
            if cfg.train.log_every > 0 {
                eprintln!("epoch {} mean loss {:.5} val {:?}", summary.epoch, summary.mean_loss, score);
            }
            Ok(())
        })?;

        let outcome = TrainOutcome {
            train_tasks: names,
            instances: data.len(),
            val_scores,
            best_epoch: best.map_or(0, |b| b.0),
            gates: model.gate_values().ok(),
            log,
        };
        let reports = self.reports_dir();
        io_util::write_atomic(&reports.join("loss.jsonl"), &io_util::jsonl_bytes(&outcome.log.steps)?)?;
        write_json(&reports.join("train.json"), &outcome)?;
        Ok(outcome)
    }

    /// Loads a checkpoint and the vocabulary stored beside it.
    pub fn load_checkpoint(&self, checkpoint: Option<&Path>) -> Result<(Model, Vocabulary, PathBuf)> {
        let path = match checkpoint {
            Some(p) => self.path(p),
            None => self.checkpoint_dir().join(BEST_CHECKPOINT),
        };
        let model = checkpoint::load(&path)?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
        if vocab.len() != model.model_cfg.vocab_size {
            return Err(Error::format(&path, format!(
                "vocabulary has {} entries, checkpoint expects {}",
                vocab.len(),
                model.model_cfg.vocab_size
            )));
        }
        Ok((model, vocab, dir))
    }

    /// Zero-shot evaluation of the eval-split tasks under the configured
    /// strategy; writes `eval.json` and `eval.txt` to the reports directory.
    pub fn eval(&self, checkpoint: Option<&Path>) -> Result<EvalReport> {
        let (model, vocab, dir) = self.load_checkpoint(checkpoint)?;
        let strategy = self.cfg.fusion.strategy;
        let (train_tasks, eval_tasks) = self.tasks()?;
        if eval_tasks.is_empty() {
            return Err(Error::config("no eval tasks found; run synth first"));
        }
        let trained: Vec<String> = match read_json(&dir.join(TRAIN_TASKS_FILE)) {
            Ok(names) => names,
            Err(_) => train_tasks.iter().map(|t| t.name.clone()).collect(),
        };
        let cache = self.cache_for(strategy)?;
        let k = model.fusion_cfg.k;
        let tasks: Vec<EvalTask> = eval_tasks
            .iter()
            .map(|t| encode_eval_task(t, &vocab, cache.as_ref(), k, None))
            .collect::<Result<_>>()?;
        let report = evaluate(&model, strategy, &tasks, &trained, self.cfg.train.length_normalized)?;
        let reports = self.reports_dir();
        write_json(&reports.join("eval.json"), &report)?;
        io_util::write_atomic(&reports.join("eval.txt"), report.summary().as_bytes())?;
        Ok(report)
    }

    /// [`gradcheck_model`] on the configured model and fusion settings;
    /// writes `gradcheck.json` to the reports directory.
    pub fn gradcheck(&self, opts: &GradCheckOptions) -> Result<GradCheckReport> {
        let report = gradcheck_model(&self.cfg.model, &self.cfg.fusion, self.cfg.seed, opts)?;
        write_json(&self.reports_dir().join("gradcheck.json"), &report)?;
        Ok(report)
    }

    /// One train + eval run per grid point (first knob outermost). Each row
    /// trains into its own checkpoint and report directories.
    pub fn ablate(&self, grid: &[(String, Vec<String>)]) -> Result<AblationTable> {
        let unknown: Vec<String> = grid
            .iter()
            .filter(|(k, _)| !ABLATION_KNOBS.iter().any(|(n, _)| n == k))
            .map(|(k, _)| {
                let valid: Vec<&str> = ABLATION_KNOBS.iter().map(|(n, _)| *n).collect();
                format!("unknown ablation knob {k:?} (valid knobs: {})", valid.join(", "))
            })
            .collect();
        if !unknown.is_empty() {
            return Err(Error::Config(unknown));
        }
        if let Some((k, _)) = grid.iter().find(|(_, vals)| vals.is_empty()) {
            return Err(Error::config(format!("ablation knob {k:?} has no values")));
        }
        let mut points: Vec<Vec<(String, String)>> = vec![Vec::new()];
        for (knob, values) in grid {
            points = points
                .into_iter()
                .flat_map(|p| {
                    values.iter().map(move |v| {
                        let mut q = p.clone();
                        q.push((knob.clone(), v.clone()));
                        q
                    })
                })
                .collect();
        }
        let base: toml::Table = toml::from_str(&self.cfg.to_toml()).map_err(|e| Error::config(e.to_string()))?;
        let mut rows = Vec::with_capacity(points.len());
        for (i, point) in points.iter().enumerate() {
            let mut table = base.clone();
            for (knob, value) in point {
                let key = ABLATION_KNOBS.iter().find(|(n, _)| n == knob).expect("validated").1;
                apply_override(&mut table, &format!("{key}={value}"))?;
            }
            let mut cfg: ExperimentConfig =
                toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
            if cfg.fusion.k > FROZEN_ENCODER_ABOVE {
                cfg.fusion.frozen_aug_encoder = true;
            }
            if points.len() > 1 {
                let row_dir = format!("row-{i:02}");
                cfg.paths.checkpoints = self.cfg.paths.checkpoints.join("ablate").join(&row_dir);
                cfg.paths.reports = self.cfg.paths.reports.join("ablate").join(&row_dir);
            }
            cfg.validate()?;
            let exp = Experiment::new(cfg);
            exp.train()?;
            let report = exp.eval(None)?;
            let header = checkpoint::read_header(&exp.checkpoint_dir().join(BEST_CHECKPOINT))?;
            rows.push(AblationRow {
                knobs: point.iter().cloned().collect(),
                macro_average: report.macro_average,
                gate_params_present: header.has_gate_params(),
                gates: report.gates,
                report,
            });
        }
        let table = AblationTable { knobs: grid.iter().map(|(k, _)| k.clone()).collect(), rows };
        let reports = self.reports_dir();
        io_util::write_atomic(&reports.join("ablation.jsonl"), &io_util::jsonl_bytes(&table.rows)?)?;
        io_util::write_atomic(&reports.join("ablation.txt"), table.summary().as_bytes())?;
        Ok(table)
    }
}

/// Parses `knob=v1,v2,...` grid arguments.
pub fn parse_grid(args: &[String]) -> Result<Vec<(String, Vec<String>)>> {
    args.iter()
        .map(|a| {
            let (k, v) = a.split_once('=').ok_or_else(|| Error::config(format!("grid entry {a:?} is not knob=v1,v2")))?;
            Ok((k.trim().to_string(), v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()))
        })
        .collect()
}

/// Finite-difference check of every trainable parameter group of a Zemi
/// model, with the gates moved away from zero and a random instance.
pub fn gradcheck_model(
    model_cfg: &ModelConfig,
    fusion_cfg: &FusionConfig,
    seed: u64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut fusion = fusion_cfg.clone();
    fusion.strategy = Strategy::Zemi;
    let mut model = Model::new(model_cfg.clone(), fusion, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6772_6164);
    let gate_ids = model.fusion.as_ref().map(|f| f.gated.all_gate_ids()).unwrap_or_default();
    for id in gate_ids {
        for v in model.store.get_mut(id).data_mut() {
            *v = rng.random_range(-0.6..0.6);
        }
    }
    let vocab = model.model_cfg.vocab_size as u32;
    let mut tokens = |n: usize| -> Vec<u32> { (0..n).map(|_| rng.random_range(4..vocab)).collect() };
    let n_augs = model.fusion_cfg.k.min(2);
    let x = ModelInput { input: tokens(6), augmentations: (0..n_augs).map(|i| tokens(5 - i)).collect() };
    let mut target = tokens(3);
    target.push(EOS);

    let ids: Vec<_> = model.store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    let params: Vec<(String, Tensor)> =
        ids.iter().map(|&id| (model.store.param(id).name.clone(), model.store.get(id).clone())).collect();
    let model = &model;
    grad_check(
        |tape, vars| {
            let mut g = Graph::with_vars(tape, &model.store, ids.iter().copied().zip(vars.iter().copied()));
            let (loss, n) = model.nll(&mut g, Strategy::Zemi, &x, &target)?;
            g.scale(loss, 1.0 / n as f64)
        },
        &params,
        opts,
    )
}
