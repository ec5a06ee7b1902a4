//! Synthetic task suite: entity/attribute lookup tasks whose answers live only
//! in the corpus, a self-contained control task, and gibberish noise corpora.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{PromptTemplate, RawInstance, Split, TaskDataset};
use crate::error::{Error, Result};
use crate::retrieval::{tokenize, Bm25Index, Bm25Params, Document};

pub const VALUE_WORDS: [&str; 16] = [
    "red", "blue", "green", "teal", "amber", "violet", "black", "white", "gray", "pink", "gold", "silver", "brown",
    "orange", "purple", "cyan",
];

const FILLER_WORDS: [&str; 12] =
    ["note", "that", "this", "record", "about", "which", "was", "listed", "in", "an", "old", "archive"];

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
const NOISE_CONSONANTS: &[u8] = b"cjqwxh";
const NOISE_VOWELS: &[u8] = b"aeiouy";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub train_tasks: usize,
    pub eval_tasks: usize,
    pub facts_per_task: usize,
    pub instances_per_task: usize,
    pub n_choices: usize,
    /// How many of the value words facts draw from.
    pub value_pool: usize,
    /// Extra filler words appended to each question.
    pub question_filler: usize,
    /// Extra filler words appended to each document.
    pub doc_filler: usize,
    pub query_key: String,
    /// Replace the corpus with gibberish that keeps only the entity tokens.
    pub noise: bool,
    /// Self-contained control tasks added to the train split.
    pub selfcontained_tasks: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            train_tasks: 64,
            eval_tasks: 4,
            facts_per_task: 50,
            instances_per_task: 50,
            n_choices: 4,
            value_pool: 16,
            question_filler: 0,
            doc_filler: 0,
            query_key: "entity".into(),
            noise: false,
            selfcontained_tasks: 0,
        }
    }
}

impl SynthConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.n_choices < 2 {
            v.push("synth.n_choices must be at least 2".into());
        }
        if self.facts_per_task < 4 || self.facts_per_task < self.n_choices {
            v.push("synth.facts_per_task must be at least 4 and at least n_choices".into());
        }
        if self.instances_per_task > self.facts_per_task {
            v.push(format!(
                "synth.instances_per_task ({}) exceeds facts_per_task ({}); one question per fact",
                self.instances_per_task, self.facts_per_task
            ));
        }
        if self.value_pool < self.n_choices || self.value_pool > VALUE_WORDS.len() {
            v.push(format!("synth.value_pool must lie in [n_choices, {}]", VALUE_WORDS.len()));
        }
        if !["entity", "relation", "question"].contains(&self.query_key.as_str()) {
            v.push(format!("synth.query_key {:?} is not a lookup field (entity, relation, question)", self.query_key));
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSuite {
    pub corpus: Vec<Document>,
    pub train: Vec<TaskDataset>,
    pub eval: Vec<TaskDataset>,
    /// Fraction of instances whose top BM25 hit on the informative corpus is
    /// the gold fact.
    pub retrieval_top1: f64,
    /// Token overlap of the gibberish with the gold facts (noise suites only).
    pub noise_overlap: Option<f64>,
    pub seed: u64,
}

/// Draws unique pseudo-words built from consonant-vowel syllables.
struct WordPool {
    used: HashSet<String>,
    consonants: &'static [u8],
    vowels: &'static [u8],
}

impl WordPool {
    fn new(consonants: &'static [u8], vowels: &'static [u8]) -> Self {
        WordPool { used: HashSet::new(), consonants, vowels }
    }

    fn word(&self, syllables: usize, rng: &mut ChaCha8Rng) -> String {
        let mut w = String::with_capacity(2 * syllables);
        for _ in 0..syllables {
            w.push(*self.consonants.choose(rng).expect("non-empty") as char);
            w.push(*self.vowels.choose(rng).expect("non-empty") as char);
        }
        w
    }

    fn fresh(&mut self, syllables: usize, rng: &mut ChaCha8Rng) -> String {
        loop {
            let w = self.word(syllables, rng);
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }
}

fn lookup_templates() -> Vec<PromptTemplate> {
    vec![
        PromptTemplate::new("question", "question : {question} answer :", "{answer}"),
        PromptTemplate::new("direct", "{entity} has which {relation} ?", "{answer}"),
        PromptTemplate::new("cloze", "the {relation} of {entity} is", "{answer}"),
    ]
}

fn filler(n: usize, rng: &mut ChaCha8Rng) -> String {
    (0..n).map(|_| *FILLER_WORDS.choose(rng).expect("non-empty")).collect::<Vec<_>>().join(" ")
}

fn with_filler(base: String, n: usize, rng: &mut ChaCha8Rng) -> String {
    if n == 0 {
        base
    } else {
        format!("{base} {}", filler(n, rng))
    }
}

/// `n_choices` distinct values containing `gold` at a uniform position.
fn choices_for(gold: &str, pool: &[&str], n: usize, rng: &mut ChaCha8Rng) -> (Vec<String>, usize) {
    let mut others: Vec<&str> = pool.iter().copied().filter(|v| *v != gold).collect();
    others.shuffle(rng);
    let mut choices: Vec<String> = others[..n - 1].iter().map(|s| s.to_string()).collect();
    let label = rng.random_range(0..n);
    choices.insert(label, gold.to_string());
    (choices, label)
}

struct GeneratedTask {
    task: TaskDataset,
    docs: Vec<Document>,
    gold_docs: Vec<String>,
}

#[allow(clippy::too_many_arguments)]
fn lookup_task(
    name: String,
    relation: &str,
    split: Split,
    cfg: &SynthConfig,
    entities: &mut WordPool,
    rng: &mut ChaCha8Rng,
) -> Result<GeneratedTask> {
    if cfg.instances_per_task > cfg.facts_per_task {
        return Err(Error::Generation(format!(
            "{} instances requested from {} facts; one question per fact",
            cfg.instances_per_task, cfg.facts_per_task
        )));
    }
    if cfg.facts_per_task < 4 {
        return Err(Error::Generation("at least 4 facts are needed for distractor choices".into()));
    }
    let pool = &VALUE_WORDS[..cfg.value_pool];
    let mut docs = Vec::with_capacity(cfg.facts_per_task);
    let mut instances = Vec::with_capacity(cfg.instances_per_task);
    let mut gold_docs = Vec::new();
    for i in 0..cfg.facts_per_task {
        let entity = entities.fresh(3, rng);
        let value = *pool.choose(rng).expect("non-empty");
        let doc_id = format!("{name}-{i:03}");
        let text = with_filler(format!("the {relation} of {entity} is {value} ."), cfg.doc_filler, rng);
        docs.push(Document::new(doc_id.clone(), text));
        if i < cfg.instances_per_task {
            let question = with_filler(format!("what is the {relation} of {entity} ?"), cfg.question_filler, rng);
            let (choices, label) = choices_for(value, pool, cfg.n_choices, rng);
            instances.push(RawInstance {
                id: format!("{i:03}"),
                fields: BTreeMap::from([
                    ("entity".to_string(), entity),
                    ("relation".to_string(), relation.to_string()),
                    ("question".to_string(), question),
                ]),
                choices,
                label,
            });
            gold_docs.push(doc_id);
        }
    }
    let task = TaskDataset {
        name,
        split,
        schema: vec!["entity".into(), "relation".into(), "question".into()],
        templates: lookup_templates(),
        query_key: cfg.query_key.clone(),
        instances,
    };
    Ok(GeneratedTask { task, docs, gold_docs })
}

/// One lookup task with its own corpus: `n_facts` documents, one question
/// for each of the first `n_instances` facts.
pub fn synth_lookup_task(n_facts: usize, n_instances: usize, seed: u64) -> Result<(Vec<Document>, TaskDataset)> {
    let cfg = SynthConfig { facts_per_task: n_facts, instances_per_task: n_instances, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entities = WordPool::new(CONSONANTS, VOWELS);
    let g = lookup_task("lookup".into(), "color", Split::Train, &cfg, &mut entities, &mut rng)?;
    Ok((g.docs, g.task))
}

/// Answer is stated in the prompt; retrieval cannot help.
pub fn synth_selfcontained_task(name: &str, n_instances: usize, seed: u64) -> Result<TaskDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool = &VALUE_WORDS[..];
    let instances = (0..n_instances)
        .map(|i| {
            let word = *pool.choose(&mut rng).expect("non-empty");
            let (choices, label) = choices_for(word, pool, 4, &mut rng);
            RawInstance {
                id: format!("{i:03}"),
                fields: BTreeMap::from([
                    ("word".to_string(), word.to_string()),
                    ("question".to_string(), format!("the secret word is {word} . what is the secret word ?")),
                ]),
                choices,
                label,
            }
        })
        .collect();
    Ok(TaskDataset {
        name: name.into(),
        split: Split::Train,
        schema: vec!["word".into(), "question".into()],
        templates: vec![
            PromptTemplate::new("question", "{question}", "{answer}"),
            PromptTemplate::new("repeat", "remember {word} . repeat it :", "{answer}"),
        ],
        query_key: "question".into(),
        instances,
    })
}

/// Replaces every token outside `keep` with gibberish, preserving document
/// ids and lengths. Returns the new corpus and the fraction of its non-kept
/// tokens that also occur in the original corpus.
pub fn noise_corpus(corpus: &[Document], keep: &HashSet<String>, seed: u64) -> Result<(Vec<Document>, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gib = WordPool::new(NOISE_CONSONANTS, NOISE_VOWELS);
    let words: Vec<String> = (0..512).map(|i| gib.fresh(2 + i % 2, &mut rng)).collect();
    let gold: HashSet<String> = corpus.iter().flat_map(|d| tokenize(&d.text)).collect();
    let (mut replaced, mut shared) = (0usize, 0usize);
    let docs = corpus
        .iter()
        .map(|d| {
            let toks: Vec<String> = tokenize(&d.text)
                .into_iter()
                .map(|t| {
                    if keep.contains(&t) {
                        return t;
                    }
                    let w = words.choose(&mut rng).expect("non-empty").clone();
                    replaced += 1;
                    shared += gold.contains(&w) as usize;
                    w
                })
                .collect();
            Document::new(d.id.clone(), toks.join(" "))
        })
        .collect();
    let overlap = if replaced == 0 { 0.0 } else { shared as f64 / replaced as f64 };
    if overlap > 0.05 {
        return Err(Error::Generation(format!("noise corpus shares {:.1}% of tokens with the facts", 100.0 * overlap)));
    }
    Ok((docs, overlap))
}

fn top1_rate(corpus: &[Document], generated: &[GeneratedTask], query_key: &str) -> Result<f64> {
    let index = Bm25Index::build(corpus.to_vec(), Bm25Params::default())?;
    let (mut hits, mut total) = (0usize, 0usize);
    for g in generated {
        for (inst, gold) in g.task.instances.iter().zip(&g.gold_docs) {
            let mut q = tokenize(&inst.fields[query_key]);
            q.truncate(20);
            total += 1;
            if let Some(top) = index.retrieve(&q, 1).first() {
                hits += (&index.doc(top.ordinal).id == gold) as usize;
            }
        }
    }
    Ok(if total == 0 { 1.0 } else { hits as f64 / total as f64 })
}

const MAX_ATTEMPTS: u64 = 8;

/// Train and eval lookup families over one shared corpus. Entities and
/// relations are unique across all tasks, so the families are disjoint.
/// Regenerates with the next seed when top-1 retrieval falls below 95%.
pub fn synth_suite(cfg: &SynthConfig, seed: u64) -> Result<SynthSuite> {
    let v = cfg.violations();
    if !v.is_empty() {
        return Err(Error::Config(v));
    }
    for attempt in 0..MAX_ATTEMPTS {
        let s = seed.wrapping_add(attempt);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let mut entities = WordPool::new(CONSONANTS, VOWELS);
        let mut relations = WordPool::new(CONSONANTS, VOWELS);
        let mut generated = Vec::new();
        let mut eval_start = 0;
        for (split, count, prefix) in [(Split::Train, cfg.train_tasks, "train"), (Split::Eval, cfg.eval_tasks, "eval")] {
            if split == Split::Eval {
                eval_start = generated.len();
            }
            for i in 0..count {
                let relation = relations.fresh(2, &mut rng);
                let name = format!("{prefix}-{i:02}-{relation}");
                generated.push(lookup_task(name, &relation, split, cfg, &mut entities, &mut rng)?);
            }
        }
        let corpus: Vec<Document> = generated.iter().flat_map(|g| g.docs.iter().cloned()).collect();
        let top1 = top1_rate(&corpus, &generated, &cfg.query_key)?;
        if top1 < 0.95 {
            continue;
        }
        let (corpus, noise_overlap) = if cfg.noise {
            let keep: HashSet<String> = generated
                .iter()
                .flat_map(|g| g.task.instances.iter().map(|i| i.fields["entity"].clone()))
                .collect();
            let (docs, overlap) = noise_corpus(&corpus, &keep, s ^ 0x006e_6f69_7365)?;
            (docs, Some(overlap))
        } else {
            (corpus, None)
        };
        let mut tasks: Vec<TaskDataset> = generated.into_iter().map(|g| g.task).collect();
        let eval = tasks.split_off(eval_start);
        let mut train = tasks;
        for i in 0..cfg.selfcontained_tasks {
            let name = format!("train-self-{i:02}");
            let n = cfg.instances_per_task;
            train.push(synth_selfcontained_task(&name, n, s.wrapping_add(1000 + i as u64))?);
        }
        return Ok(SynthSuite { corpus, train, eval, retrieval_top1: top1, noise_overlap, seed: s });
    }
    Err(Error::Generation(format!("top-1 retrieval stayed below 95% for {MAX_ATTEMPTS} seeds from {seed}")))
}

/// Count of distinct tokens per document text, used by tests and reports.
pub fn token_histogram(corpus: &[Document]) -> HashMap<String, usize> {
    let mut h = HashMap::new();
    for d in corpus {
        for t in tokenize(&d.text) {
            *h.entry(t).or_insert(0) += 1;
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompting::apply_template;

    fn small() -> SynthConfig {
        SynthConfig { train_tasks: 3, eval_tasks: 2, ..Default::default() }
    }

    #[test]
    fn lookup_task_schema() {
        let (docs, task) = synth_lookup_task(50, 50, 3).unwrap();
        assert_eq!(docs.len(), 50);
        assert_eq!(task.instances.len(), 50);
        task.validate().unwrap();
        for inst in &task.instances {
            assert_eq!(inst.choices.len(), 4);
            for t in &task.templates {
                let (input, target) = apply_template(inst, t).unwrap();
                assert!(!tokenize(&input).contains(&inst.gold().to_string()), "{input}");
                assert_eq!(target, inst.gold());
            }
        }
    }

    #[test]
    fn generation_contracts() {
        assert!(matches!(synth_lookup_task(10, 11, 0), Err(Error::Generation(_))));
        assert!(matches!(synth_lookup_task(3, 3, 0), Err(Error::Generation(_))));
    }

    #[test]
    fn suite_is_disjoint_and_retrievable() {
        let s = synth_suite(&small(), 5).unwrap();
        assert_eq!(s.train.len(), 3);
        assert_eq!(s.eval.len(), 2);
        assert_eq!(s.corpus.len(), 250);
        assert!(s.retrieval_top1 >= 0.95);
        let train_entities: HashSet<_> = s.train.iter().flat_map(|t| t.instances.iter().map(|i| i.fields["entity"].clone())).collect();
        for t in &s.eval {
            assert!(t.templates.len() >= 2);
            for i in &t.instances {
                assert!(!train_entities.contains(&i.fields["entity"]));
            }
        }
        assert_eq!(s, synth_suite(&small(), 5).unwrap());
    }

    #[test]
    fn distinct_entities_give_distinct_prompts() {
        let s = synth_suite(&small(), 2).unwrap();
        for t in s.train.iter().chain(&s.eval) {
            for tpl in &t.templates {
                let prompts: HashSet<String> =
                    t.instances.iter().map(|i| apply_template(i, tpl).unwrap().0).collect();
                assert_eq!(prompts.len(), t.instances.len());
            }
        }
    }

    #[test]
    fn noise_suite_keeps_ids_and_lengths() {
        let clean = synth_suite(&small(), 9).unwrap();
        let noisy = synth_suite(&SynthConfig { noise: true, ..small() }, 9).unwrap();
        assert!(noisy.noise_overlap.unwrap() <= 0.05);
        for (a, b) in clean.corpus.iter().zip(&noisy.corpus) {
            assert_eq!(a.id, b.id);
            assert_eq!(tokenize(&a.text).len(), tokenize(&b.text).len());
        }
        // a reader of the gibberish can do no better than chance: no value word survives
        let hist = token_histogram(&noisy.corpus);
        assert!(VALUE_WORDS.iter().all(|v| !hist.contains_key(*v)));
    }

    #[test]
    fn selfcontained_answer_is_in_prompt() {
        let t = synth_selfcontained_task("self", 20, 1).unwrap();
        t.validate().unwrap();
        for i in &t.instances {
            let (input, _) = apply_template(i, &t.templates[0]).unwrap();
            assert!(tokenize(&input).contains(&i.gold().to_string()));
        }
    }

    #[test]
    fn filler_lengthens_text() {
        let cfg = SynthConfig { question_filler: 40, doc_filler: 300, query_key: "question".into(), ..small() };
        let s = synth_suite(&cfg, 4).unwrap();
        assert!(tokenize(&s.corpus[0].text).len() > 256);
        assert!(tokenize(&s.train[0].instances[0].fields["question"]).len() > 20);
    }
}
