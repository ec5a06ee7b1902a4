//! Offline retrieval: per-instance queries, top-k hits, and the JSONL cache
//! that training and evaluation read instead of querying the index.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::bm25::{truncate_text, Bm25Index};
use super::tokenizer::tokenize;
use crate::error::{Error, Result};
use crate::io_util;
use crate::prompting::{RawInstance, TaskDataset};

pub const CACHE_FORMAT: &str = "zemi-retrieval-cache";
pub const CACHE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalSettings {
    pub k: usize,
    pub max_query_tokens: usize,
    pub max_doc_tokens: usize,
}

impl Default for RetrievalSettings {
    fn default() -> Self {
        RetrievalSettings { k: 5, max_query_tokens: 20, max_doc_tokens: 256 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub doc_id: String,
    pub score: f64,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRecord {
    pub instance_id: String,
    pub query: Vec<String>,
    pub hits: Vec<Hit>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheHeader {
    pub format: String,
    pub version: u32,
    pub settings: RetrievalSettings,
    pub records: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalCache {
    pub header: CacheHeader,
    pub records: Vec<RetrievalRecord>,
    by_id: HashMap<String, usize>,
}

/// Key of an instance inside the cache.
pub fn instance_key(task: &str, instance_id: &str) -> String {
    format!("{task}/{instance_id}")
}

/// Tokenized value of `query_key`, cut to the first `max_tokens` tokens.
pub fn build_query(task: &str, inst: &RawInstance, query_key: &str, max_tokens: usize) -> Result<Vec<String>> {
    let Some(value) = inst.fields.get(query_key) else {
        let available: Vec<&str> = inst.fields.keys().map(String::as_str).collect();
        return Err(Error::config(format!(
            "task {task:?}: query key {query_key:?} missing from instance {:?} (available fields: {})",
            inst.id,
            available.join(", ")
        )));
    };
    let mut toks = tokenize(value);
    toks.truncate(max_tokens);
    Ok(toks)
}

pub fn retrieve_hits(index: &Bm25Index, query: &[String], settings: &RetrievalSettings) -> Vec<Hit> {
    index
        .retrieve(query, settings.k)
        .into_iter()
        .map(|s| {
            let doc = index.doc(s.ordinal);
            Hit { doc_id: doc.id.clone(), score: s.score, text: truncate_text(&doc.text, settings.max_doc_tokens) }
        })
        .collect()
}

/// One record per instance, in task then instance order.
pub fn retrieve_records(index: &Bm25Index, tasks: &[TaskDataset], settings: &RetrievalSettings) -> Result<Vec<RetrievalRecord>> {
    let mut out = Vec::new();
    for task in tasks {
        for inst in &task.instances {
            let query = build_query(&task.name, inst, &task.query_key, settings.max_query_tokens)?;
            let hits = retrieve_hits(index, &query, settings);
            out.push(RetrievalRecord { instance_id: instance_key(&task.name, &inst.id), query, hits });
        }
    }
    Ok(out)
}

impl RetrievalCache {
    pub fn new(settings: RetrievalSettings, records: Vec<RetrievalRecord>) -> Result<Self> {
        let header = CacheHeader {
            format: CACHE_FORMAT.into(),
            version: CACHE_VERSION,
            settings,
            records: records.len(),
        };
        let mut by_id = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if by_id.insert(r.instance_id.clone(), i).is_some() {
                return Err(Error::Contract(format!("duplicate cache record {:?}", r.instance_id)));
            }
        }
        Ok(RetrievalCache { header, records, by_id })
    }

    pub fn settings(&self) -> RetrievalSettings {
        self.header.settings
    }

    pub fn get(&self, task: &str, instance_id: &str) -> Option<&RetrievalRecord> {
        self.by_id.get(&instance_key(task, instance_id)).map(|&i| &self.records[i])
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = io_util::jsonl_bytes(std::iter::once(&self.header))?;
        out.extend(io_util::jsonl_bytes(&self.records)?);
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io_util::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or_else(|| Error::format(path, "missing header line"))?;
        let header: CacheHeader =
            serde_json::from_str(first).map_err(|e| Error::format(path, format!("header: {e}")))?;
        if header.format != CACHE_FORMAT || header.version != CACHE_VERSION {
            return Err(Error::format(path, format!("unsupported cache {} v{}", header.format, header.version)));
        }
        let records = lines
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1))))
            .collect::<Result<Vec<RetrievalRecord>>>()?;
        if records.len() != header.records {
            return Err(Error::format(path, format!("header announces {} records, found {}", header.records, records.len())));
        }
        Self::new(header.settings, records)
    }
}

/// Retrieves for every instance of `tasks` and writes the cache atomically.
pub fn batch_retrieve_offline(
    index: &Bm25Index,
    tasks: &[TaskDataset],
    settings: &RetrievalSettings,
    out_path: &Path,
) -> Result<RetrievalCache> {
    let cache = RetrievalCache::new(*settings, retrieve_records(index, tasks, settings)?)?;
    cache.save(out_path)?;
    Ok(cache)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::prompting::{PromptTemplate, Split};
    use crate::retrieval::bm25::{Bm25Params, Document};

    fn inst(id: &str, q: &str) -> RawInstance {
        RawInstance {
            id: id.into(),
            fields: BTreeMap::from([("question".to_string(), q.to_string())]),
            choices: vec!["a".into(), "b".into()],
            label: 0,
        }
    }

    fn task(instances: Vec<RawInstance>) -> TaskDataset {
        TaskDataset {
            name: "t".into(),
            split: Split::Train,
            schema: vec!["question".into()],
            templates: vec![PromptTemplate::new("p", "{question}", "{answer}")],
            query_key: "question".into(),
            instances,
        }
    }

    #[test]
    fn query_truncation() {
        let short = build_query("t", &inst("0", "a b c"), "question", 20).unwrap();
        assert_eq!(short.len(), 3);
        let long: Vec<String> = (0..40).map(|i| format!("w{i}")).collect();
        let q = build_query("t", &inst("0", &long.join(" ")), "question", 20).unwrap();
        assert_eq!(q, long[..20]);
    }

    #[test]
    fn missing_query_key_lists_fields() {
        let err = build_query("t", &inst("0", "x"), "passage", 20).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("passage") && msg.contains("question") && msg.contains("\"t\""), "{msg}");
    }

    #[test]
    fn empty_dataset_gives_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let index = Bm25Index::build(vec![Document::new("d", "x")], Bm25Params::default()).unwrap();
        let path = dir.path().join("c.jsonl");
        let c = batch_retrieve_offline(&index, &[task(vec![])], &RetrievalSettings::default(), &path).unwrap();
        assert!(c.records.is_empty());
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert_eq!(RetrievalCache::load(&path).unwrap(), c);
    }

    #[test]
    fn records_are_ordered_and_bounded() {
        let docs: Vec<_> = (0..30).map(|i| Document::new(format!("d{i:02}"), format!("word{} word{} shared", i % 7, i % 5))).collect();
        let index = Bm25Index::build(docs, Bm25Params::default()).unwrap();
        let t = task((0..10).map(|i| inst(&i.to_string(), &format!("word{i} shared"))).collect());
        let recs = retrieve_records(&index, &[t], &RetrievalSettings::default()).unwrap();
        assert_eq!(recs.len(), 10);
        for r in &recs {
            assert!(r.hits.len() <= 5);
            assert!(r.hits.windows(2).all(|w| w[0].score >= w[1].score));
        }
    }
}
