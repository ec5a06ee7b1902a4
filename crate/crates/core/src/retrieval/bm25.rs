use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tokenizer::tokenize;
use crate::error::{Error, Result};
use crate::io_util;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Document { id: id.into(), text: text.into() }
    }
}

pub fn load_corpus(path: &Path) -> Result<Vec<Document>> {
    io_util::read_jsonl(path)
}

pub fn save_corpus(path: &Path, docs: &[Document]) -> Result<()> {
    io_util::write_atomic(path, &io_util::jsonl_bytes(docs)?)
}

/// Keeps `round(fraction · N)` documents (at least one) chosen with a seeded
/// shuffle; survivors stay in corpus order.
pub fn subsample(docs: Vec<Document>, fraction: f64, seed: u64) -> Result<Vec<Document>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config(format!("corpus fraction {fraction} outside (0, 1]")));
    }
    if fraction == 1.0 || docs.is_empty() {
        return Ok(docs);
    }
    let keep = ((docs.len() as f64 * fraction).round() as usize).max(1);
    let mut idx: Vec<usize> = (0..docs.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut chosen = idx[..keep].to_vec();
    chosen.sort_unstable();
    let mut slots: Vec<Option<Document>> = docs.into_iter().map(Some).collect();
    Ok(chosen.into_iter().filter_map(|i| slots[i].take()).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

/// A ranked document.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredDoc {
    pub ordinal: usize,
    pub score: f64,
}

/// In-memory inverted index with the per-document statistics BM25 needs.
#[derive(Clone, Debug, PartialEq)]
pub struct Bm25Index {
    params: Bm25Params,
    docs: Vec<Document>,
    terms: Vec<String>,
    term_ids: HashMap<String, u32>,
    postings: Vec<Vec<Posting>>,
    doc_lengths: Vec<u32>,
    avg_doc_length: f64,
}

/// `ln((N − df + 0.5)/(df + 0.5) + 1)`; the `+1` keeps it non-negative.
pub fn idf(n_docs: usize, df: usize) -> f64 {
    let (n, df) = (n_docs as f64, df as f64);
    ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
}

fn term_weight(idf: f64, tf: u32, doc_len: u32, avg_len: f64, p: Bm25Params) -> f64 {
    let tf = tf as f64;
    idf * tf * (p.k1 + 1.0) / (tf + p.k1 * (1.0 - p.b + p.b * doc_len as f64 / avg_len))
}

const MAGIC: &[u8; 8] = b"ZBM25IDX";
const VERSION: u32 = 1;

impl Bm25Index {
    pub fn build(corpus: Vec<Document>, params: Bm25Params) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Ingestion("cannot index an empty corpus".into()));
        }
        let mut seen = HashMap::with_capacity(corpus.len());
        for (i, d) in corpus.iter().enumerate() {
            if let Some(prev) = seen.insert(d.id.as_str(), i) {
                return Err(Error::Ingestion(format!(
                    "duplicate document id {:?} (lines {} and {})",
                    d.id,
                    prev + 1,
                    i + 1
                )));
            }
        }
        let mut terms = Vec::new();
        let mut term_ids: HashMap<String, u32> = HashMap::new();
        let mut postings: Vec<Vec<Posting>> = Vec::new();
        let mut doc_lengths = Vec::with_capacity(corpus.len());
        for (ordinal, doc) in corpus.iter().enumerate() {
            let tokens = tokenize(&doc.text);
            doc_lengths.push(tokens.len() as u32);
            let mut counts: Vec<(u32, u32)> = Vec::new();
            let mut local: HashMap<u32, usize> = HashMap::new();
            for t in tokens {
                let id = match term_ids.get(&t) {
                    Some(&id) => id,
                    None => {
                        let id = terms.len() as u32;
                        term_ids.insert(t.clone(), id);
                        terms.push(t);
                        postings.push(Vec::new());
                        id
                    }
                };
                match local.get(&id) {
                    Some(&slot) => counts[slot].1 += 1,
                    None => {
                        local.insert(id, counts.len());
                        counts.push((id, 1));
                    }
                }
            }
            for (id, tf) in counts {
                postings[id as usize].push(Posting { doc: ordinal as u32, tf });
            }
        }
        let avg_doc_length = doc_lengths.iter().map(|&l| l as f64).sum::<f64>() / corpus.len() as f64;
        Ok(Bm25Index { params, docs: corpus, terms, term_ids, postings, doc_lengths, avg_doc_length })
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn n_docs(&self) -> usize {
        self.docs.len()
    }

    pub fn docs(&self) -> &[Document] {
        &self.docs
    }

    pub fn doc(&self, ordinal: usize) -> &Document {
        &self.docs[ordinal]
    }

    pub fn doc_lengths(&self) -> &[u32] {
        &self.doc_lengths
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.terms
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.term_ids
            .get(term)
            .map_or(&[][..], |&id| &self.postings[id as usize])
    }

    pub fn df(&self, term: &str) -> usize {
        self.postings(term).len()
    }

    /// Okapi BM25 of one document. Each query token contributes, repeats
    /// included; tokens absent from the document add nothing.
    pub fn score(&self, query: &[String], ordinal: usize) -> f64 {
        let n = self.n_docs();
        let dl = self.doc_lengths[ordinal];
        let mut total = 0.0;
        for t in query {
            let plist = self.postings(t);
            if let Ok(pos) = plist.binary_search_by_key(&(ordinal as u32), |p| p.doc) {
                total += term_weight(idf(n, plist.len()), plist[pos].tf, dl, self.avg_doc_length, self.params);
            }
        }
        total
    }

    /// Top `k` documents sharing at least one term with the query, by score
    /// descending, ties by ascending document id.
    pub fn retrieve(&self, query: &[String], k: usize) -> Vec<ScoredDoc> {
        if k == 0 {
            return Vec::new();
        }
        let n = self.n_docs();
        let mut scores = vec![0.0; n];
        let mut touched = vec![false; n];
        let mut candidates = Vec::new();
        for t in query {
            let plist = self.postings(t);
            if plist.is_empty() {
                continue;
            }
            let w_idf = idf(n, plist.len());
            for p in plist {
                let d = p.doc as usize;
                scores[d] += term_weight(w_idf, p.tf, self.doc_lengths[d], self.avg_doc_length, self.params);
                if !touched[d] {
                    touched[d] = true;
                    candidates.push(d);
                }
            }
        }
        let mut ranked: Vec<ScoredDoc> = candidates
            .into_iter()
            .map(|d| ScoredDoc { ordinal: d, score: scores[d] })
            .collect();
        ranked.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| self.docs[a.ordinal].id.cmp(&self.docs[b.ordinal].id))
        });
        ranked.truncate(k);
        ranked
    }

    /// Binary form: magic, version, parameters, documents block, vocabulary
    /// block, postings block. All integers are little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.params.k1.to_le_bytes());
        out.extend_from_slice(&self.params.b.to_le_bytes());
        out.extend_from_slice(&(self.docs.len() as u32).to_le_bytes());
        for (doc, len) in self.docs.iter().zip(&self.doc_lengths) {
            put_str(&mut out, &doc.id);
            put_str(&mut out, &doc.text);
            out.extend_from_slice(&len.to_le_bytes());
        }
        out.extend_from_slice(&(self.terms.len() as u32).to_le_bytes());
        for t in &self.terms {
            put_str(&mut out, t);
        }
        for plist in &self.postings {
            out.extend_from_slice(&(plist.len() as u32).to_le_bytes());
            for p in plist {
                out.extend_from_slice(&p.doc.to_le_bytes());
                out.extend_from_slice(&p.tf.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8)? != MAGIC {
            return Err(Error::format(path, "not a BM25 index (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported index version {version}")));
        }
        let params = Bm25Params { k1: r.f64()?, b: r.f64()? };
        let n = r.u32()? as usize;
        let mut docs = Vec::with_capacity(n);
        let mut doc_lengths = Vec::with_capacity(n);
        for _ in 0..n {
            let id = r.string()?;
            let text = r.string()?;
            docs.push(Document { id, text });
            doc_lengths.push(r.u32()?);
        }
        let n_terms = r.u32()? as usize;
        let mut terms = Vec::with_capacity(n_terms);
        for _ in 0..n_terms {
            terms.push(r.string()?);
        }
        let mut postings = Vec::with_capacity(n_terms);
        for _ in 0..n_terms {
            let c = r.u32()? as usize;
            let mut plist = Vec::with_capacity(c);
            for _ in 0..c {
                plist.push(Posting { doc: r.u32()?, tf: r.u32()? });
            }
            postings.push(plist);
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after postings block"));
        }
        let term_ids = terms.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        let avg_doc_length = doc_lengths.iter().map(|&l| l as f64).sum::<f64>() / n.max(1) as f64;
        Ok(Bm25Index { params, docs, terms, term_ids, postings, doc_lengths, avg_doc_length })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io_util::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
    path: &'b Path,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.path, "truncated index file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format(self.path, "invalid utf-8"))
    }
}

/// First `max_tokens` tokens of `text`, re-joined with single spaces.
pub fn truncate_text(text: &str, max_tokens: usize) -> String {
    let toks = tokenize(text);
    toks[..toks.len().min(max_tokens)].join(" ")
}
