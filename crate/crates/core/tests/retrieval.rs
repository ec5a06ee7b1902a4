use std::path::Path;

use proptest::prelude::*;

use zemi_core::prompting::{synth_suite, SynthConfig};
use zemi_core::retrieval::{
    batch_retrieve_offline, idf, retrieve_records, tokenize, truncate_text, Bm25Index, Bm25Params, Document,
    RetrievalCache, RetrievalSettings,
};

const WORDS: [&str; 8] = ["alpha", "beta", "gamma", "delta", "eps", "zeta", "eta", "theta"];

fn corpus_strategy() -> impl Strategy<Value = Vec<Document>> {
    prop::collection::vec(prop::collection::vec(0usize..WORDS.len(), 1..10), 1..40).prop_map(|docs| {
        docs.into_iter()
            .enumerate()
            .map(|(i, ws)| Document::new(format!("doc{:02}", (i * 7) % 97), ws.iter().map(|&w| WORDS[w]).collect::<Vec<_>>().join(" ")))
            .collect()
    })
}

fn query_strategy() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(0usize..WORDS.len() + 1, 1..5)
        .prop_map(|q| q.into_iter().map(|i| WORDS.get(i).copied().unwrap_or("absent").to_string()).collect())
}

/// Direct evaluation of the Okapi formula per document.
fn brute_force(docs: &[Document], query: &[String], k: usize, p: Bm25Params) -> Vec<(String, f64)> {
    let toks: Vec<Vec<String>> = docs.iter().map(|d| tokenize(&d.text)).collect();
    let n = docs.len() as f64;
    let avg = toks.iter().map(Vec::len).sum::<usize>() as f64 / n;
    let mut out: Vec<(String, f64)> = docs
        .iter()
        .zip(&toks)
        .filter(|(_, t)| query.iter().any(|q| t.contains(q)))
        .map(|(d, t)| {
            let s = query
                .iter()
                .map(|q| {
                    let tf = t.iter().filter(|w| *w == q).count() as f64;
                    if tf == 0.0 {
                        return 0.0;
                    }
                    let df = toks.iter().filter(|o| o.contains(q)).count() as f64;
                    let w = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
                    w * tf * (p.k1 + 1.0) / (tf + p.k1 * (1.0 - p.b + p.b * t.len() as f64 / avg))
                })
                .sum();
            (d.id.clone(), s)
        })
        .collect();
    out.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    out.truncate(k);
    out
}

proptest! {
    #[test]
    fn retrieve_matches_brute_force(docs in corpus_strategy(), query in query_strategy(), k in 1usize..10, k1 in 0.0f64..3.0, b in 0.0f64..=1.0) {
        let p = Bm25Params { k1, b };
        let index = Bm25Index::build(docs.clone(), p).unwrap();
        let got: Vec<(String, f64)> = index.retrieve(&query, k).iter().map(|h| (index.doc(h.ordinal).id.clone(), h.score)).collect();
        let want = brute_force(&docs, &query, k, p);
        prop_assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(&want) {
            prop_assert_eq!(&g.0, &w.0);
            prop_assert!((g.1 - w.1).abs() <= 1e-12 * w.1.abs().max(1.0));
        }
    }

    #[test]
    fn scores_are_positive_and_sorted(docs in corpus_strategy(), query in query_strategy()) {
        let index = Bm25Index::build(docs, Bm25Params::default()).unwrap();
        let hits = index.retrieve(&query, 100);
        prop_assert!(hits.iter().all(|h| h.score > 0.0));
        prop_assert!(hits.windows(2).all(|w| w[0].score >= w[1].score));
        for h in &hits {
            prop_assert_eq!(h.score, index.score(&query, h.ordinal));
        }
    }

    #[test]
    fn idf_decreases_with_document_frequency(n in 1usize..1000, df in 0usize..999) {
        prop_assume!(df < n);
        prop_assert!(idf(n, df) > idf(n, df + 1));
        prop_assert!(idf(n, df + 1) > 0.0);
    }

    #[test]
    fn extra_occurrence_raises_the_term_weight(words in prop::collection::vec(0usize..WORDS.len(), 1..8), others in corpus_strategy(), term in 0usize..WORDS.len()) {
        // same length on both sides: swap one non-query token for the query term
        let query = vec![WORDS[term].to_string()];
        let base: Vec<&str> = words.iter().map(|&w| WORDS[w]).collect();
        let Some(pos) = base.iter().position(|w| *w != WORDS[term]) else { return Ok(()) };
        let mut more = base.clone();
        more[pos] = WORDS[term];
        let mut da = others.clone();
        da.push(Document::new("zz-target", base.join(" ")));
        let mut db = others;
        db.push(Document::new("zz-target", more.join(" ")));
        let (ia, ib) = (Bm25Index::build(da, Bm25Params::default()).unwrap(), Bm25Index::build(db, Bm25Params::default()).unwrap());
        let last = ia.n_docs() - 1;
        // df may grow by one, so compare against the idf-normalized weight
        let wa = ia.score(&query, last) / idf(ia.n_docs(), ia.df(WORDS[term]).max(1));
        let wb = ib.score(&query, last) / idf(ib.n_docs(), ib.df(WORDS[term]));
        prop_assert!(wb > wa);
    }

    #[test]
    fn index_bytes_roundtrip(docs in corpus_strategy()) {
        let index = Bm25Index::build(docs, Bm25Params::default()).unwrap();
        let bytes = index.to_bytes();
        let back = Bm25Index::from_bytes(&bytes, Path::new("mem")).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back.docs(), index.docs());
    }

    #[test]
    fn truncation_caps_tokens(words in prop::collection::vec(0usize..WORDS.len(), 0..40), max in 1usize..30) {
        let text = words.iter().map(|&w| WORDS[w]).collect::<Vec<_>>().join(" ");
        let t = truncate_text(&text, max);
        let toks = tokenize(&t);
        prop_assert!(toks.len() <= max);
        prop_assert_eq!(&toks[..], &tokenize(&text)[..toks.len()]);
    }
}

#[test]
fn cache_roundtrip_and_determinism() {
    let cfg = SynthConfig { train_tasks: 3, eval_tasks: 1, facts_per_task: 12, instances_per_task: 8, ..Default::default() };
    let suite = synth_suite(&cfg, 11).unwrap();
    let index = Bm25Index::build(suite.corpus.clone(), Bm25Params::default()).unwrap();
    let settings = RetrievalSettings { k: 3, ..Default::default() };
    let dir = tempfile::tempdir().unwrap();
    let (pa, pb) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    let a = batch_retrieve_offline(&index, &suite.train, &settings, &pa).unwrap();
    batch_retrieve_offline(&index, &suite.train, &settings, &pb).unwrap();
    assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
    let back = RetrievalCache::load(&pa).unwrap();
    assert_eq!(back, a);
    assert_eq!(back.records.len(), 24);
    let first = &suite.train[0];
    let rec = back.get(&first.name, &first.instances[0].id).unwrap();
    assert!(rec.hits.len() <= 3);
}

#[test]
fn corrupted_cache_is_rejected() {
    let cfg = SynthConfig { train_tasks: 1, eval_tasks: 1, facts_per_task: 6, instances_per_task: 4, ..Default::default() };
    let suite = synth_suite(&cfg, 2).unwrap();
    let index = Bm25Index::build(suite.corpus.clone(), Bm25Params::default()).unwrap();
    let records = retrieve_records(&index, &suite.train, &RetrievalSettings::default()).unwrap();
    let cache = RetrievalCache::new(RetrievalSettings::default(), records).unwrap();
    let text = String::from_utf8(cache.to_bytes().unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.jsonl");
    let dropped: Vec<&str> = text.lines().take(text.lines().count() - 1).collect();
    std::fs::write(&path, dropped.join("\n")).unwrap();
    assert!(RetrievalCache::load(&path).is_err());
    std::fs::write(&path, text.replacen("zemi-retrieval-cache", "other", 1)).unwrap();
    assert!(RetrievalCache::load(&path).is_err());
}
