//! BM25 document retrieval: tokenizer, inverted index and offline cache.

pub mod bm25;
pub mod cache;
pub mod tokenizer;

pub use bm25::{idf, load_corpus, save_corpus, subsample, truncate_text, Bm25Index, Bm25Params, Document, Posting, ScoredDoc};
pub use cache::{
    batch_retrieve_offline, build_query, instance_key, retrieve_hits, retrieve_records, Hit, RetrievalCache,
    RetrievalRecord, RetrievalSettings,
};
pub use tokenizer::{tokenize, Vocabulary, EOS, PAD, SEP, UNK};
