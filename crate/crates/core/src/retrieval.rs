//! Inverted index and BM25 top-k retrieval.
//!
//! The scoring function is the Lucene variant:
//!
//! ```text
//! score(q, d) = sum over query token occurrences t of
//!               idf(t) * tf / (tf + k1 * (1 - b + b * dl/avgdl))
//! idf(t)      = ln(1 + (N - df + 0.5) / (df + 0.5))
//! ```
//!
//! There is no `(k1 + 1)` numerator factor, and each occurrence of a token in
//! the query contributes its term score again (bag-of-words query). Ties are
//! broken by ascending document ordinal so rankings are reproducible.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;

#[derive(Debug, thiserror::Error)]
pub enum IndexError {
    #[error("cannot index an empty corpus")]
    EmptyCorpus,
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed index snapshot {path}: {message}")]
    Malformed { path: String, message: String },
}

/// BM25 hyperparameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

impl Bm25Params {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.k1 >= 0.0) {
            return Err(format!("k1 must be >= 0, got {}", self.k1));
        }
        if !(0.0..=1.0).contains(&self.b) {
            return Err(format!("b must be in [0, 1], got {}", self.b));
        }
        Ok(())
    }
}

/// A descending-score ranking of item ids.
pub type RankedList = Vec<(String, f64)>;

/// Postings, document lengths, and collection statistics over a corpus.
///
/// Immutable after build; `retrieve` and `score` are pure and safe to call
/// from many threads at once.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InvertedIndex {
    /// token id -> sorted (doc ordinal, term frequency) pairs.
    postings: Vec<Vec<(u32, u32)>>,
    /// doc ordinal -> token count over title + body.
    doc_lengths: Vec<u32>,
    /// doc ordinal -> item id, in corpus order.
    doc_ids: Vec<String>,
    /// token -> token id, identical to the corpus vocabulary mapping.
    token_ids: HashMap<String, u32>,
    avgdl: f64,
    doc_count: usize,
}

impl InvertedIndex {
    /// Builds the index over title + body tokens of every document.
    pub fn build(corpus: &Corpus) -> Result<Self, IndexError> {
        if corpus.is_empty() {
            return Err(IndexError::EmptyCorpus);
        }
        let vocab = corpus.vocabulary();
        let mut postings = vec![Vec::new(); vocab.len()];
        let mut doc_lengths = Vec::with_capacity(corpus.len());
        let mut doc_ids = Vec::with_capacity(corpus.len());
        for (ordinal, doc) in corpus.documents().iter().enumerate() {
            let tokens = doc.tokens();
            doc_lengths.push(tokens.len() as u32);
            doc_ids.push(doc.id.clone());
            let mut counts: HashMap<u32, u32> = HashMap::new();
            for tok in &tokens {
                let id = vocab.id(tok).expect("corpus vocabulary covers its docs");
                *counts.entry(id).or_insert(0) += 1;
            }
            let mut counts: Vec<(u32, u32)> = counts.into_iter().collect();
            counts.sort_unstable();
            for (tok_id, tf) in counts {
                postings[tok_id as usize].push((ordinal as u32, tf));
            }
        }
        let total: u64 = doc_lengths.iter().map(|&l| u64::from(l)).sum();
        let avgdl = total as f64 / doc_lengths.len() as f64;
        let token_ids = vocab
            .tokens()
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Self {
            postings,
            doc_lengths,
            doc_ids,
            token_ids,
            avgdl,
            doc_count: corpus.len(),
        })
    }

    pub fn doc_count(&self) -> usize {
        self.doc_count
    }

    pub fn avgdl(&self) -> f64 {
        self.avgdl
    }

    pub fn vocab_size(&self) -> usize {
        self.postings.len()
    }

    pub fn doc_length(&self, ordinal: usize) -> u32 {
        self.doc_lengths[ordinal]
    }

    pub fn doc_id(&self, ordinal: usize) -> &str {
        &self.doc_ids[ordinal]
    }

    /// Number of documents containing the token.
    pub fn doc_frequency(&self, token: &str) -> usize {
        self.token_ids
            .get(token)
            .map_or(0, |&id| self.postings[id as usize].len())
    }

    /// Term frequency of `token` in the document at `ordinal`.
    pub fn term_frequency(&self, token: &str, ordinal: usize) -> u32 {
        let Some(&id) = self.token_ids.get(token) else {
            return 0;
        };
        let list = &self.postings[id as usize];
        match list.binary_search_by_key(&(ordinal as u32), |&(d, _)| d) {
            Ok(pos) => list[pos].1,
            Err(_) => 0,
        }
    }

    fn idf(&self, df: usize) -> f64 {
        let n = self.doc_count as f64;
        let df = df as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// BM25 score of one document for the given query tokens. Unknown tokens
    /// contribute 0; an empty query scores 0.
    pub fn score(&self, params: Bm25Params, query_tokens: &[String], ordinal: usize) -> f64 {
        let dl = f64::from(self.doc_lengths[ordinal]);
        let norm = params.k1 * (1.0 - params.b + params.b * dl / self.avgdl);
        let mut total = 0.0;
        for tok in query_tokens {
            let tf = f64::from(self.term_frequency(tok, ordinal));
            if tf == 0.0 {
                continue;
            }
            let df = self.doc_frequency(tok);
            total += self.idf(df) * tf / (tf + norm);
        }
        total
    }

    /// Top-k documents by BM25 score. Only positive scores are returned; ties
    /// break by ascending ordinal.
    pub fn retrieve(&self, params: Bm25Params, query_tokens: &[String], k: usize) -> RankedList {
        assert!(k >= 1, "retrieve requires k >= 1");
        let mut scores: Vec<f64> = vec![0.0; self.doc_count];
        for tok in query_tokens {
            let Some(&id) = self.token_ids.get(tok) else {
                continue;
            };
            let list = &self.postings[id as usize];
            let idf = self.idf(list.len());
            for &(ordinal, tf) in list {
                let dl = f64::from(self.doc_lengths[ordinal as usize]);
                let norm = params.k1 * (1.0 - params.b + params.b * dl / self.avgdl);
                let tf = f64::from(tf);
                scores[ordinal as usize] += idf * tf / (tf + norm);
            }
        }
        let mut hits: Vec<(usize, f64)> = scores
            .into_iter()
            .enumerate()
            .filter(|&(_, s)| s > 0.0)
            .collect();
        hits.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        hits.truncate(k);
        hits.into_iter()
            .map(|(ordinal, s)| (self.doc_ids[ordinal].clone(), s))
            .collect()
    }

    /// Writes a JSON snapshot. The corpus file remains the source of truth;
    /// this is a convenience for inspection and warm starts.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), IndexError> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| IndexError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        serde_json::to_writer(BufWriter::new(file), self).map_err(|e| IndexError::Malformed {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, IndexError> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| IndexError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        serde_json::from_reader(BufReader::new(file)).map_err(|e| IndexError::Malformed {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Document;

    fn doc(id: &str, title: &str) -> Document {
        Document {
            id: id.to_string(),
            title: title.to_string(),
            body: String::new(),
            category: None,
        }
    }

    fn toks(words: &[&str]) -> Vec<String> {
        words.iter().map(|w| w.to_string()).collect()
    }

    /// d1 "red shoes", d2 "blue shoes", d3 "red hat".
    fn three_doc_index() -> InvertedIndex {
        let corpus = Corpus::from_documents(vec![
            doc("d1", "red shoes"),
            doc("d2", "blue shoes"),
            doc("d3", "red hat"),
        ])
        .unwrap();
        InvertedIndex::build(&corpus).unwrap()
    }

    #[test]
    fn build_counts_by_hand() {
        let corpus = Corpus::from_documents(vec![doc("d1", "a a b")]).unwrap();
        let index = InvertedIndex::build(&corpus).unwrap();
        assert_eq!(index.doc_frequency("a"), 1);
        assert_eq!(index.doc_frequency("b"), 1);
        assert_eq!(index.term_frequency("a", 0), 2);
        assert_eq!(index.doc_length(0), 3);
        assert_eq!(index.avgdl(), 3.0);
    }

    #[test]
    fn empty_corpus_rejected() {
        let corpus = Corpus::from_documents(vec![]).unwrap();
        assert!(matches!(
            InvertedIndex::build(&corpus),
            Err(IndexError::EmptyCorpus)
        ));
    }

    #[test]
    fn identical_docs_share_df() {
        let corpus =
            Corpus::from_documents(vec![doc("d1", "red shoes"), doc("d2", "red shoes")]).unwrap();
        let index = InvertedIndex::build(&corpus).unwrap();
        assert_eq!(index.doc_frequency("red"), 2);
        assert_eq!(index.doc_frequency("shoes"), 2);
    }

    #[test]
    fn avgdl_matches_mean_exactly() {
        let index = three_doc_index();
        let total: u32 = (0..index.doc_count()).map(|i| index.doc_length(i)).sum();
        let mean = f64::from(total) / index.doc_count() as f64;
        assert!((index.avgdl() - mean).abs() < 1e-9);
    }

    #[test]
    fn score_matches_hand_evaluation() {
        let index = three_doc_index();
        let params = Bm25Params::default();
        let query = toks(&["red"]);
        // idf = ln(1 + (3-2+0.5)/(2+0.5)) = ln(1.6); tf norm = 1/(1+1.2).
        let expected = 1.6f64.ln() / 2.2;
        assert!((index.score(params, &query, 0) - expected).abs() < 1e-12);
        assert_eq!(index.score(params, &query, 1), 0.0);
        // d1 and d3 are symmetric for "red".
        assert!((index.score(params, &query, 0) - index.score(params, &query, 2)).abs() < 1e-12);
        assert!((expected - 0.2136).abs() < 5e-4);
    }

    #[test]
    fn empty_and_unknown_queries_score_zero() {
        let index = three_doc_index();
        let params = Bm25Params::default();
        assert_eq!(index.score(params, &[], 0), 0.0);
        assert_eq!(index.score(params, &toks(&["zzz"]), 0), 0.0);
        assert!(index.retrieve(params, &toks(&["zzz"]), 10).is_empty());
    }

    #[test]
    fn duplicate_query_tokens_add_per_occurrence() {
        let index = three_doc_index();
        let params = Bm25Params::default();
        let once = index.score(params, &toks(&["red"]), 0);
        let twice = index.score(params, &toks(&["red", "red"]), 0);
        assert!((twice - 2.0 * once).abs() < 1e-12);
    }

    #[test]
    fn retrieve_breaks_ties_by_ordinal() {
        let index = three_doc_index();
        let params = Bm25Params::default();
        let ranked = index.retrieve(params, &toks(&["red"]), 10);
        let ids: Vec<&str> = ranked.iter().map(|(id, _)| id.as_str()).collect();
        assert_eq!(ids, vec!["d1", "d3"]);
        assert!((ranked[0].1 - ranked[1].1).abs() < 1e-12);

        let top1 = index.retrieve(params, &toks(&["red"]), 1);
        assert_eq!(top1.len(), 1);
        assert_eq!(top1[0].0, "d1");
    }

    #[test]
    fn retrieve_full_returns_all_positive() {
        let index = three_doc_index();
        let params = Bm25Params::default();
        let ranked = index.retrieve(params, &toks(&["shoes", "hat"]), index.doc_count());
        assert_eq!(ranked.len(), 3);
        for window in ranked.windows(2) {
            assert!(window[0].1 >= window[1].1);
        }
    }

    #[test]
    fn term_monotone_in_occurrences() {
        // Appending another "red" to d1's body never lowers d1's score for
        // the query ["red"], even though dl and avgdl move too.
        let base = Corpus::from_documents(vec![
            doc("d1", "red shoes"),
            doc("d2", "blue shoes"),
            doc("d3", "red hat"),
        ])
        .unwrap();
        let grown = Corpus::from_documents(vec![
            Document {
                id: "d1".into(),
                title: "red shoes".into(),
                body: "red".into(),
                category: None,
            },
            doc("d2", "blue shoes"),
            doc("d3", "red hat"),
        ])
        .unwrap();
        let params = Bm25Params::default();
        let query = toks(&["red"]);
        let before = InvertedIndex::build(&base).unwrap().score(params, &query, 0);
        let after = InvertedIndex::build(&grown)
            .unwrap()
            .score(params, &query, 0);
        assert!(after >= before - 1e-12, "before {before} after {after}");
    }

    #[test]
    fn snapshot_roundtrip() {
        let index = three_doc_index();
        let f = tempfile::NamedTempFile::new().unwrap();
        index.save(f.path()).unwrap();
        let reloaded = InvertedIndex::load(f.path()).unwrap();
        let params = Bm25Params::default();
        let q = toks(&["red", "shoes"]);
        for ordinal in 0..3 {
            assert_eq!(
                index.score(params, &q, ordinal),
                reloaded.score(params, &q, ordinal)
            );
        }
        assert_eq!(index.avgdl(), reloaded.avgdl());
    }
}
