//! Document corpus, tokenization, and ground-truth relevance loading.
//!
//! File formats are line-oriented JSON (one object per line, UTF-8):
//!
//! - documents: `{"id": str, "title": str, "body": str, "category": str|null}`
//! - relevance: `{"state_id": str, "task": "product_search"|"seq_rec"|"rerank",
//!   "payload": ..., "targets": [{"item_id": str, "gain": number}, ...]}`
//!
//! Everything here is immutable after load and safe to share across threads.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record at {path}:{line}: {message}")]
    Malformed {
        path: String,
        line: usize,
        message: String,
    },
    #[error("duplicate document id {0:?}")]
    DuplicateDocId(String),
    #[error("duplicate state id {0:?}")]
    DuplicateStateId(String),
    #[error("document {0:?} has an empty title after tokenization")]
    EmptyTitle(String),
    #[error("state {state_id:?} references unknown item {item_id:?}")]
    UnknownItem { state_id: String, item_id: String },
    #[error("state {state_id:?} has a negative gain for item {item_id:?}")]
    NegativeGain { state_id: String, item_id: String },
    #[error("state {state_id:?} has no target with positive gain")]
    NoPositiveTarget { state_id: String },
    #[error("state {state_id:?} is invalid: {message}")]
    BadState { state_id: String, message: String },
}

fn io_err(path: &Path, source: std::io::Error) -> CorpusError {
    CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Lowercases and splits on maximal runs of non-alphanumeric characters.
/// No stemming, no stopword removal; empty pieces are dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

/// One item in the retrievable pool.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Document {
    pub id: String,
    pub title: String,
    pub body: String,
    pub category: Option<String>,
}

impl Document {
    /// Tokens of title followed by body; documents are scored over both.
    pub fn tokens(&self) -> Vec<String> {
        let mut toks = tokenize(&self.title);
        toks.extend(tokenize(&self.body));
        toks
    }
}

/// Distinct tokens with dense ids assigned in first-occurrence order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn insert(&mut self, token: &str) -> u32 {
        if let Some(&id) = self.ids.get(token) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(token.to_string());
        self.ids.insert(token.to_string(), id);
        id
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Stable 64-bit digest of the token list, for checkpoint compatibility
    /// checks. FNV-1a over tokens separated by NUL.
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in &self.tokens {
            for b in t.as_bytes() {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x100_0000_01b3);
            }
            // Token separator so ["ab","c"] and ["a","bc"] hash apart.
            h = h.wrapping_mul(0x100_0000_01b3);
        }
        h
    }
}

/// The item pool plus the vocabulary over all title/body tokens.
#[derive(Debug, Clone)]
pub struct Corpus {
    documents: Vec<Document>,
    doc_index: HashMap<String, usize>,
    vocabulary: Vocabulary,
}

impl Corpus {
    /// Builds a corpus from documents, assigning vocabulary ids in document
    /// order. Rejects duplicate ids and documents whose title tokenizes to
    /// nothing.
    pub fn from_documents(documents: Vec<Document>) -> Result<Self, CorpusError> {
        let mut doc_index = HashMap::with_capacity(documents.len());
        let mut vocabulary = Vocabulary::default();
        for (ordinal, doc) in documents.iter().enumerate() {
            if doc_index.insert(doc.id.clone(), ordinal).is_some() {
                return Err(CorpusError::DuplicateDocId(doc.id.clone()));
            }
            if tokenize(&doc.title).is_empty() {
                return Err(CorpusError::EmptyTitle(doc.id.clone()));
            }
            for tok in doc.tokens() {
                vocabulary.insert(&tok);
            }
        }
        Ok(Self {
            documents,
            doc_index,
            vocabulary,
        })
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    pub fn ordinal(&self, doc_id: &str) -> Option<usize> {
        self.doc_index.get(doc_id).copied()
    }

    pub fn document(&self, doc_id: &str) -> Option<&Document> {
        self.ordinal(doc_id).map(|i| &self.documents[i])
    }

    /// Reads a documents file (one JSON object per line).
    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| io_err(path, e))?;
        let mut documents = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| io_err(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let doc: Document =
                serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    message: e.to_string(),
                })?;
            documents.push(doc);
        }
        Self::from_documents(documents)
    }

    /// Writes the documents back out in the load format, one per line.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        let path = path.as_ref();
        let mut out = File::create(path).map_err(|e| io_err(path, e))?;
        for doc in &self.documents {
            let line = serde_json::to_string(doc).expect("document serializes");
            writeln!(out, "{line}").map_err(|e| io_err(path, e))?;
        }
        Ok(())
    }
}

/// Which environment a state belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    ProductSearch,
    SeqRec,
    Rerank,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskKind::ProductSearch => write!(f, "product_search"),
            TaskKind::SeqRec => write!(f, "seq_rec"),
            TaskKind::Rerank => write!(f, "rerank"),
        }
    }
}

/// Task-specific input carried by a state.
#[derive(Debug, Clone, PartialEq)]
pub enum StatePayload {
    /// Raw query text.
    Query(String),
    /// Interaction history, oldest first, as item ids.
    History(Vec<String>),
    /// Query text plus an ordered candidate list to permute.
    Candidates { query: String, candidates: Vec<String> },
}

/// One input to the policy: id, task kind, payload.
#[derive(Debug, Clone, PartialEq)]
pub struct StateRecord {
    pub id: String,
    pub task: TaskKind,
    pub payload: StatePayload,
}

/// A graded target item for one state.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Target {
    pub item_id: String,
    pub gain: f64,
}

/// Maps each state to its states and graded ground-truth items.
#[derive(Debug, Clone, Default)]
pub struct RelevanceDict {
    states: Vec<StateRecord>,
    state_index: HashMap<String, usize>,
    targets: Vec<Vec<Target>>,
}

#[derive(Debug, Deserialize)]
struct RelevanceLine {
    state_id: String,
    task: TaskKind,
    payload: serde_json::Value,
    targets: Vec<Target>,
}

#[derive(Debug, Deserialize)]
struct RerankPayload {
    query: String,
    candidates: Vec<String>,
}

impl RelevanceDict {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn states(&self) -> &[StateRecord] {
        &self.states
    }

    pub fn state(&self, state_id: &str) -> Option<&StateRecord> {
        self.state_index.get(state_id).map(|&i| &self.states[i])
    }

    /// Targets in file order; gains preserved as given.
    pub fn targets(&self, state_id: &str) -> Option<&[Target]> {
        self.state_index
            .get(state_id)
            .map(|&i| self.targets[i].as_slice())
    }

    /// Validates and inserts one state with its targets.
    pub fn insert(
        &mut self,
        state: StateRecord,
        targets: Vec<Target>,
        corpus: &Corpus,
    ) -> Result<(), CorpusError> {
        let state_id = state.id.clone();
        for t in &targets {
            if corpus.ordinal(&t.item_id).is_none() {
                return Err(CorpusError::UnknownItem {
                    state_id,
                    item_id: t.item_id.clone(),
                });
            }
            if !t.gain.is_finite() || t.gain < 0.0 {
                return Err(CorpusError::NegativeGain {
                    state_id,
                    item_id: t.item_id.clone(),
                });
            }
        }
        if !targets.iter().any(|t| t.gain > 0.0) {
            return Err(CorpusError::NoPositiveTarget { state_id });
        }
        validate_payload(&state, corpus)?;
        if self.state_index.contains_key(&state.id) {
            return Err(CorpusError::DuplicateStateId(state_id));
        }
        self.state_index.insert(state.id.clone(), self.states.len());
        self.states.push(state);
        self.targets.push(targets);
        Ok(())
    }

    /// Reads a relevance file (one JSON object per line), validating every
    /// referenced item against the corpus.
    pub fn load(path: impl AsRef<Path>, corpus: &Corpus) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| io_err(path, e))?;
        let mut dict = Self::default();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| io_err(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let raw: RelevanceLine =
                serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    message: e.to_string(),
                })?;
            let payload = parse_payload(&raw).map_err(|message| CorpusError::Malformed {
                path: path.display().to_string(),
                line: lineno + 1,
                message,
            })?;
            let state = StateRecord {
                id: raw.state_id,
                task: raw.task,
                payload,
            };
            dict.insert(state, raw.targets, corpus)?;
        }
        Ok(dict)
    }

    /// Writes states and targets back out in the load format.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        let path = path.as_ref();
        let mut out = File::create(path).map_err(|e| io_err(path, e))?;
        for (state, targets) in self.states.iter().zip(&self.targets) {
            let payload = match &state.payload {
                StatePayload::Query(q) => serde_json::json!(q),
                StatePayload::History(h) => serde_json::json!(h),
                StatePayload::Candidates { query, candidates } => {
                    serde_json::json!({"query": query, "candidates": candidates})
                }
            };
            let line = serde_json::json!({
                "state_id": state.id,
                "task": state.task,
                "payload": payload,
                "targets": targets,
            });
            writeln!(out, "{line}").map_err(|e| io_err(path, e))?;
        }
        Ok(())
    }
}

fn parse_payload(raw: &RelevanceLine) -> Result<StatePayload, String> {
    match raw.task {
        TaskKind::ProductSearch => {
            let q: String = serde_json::from_value(raw.payload.clone())
                .map_err(|_| "product_search payload must be a string".to_string())?;
            Ok(StatePayload::Query(q))
        }
        TaskKind::SeqRec => {
            let h: Vec<String> = serde_json::from_value(raw.payload.clone())
                .map_err(|_| "seq_rec payload must be a list of item ids".to_string())?;
            Ok(StatePayload::History(h))
        }
        TaskKind::Rerank => {
            let p: RerankPayload = serde_json::from_value(raw.payload.clone())
                .map_err(|_| "rerank payload must be {query, candidates}".to_string())?;
            Ok(StatePayload::Candidates {
                query: p.query,
                candidates: p.candidates,
            })
        }
    }
}

fn validate_payload(state: &StateRecord, corpus: &Corpus) -> Result<(), CorpusError> {
    let bad = |message: String| CorpusError::BadState {
        state_id: state.id.clone(),
        message,
    };
    match (&state.task, &state.payload) {
        (TaskKind::ProductSearch, StatePayload::Query(_)) => Ok(()),
        (TaskKind::SeqRec, StatePayload::History(h)) => {
            if h.is_empty() {
                return Err(bad("history is empty".to_string()));
            }
            for id in h {
                if corpus.ordinal(id).is_none() {
                    return Err(CorpusError::UnknownItem {
                        state_id: state.id.clone(),
                        item_id: id.clone(),
                    });
                }
            }
            Ok(())
        }
        (TaskKind::Rerank, StatePayload::Candidates { candidates, .. }) => {
            if candidates.len() < 2 {
                return Err(bad(format!(
                    "rerank needs at least 2 candidates, got {}",
                    candidates.len()
                )));
            }
            let mut seen = HashMap::new();
            for id in candidates {
                if corpus.ordinal(id).is_none() {
                    return Err(CorpusError::UnknownItem {
                        state_id: state.id.clone(),
                        item_id: id.clone(),
                    });
                }
                if seen.insert(id.clone(), ()).is_some() {
                    return Err(bad(format!("duplicate candidate {id:?}")));
                }
            }
            Ok(())
        }
        (task, _) => Err(bad(format!("payload does not match task {task}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write as _;

    fn doc(id: &str, title: &str) -> Document {
        Document {
            id: id.to_string(),
            title: title.to_string(),
            body: String::new(),
            category: None,
        }
    }

    #[test]
    fn tokenize_rules() {
        assert_eq!(tokenize(""), Vec::<String>::new());
        assert_eq!(tokenize("Red-SHOES!!"), vec!["red", "shoes"]);
        assert_eq!(
            tokenize("PlayStation 3 500GB"),
            vec!["playstation", "3", "500gb"]
        );
    }

    #[test]
    fn vocabulary_is_dense_and_ordered() {
        let corpus = Corpus::from_documents(vec![
            doc("d1", "red shoes"),
            doc("d2", "blue shoes"),
            doc("d3", "red hat"),
        ])
        .unwrap();
        let v = corpus.vocabulary();
        assert_eq!(v.len(), 4);
        assert_eq!(v.id("red"), Some(0));
        assert_eq!(v.id("shoes"), Some(1));
        assert_eq!(v.id("blue"), Some(2));
        assert_eq!(v.id("hat"), Some(3));
    }

    #[test]
    fn duplicate_id_rejected() {
        let err = Corpus::from_documents(vec![doc("d1", "a"), doc("d1", "b")]).unwrap_err();
        assert!(matches!(err, CorpusError::DuplicateDocId(id) if id == "d1"));
    }

    #[test]
    fn empty_title_rejected() {
        let err = Corpus::from_documents(vec![doc("d1", "!!!")]).unwrap_err();
        assert!(matches!(err, CorpusError::EmptyTitle(id) if id == "d1"));
    }

    #[test]
    fn load_reports_line_numbers() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, r#"{{"id":"d1","title":"a","body":"","category":null}}"#).unwrap();
        writeln!(f, "not json").unwrap();
        let err = Corpus::load(f.path()).unwrap_err();
        match err {
            CorpusError::Malformed { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn corpus_roundtrip() {
        let corpus = Corpus::from_documents(vec![
            Document {
                id: "d1".into(),
                title: "Red Shoes".into(),
                body: "comfortable, waterproof".into(),
                category: Some("footwear".into()),
            },
            doc("d2", "blue shoes"),
        ])
        .unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        corpus.save(f.path()).unwrap();
        let reloaded = Corpus::load(f.path()).unwrap();
        assert_eq!(corpus.documents(), reloaded.documents());
        assert_eq!(corpus.vocabulary(), reloaded.vocabulary());
    }

    #[test]
    fn relevance_validates_items_and_gains() {
        let corpus = Corpus::from_documents(vec![doc("d1", "red shoes")]).unwrap();
        let mut dict = RelevanceDict::default();
        let state = StateRecord {
            id: "q1".into(),
            task: TaskKind::ProductSearch,
            payload: StatePayload::Query("red".into()),
        };
        dict.insert(
            state.clone(),
            vec![Target {
                item_id: "d1".into(),
                gain: 1.0,
            }],
            &corpus,
        )
        .unwrap();
        assert_eq!(dict.targets("q1").unwrap().len(), 1);

        let unknown = dict.insert(
            StateRecord {
                id: "q2".into(),
                ..state.clone()
            },
            vec![Target {
                item_id: "d99".into(),
                gain: 1.0,
            }],
            &corpus,
        );
        assert!(matches!(unknown, Err(CorpusError::UnknownItem { .. })));

        let negative = dict.insert(
            StateRecord {
                id: "q3".into(),
                ..state.clone()
            },
            vec![Target {
                item_id: "d1".into(),
                gain: -0.5,
            }],
            &corpus,
        );
        assert!(matches!(negative, Err(CorpusError::NegativeGain { .. })));

        let all_zero = dict.insert(
            StateRecord {
                id: "q4".into(),
                ..state
            },
            vec![Target {
                item_id: "d1".into(),
                gain: 0.0,
            }],
            &corpus,
        );
        assert!(matches!(all_zero, Err(CorpusError::NoPositiveTarget { .. })));
    }

    #[test]
    fn relevance_preserves_graded_target_order() {
        let corpus =
            Corpus::from_documents(vec![doc("d1", "red shoes"), doc("d2", "blue shoes")]).unwrap();
        let mut dict = RelevanceDict::default();
        dict.insert(
            StateRecord {
                id: "q1".into(),
                task: TaskKind::ProductSearch,
                payload: StatePayload::Query("red".into()),
            },
            vec![
                Target {
                    item_id: "d1".into(),
                    gain: 1.0,
                },
                Target {
                    item_id: "d2".into(),
                    gain: 0.5,
                },
            ],
            &corpus,
        )
        .unwrap();
        let targets = dict.targets("q1").unwrap();
        assert_eq!(targets[0].item_id, "d1");
        assert_eq!(targets[1].item_id, "d2");
    }

    #[test]
    fn rerank_candidates_must_resolve() {
        let corpus =
            Corpus::from_documents(vec![doc("d1", "red shoes"), doc("d2", "blue shoes")]).unwrap();
        let mut dict = RelevanceDict::default();
        let err = dict
            .insert(
                StateRecord {
                    id: "r1".into(),
                    task: TaskKind::Rerank,
                    payload: StatePayload::Candidates {
                        query: "red".into(),
                        candidates: vec!["d1".into(), "dX".into()],
                    },
                },
                vec![Target {
                    item_id: "d1".into(),
                    gain: 1.0,
                }],
                &corpus,
            )
            .unwrap_err();
        assert!(matches!(err, CorpusError::UnknownItem { .. }));
    }

    #[test]
    fn relevance_file_roundtrip() {
        let corpus =
            Corpus::from_documents(vec![doc("d1", "red shoes"), doc("d2", "blue shoes")]).unwrap();
        let mut dict = RelevanceDict::default();
        dict.insert(
            StateRecord {
                id: "s1".into(),
                task: TaskKind::SeqRec,
                payload: StatePayload::History(vec!["d1".into()]),
            },
            vec![Target {
                item_id: "d2".into(),
                gain: 1.0,
            }],
            &corpus,
        )
        .unwrap();
        dict.insert(
            StateRecord {
                id: "r1".into(),
                task: TaskKind::Rerank,
                payload: StatePayload::Candidates {
                    query: "red".into(),
                    candidates: vec!["d1".into(), "d2".into()],
                },
            },
            vec![Target {
                item_id: "d1".into(),
                gain: 1.0,
            }],
            &corpus,
        )
        .unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        dict.save(f.path()).unwrap();
        let reloaded = RelevanceDict::load(f.path(), &corpus).unwrap();
        assert_eq!(dict.states(), reloaded.states());
        assert_eq!(dict.targets("s1"), reloaded.targets("s1"));
        assert_eq!(dict.targets("r1"), reloaded.targets("r1"));
    }

    proptest! {
        // Joining tokens with a separator and re-tokenizing is a fixed point.
        #[test]
        fn tokenize_idempotent_on_joined_output(text in "\\PC{0,60}") {
            let once = tokenize(&text);
            let again = tokenize(&once.join(" "));
            prop_assert_eq!(once, again);
        }
    }
}
