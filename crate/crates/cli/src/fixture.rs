//! Synthetic task families with planted optima.
//!
//! The product-search generator builds topics: each topic owns two query
//! tokens (what raw states say) and one planted token (what its target
//! documents contain). Target documents never contain their own topic's
//! query tokens, so the raw query retrieves only distractors and rewriting
//! toward the planted token is required to score. The generator verifies
//! both properties before writing anything and documents the plant per
//! state in `meta.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use recloop_core::corpus::{
    Corpus, Document, RelevanceDict, StatePayload, StateRecord, Target, TaskKind,
};
use recloop_core::envs::{DecodedAction, ProductSearchEnv, RerankEnv};
use recloop_core::metrics::ComponentKind;
use recloop_core::retrieval::{Bm25Params, InvertedIndex};
use recloop_core::rng;

use crate::config::{ComponentSection, RunConfig};

/// Sizes for the product-search family. Defaults match the standard desk
/// fixture: 200 docs, 50 tokens, 40 train + 10 eval states, actions of at
/// most 4 tokens.
#[derive(Debug, Clone)]
pub struct SearchFixtureParams {
    pub n_docs: usize,
    pub vocab: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub l_max: usize,
    pub targets_per_state: usize,
    pub seed: u64,
}

impl Default for SearchFixtureParams {
    fn default() -> Self {
        Self {
            n_docs: 200,
            vocab: 50,
            n_train: 40,
            n_eval: 10,
            l_max: 4,
            targets_per_state: 3,
            seed: 0,
        }
    }
}

/// Sizes for the rerank family: 20 states permuting 8 candidates each.
#[derive(Debug, Clone)]
pub struct RerankFixtureParams {
    pub n_states: usize,
    pub m: usize,
    pub docs_per_state: usize,
    pub seed: u64,
}

impl Default for RerankFixtureParams {
    fn default() -> Self {
        Self {
            n_states: 20,
            m: 8,
            docs_per_state: 10,
            seed: 0,
        }
    }
}

/// Sizes for the sequential family.
#[derive(Debug, Clone)]
pub struct SeqRecFixtureParams {
    pub n_docs: usize,
    pub vocab: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub history_len: usize,
    pub seed: u64,
}

impl Default for SeqRecFixtureParams {
    fn default() -> Self {
        Self {
            n_docs: 150,
            vocab: 48,
            n_train: 24,
            n_eval: 8,
            history_len: 10,
            seed: 0,
        }
    }
}

/// What the generator planted, kept alongside the emitted files.
#[derive(Debug, Clone, Serialize)]
pub struct PlantedState {
    pub state_id: String,
    pub planted_query: Vec<String>,
    pub planted_reward: f64,
    pub raw_reward: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FixtureMeta {
    pub kind: String,
    pub seed: u64,
    pub states: Vec<PlantedState>,
}

/// Paths of everything a fixture emits.
#[derive(Debug, Clone)]
pub struct FixtureFiles {
    pub config: PathBuf,
    pub corpus: PathBuf,
    pub relevance: PathBuf,
    pub meta: PathBuf,
}

fn distinct_words(r: &mut impl Rng, count: usize) -> Vec<String> {
    const CONSONANTS: [&str; 12] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t"];
    const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
    let mut seen = std::collections::HashSet::new();
    let mut words = Vec::with_capacity(count);
    while words.len() < count {
        let syllables = r.gen_range(2..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(CONSONANTS[r.gen_range(0..CONSONANTS.len())]);
            w.push_str(VOWELS[r.gen_range(0..VOWELS.len())]);
        }
        if seen.insert(w.clone()) {
            words.push(w);
        }
    }
    words
}

fn write_state_lists(dir: &Path, train: &[String], evals: &[String]) -> Result<()> {
    fs::write(dir.join("train_states.txt"), train.join("\n") + "\n")?;
    let eval_body = evals.join("\n") + "\n";
    fs::write(dir.join("valid_states.txt"), &eval_body)?;
    fs::write(dir.join("test_states.txt"), &eval_body)?;
    Ok(())
}

struct Topic {
    query_tokens: [String; 2],
    planted: String,
    target_ids: Vec<String>,
}

/// Generates the product-search fixture into `dir` and returns the emitted
/// file set. Fails if any planted optimum does not reach reward 1.0 or any
/// raw query ties it.
pub fn generate_search_fixture(params: &SearchFixtureParams, dir: &Path) -> Result<FixtureFiles> {
    let p = params;
    if p.vocab < 12 || p.n_docs < 20 {
        bail!("fixture too small: need vocab >= 12 and docs >= 20");
    }
    let mut r = rng::seeded(p.seed);
    let n_topics = ((p.vocab - 2) / 3).min(p.n_train.max(1));
    let words = distinct_words(&mut r, p.vocab);
    let mut iter = words.iter().cloned();
    let mut topics: Vec<Topic> = (0..n_topics)
        .map(|_| Topic {
            query_tokens: [iter.next().unwrap(), iter.next().unwrap()],
            planted: iter.next().unwrap(),
            target_ids: Vec::new(),
        })
        .collect();
    let filler: Vec<String> = iter.collect();
    let all_query_tokens: Vec<String> = topics
        .iter()
        .flat_map(|t| t.query_tokens.iter().cloned())
        .collect();

    // Target documents carry only their topic's planted token (with tf/dl
    // variation); they are reachable through that token and nothing else,
    // so no distractor query earns partial credit on them.
    let mut documents = Vec::with_capacity(p.n_docs);
    for ti in 0..topics.len() {
        for _ in 0..p.targets_per_state {
            let id = format!("item{:03}", documents.len());
            let repeats = r.gen_range(0..=2);
            let body = vec![topics[ti].planted.clone(); repeats].join(" ");
            documents.push(Document {
                id: id.clone(),
                title: topics[ti].planted.clone(),
                body,
                category: None,
            });
            topics[ti].target_ids.push(id);
        }
    }
    // Distractors: query tokens and filler only, never planted tokens.
    let distractor_pool: Vec<String> = all_query_tokens
        .iter()
        .chain(filler.iter())
        .cloned()
        .collect();
    while documents.len() < p.n_docs {
        let id = format!("item{:03}", documents.len());
        let len = r.gen_range(2..=8);
        let toks: Vec<String> = (0..len)
            .map(|_| distractor_pool[r.gen_range(0..distractor_pool.len())].clone())
            .collect();
        let (title, body) = toks.split_at(r.gen_range(1..=len.min(3)));
        documents.push(Document {
            id,
            title: title.join(" "),
            body: body.join(" "),
            category: None,
        });
    }
    let corpus = Corpus::from_documents(documents).context("fixture corpus")?;

    // States: per topic, distinct multisets over its two query tokens.
    let n_states = p.n_train + p.n_eval;
    let mut relevance = RelevanceDict::default();
    let mut state_ids = Vec::with_capacity(n_states);
    let mut combos_per_topic: Vec<Vec<Vec<usize>>> = topics
        .iter()
        .map(|_| {
            let mut combos = vec![
                vec![0, 1],
                vec![0, 0, 1],
                vec![0, 1, 1],
                vec![0, 0, 1, 1],
                vec![0, 0, 0, 1],
                vec![0, 1, 1, 1],
                vec![0],
                vec![1],
            ];
            combos.shuffle(&mut r);
            combos
        })
        .collect();
    for i in 0..n_states {
        let ti = i % topics.len();
        let combo = combos_per_topic[ti]
            .pop()
            .with_context(|| format!("topic {ti} ran out of distinct query shapes"))?;
        let query = combo
            .iter()
            .map(|&j| topics[ti].query_tokens[j].clone())
            .collect::<Vec<_>>()
            .join(" ");
        let state_id = format!("q{i:03}");
        relevance.insert(
            StateRecord {
                id: state_id.clone(),
                task: TaskKind::ProductSearch,
                payload: StatePayload::Query(query),
            },
            topics[ti]
                .target_ids
                .iter()
                .map(|id| Target {
                    item_id: id.clone(),
                    gain: 1.0,
                })
                .collect(),
            &corpus,
        )?;
        state_ids.push(state_id);
    }

    // Emitted run configuration, tuned for this family.
    let mut cfg = RunConfig::default();
    cfg.task = TaskKind::ProductSearch;
    cfg.corpus = dir.join("corpus.jsonl");
    cfg.relevance = dir.join("relevance.jsonl");
    cfg.train_states = dir.join("train_states.txt");
    cfg.valid_states = dir.join("valid_states.txt");
    cfg.test_states = dir.join("test_states.txt");
    cfg.out_dir = dir.join("run_out");
    cfg.seed = p.seed;
    cfg.policy.l_max = p.l_max;
    cfg.grpo.steps = 1000;
    cfg.grpo.learning_rate = 2e-3;
    cfg.grpo.minibatch = p.n_train.max(1);
    // A policy trained from random weights needs unsharpened exploration;
    // the sampler defaults are tuned for warm starts.
    cfg.grpo.temperature = 1.0;
    cfg.grpo.top_p = 1.0;
    cfg.eval.every = 100;
    cfg.sft.n_samples = 10_000;
    cfg.sft.steps = 400;

    // Verify the plant against the real environment before writing.
    let env = ProductSearchEnv::new(
        corpus.clone(),
        relevance.clone(),
        cfg.bm25_params(),
        cfg.reward_spec(corpus.len()),
        cfg.k_train(corpus.len()),
        cfg.reward.k_eval,
    )
    .map_err(|e| anyhow::anyhow!("fixture env: {e}"))?;
    let mut planted_states = Vec::with_capacity(n_states);
    for (i, state_id) in state_ids.iter().enumerate() {
        let ti = i % topics.len();
        let planted_query = vec![topics[ti].planted.clone()];
        let planted_reward = env
            .eval_ndcg(state_id, &DecodedAction::Query(planted_query.clone()))
            .map_err(|e| anyhow::anyhow!("{e}"))?;
        let raw_tokens = match &relevance.state(state_id).unwrap().payload {
            StatePayload::Query(q) => recloop_core::corpus::tokenize(q),
            _ => unreachable!(),
        };
        let raw_reward = env
            .eval_ndcg(state_id, &DecodedAction::Query(raw_tokens))
            .map_err(|e| anyhow::anyhow!("{e}"))?;
        if (planted_reward - 1.0).abs() > 1e-12 {
            bail!("state {state_id}: planted reward {planted_reward} != 1.0");
        }
        if raw_reward >= planted_reward {
            bail!("state {state_id}: raw reward {raw_reward} not beaten by plant");
        }
        planted_states.push(PlantedState {
            state_id: state_id.clone(),
            planted_query,
            planted_reward,
            raw_reward,
        });
    }

    fs::create_dir_all(dir)?;
    corpus.save(dir.join("corpus.jsonl"))?;
    relevance.save(dir.join("relevance.jsonl"))?;
    write_state_lists(dir, &state_ids[..p.n_train], &state_ids[p.n_train..])?;
    cfg.save(dir.join("config.toml"))?;
    let meta = FixtureMeta {
        kind: "product_search".into(),
        seed: p.seed,
        states: planted_states,
    };
    fs::write(
        dir.join("meta.json"),
        serde_json::to_string_pretty(&meta)? + "\n",
    )?;
    Ok(FixtureFiles {
        config: dir.join("config.toml"),
        corpus: dir.join("corpus.jsonl"),
        relevance: dir.join("relevance.jsonl"),
        meta: dir.join("meta.json"),
    })
}

/// Generates the rerank fixture: candidates come from top-m retrieval over
/// a per-state document pool, and each state has one relevant candidate
/// planted away from slot 0.
pub fn generate_rerank_fixture(params: &RerankFixtureParams, dir: &Path) -> Result<FixtureFiles> {
    let p = params;
    if p.docs_per_state < p.m {
        bail!("docs_per_state must be >= m");
    }
    let mut r = rng::seeded(p.seed);
    let mut words = distinct_words(&mut r, p.n_states * 2 + 30);
    let filler = words.split_off(p.n_states * 2);
    let state_words = words;

    let mut documents = Vec::new();
    let mut queries = Vec::with_capacity(p.n_states);
    for si in 0..p.n_states {
        let q1 = state_words[2 * si].clone();
        let q2 = state_words[2 * si + 1].clone();
        for _ in 0..p.docs_per_state {
            let id = format!("cand{:03}", documents.len());
            let extra = filler[r.gen_range(0..filler.len())].clone();
            documents.push(Document {
                id,
                title: format!("{q1} {q2} {extra}"),
                body: String::new(),
                category: None,
            });
        }
        queries.push(format!("{q1} {q2}"));
    }
    let corpus = Corpus::from_documents(documents)?;
    let index = InvertedIndex::build(&corpus).map_err(|e| anyhow::anyhow!("{e}"))?;

    let mut relevance = RelevanceDict::default();
    let mut state_ids = Vec::with_capacity(p.n_states);
    let mut planted_states = Vec::with_capacity(p.n_states);
    for (si, query) in queries.iter().enumerate() {
        let tokens = recloop_core::corpus::tokenize(query);
        let ranked = index.retrieve(Bm25Params::default(), &tokens, p.m);
        if ranked.len() < p.m {
            bail!("state {si}: retrieval returned {} < m", ranked.len());
        }
        let candidates: Vec<String> = ranked.into_iter().map(|(id, _)| id).collect();
        // Plant the relevant item away from slot 0 so the identity
        // permutation is never optimal.
        let target_slot = r.gen_range(1..p.m);
        let state_id = format!("r{si:03}");
        relevance.insert(
            StateRecord {
                id: state_id.clone(),
                task: TaskKind::Rerank,
                payload: StatePayload::Candidates {
                    query: query.clone(),
                    candidates: candidates.clone(),
                },
            },
            vec![Target {
                item_id: candidates[target_slot].clone(),
                gain: 1.0,
            }],
            &corpus,
        )?;
        state_ids.push(state_id.clone());
        planted_states.push((state_id, target_slot));
    }

    let mut cfg = RunConfig::default();
    cfg.task = TaskKind::Rerank;
    cfg.corpus = dir.join("corpus.jsonl");
    cfg.relevance = dir.join("relevance.jsonl");
    cfg.train_states = dir.join("train_states.txt");
    cfg.valid_states = dir.join("valid_states.txt");
    cfg.test_states = dir.join("test_states.txt");
    cfg.out_dir = dir.join("run_out");
    cfg.seed = p.seed;
    cfg.env.rerank_m = p.m;
    cfg.grpo.steps = 4000;
    cfg.grpo.group_size = 16;
    cfg.grpo.learning_rate = 2e-3;
    cfg.grpo.minibatch = p.n_states;
    cfg.eval.every = 250;
    cfg.eval.samples_per_state = 20;
    cfg.reward.components = vec![
        ComponentSection {
            kind: ComponentKind::Ndcg,
            cutoff: Some(cfg.env.rerank_cutoff),
            weight: 0.9,
        },
        ComponentSection {
            kind: ComponentKind::Format,
            cutoff: None,
            weight: 0.1,
        },
    ];

    // Verify plants: best permutation scores 1, identity scores less.
    let env = RerankEnv::new(
        corpus.clone(),
        relevance.clone(),
        cfg.reward_spec(corpus.len()),
        cfg.env.rerank_cutoff,
        p.m,
    )
    .map_err(|e| anyhow::anyhow!("{e}"))?;
    let mut meta_states = Vec::new();
    for (state_id, target_slot) in &planted_states {
        let state = relevance.state(state_id).unwrap();
        let mut best: Vec<usize> = vec![*target_slot];
        best.extend((0..p.m).filter(|s| s != target_slot));
        let best_reward = env
            .eval_ndcg(state, &DecodedAction::Permutation(best.clone()))
            .map_err(|e| anyhow::anyhow!("{e}"))?;
        let identity_reward = env
            .eval_ndcg(state, &DecodedAction::Permutation((0..p.m).collect()))
            .map_err(|e| anyhow::anyhow!("{e}"))?;
        if (best_reward - 1.0).abs() > 1e-12 {
            bail!("state {state_id}: best permutation reward {best_reward} != 1.0");
        }
        if identity_reward >= best_reward {
            bail!("state {state_id}: identity permutation already optimal");
        }
        meta_states.push(PlantedState {
            state_id: state_id.clone(),
            planted_query: best.iter().map(|s| s.to_string()).collect(),
            planted_reward: best_reward,
            raw_reward: identity_reward,
        });
    }

    fs::create_dir_all(dir)?;
    corpus.save(dir.join("corpus.jsonl"))?;
    relevance.save(dir.join("relevance.jsonl"))?;
    // All states train; evaluation reuses them (memorization family).
    write_state_lists(dir, &state_ids, &state_ids)?;
    cfg.save(dir.join("config.toml"))?;
    let meta = FixtureMeta {
        kind: "rerank".into(),
        seed: p.seed,
        states: meta_states,
    };
    fs::write(
        dir.join("meta.json"),
        serde_json::to_string_pretty(&meta)? + "\n",
    )?;
    Ok(FixtureFiles {
        config: dir.join("config.toml"),
        corpus: dir.join("corpus.jsonl"),
        relevance: dir.join("relevance.jsonl"),
        meta: dir.join("meta.json"),
    })
}

/// Generates the sequential-recommendation fixture: histories are items
/// whose titles carry topic tokens; the target is the topic's planted item.
pub fn generate_seqrec_fixture(params: &SeqRecFixtureParams, dir: &Path) -> Result<FixtureFiles> {
    let p = params;
    let mut r = rng::seeded(p.seed);
    let n_topics = ((p.vocab - 2) / 3).min(p.n_train.max(1));
    let words = distinct_words(&mut r, p.vocab);
    let mut iter = words.iter().cloned();
    let mut topics: Vec<Topic> = (0..n_topics)
        .map(|_| Topic {
            query_tokens: [iter.next().unwrap(), iter.next().unwrap()],
            planted: iter.next().unwrap(),
            target_ids: Vec::new(),
        })
        .collect();
    let filler: Vec<String> = iter.collect();

    let mut documents = Vec::new();
    // History items: titles over topic query tokens.
    let mut history_pool: Vec<Vec<String>> = vec![Vec::new(); n_topics];
    for (ti, topic) in topics.iter().enumerate() {
        for j in 0..6 {
            let id = format!("hist{ti:02}x{j}");
            let tok = &topic.query_tokens[j % 2];
            let extra = &filler[r.gen_range(0..filler.len())];
            documents.push(Document {
                id: id.clone(),
                title: format!("{tok} {extra}"),
                body: String::new(),
                category: None,
            });
            history_pool[ti].push(id);
        }
    }
    // Target items: planted tokens only.
    for (ti, topic) in topics.iter_mut().enumerate() {
        for j in 0..2 {
            let id = format!("next{ti:02}x{j}");
            documents.push(Document {
                id: id.clone(),
                title: topic.planted.clone(),
                body: String::new(),
                category: None,
            });
            topic.target_ids.push(id);
        }
    }
    // Distractors up to n_docs.
    let distractor_pool: Vec<String> = topics
        .iter()
        .flat_map(|t| t.query_tokens.iter().cloned())
        .chain(filler.iter().cloned())
        .collect();
    while documents.len() < p.n_docs {
        let id = format!("item{:03}", documents.len());
        let len = r.gen_range(2..=6);
        let toks: Vec<String> = (0..len)
            .map(|_| distractor_pool[r.gen_range(0..distractor_pool.len())].clone())
            .collect();
        documents.push(Document {
            id,
            title: toks.join(" "),
            body: String::new(),
            category: None,
        });
    }
    let corpus = Corpus::from_documents(documents)?;

    let n_states = p.n_train + p.n_eval;
    let mut relevance = RelevanceDict::default();
    let mut state_ids = Vec::with_capacity(n_states);
    for i in 0..n_states {
        let ti = i % n_topics;
        let len = r.gen_range(3..=p.history_len + 3);
        let history: Vec<String> = (0..len)
            .map(|_| history_pool[ti][r.gen_range(0..history_pool[ti].len())].clone())
            .collect();
        let state_id = format!("u{i:03}");
        relevance.insert(
            StateRecord {
                id: state_id.clone(),
                task: TaskKind::SeqRec,
                payload: StatePayload::History(history),
            },
            topics[ti]
                .target_ids
                .iter()
                .map(|id| Target {
                    item_id: id.clone(),
                    gain: 1.0,
                })
                .collect(),
            &corpus,
        )?;
        state_ids.push(state_id);
    }

    let mut cfg = RunConfig::default();
    cfg.task = TaskKind::SeqRec;
    cfg.corpus = dir.join("corpus.jsonl");
    cfg.relevance = dir.join("relevance.jsonl");
    cfg.train_states = dir.join("train_states.txt");
    cfg.valid_states = dir.join("valid_states.txt");
    cfg.test_states = dir.join("test_states.txt");
    cfg.out_dir = dir.join("run_out");
    cfg.seed = p.seed;
    cfg.policy.l_max = 4;
    cfg.env.history_len = p.history_len;
    cfg.grpo.steps = 1500;
    cfg.grpo.learning_rate = 2e-3;
    cfg.grpo.minibatch = p.n_train.max(1);
    cfg.eval.every = 100;

    fs::create_dir_all(dir)?;
    corpus.save(dir.join("corpus.jsonl"))?;
    relevance.save(dir.join("relevance.jsonl"))?;
    write_state_lists(dir, &state_ids[..p.n_train], &state_ids[p.n_train..])?;
    cfg.save(dir.join("config.toml"))?;
    // Planted metadata: the planted token is the optimal single-token query.
    let meta = FixtureMeta {
        kind: "seq_rec".into(),
        seed: p.seed,
        states: state_ids
            .iter()
            .enumerate()
            .map(|(i, id)| PlantedState {
                state_id: id.clone(),
                planted_query: vec![topics[i % n_topics].planted.clone()],
                planted_reward: 1.0,
                raw_reward: 0.0,
            })
            .collect(),
    };
    fs::write(
        dir.join("meta.json"),
        serde_json::to_string_pretty(&meta)? + "\n",
    )?;
    Ok(FixtureFiles {
        config: dir.join("config.toml"),
        corpus: dir.join("corpus.jsonl"),
        relevance: dir.join("relevance.jsonl"),
        meta: dir.join("meta.json"),
    })
}

/// Key → value map of every file's bytes, for byte-identity checks.
pub fn fixture_digest(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        if entry.file_type()?.is_file() {
            out.insert(
                entry.file_name().to_string_lossy().into_owned(),
                fs::read(entry.path())?,
            );
        }
    }
    Ok(out)
}
