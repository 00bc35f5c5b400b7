//! End-to-end HTTP tests over a real loopback listener.

use std::net::SocketAddr;
use std::sync::Arc;

use recloop_core::corpus::{
    Corpus, Document, RelevanceDict, StatePayload, StateRecord, Target, TaskKind,
};
use recloop_core::envs::{DecodedAction, ProductSearchEnv, RerankEnv};
use recloop_core::metrics::RewardSpec;
use recloop_core::retrieval::Bm25Params;
use recloop_service::{parse_permutation_text, App, ServiceConfig};

fn doc(id: &str, title: &str) -> Document {
    Document {
        id: id.to_string(),
        title: title.to_string(),
        body: String::new(),
        category: None,
    }
}

fn fixture() -> (Corpus, RelevanceDict) {
    let corpus = Corpus::from_documents(vec![
        doc("d1", "red shoes"),
        doc("d2", "blue shoes"),
        doc("d3", "red hat"),
    ])
    .unwrap();
    let mut relevance = RelevanceDict::default();
    relevance
        .insert(
            StateRecord {
                id: "q1".into(),
                task: TaskKind::ProductSearch,
                payload: StatePayload::Query("crimson footwear".into()),
            },
            vec![Target {
                item_id: "d1".into(),
                gain: 1.0,
            }],
            &corpus,
        )
        .unwrap();
    relevance
        .insert(
            StateRecord {
                id: "r1".into(),
                task: TaskKind::Rerank,
                payload: StatePayload::Candidates {
                    query: "red".into(),
                    candidates: vec!["d2".into(), "d1".into()],
                },
            },
            vec![Target {
                item_id: "d1".into(),
                gain: 1.0,
            }],
            &corpus,
        )
        .unwrap();
    (corpus, relevance)
}

fn app() -> Arc<App> {
    let (corpus, relevance) = fixture();
    Arc::new(
        App::new(
            corpus,
            relevance,
            Bm25Params::default(),
            RewardSpec::ndcg(10),
            10,
            10,
            10,
            ServiceConfig::default(),
        )
        .unwrap(),
    )
}

async fn spawn_server(app: Arc<App>) -> (SocketAddr, tokio::sync::oneshot::Sender<()>) {
    let (bound_tx, bound_rx) = tokio::sync::oneshot::channel();
    let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<()>();
    let addr: SocketAddr = "127.0.0.1:0".parse().unwrap();
    tokio::spawn(async move {
        recloop_service::serve_with_addr(app, addr, bound_tx, async {
            let _ = stop_rx.await;
        })
        .await
        .unwrap();
    });
    (bound_rx.await.unwrap(), stop_tx)
}

#[tokio::test(flavor = "multi_thread")]
async fn retrieve_reward_and_health() {
    let (addr, _stop) = spawn_server(app()).await;
    let client = reqwest::Client::new();
    let base = format!("http://{addr}");

    let health: serde_json::Value = client
        .get(format!("{base}/v1/health"))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(health["status"], "ok");
    assert_eq!(health["docs"], 3);
    assert_eq!(health["states"], 2);

    // Retrieval on the 3-doc fixture: "red" hits d1 then d3.
    let body: serde_json::Value = client
        .post(format!("{base}/v1/retrieve"))
        .json(&serde_json::json!({"query": "red", "k": 2}))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    let items = body["items"].as_array().unwrap();
    assert_eq!(items[0]["id"], "d1");
    assert_eq!(items[1]["id"], "d3");

    let empty: serde_json::Value = client
        .post(format!("{base}/v1/retrieve"))
        .json(&serde_json::json!({"query": "zzz", "k": 5}))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert!(empty["items"].as_array().unwrap().is_empty());

    let bad_k = client
        .post(format!("{base}/v1/retrieve"))
        .json(&serde_json::json!({"query": "red", "k": 0}))
        .send()
        .await
        .unwrap();
    assert_eq!(bad_k.status(), 400);
    let err: serde_json::Value = bad_k.json().await.unwrap();
    assert_eq!(err["error"], "invalid k");

    // Reward for the query state: "red" ranks d1 first.
    let reward: serde_json::Value = client
        .post(format!("{base}/v1/reward"))
        .json(&serde_json::json!({"state_id": "q1", "action_text": "red"}))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert!((reward["reward"].as_f64().unwrap() - 1.0).abs() < 1e-12);

    // Rerank state: candidates [d2, d1]; swapping puts the target first.
    let perm: serde_json::Value = client
        .post(format!("{base}/v1/reward"))
        .json(&serde_json::json!({"state_id": "r1", "action_text": "perm:1,0"}))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert!((perm["reward"].as_f64().unwrap() - 1.0).abs() < 1e-12);

    let unknown = client
        .post(format!("{base}/v1/reward"))
        .json(&serde_json::json!({"state_id": "qX", "action_text": "red"}))
        .send()
        .await
        .unwrap();
    assert_eq!(unknown.status(), 404);
    let err: serde_json::Value = unknown.json().await.unwrap();
    assert!(err["error"].as_str().unwrap().contains("qX"));

    // Batches preserve order.
    let batch: serde_json::Value = client
        .post(format!("{base}/v1/reward"))
        .json(&serde_json::json!({"batch": [
            {"state_id": "q1", "action_text": "red"},
            {"state_id": "q1", "action_text": "blue"},
        ]}))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    let rewards = batch["rewards"].as_array().unwrap();
    assert!((rewards[0].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(rewards[1].as_f64().unwrap(), 0.0);

    // Oversized batch is refused.
    let items: Vec<serde_json::Value> = (0..300)
        .map(|_| serde_json::json!({"state_id": "q1", "action_text": "red"}))
        .collect();
    let too_big = client
        .post(format!("{base}/v1/reward"))
        .json(&serde_json::json!({ "batch": items }))
        .send()
        .await
        .unwrap();
    assert_eq!(too_big.status(), 413);
}

#[tokio::test(flavor = "multi_thread")]
async fn repeated_requests_are_idempotent() {
    let (addr, _stop) = spawn_server(app()).await;
    let client = reqwest::Client::new();
    let url = format!("http://{addr}/v1/reward");
    let req = serde_json::json!({"state_id": "q1", "action_text": "red shoes"});
    let mut bodies = Vec::new();
    for _ in 0..5 {
        let text = client
            .post(&url)
            .json(&req)
            .send()
            .await
            .unwrap()
            .text()
            .await
            .unwrap();
        bodies.push(text);
    }
    assert!(bodies.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn permutation_text_parsing() {
    assert_eq!(
        parse_permutation_text("perm:2,0,1", 3),
        DecodedAction::Permutation(vec![2, 0, 1])
    );
    assert_eq!(parse_permutation_text("perm:2,2,1", 3), DecodedAction::Invalid);
    assert_eq!(parse_permutation_text("perm:0,1", 3), DecodedAction::Invalid);
    assert_eq!(parse_permutation_text("perm:0,1,9", 3), DecodedAction::Invalid);
    assert_eq!(parse_permutation_text("0,1,2", 3), DecodedAction::Invalid);
    assert_eq!(parse_permutation_text("perm:a,b,c", 3), DecodedAction::Invalid);
}

#[test]
fn reward_text_matches_in_process_envs() {
    let (corpus, relevance) = fixture();
    let app = App::new(
        corpus.clone(),
        relevance.clone(),
        Bm25Params::default(),
        RewardSpec::ndcg(10),
        10,
        10,
        10,
        ServiceConfig::default(),
    )
    .unwrap();
    let search = ProductSearchEnv::new(
        corpus.clone(),
        relevance.clone(),
        Bm25Params::default(),
        RewardSpec::ndcg(10),
        10,
        10,
    )
    .unwrap();
    let rerank = RerankEnv::mixed(corpus, relevance.clone(), RewardSpec::ndcg(10), 10).unwrap();

    for text in ["red", "red shoes", "blue hat", "zzz unknown words", ""] {
        let tokens = recloop_core::corpus::tokenize(text);
        let decoded = if tokens.is_empty() {
            DecodedAction::Invalid
        } else {
            DecodedAction::Query(tokens)
        };
        let want = search.reward_decoded("q1", &decoded).unwrap();
        let got = app.reward_text("q1", text).unwrap();
        assert!((want - got).abs() < 1e-12);
    }
    for text in ["perm:0,1", "perm:1,0", "perm:1,1", "nonsense"] {
        let state = relevance.state("r1").unwrap();
        let decoded = parse_permutation_text(text, 2);
        let want = rerank.reward_decoded(state, &decoded).unwrap();
        let got = app.reward_text("r1", text).unwrap();
        assert!((want - got).abs() < 1e-12);
    }
}
