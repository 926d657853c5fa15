use std::sync::Arc;

use serde_json::{json, Value};

use searchloop_core::corpus::ingest_jsonl;
use searchloop_core::retriever::{Bm25Params, Bm25Retriever, Index, RemoteRetriever, RemoteRetrieverConfig, Retriever};
use searchloop_core::rollout::FrozenClock;
use searchloop_server::AppState;

const CORPUS: &str = include_str!("../../core/tests/fixtures/toy_corpus.jsonl");

fn index() -> Index {
    let (store, _) = ingest_jsonl(CORPUS.as_bytes(), 100).unwrap();
    Index::build(&store, Bm25Params::default()).unwrap()
}

struct Server {
    base: String,
    http: reqwest::Client,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    handle: tokio::task::JoinHandle<std::io::Result<()>>,
}

impl Server {
    async fn start() -> Self {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
        let state = AppState::from_index(index()).with_clock(Arc::new(FrozenClock));
        let handle = tokio::spawn(searchloop_server::serve(listener, state, async {
            let _ = stopped.await;
        }));
        Self { base, http: reqwest::Client::new(), stop: Some(stop), handle }
    }

    async fn post(&self, path: &str, body: Value) -> (u16, Value) {
        let response = self.http.post(format!("{}{path}", self.base)).json(&body).send().await.unwrap();
        let status = response.status().as_u16();
        (status, response.json().await.unwrap())
    }
}

#[tokio::test]
async fn health_describes_the_index() {
    let server = Server::start().await;
    let body: Value = server.http.get(format!("{}/health", server.base)).send().await.unwrap().json().await.unwrap();
    assert_eq!(body["status"], "ok");
    assert_eq!(body["passages"], 12);
    assert_eq!(body["index_fingerprint"], index().fingerprint());
    assert!(body["model"].is_null());
}

#[tokio::test]
async fn retrieve_speaks_the_remote_protocol() {
    let server = Server::start().await;
    let (status, body) = server.post("/v1/retrieve", json!({"queries": ["Huernia", "First for Women"], "k": 2})).await;
    assert_eq!(status, 200);
    let results = body["results"].as_array().unwrap();
    assert_eq!(results.len(), 2);
    assert_eq!(results[0][0]["passage_id"], "huernia:0");
    assert_eq!(results[1][0]["passage_id"], "first-for-women:0");
    for key in ["passage_id", "title", "body", "score"] {
        assert!(results[0][0].get(key).is_some(), "{key}");
    }

    let (status, body) = server.post("/v1/retrieve", json!({"queries": ["a", "b", "c", "d"], "k": 2})).await;
    assert_eq!(status, 400);
    assert_eq!(body["error"]["code"], "invalid_retrieval");
}

#[tokio::test]
async fn remote_retriever_against_the_server_matches_local_search() {
    let server = Server::start().await;
    let remote = RemoteRetriever::new(RemoteRetrieverConfig::new(format!("{}/v1/retrieve", server.base))).unwrap();
    let local = Bm25Retriever::new(index());
    let queries = vec!["Dictyosperma palm".to_string(), "Bauer Media Group".to_string()];
    assert_eq!(remote.search_batch(&queries, 3).await.unwrap(), local.search_batch(&queries, 3).await.unwrap());
}

#[tokio::test]
async fn parse_errors_carry_the_offset() {
    let server = Server::start().await;
    let (status, body) = server.post("/v1/parse", json!({"transcript": "<think>a</answer>"})).await;
    assert_eq!(status, 422);
    assert_eq!(body["error"]["code"], "protocol_error");
    assert_eq!(body["error"]["offset"], 8);

    let (status, body) = server.post("/v1/parse", json!({"transcript": "<think>a</think>\n<answer> b </answer>"})).await;
    assert_eq!(status, 200);
    assert_eq!(body["kinds"], json!(["think", "answer"]));
    assert_eq!(body["answer"], "b");
}

#[tokio::test]
async fn malformed_bodies_get_json_errors() {
    let server = Server::start().await;
    let (status, body) = server.post("/v1/search", json!({"k": 3})).await;
    assert_eq!(status, 422);
    assert_eq!(body["error"]["code"], "invalid_body");
}

#[tokio::test]
async fn rollouts_need_a_model_or_scripts() {
    let server = Server::start().await;
    let questions = json!([{"id": "q1", "question": "Is Huernia a genus?"}]);
    let (status, body) = server.post("/v1/rollout", json!({"questions": questions})).await;
    assert_eq!(status, 400);
    assert_eq!(body["error"]["code"], "no_model");

    let scripts = json!({"Is Huernia a genus?": ["<search> Huernia </search>", "<answer> yes </answer>"]});
    let (status, body) = server
        .post("/v1/rollout", json!({"questions": questions, "scripts": scripts, "config": {"mode": "multi", "k": 2}}))
        .await;
    assert_eq!(status, 200, "{body}");
    let trace = &body["traces"][0];
    assert_eq!(trace["termination"], "answered");
    assert_eq!(trace["retrieval_count"], 1);
    assert_eq!(trace["final_answer"], "yes");
    assert_eq!(trace["wall_time"], 0.0);
    assert_eq!(body["metrics"]["episodes"], 1);
}

#[tokio::test]
async fn invalid_configs_are_rejected() {
    let server = Server::start().await;
    let (status, body) = server
        .post("/v1/rollout", json!({"questions": [], "scripts": {}, "config": {"k": 0}}))
        .await;
    assert_eq!(status, 400);
    assert!(body["error"]["message"].as_str().unwrap().contains('k'));
}

#[tokio::test]
async fn shuts_down_gracefully() {
    let mut server = Server::start().await;
    server.stop.take().unwrap().send(()).unwrap();
    server.handle.await.unwrap().unwrap();
}
