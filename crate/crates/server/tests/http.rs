use std::sync::Arc;

use serde_json::{json, Value};
use tokio::net::TcpListener;
use trialsum_core::api::{
    Engine, InfillRequest, LoadedModel, ProvenanceRequest, QueryBody, SearchRequest, SummarizeRequest, WARNING,
};
use trialsum_core::decoding::DecodeConfig;
use trialsum_core::model::{Architecture, Model, ModelConfig};
use trialsum_core::pipeline::build_vocabulary;
use trialsum_core::store::TrialStore;
use trialsum_core::synth::{generate, SynthSpec};
use trialsum_core::templates::TemplateCatalog;

fn engine() -> Engine {
    let examples = generate(&SynthSpec::new(3, 4, 3)).unwrap();
    let templates = TemplateCatalog::builtin();
    let vocab = build_vocabulary(&examples, &templates).unwrap();
    let records = examples.iter().flat_map(|e| e.records.clone()).collect();
    let store = TrialStore::from_records(records).unwrap();
    let models = [Architecture::Multihead, Architecture::Baseline]
        .into_iter()
        .map(|a| {
            let cfg = ModelConfig {
                max_tgt_len: 128,
                ..ModelConfig::tiny(a, vocab.len())
            };
            LoadedModel {
                model: Model::new(cfg, 7).unwrap(),
                vocab: vocab.clone(),
            }
        })
        .collect();
    Engine::new(store, templates, models, 8).with_decode_config(DecodeConfig {
        beam_size: 2,
        min_len: 2,
        max_len: 8,
        alpha: 0.0,
    })
}

struct Fixture {
    engine: Arc<Engine>,
    base: String,
    client: reqwest::Client,
}

async fn start() -> Fixture {
    let engine = Arc::new(engine());
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    tokio::spawn(trialsum_server::serve(engine.clone(), listener));
    Fixture {
        engine,
        base,
        client: reqwest::Client::new(),
    }
}

impl Fixture {
    async fn get(&self, path: &str) -> (u16, String) {
        let r = self.client.get(format!("{}{path}", self.base)).send().await.unwrap();
        (r.status().as_u16(), r.text().await.unwrap())
    }

    async fn post(&self, path: &str, body: &str) -> (u16, String) {
        let r = self
            .client
            .post(format!("{}{path}", self.base))
            .header("content-type", "application/json")
            .body(body.to_string())
            .send()
            .await
            .unwrap();
        (r.status().as_u16(), r.text().await.unwrap())
    }

    fn ids(&self, n: usize) -> Vec<String> {
        self.engine.store().records().iter().take(n).map(|r| r.id.clone()).collect()
    }

    fn term(&self) -> String {
        self.engine.store().records()[0].p_mesh[0].clone()
    }
}

#[tokio::test]
async fn search_matches_library_and_accepts_repeated_keys() {
    let f = start().await;
    let term = f.term();
    let other = f.engine.store().records().last().unwrap().p_mesh[0].clone();
    let (status, body) = f
        .get(&format!(
            "/search?population={}&population={}&k=2",
            term.replace(' ', "+"),
            other.replace(' ', "%20")
        ))
        .await;
    assert_eq!(status, 200);
    let lib = f
        .engine
        .search(&SearchRequest {
            query: QueryBody {
                population: vec![term.clone(), other],
                ..Default::default()
            },
            k: Some(2),
        })
        .unwrap();
    assert_eq!(body, lib);
    let hits: Vec<Value> = serde_json::from_str(&body).unwrap();
    assert!(!hits.is_empty() && hits.len() <= 2);
    for key in ["id", "title", "score", "population", "interventions", "outcomes", "punchline"] {
        assert!(hits[0].get(key).is_some(), "missing {key}");
    }
}

#[tokio::test]
async fn search_errors() {
    let f = start().await;
    assert_eq!(f.get("/search").await.0, 400);
    assert_eq!(f.get("/search?k=3").await.0, 400);
    assert_eq!(f.get(&format!("/search?population={}&k=0", f.term())).await.0, 400);
    assert_eq!(f.get("/search?population=x&k=abc").await.0, 400);
    let (status, body) = f.get("/search?population=no+such+term").await;
    assert_eq!((status, body.as_str()), (200, "[]"));
}

#[tokio::test]
async fn summarize_matches_library_and_carries_warning() {
    let f = start().await;
    for model in ["multihead", "baseline"] {
        let body = json!({"trial_ids": f.ids(3), "model": model}).to_string();
        let (status, http) = f.post("/summarize", &body).await;
        assert_eq!(status, 200, "{http}");
        let req: SummarizeRequest = serde_json::from_str(&body).unwrap();
        assert_eq!(http, f.engine.summarize(&req).unwrap());
        let v: Value = serde_json::from_str(&http).unwrap();
        assert_eq!(v["warning"], WARNING);
        assert_eq!(v["model"], model);
        let tokens = v["tokens"].as_array().unwrap();
        assert!(!tokens.is_empty());
        for t in tokens {
            if model == "baseline" {
                assert!(t["aspect"].is_null() && t["confidence"].is_null());
            } else {
                let c = t["confidence"].as_f64().unwrap();
                assert!((0.25 - 1e-12..=1.0 + 1e-12).contains(&c));
            }
        }
    }
}

#[tokio::test]
async fn summarize_by_query_uses_ranked_trials() {
    let f = start().await;
    let body = json!({"query": {"population": [f.term()]}, "k": 2}).to_string();
    let (status, http) = f.post("/summarize", &body).await;
    assert_eq!(status, 200, "{http}");
    let v: Value = serde_json::from_str(&http).unwrap();
    let search: Vec<Value> = serde_json::from_str(
        &f.engine
            .search(&SearchRequest {
                query: QueryBody {
                    population: vec![f.term()],
                    ..Default::default()
                },
                k: Some(2),
            })
            .unwrap(),
    )
    .unwrap();
    let ids: Vec<&Value> = search.iter().map(|h| &h["id"]).collect();
    assert_eq!(v["trial_ids"].as_array().unwrap().iter().collect::<Vec<_>>(), ids);
}

#[tokio::test]
async fn summarize_errors() {
    let f = start().await;
    let cases = [
        (json!({"trial_ids": ["nope"]}), 404),
        (json!({"trial_ids": []}), 422),
        (json!({}), 400),
        (json!({"trial_ids": f.ids(1), "query": {"population": ["x"]}}), 400),
        (json!({"trial_ids": f.ids(1), "decode": {"beam_size": 0}}), 400),
        (json!({"trial_ids": f.ids(1), "decode": {"max_len": 1000}}), 400),
        (json!({"trial_ids": f.ids(1), "model": "nonsense"}), 400),
        (json!({"trial_ids": f.ids(1), "extra": 1}), 400),
    ];
    for (body, want) in cases {
        let (status, text) = f.post("/summarize", &body.to_string()).await;
        assert_eq!(status, want, "{body} -> {text}");
        assert!(serde_json::from_str::<Value>(&text).unwrap()["error"].is_string());
    }
    assert_eq!(f.post("/summarize", "{not json").await.0, 400);
}

#[tokio::test]
async fn infill_and_templates() {
    let f = start().await;
    let (status, list) = f.get("/templates").await;
    assert_eq!(status, 200);
    assert_eq!(list, f.engine.templates_json());
    let templates: Vec<Value> = serde_json::from_str(&list).unwrap();
    assert!(templates.len() >= 3);
    for t in &templates {
        let id = t["id"].as_str().unwrap();
        let body = json!({"template_id": id, "trial_ids": f.ids(3)}).to_string();
        let (status, http) = f.post("/infill", &body).await;
        assert_eq!(status, 200, "{http}");
        let req: InfillRequest = serde_json::from_str(&body).unwrap();
        assert_eq!(http, f.engine.infill(&req).unwrap());
        let v: Value = serde_json::from_str(&http).unwrap();
        assert_eq!(v["warning"], WARNING);
        assert_eq!(v["direction"], t["direction"]);
        assert_eq!(v["spans"].as_array().unwrap().len(), 3);
    }
    let (status, _) = f
        .post("/infill", &json!({"template_id": "missing", "trial_ids": f.ids(1)}).to_string())
        .await;
    assert_eq!(status, 404);
}

#[tokio::test]
async fn trial_lookup() {
    let f = start().await;
    let id = f.ids(1).remove(0);
    let (status, body) = f.get(&format!("/trials/{id}")).await;
    assert_eq!(status, 200);
    assert_eq!(body, f.engine.trial(&id).unwrap());
    let v: Value = serde_json::from_str(&body).unwrap();
    assert_eq!(v["id"], id.as_str());
    assert!(v["abstract"].is_string());
    assert_eq!(f.get("/trials/unknown").await.0, 404);
}

#[tokio::test]
async fn provenance_follows_cached_requests() {
    let f = start().await;
    let ids = f.ids(3);
    let (_, s) = f.post("/summarize", &json!({"trial_ids": ids}).to_string()).await;
    let s: Value = serde_json::from_str(&s).unwrap();
    let hash = s["request_hash"].as_str().unwrap().to_string();
    let n = s["tokens"].as_array().unwrap().len();
    for i in 0..n {
        let body = json!({"request_hash": hash, "token_index": i}).to_string();
        let (status, http) = f.post("/provenance", &body).await;
        assert_eq!(status, 200, "{http}");
        let req: ProvenanceRequest = serde_json::from_str(&body).unwrap();
        assert_eq!(http, f.engine.provenance(&req).unwrap());
        let v: Value = serde_json::from_str(&http).unwrap();
        assert_eq!(v["token"], s["tokens"][i]["text"]);
        let snippets = v["snippets"].as_array().unwrap();
        assert_eq!(snippets.len(), ids.len());
        for (snip, id) in snippets.iter().zip(&ids) {
            assert_eq!(snip["trial_id"], id.as_str());
            let record = f.engine.store().get(id).unwrap();
            let aspect = v["aspect"].as_str().unwrap();
            let field = match aspect {
                "population" => &record.population,
                "interventions" => &record.interventions,
                "outcomes" => &record.outcomes,
                _ => &record.punchline,
            };
            assert!(field.contains(snip["text"].as_str().unwrap()));
        }
    }
    let (status, _) = f
        .post("/provenance", &json!({"request_hash": hash, "token_index": n}).to_string())
        .await;
    assert_eq!(status, 422);
    let (status, _) = f
        .post("/provenance", &json!({"request_hash": "0".repeat(64), "token_index": 0}).to_string())
        .await;
    assert_eq!(status, 404);

    let (_, fill) = f
        .post(
            "/infill",
            &json!({"template_id": "evidence-of-benefit", "trial_ids": ids}).to_string(),
        )
        .await;
    let fill: Value = serde_json::from_str(&fill).unwrap();
    let hash = fill["request_hash"].as_str().unwrap();
    let first = &fill["tokens"][0];
    assert_eq!(first["literal"], true);
    let (status, body) = f
        .post("/provenance", &json!({"request_hash": hash, "token_index": 0}).to_string())
        .await;
    assert_eq!(status, 200);
    let v: Value = serde_json::from_str(&body).unwrap();
    assert!(v["aspect"].is_null());
    assert!(v["snippets"].as_array().unwrap().is_empty());
    assert!(v["note"].is_string());
}

#[tokio::test]
async fn repeated_requests_are_served_from_cache() {
    let f = start().await;
    let body = json!({"trial_ids": f.ids(2)}).to_string();
    let (_, a) = f.post("/summarize", &body).await;
    let n = f.engine.cached_entries();
    let (_, b) = f.post("/summarize", &body).await;
    assert_eq!(a, b);
    assert_eq!(f.engine.cached_entries(), n);
}

#[tokio::test]
async fn unknown_route_is_404() {
    let f = start().await;
    assert_eq!(f.get("/nope").await.0, 404);
}
