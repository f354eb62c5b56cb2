use std::sync::Arc;
use std::time::Duration;

use expert_chain::gateway::{
    self, CompletionRequest, CompletionResponse, ErrorPolicy, GatewayState, GenerationParams, HttpBackend,
};
use expert_chain::reconstruct::IndicatorConfig;
use expert_chain::registry::{BaseModel, ExpertSpec, Registry, RegistryHandle};
use expert_chain::synth::{self, ExpertProfile, SynthHeader, SyntheticBase, SyntheticFleet};
use serde_json::{json, Value};
use tokio::net::TcpListener;

async fn listener() -> (TcpListener, String) {
    let l = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let url = format!("http://{}", l.local_addr().unwrap());
    (l, url)
}

async fn spawn_fleet(profiles: Vec<ExpertProfile>) -> String {
    let fleet = SyntheticFleet::new(profiles, Some(SyntheticBase::new("base", 0.5))).unwrap();
    let (l, url) = listener().await;
    tokio::spawn(synth::serve_synthetic_listener(Arc::new(fleet), l));
    url
}

/// Accepts connections and never answers.
async fn spawn_silent() -> String {
    let (l, url) = listener().await;
    tokio::spawn(async move {
        let mut held = Vec::new();
        while let Ok((socket, _)) = l.accept().await {
            held.push(socket);
        }
    });
    url
}

fn perfect(n: usize, indicators: &IndicatorConfig) -> Vec<ExpertProfile> {
    (1..=n)
        .map(|s| ExpertProfile::perfect(format!("E{s}"), format!("t{s}"), indicators.clone(), s as u64))
        .collect()
}

fn chain(endpoints: &[(&str, String)], base_endpoint: &str, indicators: &IndicatorConfig) -> Registry {
    let mut r = Registry::new(BaseModel {
        endpoint: base_endpoint.into(),
        model_name: "base".into(),
    })
    .unwrap();
    for (i, (id, endpoint)) in endpoints.iter().enumerate() {
        let stage = i + 1;
        r = r
            .register_expert(ExpertSpec {
                expert_id: id.to_string(),
                task_id: format!("t{stage}"),
                stage: stage as u32,
                endpoint: endpoint.clone(),
                model_name: id.to_string(),
                indicators: indicators.clone(),
            })
            .unwrap();
    }
    r
}

fn uniform_chain(n: usize, endpoint: &str, indicators: &IndicatorConfig) -> Registry {
    let ids: Vec<String> = (1..=n).map(|s| format!("E{s}")).collect();
    let eps: Vec<(&str, String)> = ids.iter().map(|id| (id.as_str(), endpoint.to_string())).collect();
    chain(&eps, endpoint, indicators)
}

async fn spawn_gateway(registry: Registry, timeout: Duration, params: GenerationParams) -> String {
    let state = Arc::new(GatewayState {
        registry: RegistryHandle::new(registry),
        backend: HttpBackend::new(timeout),
        params,
    });
    let (l, url) = listener().await;
    tokio::spawn(gateway::serve_listener(state, l));
    url
}

fn prompt(task: &str, key: &str, reference: Option<&str>) -> String {
    SynthHeader {
        task: task.into(),
        key: key.into(),
        reference: reference.map(str::to_string),
    }
    .wrap("please answer")
}

async fn ask(client: &reqwest::Client, gateway: &str, body: Value) -> (u16, Value) {
    let resp = client.post(format!("{gateway}/v1/route")).json(&body).send().await.unwrap();
    let status = resp.status().as_u16();
    (status, resp.json().await.unwrap())
}

#[tokio::test]
async fn routes_each_task_to_its_expert_over_http() {
    let ind = IndicatorConfig::non_semantic();
    let fleet = spawn_fleet(perfect(5, &ind)).await;
    let gw = spawn_gateway(uniform_chain(5, &fleet, &ind), Duration::from_secs(5), GenerationParams::default()).await;
    let client = reqwest::Client::new();
    for t in 1..=5 {
        let reference = format!("answer for task {t}");
        let (status, body) = ask(
            &client,
            &gw,
            json!({"query": prompt(&format!("t{t}"), &format!("k{t}"), Some(&reference)), "trace": true}),
        )
        .await;
        assert_eq!(status, 200, "{body}");
        assert_eq!(body["handler"]["expert"]["expert_id"], format!("E{t}"));
        assert_eq!(body["answer"], reference);
        let hops = body["hops"].as_array().unwrap();
        assert_eq!(hops.len(), 5 - t + 1);
        assert_eq!(hops.last().unwrap()["outcome"], "positive");
    }
}

#[tokio::test]
async fn unclaimed_query_goes_to_base_and_trace_query_flag_works() {
    let ind = IndicatorConfig::semantic();
    let fleet = spawn_fleet(perfect(3, &ind)).await;
    let gw = spawn_gateway(uniform_chain(3, &fleet, &ind), Duration::from_secs(5), GenerationParams::default()).await;
    let client = reqwest::Client::new();
    let body: Value = client
        .post(format!("{gw}/v1/route?trace=1"))
        .json(&json!({"query": prompt("ood", "x", None)}))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(body["handler"], "base");
    assert_eq!(body["answer"], "synthetic answer x");
    let hops = body["hops"].as_array().unwrap();
    assert_eq!(hops.len(), 3);
    assert!(hops.iter().all(|h| h["outcome"] == "negative"));

    let (_, plain) = ask(&client, &gw, json!({"query": prompt("ood", "x", None)})).await;
    assert!(plain.get("hops").is_none_or(Value::is_null));
}

#[tokio::test]
async fn rejects_malformed_requests() {
    let ind = IndicatorConfig::non_semantic();
    let fleet = spawn_fleet(perfect(1, &ind)).await;
    let gw = spawn_gateway(uniform_chain(1, &fleet, &ind), Duration::from_secs(5), GenerationParams::default()).await;
    let client = reqwest::Client::new();
    let resp = client
        .post(format!("{gw}/v1/route"))
        .header("content-type", "application/json")
        .body("{not json")
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status().as_u16(), 400);
    let (status, body) = ask(&client, &gw, json!({"question": "missing field"})).await;
    assert_eq!(status, 400, "{body}");
    let (status, _) = ask(&client, &gw, json!({"query": "   "})).await;
    assert_eq!(status, 400);

    let health = client.get(format!("{gw}/health")).send().await.unwrap();
    assert_eq!(health.text().await.unwrap(), "ok");
    let reg: Value = client.get(format!("{gw}/v1/registry")).send().await.unwrap().json().await.unwrap();
    assert_eq!(reg["experts"].as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn concurrent_requests_do_not_mix() {
    let ind = IndicatorConfig::additional_token();
    let fleet = spawn_fleet(perfect(4, &ind)).await;
    let gw = spawn_gateway(uniform_chain(4, &fleet, &ind), Duration::from_secs(10), GenerationParams::default()).await;
    let client = reqwest::Client::new();
    let jobs = (0..64).map(|i| {
        let client = client.clone();
        let gw = gw.clone();
        async move {
            let task = format!("t{}", i % 4 + 1);
            let reference = format!("reply number {i} for {task}");
            let (status, body) = ask(&client, &gw, json!({"query": prompt(&task, &format!("c{i}"), Some(&reference))})).await;
            (status, body, task, reference)
        }
    });
    for (status, body, task, reference) in futures::future::join_all(jobs).await {
        assert_eq!(status, 200);
        assert_eq!(body["answer"], reference);
        assert_eq!(body["handler"]["expert"]["task_id"], task);
    }
}

#[tokio::test]
async fn slow_expert_times_out() {
    let ind = IndicatorConfig::non_semantic();
    let fleet = spawn_fleet(perfect(1, &ind)).await;
    let silent = spawn_silent().await;
    let registry = chain(&[("E1", fleet.clone()), ("E2-slow", silent)], &fleet, &ind);
    let strict = GenerationParams {
        error_policy: ErrorPolicy::Strict,
        ..GenerationParams::default()
    };
    let client = reqwest::Client::new();
    let query = prompt("t1", "slow", Some("the right answer"));

    let gw = spawn_gateway(registry.clone(), Duration::from_millis(200), strict).await;
    let (status, body) = ask(&client, &gw, json!({"query": query})).await;
    assert_eq!(status, 502);
    let message = body["error"]["message"].as_str().unwrap();
    assert!(message.contains("E2-slow"), "{message}");
    assert!(message.contains("timed out"), "{message}");

    let gw = spawn_gateway(registry, Duration::from_millis(200), GenerationParams::default()).await;
    let (status, body) = ask(&client, &gw, json!({"query": query, "trace": true})).await;
    assert_eq!(status, 200);
    assert_eq!(body["handler"], "base");
    assert_eq!(body["hops"][0]["expert_id"], "E2-slow");
    assert_eq!(body["hops"][0]["outcome"], "transport_error");
}

#[tokio::test]
async fn unreachable_base_is_a_gateway_error() {
    let silent = spawn_silent().await;
    let registry = Registry::new(BaseModel {
        endpoint: silent,
        model_name: "base".into(),
    })
    .unwrap();
    let gw = spawn_gateway(registry, Duration::from_millis(200), GenerationParams::default()).await;
    let (status, _) = ask(&reqwest::Client::new(), &gw, json!({"query": "hello"})).await;
    assert_eq!(status, 502);
}

#[tokio::test]
async fn negative_expert_emits_negative_head_without_stop() {
    let ind = IndicatorConfig::non_semantic();
    let mut never = ExpertProfile::perfect("E1", "t1", ind.clone(), 1);
    never.recognition.clear();
    let fleet = spawn_fleet(vec![never]).await;

    let req = CompletionRequest {
        model: "E1".into(),
        prompt: prompt("t1", "n", Some("x y z")),
        max_tokens: 16,
        temperature: 0.0,
        stop: Vec::new(),
    };
    let resp: CompletionResponse = reqwest::Client::new()
        .post(format!("{fleet}/v1/completions"))
        .json(&req)
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert!(resp.choices[0].text.starts_with(&ind.negative));

    let params = GenerationParams {
        stop_on_negative: false,
        ..GenerationParams::default()
    };
    let gw = spawn_gateway(uniform_chain(1, &fleet, &ind), Duration::from_secs(5), params).await;
    let (_, body) = ask(&reqwest::Client::new(), &gw, json!({"query": prompt("t1", "n", Some("x y z")), "trace": true})).await;
    assert_eq!(body["hops"][0]["outcome"], "negative");
    assert_eq!(body["handler"], "base");
    assert_eq!(body["answer"], "x y ∅");
}

#[tokio::test]
async fn missing_indicator_falls_back_to_base() {
    let ind = IndicatorConfig::non_semantic();
    let mut profiles = perfect(3, &ind);
    profiles[1].no_indicator_rate = 1.0;
    let fleet = spawn_fleet(profiles).await;
    let gw = spawn_gateway(uniform_chain(3, &fleet, &ind), Duration::from_secs(5), GenerationParams::default()).await;
    let (_, body) = ask(&reqwest::Client::new(), &gw, json!({"query": prompt("t1", "m", Some("a b")), "trace": true})).await;
    let hops = body["hops"].as_array().unwrap();
    assert_eq!(hops.len(), 2);
    assert_eq!(hops[0]["outcome"], "negative");
    assert_eq!(hops[1]["outcome"], "no_indicator");
    assert_eq!(body["handler"], "base");
}
