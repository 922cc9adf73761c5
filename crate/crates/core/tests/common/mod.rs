#![allow(dead_code)]

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::routing::post;
use axum::{Json, Router};
use latentprobe::activation_store::ActivationStore;
use latentprobe::llm_evaluator::render_prompt;
use latentprobe::synthetic_bench::{generate_corpus, BenchSpec};
use latentprobe::task_builder::{build_batch, BatchConfig, TaskVariant};
use latentprobe::IntruderTask;
use rand::{Rng, SeedableRng};
use serde_json::{json, Value};

#[derive(Clone, Copy, Debug)]
pub enum MockMode {
    /// Answer with the true intruder position.
    Oracle,
    /// Uniform guess.
    Random,
    /// Never mention a number.
    Garbage,
    /// Fail with HTTP 500.
    ServerError,
}

pub struct MockChat {
    pub mode: MockMode,
    pub delay: Duration,
    pub answers: HashMap<String, u8>,
    pub in_flight: AtomicUsize,
    pub max_in_flight: AtomicUsize,
    pub requests: AtomicUsize,
    pub payloads: Mutex<Vec<Value>>,
    rng: Mutex<rand_chacha::ChaCha8Rng>,
}

impl MockChat {
    pub fn new(mode: MockMode, tasks: &[IntruderTask], delay: Duration) -> Arc<Self> {
        let answers = tasks
            .iter()
            .map(|t| (render_prompt(t).last().unwrap().content.clone(), t.intruder_position))
            .collect();
        Arc::new(MockChat {
            mode,
            delay,
            answers,
            in_flight: AtomicUsize::new(0),
            max_in_flight: AtomicUsize::new(0),
            requests: AtomicUsize::new(0),
            payloads: Mutex::new(Vec::new()),
            rng: Mutex::new(rand_chacha::ChaCha8Rng::seed_from_u64(99)),
        })
    }
}

async fn complete(
    State(mock): State<Arc<MockChat>>,
    Json(body): Json<Value>,
) -> Result<Json<Value>, axum::http::StatusCode> {
    let now = mock.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    mock.max_in_flight.fetch_max(now, Ordering::SeqCst);
    mock.requests.fetch_add(1, Ordering::SeqCst);
    tokio::time::sleep(mock.delay).await;
    let last = body["messages"]
        .as_array()
        .and_then(|m| m.last())
        .and_then(|m| m["content"].as_str())
        .unwrap_or_default()
        .to_string();
    mock.payloads.lock().unwrap().push(body);
    let reply = match mock.mode {
        MockMode::Oracle => Some(format!("Answer: {}", mock.answers.get(&last).copied().unwrap_or(1))),
        MockMode::Random => Some(format!("I think it is {}", mock.rng.lock().unwrap().random_range(1..=5))),
        MockMode::Garbage => Some("These all look alike to me.".to_string()),
        MockMode::ServerError => None,
    };
    mock.in_flight.fetch_sub(1, Ordering::SeqCst);
    match reply {
        Some(text) => Ok(Json(json!({
            "choices": [{"index": 0, "message": {"role": "assistant", "content": text}}]
        }))),
        None => Err(axum::http::StatusCode::INTERNAL_SERVER_ERROR),
    }
}

/// Start the mock on an ephemeral port of a background runtime.
pub async fn spawn_mock(mock: Arc<MockChat>) -> SocketAddr {
    let app = Router::new()
        .route("/v1/chat/completions", post(complete))
        .with_state(mock);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    addr
}

/// Store and standard tasks over a synthetic corpus.
pub fn synthetic_tasks(
    bench: &BenchSpec,
    tasks_per_latent: usize,
    variant: TaskVariant,
    seed: u64,
) -> (ActivationStore, Vec<IntruderTask>) {
    let store = ActivationStore::from_records(generate_corpus(bench, seed).unwrap()).unwrap();
    let profiles = store.profiles();
    let batch = build_batch(
        &store,
        &profiles,
        &BatchConfig { tasks_per_latent, variant },
        seed,
    );
    (store, batch.tasks)
}
