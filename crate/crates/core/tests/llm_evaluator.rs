mod common;

use std::sync::atomic::Ordering;
use std::time::Duration;

use common::{spawn_mock, synthetic_tasks, MockChat, MockMode};
use latentprobe::llm_evaluator::{evaluate, EvaluatorConfig};
use latentprobe::synthetic_bench::BenchSpec;
use latentprobe::task_builder::TaskVariant;

fn config(addr: std::net::SocketAddr, concurrency: usize) -> EvaluatorConfig {
    EvaluatorConfig {
        endpoint: format!("http://{addr}"),
        model: "mock".into(),
        concurrency,
        backoff: Duration::from_millis(1),
        ..EvaluatorConfig::default()
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn oracle_mock_scores_perfectly_and_respects_concurrency() {
    let (_, tasks) = synthetic_tasks(&BenchSpec::standard(2, 0, 1, 120), 20, TaskVariant::Standard, 3);
    let mock = MockChat::new(MockMode::Oracle, &tasks, Duration::from_millis(15));
    let addr = spawn_mock(mock.clone()).await;
    let verdicts = evaluate(&tasks, &config(addr, 4)).await.unwrap();
    assert_eq!(verdicts.len(), tasks.len());
    for (t, v) in tasks.iter().zip(&verdicts) {
        assert_eq!(t.task_id, v.task_id);
        assert_eq!(v.correct, Some(true));
        assert_eq!(v.attempts, 1);
    }
    let peak = mock.max_in_flight.load(Ordering::SeqCst);
    assert!(peak <= 4, "peak in flight {peak}");
    assert!(peak >= 2, "requests were not concurrent");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn random_mock_lands_near_chance() {
    let (_, tasks) = synthetic_tasks(&BenchSpec::standard(10, 0, 10, 120), 50, TaskVariant::Standard, 5);
    assert_eq!(tasks.len(), 1000);
    let mock = MockChat::new(MockMode::Random, &tasks, Duration::ZERO);
    let addr = spawn_mock(mock).await;
    let verdicts = evaluate(&tasks, &config(addr, 16)).await.unwrap();
    let correct = verdicts.iter().filter(|v| v.is_correct()).count() as f64;
    let n = verdicts.len() as f64;
    let sigma = (0.2 * 0.8 / n).sqrt();
    assert!((correct / n - 0.2).abs() <= 3.0 * sigma, "accuracy {}", correct / n);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn garbage_answers_become_invalid_after_retries() {
    let (_, tasks) = synthetic_tasks(&BenchSpec::standard(1, 0, 1, 120), 5, TaskVariant::Standard, 1);
    let mock = MockChat::new(MockMode::Garbage, &tasks, Duration::ZERO);
    let addr = spawn_mock(mock.clone()).await;
    let cfg = config(addr, 2);
    let verdicts = evaluate(&tasks, &cfg).await.unwrap();
    for v in &verdicts {
        assert_eq!(v.choice, None);
        assert_eq!(v.correct, None);
        assert!(!v.is_correct());
        assert_eq!(v.attempts, cfg.max_retries + 1);
        assert!(v.raw_response.contains("look alike"));
    }
    assert_eq!(
        mock.requests.load(Ordering::SeqCst),
        tasks.len() * (cfg.max_retries as usize + 1)
    );
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn server_errors_are_retried_then_reported() {
    let (_, tasks) = synthetic_tasks(&BenchSpec::standard(1, 0, 1, 120), 2, TaskVariant::Standard, 1);
    let mock = MockChat::new(MockMode::ServerError, &tasks, Duration::ZERO);
    let addr = spawn_mock(mock.clone()).await;
    let cfg = config(addr, 1);
    let verdicts = evaluate(&tasks, &cfg).await.unwrap();
    for v in &verdicts {
        assert!(!v.is_valid());
        assert!(v.error.is_some());
        assert_eq!(v.attempts, cfg.max_retries + 1);
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn every_request_is_a_fresh_conversation() {
    let (_, tasks) = synthetic_tasks(&BenchSpec::standard(2, 0, 1, 120), 4, TaskVariant::Standard, 8);
    let mock = MockChat::new(MockMode::Oracle, &tasks, Duration::ZERO);
    let addr = spawn_mock(mock.clone()).await;
    evaluate(&tasks, &config(addr, 3)).await.unwrap();
    let payloads = mock.payloads.lock().unwrap();
    assert_eq!(payloads.len(), tasks.len());
    let lengths: Vec<usize> = payloads
        .iter()
        .map(|p| p["messages"].as_array().unwrap().len())
        .collect();
    assert!(lengths.iter().all(|&l| l == lengths[0]));
    for p in payloads.iter() {
        assert_eq!(p["model"], "mock");
        assert_eq!(p["temperature"], 0.0);
        let msgs = p["messages"].as_array().unwrap();
        // Only the final user turn differs between tasks.
        let prefix = &payloads[0]["messages"].as_array().unwrap()[..msgs.len() - 1];
        assert_eq!(&msgs[..msgs.len() - 1], prefix);
        let last = msgs.last().unwrap()["content"].as_str().unwrap();
        let own = tasks
            .iter()
            .filter(|t| t.examples.iter().all(|e| last.contains(&e.text)))
            .count();
        assert_eq!(own, 1, "final turn should hold exactly one task's examples");
    }
}
