//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::sync::atomic::Ordering;
use std::time::{Duration, Instant};

use common::{spawn_mock, synthetic_tasks, MockChat, MockMode};
use latentprobe::activation_store::ActivationStore;
use latentprobe::embedding_scorer::{auroc, delta_minus, delta_plus, RoundScores, RoundVectors};
use latentprobe::llm_evaluator::{evaluate, render_prompt, EvaluatorConfig};
use latentprobe::scoring_stats::{bin, decile_matrix, pearson, score_report, spearman, ScoreReport};
use latentprobe::seeding::rng_from;
use latentprobe::synthetic_bench::{
    corpus_to_string, generate_corpus, oracle_evaluate_all, random_evaluate_all, write_corpus,
    BenchSpec, ORACLE_ID,
};
use latentprobe::task_builder::{
    build_batch, build_decile_sweep, build_standard_task, BatchConfig, TaskVariant,
};
use latentprobe::{jsonl, IntruderTask, Verdict};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use statrs::distribution::{ChiSquared, ContinuousCDF};

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_baseline() -> Outcome {
    let start = Instant::now();
    let (_, tasks) = synthetic_tasks(&BenchSpec::standard(50, 0, 50, 120), 50, TaskVariant::Standard, 11);
    let verdicts = random_evaluate_all(&tasks, 12);
    let elapsed = start.elapsed();
    let n = verdicts.len() as f64;
    let acc = verdicts.iter().filter(|v| v.is_correct()).count() as f64 / n;
    let sigma = (0.2 * 0.8 / n).sqrt();
    check(
        n >= 5000.0 && (acc - 0.2).abs() <= 3.0 * sigma && elapsed < Duration::from_secs(10),
        format!("{n} tasks, accuracy {acc:.4} (0.2 +/- {:.4}), {elapsed:.2?}", 3.0 * sigma),
    )
}

fn oracle_end_to_end() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let start = Instant::now();
    let bench = BenchSpec::standard(20, 10, 20, 120);
    let corpus_path = dir.path().join("corpus.jsonl");
    write_corpus(&corpus_path, &generate_corpus(&bench, 5).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let store = ActivationStore::ingest(&corpus_path).map_err(|e| e.to_string())?;
    let profiles = store.profiles();
    let batch = build_batch(&store, &profiles, &BatchConfig { tasks_per_latent: 50, variant: TaskVariant::Standard }, 5);
    let tasks_path = dir.path().join("tasks.jsonl");
    jsonl::write(&tasks_path, &batch.tasks).map_err(|e| e.to_string())?;
    let tasks: Vec<IntruderTask> = jsonl::read(&tasks_path).map_err(|e| e.to_string())?;
    let verdicts = oracle_evaluate_all(&tasks, &bench, 5).map_err(|e| e.to_string())?;
    let verdicts_path = dir.path().join("verdicts.jsonl");
    jsonl::write(&verdicts_path, &verdicts).map_err(|e| e.to_string())?;
    let verdicts: Vec<Verdict> = jsonl::read(&verdicts_path).map_err(|e| e.to_string())?;
    let report = score_report(&tasks, &verdicts).map_err(|e| e.to_string())?;
    jsonl::write_json(&dir.path().join("report.json"), &report).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();

    let oracle = report
        .evaluators
        .iter()
        .find(|r| r.evaluator_id == ORACLE_ID)
        .ok_or("no oracle report")?;
    let (mut mono_min, mut noise_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut mono_bins_ok = true;
    for line in &oracle.latents {
        let spec = bench.latent(&line.score.latent_id).ok_or("unknown latent")?;
        match spec.kind {
            latentprobe::synthetic_bench::LatentKind::Monosemantic { .. } => {
                mono_min = mono_min.min(line.score.overall);
                mono_bins_ok &= line.bin.0 == 4;
            }
            latentprobe::synthetic_bench::LatentKind::Noise => {
                noise_max = noise_max.max(line.score.overall);
            }
            _ => {}
        }
    }
    check(
        oracle.latents.len() == 50
            && tasks.len() == 2500
            && mono_min >= 0.95
            && mono_bins_ok
            && noise_max <= 0.40
            && elapsed < Duration::from_secs(60),
        format!(
            "{} latents x 50 tasks, min monosemantic {mono_min:.3} (bin 4: {mono_bins_ok}), max noise {noise_max:.3}, {elapsed:.2?}",
            oracle.latents.len()
        ),
    )
}

fn scalar_decile_structure() -> Outcome {
    let bench = BenchSpec::standard(0, 5, 0, 200);
    let store = ActivationStore::from_records(generate_corpus(&bench, 8).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let profiles = store.profiles();
    let batch = build_decile_sweep(&store, &profiles, 10, 8);
    let verdicts = oracle_evaluate_all(&batch.tasks, &bench, 8).map_err(|e| e.to_string())?;
    let matrix = decile_matrix(&batch.tasks, &verdicts).map_err(|e| e.to_string())?;
    let cells = matrix.distance_accuracy();
    let (d, a): (Vec<f64>, Vec<f64>) = cells.iter().copied().unzip();
    let rho = spearman(&d, &a).map_err(|e| e.to_string())?;
    let mut by_distance: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    for (dist, acc) in &cells {
        let e = by_distance.entry(*dist as u64).or_default();
        e.0 += acc;
        e.1 += 1;
    }
    let curve: Vec<String> = by_distance
        .values()
        .map(|(s, n)| format!("{:.2}", s / *n as f64))
        .collect();
    check(
        cells.len() == 90 && rho > 0.8,
        format!(
            "{} tasks over 90 cells, Spearman(distance, accuracy) {rho:.3}; mean by distance [{}]",
            batch.tasks.len(),
            curve.join(", ")
        ),
    )
}

fn brute_auroc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut u = 0.0;
    for p in pos {
        for n in neg {
            if p > n {
                u += 1.0;
            } else if p == n {
                u += 0.5;
            }
        }
    }
    u / (pos.len() * neg.len()) as f64
}

fn unit<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

fn clustered<R: Rng>(center: usize, dim: usize, noise: f64, rng: &mut R) -> Vec<f64> {
    let normal = Normal::new(0.0, noise).unwrap();
    (0..dim)
        .map(|i| if i == center { 1.0 } else { 0.0 } + normal.sample(rng))
        .collect()
}

fn rounds_from<F: FnMut(bool) -> Vec<f64>>(iterations: usize, n: usize, mut draw: F) -> Vec<RoundVectors> {
    (0..iterations)
        .map(|_| RoundVectors {
            q_plus: draw(true),
            q_minus: draw(false),
            e_plus: (0..n).map(|_| draw(true)).collect(),
            e_minus: (0..n).map(|_| draw(false)).collect(),
        })
        .collect()
}

fn auroc_correctness() -> Outcome {
    let mut rng = rng_from(31);
    let mut exact = 0;
    let mut complement = 0;
    for _ in 0..100 {
        let np = rng.random_range(1..40);
        let nn = rng.random_range(1..40);
        // Coarse values so ties occur.
        let levels = rng.random_range(2..20);
        let mut draw = |k: usize| -> Vec<f64> {
            (0..k).map(|_| f64::from(rng.random_range(0..levels)) / 7.0).collect()
        };
        let pos = draw(np);
        let neg = draw(nn);
        let a = auroc(&pos, &neg).map_err(|e| e.to_string())?;
        let b = auroc(&neg, &pos).map_err(|e| e.to_string())?;
        exact += usize::from(a == brute_auroc(&pos, &neg));
        complement += usize::from(a + b == 1.0);
    }
    let planted = RoundScores::collect(&rounds_from(200, 10, |p| {
        clustered(if p { 0 } else { 1 }, 16, 0.1, &mut rng)
    }))
    .and_then(|s| s.auroc())
    .map_err(|e| e.to_string())?;
    let random = RoundScores::collect(&rounds_from(200, 10, |_| unit(16, &mut rng)))
        .and_then(|s| s.auroc())
        .map_err(|e| e.to_string())?;
    check(
        exact == 100 && complement == 100 && planted >= 0.95 && (random - 0.5).abs() <= 0.1,
        format!(
            "brute-force exact {exact}/100, complement exact {complement}/100, planted {planted:.3}, random {random:.3}"
        ),
    )
}

fn delta_identities() -> Outcome {
    let s2 = std::f64::consts::SQRT_2;
    let v = |x: f64, y: f64| vec![x, y];
    let d = |r: latentprobe::Result<f64>| r.map_err(|e| e.to_string());
    let cases = [
        (d(delta_plus(&v(1.0, 0.0), &[v(1.0, 0.0)], &[v(0.0, 1.0)]))?, 1.0),
        (d(delta_plus(&v(1.0, 0.0), &[v(0.0, 1.0)], &[v(1.0, 0.0)]))?, -1.0),
        (
            d(delta_plus(
                &v(1.0 / s2, 1.0 / s2),
                &[v(1.0, 0.0), v(0.0, 1.0)],
                &[v(-1.0, 0.0), v(0.0, -1.0)],
            ))?,
            s2,
        ),
        (d(delta_minus(&v(0.0, 1.0), &[v(1.0, 0.0)], &[v(0.0, 1.0)]))?, 1.0),
        (d(delta_minus(&v(1.0, 0.0), &[v(1.0, 0.0)], &[v(0.0, 1.0)]))?, -1.0),
        (d(delta_minus(&v(1.0, 1.0), &[v(1.0, 1.0)], &[v(1.0, 1.0)]))?, 0.0),
    ];
    let hand_dev = cases.iter().map(|(got, want)| (got - want).abs()).fold(0.0, f64::max);

    let mut rng = rng_from(41);
    let mut scale_dev: f64 = 0.0;
    let mut identity_dev: f64 = 0.0;
    for _ in 0..1000 {
        let dim = rng.random_range(2..12);
        let n = rng.random_range(1..8);
        let rounds = rounds_from(1, n, |_| unit(dim, &mut rng));
        let r = &rounds[0];
        let mut scale = |x: &Vec<f64>| -> Vec<f64> {
            let c = 10f64.powf(rng.random_range(-3.0..3.0));
            x.iter().map(|y| y * c).collect()
        };
        let q_plus = scale(&r.q_plus);
        let q_minus = scale(&r.q_minus);
        let e_plus: Vec<Vec<f64>> = r.e_plus.iter().map(&mut scale).collect();
        let e_minus: Vec<Vec<f64>> = r.e_minus.iter().map(&mut scale).collect();
        let dp = d(delta_plus(&r.q_plus, &r.e_plus, &r.e_minus))?;
        let dm = d(delta_minus(&r.q_minus, &r.e_plus, &r.e_minus))?;
        scale_dev = scale_dev
            .max((dp - d(delta_plus(&q_plus, &e_plus, &e_minus))?).abs())
            .max((dm - d(delta_minus(&q_minus, &e_plus, &e_minus))?).abs());
        let scores = RoundScores::collect(&rounds).map_err(|e| e.to_string())?;
        identity_dev = identity_dev
            .max((scores.positive[0] - dp).abs())
            .max((scores.negative[0] + dm).abs());
    }
    check(
        hand_dev <= 1e-12 && scale_dev < 1e-9 && identity_dev <= 1e-12,
        format!(
            "hand cases max dev {hand_dev:.1e}, rescaling max dev {scale_dev:.1e} over 1000 trials, s(q+)=D+ / s(q-)=-D- max dev {identity_dev:.1e}"
        ),
    )
}

fn oracle_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx.sqrt() * vy.sqrt())
}

// Rank = 1 + #smaller + (#equal - 1) / 2, computed pairwise.
fn oracle_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|a| {
            let smaller = x.iter().filter(|b| *b < a).count() as f64;
            let equal = x.iter().filter(|b| *b == a).count() as f64;
            1.0 + smaller + (equal - 1.0) / 2.0
        })
        .collect()
}

fn oracle_spearman(x: &[f64], y: &[f64]) -> f64 {
    let rx = oracle_ranks(x);
    let ry = oracle_ranks(y);
    let n = x.len() as f64;
    let distinct = |v: &[f64]| {
        let mut s = v.to_vec();
        s.sort_by(f64::total_cmp);
        s.dedup();
        s.len() == v.len()
    };
    if distinct(x) && distinct(y) {
        let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b).powi(2)).sum();
        1.0 - 6.0 * d2 / (n * (n * n - 1.0))
    } else {
        oracle_pearson(&rx, &ry)
    }
}

fn statistics() -> Outcome {
    let mut rng = rng_from(51);
    let mut p_dev: f64 = 0.0;
    let mut s_dev: f64 = 0.0;
    for i in 0..100 {
        let n = rng.random_range(3..60);
        let tied = i % 2 == 0;
        let mut draw = || -> f64 {
            if tied {
                f64::from(rng.random_range(0..6))
            } else {
                rng.random::<f64>() * 10.0 - 5.0
            }
        };
        let x: Vec<f64> = (0..n).map(|_| draw()).collect();
        let mut y: Vec<f64> = x.iter().map(|v| v * 0.5 + draw()).collect();
        if i % 10 == 0 {
            y.shuffle(&mut rng);
        }
        let (Ok(p), Ok(s)) = (pearson(&x, &y), spearman(&x, &y)) else {
            continue;
        };
        p_dev = p_dev.max((p - oracle_pearson(&x, &y)).abs());
        s_dev = s_dev.max((s - oracle_spearman(&x, &y)).abs());
    }
    let edges = [
        (0.0, 0),
        (0.2, 0),
        (0.2 + f64::EPSILON, 1),
        (0.4, 1),
        (0.6, 2),
        (0.8, 3),
        (0.800001, 4),
        (1.0, 4),
    ];
    let bins_ok = edges
        .iter()
        .all(|(score, want)| bin(*score).map(|b| b.0 == *want).unwrap_or(false));
    check(
        p_dev <= 1e-12 && s_dev <= 1e-12 && bins_ok,
        format!("pearson max dev {p_dev:.1e}, spearman max dev {s_dev:.1e} over 100 instances, bin edges ok: {bins_ok}"),
    )
}

// Number of tokens inside `<<...>>` spans.
fn highlighted_tokens(text: &str) -> usize {
    let mut inside = false;
    let mut count = 0;
    for word in text.split(' ') {
        let opens = word.starts_with("<<");
        if opens {
            inside = true;
        }
        if inside {
            count += 1;
        }
        if word.ends_with(">>") {
            inside = false;
        }
    }
    count
}

fn task_invariants() -> Outcome {
    let bench = BenchSpec::standard(3, 1, 1, 120);
    let store = ActivationStore::from_records(generate_corpus(&bench, 61).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let profiles = store.profiles();
    let latents: Vec<_> = profiles.profiles.values().collect();
    let mut counts = [0f64; 5];
    let mut one_non_activating = true;
    let mut floor_ok = 0;
    let mut markers_ok = true;
    let builds = 10_000;
    for i in 0..builds {
        let profile = latents[i % latents.len()];
        let decile = (i / latents.len() % 10) as u8 + 1;
        let task = build_standard_task(&store, profile, decile, format!("t{i}"), &mut rng_from(i as u64))
            .map_err(|e| e.to_string())?;
        counts[task.intruder_position as usize - 1] += 1.0;
        let non_activating: Vec<_> = task.examples.iter().filter(|e| !e.activating).collect();
        one_non_activating &= non_activating.len() == 1
            && !task.intruder().activating
            && store.strength(&task.latent_id, &task.intruder().context_id) == 0.0;
        for e in &task.examples {
            markers_ok &= highlighted_tokens(&e.text) == e.highlight_count;
        }
        if i < 1000 {
            let counts: Vec<usize> = task
                .examples
                .iter()
                .filter(|e| e.activating)
                .map(|e| highlighted_tokens(&e.text))
                .collect();
            let mean = counts.iter().sum::<usize>() as f64 / counts.len() as f64;
            let tokens = task.intruder().text.split_whitespace().count();
            let want = (mean.floor() as usize).min(tokens);
            floor_ok += usize::from(highlighted_tokens(&task.intruder().text) == want);
        }
    }
    let expected = builds as f64 / 5.0;
    let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new(4.0).unwrap().cdf(chi2);
    check(
        p > 0.001 && one_non_activating && floor_ok == 1000 && markers_ok,
        format!(
            "positions {counts:?} chi2 {chi2:.2} p {p:.3}; one non-activating per task: {one_non_activating}; floor-of-mean {floor_ok}/1000; markers match counts: {markers_ok}"
        ),
    )
}

fn evaluator_robustness(rt: &tokio::runtime::Runtime) -> Outcome {
    let (_, tasks) = synthetic_tasks(&BenchSpec::standard(3, 0, 1, 120), 15, TaskVariant::Standard, 71);
    let config = |addr: std::net::SocketAddr, concurrency| EvaluatorConfig {
        endpoint: format!("http://{addr}"),
        model: "mock".into(),
        concurrency,
        backoff: Duration::from_millis(1),
        ..EvaluatorConfig::default()
    };
    rt.block_on(async {
        let limit = 3;
        let oracle = MockChat::new(MockMode::Oracle, &tasks, Duration::from_millis(10));
        let addr = spawn_mock(oracle.clone()).await;
        let verdicts = evaluate(&tasks, &config(addr, limit)).await.map_err(|e| e.to_string())?;
        let peak = oracle.max_in_flight.load(Ordering::SeqCst);
        let all_correct = verdicts.iter().all(|v| v.is_correct());

        // Each payload is the shared instructions plus exactly one task's prompt.
        let payloads = oracle.payloads.lock().unwrap().clone();
        let mut expected: Vec<String> = tasks
            .iter()
            .map(|t| serde_json::to_value(render_prompt(t)).unwrap().to_string())
            .collect();
        let mut sent: Vec<String> = payloads.iter().map(|p| p["messages"].to_string()).collect();
        expected.sort();
        sent.sort();
        let fresh = expected == sent;

        let garbage = MockChat::new(MockMode::Garbage, &tasks, Duration::ZERO);
        let addr = spawn_mock(garbage).await;
        let cfg = config(addr, limit);
        let bad = evaluate(&tasks, &cfg).await.map_err(|e| e.to_string())?;
        let invalid = bad
            .iter()
            .all(|v| !v.is_valid() && !v.is_correct() && v.attempts == cfg.max_retries + 1);
        let scores = latentprobe::scoring_stats::accuracy(&tasks, &bad).map_err(|e| e.to_string())?;
        let zero = scores.iter().all(|s| s.overall == 0.0 && s.n_tasks > 0);
        check(
            peak <= limit && peak > 1 && all_correct && fresh && invalid && zero,
            format!(
                "{} tasks, peak in flight {peak}/{limit}, oracle mock all correct: {all_correct}, fresh context: {fresh}, garbage invalid and scored 0: {}",
                tasks.len(),
                invalid && zero
            ),
        )
    })
}

fn report_bytes(bench: &BenchSpec, seed: u64) -> Result<(String, String, String), String> {
    let corpus = generate_corpus(bench, seed).map_err(|e| e.to_string())?;
    let corpus_text = corpus_to_string(&corpus);
    let store = ActivationStore::from_records(corpus).map_err(|e| e.to_string())?;
    let profiles = store.profiles();
    let mut tasks = build_batch(&store, &profiles, &BatchConfig { tasks_per_latent: 20, variant: TaskVariant::Standard }, seed).tasks;
    tasks.extend(build_batch(&store, &profiles, &BatchConfig { tasks_per_latent: 20, variant: TaskVariant::Decile }, seed).tasks);
    let task_text = jsonl::to_string(&tasks).map_err(|e| e.to_string())?;
    let mut verdicts = oracle_evaluate_all(&tasks, bench, seed).map_err(|e| e.to_string())?;
    verdicts.extend(random_evaluate_all(&tasks, seed));
    let report: ScoreReport = score_report(&tasks, &verdicts).map_err(|e| e.to_string())?;
    let report_text = serde_json::to_string_pretty(&report).map_err(|e| e.to_string())?;
    Ok((corpus_text, task_text, report_text))
}

fn reproducibility() -> Outcome {
    let bench = BenchSpec::standard(3, 2, 2, 150);
    let a = report_bytes(&bench, 81)?;
    let b = report_bytes(&bench, 81)?;
    let c = report_bytes(&bench, 82)?;
    check(
        a == b && a.0 != c.0 && a.1 != c.1,
        format!(
            "corpus {} B, tasks {} B, report {} B identical across runs; different seed differs: {}",
            a.0.len(),
            a.1.len(),
            a.2.len(),
            a.0 != c.0
        ),
    )
}

fn main() {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(4)
        .enable_all()
        .build()
        .expect("runtime");
    let criteria: Vec<Criterion> = vec![
        ("random-baseline fidelity", Box::new(random_baseline)),
        ("oracle end-to-end", Box::new(oracle_end_to_end)),
        ("scalar-latent decile structure", Box::new(scalar_decile_structure)),
        ("AUROC correctness", Box::new(auroc_correctness)),
        ("delta identities", Box::new(delta_identities)),
        ("statistics", Box::new(statistics)),
        ("task-construction invariants", Box::new(task_invariants)),
        ("evaluator robustness", Box::new(|| evaluator_robustness(&rt))),
        ("reproducibility", Box::new(reproducibility)),
    ];
    let mut failed = 0;
    for (name, run) in &criteria {
        match run() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
