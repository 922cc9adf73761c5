//! Python bindings for latentprobe.

use std::collections::BTreeMap;
use std::path::PathBuf;

use latentprobe::activation_store::{ActivationStore as CoreStore, LatentProfile as CoreProfile};
use latentprobe::embedding_scorer::{self, Embedder, EmbeddingConfig, HashingEmbedder, PrecomputedEmbeddings};
use latentprobe::scoring_stats;
use latentprobe::seeding::{mix_str, rng_from};
use latentprobe::synthetic_bench::{self, BenchSpec};
use latentprobe::task_builder::{build_batch, build_decile_sweep, BatchConfig, TaskVariant};
use latentprobe::{llm_evaluator, Error, IntruderTask, Verdict};
use pyo3::exceptions::{PyIOError, PyKeyError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyAny;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::NoRecords(_) | Error::Http(_) => PyIOError::new_err(e.to_string()),
        Error::MissingEmbedding(_) => PyKeyError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn json_to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn variant(name: &str) -> PyResult<TaskVariant> {
    name.parse().map_err(|e: Error| PyValueError::new_err(e.to_string()))
}

/// Activation records indexed by latent and context.
#[pyclass(name = "ActivationStore", module = "latentprobe", frozen)]
struct PyStore {
    inner: CoreStore,
}

#[pymethods]
impl PyStore {
    /// Load a JSONL activation dump. Malformed lines are collected in `rejects()`.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyStore {
            inner: CoreStore::ingest(&path).map_err(to_py)?,
        })
    }

    /// Build a store from JSON lines in memory.
    #[staticmethod]
    fn from_jsonl(text: &str) -> PyResult<Self> {
        let records = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                latentprobe::ActivationRecord::from_json_line(l)
                    .map_err(|reason| PyValueError::new_err(format!("line {}: {reason}", i + 1)))
            })
            .collect::<PyResult<Vec<_>>>()?;
        Ok(PyStore {
            inner: CoreStore::from_records(records).map_err(to_py)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn latent_ids(&self) -> Vec<String> {
        self.inner.latent_ids().map(str::to_string).collect()
    }

    fn rejects(&self) -> Vec<(usize, String)> {
        self.inner
            .rejects()
            .iter()
            .map(|r| (r.line, r.reason.clone()))
            .collect()
    }

    /// Max activation of `latent_id` in `context_id` (0.0 when absent).
    fn strength(&self, latent_id: &str, context_id: &str) -> f64 {
        self.inner.strength(latent_id, context_id)
    }

    /// Decile profiles of every scoreable latent.
    fn profiles(&self) -> BTreeMap<String, PyProfile> {
        self.inner
            .profiles()
            .profiles
            .into_iter()
            .map(|(id, p)| (id, PyProfile { inner: p }))
            .collect()
    }

    /// `(latent_id, positive_examples)` for latents with too few examples.
    fn unscoreable(&self) -> Vec<(String, usize)> {
        self.inner
            .profiles()
            .unscoreable
            .into_iter()
            .map(|u| (u.latent_id, u.positives))
            .collect()
    }
}

#[pyclass(name = "LatentProfile", module = "latentprobe", frozen)]
struct PyProfile {
    inner: CoreProfile,
}

#[pymethods]
impl PyProfile {
    #[getter]
    fn latent_id(&self) -> &str {
        &self.inner.latent_id
    }

    #[getter]
    fn decile_boundaries(&self) -> Vec<f64> {
        self.inner.decile_boundaries.to_vec()
    }

    #[getter]
    fn non_activating_pool(&self) -> Vec<String> {
        self.inner.non_activating_pool.clone()
    }

    /// Context ids in decile `d` (1..=10).
    fn pool(&self, d: u8) -> PyResult<Vec<String>> {
        if !(1..=10).contains(&d) {
            return Err(PyValueError::new_err(format!("decile {d} outside 1..=10")));
        }
        Ok(self.inner.pool(d).to_vec())
    }

    fn decile_of(&self, context_id: &str) -> Option<u8> {
        self.inner.decile_of(context_id)
    }

    fn __repr__(&self) -> String {
        format!(
            "LatentProfile({:?}, {} positives)",
            self.inner.latent_id,
            self.inner.strengths.len()
        )
    }
}

#[pyclass(name = "IntruderTask", module = "latentprobe", frozen)]
struct PyTask {
    inner: IntruderTask,
}

#[pymethods]
impl PyTask {
    #[getter]
    fn task_id(&self) -> &str {
        &self.inner.task_id
    }

    #[getter]
    fn latent_id(&self) -> &str {
        &self.inner.latent_id
    }

    #[getter]
    fn variant(&self) -> String {
        self.inner.variant.to_string()
    }

    #[getter]
    fn texts(&self) -> Vec<String> {
        self.inner.texts().map(str::to_string).collect()
    }

    /// 1-based position of the intruder.
    #[getter]
    fn intruder_position(&self) -> u8 {
        self.inner.intruder_position
    }

    #[getter]
    fn majority_decile(&self) -> u8 {
        self.inner.majority_decile
    }

    #[getter]
    fn intruder_decile(&self) -> Option<u8> {
        self.inner.intruder_decile
    }

    /// Chat messages sent to an LLM evaluator, as `(role, content)` pairs.
    fn prompt(&self) -> Vec<(String, String)> {
        llm_evaluator::render_prompt(&self.inner)
            .into_iter()
            .map(|m| (m.role, m.content))
            .collect()
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyTask {
            inner: serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "IntruderTask({:?}, latent={:?}, variant={})",
            self.inner.task_id, self.inner.latent_id, self.inner.variant
        )
    }
}

#[pyclass(name = "Verdict", module = "latentprobe", frozen)]
struct PyVerdict {
    inner: Verdict,
}

#[pymethods]
impl PyVerdict {
    /// Record `choice` (1..=5, or None for an unparseable answer) for `task`.
    #[new]
    #[pyo3(signature = (task, evaluator_id, choice, raw_response = String::new()))]
    fn new(task: PyRef<'_, PyTask>, evaluator_id: &str, choice: Option<u8>, raw_response: String) -> Self {
        PyVerdict {
            inner: Verdict::new(&task.inner, evaluator_id, choice, raw_response, 1),
        }
    }

    #[getter]
    fn task_id(&self) -> &str {
        &self.inner.task_id
    }

    #[getter]
    fn evaluator_id(&self) -> &str {
        &self.inner.evaluator_id
    }

    #[getter]
    fn choice(&self) -> Option<u8> {
        self.inner.choice
    }

    #[getter]
    fn correct(&self) -> Option<bool> {
        self.inner.correct
    }

    #[getter]
    fn attempts(&self) -> u32 {
        self.inner.attempts
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyVerdict {
            inner: serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "Verdict({:?}, {:?}, choice={:?}, correct={:?})",
            self.inner.task_id, self.inner.evaluator_id, self.inner.choice, self.inner.correct
        )
    }
}

/// Planted-latent benchmark description.
#[pyclass(name = "SyntheticBench", module = "latentprobe", frozen)]
struct PyBench {
    inner: BenchSpec,
}

#[pymethods]
impl PyBench {
    #[new]
    #[pyo3(signature = (monosemantic = 20, scalar = 10, noise = 20, contexts = 120))]
    fn new(monosemantic: usize, scalar: usize, noise: usize, contexts: usize) -> Self {
        PyBench {
            inner: BenchSpec::standard(monosemantic, scalar, noise, contexts),
        }
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: BenchSpec = serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        inner.validate().map_err(to_py)?;
        Ok(PyBench { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// `{latent_id: kind}` for every planted latent.
    fn kinds(&self) -> BTreeMap<String, String> {
        self.inner
            .latents
            .iter()
            .map(|l| {
                let kind = match l.kind {
                    synthetic_bench::LatentKind::Monosemantic { .. } => "monosemantic",
                    synthetic_bench::LatentKind::Scalar { .. } => "scalar",
                    synthetic_bench::LatentKind::Noise => "noise",
                };
                (l.latent_id.clone(), kind.to_string())
            })
            .collect()
    }

    fn generate(&self, seed: u64) -> PyResult<PyStore> {
        let records = synthetic_bench::generate_corpus(&self.inner, seed).map_err(to_py)?;
        Ok(PyStore {
            inner: CoreStore::from_records(records).map_err(to_py)?,
        })
    }

    /// Corpus as JSON lines, byte-identical for a given seed.
    fn corpus_jsonl(&self, seed: u64) -> PyResult<String> {
        let records = synthetic_bench::generate_corpus(&self.inner, seed).map_err(to_py)?;
        Ok(synthetic_bench::corpus_to_string(&records))
    }

    fn oracle_evaluate(&self, tasks: Vec<PyRef<'_, PyTask>>, seed: u64) -> PyResult<Vec<PyVerdict>> {
        let tasks = unwrap_tasks(&tasks);
        Ok(synthetic_bench::oracle_evaluate_all(&tasks, &self.inner, seed)
            .map_err(to_py)?
            .into_iter()
            .map(|inner| PyVerdict { inner })
            .collect())
    }
}

fn unwrap_tasks(tasks: &[PyRef<'_, PyTask>]) -> Vec<IntruderTask> {
    tasks.iter().map(|t| t.inner.clone()).collect()
}

fn unwrap_verdicts(verdicts: &[PyRef<'_, PyVerdict>]) -> Vec<Verdict> {
    verdicts.iter().map(|v| v.inner.clone()).collect()
}

/// Build intruder tasks for every scoreable latent. With `sweep`, cover all
/// 90 ordered decile pairs that many times per latent instead.
#[pyfunction]
#[pyo3(signature = (store, tasks_per_latent = 50, variant = "standard", seed = 0, sweep = None))]
fn build_tasks(
    store: PyRef<'_, PyStore>,
    tasks_per_latent: usize,
    variant: &str,
    seed: u64,
    sweep: Option<usize>,
) -> PyResult<Vec<PyTask>> {
    let v = self::variant(variant)?;
    let profiles = store.inner.profiles();
    let batch = match sweep {
        Some(reps) => build_decile_sweep(&store.inner, &profiles, reps, seed),
        None => build_batch(
            &store.inner,
            &profiles,
            &BatchConfig { tasks_per_latent, variant: v },
            seed,
        ),
    };
    Ok(batch.tasks.into_iter().map(|inner| PyTask { inner }).collect())
}

#[pyfunction]
fn random_evaluate(tasks: Vec<PyRef<'_, PyTask>>, seed: u64) -> Vec<PyVerdict> {
    synthetic_bench::random_evaluate_all(&unwrap_tasks(&tasks), seed)
        .into_iter()
        .map(|inner| PyVerdict { inner })
        .collect()
}

/// Per-latent accuracy as a list of dicts.
#[pyfunction]
fn accuracy<'py>(
    py: Python<'py>,
    tasks: Vec<PyRef<'py, PyTask>>,
    verdicts: Vec<PyRef<'py, PyVerdict>>,
) -> PyResult<Bound<'py, PyAny>> {
    let scores = scoring_stats::accuracy(&unwrap_tasks(&tasks), &unwrap_verdicts(&verdicts)).map_err(to_py)?;
    json_to_py(py, &scores)
}

/// Full report (per-evaluator scores, bins, matrices, agreement) as a dict.
#[pyfunction]
fn score_report<'py>(
    py: Python<'py>,
    tasks: Vec<PyRef<'py, PyTask>>,
    verdicts: Vec<PyRef<'py, PyVerdict>>,
) -> PyResult<Bound<'py, PyAny>> {
    let report =
        scoring_stats::score_report(&unwrap_tasks(&tasks), &unwrap_verdicts(&verdicts)).map_err(to_py)?;
    json_to_py(py, &report)
}

/// Pearson and Spearman tables over the latents shared by all score sets.
#[pyfunction]
fn agreement<'py>(py: Python<'py>, sets: BTreeMap<String, BTreeMap<String, f64>>) -> PyResult<Bound<'py, PyAny>> {
    let sets: Vec<scoring_stats::ScoreSet> = sets
        .into_iter()
        .map(|(id, scores)| scoring_stats::ScoreSet { id, scores })
        .collect();
    json_to_py(py, &scoring_stats::agreement_table(&sets).map_err(to_py)?)
}

/// Embedding AUROC per latent. Uses `embeddings` (text -> vector) when
/// given, otherwise the offline hashing embedder.
#[pyfunction]
#[pyo3(signature = (store, embeddings = None, hashing_dim = 512, set_size = 10, iterations = 20, seed = 0))]
fn embedding_scores<'py>(
    py: Python<'py>,
    store: PyRef<'py, PyStore>,
    embeddings: Option<BTreeMap<String, Vec<f64>>>,
    hashing_dim: usize,
    set_size: usize,
    iterations: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let backend: Box<dyn Embedder> = match embeddings {
        Some(map) => Box::new(PrecomputedEmbeddings::from_pairs(map).map_err(to_py)?),
        None => Box::new(HashingEmbedder { dim: hashing_dim }),
    };
    let config = EmbeddingConfig { set_size, iterations };
    let mut out = Vec::new();
    for (latent_id, profile) in &store.inner.profiles().profiles {
        let mut rng = rng_from(mix_str(seed, latent_id));
        out.push(
            embedding_scorer::score_profile(&store.inner, profile, &config, backend.as_ref(), &mut rng)
                .map_err(to_py)?,
        );
    }
    json_to_py(py, &out)
}

#[pyfunction]
fn auroc(pos: Vec<f64>, neg: Vec<f64>) -> PyResult<f64> {
    embedding_scorer::auroc(&pos, &neg).map_err(to_py)
}

#[pyfunction]
fn cosine(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    embedding_scorer::cosine(&a, &b).map_err(to_py)
}

#[pyfunction]
fn delta_plus(q_plus: Vec<f64>, e_plus: Vec<Vec<f64>>, e_minus: Vec<Vec<f64>>) -> PyResult<f64> {
    embedding_scorer::delta_plus(&q_plus, &e_plus, &e_minus).map_err(to_py)
}

#[pyfunction]
fn delta_minus(q_minus: Vec<f64>, e_plus: Vec<Vec<f64>>, e_minus: Vec<Vec<f64>>) -> PyResult<f64> {
    embedding_scorer::delta_minus(&q_minus, &e_plus, &e_minus).map_err(to_py)
}

#[pyfunction]
fn pearson(xs: Vec<f64>, ys: Vec<f64>) -> PyResult<f64> {
    scoring_stats::pearson(&xs, &ys).map_err(to_py)
}

#[pyfunction]
fn spearman(xs: Vec<f64>, ys: Vec<f64>) -> PyResult<f64> {
    scoring_stats::spearman(&xs, &ys).map_err(to_py)
}

/// Interpretability bin (0..=4) of an overall score.
#[pyfunction]
fn bin(score: f64) -> PyResult<u8> {
    scoring_stats::bin(score).map(|b| b.0).map_err(to_py)
}

#[pyfunction]
fn bin_label(score: f64) -> PyResult<&'static str> {
    scoring_stats::bin(score).map(|b| b.label()).map_err(to_py)
}

/// Intruder position (1..=5) named by a model response, if any.
#[pyfunction]
fn parse_choice(response: &str) -> Option<u8> {
    llm_evaluator::parse_choice(response)
}

#[pymodule]
#[pyo3(name = "latentprobe")]
fn latentprobe_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyStore>()?;
    m.add_class::<PyProfile>()?;
    m.add_class::<PyTask>()?;
    m.add_class::<PyVerdict>()?;
    m.add_class::<PyBench>()?;
    m.add_function(wrap_pyfunction!(build_tasks, m)?)?;
    m.add_function(wrap_pyfunction!(random_evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(score_report, m)?)?;
    m.add_function(wrap_pyfunction!(agreement, m)?)?;
    m.add_function(wrap_pyfunction!(embedding_scores, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(cosine, m)?)?;
    m.add_function(wrap_pyfunction!(delta_plus, m)?)?;
    m.add_function(wrap_pyfunction!(delta_minus, m)?)?;
    m.add_function(wrap_pyfunction!(pearson, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add_function(wrap_pyfunction!(bin, m)?)?;
    m.add_function(wrap_pyfunction!(bin_label, m)?)?;
    m.add_function(wrap_pyfunction!(parse_choice, m)?)?;
    Ok(())
}
