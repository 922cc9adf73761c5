//! Example-embedding scoring.
//!
//! For a query `q` and example sets `E+` (activating) and `E-`
//! (non-activating, or another decile) of equal size `N`, the class margin is
//!
//! ```text
//! margin(q, own, other) = (sum_i cos(q, own_i) - sum_i cos(q, other_i)) / N
//! ```
//!
//! `delta_plus` is the margin of the positive query towards `E+` and
//! `delta_minus` the margin of the negative query towards `E-`. Each round
//! contributes `margin(q+, E+, E-)` to the positive scores and
//! `margin(q-, E+, E-) = -delta_minus` to the negative scores; the latent's
//! score is the AUROC of those two lists.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::activation_store::{ActivationStore, LatentProfile};
use crate::task_builder::{
    decoy_highlight_count, highlight, RenderedExample, HIGHLIGHT_CLOSE, HIGHLIGHT_OPEN,
};
use crate::{jsonl, seeding, Error, Result, NUM_DECILES};

/// Default embedding model name sent to HTTP backends.
pub const DEFAULT_EMBEDDING_MODEL: &str = "all-MiniLM-L6-v2";

pub trait Embedder {
    /// One vector per input text, in order.
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>>;
}

/// Text-to-vector table, usually loaded from a precomputed file.
#[derive(Debug, Clone, Default)]
pub struct PrecomputedEmbeddings {
    vectors: HashMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingLine {
    pub text: String,
    pub vector: Vec<f64>,
}

impl PrecomputedEmbeddings {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Vec<f64>)>) -> Result<Self> {
        let mut vectors = HashMap::new();
        let mut dim = None;
        for (text, vector) in pairs {
            let expected = *dim.get_or_insert(vector.len());
            if vector.len() != expected {
                return Err(Error::DimensionMismatch {
                    expected,
                    got: vector.len(),
                });
            }
            vectors.insert(text, vector);
        }
        Ok(PrecomputedEmbeddings { vectors })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let lines: Vec<EmbeddingLine> = jsonl::read(path)?;
        Self::from_pairs(lines.into_iter().map(|l| (l.text, l.vector)))
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

impl Embedder for PrecomputedEmbeddings {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        texts
            .iter()
            .map(|t| {
                self.vectors
                    .get(t)
                    .cloned()
                    .ok_or_else(|| Error::MissingEmbedding(t.clone()))
            })
            .collect()
    }
}

/// Client for an OpenAI-compatible `/v1/embeddings` endpoint.
pub struct HttpEmbedder {
    http: reqwest::blocking::Client,
    url: String,
    model: String,
    batch_size: usize,
    api_key: Option<String>,
}

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    #[serde(default)]
    index: Option<usize>,
    embedding: Vec<f64>,
}

impl HttpEmbedder {
    pub fn new(endpoint: &str, model: &str) -> Result<Self> {
        let http = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(120))
            .build()
            .map_err(|e| Error::Http(e.to_string()))?;
        let base = endpoint.trim_end_matches('/');
        let url = if base.ends_with("/embeddings") {
            base.to_string()
        } else if base.ends_with("/v1") {
            format!("{base}/embeddings")
        } else {
            format!("{base}/v1/embeddings")
        };
        Ok(HttpEmbedder {
            http,
            url,
            model: model.to_string(),
            batch_size: 64,
            api_key: None,
        })
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size.max(1);
        self
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let mut request = self.http.post(&self.url).json(&EmbeddingRequest {
            model: &self.model,
            input: texts,
        });
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(|e| Error::Http(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            return Err(Error::Http(format!("embedding endpoint returned {status}")));
        }
        let mut parsed: EmbeddingResponse = response
            .json()
            .map_err(|e| Error::Http(format!("malformed embedding response: {e}")))?;
        if parsed.data.len() != texts.len() {
            return Err(Error::Http(format!(
                "asked for {} embeddings, got {}",
                texts.len(),
                parsed.data.len()
            )));
        }
        if parsed.data.iter().all(|d| d.index.is_some()) {
            parsed.data.sort_by_key(|d| d.index);
        }
        Ok(parsed.data.into_iter().map(|d| d.embedding).collect())
    }
}

impl Embedder for HttpEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.batch_size) {
            out.extend(self.embed_batch(chunk)?);
        }
        Ok(out)
    }
}

/// Offline bag-of-words embedder: every token, with highlight markers
/// counted as tokens of their own, is hashed into one of `dim` buckets. Useful for tests and for corpora
/// where lexical overlap is the signal.
#[derive(Debug, Clone, Copy)]
pub struct HashingEmbedder {
    pub dim: usize,
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        HashingEmbedder { dim: 512 }
    }
}

impl Embedder for HashingEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        if self.dim == 0 {
            return Err(Error::InvalidArgument("embedding dimension must be positive".into()));
        }
        Ok(texts
            .iter()
            .map(|text| {
                let mut v = vec![0.0; self.dim];
                let spaced = text
                    .replace(HIGHLIGHT_OPEN, &format!(" {HIGHLIGHT_OPEN} "))
                    .replace(HIGHLIGHT_CLOSE, &format!(" {HIGHLIGHT_CLOSE} "));
                for token in spaced.split_whitespace() {
                    v[(seeding::mix_str(0, token) % self.dim as u64) as usize] += 1.0;
                }
                v
            })
            .collect())
    }
}

/// Embed `texts`, sending each distinct text to the backend once.
pub fn embed_unique(embedder: &dyn Embedder, texts: &[String]) -> Result<Vec<Vec<f64>>> {
    let mut unique: Vec<String> = texts.to_vec();
    unique.sort();
    unique.dedup();
    let vectors = embedder.embed(&unique)?;
    if vectors.len() != unique.len() {
        return Err(Error::Http(format!(
            "backend returned {} vectors for {} texts",
            vectors.len(),
            unique.len()
        )));
    }
    let lookup: HashMap<&str, &Vec<f64>> =
        unique.iter().map(String::as_str).zip(vectors.iter()).collect();
    Ok(texts.iter().map(|t| lookup[t.as_str()].clone()).collect())
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(dot / (na * nb))
}

/// `(sum cos(q, own) - sum cos(q, other)) / N`.
pub fn class_margin(query: &[f64], own: &[Vec<f64>], other: &[Vec<f64>]) -> Result<f64> {
    if own.is_empty() || own.len() != other.len() {
        return Err(Error::InvalidArgument(format!(
            "example sets must be non-empty and equal in size ({} vs {})",
            own.len(),
            other.len()
        )));
    }
    let toward = own.iter().map(|e| cosine(query, e)).sum::<Result<f64>>()?;
    let away = other.iter().map(|e| cosine(query, e)).sum::<Result<f64>>()?;
    Ok((toward - away) / own.len() as f64)
}

pub fn delta_plus(q_plus: &[f64], e_plus: &[Vec<f64>], e_minus: &[Vec<f64>]) -> Result<f64> {
    class_margin(q_plus, e_plus, e_minus)
}

pub fn delta_minus(q_minus: &[f64], e_plus: &[Vec<f64>], e_minus: &[Vec<f64>]) -> Result<f64> {
    class_margin(q_minus, e_minus, e_plus)
}

/// Probability that a positive score beats a negative one, ties counting
/// half (the Mann-Whitney U statistic normalised by `|pos| * |neg|`).
pub fn auroc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::InvalidArgument("AUROC needs non-empty score lists".into()));
    }
    if pos.iter().chain(neg).any(|x| x.is_nan()) {
        return Err(Error::InvalidArgument("AUROC scores contain NaN".into()));
    }
    let mut sorted_neg = neg.to_vec();
    sorted_neg.sort_by(f64::total_cmp);
    // twice the U statistic, kept integral so the result is exact
    let mut twice_u: u128 = 0;
    for p in pos {
        let below = sorted_neg.partition_point(|n| n < p);
        let not_above = sorted_neg.partition_point(|n| n <= p);
        twice_u += 2 * below as u128 + (not_above - below) as u128;
    }
    let pairs = 2 * pos.len() as u128 * neg.len() as u128;
    Ok(twice_u as f64 / pairs as f64)
}

/// Vectors for one query round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundVectors {
    pub q_plus: Vec<f64>,
    pub q_minus: Vec<f64>,
    pub e_plus: Vec<Vec<f64>>,
    pub e_minus: Vec<Vec<f64>>,
}

/// Positive and negative classifier scores collected over rounds.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoundScores {
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

impl RoundScores {
    pub fn collect(rounds: &[RoundVectors]) -> Result<Self> {
        let mut out = RoundScores::default();
        for r in rounds {
            out.positive.push(class_margin(&r.q_plus, &r.e_plus, &r.e_minus)?);
            out.negative.push(class_margin(&r.q_minus, &r.e_plus, &r.e_minus)?);
        }
        Ok(out)
    }

    pub fn auroc(&self) -> Result<f64> {
        auroc(&self.positive, &self.negative)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    /// Size `N` of each example set.
    pub set_size: usize,
    /// Query rounds per latent and decile.
    pub iterations: usize,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            set_size: 10,
            iterations: 20,
        }
    }
}

/// Texts for one round, before embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundTexts {
    pub q_plus: String,
    pub q_minus: String,
    pub e_plus: Vec<String>,
    pub e_minus: Vec<String>,
}

/// Where the negative class comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegativeSource {
    NonActivating,
    Decile(u8),
}

fn render_pool_sample<R: Rng + ?Sized>(
    store: &ActivationStore,
    profile: &LatentProfile,
    pool: &[String],
    decile: Option<u8>,
    target: Option<usize>,
    count: usize,
    rng: &mut R,
) -> Result<Vec<RenderedExample>> {
    index::sample(rng, pool.len(), count)
        .into_iter()
        .map(|i| {
            let ctx = &pool[i];
            let (record, activating) = match decile {
                Some(_) => (store.activating_example(&profile.latent_id, ctx), true),
                None => (store.non_activating_example(&profile.latent_id, ctx), false),
            };
            let record = record.ok_or_else(|| {
                Error::InvalidArgument(format!("context {ctx} missing from the store"))
            })?;
            let mut ex = highlight(&record, activating, target, rng)?;
            ex.source_decile = decile;
            Ok(ex)
        })
        .collect()
}

/// Sample the texts for `config.iterations` rounds. Within a round the
/// queries and example sets are disjoint; examples may recur across rounds.
pub fn sample_rounds<R: Rng + ?Sized>(
    store: &ActivationStore,
    profile: &LatentProfile,
    decile: u8,
    negatives: NegativeSource,
    config: &EmbeddingConfig,
    rng: &mut R,
) -> Result<Vec<RoundTexts>> {
    if config.set_size == 0 || config.iterations == 0 {
        return Err(Error::InvalidArgument(
            "set size and iterations must be positive".into(),
        ));
    }
    let need = config.set_size + 1;
    let pos_pool = profile.pool(decile);
    let (neg_pool, neg_decile) = match negatives {
        NegativeSource::NonActivating => (profile.non_activating_pool.as_slice(), None),
        NegativeSource::Decile(d) => (profile.pool(d), Some(d)),
    };
    if pos_pool.len() < need {
        return Err(Error::Skipped(format!(
            "decile {decile} has {} examples, need {need}",
            pos_pool.len()
        )));
    }
    if neg_pool.len() < need {
        return Err(Error::Skipped(format!(
            "negative pool has {} examples, need {need}",
            neg_pool.len()
        )));
    }
    let mut rounds = Vec::with_capacity(config.iterations);
    for _ in 0..config.iterations {
        let mut pos = render_pool_sample(store, profile, pos_pool, Some(decile), None, need, rng)?;
        let target = decoy_highlight_count(&pos[1..]);
        let mut neg = render_pool_sample(store, profile, neg_pool, neg_decile, Some(target), need, rng)?;
        let q_plus = pos.remove(0).text;
        let q_minus = neg.remove(0).text;
        rounds.push(RoundTexts {
            q_plus,
            q_minus,
            e_plus: pos.into_iter().map(|e| e.text).collect(),
            e_minus: neg.into_iter().map(|e| e.text).collect(),
        });
    }
    Ok(rounds)
}

/// Embed sampled round texts.
pub fn embed_rounds(embedder: &dyn Embedder, rounds: &[RoundTexts]) -> Result<Vec<RoundVectors>> {
    let mut texts = Vec::new();
    for r in rounds {
        texts.push(r.q_plus.clone());
        texts.push(r.q_minus.clone());
        texts.extend(r.e_plus.iter().cloned());
        texts.extend(r.e_minus.iter().cloned());
    }
    let mut vectors = embed_unique(embedder, &texts)?.into_iter();
    let mut take = |n: usize| -> Vec<Vec<f64>> { vectors.by_ref().take(n).collect() };
    Ok(rounds
        .iter()
        .map(|r| {
            let q_plus = take(1).remove(0);
            let q_minus = take(1).remove(0);
            RoundVectors {
                q_plus,
                q_minus,
                e_plus: take(r.e_plus.len()),
                e_minus: take(r.e_minus.len()),
            }
        })
        .collect())
}

/// AUROC of activating versus non-activating queries for one decile.
pub fn score_latent<R: Rng + ?Sized>(
    store: &ActivationStore,
    profile: &LatentProfile,
    decile: u8,
    config: &EmbeddingConfig,
    embedder: &dyn Embedder,
    rng: &mut R,
) -> Result<f64> {
    let rounds = sample_rounds(store, profile, decile, NegativeSource::NonActivating, config, rng)?;
    RoundScores::collect(&embed_rounds(embedder, &rounds)?)?.auroc()
}

/// AUROC of queries from `decile_a` against queries from `decile_b`.
pub fn decile_pair_score<R: Rng + ?Sized>(
    store: &ActivationStore,
    profile: &LatentProfile,
    decile_a: u8,
    decile_b: u8,
    config: &EmbeddingConfig,
    embedder: &dyn Embedder,
    rng: &mut R,
) -> Result<f64> {
    let rounds = sample_rounds(
        store,
        profile,
        decile_a,
        NegativeSource::Decile(decile_b),
        config,
        rng,
    )?;
    RoundScores::collect(&embed_rounds(embedder, &rounds)?)?.auroc()
}

/// Swap the classes of already-sampled rounds.
pub fn swap_roles(rounds: &[RoundVectors]) -> Vec<RoundVectors> {
    rounds
        .iter()
        .map(|r| RoundVectors {
            q_plus: r.q_minus.clone(),
            q_minus: r.q_plus.clone(),
            e_plus: r.e_minus.clone(),
            e_minus: r.e_plus.clone(),
        })
        .collect()
}

/// Per-decile embedding AUROCs for one latent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentEmbeddingScore {
    pub latent_id: String,
    /// Mean AUROC over scored deciles; `None` when no decile could be scored.
    pub score: Option<f64>,
    pub per_decile: BTreeMap<u8, f64>,
    pub skipped: BTreeMap<u8, String>,
}

/// Score every decile of a latent against non-activating contexts.
pub fn score_profile<R: Rng + ?Sized>(
    store: &ActivationStore,
    profile: &LatentProfile,
    config: &EmbeddingConfig,
    embedder: &dyn Embedder,
    rng: &mut R,
) -> Result<LatentEmbeddingScore> {
    let mut per_decile = BTreeMap::new();
    let mut skipped = BTreeMap::new();
    for d in 1..=NUM_DECILES as u8 {
        match score_latent(store, profile, d, config, embedder, rng) {
            Ok(a) => {
                per_decile.insert(d, a);
            }
            Err(Error::Skipped(reason)) => {
                skipped.insert(d, reason);
            }
            Err(e) => return Err(e),
        }
    }
    let score = (!per_decile.is_empty())
        .then(|| per_decile.values().sum::<f64>() / per_decile.len() as f64);
    Ok(LatentEmbeddingScore {
        latent_id: profile.latent_id.clone(),
        score,
        per_decile,
        skipped,
    })
}

/// 10x10 matrix of decile-pair AUROCs; `None` on the diagonal and where a
/// pool was too small.
pub fn decile_pair_matrix<R: Rng + ?Sized>(
    store: &ActivationStore,
    profile: &LatentProfile,
    config: &EmbeddingConfig,
    embedder: &dyn Embedder,
    rng: &mut R,
) -> Result<Vec<Vec<Option<f64>>>> {
    let mut matrix = vec![vec![None; NUM_DECILES]; NUM_DECILES];
    for a in 1..=NUM_DECILES as u8 {
        for b in 1..=NUM_DECILES as u8 {
            if a == b {
                continue;
            }
            match decile_pair_score(store, profile, a, b, config, embedder, rng) {
                Ok(v) => matrix[a as usize - 1][b as usize - 1] = Some(v),
                Err(Error::Skipped(_)) => {}
                Err(e) => return Err(e),
            }
        }
    }
    Ok(matrix)
}
