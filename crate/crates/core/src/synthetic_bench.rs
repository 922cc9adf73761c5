//! Synthetic corpora with planted latents of known behaviour.
//!
//! Three kinds of latent are planted:
//!
//! * monosemantic: fires exactly on its trigger tokens;
//! * scalar: fires on one token of an ordered level vocabulary, with the
//!   activation equal to a planted intensity and the level word tracking
//!   that intensity up to Gaussian noise;
//! * noise: fires on uniformly random positions, so its examples share
//!   nothing.
//!
//! Contexts are i.i.d. draws from a small filler vocabulary that never
//! contains trigger or level words.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::activation_store::ActivationRecord;
use crate::seeding::{self, mix_str};
use crate::task_builder::{IntruderTask, TaskVariant, HIGHLIGHT_CLOSE, HIGHLIGHT_OPEN};
use crate::verdict::Verdict;
use crate::{jsonl, Error, Result, EXAMPLES_PER_TASK};

pub const ORACLE_ID: &str = "oracle";
pub const RANDOM_ID: &str = "random";

const FILLER: &[&str] = &[
    "the", "a", "of", "and", "to", "in", "is", "was", "for", "on", "with", "as", "at", "by",
    "from", "that", "this", "it", "be", "are", "were", "had", "has", "have", "not", "but", "or",
    "an", "they", "we", "you", "he", "she", "his", "her", "their", "our", "one", "two", "three",
    "after", "before", "over", "under", "while", "when", "where", "which", "who", "what", "city",
    "house", "river", "table", "window", "garden", "letter", "market", "morning", "evening",
    "road", "school", "office", "paper", "story", "friend", "teacher", "doctor", "music",
    "water", "light", "stone", "field", "train", "bridge", "answer", "number", "question",
    "little", "large", "old", "new", "early", "late", "quiet", "open", "walked", "said",
    "looked", "found", "made", "took", "went", "came", "gave", "kept", "left", "called",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LatentKind {
    Monosemantic {
        triggers: Vec<String>,
    },
    Scalar {
        /// Level words, lowest intensity first.
        levels: Vec<String>,
        /// Standard deviation of the intensity noise before quantising to a
        /// level word.
        level_noise: f64,
    },
    Noise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedLatentSpec {
    pub latent_id: String,
    #[serde(flatten)]
    pub kind: LatentKind,
    pub contexts: usize,
}

impl PlantedLatentSpec {
    /// Tokens that carry this latent's signal.
    pub fn signal_tokens(&self) -> &[String] {
        match &self.kind {
            LatentKind::Monosemantic { triggers } => triggers,
            LatentKind::Scalar { levels, .. } => levels,
            LatentKind::Noise => &[],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSpec {
    pub vocabulary: Vec<String>,
    pub context_len: usize,
    pub latents: Vec<PlantedLatentSpec>,
}

impl BenchSpec {
    /// A mix of monosemantic, scalar and noise latents over the built-in
    /// filler vocabulary.
    pub fn standard(monosemantic: usize, scalar: usize, noise: usize, contexts: usize) -> Self {
        let mut latents = Vec::new();
        let mut next = 0;
        let mut id = || {
            next += 1;
            format!("latent-{:03}", next - 1)
        };
        for i in 0..monosemantic {
            latents.push(PlantedLatentSpec {
                latent_id: id(),
                kind: LatentKind::Monosemantic {
                    triggers: vec![format!("zeb{i}"), format!("quor{i}")],
                },
                contexts,
            });
        }
        for i in 0..scalar {
            latents.push(PlantedLatentSpec {
                latent_id: id(),
                kind: LatentKind::Scalar {
                    levels: (0..10).map(|k| format!("lv{i}x{k}")).collect(),
                    level_noise: 0.12,
                },
                contexts,
            });
        }
        for _ in 0..noise {
            latents.push(PlantedLatentSpec {
                latent_id: id(),
                kind: LatentKind::Noise,
                contexts,
            });
        }
        BenchSpec {
            vocabulary: FILLER.iter().map(|s| s.to_string()).collect(),
            context_len: 64,
            latents,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocabulary.is_empty() || self.context_len == 0 {
            return Err(Error::InvalidArgument(
                "vocabulary and context length must be non-empty".into(),
            ));
        }
        let vocab: BTreeSet<&str> = self.vocabulary.iter().map(String::as_str).collect();
        let mut ids = BTreeSet::new();
        let mut signal = BTreeSet::new();
        for l in &self.latents {
            if !ids.insert(l.latent_id.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate latent {}", l.latent_id)));
            }
            match &l.kind {
                LatentKind::Monosemantic { triggers } if triggers.is_empty() => {
                    return Err(Error::InvalidArgument(format!("{} has no triggers", l.latent_id)))
                }
                LatentKind::Scalar { levels, level_noise } => {
                    if levels.len() < 2 {
                        return Err(Error::InvalidArgument(format!(
                            "{} needs at least two levels",
                            l.latent_id
                        )));
                    }
                    if !level_noise.is_finite() || *level_noise < 0.0 {
                        return Err(Error::InvalidArgument(format!(
                            "{} has invalid level noise",
                            l.latent_id
                        )));
                    }
                }
                _ => {}
            }
            for t in l.signal_tokens() {
                if vocab.contains(t.as_str()) || !signal.insert(t.as_str()) {
                    return Err(Error::InvalidArgument(format!(
                        "signal token {t:?} of {} is not unique",
                        l.latent_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn latent(&self, latent_id: &str) -> Option<&PlantedLatentSpec> {
        self.latents.iter().find(|l| l.latent_id == latent_id)
    }
}

fn filler_context<R: Rng + ?Sized>(bench: &BenchSpec, rng: &mut R) -> Vec<String> {
    (0..bench.context_len)
        .map(|_| bench.vocabulary[rng.random_range(0..bench.vocabulary.len())].clone())
        .collect()
}

/// Intensity in (0, 1].
fn intensity<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    1.0 - rng.random::<f64>()
}

/// Level index for an intensity after adding Gaussian noise.
fn level_for<R: Rng + ?Sized>(value: f64, levels: usize, noise: f64, rng: &mut R) -> usize {
    let jitter = if noise > 0.0 {
        Normal::new(0.0, noise).expect("noise is finite").sample(rng)
    } else {
        0.0
    };
    let v = (value + jitter).clamp(0.0, 1.0);
    ((v * levels as f64) as usize).min(levels - 1)
}

fn plant<R: Rng + ?Sized>(
    bench: &BenchSpec,
    spec: &PlantedLatentSpec,
    rng: &mut R,
) -> (Vec<String>, Vec<f64>) {
    let mut tokens = filler_context(bench, rng);
    let n = tokens.len();
    let mut acts = vec![0.0; n];
    match &spec.kind {
        LatentKind::Monosemantic { triggers } => {
            let hits = rng.random_range(1..=3usize.min(n));
            for pos in index::sample(rng, n, hits) {
                tokens[pos] = triggers[rng.random_range(0..triggers.len())].clone();
                acts[pos] = intensity(rng);
            }
        }
        LatentKind::Scalar {
            levels,
            level_noise,
        } => {
            let pos = rng.random_range(0..n);
            let value = intensity(rng);
            tokens[pos] = levels[level_for(value, levels.len(), *level_noise, rng)].clone();
            acts[pos] = value;
        }
        LatentKind::Noise => {
            let hits = rng.random_range(1..=3usize.min(n));
            for pos in index::sample(rng, n, hits) {
                acts[pos] = intensity(rng);
            }
        }
    }
    (tokens, acts)
}

/// Generate activation records for every planted latent. Deterministic in
/// `seed`; each latent draws from its own sub-stream.
pub fn generate_corpus(bench: &BenchSpec, seed: u64) -> Result<Vec<ActivationRecord>> {
    bench.validate()?;
    let mut records = Vec::new();
    let mut ctx = 0usize;
    for spec in &bench.latents {
        let mut rng = seeding::rng_from(mix_str(seed, &spec.latent_id));
        for _ in 0..spec.contexts {
            let (tokens, acts) = plant(bench, spec, &mut rng);
            records.push(ActivationRecord::new(
                spec.latent_id.clone(),
                format!("ctx{ctx:06}"),
                tokens,
                acts,
            )?);
            ctx += 1;
        }
    }
    Ok(records)
}

/// Dump text for `records`, byte-identical for identical input.
pub fn corpus_to_string(records: &[ActivationRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.to_json_line());
        out.push('\n');
    }
    out
}

pub fn write_corpus(path: &Path, records: &[ActivationRecord]) -> Result<()> {
    std::fs::write(path, corpus_to_string(records)).map_err(|e| Error::io(path, e))
}

pub fn write_bench(path: &Path, bench: &BenchSpec) -> Result<()> {
    jsonl::write_json(path, bench)
}

pub fn read_bench(path: &Path) -> Result<BenchSpec> {
    let bench: BenchSpec = jsonl::read_json(path)?;
    bench.validate()?;
    Ok(bench)
}

/// Plain tokens of a rendered example, highlight markers removed.
pub fn plain_tokens(text: &str) -> Vec<&str> {
    text.split_whitespace()
        .map(|t| t.trim_start_matches(HIGHLIGHT_OPEN).trim_end_matches(HIGHLIGHT_CLOSE))
        .collect()
}

/// Highest level index present in a rendered example.
fn level_of(text: &str, levels: &BTreeMap<&str, usize>) -> Option<usize> {
    plain_tokens(text).iter().filter_map(|t| levels.get(t).copied()).max()
}

fn pick<R: Rng + ?Sized>(candidates: &[usize], rng: &mut R) -> usize {
    candidates[rng.random_range(0..candidates.len())]
}

/// Ground-truth evaluator for tasks built from a corpus of `bench`.
///
/// Standard tasks: picks the example lacking the latent's signal tokens.
/// Decile tasks on scalar latents: picks the example whose level deviates
/// most from the median level. Anything else has no signal and is guessed
/// uniformly, as are ties.
pub fn oracle_evaluate<R: Rng + ?Sized>(
    task: &IntruderTask,
    bench: &BenchSpec,
    rng: &mut R,
) -> Result<Verdict> {
    let spec = bench.latent(&task.latent_id).ok_or_else(|| {
        Error::InvalidArgument(format!("latent {} is not in the bench spec", task.latent_id))
    })?;
    let all: Vec<usize> = (0..task.examples.len()).collect();
    let (candidates, reason) = match (&spec.kind, task.variant) {
        (LatentKind::Noise, _) => (all, "no signal"),
        (_, TaskVariant::Standard) => {
            let signal: BTreeSet<&str> = spec.signal_tokens().iter().map(String::as_str).collect();
            let lacking: Vec<usize> = task
                .examples
                .iter()
                .enumerate()
                .filter(|(_, e)| !plain_tokens(&e.text).iter().any(|t| signal.contains(t)))
                .map(|(i, _)| i)
                .collect();
            if lacking.is_empty() {
                (all, "every example carries the signal")
            } else {
                (lacking, "signal absent")
            }
        }
        (LatentKind::Scalar { levels, .. }, TaskVariant::Decile) => {
            let index: BTreeMap<&str, usize> =
                levels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
            let found: Vec<Option<usize>> = task.examples.iter().map(|e| level_of(&e.text, &index)).collect();
            let mut known: Vec<f64> = found.iter().flatten().map(|l| *l as f64).collect();
            if known.is_empty() {
                (all, "no level words")
            } else {
                known.sort_by(f64::total_cmp);
                let median = if known.len() % 2 == 1 {
                    known[known.len() / 2]
                } else {
                    (known[known.len() / 2 - 1] + known[known.len() / 2]) / 2.0
                };
                let deviation: Vec<f64> = found
                    .iter()
                    .map(|l| l.map_or(f64::INFINITY, |l| (l as f64 - median).abs()))
                    .collect();
                let max = deviation.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let best: Vec<usize> = (0..deviation.len()).filter(|i| deviation[*i] == max).collect();
                (best, "largest level deviation")
            }
        }
        (LatentKind::Monosemantic { .. }, TaskVariant::Decile) => (all, "binary latent"),
    };
    let choice = pick(&candidates, rng) as u8 + 1;
    Ok(Verdict::new(
        task,
        ORACLE_ID,
        Some(choice),
        format!("{reason}: {choice}"),
        1,
    ))
}

/// Uniform guess in 1..=5.
pub fn random_evaluate<R: Rng + ?Sized>(task: &IntruderTask, rng: &mut R) -> Verdict {
    let choice = rng.random_range(1..=EXAMPLES_PER_TASK as u8);
    Verdict::new(task, RANDOM_ID, Some(choice), choice.to_string(), 1)
}

/// Oracle verdicts for a task list; each task uses its own sub-stream.
pub fn oracle_evaluate_all(tasks: &[IntruderTask], bench: &BenchSpec, seed: u64) -> Result<Vec<Verdict>> {
    tasks
        .iter()
        .map(|t| oracle_evaluate(t, bench, &mut seeding::rng_from(mix_str(seed, &t.task_id))))
        .collect()
}

pub fn random_evaluate_all(tasks: &[IntruderTask], seed: u64) -> Vec<Verdict> {
    tasks
        .iter()
        .map(|t| random_evaluate(t, &mut seeding::rng_from(mix_str(seed, &t.task_id))))
        .collect()
}
