//! Activation dumps, per-example strengths and decile profiles.
//!
//! A dump is line-delimited JSON, one record per (latent, context):
//!
//! ```text
//! {"latent_id":"L7","context_id":"c0001","tokens":["the","cat"],"activations":[0.0,2.5]}
//! ```
//!
//! Contexts without a record for a latent are treated as zero activation for
//! that latent, so sparse dumps are the normal case.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result, NUM_DECILES, WINDOW_LEN};

/// Minimum number of positive examples a latent needs to be profiled.
pub const MIN_POSITIVE_EXAMPLES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizedContext {
    pub context_id: String,
    pub tokens: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationRecord {
    pub latent_id: String,
    pub context: TokenizedContext,
    pub activations: Vec<f64>,
}

/// Wire shape of one dump line.
#[derive(Debug, Serialize, Deserialize)]
struct DumpLine {
    latent_id: String,
    context_id: String,
    tokens: Vec<String>,
    activations: Vec<f64>,
}

impl ActivationRecord {
    pub fn new(
        latent_id: impl Into<String>,
        context_id: impl Into<String>,
        tokens: Vec<String>,
        activations: Vec<f64>,
    ) -> Result<Self> {
        let record = ActivationRecord {
            latent_id: latent_id.into(),
            context: TokenizedContext {
                context_id: context_id.into(),
                tokens,
            },
            activations,
        };
        record.validate().map_err(Error::InvalidArgument)?;
        Ok(record)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.latent_id.is_empty() {
            return Err("empty latent_id".into());
        }
        if self.context.context_id.is_empty() {
            return Err("empty context_id".into());
        }
        if self.context.tokens.is_empty() {
            return Err("empty token list".into());
        }
        if self.activations.len() != self.context.tokens.len() {
            return Err(format!(
                "{} activations for {} tokens",
                self.activations.len(),
                self.context.tokens.len()
            ));
        }
        if let Some(bad) = self.activations.iter().find(|a| !a.is_finite() || **a < 0.0) {
            return Err(format!("activation {bad} is negative or not finite"));
        }
        Ok(())
    }

    /// Parse one dump line.
    pub fn from_json_line(line: &str) -> std::result::Result<Self, String> {
        let raw: DumpLine = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let record = ActivationRecord {
            latent_id: raw.latent_id,
            context: TokenizedContext {
                context_id: raw.context_id,
                tokens: raw.tokens,
            },
            activations: raw.activations,
        };
        record.validate()?;
        Ok(record)
    }

    pub fn to_json_line(&self) -> String {
        let raw = DumpLine {
            latent_id: self.latent_id.clone(),
            context_id: self.context.context_id.clone(),
            tokens: self.context.tokens.clone(),
            activations: self.activations.clone(),
        };
        serde_json::to_string(&raw).expect("dump line serializes")
    }

    pub fn tokens(&self) -> &[String] {
        &self.context.tokens
    }

    pub fn context_id(&self) -> &str {
        &self.context.context_id
    }

    /// Position of the first maximal activation.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, a) in self.activations.iter().enumerate() {
            if *a > self.activations[best] {
                best = i;
            }
        }
        best
    }
}

/// Scalar strength of an example: its maximum per-token activation.
pub fn example_strength(record: &ActivationRecord) -> f64 {
    record.activations.iter().copied().fold(0.0, f64::max)
}

/// Slice `record` to at most `length` tokens around its maximum activation.
///
/// The argmax sits at offset `length / 2` when the context allows it;
/// otherwise the window is clamped to the nearest edge.
pub fn window(record: &ActivationRecord, length: usize) -> ActivationRecord {
    let n = record.activations.len();
    if length == 0 || n <= length {
        return record.clone();
    }
    let start = record.argmax().saturating_sub(length / 2).min(n - length);
    let end = start + length;
    ActivationRecord {
        latent_id: record.latent_id.clone(),
        context: TokenizedContext {
            context_id: record.context.context_id.clone(),
            tokens: record.context.tokens[start..end].to_vec(),
        },
        activations: record.activations[start..end].to_vec(),
    }
}

/// A dump line that failed to parse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedLine {
    pub line: usize,
    pub reason: String,
}

/// All valid records of a dump, indexed by latent and by context.
///
/// Read-only once built.
#[derive(Debug, Clone, Default)]
pub struct ActivationStore {
    records: Vec<ActivationRecord>,
    by_key: BTreeMap<(String, String), usize>,
    by_latent: BTreeMap<String, Vec<usize>>,
    by_context: BTreeMap<String, Vec<usize>>,
    rejects: Vec<RejectedLine>,
}

impl ActivationStore {
    /// Read a dump file. Malformed lines are collected in [`rejects`]; the
    /// call only fails when nothing valid remains.
    ///
    /// [`rejects`]: ActivationStore::rejects
    pub fn ingest(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut store = ActivationStore::default();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let outcome = ActivationRecord::from_json_line(&line).and_then(|r| store.insert(r));
            if let Err(reason) = outcome {
                store.rejects.push(RejectedLine {
                    line: idx + 1,
                    reason,
                });
            }
        }
        if store.records.is_empty() {
            return Err(Error::NoRecords(path.to_path_buf()));
        }
        if !store.rejects.is_empty() {
            log::warn!(
                "{}: rejected {} of {} lines",
                path.display(),
                store.rejects.len(),
                store.rejects.len() + store.records.len()
            );
        }
        Ok(store)
    }

    /// Build a store from in-memory records. Any invalid record is an error.
    pub fn from_records(records: impl IntoIterator<Item = ActivationRecord>) -> Result<Self> {
        let mut store = ActivationStore::default();
        for (idx, record) in records.into_iter().enumerate() {
            record
                .validate()
                .and_then(|_| store.insert(record))
                .map_err(|reason| Error::Parse {
                    line: idx + 1,
                    reason,
                })?;
        }
        Ok(store)
    }

    fn insert(&mut self, record: ActivationRecord) -> std::result::Result<(), String> {
        let key = (record.latent_id.clone(), record.context.context_id.clone());
        if self.by_key.contains_key(&key) {
            return Err(format!(
                "duplicate record for latent {} in context {}",
                key.0, key.1
            ));
        }
        if let Some(existing) = self
            .by_context
            .get(&key.1)
            .and_then(|ids| ids.first())
            .map(|&i| &self.records[i])
        {
            if existing.context.tokens != record.context.tokens {
                return Err(format!(
                    "context {} has conflicting token lists",
                    key.1
                ));
            }
        }
        let idx = self.records.len();
        self.by_latent.entry(key.0.clone()).or_default().push(idx);
        self.by_context.entry(key.1.clone()).or_default().push(idx);
        self.by_key.insert(key, idx);
        self.records.push(record);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[ActivationRecord] {
        &self.records
    }

    pub fn rejects(&self) -> &[RejectedLine] {
        &self.rejects
    }

    pub fn latent_ids(&self) -> impl Iterator<Item = &str> {
        self.by_latent.keys().map(String::as_str)
    }

    pub fn context_ids(&self) -> impl Iterator<Item = &str> {
        self.by_context.keys().map(String::as_str)
    }

    pub fn record(&self, latent_id: &str, context_id: &str) -> Option<&ActivationRecord> {
        self.by_key
            .get(&(latent_id.to_string(), context_id.to_string()))
            .map(|&i| &self.records[i])
    }

    pub fn records_for_latent(&self, latent_id: &str) -> impl Iterator<Item = &ActivationRecord> {
        self.by_latent
            .get(latent_id)
            .into_iter()
            .flatten()
            .map(|&i| &self.records[i])
    }

    /// Strength of `latent_id` in `context_id`; zero when there is no record.
    pub fn strength(&self, latent_id: &str, context_id: &str) -> f64 {
        self.record(latent_id, context_id)
            .map(example_strength)
            .unwrap_or(0.0)
    }

    /// Windowed activating example for a latent.
    pub fn activating_example(&self, latent_id: &str, context_id: &str) -> Option<ActivationRecord> {
        self.record(latent_id, context_id)
            .filter(|r| example_strength(r) > 0.0)
            .map(|r| window(r, WINDOW_LEN))
    }

    /// Windowed non-activating example for `latent_id`.
    ///
    /// The window is placed around the peak of the lexicographically first
    /// other latent that fires in the context; activations for `latent_id`
    /// are all zero. Returns `None` if the context activates `latent_id` or
    /// no other latent fires there.
    pub fn non_activating_example(
        &self,
        latent_id: &str,
        context_id: &str,
    ) -> Option<ActivationRecord> {
        if self.strength(latent_id, context_id) > 0.0 {
            return None;
        }
        let mut anchors: Vec<&ActivationRecord> = self
            .by_context
            .get(context_id)?
            .iter()
            .map(|&i| &self.records[i])
            .filter(|r| r.latent_id != latent_id && example_strength(r) > 0.0)
            .collect();
        anchors.sort_by(|a, b| a.latent_id.cmp(&b.latent_id));
        let anchor = window(anchors.first()?, WINDOW_LEN);
        Some(ActivationRecord {
            latent_id: latent_id.to_string(),
            activations: vec![0.0; anchor.activations.len()],
            context: anchor.context,
        })
    }

    /// Contexts in which at least one latent fires, with the firing latents.
    fn firing_latents(&self) -> BTreeMap<&str, BTreeSet<&str>> {
        let mut out: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        for record in &self.records {
            if example_strength(record) > 0.0 {
                out.entry(record.context.context_id.as_str())
                    .or_default()
                    .insert(record.latent_id.as_str());
            }
        }
        out
    }

    /// Profile every latent in the store.
    pub fn profiles(&self) -> ProfileSet {
        let firing = self.firing_latents();
        let mut set = ProfileSet::default();
        for latent_id in self.by_latent.keys() {
            match LatentProfile::with_firing(latent_id, self, &firing) {
                Ok(profile) => {
                    set.profiles.insert(latent_id.clone(), profile);
                }
                Err(Error::Unscoreable { positives, .. }) => {
                    set.unscoreable.push(UnscoreableLatent {
                        latent_id: latent_id.clone(),
                        positives,
                    });
                }
                Err(e) => unreachable!("profile construction only fails as unscoreable: {e}"),
            }
        }
        set
    }
}

/// Nearest-rank quantile boundaries at 10%, ..., 90% of `sorted` (ascending).
///
/// The boundary at fraction k/10 is the element with 1-based rank
/// `ceil(k * n / 10)`.
pub fn decile_boundaries(sorted: &[f64]) -> [f64; NUM_DECILES - 1] {
    assert!(!sorted.is_empty(), "decile boundaries need at least one value");
    let n = sorted.len();
    let mut out = [0.0; NUM_DECILES - 1];
    for (k, slot) in (1..NUM_DECILES).zip(out.iter_mut()) {
        let rank = (k * n).div_ceil(NUM_DECILES).max(1);
        *slot = sorted[rank - 1];
    }
    out
}

/// Decile (1..=10) of a positive strength: the lowest decile whose upper
/// boundary is at least `strength`.
pub fn assign_decile(strength: f64, boundaries: &[f64; NUM_DECILES - 1]) -> u8 {
    boundaries
        .iter()
        .position(|b| strength <= *b)
        .map_or(NUM_DECILES as u8, |i| i as u8 + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentProfile {
    pub latent_id: String,
    /// Strength of every positive example, keyed by context id.
    pub strengths: BTreeMap<String, f64>,
    pub decile_boundaries: [f64; NUM_DECILES - 1],
    /// Context ids per decile; index 0 holds decile 1.
    pub pools: Vec<Vec<String>>,
    /// Contexts where this latent is silent but some other latent fires.
    pub non_activating_pool: Vec<String>,
}

impl LatentProfile {
    pub fn compute(latent_id: &str, store: &ActivationStore) -> Result<Self> {
        Self::with_firing(latent_id, store, &store.firing_latents())
    }

    fn with_firing(
        latent_id: &str,
        store: &ActivationStore,
        firing: &BTreeMap<&str, BTreeSet<&str>>,
    ) -> Result<Self> {
        let strengths: BTreeMap<String, f64> = store
            .records_for_latent(latent_id)
            .map(|r| (r.context.context_id.clone(), example_strength(r)))
            .filter(|(_, s)| *s > 0.0)
            .collect();
        if strengths.len() < MIN_POSITIVE_EXAMPLES {
            return Err(Error::Unscoreable {
                latent_id: latent_id.to_string(),
                positives: strengths.len(),
                required: MIN_POSITIVE_EXAMPLES,
            });
        }

        let mut sorted: Vec<f64> = strengths.values().copied().collect();
        sorted.sort_by(f64::total_cmp);
        let decile_boundaries = decile_boundaries(&sorted);

        let mut pools = vec![Vec::new(); NUM_DECILES];
        for (context_id, strength) in &strengths {
            let d = assign_decile(*strength, &decile_boundaries);
            pools[d as usize - 1].push(context_id.clone());
        }

        let non_activating_pool = firing
            .iter()
            .filter(|(_, latents)| !latents.contains(latent_id))
            .map(|(ctx, _)| ctx.to_string())
            .collect();

        Ok(LatentProfile {
            latent_id: latent_id.to_string(),
            strengths,
            decile_boundaries,
            pools,
            non_activating_pool,
        })
    }

    /// Context ids in `decile` (1..=10).
    pub fn pool(&self, decile: u8) -> &[String] {
        match decile {
            1..=10 => &self.pools[decile as usize - 1],
            _ => &[],
        }
    }

    pub fn decile_of(&self, context_id: &str) -> Option<u8> {
        self.strengths
            .get(context_id)
            .map(|s| assign_decile(*s, &self.decile_boundaries))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnscoreableLatent {
    pub latent_id: String,
    pub positives: usize,
}

/// Profiles for every scoreable latent, plus the latents that were excluded.
#[derive(Debug, Clone, Default)]
pub struct ProfileSet {
    pub profiles: BTreeMap<String, LatentProfile>,
    pub unscoreable: Vec<UnscoreableLatent>,
}
