//! Intruder task construction.
//!
//! A standard task shows four activating examples from one decile and one
//! example in which the latent is silent. The decile variant shows five
//! activating examples, one of which comes from a different decile.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::activation_store::{ActivationRecord, ActivationStore, LatentProfile, ProfileSet};
use crate::seeding::{self, mix_str, mix_u64};
use crate::{Error, Result, EXAMPLES_PER_TASK, NUM_DECILES};

pub const HIGHLIGHT_OPEN: &str = "<<";
pub const HIGHLIGHT_CLOSE: &str = ">>";

/// Activating examples shown per task.
pub const MAJORITY_SIZE: usize = EXAMPLES_PER_TASK - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskVariant {
    Standard,
    Decile,
}

impl std::str::FromStr for TaskVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(TaskVariant::Standard),
            "decile" => Ok(TaskVariant::Decile),
            other => Err(Error::InvalidArgument(format!(
                "unknown variant {other:?} (expected standard or decile)"
            ))),
        }
    }
}

impl std::fmt::Display for TaskVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaskVariant::Standard => "standard",
            TaskVariant::Decile => "decile",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderedExample {
    pub context_id: String,
    /// Tokens joined by spaces, highlighted runs wrapped in `<<` and `>>`.
    pub text: String,
    /// Number of highlighted tokens (not spans).
    pub highlight_count: usize,
    pub source_decile: Option<u8>,
    pub activating: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntruderTask {
    pub task_id: String,
    pub latent_id: String,
    pub variant: TaskVariant,
    pub examples: Vec<RenderedExample>,
    /// 1-based position of the intruder in `examples`.
    pub intruder_position: u8,
    pub majority_decile: u8,
    pub intruder_decile: Option<u8>,
}

impl IntruderTask {
    pub fn intruder(&self) -> &RenderedExample {
        &self.examples[self.intruder_position as usize - 1]
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.examples.iter().map(|e| e.text.as_str())
    }
}

/// Join tokens with spaces, wrapping runs of highlighted tokens in one
/// `<<...>>` span.
pub fn render_highlighted(tokens: &[String], highlighted: &[bool]) -> String {
    let mut out = String::new();
    let mut open = false;
    for (i, (token, &on)) in tokens.iter().zip(highlighted).enumerate() {
        if on && !open {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(HIGHLIGHT_OPEN);
            open = true;
        } else if !on && open {
            out.push_str(HIGHLIGHT_CLOSE);
            out.push(' ');
            open = false;
        } else if i > 0 {
            out.push(' ');
        }
        out.push_str(token);
    }
    if open {
        out.push_str(HIGHLIGHT_CLOSE);
    }
    out
}

/// Highlight an already-windowed example.
///
/// Activating examples highlight every token with positive activation.
/// Non-activating examples highlight `target_count` distinct random tokens,
/// clamped to the token count.
pub fn highlight<R: Rng + ?Sized>(
    record: &ActivationRecord,
    activating: bool,
    target_count: Option<usize>,
    rng: &mut R,
) -> Result<RenderedExample> {
    let tokens = record.tokens();
    let mask: Vec<bool> = if activating {
        record.activations.iter().map(|a| *a > 0.0).collect()
    } else {
        let target = target_count.ok_or_else(|| {
            Error::InvalidArgument("non-activating highlight needs a target count".into())
        })?;
        let k = target.min(tokens.len());
        let mut mask = vec![false; tokens.len()];
        for i in index::sample(rng, tokens.len(), k) {
            mask[i] = true;
        }
        mask
    };
    Ok(RenderedExample {
        context_id: record.context_id().to_string(),
        text: render_highlighted(tokens, &mask),
        highlight_count: mask.iter().filter(|m| **m).count(),
        source_decile: None,
        activating,
    })
}

/// Floor of the mean highlight count of the activating examples.
pub fn decoy_highlight_count(activating: &[RenderedExample]) -> usize {
    if activating.is_empty() {
        return 0;
    }
    activating.iter().map(|e| e.highlight_count).sum::<usize>() / activating.len()
}

fn sample_majority<R: Rng + ?Sized>(
    store: &ActivationStore,
    profile: &LatentProfile,
    decile: u8,
    rng: &mut R,
) -> Result<Vec<RenderedExample>> {
    let pool = profile.pool(decile);
    if pool.len() < MAJORITY_SIZE {
        return Err(Error::Skipped(format!(
            "insufficient activating examples in decile {decile} ({} < {MAJORITY_SIZE})",
            pool.len()
        )));
    }
    index::sample(rng, pool.len(), MAJORITY_SIZE)
        .into_iter()
        .map(|i| render_activating(store, profile, &pool[i], decile, rng))
        .collect()
}

fn render_activating<R: Rng + ?Sized>(
    store: &ActivationStore,
    profile: &LatentProfile,
    context_id: &str,
    decile: u8,
    rng: &mut R,
) -> Result<RenderedExample> {
    let record = store
        .activating_example(&profile.latent_id, context_id)
        .ok_or_else(|| missing(&profile.latent_id, context_id))?;
    let mut example = highlight(&record, true, None, rng)?;
    example.source_decile = Some(decile);
    Ok(example)
}

fn missing(latent_id: &str, context_id: &str) -> Error {
    Error::InvalidArgument(format!(
        "profile for {latent_id} references context {context_id} missing from the store"
    ))
}

fn assemble<R: Rng + ?Sized>(
    mut examples: Vec<RenderedExample>,
    intruder: RenderedExample,
    rng: &mut R,
) -> (Vec<RenderedExample>, u8) {
    let position = rng.random_range(1..=EXAMPLES_PER_TASK as u8);
    examples.insert(position as usize - 1, intruder);
    (examples, position)
}

/// Four activating examples from `decile` plus one non-activating intruder.
pub fn build_standard_task<R: Rng + ?Sized>(
    store: &ActivationStore,
    profile: &LatentProfile,
    decile: u8,
    task_id: impl Into<String>,
    rng: &mut R,
) -> Result<IntruderTask> {
    check_decile(decile)?;
    if profile.non_activating_pool.is_empty() {
        return Err(Error::Skipped("no non-activating examples".into()));
    }
    let majority = sample_majority(store, profile, decile, rng)?;
    let pick = rng.random_range(0..profile.non_activating_pool.len());
    let context_id = &profile.non_activating_pool[pick];
    let record = store
        .non_activating_example(&profile.latent_id, context_id)
        .ok_or_else(|| missing(&profile.latent_id, context_id))?;
    let target = decoy_highlight_count(&majority);
    let intruder = highlight(&record, false, Some(target), rng)?;
    let (examples, intruder_position) = assemble(majority, intruder, rng);
    Ok(IntruderTask {
        task_id: task_id.into(),
        latent_id: profile.latent_id.clone(),
        variant: TaskVariant::Standard,
        examples,
        intruder_position,
        majority_decile: decile,
        intruder_decile: None,
    })
}

/// Four activating examples from `majority` plus one from `intruder`.
pub fn build_decile_task<R: Rng + ?Sized>(
    store: &ActivationStore,
    profile: &LatentProfile,
    majority: u8,
    intruder: u8,
    task_id: impl Into<String>,
    rng: &mut R,
) -> Result<IntruderTask> {
    check_decile(majority)?;
    check_decile(intruder)?;
    if majority == intruder {
        return Err(Error::InvalidArgument(format!(
            "majority and intruder decile are both {majority}"
        )));
    }
    let pool = profile.pool(intruder);
    if pool.is_empty() {
        return Err(Error::Skipped(format!(
            "no activating examples in intruder decile {intruder}"
        )));
    }
    let examples = sample_majority(store, profile, majority, rng)?;
    let pick = rng.random_range(0..pool.len());
    let odd = render_activating(store, profile, &pool[pick], intruder, rng)?;
    let (examples, intruder_position) = assemble(examples, odd, rng);
    Ok(IntruderTask {
        task_id: task_id.into(),
        latent_id: profile.latent_id.clone(),
        variant: TaskVariant::Decile,
        examples,
        intruder_position,
        majority_decile: majority,
        intruder_decile: Some(intruder),
    })
}

fn check_decile(d: u8) -> Result<()> {
    if (1..=NUM_DECILES as u8).contains(&d) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("decile {d} outside 1..=10")))
    }
}

/// All 90 ordered (majority, intruder) pairs of distinct deciles.
pub fn ordered_decile_pairs() -> Vec<(u8, u8)> {
    let deciles = 1..=NUM_DECILES as u8;
    deciles
        .clone()
        .flat_map(|m| deciles.clone().filter(move |i| *i != m).map(move |i| (m, i)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchConfig {
    pub tasks_per_latent: usize,
    pub variant: TaskVariant,
}

impl Default for BatchConfig {
    fn default() -> Self {
        BatchConfig {
            tasks_per_latent: 50,
            variant: TaskVariant::Standard,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedTask {
    pub latent_id: String,
    pub index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Batch {
    pub tasks: Vec<IntruderTask>,
    pub skipped: Vec<SkippedTask>,
}

impl Batch {
    fn push(&mut self, latent_id: &str, index: usize, outcome: Result<IntruderTask>) {
        match outcome {
            Ok(task) => self.tasks.push(task),
            Err(e) => self.skipped.push(SkippedTask {
                latent_id: latent_id.to_string(),
                index,
                reason: e.to_string(),
            }),
        }
    }

    /// Skips grouped by latent.
    pub fn skip_counts(&self) -> BTreeMap<&str, usize> {
        let mut out = BTreeMap::new();
        for s in &self.skipped {
            *out.entry(s.latent_id.as_str()).or_default() += 1;
        }
        out
    }

    /// Per latent, how many example slots repeat a context already shown in
    /// an earlier task. Tasks are sampled independently, so small pools
    /// produce repeats.
    pub fn reuse_counts(&self) -> BTreeMap<&str, usize> {
        let mut seen: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        let mut out = BTreeMap::new();
        for t in &self.tasks {
            let used = seen.entry(t.latent_id.as_str()).or_default();
            let repeats = out.entry(t.latent_id.as_str()).or_insert(0);
            for e in &t.examples {
                if !used.insert(e.context_id.as_str()) {
                    *repeats += 1;
                }
            }
        }
        out
    }
}

/// Seed of task `index` for `latent_id`. Independent of build order.
pub fn task_seed(seed: u64, latent_id: &str, variant: TaskVariant, index: usize) -> u64 {
    mix_u64(mix_str(mix_str(seed, latent_id), &variant.to_string()), index as u64)
}

/// Opaque, stable task id. Carries no latent or decile information.
pub fn task_id_for(task_seed: u64) -> String {
    format!("t{:016x}", mix_str(task_seed, "task-id"))
}

fn standard_deciles(profile: &LatentProfile) -> Vec<u8> {
    if profile.non_activating_pool.is_empty() {
        return Vec::new();
    }
    (1..=NUM_DECILES as u8)
        .filter(|d| profile.pool(*d).len() >= MAJORITY_SIZE)
        .collect()
}

fn decile_pairs(profile: &LatentProfile) -> Vec<(u8, u8)> {
    ordered_decile_pairs()
        .into_iter()
        .filter(|(m, i)| profile.pool(*m).len() >= MAJORITY_SIZE && !profile.pool(*i).is_empty())
        .collect()
}

/// Build `tasks_per_latent` tasks for every scoreable latent, choosing the
/// decile (or decile pair) uniformly among those with enough examples.
pub fn build_batch(
    store: &ActivationStore,
    profiles: &ProfileSet,
    config: &BatchConfig,
    seed: u64,
) -> Batch {
    let mut batch = Batch::default();
    for (latent_id, profile) in &profiles.profiles {
        let deciles = standard_deciles(profile);
        let pairs = decile_pairs(profile);
        for index in 0..config.tasks_per_latent {
            let sub_seed = task_seed(seed, latent_id, config.variant, index);
            let mut rng = seeding::rng_from(sub_seed);
            let task_id = task_id_for(sub_seed);
            let outcome = match config.variant {
                TaskVariant::Standard if deciles.is_empty() => Err(Error::Skipped(
                    "no decile has four activating examples and a non-activating pool".into(),
                )),
                TaskVariant::Standard => {
                    let d = deciles[rng.random_range(0..deciles.len())];
                    build_standard_task(store, profile, d, task_id, &mut rng)
                }
                TaskVariant::Decile if pairs.is_empty() => {
                    Err(Error::Skipped("no usable decile pair".into()))
                }
                TaskVariant::Decile => {
                    let (m, i) = pairs[rng.random_range(0..pairs.len())];
                    build_decile_task(store, profile, m, i, task_id, &mut rng)
                }
            };
            batch.push(latent_id, index, outcome);
        }
    }
    batch
}

/// Decile-variant tasks covering every ordered decile pair `repetitions`
/// times per latent (90 tasks per latent per repetition).
pub fn build_decile_sweep(
    store: &ActivationStore,
    profiles: &ProfileSet,
    repetitions: usize,
    seed: u64,
) -> Batch {
    let pairs = ordered_decile_pairs();
    let mut batch = Batch::default();
    for (latent_id, profile) in &profiles.profiles {
        for rep in 0..repetitions {
            for (k, (m, i)) in pairs.iter().enumerate() {
                let index = rep * pairs.len() + k;
                let sub_seed = task_seed(seed, latent_id, TaskVariant::Decile, index);
                let mut rng = seeding::rng_from(sub_seed);
                let outcome =
                    build_decile_task(store, profile, *m, *i, task_id_for(sub_seed), &mut rng);
                batch.push(latent_id, index, outcome);
            }
        }
    }
    batch
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation_store::ActivationRecord;
    use crate::seeding::rng_from;

    fn rec(latent: &str, ctx: &str, acts: &[f64]) -> ActivationRecord {
        let tokens = (0..acts.len()).map(|i| format!("w{i}")).collect();
        ActivationRecord::new(latent, ctx, tokens, acts.to_vec()).unwrap()
    }

    #[test]
    fn activating_highlight_merges_adjacent_tokens() {
        let r = ActivationRecord::new(
            "a",
            "c",
            ["a", "b", "c", "d"].map(String::from).to_vec(),
            vec![0.0, 1.2, 3.0, 0.0],
        )
        .unwrap();
        let ex = highlight(&r, true, None, &mut rng_from(0)).unwrap();
        assert_eq!(ex.text, "a <<b c>> d");
        assert_eq!(ex.highlight_count, 2);
        assert!(ex.activating);
    }

    #[test]
    fn separate_spans_and_edges() {
        let toks: Vec<String> = ["a", "b", "c", "d", "e"].map(String::from).to_vec();
        assert_eq!(
            render_highlighted(&toks, &[true, false, true, false, true]),
            "<<a>> b <<c>> d <<e>>"
        );
        assert_eq!(render_highlighted(&toks, &[true; 5]), "<<a b c d e>>");
        assert_eq!(render_highlighted(&toks, &[false; 5]), "a b c d e");
    }

    #[test]
    fn decoy_count_is_floor_of_mean() {
        let mk = |n| RenderedExample {
            context_id: String::new(),
            text: String::new(),
            highlight_count: n,
            source_decile: Some(1),
            activating: true,
        };
        assert_eq!(decoy_highlight_count(&[mk(2), mk(3), mk(3), mk(3)]), 2);
        assert_eq!(decoy_highlight_count(&[mk(4), mk(4), mk(4), mk(4)]), 4);
        let r = rec("a", "c", &[0.0; 10]);
        let ex = highlight(&r, false, Some(2), &mut rng_from(3)).unwrap();
        assert_eq!(ex.highlight_count, 2);
        assert!(!ex.activating);
    }

    #[test]
    fn decoy_count_clamps_to_token_count() {
        let r = rec("a", "c", &[0.0, 0.0]);
        let ex = highlight(&r, false, Some(3), &mut rng_from(1)).unwrap();
        assert_eq!(ex.highlight_count, 2);
        assert_eq!(ex.text, "<<w0 w1>>");
        assert!(highlight(&r, false, None, &mut rng_from(1)).is_err());
    }

    /// Latent "L" with `per_decile` examples in each decile, strengths
    /// increasing with the decile; `decoys` non-activating contexts from "M".
    pub(crate) fn fixture(per_decile: usize, decoys: usize) -> (ActivationStore, ProfileSet) {
        let mut records = Vec::new();
        let n = per_decile * 10;
        for i in 0..n {
            let s = (i + 1) as f64;
            records.push(rec("L", &format!("p{i:04}"), &[0.0, s, s / 2.0, 0.0, 0.0, s]));
        }
        for i in 0..decoys.max(10) {
            let acts = if i < decoys { [0.0, 0.0, 0.0, 1.0 + i as f64] } else { [0.0; 4] };
            records.push(rec("M", &format!("n{i:04}"), &acts));
        }
        let store = ActivationStore::from_records(records).unwrap();
        let profiles = store.profiles();
        (store, profiles)
    }

    #[test]
    fn standard_task_shape() {
        let (store, profiles) = fixture(4, 1);
        let p = &profiles.profiles["L"];
        let t = build_standard_task(&store, p, 3, "x", &mut rng_from(5)).unwrap();
        assert_eq!(t.examples.len(), 5);
        assert_eq!(t.examples.iter().filter(|e| !e.activating).count(), 1);
        assert!(!t.intruder().activating);
        assert_eq!(t.intruder().context_id, "n0000");
        let mut majority: Vec<_> = t
            .examples
            .iter()
            .filter(|e| e.activating)
            .map(|e| e.context_id.clone())
            .collect();
        majority.sort();
        assert_eq!(majority, p.pool(3));
        assert!(t.examples.iter().filter(|e| e.activating).all(|e| e.source_decile == Some(3)));
        // every activating example has 3 positive tokens, two adjacent
        assert_eq!(t.intruder().highlight_count, 3);
    }

    #[test]
    fn standard_task_position_varies_with_forced_examples() {
        let (store, profiles) = fixture(4, 1);
        let p = &profiles.profiles["L"];
        let positions: std::collections::BTreeSet<u8> = (0..50)
            .map(|s| build_standard_task(&store, p, 1, "x", &mut rng_from(s)).unwrap().intruder_position)
            .collect();
        assert_eq!(positions.len(), 5);
    }

    #[test]
    fn standard_task_skips_small_pool() {
        let (store, profiles) = fixture(3, 1);
        let p = &profiles.profiles["L"];
        let err = build_standard_task(&store, p, 1, "x", &mut rng_from(0)).unwrap_err();
        assert!(err.to_string().contains("insufficient activating examples"), "{err}");
    }

    #[test]
    fn decile_task_orders_strengths() {
        let (store, profiles) = fixture(6, 3);
        let p = &profiles.profiles["L"];
        for s in 0..20 {
            let t = build_decile_task(&store, p, 10, 1, "x", &mut rng_from(s)).unwrap();
            assert!(t.examples.iter().all(|e| e.activating));
            let odd = p.strengths[&t.intruder().context_id];
            for (k, e) in t.examples.iter().enumerate() {
                if k + 1 != t.intruder_position as usize {
                    assert!(p.strengths[&e.context_id] > odd);
                    assert_eq!(e.source_decile, Some(10));
                }
            }
            assert_eq!(t.intruder().source_decile, Some(1));
        }
        assert!(build_decile_task(&store, p, 4, 4, "x", &mut rng_from(0)).is_err());
    }

    #[test]
    fn sweep_covers_ninety_pairs_per_repetition() {
        // Oracle: ordered pairs of distinct deciles = 10 * 9.
        let expected = (1..=10).flat_map(|m| (1..=10).map(move |i| (m, i))).filter(|(m, i)| m != i).count();
        assert_eq!(expected, 90);
        assert_eq!(ordered_decile_pairs().len(), expected);
        let (store, profiles) = fixture(4, 2);
        let batch = build_decile_sweep(&store, &profiles, 2, 9);
        assert_eq!(batch.tasks.len(), 2 * expected);
        assert!(batch.skipped.is_empty());
    }

    #[test]
    fn batch_is_deterministic() {
        let (store, profiles) = fixture(5, 5);
        let cfg = BatchConfig { tasks_per_latent: 30, variant: TaskVariant::Standard };
        let a = build_batch(&store, &profiles, &cfg, 42);
        let b = build_batch(&store, &profiles, &cfg, 42);
        assert_eq!(a, b);
        assert_eq!(crate::jsonl::to_string(&a.tasks).unwrap(), crate::jsonl::to_string(&b.tasks).unwrap());
        let c = build_batch(&store, &profiles, &cfg, 43);
        assert_ne!(a.tasks, c.tasks);
    }

    #[test]
    fn reuse_is_counted_per_latent() {
        let (store, profiles) = fixture(4, 2);
        let cfg = BatchConfig { tasks_per_latent: 3, variant: TaskVariant::Standard };
        let batch = build_batch(&store, &profiles, &cfg, 5);
        let reuse = batch.reuse_counts();
        for (latent, repeats) in &reuse {
            let tasks: Vec<_> = batch.tasks.iter().filter(|t| t.latent_id == *latent).collect();
            let distinct: BTreeSet<&str> = tasks
                .iter()
                .flat_map(|t| t.examples.iter().map(|e| e.context_id.as_str()))
                .collect();
            assert_eq!(*repeats, tasks.len() * EXAMPLES_PER_TASK - distinct.len());
        }
        // Only two decoys exist, so three tasks must repeat one.
        assert!(reuse.values().all(|r| *r >= 1));
    }

    #[test]
    fn empty_batch_for_zero_tasks() {
        let (store, profiles) = fixture(5, 5);
        let cfg = BatchConfig { tasks_per_latent: 0, variant: TaskVariant::Decile };
        assert!(build_batch(&store, &profiles, &cfg, 1).tasks.is_empty());
    }

    #[test]
    fn batch_decile_draws_are_uniform() {
        // Chi-square over many seeded draws against uniform over 10 deciles.
        let (store, profiles) = fixture(4, 2);
        let cfg = BatchConfig { tasks_per_latent: 10_000, variant: TaskVariant::Standard };
        let batch = build_batch(&store, &profiles, &cfg, 11);
        assert_eq!(batch.tasks.len(), 10_000);
        let mut counts = [0usize; 10];
        for t in &batch.tasks {
            counts[t.majority_decile as usize - 1] += 1;
        }
        let expected = 1000.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 9 degrees of freedom, p = 0.001 critical value
        assert!(chi2 < 27.877, "chi2 {chi2} counts {counts:?}");
    }

    #[test]
    fn task_ids_do_not_leak_latents() {
        let (store, profiles) = fixture(4, 2);
        let cfg = BatchConfig { tasks_per_latent: 5, variant: TaskVariant::Standard };
        for t in build_batch(&store, &profiles, &cfg, 0).tasks {
            assert!(!t.task_id.contains('L'));
            assert_eq!(t.task_id.len(), 17);
        }
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("decile".parse::<TaskVariant>().unwrap(), TaskVariant::Decile);
        assert!("other".parse::<TaskVariant>().is_err());
    }
}
