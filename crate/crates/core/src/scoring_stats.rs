//! Aggregation of verdicts into latent scores, and agreement statistics
//! between evaluators and scoring methods.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::task_builder::{IntruderTask, TaskVariant};
use crate::verdict::Verdict;
use crate::{jsonl, Error, Result, NUM_DECILES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Tally {
    pub correct: usize,
    pub total: usize,
}

impl Tally {
    fn record(&mut self, correct: bool) {
        self.total += 1;
        self.correct += usize::from(correct);
    }

    pub fn accuracy(&self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecileAccuracy {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentScore {
    pub latent_id: String,
    /// Keyed by the decile the majority examples came from.
    pub per_decile_accuracy: BTreeMap<u8, DecileAccuracy>,
    /// Unweighted mean of the per-decile accuracies.
    pub overall: f64,
    pub n_tasks: usize,
}

fn task_index(tasks: &[IntruderTask]) -> HashMap<&str, &IntruderTask> {
    tasks.iter().map(|t| (t.task_id.as_str(), t)).collect()
}

/// Per-latent accuracy of one evaluator. Invalid verdicts count as
/// incorrect.
pub fn accuracy(tasks: &[IntruderTask], verdicts: &[Verdict]) -> Result<Vec<LatentScore>> {
    let index = task_index(tasks);
    let mut tallies: BTreeMap<&str, BTreeMap<u8, Tally>> = BTreeMap::new();
    for v in verdicts {
        let task = index
            .get(v.task_id.as_str())
            .ok_or_else(|| Error::UnknownTask(v.task_id.clone()))?;
        tallies
            .entry(task.latent_id.as_str())
            .or_default()
            .entry(task.majority_decile)
            .or_default()
            .record(v.is_correct());
    }
    Ok(tallies
        .into_iter()
        .map(|(latent_id, per)| {
            let per_decile_accuracy: BTreeMap<u8, DecileAccuracy> = per
                .into_iter()
                .map(|(d, t)| {
                    let accuracy = t.accuracy().expect("tallies are non-empty");
                    (d, DecileAccuracy { correct: t.correct, total: t.total, accuracy })
                })
                .collect();
            let overall = per_decile_accuracy.values().map(|a| a.accuracy).sum::<f64>()
                / per_decile_accuracy.len() as f64;
            LatentScore {
                latent_id: latent_id.to_string(),
                n_tasks: per_decile_accuracy.values().map(|a| a.total).sum(),
                per_decile_accuracy,
                overall,
            }
        })
        .collect())
}

/// Verdicts grouped by evaluator id.
pub fn by_evaluator(verdicts: &[Verdict]) -> BTreeMap<String, Vec<Verdict>> {
    let mut out: BTreeMap<String, Vec<Verdict>> = BTreeMap::new();
    for v in verdicts {
        out.entry(v.evaluator_id.clone()).or_default().push(v.clone());
    }
    out
}

/// Five accuracy bins: `[0, 0.2]`, `(0.2, 0.4]`, `(0.4, 0.6]`, `(0.6, 0.8]`,
/// `(0.8, 1]`. Bin 0 is at or below the 20% chance level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InterpretabilityBin(pub u8);

impl InterpretabilityBin {
    pub const COUNT: usize = 5;
    pub const UPPER_EDGES: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];

    pub fn label(self) -> &'static str {
        match self.0 {
            0 => "non-interpretable",
            1 => "low",
            2 => "moderate",
            3 => "high",
            _ => "very high",
        }
    }

    pub fn range(self) -> (f64, f64) {
        let hi = Self::UPPER_EDGES[self.0 as usize];
        (if self.0 == 0 { 0.0 } else { Self::UPPER_EDGES[self.0 as usize - 1] }, hi)
    }
}

pub fn bin(score: f64) -> Result<InterpretabilityBin> {
    if !(0.0..=1.0).contains(&score) {
        return Err(Error::InvalidArgument(format!("score {score} outside [0, 1]")));
    }
    let idx = InterpretabilityBin::UPPER_EDGES
        .iter()
        .position(|edge| score <= *edge)
        .expect("score <= 1.0");
    Ok(InterpretabilityBin(idx as u8))
}

/// Accuracy per (majority decile, intruder decile) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecilePairMatrix {
    /// `cells[m - 1][i - 1]`; empty cells have `total == 0`.
    pub cells: Vec<Vec<Tally>>,
}

impl Default for DecilePairMatrix {
    fn default() -> Self {
        DecilePairMatrix {
            cells: vec![vec![Tally::default(); NUM_DECILES]; NUM_DECILES],
        }
    }
}

impl DecilePairMatrix {
    pub fn tally(&self, majority: u8, intruder: u8) -> Tally {
        self.cells[majority as usize - 1][intruder as usize - 1]
    }

    /// `None` for the diagonal and for cells without tasks.
    pub fn accuracy(&self, majority: u8, intruder: u8) -> Option<f64> {
        if majority == intruder {
            return None;
        }
        self.tally(majority, intruder).accuracy()
    }

    pub fn accuracies(&self) -> Vec<Vec<Option<f64>>> {
        (1..=NUM_DECILES as u8)
            .map(|m| (1..=NUM_DECILES as u8).map(|i| self.accuracy(m, i)).collect())
            .collect()
    }

    /// (|majority - intruder|, accuracy) for every populated cell.
    pub fn distance_accuracy(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        for m in 1..=NUM_DECILES as u8 {
            for i in 1..=NUM_DECILES as u8 {
                if let Some(a) = self.accuracy(m, i) {
                    out.push((f64::from(m.abs_diff(i)), a));
                }
            }
        }
        out
    }
}

/// Decile-pair accuracies over decile-variant tasks; other tasks are ignored.
pub fn decile_matrix(tasks: &[IntruderTask], verdicts: &[Verdict]) -> Result<DecilePairMatrix> {
    let index = task_index(tasks);
    let mut matrix = DecilePairMatrix::default();
    for v in verdicts {
        let task = index
            .get(v.task_id.as_str())
            .ok_or_else(|| Error::UnknownTask(v.task_id.clone()))?;
        if task.variant != TaskVariant::Decile {
            continue;
        }
        let Some(intruder) = task.intruder_decile else {
            continue;
        };
        matrix.cells[task.majority_decile as usize - 1][intruder as usize - 1]
            .record(v.is_correct());
    }
    Ok(matrix)
}

fn check_pair(xs: &[f64], ys: &[f64]) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(Error::InvalidArgument(format!(
            "length mismatch: {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::InvalidArgument("need at least two paired values".into()));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("values must be finite".into()));
    }
    Ok(())
}

/// Sample Pearson correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair(xs, ys)?;
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::InvalidArgument("zero variance".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks, tied values sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let avg = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

/// Spearman correlation: Pearson correlation of average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair(xs, ys)?;
    pearson(&average_ranks(xs), &average_ranks(ys))
}

/// One line of a score file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreLine {
    pub latent_id: String,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_decile: Option<BTreeMap<u8, f64>>,
}

impl From<&LatentScore> for ScoreLine {
    fn from(s: &LatentScore) -> Self {
        ScoreLine {
            latent_id: s.latent_id.clone(),
            score: s.overall,
            per_decile: Some(
                s.per_decile_accuracy
                    .iter()
                    .map(|(d, a)| (*d, a.accuracy))
                    .collect(),
            ),
        }
    }
}

/// Scores of one evaluator or method, keyed by latent.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    pub id: String,
    pub scores: BTreeMap<String, f64>,
}

impl ScoreSet {
    pub fn from_lines(id: impl Into<String>, lines: &[ScoreLine]) -> Result<Self> {
        let mut scores = BTreeMap::new();
        for l in lines {
            if !(0.0..=1.0).contains(&l.score) {
                return Err(Error::InvalidArgument(format!(
                    "score {} for {} outside [0, 1]",
                    l.score, l.latent_id
                )));
            }
            if scores.insert(l.latent_id.clone(), l.score).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "latent {} scored twice",
                    l.latent_id
                )));
            }
        }
        Ok(ScoreSet { id: id.into(), scores })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let lines: Vec<ScoreLine> = jsonl::read(path)?;
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        Self::from_lines(id, &lines)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub ids: Vec<String>,
    pub latents: Vec<String>,
    pub pearson: Vec<Vec<Option<f64>>>,
    pub spearman: Vec<Vec<Option<f64>>>,
    pub n: Vec<Vec<usize>>,
}

/// Pairwise correlations over the latents present in every score set.
/// Cells are `None` where a correlation is undefined (zero variance).
pub fn agreement_table(sets: &[ScoreSet]) -> Result<CorrelationReport> {
    if sets.len() < 2 {
        return Err(Error::InvalidArgument("need at least two score sets".into()));
    }
    let mut common: BTreeSet<&String> = sets[0].scores.keys().collect();
    for s in &sets[1..] {
        common.retain(|l| s.scores.contains_key(*l));
    }
    if common.is_empty() {
        return Err(Error::NoOverlap);
    }
    if common.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "only {} latent shared by all score sets",
            common.len()
        )));
    }
    let columns: Vec<Vec<f64>> = sets
        .iter()
        .map(|s| common.iter().map(|l| s.scores[*l]).collect())
        .collect();
    let k = sets.len();
    let mut report = CorrelationReport {
        ids: sets.iter().map(|s| s.id.clone()).collect(),
        latents: common.iter().map(|l| l.to_string()).collect(),
        pearson: vec![vec![None; k]; k],
        spearman: vec![vec![None; k]; k],
        n: vec![vec![common.len(); k]; k],
    };
    for a in 0..k {
        report.pearson[a][a] = Some(1.0);
        report.spearman[a][a] = Some(1.0);
        for b in a + 1..k {
            let p = pearson(&columns[a], &columns[b]).ok();
            let s = spearman(&columns[a], &columns[b]).ok();
            report.pearson[a][b] = p;
            report.pearson[b][a] = p;
            report.spearman[a][b] = s;
            report.spearman[b][a] = s;
        }
    }
    Ok(report)
}

/// Mean per-decile accuracy of the latents in each overall-score bin.
/// `curves[b][d - 1]` is `None` when no latent in bin `b` has decile `d`.
pub fn decile_curves_by_bin(scores: &[LatentScore]) -> Result<Vec<Vec<Option<f64>>>> {
    let mut sums = vec![vec![(0.0, 0usize); NUM_DECILES]; InterpretabilityBin::COUNT];
    for s in scores {
        let b = bin(s.overall)?.0 as usize;
        for (d, a) in &s.per_decile_accuracy {
            let cell = &mut sums[b][*d as usize - 1];
            cell.0 += a.accuracy;
            cell.1 += 1;
        }
    }
    Ok(sums
        .into_iter()
        .map(|row| {
            row.into_iter()
                .map(|(sum, n)| (n > 0).then(|| sum / n as f64))
                .collect()
        })
        .collect())
}

/// Everything `stats` reports for one evaluator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluatorReport {
    pub evaluator_id: String,
    pub latents: Vec<LatentReportLine>,
    pub mean_overall: Option<f64>,
    pub bin_counts: [usize; InterpretabilityBin::COUNT],
    pub decile_curves_by_bin: Vec<Vec<Option<f64>>>,
    pub decile_matrix: Option<Vec<Vec<Option<f64>>>>,
    pub invalid_verdicts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentReportLine {
    #[serde(flatten)]
    pub score: LatentScore,
    pub bin: InterpretabilityBin,
    pub bin_label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub evaluators: Vec<EvaluatorReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agreement: Option<CorrelationReport>,
}

pub fn evaluator_report(
    evaluator_id: &str,
    tasks: &[IntruderTask],
    verdicts: &[Verdict],
) -> Result<EvaluatorReport> {
    let scores = accuracy(tasks, verdicts)?;
    let mut bin_counts = [0; InterpretabilityBin::COUNT];
    let mut latents = Vec::with_capacity(scores.len());
    for s in &scores {
        let b = bin(s.overall)?;
        bin_counts[b.0 as usize] += 1;
        latents.push(LatentReportLine {
            score: s.clone(),
            bin: b,
            bin_label: b.label().to_string(),
        });
    }
    let index = task_index(tasks);
    let has_decile_tasks = verdicts.iter().any(|v| {
        index
            .get(v.task_id.as_str())
            .is_some_and(|t| t.variant == TaskVariant::Decile)
    });
    let decile_matrix = if has_decile_tasks {
        Some(decile_matrix(tasks, verdicts)?.accuracies())
    } else {
        None
    };
    Ok(EvaluatorReport {
        evaluator_id: evaluator_id.to_string(),
        mean_overall: (!scores.is_empty())
            .then(|| scores.iter().map(|s| s.overall).sum::<f64>() / scores.len() as f64),
        bin_counts,
        decile_curves_by_bin: decile_curves_by_bin(&scores)?,
        decile_matrix,
        invalid_verdicts: verdicts.iter().filter(|v| !v.is_valid()).count(),
        latents,
    })
}

/// Report for every evaluator in `verdicts`, with an agreement table when
/// two or more evaluators share at least two latents.
pub fn score_report(tasks: &[IntruderTask], verdicts: &[Verdict]) -> Result<ScoreReport> {
    let mut evaluators = Vec::new();
    let mut sets = Vec::new();
    for (id, vs) in by_evaluator(verdicts) {
        let report = evaluator_report(&id, tasks, &vs)?;
        sets.push(ScoreSet {
            id: id.clone(),
            scores: report
                .latents
                .iter()
                .map(|l| (l.score.latent_id.clone(), l.score.overall))
                .collect(),
        });
        evaluators.push(report);
    }
    let agreement = if sets.len() >= 2 {
        agreement_table(&sets).ok()
    } else {
        None
    };
    Ok(ScoreReport { evaluators, agreement })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task_builder::RenderedExample;

    fn task(id: &str, latent: &str, decile: u8, intruder_decile: Option<u8>) -> IntruderTask {
        IntruderTask {
            task_id: id.into(),
            latent_id: latent.into(),
            variant: if intruder_decile.is_some() { TaskVariant::Decile } else { TaskVariant::Standard },
            examples: (0..5)
                .map(|i| RenderedExample {
                    context_id: format!("c{i}"),
                    text: String::new(),
                    highlight_count: 0,
                    source_decile: Some(decile),
                    activating: true,
                })
                .collect(),
            intruder_position: 1,
            majority_decile: decile,
            intruder_decile,
        }
    }

    fn answer(t: &IntruderTask, choice: Option<u8>) -> Verdict {
        Verdict::new(t, "ev", choice, "", 1)
    }

    #[test]
    fn single_decile_ratio() {
        let tasks: Vec<_> = (0..10).map(|i| task(&format!("t{i}"), "L", 3, None)).collect();
        let verdicts: Vec<_> = tasks.iter().enumerate().map(|(i, t)| answer(t, Some(if i < 8 { 1 } else { 2 }))).collect();
        let s = accuracy(&tasks, &verdicts).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].overall, 0.8);
        assert_eq!(s[0].n_tasks, 10);
    }

    #[test]
    fn overall_is_unweighted_over_deciles() {
        let mut tasks = Vec::new();
        let mut verdicts = Vec::new();
        for i in 0..5 {
            let t = task(&format!("a{i}"), "L", 1, None);
            verdicts.push(answer(&t, Some(1)));
            tasks.push(t);
        }
        for i in 0..20 {
            let t = task(&format!("b{i}"), "L", 2, None);
            verdicts.push(answer(&t, Some(if i % 2 == 0 { 1 } else { 3 })));
            tasks.push(t);
        }
        let s = &accuracy(&tasks, &verdicts).unwrap()[0];
        assert_eq!(s.per_decile_accuracy[&1].accuracy, 1.0);
        assert_eq!(s.per_decile_accuracy[&2].accuracy, 0.5);
        assert_eq!(s.overall, 0.75);
    }

    #[test]
    fn invalid_counts_as_incorrect() {
        let tasks: Vec<_> = (0..4).map(|i| task(&format!("t{i}"), "L", 1, None)).collect();
        let verdicts: Vec<_> = tasks.iter().map(|t| answer(t, None)).collect();
        assert_eq!(accuracy(&tasks, &verdicts).unwrap()[0].overall, 0.0);
    }

    #[test]
    fn unknown_task_is_an_error() {
        let t = task("t", "L", 1, None);
        let mut v = answer(&t, Some(1));
        v.task_id = "ghost".into();
        assert!(matches!(accuracy(&[t], &[v]), Err(Error::UnknownTask(_))));
    }

    #[test]
    fn bin_edges() {
        assert_eq!(bin(0.0).unwrap().0, 0);
        assert_eq!(bin(0.20).unwrap().0, 0);
        assert_eq!(bin(0.2000001).unwrap().0, 1);
        assert_eq!(bin(0.4).unwrap().0, 1);
        assert_eq!(bin(0.6).unwrap().0, 2);
        assert_eq!(bin(0.65).unwrap().0, 3);
        assert_eq!(bin(0.8).unwrap().0, 3);
        assert_eq!(bin(1.0).unwrap().0, 4);
        assert!(bin(1.01).is_err());
        assert!(bin(-0.1).is_err());
        assert!(bin(f64::NAN).is_err());
        assert_eq!(InterpretabilityBin(0).label(), "non-interpretable");
        assert_eq!(InterpretabilityBin(2).range(), (0.4, 0.6));
    }

    #[test]
    fn decile_matrix_cells() {
        let a = task("a", "L", 10, Some(1));
        let b = task("b", "L", 10, Some(1));
        let c = task("c", "L", 2, Some(3));
        let m = decile_matrix(&[a.clone(), b.clone(), c.clone()], &[answer(&a, Some(1)), answer(&b, Some(2)), answer(&c, Some(1))]).unwrap();
        assert_eq!(m.accuracy(10, 1), Some(0.5));
        assert_eq!(m.tally(10, 1), Tally { correct: 1, total: 2 });
        assert_eq!(m.accuracy(2, 3), Some(1.0));
        assert_eq!(m.accuracy(5, 6), None);
        assert_eq!(m.accuracy(4, 4), None);
    }

    #[test]
    fn pearson_cases() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        // Hand computation: x mean 2.5, y mean 7.5;
        // sxy = 25, sxx = 5, syy = 129 -> r = 25 / sqrt(645)
        let expected = 25.0 / 645f64.sqrt();
        assert!((pearson(&[1.0, 2.0, 3.0, 4.0], &[1.0, 4.0, 9.0, 16.0]).unwrap() - expected).abs() < 1e-12);
        assert!(pearson(&[1.0], &[1.0]).is_err());
        assert!(pearson(&[1.0, 2.0], &[1.0]).is_err());
        assert!(pearson(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn spearman_cases() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[1.0, 8.0, 27.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        // ranks x = [1.5, 1.5, 3], y = [1, 2, 3]:
        // dx = [-0.5, -0.5, 1], dy = [-1, 0, 1]; sxy = 1.5, sxx = 1.5, syy = 2
        let expected = 1.5 / (1.5f64 * 2.0).sqrt();
        assert!((spearman(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap() - expected).abs() < 1e-12);
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), [3.5, 1.0, 3.5, 2.0]);
    }

    fn set(id: &str, pairs: &[(&str, f64)]) -> ScoreSet {
        let lines: Vec<ScoreLine> = pairs.iter().map(|(l, s)| ScoreLine { latent_id: l.to_string(), score: *s, per_decile: None }).collect();
        ScoreSet::from_lines(id, &lines).unwrap()
    }

    #[test]
    fn agreement_shapes() {
        let a = set("a", &[("x", 0.1), ("y", 0.5), ("z", 0.9)]);
        let r = agreement_table(&[a.clone(), a.clone()]).unwrap();
        assert_eq!(r.pearson[0][1], Some(1.0));
        let b = set("b", &[("x", 0.3), ("y", 0.2), ("z", 0.8), ("w", 0.1)]);
        let c = set("c", &[("x", 0.9), ("y", 0.4), ("z", 0.2)]);
        let r = agreement_table(&[a.clone(), b, c]).unwrap();
        assert_eq!(r.pearson.len(), 3);
        assert_eq!(r.latents, ["x", "y", "z"]);
        for i in 0..3 {
            assert_eq!(r.pearson[i][i], Some(1.0));
            for j in 0..3 {
                assert_eq!(r.pearson[i][j], r.pearson[j][i]);
                assert_eq!(r.spearman[i][j], r.spearman[j][i]);
                assert_eq!(r.n[i][j], 3);
            }
        }
        let d = set("d", &[("p", 0.3), ("q", 0.2)]);
        assert!(matches!(agreement_table(&[a, d]), Err(Error::NoOverlap)));
    }

    #[test]
    fn score_file_validation() {
        let bad = [ScoreLine { latent_id: "x".into(), score: 1.5, per_decile: None }];
        assert!(ScoreSet::from_lines("s", &bad).is_err());
    }

    #[test]
    fn curves_by_bin() {
        let mk = |id: &str, accs: &[(u8, f64)]| {
            let per: BTreeMap<u8, DecileAccuracy> = accs.iter().map(|(d, a)| (*d, DecileAccuracy { correct: 0, total: 1, accuracy: *a })).collect();
            let overall = per.values().map(|a| a.accuracy).sum::<f64>() / per.len() as f64;
            LatentScore { latent_id: id.into(), per_decile_accuracy: per, overall, n_tasks: 1 }
        };
        let curves = decile_curves_by_bin(&[mk("a", &[(1, 0.9), (2, 1.0)]), mk("b", &[(1, 0.1), (2, 0.2)])]).unwrap();
        assert_eq!(curves[4][0], Some(0.9));
        assert_eq!(curves[0][1], Some(0.2));
        assert_eq!(curves[2][0], None);
    }
}
