//! Evaluation statistics: top-k accuracy, percentile bootstrap intervals,
//! paired and unpaired permutation tests, exploration summaries and
//! confidence-stratified accuracy.
//!
//! Every Monte Carlo routine derives one ChaCha stream per replicate from
//! `(seed, replicate index)`, so results do not depend on thread count.

use std::collections::BTreeMap;
use std::io::BufRead;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::RunReport;
use crate::protocol::{Confidence, EventBody, TraceEvent};

pub const DEFAULT_REPLICATES: usize = 1000;
pub const DEFAULT_PERMUTATIONS: usize = 1000;

/// Two statistics closer than this are treated as equal, so permutations
/// that reproduce the observed value count as extreme despite rounding.
const TIE_EPSILON: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum StatsError {
    #[error("no scores to summarize")]
    Empty,
    #[error("k must be 1 or 3, got {0}")]
    InvalidK(usize),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("replicate count must be at least 1")]
    NoReplicates,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MagnificationClass {
    /// Below 2.5x.
    Low,
    /// 2.5x up to but excluding 10x.
    Medium,
    /// 10x and above.
    High,
}

impl MagnificationClass {
    pub fn of(magnification: f64) -> Self {
        if magnification >= 10.0 {
            MagnificationClass::High
        } else if magnification >= 2.5 {
            MagnificationClass::Medium
        } else {
            MagnificationClass::Low
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MagnificationClass::Low => "low",
            MagnificationClass::Medium => "medium",
            MagnificationClass::High => "high",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewCounts {
    pub high: u32,
    pub medium: u32,
    pub low: u32,
}

impl ViewCounts {
    pub fn add(&mut self, class: MagnificationClass) {
        match class {
            MagnificationClass::High => self.high += 1,
            MagnificationClass::Medium => self.medium += 1,
            MagnificationClass::Low => self.low += 1,
        }
    }

    pub fn total(&self) -> u32 {
        self.high + self.medium + self.low
    }

    /// Counts the `view` events of one trace.
    pub fn from_trace(events: &[TraceEvent]) -> Self {
        let mut c = Self::default();
        for e in events {
            if let EventBody::View(v) = &e.body {
                c.add(MagnificationClass::of(v.region.magnification));
            }
        }
        c
    }
}

/// A point estimate with its 95% interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatResult {
    pub point: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
    pub seed: u64,
}

/// Lower-cases and collapses whitespace.
pub fn normalize_diagnosis(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Default matcher: case-insensitive equality after whitespace normalization.
pub fn diagnosis_matches(gold: &str, predicted: &str) -> bool {
    normalize_diagnosis(gold) == normalize_diagnosis(predicted)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub case_id: String,
    pub gold: String,
    /// Primary diagnosis first, then the two differentials.
    pub predictions: Vec<String>,
    pub confidence: Confidence,
    /// View counts keyed by magnification class.
    #[serde(default)]
    pub regions_by_mag: BTreeMap<String, u32>,
}

impl OutcomeRecord {
    pub fn validate(&self) -> Result<(), String> {
        if self.predictions.len() != 3 {
            return Err(format!("case {}: expected 3 predictions, found {}", self.case_id, self.predictions.len()));
        }
        Ok(())
    }

    /// Whether `gold` is among the first `k` predictions.
    pub fn hit(&self, k: usize, matcher: &dyn Fn(&str, &str) -> bool) -> bool {
        self.predictions.iter().take(k).any(|p| matcher(&self.gold, p))
    }

    /// Outcome of a completed run; `None` for aborted runs.
    pub fn from_report(case_id: &str, gold: &str, report: &RunReport) -> Option<Self> {
        let d = report.diagnosis.as_ref()?;
        let regions_by_mag = [
            (MagnificationClass::High, report.views.high),
            (MagnificationClass::Medium, report.views.medium),
            (MagnificationClass::Low, report.views.low),
        ]
        .into_iter()
        .map(|(c, n)| (c.as_str().to_string(), n))
        .collect();
        Some(Self {
            case_id: case_id.to_string(),
            gold: gold.to_string(),
            predictions: vec![d.primary_diagnosis.clone(), d.differentials[0].clone(), d.differentials[1].clone()],
            confidence: d.confidence,
            regions_by_mag,
        })
    }
}

/// Reads JSON-lines outcome records; blank lines are skipped.
pub fn read_outcomes(reader: impl BufRead) -> Result<Vec<OutcomeRecord>, StatsError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |message: String| StatsError::Parse { line: i + 1, message };
        let record: OutcomeRecord = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        record.validate().map_err(parse)?;
        out.push(record);
    }
    Ok(out)
}

fn stream(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile bootstrap of the mean. The interval is widened to include the
/// point estimate if resampling noise would exclude it.
pub fn bootstrap_ci(scores: &[f64], replicates: usize, seed: u64) -> Result<StatResult, StatsError> {
    if scores.is_empty() {
        return Err(StatsError::Empty);
    }
    if replicates == 0 {
        return Err(StatsError::NoReplicates);
    }
    let n = scores.len();
    let point = mean(scores);
    let mut means: Vec<f64> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream(seed, r);
            (0..n).map(|_| scores[rng.random_range(0..n)]).sum::<f64>() / n as f64
        })
        .collect();
    means.sort_by(f64::total_cmp);
    Ok(StatResult {
        point,
        ci_low: quantile(&means, 0.025).min(point),
        ci_high: quantile(&means, 0.975).max(point),
        n,
        seed,
    })
}

/// Top-k accuracy with a bootstrap interval.
pub fn topk_accuracy(
    records: &[OutcomeRecord],
    k: usize,
    matcher: &dyn Fn(&str, &str) -> bool,
    replicates: usize,
    seed: u64,
) -> Result<StatResult, StatsError> {
    if k != 1 && k != 3 {
        return Err(StatsError::InvalidK(k));
    }
    bootstrap_ci(&hit_scores(records, k, matcher), replicates, seed)
}

/// 1.0 per record whose gold label is within the first `k` predictions.
pub fn hit_scores(records: &[OutcomeRecord], k: usize, matcher: &dyn Fn(&str, &str) -> bool) -> Vec<f64> {
    records.iter().map(|r| if r.hit(k, matcher) { 1.0 } else { 0.0 }).collect()
}

fn smoothed(extreme: usize, permutations: usize) -> f64 {
    (extreme + 1) as f64 / (permutations + 1) as f64
}

/// Two-sided paired test: each permutation swaps the members of every pair
/// with probability 1/2. Returns `(k + 1) / (N + 1)` where `k` counts
/// permutations at least as extreme as the observed mean difference.
pub fn paired_permutation_pvalue(a: &[f64], b: &[f64], permutations: usize, seed: u64) -> Result<f64, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(StatsError::Empty);
    }
    if permutations == 0 {
        return Err(StatsError::NoReplicates);
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let observed = (d.iter().sum::<f64>() / n).abs();
    let extreme = (0..permutations)
        .into_par_iter()
        .filter(|&p| {
            let mut rng = stream(seed, p);
            let s: f64 = d.iter().map(|x| if rng.random_bool(0.5) { -x } else { *x }).sum();
            (s / n).abs() >= observed - TIE_EPSILON
        })
        .count();
    Ok(smoothed(extreme, permutations))
}

/// Two-sided unpaired test on the difference of group means, relabelling
/// the pooled scores uniformly at random. Groups are put in a canonical
/// order first, so swapping them gives the identical p-value.
pub fn unpaired_permutation_pvalue(
    group_a: &[f64],
    group_b: &[f64],
    permutations: usize,
    seed: u64,
) -> Result<f64, StatsError> {
    if group_a.is_empty() || group_b.is_empty() {
        return Err(StatsError::Empty);
    }
    if permutations == 0 {
        return Err(StatsError::NoReplicates);
    }
    let sorted = |g: &[f64]| {
        let mut v = g.to_vec();
        v.sort_by(f64::total_cmp);
        v
    };
    let (a, b) = (sorted(group_a), sorted(group_b));
    let key = |v: &[f64]| (v.len(), v.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    let (a, b) = if key(&a) <= key(&b) { (a, b) } else { (b, a) };
    let observed = (mean(&a) - mean(&b)).abs();
    let pooled: Vec<f64> = a.iter().chain(&b).copied().collect();
    let total: f64 = pooled.iter().sum();
    let (na, nb) = (a.len(), b.len());
    let extreme = (0..permutations)
        .into_par_iter()
        .filter(|&p| {
            let mut rng = stream(seed, p);
            let mut v = pooled.clone();
            let (head, _) = v.partial_shuffle(&mut rng, na);
            let sa: f64 = head.iter().sum();
            ((sa / na as f64) - (total - sa) / nb as f64).abs() >= observed - TIE_EPSILON
        })
        .count();
    Ok(smoothed(extreme, permutations))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single trace.
    pub sd: f64,
}

impl MeanSd {
    fn of(xs: &[f64]) -> Self {
        let m = mean(xs);
        let sd = if xs.len() < 2 {
            0.0
        } else {
            (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
        };
        Self { mean: m, sd }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplorationSummary {
    pub traces: usize,
    pub high: MeanSd,
    pub medium: MeanSd,
    pub low: MeanSd,
    pub total: MeanSd,
}

/// Per-class mean and sample sd of regions viewed per trace.
pub fn exploration_summary(traces: &[Vec<TraceEvent>]) -> Result<ExplorationSummary, StatsError> {
    if traces.is_empty() {
        return Err(StatsError::Empty);
    }
    let counts: Vec<ViewCounts> = traces.iter().map(|t| ViewCounts::from_trace(t)).collect();
    let col = |f: fn(&ViewCounts) -> u32| MeanSd::of(&counts.iter().map(|c| f(c) as f64).collect::<Vec<_>>());
    Ok(ExplorationSummary {
        traces: traces.len(),
        high: col(|c| c.high),
        medium: col(|c| c.medium),
        low: col(|c| c.low),
        total: col(|c| c.total()),
    })
}

/// Top-1 accuracy per confidence label. Labels without records are left
/// out with a warning.
pub fn confidence_stratified_accuracy(
    records: &[OutcomeRecord],
    matcher: &dyn Fn(&str, &str) -> bool,
    replicates: usize,
    seed: u64,
) -> Result<BTreeMap<Confidence, StatResult>, StatsError> {
    let mut out = BTreeMap::new();
    for label in [Confidence::High, Confidence::Low] {
        let stratum: Vec<OutcomeRecord> = records.iter().filter(|r| r.confidence == label).cloned().collect();
        if stratum.is_empty() {
            log::warn!("no {label}-confidence records; stratum omitted");
            continue;
        }
        out.insert(label, topk_accuracy(&stratum, 1, matcher, replicates, seed)?);
    }
    Ok(out)
}

/// One row of the results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub metric: String,
    pub result: StatResult,
}

pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["metric", "point", "ci_low", "ci_high", "n", "seed"]).expect("in-memory write");
    for r in rows {
        let x = &r.result;
        w.write_record([
            r.metric.clone(),
            format!("{:.6}", x.point),
            format!("{:.6}", x.ci_low),
            format!("{:.6}", x.ci_high),
            x.n.to_string(),
            x.seed.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}
