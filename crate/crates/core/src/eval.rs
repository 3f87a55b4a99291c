//! Per-class diagnostic metrics, ROC curves, Mann–Whitney AUC and
//! percentile-bootstrap intervals, plus the CSV/JSON report writers.
//!
//! A prediction is positive when `score >= threshold`. Metrics whose
//! denominator is zero are `NaN` and are written as the text `NaN`.

use std::cmp::Ordering;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::seed::{derive_seed, BOOTSTRAP};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_RESAMPLES: usize = 1000;
pub const DEFAULT_CONFIDENCE: f64 = 0.95;
/// Redraws allowed per resample before giving up on a one-class draw.
pub const MAX_REDRAWS: usize = 1000;

pub const METRICS_HEADER: [&str; 10] = [
    "class",
    "Accuracy",
    "Prevalence",
    "Sensitivity",
    "Specificity",
    "PPV",
    "NPV",
    "AUC",
    "F1",
    "Threshold",
];

pub const BOOTSTRAP_HEADER: [&str; 7] = ["class", "mean_auc", "lower", "upper", "level", "resamples", "seed"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn positives(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> usize {
        self.tn + self.fp
    }
}

fn check_aligned(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::InvalidArgument("no examples to evaluate".into()));
    }
    if let Some(i) = labels.iter().position(|&y| y > 1) {
        return Err(Error::InvalidLabel {
            row: i,
            column: 0,
            value: labels[i].to_string(),
        });
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::InvalidArgument(format!("score {i} is NaN")));
    }
    Ok(())
}

pub fn confusion_at_threshold(scores: &[f64], labels: &[u8], threshold: f64) -> Result<ConfusionCounts> {
    check_aligned(scores, labels)?;
    let mut c = ConfusionCounts::default();
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        f64::NAN
    } else {
        num as f64 / den as f64
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricRow {
    pub class_name: String,
    #[serde(serialize_with = "nan_as_null")]
    pub accuracy: f64,
    #[serde(serialize_with = "nan_as_null")]
    pub prevalence: f64,
    #[serde(serialize_with = "nan_as_null")]
    pub sensitivity: f64,
    #[serde(serialize_with = "nan_as_null")]
    pub specificity: f64,
    #[serde(serialize_with = "nan_as_null")]
    pub ppv: f64,
    #[serde(serialize_with = "nan_as_null")]
    pub npv: f64,
    #[serde(serialize_with = "nan_as_null")]
    pub auc: f64,
    #[serde(serialize_with = "nan_as_null")]
    pub f1: f64,
    pub threshold: f64,
    pub counts: ConfusionCounts,
}

fn nan_as_null<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_none()
    }
}

/// Derives the Table-4 metric set from confusion counts.
pub fn metric_row(counts: ConfusionCounts, auc: f64, class_name: &str, threshold: f64) -> MetricRow {
    let c = counts;
    let f1 = if c.tp == 0 {
        if c.tp + c.fp + c.fn_ > 0 {
            0.0
        } else {
            f64::NAN
        }
    } else {
        2.0 * c.tp as f64 / (2 * c.tp + c.fp + c.fn_) as f64
    };
    MetricRow {
        class_name: class_name.to_string(),
        accuracy: ratio(c.tp + c.tn, c.total()),
        prevalence: ratio(c.positives(), c.total()),
        sensitivity: ratio(c.tp, c.tp + c.fn_),
        specificity: ratio(c.tn, c.tn + c.fp),
        ppv: ratio(c.tp, c.tp + c.fp),
        npv: ratio(c.tn, c.tn + c.fn_),
        auc,
        f1,
        threshold,
        counts,
    }
}

/// Indices sorted by descending score (ties keep input order).
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    idx
}

/// Mann–Whitney U statistic from groups of tied scores, given in
/// descending score order as `(positives, negatives)` per group.
fn auc_from_groups(groups: impl Iterator<Item = (f64, f64)>) -> (f64, f64, f64) {
    // walk from the highest score down: each positive beats every negative
    // in lower groups, and half of those tied with it
    let mut neg_above = 0.0;
    let mut pos_total = 0.0;
    let mut u_rev = 0.0; // pairs where the negative is ranked higher, ties half
    for (p, n) in groups {
        u_rev += p * (neg_above + 0.5 * n);
        neg_above += n;
        pos_total += p;
    }
    let pairs = pos_total * neg_above;
    // all counts are exact in f64, so this is the exact pair fraction
    ((pairs - u_rev) / pairs, pos_total, neg_above)
}

fn tie_groups<'a>(scores: &'a [f64], labels: &'a [u8], order: &'a [usize]) -> impl Iterator<Item = (f64, f64)> + 'a {
    let mut i = 0;
    std::iter::from_fn(move || {
        if i >= order.len() {
            return None;
        }
        let s = scores[order[i]];
        let (mut p, mut n) = (0.0, 0.0);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                p += 1.0;
            } else {
                n += 1.0;
            }
            i += 1;
        }
        Some((p, n))
    })
}

fn require_both_classes(labels: &[u8]) -> Result<()> {
    let pos = labels.iter().filter(|&&y| y == 1).count();
    if pos == 0 || pos == labels.len() {
        Err(Error::UndefinedAuc)
    } else {
        Ok(())
    }
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_aligned(scores, labels)?;
    require_both_classes(labels)?;
    let order = descending(scores);
    Ok(auc_from_groups(tie_groups(scores, labels, &order)).0)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RocCurve {
    /// `(fpr, tpr)` from `(0,0)` to `(1,1)`, one point per distinct score.
    pub points: Vec<(f64, f64)>,
}

impl RocCurve {
    pub fn trapezoid_area(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
            .sum()
    }
}

pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<RocCurve> {
    check_aligned(scores, labels)?;
    require_both_classes(labels)?;
    let order = descending(scores);
    let pos = labels.iter().filter(|&&y| y == 1).count() as f64;
    let neg = labels.len() as f64 - pos;
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0.0, 0.0);
    for (p, n) in tie_groups(scores, labels, &order) {
        tp += p;
        fp += n;
        points.push((fp / neg, tp / pos));
    }
    Ok(RocCurve { points })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BootstrapResult {
    /// AUC of the unresampled data.
    pub point_auc: f64,
    /// Mean AUC over the resamples.
    pub mean_auc: f64,
    pub lower: f64,
    pub upper: f64,
    pub n_resamples: usize,
    pub confidence_level: f64,
    pub seed: u64,
}

impl BootstrapResult {
    /// `"mean (lower-upper)"` with two decimals.
    pub fn format_interval(&self) -> String {
        format!("{:.2} ({:.2}-{:.2})", self.mean_auc, self.lower, self.upper)
    }
}

/// Linear-interpolation percentile of an ascending slice, `q` in `[0,1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile bootstrap over `(score, label)` pairs. Resample `r` draws from
/// its own stream derived from `seed`, so results do not depend on
/// evaluation order. Draws lacking a class are redrawn up to [`MAX_REDRAWS`] times.
pub fn bootstrap_auc(
    scores: &[f64],
    labels: &[u8],
    n_resamples: usize,
    confidence_level: f64,
    seed: u64,
) -> Result<BootstrapResult> {
    bootstrap_auc_with_redraws(scores, labels, n_resamples, confidence_level, seed, MAX_REDRAWS)
}

/// [`bootstrap_auc`] with an explicit redraw budget per resample.
pub fn bootstrap_auc_with_redraws(
    scores: &[f64],
    labels: &[u8],
    n_resamples: usize,
    confidence_level: f64,
    seed: u64,
    max_redraws: usize,
) -> Result<BootstrapResult> {
    if !(confidence_level > 0.0 && confidence_level < 1.0) {
        return Err(Error::InvalidArgument(format!("confidence level {confidence_level} outside (0,1)")));
    }
    let mut aucs = bootstrap_resample_aucs(scores, labels, n_resamples, seed, max_redraws)?;
    let point_auc = auc(scores, labels)?;
    let mean_auc = aucs.iter().sum::<f64>() / n_resamples as f64;
    aucs.sort_by(f64::total_cmp);
    let tail = (1.0 - confidence_level) / 2.0;
    Ok(BootstrapResult {
        point_auc,
        mean_auc,
        lower: percentile(&aucs, tail),
        upper: percentile(&aucs, 1.0 - tail),
        n_resamples,
        confidence_level,
        seed,
    })
}

/// AUC of each bootstrap resample, in resample order.
pub fn bootstrap_resample_aucs(
    scores: &[f64],
    labels: &[u8],
    n_resamples: usize,
    seed: u64,
    max_redraws: usize,
) -> Result<Vec<f64>> {
    check_aligned(scores, labels)?;
    require_both_classes(labels)?;
    if n_resamples < 100 {
        return Err(Error::InvalidArgument(format!("{n_resamples} resamples; at least 100 required")));
    }
    let n = scores.len();
    let order = descending(scores);
    // group boundaries of the sorted originals, so each resample is scored
    // in O(n) from multiplicities
    let mut group_of = vec![0usize; n];
    let mut groups = 0usize;
    for (rank, &i) in order.iter().enumerate() {
        if rank > 0 && scores[i] != scores[order[rank - 1]] {
            groups += 1;
        }
        group_of[i] = groups;
    }
    let groups = groups + 1;

    let mut aucs = Vec::with_capacity(n_resamples);
    let mut tally = vec![(0.0f64, 0.0f64); groups];
    for r in 0..n_resamples {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed ^ BOOTSTRAP, r as u64));
        let mut attempts = 0;
        loop {
            tally.iter_mut().for_each(|t| *t = (0.0, 0.0));
            let mut pos = 0usize;
            for _ in 0..n {
                let i = rng.random_range(0..n);
                let t = &mut tally[group_of[i]];
                if labels[i] == 1 {
                    t.0 += 1.0;
                    pos += 1;
                } else {
                    t.1 += 1.0;
                }
            }
            if pos > 0 && pos < n {
                break;
            }
            if attempts == max_redraws {
                return Err(Error::BootstrapFailure(format!(
                    "resample {r} drew a single class {} times in a row",
                    attempts + 1
                )));
            }
            attempts += 1;
        }
        aucs.push(auc_from_groups(tally.iter().copied()).0);
    }
    Ok(aucs)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BootstrapConfig {
    pub n_resamples: usize,
    pub confidence_level: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            n_resamples: DEFAULT_RESAMPLES,
            confidence_level: DEFAULT_CONFIDENCE,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ClassReport {
    #[serde(flatten)]
    pub row: MetricRow,
    /// `None` when the class has a single label value.
    pub bootstrap: Option<BootstrapResult>,
    #[serde(skip)]
    pub roc: Option<RocCurve>,
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricsReport {
    pub classes: Vec<ClassReport>,
}

/// Column `c` of a row-major `N×K` matrix.
fn column<T: Copy>(rows: &[Vec<T>], c: usize) -> Vec<T> {
    rows.iter().map(|r| r[c]).collect()
}

/// Scores every class of an `N×K` prediction matrix. Classes with one label
/// value get `NaN` AUC and no interval instead of failing the whole report.
pub fn metrics_table(
    class_names: &[String],
    scores: &[Vec<f64>],
    labels: &[Vec<u8>],
    threshold: f64,
    bootstrap: &BootstrapConfig,
) -> Result<MetricsReport> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidShape(format!(
            "{} score rows, {} label rows",
            scores.len(),
            labels.len()
        )));
    }
    let k = class_names.len();
    if let Some(r) = scores.iter().position(|r| r.len() != k) {
        return Err(Error::InvalidShape(format!("score row {r} does not have {k} columns")));
    }
    if let Some(r) = labels.iter().position(|r| r.len() != k) {
        return Err(Error::InvalidShape(format!("label row {r} does not have {k} columns")));
    }
    let mut classes = Vec::with_capacity(k);
    for (c, name) in class_names.iter().enumerate() {
        let s = column(scores, c);
        let y = column(labels, c);
        let counts = confusion_at_threshold(&s, &y, threshold)?;
        let (auc_value, interval, roc) = match auc(&s, &y) {
            Ok(a) => (
                a,
                Some(bootstrap_auc(
                    &s,
                    &y,
                    bootstrap.n_resamples,
                    bootstrap.confidence_level,
                    derive_seed(bootstrap.seed, c as u64),
                )?),
                Some(roc_curve(&s, &y)?),
            ),
            Err(Error::UndefinedAuc) => (f64::NAN, None, None),
            Err(e) => return Err(e),
        };
        classes.push(ClassReport {
            row: metric_row(counts, auc_value, name, threshold),
            bootstrap: interval,
            roc,
        });
    }
    Ok(MetricsReport { classes })
}

fn cell(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        v.to_string()
    }
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        w.write_record([
            r.class_name.clone(),
            cell(r.accuracy),
            cell(r.prevalence),
            cell(r.sensitivity),
            cell(r.specificity),
            cell(r.ppv),
            cell(r.npv),
            cell(r.auc),
            cell(r.f1),
            cell(r.threshold),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<metrics csv>", e))?;
    Ok(())
}

pub fn write_bootstrap_csv<W: Write>(report: &MetricsReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(BOOTSTRAP_HEADER)?;
    for c in &report.classes {
        let rec = match &c.bootstrap {
            Some(b) => [
                c.row.class_name.clone(),
                cell(b.mean_auc),
                cell(b.lower),
                cell(b.upper),
                cell(b.confidence_level),
                b.n_resamples.to_string(),
                b.seed.to_string(),
            ],
            None => [
                c.row.class_name.clone(),
                cell(f64::NAN),
                cell(f64::NAN),
                cell(f64::NAN),
                String::new(),
                String::new(),
                String::new(),
            ],
        };
        w.write_record(rec)?;
    }
    w.flush().map_err(|e| Error::io("<bootstrap csv>", e))?;
    Ok(())
}

/// Table of `class, Mean AUC (CI)` strings such as `0.89 (0.86-0.92)`.
pub fn write_interval_table<W: Write>(report: &MetricsReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["class", "Mean AUC (CI)"])?;
    for c in &report.classes {
        let text = c.bootstrap.as_ref().map_or_else(|| "NaN".to_string(), BootstrapResult::format_interval);
        w.write_record([c.row.class_name.as_str(), &text])?;
    }
    w.flush().map_err(|e| Error::io("<interval table>", e))?;
    Ok(())
}

pub fn write_roc_csv<W: Write>(curve: &RocCurve, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["fpr", "tpr"])?;
    for &(x, y) in &curve.points {
        w.write_record([x.to_string(), y.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<roc csv>", e))?;
    Ok(())
}

pub fn write_metrics_json<W: Write>(report: &MetricsReport, out: W) -> Result<()> {
    serde_json::to_writer_pretty(out, report)?;
    Ok(())
}
