//! Post-hoc analysis: tail labels from traced cosines, quartile accuracies,
//! class-balanced metrics, boundary comparisons, example rankings and dense
//! per-band errors.

use crate::data::{boundary_log_ratio, side_of, BoundarySide, Dataset2D, GaussianSpec, GridSpec};
use crate::error::{Error, Result};
use crate::nn::MlpModel;
use crate::train::{ExampleTrace, LabeledData};

/// Half-width of the cosine band around zero treated as rare.
pub const DEFAULT_BAND: f64 = 0.07;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TailLabel {
    Common,
    Rare,
    Hard,
}

impl TailLabel {
    pub fn name(self) -> &'static str {
        match self {
            TailLabel::Common => "common",
            TailLabel::Rare => "rare",
            TailLabel::Hard => "hard",
        }
    }
}

/// Labels over the visited examples; unvisited ids are listed separately.
#[derive(Debug, Clone, PartialEq)]
pub struct TailLabels {
    pub labels: Vec<(usize, TailLabel)>,
    pub excluded: Vec<usize>,
}

impl TailLabels {
    pub fn count(&self, label: TailLabel) -> usize {
        self.labels.iter().filter(|(_, l)| *l == label).count()
    }

    pub fn ids(&self, label: TailLabel) -> Vec<usize> {
        self.labels
            .iter()
            .filter(|(_, l)| *l == label)
            .map(|(id, _)| *id)
            .collect()
    }
}

pub fn tail_label(mean_theta: f64, band_half_width: f64) -> TailLabel {
    if mean_theta < -band_half_width {
        TailLabel::Hard
    } else if mean_theta > band_half_width {
        TailLabel::Common
    } else {
        TailLabel::Rare
    }
}

/// Rare ⇔ mean θ ∈ [−b, b] (closed); hard below, common above.
pub fn label_examples(traces: &[ExampleTrace], band_half_width: f64) -> TailLabels {
    let mut labels = Vec::with_capacity(traces.len());
    let mut excluded = Vec::new();
    for t in traces {
        match t.mean_theta() {
            Some(m) => labels.push((t.id, tail_label(m, band_half_width))),
            None => excluded.push(t.id),
        }
    }
    TailLabels { labels, excluded }
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuartileAccuracy {
    /// Lowest-θ quartile first.
    pub accuracies: [f64; 4],
    pub bin_sizes: [usize; 4],
    /// Pearson correlation of quartile index (1–4) with quartile accuracy;
    /// 0 when undefined.
    pub correlation: f64,
    pub correlation_defined: bool,
    /// Per-example correlation of θ with correctness.
    pub point_biserial: Option<f64>,
}

/// Splits examples (index = id) into θ quartiles, ties broken by id.
pub fn quartile_accuracy(thetas: &[f64], correct: &[bool]) -> Result<QuartileAccuracy> {
    if thetas.len() != correct.len() {
        return Err(Error::LengthMismatch(format!(
            "{} thetas, {} correctness flags",
            thetas.len(),
            correct.len()
        )));
    }
    let n = thetas.len();
    if n < 4 {
        return Err(Error::InsufficientData(format!("{n} examples, need at least 4")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| thetas[a].total_cmp(&thetas[b]).then(a.cmp(&b)));
    let mut accuracies = [0.0; 4];
    let mut bin_sizes = [0; 4];
    for q in 0..4 {
        let bin = &order[q * n / 4..(q + 1) * n / 4];
        bin_sizes[q] = bin.len();
        accuracies[q] = bin.iter().filter(|&&i| correct[i]).count() as f64 / bin.len() as f64;
    }
    let corr = pearson(&[1.0, 2.0, 3.0, 4.0], &accuracies);
    let flags: Vec<f64> = correct.iter().map(|&c| c as u8 as f64).collect();
    Ok(QuartileAccuracy {
        accuracies,
        bin_sizes,
        correlation: corr.unwrap_or(0.0),
        correlation_defined: corr.is_some(),
        point_biserial: pearson(thetas, &flags),
    })
}

/// Anything that assigns a class to an input.
pub trait Classifier {
    fn predict(&self, input: &[f64]) -> usize;
}

impl Classifier for MlpModel {
    fn predict(&self, input: &[f64]) -> usize {
        self.predict_class(input).expect("input dimension matches model")
    }
}

/// Adapts a closure into a [`Classifier`].
pub struct FnClassifier<F>(pub F);

impl<F: Fn(&[f64]) -> usize> Classifier for FnClassifier<F> {
    fn predict(&self, input: &[f64]) -> usize {
        (self.0)(input)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub total_accuracy: f64,
    pub per_class_recall: Vec<f64>,
    pub balanced_accuracy: f64,
}

pub fn class_metrics<C: Classifier + ?Sized, D: LabeledData>(
    classifier: &C,
    data: &D,
    num_classes: usize,
) -> Result<ClassMetrics> {
    if data.len() == 0 {
        return Err(Error::InsufficientData("dataset is empty".into()));
    }
    let mut hits = vec![0usize; num_classes];
    let mut counts = vec![0usize; num_classes];
    for id in 0..data.len() {
        let label = data.label(id);
        if label >= num_classes {
            return Err(Error::UnknownClass(label));
        }
        counts[label] += 1;
        if classifier.predict(data.input(id)) == label {
            hits[label] += 1;
        }
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::InsufficientData(format!("class {empty} has no examples")));
    }
    let per_class_recall: Vec<f64> = hits
        .iter()
        .zip(&counts)
        .map(|(&h, &c)| h as f64 / c as f64)
        .collect();
    Ok(ClassMetrics {
        total_accuracy: hits.iter().sum::<usize>() as f64 / data.len() as f64,
        balanced_accuracy: per_class_recall.iter().sum::<f64>() / num_classes as f64,
        per_class_recall,
    })
}

/// Fraction of grid nodes where the classifier's class differs from the
/// equal-density side (common ↔ class of `common.label`). Nodes exactly on
/// the boundary agree with either class.
pub fn boundary_disagreement<C: Classifier + ?Sized>(
    classifier: &C,
    common: &GaussianSpec,
    uncommon: &GaussianSpec,
    grid: GridSpec,
) -> f64 {
    let mut differ = 0usize;
    let mut total = 0usize;
    for x in grid.nodes() {
        total += 1;
        let predicted = classifier.predict(&x);
        let disagree = match side_of(boundary_log_ratio(x, common, uncommon, false)) {
            BoundarySide::Common => predicted != common.label,
            BoundarySide::Uncommon => predicted != uncommon.label,
            BoundarySide::OnBoundary => false,
        };
        differ += disagree as usize;
    }
    differ as f64 / total as f64
}

/// Distance from `x` to the equal-density boundary, found by marching along
/// the direction that shrinks the log-density gap (the normalized gradient of
/// the log ratio) and bisecting the bracketed crossing to `tol`. `None` when
/// the gradient vanishes or no crossing lies within 100 units.
pub fn boundary_distance(x: [f64; 2], common: &GaussianSpec, uncommon: &GaussianSpec, tol: f64) -> Option<f64> {
    let h = |p: [f64; 2]| boundary_log_ratio(p, common, uncommon, false);
    let h0 = h(x);
    if h0.abs() <= 1e-12 {
        return Some(0.0);
    }
    let gc = common.log_density_grad(x);
    let gu = uncommon.log_density_grad(x);
    let g = [gc[0] - gu[0], gc[1] - gu[1]];
    let norm = (g[0] * g[0] + g[1] * g[1]).sqrt();
    if norm < 1e-300 {
        return None;
    }
    let s = -h0.signum() / norm;
    let dir = [g[0] * s, g[1] * s];
    let at = |t: f64| h([x[0] + t * dir[0], x[1] + t * dir[1]]);
    let (mut lo, mut hi) = (0.0, 0.25);
    while at(hi).signum() == h0.signum() {
        lo = hi;
        hi *= 2.0;
        if hi > 100.0 {
            return None;
        }
    }
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if at(mid).signum() == h0.signum() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

pub const BOUNDARY_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct RareSetStats {
    /// No example fell in the rare band.
    pub empty: bool,
    pub rare_count: usize,
    /// Rare examples per class label.
    pub per_class_counts: Vec<usize>,
    pub rare_mean_distance: Option<f64>,
    pub all_mean_distance: Option<f64>,
}

impl RareSetStats {
    pub fn has_both_classes(&self) -> bool {
        self.per_class_counts.iter().filter(|&&c| c > 0).count() >= 2
    }
}

fn mean_distance(ids: impl Iterator<Item = usize>, data: &Dataset2D) -> Option<f64> {
    let (sum, n) = ids
        .filter_map(|id| boundary_distance(data.points[id], &data.common, &data.uncommon, BOUNDARY_TOLERANCE))
        .fold((0.0, 0usize), |(s, n), d| (s + d, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn rare_set_stats(labels: &TailLabels, data: &Dataset2D) -> RareSetStats {
    let rare = labels.ids(TailLabel::Rare);
    let mut per_class_counts = vec![0; data.num_classes()];
    for &id in &rare {
        per_class_counts[data.labels[id]] += 1;
    }
    RareSetStats {
        empty: rare.is_empty(),
        rare_count: rare.len(),
        per_class_counts,
        rare_mean_distance: mean_distance(rare.iter().copied(), data),
        all_mean_distance: mean_distance(labels.labels.iter().map(|(id, _)| *id), data),
    }
}

/// Visited example ids in ascending mean θ, ties by id.
pub fn rank_examples_by_theta(traces: &[ExampleTrace]) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = traces
        .iter()
        .filter_map(|t| t.mean_theta().map(|m| (m, t.id)))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.into_iter().map(|(_, id)| id).collect()
}

/// Median split on mean entropy: `true` marks high-entropy examples. Index
/// follows `traces`; unvisited examples are `None`.
pub fn entropy_split(traces: &[ExampleTrace]) -> Vec<Option<bool>> {
    let mut values: Vec<f64> = traces.iter().filter_map(ExampleTrace::mean_entropy).collect();
    if values.is_empty() {
        return vec![None; traces.len()];
    }
    let med = median(&mut values).unwrap();
    traces
        .iter()
        .map(|t| t.mean_entropy().map(|e| e > med))
        .collect()
}

/// Median, sorting `values` in place. `None` for an empty slice.
pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandMre {
    pub edges: Vec<f64>,
    /// Band `k` covers `[edges[k], edges[k+1])`; `None` when it has no pixels.
    pub bands: Vec<Option<f64>>,
    pub counts: Vec<usize>,
    /// Over every valid pixel.
    pub total: Option<f64>,
    pub total_count: usize,
}

/// Mean relative error `|pred − target| / target`, per target band and overall.
pub fn dense_band_mre(predictions: &[f64], targets: &[f64], mask: &[bool], edges: &[f64]) -> Result<BandMre> {
    if predictions.len() != targets.len() || mask.len() != targets.len() {
        return Err(Error::LengthMismatch("predictions, targets and mask differ".into()));
    }
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidConfig("band edges must be strictly increasing".into()));
    }
    let nb = edges.len() - 1;
    let mut sums = vec![0.0; nb];
    let mut counts = vec![0usize; nb];
    let (mut total, mut total_count) = (0.0, 0usize);
    for i in 0..targets.len() {
        if !mask[i] {
            continue;
        }
        let t = targets[i];
        if !(t > 0.0) {
            return Err(Error::InvalidConfig(format!("pixel {i} has non-positive target {t}")));
        }
        let rel = (predictions[i] - t).abs() / t;
        total += rel;
        total_count += 1;
        if let Some(k) = (0..nb).find(|&k| t >= edges[k] && t < edges[k + 1]) {
            sums[k] += rel;
            counts[k] += 1;
        }
    }
    Ok(BandMre {
        edges: edges.to_vec(),
        bands: sums
            .iter()
            .zip(&counts)
            .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
            .collect(),
        counts,
        total: (total_count > 0).then(|| total / total_count as f64),
        total_count,
    })
}
