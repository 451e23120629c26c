//! 1:1 verification metrics over grouped similarity pairs.
//!
//! Conventions: a negative pair is a false positive when its similarity is
//! strictly above the threshold; a positive pair is a false negative when
//! strictly below. Equality counts as correct.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, mean, sample_std, Matrix, Rng, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub similarity: f64,
    pub group: String,
}

impl ScoredPair {
    pub fn new(similarity: f64, group: impl Into<String>) -> Self {
        Self {
            similarity,
            group: group.into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupedScores {
    pub positives: Vec<ScoredPair>,
    pub negatives: Vec<ScoredPair>,
    /// Included groups, sorted.
    pub group_set: Vec<String>,
    /// Groups skipped while building pairs, with the reason.
    pub warnings: Vec<String>,
}

impl GroupedScores {
    /// Builds scores from plain `(similarity, group)` lists; the group set is
    /// every group that appears.
    pub fn from_pairs(positives: Vec<(f64, String)>, negatives: Vec<(f64, String)>) -> Self {
        let to_pairs = |v: Vec<(f64, String)>| v.into_iter().map(|(s, g)| ScoredPair::new(s, g)).collect::<Vec<_>>();
        let positives = to_pairs(positives);
        let negatives = to_pairs(negatives);
        let group_set: BTreeSet<String> = positives.iter().chain(&negatives).map(|p| p.group.clone()).collect();
        Self {
            positives,
            negatives,
            group_set: group_set.into_iter().collect(),
            warnings: Vec::new(),
        }
    }

    fn select<'a>(pairs: &'a [ScoredPair], group: Option<&'a str>) -> impl Iterator<Item = f64> + 'a {
        pairs
            .iter()
            .filter(move |p| group.is_none_or(|g| p.group == g))
            .map(|p| p.similarity)
    }

    pub fn negative_scores(&self, group: Option<&str>) -> Vec<f64> {
        Self::select(&self.negatives, group).collect()
    }

    pub fn positive_scores(&self, group: Option<&str>) -> Vec<f64> {
        Self::select(&self.positives, group).collect()
    }
}

/// Samples within-group verification pairs.
///
/// Positives pair samples of the same identity; negatives pair different
/// identities of the same group. Each group contributes at most
/// `max_pairs_per_group` pairs of each kind, drawn uniformly without
/// replacement when more are available. Groups with fewer than two
/// identities are skipped and noted in `warnings`.
pub fn build_pairs(
    embeddings: &Matrix,
    identity_labels: &[usize],
    group_labels: &[String],
    max_pairs_per_group: usize,
    seed: u64,
) -> Result<GroupedScores> {
    let n = embeddings.rows();
    if identity_labels.len() != n || group_labels.len() != n {
        return Err(Error::dims("build_pairs labels", n, format!("{} / {}", identity_labels.len(), group_labels.len())));
    }
    let mut by_group: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, g) in group_labels.iter().enumerate() {
        by_group.entry(g.as_str()).or_default().push(i);
    }
    let mut rng = Rng::stream(seed, Stream::Pairs);
    let mut out = GroupedScores::default();
    for (group, rows) in by_group {
        let identities: BTreeSet<usize> = rows.iter().map(|&i| identity_labels[i]).collect();
        if identities.len() < 2 {
            out.warnings.push(format!("group {group:?} has a single identity; excluded"));
            continue;
        }
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (a, &i) in rows.iter().enumerate() {
            for &j in &rows[a + 1..] {
                if identity_labels[i] == identity_labels[j] {
                    pos.push((i, j));
                } else {
                    neg.push((i, j));
                }
            }
        }
        for (pairs, sink) in [(pos, &mut out.positives), (neg, &mut out.negatives)] {
            for (i, j) in subsample(pairs, max_pairs_per_group, &mut rng) {
                sink.push(ScoredPair::new(dot(embeddings.row(i), embeddings.row(j)), group));
            }
        }
        out.group_set.push(group.to_string());
    }
    Ok(out)
}

fn subsample(mut pairs: Vec<(usize, usize)>, max: usize, rng: &mut Rng) -> Vec<(usize, usize)> {
    if pairs.len() <= max {
        return pairs;
    }
    rng.shuffle(&mut pairs);
    pairs.truncate(max);
    pairs.sort_unstable();
    pairs
}

/// `#{s ∈ S⁻ : s > t} / N⁻`, optionally restricted to one group.
pub fn fpr_at(scores: &GroupedScores, t: f64, group: Option<&str>) -> Result<f64> {
    let (mut above, mut total) = (0usize, 0usize);
    for s in GroupedScores::select(&scores.negatives, group) {
        total += 1;
        if s > t {
            above += 1;
        }
    }
    if total == 0 {
        return Err(Error::InvalidArgument(format!("no negative pairs{}", group_suffix(group))));
    }
    Ok(above as f64 / total as f64)
}

/// `#{s ∈ S⁺ : s < t} / N⁺`, optionally restricted to one group.
pub fn fnr_at(scores: &GroupedScores, t: f64, group: Option<&str>) -> Result<f64> {
    let (mut below, mut total) = (0usize, 0usize);
    for s in GroupedScores::select(&scores.positives, group) {
        total += 1;
        if s < t {
            below += 1;
        }
    }
    if total == 0 {
        return Err(Error::InvalidArgument(format!("no positive pairs{}", group_suffix(group))));
    }
    Ok(below as f64 / total as f64)
}

fn group_suffix(group: Option<&str>) -> String {
    group.map_or(String::new(), |g| format!(" for group {g:?}"))
}

/// Smallest threshold whose overall FPR is at most `gamma`.
///
/// With `k = floor(gamma · N⁻)` false positives allowed, that is the
/// `(k+1)`-th largest negative similarity.
pub fn threshold_for_overall_fpr(scores: &GroupedScores, gamma: f64) -> Result<f64> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidArgument(format!("gamma must lie in (0, 1), got {gamma}")));
    }
    let mut neg = scores.negative_scores(None);
    if neg.is_empty() {
        return Err(Error::InvalidArgument("no negative pairs".into()));
    }
    let n = neg.len();
    let allowed = ((gamma * n as f64) * (1.0 + 4.0 * f64::EPSILON)).floor() as usize;
    crate::numerics::select_kth_largest(&mut neg, (allowed + 1).min(n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasBreakdown {
    pub gamma: f64,
    pub threshold: f64,
    /// Realized overall FPR at `threshold`.
    pub overall_fpr: f64,
    pub group_fpr: BTreeMap<String, f64>,
    pub mean_group_fpr: f64,
    pub bias_degree: f64,
}

/// `δ = (1/N_G) · sqrt( Σ_g ((γ_g - μ) / γ)² )` with `μ` the mean group FPR
/// and `γ` the overall FPR.
pub fn bias_degree_from_rates(group_fprs: &[f64], overall_fpr: f64) -> Result<f64> {
    if group_fprs.len() < 2 {
        return Err(Error::Incompatible(format!(
            "bias degree needs at least 2 groups, got {}",
            group_fprs.len()
        )));
    }
    if !(overall_fpr > 0.0) {
        return Err(Error::Degenerate(format!(
            "overall FPR is {overall_fpr} at the chosen threshold; bias degree divides by it (use a larger gamma or more negative pairs)"
        )));
    }
    let mu = mean(group_fprs);
    let ss: f64 = group_fprs.iter().map(|g| ((g - mu) / overall_fpr).powi(2)).sum();
    Ok(ss.sqrt() / group_fprs.len() as f64)
}

pub fn bias_breakdown(scores: &GroupedScores, gamma: f64) -> Result<BiasBreakdown> {
    let groups: Vec<&String> = scores
        .group_set
        .iter()
        .filter(|g| scores.negatives.iter().any(|p| &p.group == *g))
        .collect();
    if groups.len() < 2 {
        return Err(Error::Incompatible(format!(
            "bias degree needs at least 2 groups with negative pairs, got {}",
            groups.len()
        )));
    }
    let threshold = threshold_for_overall_fpr(scores, gamma)?;
    let overall_fpr = fpr_at(scores, threshold, None)?;
    let mut group_fpr = BTreeMap::new();
    for g in groups {
        group_fpr.insert(g.clone(), fpr_at(scores, threshold, Some(g))?);
    }
    let rates: Vec<f64> = group_fpr.values().copied().collect();
    let bias_degree = bias_degree_from_rates(&rates, overall_fpr)?;
    Ok(BiasBreakdown {
        gamma,
        threshold,
        overall_fpr,
        mean_group_fpr: mean(&rates),
        group_fpr,
        bias_degree,
    })
}

pub fn bias_degree(scores: &GroupedScores, gamma: f64) -> Result<f64> {
    Ok(bias_breakdown(scores, gamma)?.bias_degree)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// Offset used to place the accept-all and reject-all thresholds just
/// outside the observed score range.
pub const ROC_EDGE_EPS: f64 = 1e-9;

/// ROC points at increasing thresholds: accept-all, evenly spaced
/// negative-score quantiles, reject-all.
pub fn roc(scores: &GroupedScores, group: Option<&str>, points: usize) -> Result<Vec<RocPoint>> {
    if points < 2 {
        return Err(Error::InvalidArgument("roc needs at least 2 points".into()));
    }
    let mut neg = scores.negative_scores(group);
    let pos = scores.positive_scores(group);
    if neg.is_empty() || pos.is_empty() {
        return Err(Error::InvalidArgument(format!("roc needs positive and negative pairs{}", group_suffix(group))));
    }
    neg.sort_by(f64::total_cmp);
    let lo = neg[0].min(pos.iter().copied().fold(f64::INFINITY, f64::min));
    let hi = neg[neg.len() - 1].max(pos.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    let mut out = Vec::with_capacity(points);
    for i in 0..points {
        let t = if i == 0 {
            lo - ROC_EDGE_EPS
        } else if i == points - 1 {
            hi + ROC_EDGE_EPS
        } else {
            let q = i as f64 / (points - 1) as f64;
            neg[(q * (neg.len() - 1) as f64).round() as usize]
        };
        out.push(RocPoint {
            threshold: t,
            fpr: fpr_at(scores, t, group)?,
            tpr: 1.0 - fnr_at(scores, t, group)?,
        });
    }
    Ok(out)
}

/// Best-threshold verification accuracy over all distinct observed scores.
/// Returns `(accuracy, threshold)`; ties go to the smallest threshold.
pub fn verification_accuracy(scores: &GroupedScores, group: Option<&str>) -> Result<(f64, f64)> {
    let mut pos = scores.positive_scores(group);
    let mut neg = scores.negative_scores(group);
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "verification accuracy needs positive and negative pairs{}",
            group_suffix(group)
        )));
    }
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);
    let mut candidates: Vec<f64> = pos.iter().chain(&neg).copied().collect();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let total = (pos.len() + neg.len()) as f64;
    let (mut best, mut best_t) = (0usize, candidates[0]);
    for &t in &candidates {
        let pos_correct = pos.len() - pos.partition_point(|&s| s < t);
        let neg_correct = neg.partition_point(|&s| s <= t);
        if pos_correct + neg_correct > best {
            best = pos_correct + neg_correct;
            best_t = t;
        }
    }
    Ok((best as f64 / total, best_t))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    /// FPR / FNR at the first operating point's threshold.
    pub fpr: f64,
    pub fnr: f64,
    pub accuracy: f64,
    pub accuracy_threshold: f64,
    pub num_positive: usize,
    pub num_negative: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub gamma: f64,
    pub threshold: f64,
    pub overall_fpr: f64,
    pub overall_fnr: f64,
    pub group_fpr: BTreeMap<String, f64>,
    pub group_fnr: BTreeMap<String, f64>,
    pub bias_degree: f64,
    /// Sample std of the group FPRs, raw rate units.
    pub fpr_std: f64,
    pub fpr_std_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub groups: Vec<String>,
    pub per_group: BTreeMap<String, GroupSummary>,
    pub overall_fpr: f64,
    pub overall_fnr: f64,
    pub overall_accuracy: f64,
    pub mean_accuracy: f64,
    /// Sample std of the per-group accuracies.
    pub accuracy_std: f64,
    pub operating_points: Vec<OperatingPoint>,
    pub roc: BTreeMap<String, Vec<RocPoint>>,
    pub warnings: Vec<String>,
}

impl FairnessReport {
    pub fn bias_degree_at(&self, gamma: f64) -> Option<f64> {
        self.operating_points.iter().find(|op| op.gamma == gamma).map(|op| op.bias_degree)
    }
}

/// Full report: per-group accuracy, one operating point per `gammas`
/// entry, and per-group ROC curves with `roc_points` points.
pub fn fairness_report(scores: &GroupedScores, gammas: &[f64], roc_points: usize) -> Result<FairnessReport> {
    if gammas.is_empty() {
        return Err(Error::InvalidArgument("at least one overall FPR level is required".into()));
    }
    let mut operating_points = Vec::with_capacity(gammas.len());
    for &gamma in gammas {
        let b = bias_breakdown(scores, gamma)?;
        let mut group_fnr = BTreeMap::new();
        for g in b.group_fpr.keys() {
            group_fnr.insert(g.clone(), fnr_at(scores, b.threshold, Some(g))?);
        }
        let rates: Vec<f64> = b.group_fpr.values().copied().collect();
        let fpr_std = sample_std(&rates);
        operating_points.push(OperatingPoint {
            gamma,
            threshold: b.threshold,
            overall_fpr: b.overall_fpr,
            overall_fnr: fnr_at(scores, b.threshold, None)?,
            group_fpr: b.group_fpr,
            group_fnr,
            bias_degree: b.bias_degree,
            fpr_std,
            fpr_std_percent: 100.0 * fpr_std,
        });
    }

    let first = &operating_points[0];
    let mut per_group = BTreeMap::new();
    let mut roc_curves = BTreeMap::new();
    for g in &scores.group_set {
        let (accuracy, accuracy_threshold) = verification_accuracy(scores, Some(g))?;
        per_group.insert(
            g.clone(),
            GroupSummary {
                fpr: fpr_at(scores, first.threshold, Some(g))?,
                fnr: fnr_at(scores, first.threshold, Some(g))?,
                accuracy,
                accuracy_threshold,
                num_positive: scores.positives.iter().filter(|p| &p.group == g).count(),
                num_negative: scores.negatives.iter().filter(|p| &p.group == g).count(),
            },
        );
        roc_curves.insert(g.clone(), roc(scores, Some(g), roc_points)?);
    }
    let accs: Vec<f64> = per_group.values().map(|s| s.accuracy).collect();
    Ok(FairnessReport {
        groups: scores.group_set.clone(),
        overall_fpr: first.overall_fpr,
        overall_fnr: first.overall_fnr,
        overall_accuracy: verification_accuracy(scores, None)?.0,
        mean_accuracy: mean(&accs),
        accuracy_std: sample_std(&accs),
        per_group,
        operating_points,
        roc: roc_curves,
        warnings: scores.warnings.clone(),
    })
}

/// Writes `threshold,fpr,tpr` rows.
pub fn write_roc_csv(points: &[RocPoint], path: &Path) -> Result<()> {
    let mut text = String::from("threshold,fpr,tpr\n");
    for p in points {
        text.push_str(&format!("{:.16e},{:.16e},{:.16e}\n", p.threshold, p.fpr, p.tpr));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
