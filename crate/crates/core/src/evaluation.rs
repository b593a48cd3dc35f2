//! Per-patient metrics, MAD threshold transfer, the corrected resampled
//! t-test, Mann-Whitney U, bootstrap intervals and box-plot summaries.

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use spes_nn::ModelSpec;
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::dataset::Outcome;
use crate::error::{CoreError, Result};
use crate::experiment::{score_bank, standardize_bank, Family, Subset, TrainConfig, TrainedRun};
use crate::paradigm::{Paradigm, PatientBank};

fn sorted_by_score<F: Float>(scores: &[F]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    idx
}

/// `P(score_pos > score_neg) + ½ P(tie)`, or `None` when a class is absent.
///
/// Counted as integer half-wins, so the result is exactly the pairwise
/// definition rounded once.
pub fn auroc<F: Float>(scores: &[F], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let n_pos = labels.iter().filter(|&&l| l).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let idx = sorted_by_score(scores);
    let (mut neg_below, mut twice_wins) = (0u64, 0u64);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        let (mut p, mut n) = (0u64, 0u64);
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            if labels[idx[j]] {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        twice_wins += 2 * p * neg_below + p * n;
        neg_below += n;
        i = j;
    }
    Some(twice_wins as f64 / (2 * n_pos * n_neg) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Youden {
    pub specificity: f64,
    pub sensitivity: f64,
    pub youden: f64,
}

impl Youden {
    pub fn from_rates(specificity: f64, sensitivity: f64) -> Self {
        Self {
            specificity,
            sensitivity,
            youden: sensitivity + specificity - 1.0,
        }
    }
}

/// Scores at or above `thresh` are called positive.
pub fn youden<F: Float>(scores: &[F], labels: &[bool], thresh: f64) -> Option<Youden> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let (mut tp, mut fneg, mut tn, mut fp) = (0usize, 0usize, 0usize, 0usize);
    for (s, &l) in scores.iter().zip(labels) {
        let called = s.to_f64().unwrap() >= thresh;
        match (l, called) {
            (true, true) => tp += 1,
            (true, false) => fneg += 1,
            (false, false) => tn += 1,
            (false, true) => fp += 1,
        }
    }
    if tp + fneg == 0 || tn + fp == 0 {
        return None;
    }
    Some(Youden::from_rates(
        tn as f64 / (tn + fp) as f64,
        tp as f64 / (tp + fneg) as f64,
    ))
}

/// Youden-maximising threshold among `-∞`, midpoints of adjacent distinct
/// scores and `+∞`; ties go to the lowest threshold.
pub fn optimal_threshold<F: Float>(scores: &[F], labels: &[bool]) -> Option<f64> {
    let mut v: Vec<f64> = scores.iter().map(|s| s.to_f64().unwrap()).collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    let mut candidates = vec![f64::NEG_INFINITY];
    candidates.extend(v.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    candidates.push(f64::INFINITY);
    let mut best: Option<(f64, f64)> = None;
    for c in candidates {
        let j = youden(scores, labels, c)?.youden;
        if best.is_none_or(|(bj, _)| j > bj) {
            best = Some((j, c));
        }
    }
    best.map(|(_, c)| c)
}

pub fn median(x: &[f64]) -> f64 {
    assert!(!x.is_empty(), "median of nothing");
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Raw median absolute deviation (no normal-consistency factor).
pub fn mad(x: &[f64]) -> f64 {
    let m = median(x);
    median(&x.iter().map(|v| (v - m).abs()).collect::<Vec<_>>())
}

/// `n` with `thresh = median(x) + n·MAD(x)`; `None` when MAD is zero or
/// the threshold is infinite.
pub fn mad_multiplier(scores: &[f64], thresh: f64) -> Option<f64> {
    let d = mad(scores);
    let n = (thresh - median(scores)) / d;
    (d > 0.0 && n.is_finite()).then_some(n)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientScores {
    pub patient_id: String,
    pub electrode_ids: Vec<String>,
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
    pub outcome: Outcome,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRule {
    pub n: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RuleFit {
    pub rule: ThresholdRule,
    /// per-patient multipliers that entered the median
    pub multipliers: Vec<(String, f64)>,
    /// single-class, zero-MAD or infinite-optimum patients
    pub skipped: Vec<String>,
}

pub fn fit_threshold_rule(validation: &[PatientScores]) -> Result<RuleFit> {
    let mut multipliers = Vec::new();
    let mut skipped = Vec::new();
    for p in validation {
        match optimal_threshold(&p.scores, &p.labels).and_then(|t| mad_multiplier(&p.scores, t)) {
            Some(n) => multipliers.push((p.patient_id.clone(), n)),
            None => skipped.push(p.patient_id.clone()),
        }
    }
    if multipliers.is_empty() {
        return Err(CoreError::Rule(format!(
            "no usable validation patient among {}",
            validation.len()
        )));
    }
    let ns: Vec<f64> = multipliers.iter().map(|(_, n)| *n).collect();
    Ok(RuleFit {
        rule: ThresholdRule { n: median(&ns) },
        multipliers,
        skipped,
    })
}

/// Patient-specific threshold from scores alone.
pub fn apply_threshold_rule(rule: &ThresholdRule, scores: &[f64]) -> f64 {
    median(scores) + rule.n * mad(scores)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientMetrics {
    pub patient_id: String,
    pub outcome: Outcome,
    pub auroc: Option<f64>,
    pub threshold: f64,
    pub threshold_metrics: Option<Youden>,
}

pub fn patient_metrics(p: &PatientScores, rule: &ThresholdRule) -> PatientMetrics {
    let threshold = apply_threshold_rule(rule, &p.scores);
    PatientMetrics {
        patient_id: p.patient_id.clone(),
        outcome: p.outcome,
        auroc: auroc(&p.scores, &p.labels),
        threshold,
        threshold_metrics: youden(&p.scores, &p.labels, threshold),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// sample SD; 0 for a single value
    pub sd: f64,
    pub n: usize,
}

pub fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Some(Summary { mean, sd, n })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    /// one-sided, alternative `mean(a − b) > 0`
    pub p: f64,
    pub df: usize,
    pub mean_difference: f64,
}

/// Nadeau–Bengio corrected paired t-test over `J` resampling runs:
/// `t = mean(d) / sqrt((1/J + n_test/n_train) · var(d))`.
pub fn corrected_ttest(a: &[f64], b: &[f64], n_train: f64, n_test: f64) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(CoreError::Input(format!("{} runs against {}", a.len(), b.len())));
    }
    let j = a.len();
    if j < 2 {
        return Err(CoreError::Input("need at least two runs".into()));
    }
    if !(n_train > 0.0) || !(n_test >= 0.0) {
        return Err(CoreError::Input("partition sizes must be positive".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let s = summarize(&d).expect("non-empty");
    let var = s.sd * s.sd;
    let df = j - 1;
    let (t, p) = if var == 0.0 {
        match s.mean.partial_cmp(&0.0) {
            Some(std::cmp::Ordering::Greater) => (f64::INFINITY, 0.0),
            Some(std::cmp::Ordering::Less) => (f64::NEG_INFINITY, 1.0),
            _ => (0.0, 1.0),
        }
    } else {
        let t = s.mean / ((1.0 / j as f64 + n_test / n_train) * var).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df as f64).expect("df ≥ 1");
        (t, dist.sf(t))
    };
    Ok(TTest {
        t,
        p,
        df,
        mean_difference: s.mean,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    pub u_a: f64,
    /// one-sided, alternative: A stochastically greater than B
    pub p: f64,
    pub exact: bool,
}

/// Mid-ranks (1-based) of the pooled sample.
fn midranks(x: &[f64]) -> Vec<f64> {
    let idx = sorted_by_score(x);
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && x[idx[j]] == x[idx[i]] {
            j += 1;
        }
        let mid = (i + j + 1) as f64 / 2.0;
        for &k in &idx[i..j] {
            r[k] = mid;
        }
        i = j;
    }
    r
}

pub const EXACT_MAX_SMALLER: usize = 8;
pub const EXACT_MAX_TOTAL: usize = 25;

pub fn mann_whitney_one_tailed(a: &[f64], b: &[f64]) -> Result<MannWhitney> {
    if a.is_empty() || b.is_empty() {
        return Err(CoreError::Input("Mann-Whitney needs two non-empty groups".into()));
    }
    let (na, nb) = (a.len(), b.len());
    let n = na + nb;
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = midranks(&pooled);
    let rank_sum_a: f64 = ranks[..na].iter().sum();
    let u_a = rank_sum_a - (na * (na + 1)) as f64 / 2.0;

    if na.min(nb) <= EXACT_MAX_SMALLER && n <= EXACT_MAX_TOTAL {
        // ways[k][s]: k-subsets of the pooled ranks with doubled rank sum s
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let max_sum: usize = doubled.iter().sum();
        let mut ways = vec![vec![0u128; max_sum + 1]; na + 1];
        ways[0][0] = 1;
        for &d in &doubled {
            for k in (1..=na).rev() {
                for s in (d..=max_sum).rev() {
                    ways[k][s] += ways[k - 1][s - d];
                }
            }
        }
        let observed = (2.0 * rank_sum_a).round() as usize;
        let total: u128 = ways[na].iter().sum();
        let hits: u128 = ways[na][observed..].iter().sum();
        return Ok(MannWhitney {
            u_a,
            p: hits as f64 / total as f64,
            exact: true,
        });
    }

    let mut sorted = pooled.clone();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|&&v| v == sorted[i]).count();
        tie_term += (j * j * j - j) as f64;
        i += j;
    }
    let (fa, fb, fnn) = (na as f64, nb as f64, n as f64);
    let var = fa * fb / 12.0 * ((fnn + 1.0) - tie_term / (fnn * (fnn - 1.0)));
    let mean = fa * fb / 2.0;
    let p = if var <= 0.0 {
        1.0
    } else {
        let z = (u_a - mean - 0.5) / var.sqrt();
        Normal::standard().sf(z)
    };
    Ok(MannWhitney { u_a, p, exact: false })
}

/// Linear-interpolation quantile of sorted data (`q ∈ [0, 1]`).
pub fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// Percentile bootstrap interval for the mean.
pub fn bootstrap_ci(values: &[f64], level: f64, resamples: usize, seed: u64) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(CoreError::Input("bootstrap needs at least two values".into()));
    }
    if !(0.0 < level && level < 1.0) || resamples == 0 {
        return Err(CoreError::Input("bad bootstrap level or resample count".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    Ok((quantile_sorted(&means, alpha), quantile_sorted(&means, 1.0 - alpha)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub n: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    /// most extreme data points within 1.5 IQR of the quartiles
    pub whisker_lo: f64,
    pub whisker_hi: f64,
}

pub fn box_stats(values: &[f64]) -> Option<BoxStats> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let (q1, q3) = (quantile_sorted(&v, 0.25), quantile_sorted(&v, 0.75));
    let iqr = q3 - q1;
    let lo_fence = q1 - 1.5 * iqr;
    let hi_fence = q3 + 1.5 * iqr;
    Some(BoxStats {
        n: v.len(),
        median: quantile_sorted(&v, 0.5),
        q1,
        q3,
        whisker_lo: *v.iter().find(|&&x| x >= lo_fence).unwrap(),
        whisker_hi: *v.iter().rev().find(|&&x| x <= hi_fence).unwrap(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeReport {
    pub seizure_free: Option<BoxStats>,
    pub not_seizure_free: Option<BoxStats>,
    /// one-sided, seizure-free > not seizure-free; `None` when a group is empty
    pub mann_whitney: Option<MannWhitney>,
}

impl OutcomeReport {
    pub fn applicable(&self) -> bool {
        self.mann_whitney.is_some()
    }
}

/// Unknown outcomes are left out.
pub fn outcome_stratified_report(per_patient: &[(f64, Outcome)]) -> OutcomeReport {
    let group = |o: Outcome| -> Vec<f64> {
        per_patient.iter().filter(|(_, x)| *x == o).map(|(a, _)| *a).collect()
    };
    let (free, not_free) = (group(Outcome::SeizureFree), group(Outcome::NotSeizureFree));
    OutcomeReport {
        seizure_free: box_stats(&free),
        not_seizure_free: box_stats(&not_free),
        mann_whitney: mann_whitney_one_tailed(&free, &not_free).ok(),
    }
}

/// ROC points `(fpr, tpr)` over all distinct thresholds, from (0,0) to (1,1).
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Vec<(f64, f64)> {
    let n_pos = labels.iter().filter(|&&l| l).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    let mut idx = sorted_by_score(scores);
    idx.reverse();
    let mut out = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            if labels[idx[i]] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        out.push((
            if n_neg > 0.0 { fp / n_neg } else { 0.0 },
            if n_pos > 0.0 { tp / n_pos } else { 0.0 },
        ));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub repeat: usize,
    pub fold: usize,
    pub patients: Vec<PatientMetrics>,
}

impl RunMetrics {
    /// Mean over patients with a defined AUROC.
    pub fn mean_auroc(&self) -> Option<f64> {
        summarize(&self.patients.iter().filter_map(|p| p.auroc).collect::<Vec<_>>()).map(|s| s.mean)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub runs: Vec<RunMetrics>,
    /// over the per-run means; single-class patients excluded
    pub auroc: Option<Summary>,
    pub specificity: Option<Summary>,
    pub sensitivity: Option<Summary>,
    pub youden: Option<Summary>,
    pub single_class_skipped: usize,
    /// on each patient's AUROC averaged over the repeats it was tested in
    pub outcome: OutcomeReport,
}

impl MetricsReport {
    pub fn from_runs(model: &str, runs: &[RunMetrics]) -> Self {
        let entries = || runs.iter().flat_map(|r| &r.patients);
        let over_runs = |f: &dyn Fn(&PatientMetrics) -> Option<f64>| {
            let per_run: Vec<f64> = runs
                .iter()
                .filter_map(|r| summarize(&r.patients.iter().filter_map(f).collect::<Vec<_>>()).map(|s| s.mean))
                .collect();
            summarize(&per_run)
        };

        let mut per_patient: std::collections::BTreeMap<&str, (Vec<f64>, Outcome)> = Default::default();
        for p in entries() {
            if let Some(a) = p.auroc {
                per_patient.entry(&p.patient_id).or_insert((Vec::new(), p.outcome)).0.push(a);
            }
        }
        let pooled: Vec<(f64, Outcome)> = per_patient
            .values()
            .map(|(v, o)| (v.iter().sum::<f64>() / v.len() as f64, *o))
            .collect();
        Self {
            model: model.to_string(),
            runs: runs.to_vec(),
            auroc: over_runs(&|p| p.auroc),
            specificity: over_runs(&|p| p.threshold_metrics.map(|y| y.specificity)),
            sensitivity: over_runs(&|p| p.threshold_metrics.map(|y| y.sensitivity)),
            youden: over_runs(&|p| p.threshold_metrics.map(|y| y.youden)),
            single_class_skipped: entries().filter(|p| p.auroc.is_none()).count(),
            outcome: outcome_stratified_report(&pooled),
        }
    }

    pub fn per_run_auroc(&self) -> Vec<Option<f64>> {
        self.runs.iter().map(RunMetrics::mean_auroc).collect()
    }
}

/// One-sided corrected t-test of `a` over `b` on per-run mean AUROC. Runs
/// are paired by position.
pub fn compare_reports(a: &MetricsReport, b: &MetricsReport, n_train: f64, n_test: f64) -> Result<TTest> {
    let collect = |r: &MetricsReport| -> Result<Vec<f64>> {
        r.per_run_auroc()
            .into_iter()
            .map(|v| v.ok_or_else(|| CoreError::Input(format!("{}: a run has no defined AUROC", r.model))))
            .collect()
    };
    corrected_ttest(&collect(a)?, &collect(b)?, n_train, n_test)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub n: usize,
    pub mean_auroc: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    /// runs entering the mean
    pub values: usize,
    /// some targets had fewer than `n` rows and kept all of them
    pub clamped: bool,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub const ABLATION_RESAMPLES: usize = 10_000;

/// Mean test AUROC of already-trained Transformer runs when each target
/// sees a random `n`-row subset of its convergent responses, for each `n`.
///
/// A patient whose every target has at most `n` rows is scored once with
/// all rows, so such points equal standard evaluation exactly.
pub fn channel_sensitivity(
    runs: &[TrainedRun],
    banks: &[PatientBank<f32>],
    sizes: &[usize],
    draws: usize,
    seed: u64,
) -> Result<Vec<CurvePoint>> {
    if draws == 0 || sizes.contains(&0) {
        return Err(CoreError::Input("subset sizes and draw count must be positive".into()));
    }
    let mut prepared = Vec::new();
    for (ri, r) in runs.iter().enumerate() {
        if !matches!(r.checkpoint.spec, ModelSpec::Transformer { .. }) {
            return Err(CoreError::Input("channel sensitivity needs Transformer checkpoints".into()));
        }
        let model = r.checkpoint.model()?;
        let stats = r.stats();
        for id in &r.record.roles.test {
            let bank = banks
                .iter()
                .find(|b| &b.patient_id == id)
                .ok_or_else(|| CoreError::MissingData(format!("no bank for patient {id}")))?;
            prepared.push((ri, model.clone(), standardize_bank(bank, &stats)));
        }
    }
    let config = TrainConfig::desk(Family::CnnTransformer);
    let mut out = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let jobs: Vec<(usize, usize)> = (0..prepared.len())
            .flat_map(|i| {
                let (_, _, bank) = &prepared[i];
                let max_rows = bank
                    .enumerate_targets(Paradigm::Convergent)
                    .into_iter()
                    .map(|t| bank.n_rows(Paradigm::Convergent, t))
                    .max()
                    .unwrap_or(0);
                let d = if n >= max_rows { 1 } else { draws };
                (0..d).map(move |k| (i, k))
            })
            .collect();
        let scored: Vec<(usize, Option<f64>, bool)> = jobs
            .par_iter()
            .map(|&(i, k)| {
                let (ri, model, bank) = &prepared[i];
                let sub_seed = splitmix(seed ^ splitmix(((*ri as u64) << 40) ^ ((n as u64) << 20) ^ k as u64));
                let s = score_bank(model, &config, bank, Subset::Random { n, seed: sub_seed })?;
                let clamped = bank
                    .enumerate_targets(Paradigm::Convergent)
                    .into_iter()
                    .any(|t| bank.n_rows(Paradigm::Convergent, t) < n);
                Ok((i, auroc(&s.scores, &s.labels), clamped))
            })
            .collect::<Result<_>>()?;
        // draws averaged per (run, patient), patients per run, then runs,
        // mirroring MetricsReport
        let mut per_run: Vec<Vec<f64>> = vec![Vec::new(); runs.len()];
        let mut clamped = false;
        let mut i = 0;
        while i < scored.len() {
            let unit = scored[i].0;
            let group: Vec<f64> = scored[i..]
                .iter()
                .take_while(|s| s.0 == unit)
                .filter_map(|s| s.1)
                .collect();
            let len = scored[i..].iter().take_while(|s| s.0 == unit).count();
            clamped |= scored[i].2;
            match group.len() {
                0 => {}
                1 => per_run[prepared[unit].0].push(group[0]),
                g => per_run[prepared[unit].0].push(group.iter().sum::<f64>() / g as f64),
            }
            i += len;
        }
        let values: Vec<f64> = per_run.iter().filter_map(|v| summarize(v).map(|s| s.mean)).collect();
        let s = summarize(&values).ok_or_else(|| CoreError::Degenerate("no test patient with both classes".into()))?;
        let (ci_lo, ci_hi) = if values.len() >= 2 {
            bootstrap_ci(&values, 0.95, ABLATION_RESAMPLES, splitmix(seed ^ n as u64))?
        } else {
            (s.mean, s.mean)
        };
        out.push(CurvePoint {
            n,
            mean_auroc: s.mean,
            ci_lo,
            ci_hi,
            values: values.len(),
            clamped,
        });
    }
    Ok(out)
}
