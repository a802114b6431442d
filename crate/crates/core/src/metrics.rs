//! Ranking metrics and threshold calibration over (score, label) pairs.
//!
//! Labels: 0 = correct, 1 = incorrect, so a good uncertainty score ranks
//! label-1 entries on top. Ties are handled by expectation everywhere:
//! midranks in AUROC, uniformly random rejection order within a tied group
//! in the rejection curve. Thresholds use strict comparison (score > t) and
//! deterministic midpoints; a seeded variant draws uniformly from the same
//! threshold-equivalence interval.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Checks labels and scores, returning (#label-1, #label-0).
fn validate_pairs(pairs: &[(f64, u8)]) -> Result<(usize, usize)> {
    let mut n1 = 0usize;
    let mut n0 = 0usize;
    for &(score, label) in pairs {
        if score.is_nan() {
            return Err(Error::InvalidInput("score is NaN".into()));
        }
        match label {
            0 => n0 += 1,
            1 => n1 += 1,
            other => {
                return Err(Error::InvalidInput(format!(
                    "label {other} outside {{0, 1}}"
                )))
            }
        }
    }
    Ok((n1, n0))
}

/// Probability that a uniformly random label-1 score exceeds a uniformly
/// random label-0 score, ties counted half. Computed with midranks.
pub fn auroc(pairs: &[(f64, u8)]) -> Result<f64> {
    let (n1, n0) = validate_pairs(pairs)?;
    if n1 == 0 || n0 == 0 {
        return Err(Error::Metric(format!(
            "AUROC needs both labels, got {n1} incorrect / {n0} correct"
        )));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&a, &b| pairs[a].0.partial_cmp(&pairs[b].0).unwrap());
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && pairs[order[j]].0 == pairs[order[i]].0 {
            j += 1;
        }
        // 1-based midrank shared by the tied block [i, j).
        let midrank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if pairs[idx].1 == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (n1 * (n1 + 1)) as f64 / 2.0;
    Ok(u / (n1 as f64 * n0 as f64))
}

/// Fraction of label-0 entries.
pub fn accuracy(pairs: &[(f64, u8)]) -> Result<f64> {
    let (n1, n0) = validate_pairs(pairs)?;
    let n = n1 + n0;
    if n == 0 {
        return Err(Error::Metric("accuracy of an empty dataset".into()));
    }
    Ok(n0 as f64 / n as f64)
}

/// Expected precision of the retained set after r rejections, r = 0..=n,
/// rejecting highest scores first. Tied scores are rejected in uniformly
/// random order, so a partially rejected tie group contributes its correct
/// count fractionally. The empty retained set has precision 1 by convention.
fn rejection_curve(pairs: &[(f64, u8)]) -> Vec<f64> {
    let n = pairs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| pairs[b].0.partial_cmp(&pairs[a].0).unwrap());
    // Per rejected slot: expected number of corrects it removes.
    let mut slot_correct = Vec::with_capacity(n);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && pairs[order[j]].0 == pairs[order[i]].0 {
            j += 1;
        }
        let correct = order[i..j]
            .iter()
            .filter(|&&idx| pairs[idx].1 == 0)
            .count() as f64;
        let share = correct / (j - i) as f64;
        slot_correct.extend(std::iter::repeat_n(share, j - i));
        i = j;
    }
    let total_correct = pairs.iter().filter(|p| p.1 == 0).count() as f64;
    let mut curve = Vec::with_capacity(n + 1);
    let mut rejected_correct = 0.0;
    for r in 0..n {
        curve.push((total_correct - rejected_correct) / (n - r) as f64);
        rejected_correct += slot_correct[r];
    }
    curve.push(1.0);
    curve
}

/// Rejection curve as (rejected fraction, retained precision) points for
/// external plotting; rejection runs from 0/n to n/n.
pub fn rejection_curve_points(pairs: &[(f64, u8)]) -> Result<Vec<(f64, f64)>> {
    let n = pairs.len();
    if n == 0 {
        return Err(Error::Metric("rejection curve of an empty dataset".into()));
    }
    validate_pairs(pairs)?;
    Ok(rejection_curve(pairs)
        .into_iter()
        .enumerate()
        .map(|(r, p)| (r as f64 / n as f64, p))
        .collect())
}

fn trapezoid_auc(curve: &[f64]) -> f64 {
    let steps = curve.len() - 1;
    curve
        .windows(2)
        .map(|w| (w[0] + w[1]) / 2.0)
        .sum::<f64>()
        / steps as f64
}

/// Prediction rejection ratio: area between the score's rejection curve and
/// the constant-accuracy random curve, normalized by the oracle's area.
/// 1 = oracle ordering, 0 = uninformative, negative = worse than random.
pub fn prr(pairs: &[(f64, u8)]) -> Result<f64> {
    let (n1, n0) = validate_pairs(pairs)?;
    if n1 == 0 || n0 == 0 {
        return Err(Error::Metric(format!(
            "PRR needs both labels, got {n1} incorrect / {n0} correct"
        )));
    }
    let auc_score = trapezoid_auc(&rejection_curve(pairs));
    let oracle: Vec<(f64, u8)> = pairs.iter().map(|&(_, l)| (l as f64, l)).collect();
    let auc_oracle = trapezoid_auc(&rejection_curve(&oracle));
    let auc_random = accuracy(pairs)?;
    Ok((auc_score - auc_random) / (auc_oracle - auc_random))
}

/// Fraction of label-1 entries with score strictly above `t`.
pub fn recall_at(pairs: &[(f64, u8)], t: f64) -> Result<f64> {
    let (n1, _) = validate_pairs(pairs)?;
    if n1 == 0 {
        return Err(Error::Metric("recall needs at least one label-1 entry".into()));
    }
    let hit = pairs.iter().filter(|&&(s, l)| l == 1 && s > t).count();
    Ok(hit as f64 / n1 as f64)
}

/// The achievable-recall ladder of a calibration set: distinct label-1
/// scores descending with cumulative positive counts.
struct RecallLadder {
    /// (distinct score, #positives at or above it), descending by score.
    steps: Vec<(f64, usize)>,
    n1: usize,
    max_score: f64,
}

fn recall_ladder(pairs: &[(f64, u8)]) -> Result<RecallLadder> {
    validate_pairs(pairs)?;
    let mut pos: Vec<f64> = pairs
        .iter()
        .filter(|p| p.1 == 1)
        .map(|p| p.0)
        .collect();
    if pos.is_empty() {
        return Err(Error::Metric(
            "threshold calibration needs at least one label-1 entry".into(),
        ));
    }
    pos.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let n1 = pos.len();
    let mut steps: Vec<(f64, usize)> = Vec::new();
    for (count, &s) in pos.iter().enumerate() {
        match steps.last_mut() {
            Some(last) if last.0 == s => last.1 = count + 1,
            _ => steps.push((s, count + 1)),
        }
    }
    let max_score = pairs
        .iter()
        .map(|p| p.0)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(RecallLadder {
        steps,
        n1,
        max_score,
    })
}

/// The open threshold interval achieving the smallest achievable recall
/// >= `r_star`, as (low, high). Any t in it yields that recall.
fn threshold_interval(ladder: &RecallLadder, r_star: f64) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&r_star) {
        return Err(Error::InvalidInput(format!(
            "recall target {r_star} outside [0, 1]"
        )));
    }
    if r_star == 0.0 {
        // Anything at or above the top positive score rejects nothing.
        return Ok((ladder.steps[0].0, ladder.max_score + 2.0));
    }
    let hit = ladder
        .steps
        .iter()
        .position(|&(_, k)| k as f64 / ladder.n1 as f64 >= r_star)
        .expect("last step always reaches recall 1");
    let high = ladder.steps[hit].0;
    let low = ladder
        .steps
        .get(hit + 1)
        .map_or(high - 2.0, |&(next, _)| next);
    Ok((low, high))
}

/// Deterministic threshold whose calibration recall is the smallest
/// achievable value >= `r_star`: the midpoint of the valid interval, one
/// above the maximum score when the target is 0, one below the lowest
/// positive score at full recall.
pub fn threshold_at_recall(pairs: &[(f64, u8)], r_star: f64) -> Result<f64> {
    let ladder = recall_ladder(pairs)?;
    let (low, high) = threshold_interval(&ladder, r_star)?;
    if r_star == 0.0 {
        return Ok(ladder.max_score + 1.0);
    }
    Ok((low + high) / 2.0)
}

/// Like [`threshold_at_recall`] but draws the threshold uniformly from the
/// valid interval, mirroring the random pick the calibration procedure is
/// defined with. Seeded and reproducible.
pub fn threshold_at_recall_seeded(pairs: &[(f64, u8)], r_star: f64, seed: u64) -> Result<f64> {
    let ladder = recall_ladder(pairs)?;
    let (low, high) = threshold_interval(&ladder, r_star)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rng.gen_range(low..high))
}

/// Recall targets for calibration-error sweeps: sorted values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct RecallTargets {
    targets: Vec<f64>,
}

impl RecallTargets {
    pub fn new(targets: Vec<f64>) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::InvalidInput("no recall targets".into()));
        }
        if targets.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::InvalidInput("recall target outside [0, 1]".into()));
        }
        if targets.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidInput("recall targets must be sorted".into()));
        }
        Ok(RecallTargets { targets })
    }

    /// 0 to 1 in steps of 0.001, inclusive.
    pub fn default_grid() -> Self {
        RecallTargets {
            targets: (0..=1000).map(|i| i as f64 / 1000.0).collect(),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.targets
    }
}

impl Default for RecallTargets {
    fn default() -> Self {
        RecallTargets::default_grid()
    }
}

/// Average recall error: thresholds are calibrated on `cal` per target, the
/// achieved recall is measured on `test`, and the absolute deviations are
/// averaged over the targets.
pub fn are(pairs_cal: &[(f64, u8)], pairs_test: &[(f64, u8)], targets: &RecallTargets) -> Result<f64> {
    let ladder = recall_ladder(pairs_cal)?;
    let mut total = 0.0;
    for &r_star in targets.values() {
        let (low, high) = threshold_interval(&ladder, r_star)?;
        let t = if r_star == 0.0 {
            ladder.max_score + 1.0
        } else {
            (low + high) / 2.0
        };
        total += (r_star - recall_at(pairs_test, t)?).abs();
    }
    Ok(total / targets.values().len() as f64)
}

/// One (method, calibration set) cell of the distribution-shift study.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftStudyRow {
    pub method: String,
    pub cal_set: String,
    pub metric: String,
    pub mean: f64,
    pub sd: f64,
    pub seed_count: usize,
}

impl ShiftStudyRow {
    pub const CSV_HEADER: &'static str = "method,cal_set,metric,mean,sd,seed_count";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.method, self.cal_set, self.metric, self.mean, self.sd, self.seed_count
        )
    }
}

/// Scores of one method on every dataset involved in the shift study.
#[derive(Debug, Clone)]
pub struct ShiftMethodInput {
    pub method: String,
    /// Named calibration datasets (e.g. in-domain and shifted).
    pub cal_sets: Vec<(String, Vec<(f64, u8)>)>,
    pub test: Vec<(f64, u8)>,
}

/// ARE per (method, calibration set), repeated over seeded subsamples of
/// the calibration data; reports mean and population standard deviation.
pub fn shift_study(
    inputs: &[ShiftMethodInput],
    targets: &RecallTargets,
    seeds: &[u64],
    subsample: f64,
) -> Result<Vec<ShiftStudyRow>> {
    if seeds.is_empty() {
        return Err(Error::Config("shift study needs at least one seed".into()));
    }
    if !(subsample > 0.0 && subsample <= 1.0) {
        return Err(Error::Config(format!(
            "subsample fraction {subsample} outside (0, 1]"
        )));
    }
    let mut rows = Vec::new();
    for input in inputs {
        for (cal_name, cal) in &input.cal_sets {
            let mut values = Vec::with_capacity(seeds.len());
            for &seed in seeds {
                let sub = subsample_pairs(cal, subsample, seed);
                values.push(are(&sub, &input.test, targets)?);
            }
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            let var =
                values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
            rows.push(ShiftStudyRow {
                method: input.method.clone(),
                cal_set: cal_name.clone(),
                metric: "are".into(),
                mean,
                sd: var.sqrt(),
                seed_count: seeds.len(),
            });
        }
    }
    Ok(rows)
}

/// Seeded subsample without replacement, keeping at least one entry.
fn subsample_pairs(pairs: &[(f64, u8)], fraction: f64, seed: u64) -> Vec<(f64, u8)> {
    use rand::seq::SliceRandom;
    let keep = ((pairs.len() as f64 * fraction).round() as usize).clamp(1, pairs.len());
    let mut indices: Vec<usize> = (0..pairs.len()).collect();
    indices.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    indices.truncate(keep);
    indices.sort_unstable();
    indices.into_iter().map(|i| pairs[i]).collect()
}
