//! Preprocessing and combination of multiple method scores per trace.
//!
//! All fitting consumes a calibration matrix with one row per trace and one
//! column per method (a fixed roster order). Saturated sentinels are legal
//! inputs everywhere: they are excluded from parameter fitting, clamp to
//! +3 after z-normalization, saturate max, and are skipped by min/mean.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{prr, threshold_at_recall};
use crate::trace::{is_saturated, SATURATED};

/// Nondecreasing stepwise-constant map from score to probability of
/// incorrectness, fitted by pool-adjacent-violators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsotonicMap {
    /// (distinct score, fitted value), ascending in both components.
    breakpoints: Vec<(f64, f64)>,
}

impl IsotonicMap {
    pub fn fit(cal: &[(f64, u8)]) -> Result<Self> {
        if cal.is_empty() {
            return Err(Error::InvalidInput("isotonic fit on empty input".into()));
        }
        for &(s, l) in cal {
            if s.is_nan() {
                return Err(Error::InvalidInput("isotonic fit on NaN score".into()));
            }
            if l > 1 {
                return Err(Error::InvalidInput(format!("label {l} outside {{0, 1}}")));
            }
        }
        // Pre-pool exact score ties: the fitted object is a function.
        let mut sorted: Vec<(f64, u8)> = cal.to_vec();
        sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let mut groups: Vec<(f64, f64, f64)> = Vec::new(); // (score, weight, label sum)
        for (s, l) in sorted {
            match groups.last_mut() {
                Some(g) if g.0 == s => {
                    g.1 += 1.0;
                    g.2 += l as f64;
                }
                _ => groups.push((s, 1.0, l as f64)),
            }
        }
        // PAV over pooled groups: merge while adjacent block means violate.
        struct Block {
            weight: f64,
            sum: f64,
            groups: usize,
        }
        let mut blocks: Vec<Block> = Vec::new();
        for &(_, w, sum) in &groups {
            blocks.push(Block {
                weight: w,
                sum,
                groups: 1,
            });
            while blocks.len() >= 2 {
                let last = blocks.len() - 1;
                let mean_prev = blocks[last - 1].sum / blocks[last - 1].weight;
                let mean_last = blocks[last].sum / blocks[last].weight;
                if mean_prev <= mean_last {
                    break;
                }
                let merged = blocks.pop().unwrap();
                blocks[last - 1].weight += merged.weight;
                blocks[last - 1].sum += merged.sum;
                blocks[last - 1].groups += merged.groups;
            }
        }
        let mut breakpoints = Vec::with_capacity(groups.len());
        let mut idx = 0;
        for block in &blocks {
            let value = block.sum / block.weight;
            for _ in 0..block.groups {
                breakpoints.push((groups[idx].0, value));
                idx += 1;
            }
        }
        Ok(IsotonicMap { breakpoints })
    }

    /// Stepwise-constant lookup, clamped to the fitted range at both ends.
    pub fn predict(&self, score: f64) -> f64 {
        let first = self.breakpoints[0];
        if score <= first.0 {
            return first.1;
        }
        // Value of the greatest breakpoint score <= the query.
        match self
            .breakpoints
            .binary_search_by(|bp| bp.0.partial_cmp(&score).unwrap())
        {
            Ok(i) => self.breakpoints[i].1,
            Err(i) => self.breakpoints[i - 1].1,
        }
    }

    pub fn breakpoints(&self) -> &[(f64, f64)] {
        &self.breakpoints
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Preprocessor {
    Raw,
    ZNorm { mu: Vec<f64>, sigma: Vec<f64> },
    Isotonic { maps: Vec<IsotonicMap> },
}

/// How far above the fitted mean a saturated sentinel lands after znorm.
const ZNORM_SENTINEL: f64 = 3.0;

fn column<'a>(rows: &'a [Vec<f64>], j: usize) -> impl Iterator<Item = f64> + 'a {
    rows.iter().map(move |r| r[j])
}

fn check_matrix(rows: &[Vec<f64>]) -> Result<usize> {
    let Some(first) = rows.first() else {
        return Err(Error::InvalidInput("empty score matrix".into()));
    };
    let k = first.len();
    if k == 0 {
        return Err(Error::InvalidInput("score vectors have zero methods".into()));
    }
    for row in rows {
        if row.len() != k {
            return Err(Error::InvalidInput(format!(
                "ragged score matrix: row of length {} among {k}",
                row.len()
            )));
        }
        if row.iter().any(|v| v.is_nan()) {
            return Err(Error::InvalidInput("NaN score in matrix".into()));
        }
    }
    Ok(k)
}

/// Per-method mean and population standard deviation over non-saturated
/// calibration values. A constant column has no scale and errors.
pub fn fit_znorm(cal: &[Vec<f64>]) -> Result<Preprocessor> {
    let k = check_matrix(cal)?;
    let mut mu = Vec::with_capacity(k);
    let mut sigma = Vec::with_capacity(k);
    for j in 0..k {
        let finite: Vec<f64> = column(cal, j).filter(|v| !is_saturated(*v)).collect();
        if finite.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "method column {j} has {} usable values, needs 2",
                finite.len()
            )));
        }
        let m = finite.iter().sum::<f64>() / finite.len() as f64;
        let var = finite.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / finite.len() as f64;
        if var == 0.0 {
            return Err(Error::InvalidInput(format!(
                "method column {j} is constant, z-normalization undefined"
            )));
        }
        mu.push(m);
        sigma.push(var.sqrt());
    }
    Ok(Preprocessor::ZNorm { mu, sigma })
}

/// Per-method isotonic maps from score to incorrectness probability.
pub fn fit_isotonic(cal: &[Vec<f64>], labels: &[u8]) -> Result<Preprocessor> {
    let k = check_matrix(cal)?;
    if labels.len() != cal.len() {
        return Err(Error::InvalidInput(format!(
            "{} labels for {} score vectors",
            labels.len(),
            cal.len()
        )));
    }
    let mut maps = Vec::with_capacity(k);
    for j in 0..k {
        let pairs: Vec<(f64, u8)> = column(cal, j).zip(labels.iter().copied()).collect();
        maps.push(IsotonicMap::fit(&pairs)?);
    }
    Ok(Preprocessor::Isotonic { maps })
}

impl Preprocessor {
    pub fn num_methods(&self) -> Option<usize> {
        match self {
            Preprocessor::Raw => None,
            Preprocessor::ZNorm { mu, .. } => Some(mu.len()),
            Preprocessor::Isotonic { maps } => Some(maps.len()),
        }
    }

    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        if let Some(k) = self.num_methods() {
            if v.len() != k {
                return Err(Error::InvalidInput(format!(
                    "score vector of length {} against roster of {k}",
                    v.len()
                )));
            }
        }
        Ok(match self {
            Preprocessor::Raw => v.to_vec(),
            Preprocessor::ZNorm { mu, sigma } => v
                .iter()
                .enumerate()
                .map(|(j, &s)| {
                    if is_saturated(s) {
                        ZNORM_SENTINEL
                    } else {
                        (s - mu[j]) / sigma[j]
                    }
                })
                .collect(),
            Preprocessor::Isotonic { maps } => v
                .iter()
                .enumerate()
                .map(|(j, &s)| maps[j].predict(s))
                .collect(),
        })
    }

    pub fn apply_all(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        rows.iter().map(|r| self.apply(r)).collect()
    }

    pub fn id(&self) -> &'static str {
        match self {
            Preprocessor::Raw => "raw",
            Preprocessor::ZNorm { .. } => "znorm",
            Preprocessor::Isotonic { .. } => "isotonic",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreprocessorKind {
    Raw,
    ZNorm,
    Isotonic,
}

impl PreprocessorKind {
    pub const ALL: [PreprocessorKind; 3] = [
        PreprocessorKind::Raw,
        PreprocessorKind::ZNorm,
        PreprocessorKind::Isotonic,
    ];

    pub fn fit(self, cal: &[Vec<f64>], labels: &[u8]) -> Result<Preprocessor> {
        match self {
            PreprocessorKind::Raw => Ok(Preprocessor::Raw),
            PreprocessorKind::ZNorm => fit_znorm(cal),
            PreprocessorKind::Isotonic => fit_isotonic(cal, labels),
        }
    }

    pub fn id(self) -> &'static str {
        match self {
            PreprocessorKind::Raw => "raw",
            PreprocessorKind::ZNorm => "znorm",
            PreprocessorKind::Isotonic => "isotonic",
        }
    }
}

impl std::str::FromStr for PreprocessorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PreprocessorKind::ALL
            .into_iter()
            .find(|k| k.id() == s)
            .ok_or_else(|| Error::Config(format!("unknown preprocessor {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    /// Sentinel replacement per feature: highest finite calibration value.
    pub clamp: Vec<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct LinearConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub l2: f64,
    pub tolerance: f64,
}

impl Default for LinearConfig {
    fn default() -> Self {
        LinearConfig {
            learning_rate: 0.1,
            iterations: 2000,
            l2: 1e-4,
            tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum TreeNode {
    Leaf {
        value: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
}

impl TreeNode {
    pub fn predict(&self, v: &[f64]) -> f64 {
        match self {
            TreeNode::Leaf { value } => *value,
            TreeNode::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                if v[*feature] <= *threshold {
                    left.predict(v)
                } else {
                    right.predict(v)
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TreeConfig {
    pub max_depth: usize,
    pub min_leaf: usize,
}

impl Default for TreeConfig {
    fn default() -> Self {
        TreeConfig {
            max_depth: 3,
            min_leaf: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "combiner", rename_all = "snake_case")]
pub enum Combiner {
    Max,
    Min,
    Mean,
    WeightedMean { weights: Vec<f64> },
    Voting { thresholds: Vec<f64> },
    Linear(LinearModel),
    Tree { root: TreeNode },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleModel {
    /// Roster size the model was fitted on.
    pub k: usize,
    pub combiner: Combiner,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombinerKind {
    Max,
    Min,
    Mean,
    WeightedMean,
    Voting,
    Linear,
    Tree,
}

impl CombinerKind {
    pub const ALL: [CombinerKind; 7] = [
        CombinerKind::Max,
        CombinerKind::Min,
        CombinerKind::Mean,
        CombinerKind::WeightedMean,
        CombinerKind::Voting,
        CombinerKind::Linear,
        CombinerKind::Tree,
    ];

    pub fn id(self) -> &'static str {
        match self {
            CombinerKind::Max => "max",
            CombinerKind::Min => "min",
            CombinerKind::Mean => "mean",
            CombinerKind::WeightedMean => "weighted_mean",
            CombinerKind::Voting => "voting",
            CombinerKind::Linear => "linear",
            CombinerKind::Tree => "tree",
        }
    }
}

impl std::str::FromStr for CombinerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CombinerKind::ALL
            .into_iter()
            .find(|k| k.id() == s)
            .ok_or_else(|| Error::Config(format!("unknown combiner {s:?}")))
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn check_labeled_matrix(cal: &[Vec<f64>], labels: &[u8]) -> Result<usize> {
    let k = check_matrix(cal)?;
    if labels.len() != cal.len() {
        return Err(Error::InvalidInput(format!(
            "{} labels for {} score vectors",
            labels.len(),
            cal.len()
        )));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::InvalidInput("label outside {0, 1}".into()));
    }
    Ok(k)
}

fn labeled_column(cal: &[Vec<f64>], labels: &[u8], j: usize) -> Vec<(f64, u8)> {
    column(cal, j).zip(labels.iter().copied()).collect()
}

/// Weights proportional to each method's calibration PRR, clamped at 0.
/// If every method scores non-positively the weights fall back to uniform.
pub fn fit_weighted_mean(cal: &[Vec<f64>], labels: &[u8]) -> Result<EnsembleModel> {
    let k = check_labeled_matrix(cal, labels)?;
    let mut weights: Vec<f64> = (0..k)
        .map(|j| prr(&labeled_column(cal, labels, j)).map(|v| v.max(0.0)))
        .collect::<Result<_>>()?;
    let total: f64 = weights.iter().sum();
    if total > 0.0 {
        for w in &mut weights {
            *w /= total;
        }
    } else {
        weights = vec![1.0 / k as f64; k];
    }
    Ok(EnsembleModel {
        k,
        combiner: Combiner::WeightedMean { weights },
    })
}

/// One threshold per method, calibrated for recall 1/2 of the incorrect
/// class on the calibration set.
pub fn fit_voting(cal: &[Vec<f64>], labels: &[u8]) -> Result<EnsembleModel> {
    let k = check_labeled_matrix(cal, labels)?;
    let thresholds: Vec<f64> = (0..k)
        .map(|j| threshold_at_recall(&labeled_column(cal, labels, j), 0.5))
        .collect::<Result<_>>()?;
    Ok(EnsembleModel {
        k,
        combiner: Combiner::Voting { thresholds },
    })
}

/// Logistic regression by deterministic full-batch gradient descent from a
/// zero init; L2 penalty on the coefficients only. Saturated features are
/// clamped to the per-feature maximum finite calibration value.
pub fn fit_linear(cal: &[Vec<f64>], labels: &[u8], cfg: &LinearConfig) -> Result<EnsembleModel> {
    let k = check_labeled_matrix(cal, labels)?;
    if !labels.contains(&0) || !labels.contains(&1) {
        return Err(Error::InvalidInput(
            "logistic fit needs both labels in calibration".into(),
        ));
    }
    let mut clamp = vec![0.0f64; k];
    for (j, c) in clamp.iter_mut().enumerate() {
        let best = column(cal, j)
            .filter(|v| !is_saturated(*v))
            .fold(f64::NEG_INFINITY, f64::max);
        *c = if best.is_finite() { best } else { 0.0 };
    }
    let rows: Vec<Vec<f64>> = cal
        .iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .map(|(j, &v)| if is_saturated(v) { clamp[j] } else { v })
                .collect()
        })
        .collect();
    let n = rows.len() as f64;
    let mut w = vec![0.0f64; k];
    let mut b = 0.0f64;
    let mut converged = false;
    for _ in 0..cfg.iterations {
        let mut grad_w = vec![0.0f64; k];
        let mut grad_b = 0.0f64;
        for (row, &y) in rows.iter().zip(labels) {
            let z = b + row.iter().zip(&w).map(|(x, wi)| x * wi).sum::<f64>();
            let err = sigmoid(z) - y as f64;
            for (g, x) in grad_w.iter_mut().zip(row) {
                *g += err * x;
            }
            grad_b += err;
        }
        let mut norm_sq = 0.0;
        for (g, wi) in grad_w.iter_mut().zip(&w) {
            *g = *g / n + 2.0 * cfg.l2 * wi;
            norm_sq += *g * *g;
        }
        grad_b /= n;
        norm_sq += grad_b * grad_b;
        if norm_sq.sqrt() < cfg.tolerance {
            converged = true;
            break;
        }
        for (wi, g) in w.iter_mut().zip(&grad_w) {
            *wi -= cfg.learning_rate * g;
        }
        b -= cfg.learning_rate * grad_b;
    }
    Ok(EnsembleModel {
        k,
        combiner: Combiner::Linear(LinearModel {
            coefficients: w,
            intercept: b,
            clamp,
            converged,
        }),
    })
}

fn gini(n1: usize, n: usize) -> f64 {
    let p1 = n1 as f64 / n as f64;
    let p0 = 1.0 - p1;
    1.0 - p0 * p0 - p1 * p1
}

fn grow_tree(rows: &[Vec<f64>], labels: &[u8], idx: &[usize], depth: usize, cfg: &TreeConfig) -> TreeNode {
    let n = idx.len();
    let n1 = idx.iter().filter(|&&i| labels[i] == 1).count();
    let leaf = TreeNode::Leaf {
        value: n1 as f64 / n as f64,
    };
    if depth >= cfg.max_depth || n < 2 * cfg.min_leaf || n1 == 0 || n1 == n {
        return leaf;
    }
    let k = rows[0].len();
    // Best split: lowest weighted Gini, ties to the lowest feature index
    // then the lowest threshold.
    let mut best: Option<(f64, usize, f64)> = None;
    for feature in 0..k {
        let mut values: Vec<f64> = idx.iter().map(|&i| rows[i][feature]).collect();
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        values.dedup();
        for pair in values.windows(2) {
            let threshold = (pair[0] + pair[1]) / 2.0;
            let (mut nl, mut nl1) = (0usize, 0usize);
            for &i in idx {
                if rows[i][feature] <= threshold {
                    nl += 1;
                    nl1 += usize::from(labels[i] == 1);
                }
            }
            let nr = n - nl;
            if nl < cfg.min_leaf || nr < cfg.min_leaf {
                continue;
            }
            let nr1 = n1 - nl1;
            let cost = (nl as f64 * gini(nl1, nl) + nr as f64 * gini(nr1, nr)) / n as f64;
            let candidate = (cost, feature, threshold);
            if best.is_none_or(|b| {
                candidate.partial_cmp(&b) == Some(std::cmp::Ordering::Less)
            }) {
                best = Some(candidate);
            }
        }
    }
    let Some((_, feature, threshold)) = best else {
        return leaf;
    };
    let (left_idx, right_idx): (Vec<usize>, Vec<usize>) =
        idx.iter().partition(|&&i| rows[i][feature] <= threshold);
    TreeNode::Split {
        feature,
        threshold,
        left: Box::new(grow_tree(rows, labels, &left_idx, depth + 1, cfg)),
        right: Box::new(grow_tree(rows, labels, &right_idx, depth + 1, cfg)),
    }
}

/// Greedy Gini-minimizing binary tree; leaves carry incorrectness rates.
pub fn fit_tree(cal: &[Vec<f64>], labels: &[u8], cfg: &TreeConfig) -> Result<EnsembleModel> {
    let k = check_labeled_matrix(cal, labels)?;
    if cfg.min_leaf == 0 {
        return Err(Error::Config("tree min_leaf must be positive".into()));
    }
    let idx: Vec<usize> = (0..cal.len()).collect();
    Ok(EnsembleModel {
        k,
        combiner: Combiner::Tree {
            root: grow_tree(cal, labels, &idx, 0, cfg),
        },
    })
}

pub fn fit_combiner(
    kind: CombinerKind,
    cal: &[Vec<f64>],
    labels: &[u8],
) -> Result<EnsembleModel> {
    let k = check_labeled_matrix(cal, labels)?;
    match kind {
        CombinerKind::Max => Ok(EnsembleModel {
            k,
            combiner: Combiner::Max,
        }),
        CombinerKind::Min => Ok(EnsembleModel {
            k,
            combiner: Combiner::Min,
        }),
        CombinerKind::Mean => Ok(EnsembleModel {
            k,
            combiner: Combiner::Mean,
        }),
        CombinerKind::WeightedMean => fit_weighted_mean(cal, labels),
        CombinerKind::Voting => fit_voting(cal, labels),
        CombinerKind::Linear => fit_linear(cal, labels, &LinearConfig::default()),
        CombinerKind::Tree => fit_tree(cal, labels, &TreeConfig::default()),
    }
}

/// Collapses one score vector to a scalar uncertainty.
pub fn combine(v: &[f64], model: &EnsembleModel) -> Result<f64> {
    if v.len() != model.k {
        return Err(Error::InvalidInput(format!(
            "score vector of length {} against roster of {}",
            v.len(),
            model.k
        )));
    }
    if v.iter().any(|x| x.is_nan()) {
        return Err(Error::InvalidInput("NaN in score vector".into()));
    }
    let finite: Vec<(usize, f64)> = v
        .iter()
        .copied()
        .enumerate()
        .filter(|(_, x)| !is_saturated(*x))
        .collect();
    Ok(match &model.combiner {
        Combiner::Max => {
            if finite.len() < v.len() {
                SATURATED
            } else {
                v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            }
        }
        Combiner::Min => {
            if finite.is_empty() {
                SATURATED
            } else {
                finite.iter().map(|(_, x)| *x).fold(f64::INFINITY, f64::min)
            }
        }
        Combiner::Mean => {
            if finite.is_empty() {
                SATURATED
            } else {
                finite.iter().map(|(_, x)| *x).sum::<f64>() / finite.len() as f64
            }
        }
        Combiner::WeightedMean { weights } => {
            if finite.is_empty() {
                SATURATED
            } else {
                let wsum: f64 = finite.iter().map(|(j, _)| weights[*j]).sum();
                if wsum > 0.0 {
                    finite.iter().map(|(j, x)| weights[*j] * x).sum::<f64>() / wsum
                } else {
                    finite.iter().map(|(_, x)| *x).sum::<f64>() / finite.len() as f64
                }
            }
        }
        Combiner::Voting { thresholds } => v
            .iter()
            .zip(thresholds)
            .filter(|(s, t)| *s > *t)
            .count() as f64,
        Combiner::Linear(m) => {
            let z = m.intercept
                + v.iter()
                    .enumerate()
                    .map(|(j, &x)| {
                        let x = if is_saturated(x) { m.clamp[j] } else { x };
                        m.coefficients[j] * x
                    })
                    .sum::<f64>();
            sigmoid(z)
        }
        Combiner::Tree { root } => root.predict(v),
    })
}

/// Serialized form of a fitted preprocessor plus combiner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub version: u32,
    pub methods: Vec<String>,
    pub preprocessor: Preprocessor,
    pub model: EnsembleModel,
}

pub const MODEL_FILE_VERSION: u32 = 1;

impl ModelFile {
    pub fn new(methods: Vec<String>, preprocessor: Preprocessor, model: EnsembleModel) -> Self {
        ModelFile {
            version: MODEL_FILE_VERSION,
            methods,
            preprocessor,
            model,
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let body = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Backend(format!("model serialization: {e}")))?;
        std::fs::write(path, body + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ModelFile = serde_json::from_str(&body).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        if file.version != MODEL_FILE_VERSION {
            return Err(Error::Config(format!(
                "model file version {} unsupported (expected {MODEL_FILE_VERSION})",
                file.version
            )));
        }
        Ok(file)
    }

    /// Applies preprocessing and combining to one raw score vector.
    pub fn score(&self, v: &[f64]) -> Result<f64> {
        combine(&self.preprocessor.apply(v)?, &self.model)
    }
}

/// Labeled per-method scores for a dataset, one row per trace.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScores {
    pub methods: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
}

impl LabeledScores {
    pub fn validate(&self) -> Result<()> {
        let k = check_labeled_matrix(&self.rows, &self.labels)?;
        if self.methods.len() != k {
            return Err(Error::InvalidInput(format!(
                "{} method names for {k} score columns",
                self.methods.len()
            )));
        }
        Ok(())
    }

    fn column_pairs(&self, j: usize) -> Vec<(f64, u8)> {
        labeled_column(&self.rows, &self.labels, j)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleStudyRow {
    pub preprocessor: String,
    pub combiner: String,
    pub test_prr: f64,
}

impl EnsembleStudyRow {
    pub const CSV_HEADER: &'static str = "preprocessor,combiner,test_prr";

    pub fn csv_line(&self) -> String {
        format!("{},{},{}", self.preprocessor, self.combiner, self.test_prr)
    }
}

/// Test-set PRR for every preprocessor x combiner cell, preceded by the
/// best single method chosen by calibration PRR.
pub fn ensemble_study(cal: &LabeledScores, test: &LabeledScores) -> Result<Vec<EnsembleStudyRow>> {
    cal.validate()?;
    test.validate()?;
    if cal.methods != test.methods {
        return Err(Error::InvalidInput(
            "calibration and test method rosters differ".into(),
        ));
    }
    let mut rows = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    for j in 0..cal.methods.len() {
        let v = prr(&cal.column_pairs(j))?;
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((j, v));
        }
    }
    let (best_j, _) = best.expect("roster is non-empty");
    rows.push(EnsembleStudyRow {
        preprocessor: format!("single:{}", cal.methods[best_j]),
        combiner: "best_single".into(),
        test_prr: prr(&test.column_pairs(best_j))?,
    });
    for pre_kind in PreprocessorKind::ALL {
        let pre = pre_kind.fit(&cal.rows, &cal.labels)?;
        let cal_rows = pre.apply_all(&cal.rows)?;
        let test_rows = pre.apply_all(&test.rows)?;
        for comb_kind in CombinerKind::ALL {
            let model = fit_combiner(comb_kind, &cal_rows, &cal.labels)?;
            let scored: Vec<(f64, u8)> = test_rows
                .iter()
                .zip(&test.labels)
                .map(|(r, &l)| combine(r, &model).map(|s| (s, l)))
                .collect::<Result<_>>()?;
            rows.push(EnsembleStudyRow {
                preprocessor: pre.id().into(),
                combiner: comb_kind.id().into(),
                test_prr: prr(&scored)?,
            });
        }
    }
    Ok(rows)
}
