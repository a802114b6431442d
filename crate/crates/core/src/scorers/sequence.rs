//! Probability-based and prompted self-check scorers.
//!
//! Sequence probabilities are length-normalized throughout: the probability
//! of a generation is exp(mean token logprob). Cluster probabilities in
//! semantic entropy are additionally renormalized to sum 1 over the sample
//! set; the similarity-boosted entropies work on the raw length-normalized
//! values so that a single sample reduces to its negative log-probability.

use crate::backend::prompts::{render, PromptAssets};
use crate::backend::{Backend, BackendRequest};
use crate::error::{Error, Result};
use crate::similarity::{greedy_cluster_indices, SimilarityMatrix};
use crate::trace::{Generation, UncertaintyTrace, SATURATED};

/// Negative mean token logprob of one generation.
pub fn lns(g: &Generation) -> Result<f64> {
    Ok(-length_normalized_logprob(g)?)
}

/// Mean token logprob, the log of the length-normalized sequence probability.
pub fn length_normalized_logprob(g: &Generation) -> Result<f64> {
    if g.tokens.is_empty() {
        return Err(Error::InvalidInput(
            "generation has no token logprobs".into(),
        ));
    }
    let sum: f64 = g.tokens.iter().map(|t| t.logprob).sum();
    Ok(sum / g.tokens.len() as f64)
}

/// Per-token weights for the weighted probability scorers.
#[derive(Debug, Clone)]
pub struct TokenWeighting {
    pub weights: Vec<f64>,
}

impl TokenWeighting {
    /// Accept weights as given; only nonnegativity is enforced.
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidInput(
                "token weights must be finite and nonnegative".into(),
            ));
        }
        Ok(TokenWeighting { weights })
    }

    pub fn uniform(len: usize) -> Self {
        TokenWeighting {
            weights: vec![1.0; len],
        }
    }

    /// Rescale raw importances so they sum to the sequence length; an
    /// all-zero raw vector falls back to uniform weights.
    pub fn from_raw(raw: &[f64]) -> Result<Self> {
        let w = TokenWeighting::new(raw.to_vec())?;
        let total: f64 = w.weights.iter().sum();
        if total == 0.0 {
            return Ok(TokenWeighting::uniform(raw.len()));
        }
        let scale = raw.len() as f64 / total;
        Ok(TokenWeighting {
            weights: w.weights.into_iter().map(|x| x * scale).collect(),
        })
    }
}

/// Negative weighted mean token logprob.
pub fn weighted_lns(g: &Generation, w: &TokenWeighting) -> Result<f64> {
    Ok(-weighted_logprob(g, w)?)
}

fn weighted_logprob(g: &Generation, w: &TokenWeighting) -> Result<f64> {
    if g.tokens.is_empty() {
        return Err(Error::InvalidInput(
            "generation has no token logprobs".into(),
        ));
    }
    if w.weights.len() != g.tokens.len() {
        return Err(Error::InvalidInput(format!(
            "{} weights for {} tokens",
            w.weights.len(),
            g.tokens.len()
        )));
    }
    let sum: f64 = g
        .tokens
        .iter()
        .zip(&w.weights)
        .map(|(t, w)| w * t.logprob)
        .sum();
    Ok(sum / g.tokens.len() as f64)
}

/// Importance of each token, measured by how much the response stops
/// matching itself when the token is removed: weight_l is proportional to
/// 1 − sim(query + response-without-token-l, query + response), then
/// rescaled to sum to the token count. This removal heuristic approximates
/// the relevance weighting of the cited token-weighted scorers.
pub fn token_importance_weights(
    query: &str,
    g: &Generation,
    backend: &dyn Backend,
) -> Result<TokenWeighting> {
    if g.tokens.is_empty() {
        return Err(Error::InvalidInput(
            "generation has no tokens to weight".into(),
        ));
    }
    let full: String = g.tokens.iter().map(|t| t.text.as_str()).collect();
    let with_query = |body: &str| {
        if query.is_empty() {
            body.trim_start().to_string()
        } else {
            format!("{query} {}", body.trim_start())
        }
    };
    let reference = with_query(&full);
    let mut raw = Vec::with_capacity(g.tokens.len());
    for skip in 0..g.tokens.len() {
        let without: String = g
            .tokens
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != skip)
            .map(|(_, t)| t.text.as_str())
            .collect();
        let judgment = backend.similarity(&with_query(&without), &reference)?;
        judgment.validate()?;
        raw.push(1.0 - judgment.mean());
    }
    TokenWeighting::from_raw(&raw)
}

/// Length-normalized sequence probability of each sample.
pub fn sequence_probs(trace: &UncertaintyTrace) -> Result<Vec<f64>> {
    if trace.samples.is_empty() {
        return Err(Error::InvalidInput("no sampled generations".into()));
    }
    trace
        .samples
        .iter()
        .enumerate()
        .map(|(b, s)| {
            length_normalized_logprob(s)
                .map(f64::exp)
                .map_err(|_| Error::InvalidInput(format!("sample {b} lacks token logprobs")))
        })
        .collect()
}

/// Monte Carlo entropy: mean negative length-normalized log-probability
/// over the sampled generations.
pub fn mc_entropy(trace: &UncertaintyTrace) -> Result<f64> {
    let probs = sequence_probs(trace)?;
    Ok(mc_entropy_from_probs(&probs))
}

fn mc_entropy_from_probs(probs: &[f64]) -> f64 {
    -probs.iter().map(|p| p.ln()).sum::<f64>() / probs.len() as f64
}

#[derive(Debug, Clone)]
pub struct SemanticClusters {
    /// Cluster id per sample, dense, ordered by cluster creation.
    pub assignment: Vec<usize>,
    /// Probability mass per cluster; sums to 1.
    pub cluster_probs: Vec<f64>,
}

/// Greedy entailment clustering of the samples. Cluster probability is the
/// sum of member sequence probabilities, renormalized over the sample set.
pub fn semantic_clusters(
    trace: &UncertaintyTrace,
    sim: &SimilarityMatrix,
    threshold: f64,
) -> Result<SemanticClusters> {
    let probs = sequence_probs(trace)?;
    if sim.size() != probs.len() {
        return Err(Error::InvalidInput(format!(
            "similarity matrix of size {} for {} samples",
            sim.size(),
            probs.len()
        )));
    }
    let assignment = greedy_cluster_indices(sim, threshold);
    let clusters = assignment.iter().copied().max().map_or(0, |m| m + 1);
    let total: f64 = probs.iter().sum();
    let mut cluster_probs = vec![0.0; clusters];
    for (b, &c) in assignment.iter().enumerate() {
        cluster_probs[c] += probs[b] / total;
    }
    Ok(SemanticClusters {
        assignment,
        cluster_probs,
    })
}

/// Mean negative log cluster probability.
pub fn semantic_entropy(
    trace: &UncertaintyTrace,
    sim: &SimilarityMatrix,
    threshold: f64,
) -> Result<f64> {
    let clusters = semantic_clusters(trace, sim, threshold)?;
    let k = clusters.cluster_probs.len() as f64;
    Ok(-clusters.cluster_probs.iter().map(|p| p.ln()).sum::<f64>() / k)
}

/// Similarity-boosted entropy over given sequence probabilities: each
/// probability is raised by the relevance-weighted mass of the other
/// samples before taking the mean negative log.
pub fn sentsar_from_probs(
    probs: &[f64],
    sim: &SimilarityMatrix,
    temperature: f64,
) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::InvalidInput("no probabilities".into()));
    }
    if sim.size() != probs.len() {
        return Err(Error::InvalidInput(format!(
            "similarity matrix of size {} for {} probabilities",
            sim.size(),
            probs.len()
        )));
    }
    if temperature <= 0.0 {
        return Err(Error::Config("relevance temperature must be positive".into()));
    }
    let mut total = 0.0;
    for b in 0..probs.len() {
        let boost: f64 = (0..probs.len())
            .filter(|&j| j != b)
            .map(|j| sim.mean(b, j) * probs[j])
            .sum();
        let boosted = probs[b] + boost / temperature;
        if boosted <= 0.0 {
            return Err(Error::Numeric("boosted probability is nonpositive".into()));
        }
        total += boosted.ln();
    }
    Ok(-total / probs.len() as f64)
}

/// Sentence-level similarity-boosted entropy over the samples.
pub fn sentsar(trace: &UncertaintyTrace, sim: &SimilarityMatrix, temperature: f64) -> Result<f64> {
    let probs = sequence_probs(trace)?;
    sentsar_from_probs(&probs, sim, temperature)
}

/// Token- and sentence-weighted entropy: sequence probabilities are
/// recomputed with importance-weighted token logprobs, then boosted like
/// the sentence-level score.
pub fn sar(
    trace: &UncertaintyTrace,
    sim: &SimilarityMatrix,
    backend: &dyn Backend,
    temperature: f64,
) -> Result<f64> {
    if trace.samples.is_empty() {
        return Err(Error::InvalidInput("no sampled generations".into()));
    }
    let mut probs = Vec::with_capacity(trace.samples.len());
    for sample in &trace.samples {
        let weights = token_importance_weights(&trace.query.prompt, sample, backend)?;
        probs.push((-weighted_lns(sample, &weights)?).exp());
    }
    sentsar_from_probs(&probs, sim, temperature)
}

/// Normalize a reply token down to a bare lowercase word.
fn normalize_token(text: &str) -> String {
    text.trim()
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase()
}

/// Ask the model whether the greedy answer is true, and return the negative
/// log-probability it assigns to the true verdict. A "false" verdict token
/// contributes its complement probability; certainty in "false" saturates.
pub fn p_true(
    trace: &UncertaintyTrace,
    backend: &dyn Backend,
    prompts: &PromptAssets,
) -> Result<f64> {
    let ideas: Vec<&str> = trace.samples.iter().map(|s| s.text.as_str()).collect();
    let prompt = render(
        &prompts.p_true,
        &[
            ("question", trace.query.prompt.as_str()),
            ("sampled_generations", &ideas.join("\n")),
            ("generated_text", trace.greedy.text.as_str()),
        ],
    );
    let mut request = BackendRequest::greedy(prompt);
    request.max_tokens = 16;
    let response = backend.generate(&request)?;
    let generation = response
        .generations
        .first()
        .ok_or_else(|| Error::ReplyParse("empty verdict response".into()))?;
    for token in &generation.tokens {
        match normalize_token(&token.text).as_str() {
            "true" => return Ok(-token.logprob),
            "false" => {
                let p_true = 1.0 - token.logprob.exp();
                return if p_true <= 0.0 {
                    Ok(SATURATED)
                } else {
                    Ok(-p_true.ln())
                };
            }
            _ => continue,
        }
    }
    Err(Error::ReplyParse(format!(
        "verdict `{}` contains neither `true` nor `false`",
        generation.text
    )))
}

fn parse_confidence_reply(text: &str) -> Option<f64> {
    let digits: String = text
        .chars()
        .skip_while(|c| !c.is_ascii_digit())
        .take_while(|c| c.is_ascii_digit())
        .collect();
    let value: u32 = digits.parse().ok()?;
    if value > 100 {
        return None;
    }
    Some(value as f64)
}

/// Ask the model for a 0..100 confidence in its own answer; stored as
/// 1 − score/100 so larger means more uncertain. An unparseable reply gets
/// one retry with a firmer instruction appended before giving up.
pub fn verbalized_confidence(
    trace: &UncertaintyTrace,
    backend: &dyn Backend,
    prompts: &PromptAssets,
) -> Result<f64> {
    let base = render(
        &prompts.verbalized_confidence,
        &[
            ("question", trace.query.prompt.as_str()),
            ("generated_text", trace.greedy.text.as_str()),
        ],
    );
    let mut last_reply = String::new();
    for attempt in 0..2 {
        let prompt = if attempt == 0 {
            base.clone()
        } else {
            format!("{base}\nAnswer with a single integer between 0 and 100.")
        };
        let mut request = BackendRequest::greedy(prompt);
        request.max_tokens = 8;
        request.want_logprobs = false;
        let response = backend.generate(&request)?;
        let text = response
            .generations
            .first()
            .map(|g| g.text.clone())
            .unwrap_or_default();
        if let Some(score) = parse_confidence_reply(&text) {
            return Ok(1.0 - score / 100.0);
        }
        last_reply = text;
    }
    Err(Error::ReplyParse(format!(
        "no confidence score in `{last_reply}` after retry"
    )))
}

/// Raw externally supplied confidence for the given method id.
pub fn external_score(trace: &UncertaintyTrace, method_id: &str) -> Result<f64> {
    trace
        .external_scores
        .get(method_id)
        .copied()
        .ok_or_else(|| {
            Error::InvalidInput(format!(
                "trace `{}` carries no external score `{method_id}`",
                trace.query.id
            ))
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::mock::{MockBackend, ScriptRule};
    use crate::backend::{BackendResponse, SimilarityJudgment};
    use crate::similarity::{build_similarity_matrix, SimilarityKind};
    use crate::trace::{Query, SamplingParams, TokenEvent};
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn gen(text: &str, lps: &[f64]) -> Generation {
        let words: Vec<String> = if text.is_empty() {
            (0..lps.len()).map(|i| format!("w{i}")).collect()
        } else {
            text.split_whitespace()
                .map(|w| format!(" {w}"))
                .collect()
        };
        Generation {
            text: text.to_string(),
            tokens: lps
                .iter()
                .enumerate()
                .map(|(i, &lp)| TokenEvent {
                    text: words.get(i).cloned().unwrap_or_else(|| format!(" w{i}")),
                    logprob: lp,
                })
                .collect(),
            hidden_state: None,
            attention_diagonals: None,
        }
    }

    fn trace_with_samples(samples: Vec<Generation>) -> UncertaintyTrace {
        let b = samples.len();
        UncertaintyTrace {
            query: Query {
                id: "q".into(),
                prompt: "What is the capital of France?".into(),
                ground_truths: vec!["Paris".into()],
                dataset_tag: "toy".into(),
                transform_tag: None,
            },
            greedy: gen("Paris", &[-0.1]),
            samples,
            sampling: SamplingParams {
                temperature: 1.0,
                num_samples: b,
            },
            paraphrases: vec![],
            external_scores: BTreeMap::new(),
            extra: BTreeMap::new(),
        }
    }

    fn uniform_sim(m: usize, off_diag: f64) -> SimilarityMatrix {
        let mut forward = Array2::from_elem((m, m), off_diag);
        for i in 0..m {
            forward[[i, i]] = 1.0;
        }
        SimilarityMatrix {
            kind: SimilarityKind::ContinuousSimilarity,
            backward: forward.clone(),
            forward,
        }
    }

    #[test]
    fn lns_matches_hand_values() {
        assert_eq!(lns(&gen("a", &[-1.0])).unwrap(), 1.0);
        assert_eq!(lns(&gen("a b", &[-1.0, -3.0])).unwrap(), 2.0);
        assert_eq!(lns(&gen("a b c", &[0.0, 0.0, 0.0])).unwrap(), 0.0);
        assert!(lns(&Generation::from_text("x")).is_err());
    }

    #[test]
    fn lns_depends_only_on_logprob_multiset() {
        let a = gen("x y z", &[-0.5, -1.5, -2.5]);
        let b = gen("z y x", &[-2.5, -0.5, -1.5]);
        assert_eq!(lns(&a).unwrap(), lns(&b).unwrap());
    }

    #[test]
    fn weighted_lns_reduces_to_lns_with_uniform_weights() {
        let g = gen("a b c", &[-0.3, -1.7, -2.2]);
        let w = TokenWeighting::uniform(3);
        assert!((weighted_lns(&g, &w).unwrap() - lns(&g).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn weighted_lns_hand_case() {
        let g = gen("a b", &[-1.0, -5.0]);
        let w = TokenWeighting::new(vec![2.0, 0.0]).unwrap();
        assert_eq!(weighted_lns(&g, &w).unwrap(), 1.0);
    }

    #[test]
    fn weighted_lns_zero_weights_give_zero() {
        let g = gen("a b", &[-1.0, -5.0]);
        let w = TokenWeighting::new(vec![0.0, 0.0]).unwrap();
        assert_eq!(weighted_lns(&g, &w).unwrap(), 0.0);
    }

    #[test]
    fn weighted_lns_rejects_length_mismatch_and_negative_weights() {
        let g = gen("a b", &[-1.0, -5.0]);
        assert!(weighted_lns(&g, &TokenWeighting::uniform(3)).is_err());
        assert!(TokenWeighting::new(vec![1.0, -0.1]).is_err());
    }

    #[test]
    fn from_raw_normalizes_to_token_count() {
        let w = TokenWeighting::from_raw(&[0.2, 0.6]).unwrap();
        assert_abs_diff_eq!(w.weights.iter().sum::<f64>(), 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(w.weights[1] / w.weights[0], 3.0, epsilon = 1e-12);
        let z = TokenWeighting::from_raw(&[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(z.weights, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn importance_weight_one_token_is_one() {
        let backend = MockBackend::new(5);
        let g = gen("Paris", &[-0.4]);
        let w = token_importance_weights("capital?", &g, &backend).unwrap();
        assert_eq!(w.weights, vec![1.0]);
    }

    #[test]
    fn removing_redundant_token_gets_zero_weight() {
        // Token "b" appears twice; removing one leaves the word set intact,
        // so the mock's Jaccard similarity stays 1 and the raw weight is 0.
        let backend = MockBackend::new(5);
        let g = gen("a b b", &[-0.5, -0.5, -0.5]);
        let w = token_importance_weights("", &g, &backend).unwrap();
        assert_eq!(w.weights[1], 0.0);
        assert_eq!(w.weights[2], 0.0);
        assert!(w.weights[0] > 0.0);
        assert_abs_diff_eq!(w.weights.iter().sum::<f64>(), 3.0, epsilon = 1e-12);
    }

    /// Similarity is a fixed constant for distinct texts; removals all hurt
    /// equally, so importance must come out uniform.
    struct ConstantSimBackend(f64);

    impl Backend for ConstantSimBackend {
        fn name(&self) -> &str {
            "const-sim"
        }
        fn generate(&self, _r: &BackendRequest) -> Result<BackendResponse> {
            unimplemented!()
        }
        fn similarity(&self, a: &str, b: &str) -> Result<SimilarityJudgment> {
            let s = if a == b { 1.0 } else { self.0 };
            Ok(SimilarityJudgment {
                forward: s,
                backward: s,
            })
        }
        fn judge_correctness(&self, _q: &str, _a: &str, _g: &[String]) -> Result<bool> {
            unimplemented!()
        }
        fn force_logprobs(&self, _p: &str, _t: &str) -> Result<Generation> {
            unimplemented!()
        }
    }

    #[test]
    fn equally_damaging_removals_give_uniform_weights() {
        let backend = ConstantSimBackend(0.3);
        let g = gen("a b c d", &[-1.0, -2.0, -3.0, -4.0]);
        let w = token_importance_weights("q", &g, &backend).unwrap();
        for &x in &w.weights {
            assert_abs_diff_eq!(x, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn mc_entropy_hand_values() {
        let t = trace_with_samples(vec![gen("a", &[-2.0])]);
        assert_eq!(mc_entropy(&t).unwrap(), 2.0);
        let t = trace_with_samples(vec![gen("a", &[-1.0]), gen("b", &[-3.0])]);
        assert_eq!(mc_entropy(&t).unwrap(), 2.0);
        let t = trace_with_samples(vec![gen("a", &[-0.5]), gen("a", &[-0.5])]);
        assert_eq!(mc_entropy(&t).unwrap(), 0.5);
    }

    #[test]
    fn mc_entropy_requires_sample_logprobs() {
        let mut t = trace_with_samples(vec![gen("a", &[-1.0])]);
        t.samples[0].tokens.clear();
        let err = mc_entropy(&t).unwrap_err();
        assert!(err.to_string().contains("sample 0"));
    }

    #[test]
    fn one_similarity_cluster_has_probability_one() {
        let t = trace_with_samples(vec![gen("a", &[-1.0]), gen("a", &[-1.0])]);
        let clusters = semantic_clusters(&t, &uniform_sim(2, 1.0), 0.5).unwrap();
        assert_eq!(clusters.assignment, vec![0, 0]);
        assert_eq!(clusters.cluster_probs, vec![1.0]);
    }

    #[test]
    fn identity_similarity_gives_singleton_clusters() {
        let t = trace_with_samples(vec![
            gen("a", &[-1.0]),
            gen("b", &[-1.0]),
            gen("c", &[-1.0]),
        ]);
        let clusters = semantic_clusters(&t, &uniform_sim(3, 0.0), 0.5).unwrap();
        assert_eq!(clusters.assignment, vec![0, 1, 2]);
        for p in clusters.cluster_probs {
            assert_abs_diff_eq!(p, 1.0 / 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn equal_prob_clusters_split_two_to_one() {
        // First two samples cluster together, third is alone.
        let mut sim = uniform_sim(3, 0.0);
        sim.forward[[0, 1]] = 1.0;
        sim.backward[[0, 1]] = 1.0;
        sim.forward[[1, 0]] = 1.0;
        sim.backward[[1, 0]] = 1.0;
        let t = trace_with_samples(vec![
            gen("a", &[-1.0]),
            gen("a", &[-1.0]),
            gen("b", &[-1.0]),
        ]);
        let clusters = semantic_clusters(&t, &sim, 0.5).unwrap();
        assert_abs_diff_eq!(clusters.cluster_probs[0], 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(clusters.cluster_probs[1], 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn semantic_entropy_frozen_values() {
        let t = trace_with_samples(vec![gen("a", &[-1.0]), gen("a", &[-1.0])]);
        assert_abs_diff_eq!(
            semantic_entropy(&t, &uniform_sim(2, 1.0), 0.5).unwrap(),
            0.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            semantic_entropy(&t, &uniform_sim(2, 0.0), 0.5).unwrap(),
            2f64.ln(),
            epsilon = 1e-12
        );
        let t3 = trace_with_samples(vec![
            gen("a", &[-1.0]),
            gen("a", &[-1.0]),
            gen("b", &[-1.0]),
        ]);
        let mut sim = uniform_sim(3, 0.0);
        for (i, j) in [(0, 1), (1, 0)] {
            sim.forward[[i, j]] = 1.0;
            sim.backward[[i, j]] = 1.0;
        }
        let expected = -((2.0f64 / 3.0).ln() + (1.0f64 / 3.0).ln()) / 2.0;
        assert_abs_diff_eq!(expected, 0.7520, epsilon = 1e-4);
        assert_abs_diff_eq!(
            semantic_entropy(&t3, &sim, 0.5).unwrap(),
            expected,
            epsilon = 1e-12
        );
    }

    #[test]
    fn sentsar_with_zero_similarity_is_mc_entropy() {
        let t = trace_with_samples(vec![
            gen("a", &[-0.4]),
            gen("b", &[-1.1]),
            gen("c", &[-2.3]),
        ]);
        let s = sentsar(&t, &uniform_sim(3, 0.0), 1.0).unwrap();
        assert_abs_diff_eq!(s, mc_entropy(&t).unwrap(), epsilon = 1e-9);
    }

    #[test]
    fn sentsar_single_sample_is_its_lns() {
        let t = trace_with_samples(vec![gen("a b", &[-0.8, -1.2])]);
        let s = sentsar(&t, &uniform_sim(1, 0.0), 1.0).unwrap();
        assert_abs_diff_eq!(s, lns(&t.samples[0]).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn full_agreement_minimizes_sentsar_over_similarity_patterns() {
        // Brute force over off-diagonal similarity grids for 3 samples with
        // fixed probabilities: the all-ones pattern must give the smallest
        // score because each boost term grows with similarity.
        let probs = [0.5, 0.3, 0.1];
        let reference = sentsar_from_probs(&probs, &uniform_sim(3, 1.0), 1.0).unwrap();
        let grid = [0.0, 0.25, 0.5, 0.75, 1.0];
        for &a in &grid {
            for &b in &grid {
                for &c in &grid {
                    let mut sim = uniform_sim(3, 0.0);
                    for (i, j, v) in [(0, 1, a), (0, 2, b), (1, 2, c)] {
                        sim.forward[[i, j]] = v;
                        sim.backward[[i, j]] = v;
                        sim.forward[[j, i]] = v;
                        sim.backward[[j, i]] = v;
                    }
                    let s = sentsar_from_probs(&probs, &sim, 1.0).unwrap();
                    assert!(s >= reference - 1e-12);
                }
            }
        }
    }

    #[test]
    fn sar_single_sample_with_uniform_weights_is_lns() {
        let backend = ConstantSimBackend(0.3);
        let t = trace_with_samples(vec![gen("x y", &[-0.7, -1.9])]);
        let s = sar(&t, &uniform_sim(1, 0.0), &backend, 1.0).unwrap();
        assert_abs_diff_eq!(s, lns(&t.samples[0]).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn sar_reduces_to_mc_entropy_under_double_reduction() {
        // Zero cross-similarity keeps weights uniform and kills the boost.
        let backend = ConstantSimBackend(0.0);
        let t = trace_with_samples(vec![gen("x y", &[-0.7, -1.9]), gen("u v", &[-0.2, -0.6])]);
        let s = sar(&t, &uniform_sim(2, 0.0), &backend, 1.0).unwrap();
        assert_abs_diff_eq!(s, mc_entropy(&t).unwrap(), epsilon = 1e-9);
    }

    #[test]
    fn sar_composes_from_weights_and_boost() {
        let backend = MockBackend::new(9);
        let t = trace_with_samples(vec![
            gen("red apple", &[-0.5, -1.5]),
            gen("green pear", &[-0.9, -0.3]),
        ]);
        let texts: Vec<String> = t.samples.iter().map(|s| s.text.clone()).collect();
        let sim =
            build_similarity_matrix(&backend, &texts, SimilarityKind::ContinuousSimilarity)
                .unwrap();
        let mut probs = Vec::new();
        for s in &t.samples {
            let w = token_importance_weights(&t.query.prompt, s, &backend).unwrap();
            probs.push((-weighted_lns(s, &w).unwrap()).exp());
        }
        let expected = sentsar_from_probs(&probs, &sim, 1.0).unwrap();
        let actual = sar(&t, &sim, &backend, 1.0).unwrap();
        assert_eq!(actual.to_bits(), expected.to_bits());
    }

    fn verdict_backend(reply: &str, logprob: f64) -> MockBackend {
        MockBackend::new(1).with_script(
            ScriptRule::new("question-answer evaluator", &[reply]).with_logprob(logprob),
        )
    }

    #[test]
    fn p_true_certain_true_is_zero() {
        let t = trace_with_samples(vec![gen("Paris", &[-0.1])]);
        let backend = verdict_backend("The generated answer is true", 0.0);
        assert_eq!(p_true(&t, &backend, &PromptAssets::default()).unwrap(), 0.0);
    }

    #[test]
    fn p_true_reads_true_token_logprob() {
        let t = trace_with_samples(vec![gen("Paris", &[-0.1])]);
        let backend = verdict_backend("true", -2.0);
        assert_abs_diff_eq!(
            p_true(&t, &backend, &PromptAssets::default()).unwrap(),
            2.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn p_true_false_token_uses_complement() {
        let t = trace_with_samples(vec![gen("Paris", &[-0.1])]);
        let half = 0.5f64.ln();
        let backend = verdict_backend("false", half);
        assert_abs_diff_eq!(
            p_true(&t, &backend, &PromptAssets::default()).unwrap(),
            -(0.5f64.ln()),
            epsilon = 1e-12
        );
    }

    #[test]
    fn p_true_certain_false_saturates() {
        let t = trace_with_samples(vec![gen("Paris", &[-0.1])]);
        let backend = verdict_backend("false", 0.0);
        assert_eq!(
            p_true(&t, &backend, &PromptAssets::default()).unwrap(),
            SATURATED
        );
    }

    #[test]
    fn p_true_without_verdict_token_errors() {
        let t = trace_with_samples(vec![gen("Paris", &[-0.1])]);
        let backend = verdict_backend("cannot say", -0.5);
        assert!(p_true(&t, &backend, &PromptAssets::default()).is_err());
    }

    fn confidence_backend(replies: &[&str]) -> MockBackend {
        MockBackend::new(1).with_script(ScriptRule::new("confidence estimator", replies))
    }

    #[test]
    fn verbalized_confidence_maps_linearly() {
        let t = trace_with_samples(vec![gen("Paris", &[-0.1])]);
        let assets = PromptAssets::default();
        assert_eq!(
            verbalized_confidence(&t, &confidence_backend(&["100"]), &assets).unwrap(),
            0.0
        );
        assert_eq!(
            verbalized_confidence(&t, &confidence_backend(&["0"]), &assets).unwrap(),
            1.0
        );
        assert_abs_diff_eq!(
            verbalized_confidence(&t, &confidence_backend(&["85"]), &assets).unwrap(),
            0.15,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            verbalized_confidence(&t, &confidence_backend(&["score: 40."]), &assets).unwrap(),
            0.6,
            epsilon = 1e-12
        );
    }

    /// First attempt sees the plain template; the retry prompt carries the
    /// appended instruction, so it can be scripted separately.
    fn retry_backend(first: &str, retry: &str) -> MockBackend {
        let mut b = MockBackend::new(1);
        b.push_script(ScriptRule::new("Answer with a single integer", &[retry]));
        b.push_script(ScriptRule::new("confidence estimator", &[first]));
        b
    }

    #[test]
    fn verbalized_confidence_retries_once() {
        let t = trace_with_samples(vec![gen("Paris", &[-0.1])]);
        let assets = PromptAssets::default();
        let backend = retry_backend("no idea", "70");
        assert_abs_diff_eq!(
            verbalized_confidence(&t, &backend, &assets).unwrap(),
            0.3,
            epsilon = 1e-12
        );
        let backend = retry_backend("no idea", "not telling");
        assert!(verbalized_confidence(&t, &backend, &assets).is_err());
        // 150 is out of range and must not parse as 15 or 50.
        let backend = retry_backend("150", "150");
        assert!(verbalized_confidence(&t, &backend, &assets).is_err());
    }

    #[test]
    fn external_score_lookup() {
        let mut t = trace_with_samples(vec![gen("Paris", &[-0.1])]);
        t.external_scores.insert("lars".into(), 0.9);
        assert_eq!(external_score(&t, "lars").unwrap(), 0.9);
        assert!(external_score(&t, "saplma").is_err());
    }

    proptest! {
        #[test]
        fn semantic_entropy_is_nonnegative_and_zero_iff_one_cluster(
            lps in proptest::collection::vec(-5.0f64..0.0, 2..6),
            joined in any::<bool>(),
        ) {
            let samples: Vec<Generation> =
                lps.iter().map(|&lp| gen("s", &[lp])).collect();
            let m = samples.len();
            let t = trace_with_samples(samples);
            let sim = uniform_sim(m, if joined { 1.0 } else { 0.0 });
            let se = semantic_entropy(&t, &sim, 0.5).unwrap();
            prop_assert!(se >= -1e-12);
            if joined {
                prop_assert!(se.abs() < 1e-12);
            } else {
                prop_assert!(se > 1e-9);
            }
        }

        #[test]
        fn sentsar_never_below_full_agreement(
            lps in proptest::collection::vec(-4.0f64..-0.01, 3),
            off in 0.0f64..1.0,
        ) {
            let t = trace_with_samples(lps.iter().map(|&lp| gen("s", &[lp])).collect());
            let loose = sentsar(&t, &uniform_sim(3, off), 1.0).unwrap();
            let tight = sentsar(&t, &uniform_sim(3, 1.0), 1.0).unwrap();
            prop_assert!(tight <= loose + 1e-12);
        }
    }
}
