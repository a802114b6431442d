//! Scorers built on the similarity graph of sampled generations.
//!
//! The graph weights are the symmetric mean of the two judgment directions.
//! Spectral scorers work on one of two Laplacians: the unnormalized D − W
//! (heat kernel) or the normalized I − D^{-1/2} W D^{-1/2} (eigenvalue sums,
//! eccentricity). The normalized spectrum always contains 0 and lies in
//! [0, 2] up to roundoff.

use ndarray::Array2;

use crate::backend::prompts::{render, PromptAssets};
use crate::backend::{Backend, BackendRequest, BackendResponse};
use crate::eigen::{jacobi_eigh, sym_matrix_exp_neg};
use crate::error::{Error, Result};
use crate::similarity::{
    build_similarity_matrix, cluster_sizes, greedy_cluster_indices, SimilarityKind,
    SimilarityMatrix,
};
use crate::trace::UncertaintyTrace;

use super::ScorerConfig;

#[derive(Debug, Clone)]
pub struct SemanticGraph {
    /// Symmetric weights in [0, 1] with unit diagonal.
    pub weights: Array2<f64>,
    /// Row sums of the weights; each is at least 1 because of the diagonal.
    pub degrees: Vec<f64>,
}

impl SemanticGraph {
    pub fn size(&self) -> usize {
        self.degrees.len()
    }

    /// D − W.
    pub fn laplacian_unnorm(&self) -> Array2<f64> {
        let m = self.size();
        let mut l = -&self.weights;
        for i in 0..m {
            l[[i, i]] += self.degrees[i];
        }
        l
    }

    /// I − D^{-1/2} W D^{-1/2}.
    pub fn laplacian_norm(&self) -> Array2<f64> {
        let m = self.size();
        let mut l = Array2::zeros((m, m));
        for i in 0..m {
            for j in 0..m {
                let scaled = self.weights[[i, j]] / (self.degrees[i] * self.degrees[j]).sqrt();
                l[[i, j]] = if i == j { 1.0 - scaled } else { -scaled };
            }
        }
        l
    }
}

pub fn build_graph(sim: &SimilarityMatrix) -> Result<SemanticGraph> {
    sim.validate()?;
    let m = sim.size();
    let mut weights = Array2::zeros((m, m));
    for i in 0..m {
        weights[[i, i]] = 1.0;
        for j in (i + 1)..m {
            let w = sim.mean(i, j);
            weights[[i, j]] = w;
            weights[[j, i]] = w;
        }
    }
    let degrees = (0..m).map(|i| weights.row(i).sum()).collect();
    Ok(SemanticGraph { weights, degrees })
}

/// trace(mI − D) / m²: total missing degree, 0 at perfect consensus.
pub fn degmat(g: &SemanticGraph) -> f64 {
    let m = g.size() as f64;
    g.degrees.iter().map(|d| m - d).sum::<f64>() / (m * m)
}

/// Confidence D_jj / m for generation `j`; the engine stores it negated.
pub fn degmat_c(g: &SemanticGraph, j: usize) -> Result<f64> {
    if j >= g.size() {
        return Err(Error::InvalidInput(format!(
            "generation index {j} out of range for {} generations",
            g.size()
        )));
    }
    Ok(g.degrees[j] / g.size() as f64)
}

/// Σ max(0, 1 − λ) over the normalized Laplacian spectrum, an estimate of
/// the number of semantic clusters.
pub fn sum_eigv(g: &SemanticGraph) -> Result<f64> {
    let (vals, _) = jacobi_eigh(&g.laplacian_norm())?;
    Ok(vals.iter().map(|l| (1.0 - l).max(0.0)).sum())
}

/// Eigenvectors of the normalized Laplacian admitted to the eccentricity
/// stack: eigenvalue below `cut`, smallest first, at most `k` of them.
/// Returns the m×k' column stack after centering each column.
fn centered_eigvec_stack(g: &SemanticGraph, k: usize, cut: f64) -> Result<Array2<f64>> {
    let m = g.size();
    if k > m {
        return Err(Error::InvalidInput(format!(
            "k = {k} exceeds the {m} available eigenvectors"
        )));
    }
    let (vals, vecs) = jacobi_eigh(&g.laplacian_norm())?;
    let admitted = vals.iter().take_while(|&&l| l < cut).count();
    let width = k.min(admitted);
    let mut stack = Array2::zeros((m, width));
    for c in 0..width {
        let mean = (0..m).map(|r| vecs[[r, c]]).sum::<f64>() / m as f64;
        for r in 0..m {
            stack[[r, c]] = vecs[[r, c]] - mean;
        }
    }
    Ok(stack)
}

/// Frobenius norm of the centered eigenvector stack: how far the embedded
/// generations spread around their common center.
pub fn eccentricity(g: &SemanticGraph, k: usize, cut: f64) -> Result<f64> {
    let stack = centered_eigvec_stack(g, k, cut)?;
    Ok(stack.iter().map(|v| v * v).sum::<f64>().sqrt())
}

/// Confidence −‖row j of the centered stack‖; the engine stores it negated,
/// so the recorded score is the distance of generation `j` from the center.
pub fn eccentricity_c(g: &SemanticGraph, j: usize, k: usize, cut: f64) -> Result<f64> {
    if j >= g.size() {
        return Err(Error::InvalidInput(format!(
            "generation index {j} out of range for {} generations",
            g.size()
        )));
    }
    let stack = centered_eigvec_stack(g, k, cut)?;
    Ok(-stack.row(j).iter().map(|v| v * v).sum::<f64>().sqrt())
}

/// Von Neumann entropy of the normalized heat kernel exp(−t·L_unnorm).
/// The kernel is rescaled to unit diagonal blocks and unit trace before the
/// entropy is taken, so the result lives in [0, ln m].
pub fn kle(g: &SemanticGraph, temperature: f64) -> Result<f64> {
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(Error::Config(format!(
            "heat-kernel temperature {temperature} must be positive"
        )));
    }
    let m = g.size();
    let kernel = sym_matrix_exp_neg(&g.laplacian_unnorm(), temperature)?;
    let mut normalized = Array2::zeros((m, m));
    for i in 0..m {
        for j in 0..m {
            let denom = (kernel[[i, i]] * kernel[[j, j]]).sqrt() * m as f64;
            normalized[[i, j]] = kernel[[i, j]] / denom;
        }
    }
    let (vals, _) = jacobi_eigh(&normalized)?;
    let mut entropy = 0.0;
    for l in vals {
        if l < -1e-9 {
            return Err(Error::Numeric(format!(
                "normalized heat kernel has negative eigenvalue {l}"
            )));
        }
        if l > 0.0 {
            entropy -= l * l.ln();
        }
    }
    Ok(entropy)
}

/// Entropy of the cluster-size distribution, natural log.
pub fn cluster_size_entropy(sizes: &[usize]) -> f64 {
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let n = total as f64;
    -sizes
        .iter()
        .filter(|&&s| s > 0)
        .map(|&s| {
            let p = s as f64 / n;
            p * p.ln()
        })
        .sum::<f64>()
}

fn first_text(response: BackendResponse) -> Result<String> {
    response
        .generations
        .into_iter()
        .next()
        .map(|g| g.text)
        .ok_or_else(|| Error::Backend("backend returned no generations".into()))
}

/// Paraphrase the question, answer each paraphrase, cluster the answers by
/// bidirectional entailment, and return the cluster-size entropy. Traces
/// that already carry recorded paraphrase answers are scored offline.
pub fn self_detection(
    trace: &UncertaintyTrace,
    backend: &dyn Backend,
    prompts: &PromptAssets,
    cfg: &ScorerConfig,
) -> Result<f64> {
    let answers: Vec<String> = if trace.paraphrases.is_empty() {
        let mut previous: Vec<String> = Vec::new();
        let mut answers = Vec::with_capacity(cfg.num_paraphrases);
        for _ in 0..cfg.num_paraphrases {
            let listed = if previous.is_empty() {
                "None".to_string()
            } else {
                previous.join("; ")
            };
            let prompt = render(
                &prompts.paraphrase,
                &[
                    ("previous_questions", listed.as_str()),
                    ("question", trace.query.prompt.as_str()),
                ],
            );
            let mut request = BackendRequest::greedy(prompt);
            request.want_logprobs = false;
            let paraphrase = first_text(backend.generate(&request)?)?;
            let mut answer_request =
                BackendRequest::sample(paraphrase.clone(), 1, cfg.paraphrase_answer_temperature);
            answer_request.want_logprobs = false;
            answers.push(first_text(backend.generate(&answer_request)?)?);
            previous.push(paraphrase);
        }
        answers
    } else {
        trace.paraphrases.iter().map(|g| g.text.clone()).collect()
    };
    if answers.is_empty() {
        return Err(Error::InvalidInput(
            "self-detection needs at least one paraphrased answer".into(),
        ));
    }
    let sim = build_similarity_matrix(backend, &answers, SimilarityKind::NliEntailment)?;
    let assignment = greedy_cluster_indices(&sim, cfg.entailment_threshold);
    Ok(cluster_size_entropy(&cluster_sizes(&assignment)))
}
