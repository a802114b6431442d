//! Uncertainty scorers and the engine that dispatches them over a trace.
//!
//! All scorers share one orientation: larger stored value = more uncertain.
//! Methods whose natural output is a confidence are negated when the score
//! is constructed, so downstream metrics never branch on method identity.

pub mod consistency;
pub mod internal;
pub mod sequence;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backend::prompts::PromptAssets;
use crate::backend::Backend;
use crate::error::{Error, Result};
use crate::similarity::{build_similarity_matrix, SimilarityKind, SimilarityMatrix};
use crate::trace::{UncertaintyScore, UncertaintyTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Lns,
    Mars,
    Entropy,
    SemanticEntropy,
    SentSar,
    Sar,
    Lars,
    DegMat,
    DegMatC,
    SumEigV,
    Kle,
    Eccentricity,
    EccentricityC,
    SelfDetection,
    PTrue,
    VerbalizedConfidence,
    AttentionScore,
    Inside,
    Saplma,
}

impl Method {
    pub const ALL: [Method; 19] = [
        Method::Lns,
        Method::Mars,
        Method::Entropy,
        Method::SemanticEntropy,
        Method::SentSar,
        Method::Sar,
        Method::Lars,
        Method::DegMat,
        Method::DegMatC,
        Method::SumEigV,
        Method::Kle,
        Method::Eccentricity,
        Method::EccentricityC,
        Method::SelfDetection,
        Method::PTrue,
        Method::VerbalizedConfidence,
        Method::AttentionScore,
        Method::Inside,
        Method::Saplma,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Method::Lns => "lns",
            Method::Mars => "mars",
            Method::Entropy => "entropy",
            Method::SemanticEntropy => "semantic_entropy",
            Method::SentSar => "sentsar",
            Method::Sar => "sar",
            Method::Lars => "lars",
            Method::DegMat => "degmat",
            Method::DegMatC => "degmat_c",
            Method::SumEigV => "sum_eigv",
            Method::Kle => "kle",
            Method::Eccentricity => "eccentricity",
            Method::EccentricityC => "eccentricity_c",
            Method::SelfDetection => "self_detection",
            Method::PTrue => "p_true",
            Method::VerbalizedConfidence => "verbalized_confidence",
            Method::AttentionScore => "attention_score",
            Method::Inside => "inside",
            Method::Saplma => "saplma",
        }
    }

    /// Whether the method's natural output is a confidence that gets
    /// orientation-flipped into an uncertainty when stored.
    pub fn raw_is_confidence(self) -> bool {
        matches!(
            self,
            Method::Lars
                | Method::Saplma
                | Method::DegMatC
                | Method::EccentricityC
                | Method::PTrue
                | Method::VerbalizedConfidence
        )
    }

    /// Parse a comma-separated method list, e.g. `lns,degmat,kle`.
    pub fn parse_list(s: &str) -> Result<Vec<Method>> {
        s.split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(Method::from_str)
            .collect()
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Method> {
        Method::ALL
            .into_iter()
            .find(|m| m.id() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown method `{s}`")))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerConfig {
    /// Heat-kernel temperature for the kernel entropy score.
    pub kle_temperature: f64,
    /// Covariance regularizer for the hidden-state eigenscore.
    pub inside_alpha: f64,
    /// Eigenvector count for eccentricity; `None` means `min(m, 2)`.
    pub eccentricity_k: Option<usize>,
    /// Eigenvectors with eigenvalue at or above this cut are excluded from
    /// the eccentricity stack.
    pub eccentricity_eigen_cut: f64,
    /// Relevance temperature in the similarity-boosted entropies.
    pub sentsar_temperature: f64,
    /// Bidirectional entailment threshold for clustering and alignment.
    pub entailment_threshold: f64,
    /// Flip the attention score's sign convention.
    pub flip_attention: bool,
    /// Paraphrase count for self-detection when the trace has none recorded.
    pub num_paraphrases: usize,
    /// Temperature used when answering paraphrased questions.
    pub paraphrase_answer_temperature: f64,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        ScorerConfig {
            kle_temperature: 0.3,
            inside_alpha: 1e-3,
            eccentricity_k: None,
            eccentricity_eigen_cut: 0.9,
            sentsar_temperature: 1.0,
            entailment_threshold: 0.5,
            flip_attention: false,
            num_paraphrases: 5,
            paraphrase_answer_temperature: 0.0,
        }
    }
}

/// Report missing prerequisites for the requested methods. Empty result
/// means the trace can be scored.
pub fn validate_trace(trace: &UncertaintyTrace, methods: &[Method]) -> Vec<String> {
    let mut violations = Vec::new();
    let mut push = |m: Method, msg: String| violations.push(format!("{}: {msg}", m.id()));
    for &m in methods {
        match m {
            Method::Lns | Method::Mars => {
                if trace.greedy.tokens.is_empty() {
                    push(m, "greedy token logprobs required".into());
                }
            }
            Method::Entropy | Method::SemanticEntropy | Method::SentSar | Method::Sar => {
                if trace.samples.is_empty() {
                    push(m, "sampled generations required".into());
                } else {
                    for (b, s) in trace.samples.iter().enumerate() {
                        if s.tokens.is_empty() {
                            push(m, format!("sample {b} lacks token logprobs"));
                        }
                    }
                }
            }
            Method::DegMat
            | Method::DegMatC
            | Method::SumEigV
            | Method::Kle
            | Method::Eccentricity
            | Method::EccentricityC => {
                if trace.samples.is_empty() {
                    push(m, "sampled generations required".into());
                }
            }
            Method::Inside => {
                if trace.samples.is_empty() {
                    push(m, "sampled generations required".into());
                } else {
                    let mut dim = None;
                    for (b, s) in trace.samples.iter().enumerate() {
                        match &s.hidden_state {
                            None => push(m, format!("sample {b} lacks hidden_state")),
                            Some(h) => {
                                if let Some(d) = dim {
                                    if h.len() != d {
                                        push(m, format!("sample {b} hidden_state dimension {} differs from {d}", h.len()));
                                    }
                                } else {
                                    dim = Some(h.len());
                                }
                            }
                        }
                    }
                }
            }
            Method::AttentionScore => {
                let empty = trace
                    .greedy
                    .attention_diagonals
                    .as_ref()
                    .is_none_or(|heads| heads.is_empty());
                if empty {
                    push(m, "greedy attention_diagonals required".into());
                }
            }
            Method::Lars | Method::Saplma => {
                if !trace.external_scores.contains_key(m.id()) {
                    push(m, format!("external score `{}` missing", m.id()));
                }
            }
            Method::SelfDetection | Method::PTrue | Method::VerbalizedConfidence => {}
        }
    }
    violations
}

pub struct ScoreEngine<'a> {
    backend: &'a dyn Backend,
    pub config: ScorerConfig,
    pub prompts: PromptAssets,
}

impl<'a> ScoreEngine<'a> {
    pub fn new(backend: &'a dyn Backend) -> Self {
        ScoreEngine {
            backend,
            config: ScorerConfig::default(),
            prompts: PromptAssets::default(),
        }
    }

    pub fn with_config(backend: &'a dyn Backend, config: ScorerConfig, prompts: PromptAssets) -> Self {
        ScoreEngine {
            backend,
            config,
            prompts,
        }
    }

    pub fn backend(&self) -> &dyn Backend {
        self.backend
    }

    /// Score one trace with every requested method. Similarity matrices are
    /// built at most once per trace and shared across methods.
    pub fn score_trace(
        &self,
        trace: &UncertaintyTrace,
        methods: &[Method],
    ) -> Result<Vec<UncertaintyScore>> {
        let violations = validate_trace(trace, methods);
        if !violations.is_empty() {
            return Err(Error::InvalidInput(format!(
                "trace `{}` cannot be scored: {}",
                trace.query.id,
                violations.join("; ")
            )));
        }
        let mut cache = TraceCache::default();
        methods
            .iter()
            .map(|&m| self.score_method(trace, m, &mut cache))
            .collect()
    }

    fn score_method(
        &self,
        trace: &UncertaintyTrace,
        method: Method,
        cache: &mut TraceCache,
    ) -> Result<UncertaintyScore> {
        let cfg = &self.config;
        let id = method.id();
        let value = match method {
            Method::Lns => sequence::lns(&trace.greedy)?,
            Method::Mars => {
                let weights = sequence::token_importance_weights(
                    &trace.query.prompt,
                    &trace.greedy,
                    self.backend,
                )?;
                sequence::weighted_lns(&trace.greedy, &weights)?
            }
            Method::Entropy => sequence::mc_entropy(trace)?,
            Method::SemanticEntropy => {
                let sim = cache.samples_sim(self.backend, trace)?;
                sequence::semantic_entropy(trace, sim, cfg.entailment_threshold)?
            }
            Method::SentSar => {
                let sim = cache.samples_sim(self.backend, trace)?;
                sequence::sentsar(trace, sim, cfg.sentsar_temperature)?
            }
            Method::Sar => {
                let sim = cache.samples_sim(self.backend, trace)?;
                sequence::sar(trace, sim, self.backend, cfg.sentsar_temperature)?
            }
            Method::Lars => sequence::external_score(trace, "lars")?,
            Method::Saplma => sequence::external_score(trace, "saplma")?,
            Method::DegMat => {
                let sim = cache.samples_sim(self.backend, trace)?;
                consistency::degmat(&consistency::build_graph(sim)?)
            }
            Method::DegMatC => {
                let sim = cache.full_sim(self.backend, trace)?;
                consistency::degmat_c(&consistency::build_graph(sim)?, 0)?
            }
            Method::SumEigV => {
                let sim = cache.samples_sim(self.backend, trace)?;
                consistency::sum_eigv(&consistency::build_graph(sim)?)?
            }
            Method::Kle => {
                let sim = cache.samples_sim(self.backend, trace)?;
                consistency::kle(&consistency::build_graph(sim)?, cfg.kle_temperature)?
            }
            Method::Eccentricity => {
                let sim = cache.samples_sim(self.backend, trace)?;
                let graph = consistency::build_graph(sim)?;
                let k = cfg.eccentricity_k.unwrap_or_else(|| graph.size().min(2));
                consistency::eccentricity(&graph, k, cfg.eccentricity_eigen_cut)?
            }
            Method::EccentricityC => {
                let sim = cache.full_sim(self.backend, trace)?;
                let graph = consistency::build_graph(sim)?;
                let k = cfg.eccentricity_k.unwrap_or_else(|| graph.size().min(2));
                consistency::eccentricity_c(&graph, 0, k, cfg.eccentricity_eigen_cut)?
            }
            Method::SelfDetection => {
                consistency::self_detection(trace, self.backend, &self.prompts, cfg)?
            }
            Method::PTrue => sequence::p_true(trace, self.backend, &self.prompts)?,
            Method::VerbalizedConfidence => {
                sequence::verbalized_confidence(trace, self.backend, &self.prompts)?
            }
            Method::AttentionScore => {
                let raw = internal::attention_score_raw(&trace.greedy)?;
                if cfg.flip_attention {
                    -raw
                } else {
                    raw
                }
            }
            Method::Inside => {
                let hidden = internal::HiddenMatrix::from_trace(trace, cfg.inside_alpha)?;
                internal::inside_eigenscore(&hidden)?
            }
        };
        // degmat_c and eccentricity_c emit confidences; everything else above
        // already carries the uncertainty orientation (p_true and verbalized
        // confidence are converted inside their scorers).
        let score = match method {
            Method::DegMatC | Method::EccentricityC | Method::Lars | Method::Saplma => {
                UncertaintyScore::from_confidence(id, value)
            }
            _ => UncertaintyScore::from_uncertainty(id, value),
        };
        Ok(score)
    }
}

/// Per-trace lazily built similarity matrices.
#[derive(Default)]
struct TraceCache {
    samples: Option<SimilarityMatrix>,
    full: Option<SimilarityMatrix>,
}

impl TraceCache {
    /// Matrix over the sampled generations (set-level scorers).
    fn samples_sim(
        &mut self,
        backend: &dyn Backend,
        trace: &UncertaintyTrace,
    ) -> Result<&SimilarityMatrix> {
        if self.samples.is_none() {
            let texts: Vec<String> = trace.samples.iter().map(|g| g.text.clone()).collect();
            self.samples = Some(build_similarity_matrix(
                backend,
                &texts,
                SimilarityKind::NliEntailment,
            )?);
        }
        Ok(self.samples.as_ref().unwrap())
    }

    /// Matrix over [greedy] + samples; the greedy response sits at index 0
    /// so per-generation scorers can target it.
    fn full_sim(
        &mut self,
        backend: &dyn Backend,
        trace: &UncertaintyTrace,
    ) -> Result<&SimilarityMatrix> {
        if self.full.is_none() {
            let mut texts = Vec::with_capacity(trace.samples.len() + 1);
            texts.push(trace.greedy.text.clone());
            texts.extend(trace.samples.iter().map(|g| g.text.clone()));
            self.full = Some(build_similarity_matrix(
                backend,
                &texts,
                SimilarityKind::NliEntailment,
            )?);
        }
        Ok(self.full.as_ref().unwrap())
    }
}
