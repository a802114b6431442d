//! Backend abstraction: text generation, pairwise similarity judgments,
//! correctness judging, and teacher-forced logprob evaluation.
//!
//! Three implementations ship with the crate: an OpenAI-compatible HTTP
//! client, a deterministic mock (a pure function of request and seed), and a
//! record/replay wrapper that makes any run reproducible offline.

pub mod http;
pub mod mock;
pub mod prompts;
pub mod replay;

pub use http::{HttpBackend, HttpBackendConfig};
pub use mock::{MockBackend, ScriptRule};
pub use prompts::PromptAssets;
pub use replay::{ReplayBackend, ReplayMode};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{Generation, Query, SamplingParams, UncertaintyTrace};

/// A single generation request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendRequest {
    pub prompt: String,
    /// Number of completions to draw. Must be >= 1.
    pub n: usize,
    /// Sampling temperature, >= 0. Zero means deterministic decoding.
    pub temperature: f64,
    pub max_tokens: usize,
    pub want_logprobs: bool,
    #[serde(default)]
    pub want_hidden: bool,
    #[serde(default)]
    pub want_attention: bool,
}

impl BackendRequest {
    pub fn greedy(prompt: impl Into<String>) -> Self {
        BackendRequest {
            prompt: prompt.into(),
            n: 1,
            temperature: 0.0,
            max_tokens: 256,
            want_logprobs: true,
            want_hidden: false,
            want_attention: false,
        }
    }

    pub fn sample(prompt: impl Into<String>, n: usize, temperature: f64) -> Self {
        BackendRequest {
            prompt: prompt.into(),
            n,
            temperature,
            max_tokens: 256,
            want_logprobs: true,
            want_hidden: false,
            want_attention: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 1 {
            return Err(Error::InvalidInput("request needs n >= 1".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(Error::InvalidInput(format!(
                "request temperature {} must be finite and >= 0",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(Error::InvalidInput("request needs max_tokens >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendResponse {
    pub generations: Vec<Generation>,
    pub prompt_tokens: usize,
    pub completion_tokens: usize,
}

/// Directed similarity judgment for an ordered text pair (a, b).
/// `forward` grades a => b, `backward` grades b => a; both lie in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityJudgment {
    pub forward: f64,
    pub backward: f64,
}

impl SimilarityJudgment {
    /// Bidirectional entailment strength: the weaker direction.
    pub fn bidirectional(&self) -> f64 {
        self.forward.min(self.backward)
    }

    /// Symmetric scalar similarity: mean of the two directions.
    pub fn mean(&self) -> f64 {
        0.5 * (self.forward + self.backward)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("forward", self.forward), ("backward", self.backward)] {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::Backend(format!(
                    "similarity {name} value {v} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

pub trait Backend: Send + Sync {
    fn name(&self) -> &str;

    fn generate(&self, request: &BackendRequest) -> Result<BackendResponse>;

    /// Judge the ordered pair (a, b). Implementations must be consistent
    /// under argument swap: similarity(b, a) mirrors forward and backward.
    fn similarity(&self, a: &str, b: &str) -> Result<SimilarityJudgment>;

    /// True when `answer` is judged correct against any of `ground_truths`.
    fn judge_correctness(&self, question: &str, answer: &str, ground_truths: &[String])
        -> Result<bool>;

    /// Teacher-force `target` as the continuation of `prompt` and return the
    /// target's tokens with their log-probabilities. This is the logprob
    /// evaluation mode used to score text the model did not sample itself.
    fn force_logprobs(&self, prompt: &str, target: &str) -> Result<Generation>;
}

/// Runs one query through a backend: a greedy pass plus `sampling.num_samples`
/// sampled generations, assembled into a scoreable trace. Hidden states and
/// attention are only requested for the greedy pass, where the internal
/// scorers read them; samples carry hidden states for the sample-set scorers.
pub fn collect_trace(
    backend: &dyn Backend,
    query: &Query,
    sampling: &SamplingParams,
    want_hidden: bool,
    want_attention: bool,
) -> Result<UncertaintyTrace> {
    let mut greedy_request = BackendRequest::greedy(&query.prompt);
    greedy_request.want_hidden = want_hidden;
    greedy_request.want_attention = want_attention;
    let greedy = backend
        .generate(&greedy_request)?
        .generations
        .into_iter()
        .next()
        .ok_or_else(|| Error::Backend("greedy pass returned no generation".into()))?;
    let samples = if sampling.num_samples == 0 {
        Vec::new()
    } else {
        let mut request =
            BackendRequest::sample(&query.prompt, sampling.num_samples, sampling.temperature);
        request.want_hidden = want_hidden;
        let response = backend.generate(&request)?;
        if response.generations.len() != sampling.num_samples {
            return Err(Error::Backend(format!(
                "asked for {} samples, backend returned {}",
                sampling.num_samples,
                response.generations.len()
            )));
        }
        response.generations
    };
    Ok(UncertaintyTrace {
        query: query.clone(),
        greedy,
        samples,
        sampling: sampling.clone(),
        ..UncertaintyTrace::default()
    })
}

impl<T: Backend + ?Sized> Backend for &T {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn generate(&self, request: &BackendRequest) -> Result<BackendResponse> {
        (**self).generate(request)
    }
    fn similarity(&self, a: &str, b: &str) -> Result<SimilarityJudgment> {
        (**self).similarity(a, b)
    }
    fn judge_correctness(
        &self,
        question: &str,
        answer: &str,
        ground_truths: &[String],
    ) -> Result<bool> {
        (**self).judge_correctness(question, answer, ground_truths)
    }
    fn force_logprobs(&self, prompt: &str, target: &str) -> Result<Generation> {
        (**self).force_logprobs(prompt, target)
    }
}
