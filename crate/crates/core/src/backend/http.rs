//! OpenAI-compatible HTTP backend.
//!
//! `generate` talks to `{base_url}/chat/completions` with `n`, `temperature`,
//! `max_tokens`, and token logprobs. `force_logprobs` uses the legacy
//! `{base_url}/completions` echo mode, which vLLM-style servers expose for
//! teacher forcing. Similarity judgments go to a separate endpoint that
//! answers `{"forward": f, "backward": f}` for a posted text pair.
//!
//! The API key is read from the environment variable named in the config, so
//! configs stay free of secrets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{Generation, TokenEvent};

use super::{Backend, BackendRequest, BackendResponse, SimilarityJudgment};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HttpBackendConfig {
    /// Base URL up to and including the API version, e.g. `http://host:8000/v1`.
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token, if any.
    #[serde(default)]
    pub api_key_env: Option<String>,
    /// Endpoint for similarity judgments; required before calling `similarity`.
    #[serde(default)]
    pub similarity_url: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    /// Upper bound on concurrent in-flight requests when callers fan out.
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    /// Optional fixed sampling seed forwarded to the server.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_timeout() -> u64 {
    120
}

fn default_retries() -> u32 {
    2
}

fn default_parallelism() -> usize {
    4
}

pub struct HttpBackend {
    cfg: HttpBackendConfig,
    client: reqwest::blocking::Client,
    api_key: Option<String>,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatBody<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    n: usize,
    temperature: f64,
    max_tokens: usize,
    logprobs: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatReplyMessage,
    #[serde(default)]
    logprobs: Option<ChatLogprobs>,
}

#[derive(Deserialize)]
struct ChatReplyMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChatLogprobs {
    #[serde(default)]
    content: Option<Vec<ChatTokenLogprob>>,
}

#[derive(Deserialize)]
struct ChatTokenLogprob {
    token: String,
    logprob: f64,
}

#[derive(Deserialize)]
struct Usage {
    #[serde(default)]
    prompt_tokens: usize,
    #[serde(default)]
    completion_tokens: usize,
}

#[derive(Serialize)]
struct CompletionsBody<'a> {
    model: &'a str,
    prompt: String,
    max_tokens: usize,
    echo: bool,
    logprobs: u32,
    temperature: f64,
}

#[derive(Deserialize)]
struct CompletionsResponse {
    choices: Vec<CompletionsChoice>,
}

#[derive(Deserialize)]
struct CompletionsChoice {
    #[serde(default)]
    logprobs: Option<CompletionsLogprobs>,
}

#[derive(Deserialize)]
struct CompletionsLogprobs {
    tokens: Vec<String>,
    token_logprobs: Vec<Option<f64>>,
    text_offset: Vec<usize>,
}

#[derive(Serialize)]
struct SimilarityBody<'a> {
    text_a: &'a str,
    text_b: &'a str,
}

#[derive(Deserialize)]
struct SimilarityReply {
    forward: f64,
    backward: f64,
}

impl HttpBackend {
    pub fn new(cfg: HttpBackendConfig) -> Result<Self> {
        let api_key = match &cfg.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                Error::Config(format!("api_key_env names `{var}` but it is not set"))
            })?),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| Error::Backend(e.to_string()))?;
        Ok(HttpBackend {
            cfg,
            client,
            api_key,
        })
    }

    pub fn parallelism(&self) -> usize {
        self.cfg.parallelism.max(1)
    }

    fn post_json<B: Serialize, R: for<'de> Deserialize<'de>>(&self, url: &str, body: &B) -> Result<R> {
        let mut last_err = None;
        for attempt in 0..=self.cfg.max_retries {
            if attempt > 0 {
                std::thread::sleep(std::time::Duration::from_millis(200 * attempt as u64));
            }
            let mut req = self.client.post(url).json(body);
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            let resp = match req.send() {
                Ok(r) => r,
                Err(e) => {
                    last_err = Some(Error::Backend(format!("{url}: {e}")));
                    continue;
                }
            };
            let status = resp.status();
            if status.is_success() {
                let text = resp
                    .text()
                    .map_err(|e| Error::Backend(format!("{url}: reading body: {e}")))?;
                return serde_json::from_str(&text).map_err(|e| {
                    Error::ReplyParse(format!("{url}: {e}; body starts `{}`", snippet(&text)))
                });
            }
            let body_text = resp.text().unwrap_or_default();
            let err = Error::Backend(format!(
                "{url}: HTTP {status}: {}",
                snippet(&body_text)
            ));
            let retryable = status.as_u16() == 429 || status.is_server_error();
            if !retryable {
                return Err(err);
            }
            last_err = Some(err);
        }
        Err(last_err.unwrap_or_else(|| Error::Backend(format!("{url}: request failed"))))
    }

    fn chat_url(&self) -> String {
        format!("{}/chat/completions", self.cfg.base_url.trim_end_matches('/'))
    }

    fn completions_url(&self) -> String {
        format!("{}/completions", self.cfg.base_url.trim_end_matches('/'))
    }
}

fn snippet(text: &str) -> String {
    let trimmed = text.trim();
    let cut: String = trimmed.chars().take(160).collect();
    if cut.len() < trimmed.len() {
        format!("{cut}...")
    } else {
        cut
    }
}

/// Grading prompt for `judge_correctness`. The reply must contain the word
/// `correct` or `incorrect`.
fn judge_prompt(question: &str, answer: &str, ground_truths: &[String]) -> String {
    let truths = ground_truths.join("; ");
    format!(
        "You are grading an answer to a question against gold answers.\n\
         Question: {question}\n\
         Gold answers: {truths}\n\
         Proposed answer: {answer}\n\
         Reply with exactly one word: correct or incorrect."
    )
}

/// Parse a grading reply.`incorrect` is checked first because it contains
/// `correct` as a substring.
pub fn parse_judge_reply(reply: &str) -> Result<bool> {
    let lower = reply.to_lowercase();
    if lower.contains("incorrect") {
        Ok(false)
    } else if lower.contains("correct") {
        Ok(true)
    } else {
        Err(Error::ReplyParse(format!(
            "judge reply `{}` contains neither `correct` nor `incorrect`",
            snippet(reply)
        )))
    }
}

impl Backend for HttpBackend {
    fn name(&self) -> &str {
        "http"
    }

    fn generate(&self, request: &BackendRequest) -> Result<BackendResponse> {
        request.validate()?;
        let body = ChatBody {
            model: &self.cfg.model,
            messages: vec![ChatMessage {
                role: "user",
                content: &request.prompt,
            }],
            n: request.n,
            temperature: request.temperature,
            max_tokens: request.max_tokens,
            logprobs: request.want_logprobs,
            seed: self.cfg.seed,
        };
        let parsed: ChatResponse = self.post_json(&self.chat_url(), &body)?;
        if parsed.choices.is_empty() {
            return Err(Error::ReplyParse("chat response carries no choices".into()));
        }
        let mut generations = Vec::with_capacity(parsed.choices.len());
        for choice in parsed.choices {
            let text = choice.message.content.unwrap_or_default();
            let tokens = choice
                .logprobs
                .and_then(|lp| lp.content)
                .map(|events| {
                    events
                        .into_iter()
                        .map(|e| TokenEvent {
                            text: e.token,
                            // Some servers emit tiny positive values; the trace
                            // contract requires lp <= 0.
                            logprob: e.logprob.min(0.0),
                        })
                        .collect()
                })
                .unwrap_or_default();
            generations.push(Generation {
                text,
                tokens,
                hidden_state: None,
                attention_diagonals: None,
            });
        }
        let usage = parsed.usage.unwrap_or(Usage {
            prompt_tokens: 0,
            completion_tokens: 0,
        });
        Ok(BackendResponse {
            generations,
            prompt_tokens: usage.prompt_tokens,
            completion_tokens: usage.completion_tokens,
        })
    }

    fn similarity(&self, a: &str, b: &str) -> Result<SimilarityJudgment> {
        if a == b {
            return Ok(SimilarityJudgment {
                forward: 1.0,
                backward: 1.0,
            });
        }
        let url = self.cfg.similarity_url.as_ref().ok_or_else(|| {
            Error::Config("similarity requested but no similarity_url configured".into())
        })?;
        let reply: SimilarityReply = self.post_json(url, &SimilarityBody { text_a: a, text_b: b })?;
        let judgment = SimilarityJudgment {
            forward: reply.forward,
            backward: reply.backward,
        };
        judgment.validate()?;
        Ok(judgment)
    }

    fn judge_correctness(
        &self,
        question: &str,
        answer: &str,
        ground_truths: &[String],
    ) -> Result<bool> {
        let mut req = BackendRequest::greedy(judge_prompt(question, answer, ground_truths));
        req.max_tokens = 8;
        req.want_logprobs = false;
        let resp = self.generate(&req)?;
        parse_judge_reply(&resp.generations[0].text)
    }

    fn force_logprobs(&self, prompt: &str, target: &str) -> Result<Generation> {
        if target.is_empty() {
            return Err(Error::InvalidInput("cannot teacher-force an empty target".into()));
        }
        let body = CompletionsBody {
            model: &self.cfg.model,
            prompt: format!("{prompt}{target}"),
            max_tokens: 0,
            echo: true,
            logprobs: 0,
            temperature: 0.0,
        };
        let parsed: CompletionsResponse = self.post_json(&self.completions_url(), &body)?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| Error::ReplyParse("completions response carries no choices".into()))?;
        let lp = choice
            .logprobs
            .ok_or_else(|| Error::ReplyParse("echo completions reply lacks logprobs".into()))?;
        if lp.tokens.len() != lp.token_logprobs.len() || lp.tokens.len() != lp.text_offset.len() {
            return Err(Error::ReplyParse("echo logprob arrays have mismatched lengths".into()));
        }
        let boundary = prompt.len();
        let mut tokens = Vec::new();
        for ((text, logprob), offset) in lp
            .tokens
            .into_iter()
            .zip(lp.token_logprobs)
            .zip(lp.text_offset)
        {
            if offset < boundary {
                continue;
            }
            let logprob = logprob.ok_or_else(|| {
                Error::ReplyParse("echo logprobs contain null inside the target span".into())
            })?;
            tokens.push(TokenEvent {
                text,
                logprob: logprob.min(0.0),
            });
        }
        if tokens.is_empty() {
            return Err(Error::ReplyParse(
                "echo completions reply contains no tokens past the prompt boundary".into(),
            ));
        }
        Ok(Generation {
            text: target.to_string(),
            tokens,
            hidden_state: None,
            attention_diagonals: None,
        })
    }
}
