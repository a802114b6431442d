//! Claim-level scoring of long generations.
//!
//! A long answer is decomposed into atomic claims in two prompt rounds,
//! each claim is scored by one of three strategies (the claim as the
//! response, or via generated questions with the claim or a fresh answer
//! as the response), per-question scores are aggregated, and labeled
//! claims are pooled into a rejection-based evaluation.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::backend::prompts::PromptAssets;
use crate::backend::{Backend, BackendRequest};
use crate::error::{Error, Result};
use crate::metrics::prr;
use crate::scorers::sequence::lns;
use crate::trace::{Query, SATURATED};

/// Firmer instruction appended when the first decomposition reply does not
/// parse; the retried request must differ from the original.
const LIST_RETRY_NUDGE: &str = "Answer with a single python list of claim strings.";

/// Extracts the claim texts from a bracketed list reply. JSON arrays are
/// taken as-is; otherwise a python-style list with ', " or ` quoting is
/// accepted, closing a string only where a quote is followed by , or ]
/// so that apostrophes inside claims survive.
pub fn parse_claim_list(reply: &str) -> Result<Vec<String>> {
    let start = reply
        .find('[')
        .ok_or_else(|| Error::ReplyParse(format!("no list in decomposition reply: {reply:?}")))?;
    let end = reply
        .rfind(']')
        .filter(|&e| e > start)
        .ok_or_else(|| Error::ReplyParse(format!("unterminated list in reply: {reply:?}")))?;
    let body = &reply[start..=end];
    if let Ok(claims) = serde_json::from_str::<Vec<String>>(body) {
        return Ok(claims);
    }
    let inner: Vec<char> = body[1..body.len() - 1].chars().collect();
    let mut claims = Vec::new();
    let mut i = 0;
    while i < inner.len() {
        let c = inner[i];
        if c.is_whitespace() || c == ',' {
            i += 1;
            continue;
        }
        let close = match c {
            '\'' | '"' => c,
            '`' => '\'',
            other => {
                return Err(Error::ReplyParse(format!(
                    "unexpected character {other:?} in list: {reply:?}"
                )))
            }
        };
        let mut j = i + 1;
        let mut text = String::new();
        let terminated = loop {
            if j >= inner.len() {
                break false;
            }
            if inner[j] == close {
                let mut k = j + 1;
                while k < inner.len() && inner[k].is_whitespace() {
                    k += 1;
                }
                if k >= inner.len() || inner[k] == ',' {
                    break true;
                }
            }
            text.push(inner[j]);
            j += 1;
        };
        if !terminated {
            return Err(Error::ReplyParse(format!(
                "unterminated string in list: {reply:?}"
            )));
        }
        claims.push(text);
        i = j + 1;
    }
    Ok(claims)
}

fn first_text(backend: &dyn Backend, request: &BackendRequest) -> Result<String> {
    let response = backend.generate(request)?;
    let sample = response
        .generations
        .first()
        .ok_or_else(|| Error::Backend("backend returned no samples".into()))?;
    Ok(sample.text.trim().to_string())
}

fn decompose_round(
    backend: &dyn Backend,
    template: &str,
    text: &str,
) -> Result<Vec<String>> {
    let prompt = template.replace("{TEXT}", text);
    let mut request = BackendRequest::greedy(&prompt);
    request.want_logprobs = false;
    request.max_tokens = 1024;
    match parse_claim_list(&first_text(backend, &request)?) {
        Ok(claims) => Ok(claims),
        Err(_) => {
            let retry = BackendRequest {
                prompt: format!("{prompt}\n{LIST_RETRY_NUDGE}"),
                ..request
            };
            parse_claim_list(&first_text(backend, &retry)?)
        }
    }
}

/// Splits a generation into standalone claims: one pass over the whole
/// text, then one refinement pass per claim. Empty refinements drop their
/// claim; duplicates are removed case-insensitively, keeping first casing.
pub fn decompose(
    answer: &str,
    backend: &dyn Backend,
    prompts: &PromptAssets,
) -> Result<Vec<String>> {
    if answer.trim().is_empty() {
        return Err(Error::InvalidInput("empty answer to decompose".into()));
    }
    let coarse = decompose_round(backend, &prompts.decompose_step1, answer)?;
    let mut seen = HashSet::new();
    let mut claims = Vec::new();
    for chunk in &coarse {
        for claim in decompose_round(backend, &prompts.decompose_step2, chunk)? {
            let claim = claim.trim().to_string();
            if claim.is_empty() {
                continue;
            }
            if seen.insert(claim.to_lowercase()) {
                claims.push(claim);
            }
        }
    }
    Ok(claims)
}

/// Scores a (query, response) pair where the response was never sampled,
/// so token logprobs must come from the backend's forced evaluation mode.
pub trait ClaimScorer {
    fn name(&self) -> &str;
    fn score(&self, query: &str, response: &str, backend: &dyn Backend) -> Result<f64>;
}

/// Mean negative token logprob of the response teacher-forced after the
/// query.
pub struct TeacherForcedLns;

impl ClaimScorer for TeacherForcedLns {
    fn name(&self) -> &str {
        "lns"
    }

    fn score(&self, query: &str, response: &str, backend: &dyn Backend) -> Result<f64> {
        let forced = backend.force_logprobs(&format!("{query}\n"), response)?;
        lns(&forced)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClaimStrategy {
    Naive,
    Qg,
    Qag,
}

impl ClaimStrategy {
    pub fn id(self) -> &'static str {
        match self {
            ClaimStrategy::Naive => "naive",
            ClaimStrategy::Qg => "qg",
            ClaimStrategy::Qag => "qag",
        }
    }
}

impl std::str::FromStr for ClaimStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(ClaimStrategy::Naive),
            "qg" => Ok(ClaimStrategy::Qg),
            "qag" => Ok(ClaimStrategy::Qag),
            other => Err(Error::Config(format!("unknown claim strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregateMode {
    Min,
    Max,
    Mean,
}

impl std::str::FromStr for AggregateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "min" => Ok(AggregateMode::Min),
            "max" => Ok(AggregateMode::Max),
            "mean" => Ok(AggregateMode::Mean),
            other => Err(Error::Config(format!("unknown aggregation {other:?}"))),
        }
    }
}

/// Sentinel-aware reduction: max saturates on any sentinel; min and mean
/// ignore sentinels unless the whole list is saturated.
pub fn aggregate(scores: &[f64], mode: AggregateMode) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::InvalidInput("aggregate of no scores".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidInput("NaN claim score".into()));
    }
    let finite: Vec<f64> = scores
        .iter()
        .copied()
        .filter(|s| !crate::trace::is_saturated(*s))
        .collect();
    Ok(match mode {
        AggregateMode::Max => {
            if finite.len() < scores.len() {
                SATURATED
            } else {
                finite.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            }
        }
        AggregateMode::Min => {
            if finite.is_empty() {
                SATURATED
            } else {
                finite.iter().copied().fold(f64::INFINITY, f64::min)
            }
        }
        AggregateMode::Mean => {
            if finite.is_empty() {
                SATURATED
            } else {
                finite.iter().sum::<f64>() / finite.len() as f64
            }
        }
    })
}

/// One generated question and, for QAG, its fresh answer and alignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimQuestion {
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aligned: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimRecord {
    pub claim_text: String,
    pub parent_query: Query,
    pub questions: Vec<ClaimQuestion>,
    pub scores: Vec<f64>,
    pub aggregate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
}

#[derive(Debug, Clone)]
pub struct LongformConfig {
    /// Questions generated per claim for QG/QAG.
    pub num_questions: usize,
    pub question_temperature: f64,
    /// Bidirectional entailment level above which a fresh answer counts as
    /// the claim.
    pub alignment_threshold: f64,
    pub aggregation: AggregateMode,
}

impl Default for LongformConfig {
    fn default() -> Self {
        LongformConfig {
            num_questions: 5,
            question_temperature: 1.0,
            alignment_threshold: 0.5,
            aggregation: AggregateMode::Mean,
        }
    }
}

/// Scores the claim as if it were the model's response to the original
/// query.
pub fn strategy_naive(
    query: &str,
    claim: &str,
    scorer: &dyn ClaimScorer,
    backend: &dyn Backend,
) -> Result<f64> {
    if claim.trim().is_empty() {
        return Err(Error::InvalidInput("empty claim".into()));
    }
    scorer.score(query, claim, backend)
}

/// One question per slot aimed at the claim; duplicates are kept so the
/// list length always equals `n_q`.
pub fn generate_questions(
    query: &str,
    claim: &str,
    n_q: usize,
    backend: &dyn Backend,
    prompts: &PromptAssets,
    temperature: f64,
) -> Result<Vec<String>> {
    if n_q == 0 {
        return Err(Error::Config("question count must be positive".into()));
    }
    let prompt = crate::backend::prompts::render(
        &prompts.question_generation,
        &[("MAIN_QUESTION", query), ("CLAIM", claim)],
    );
    let mut request = BackendRequest::sample(&prompt, n_q, temperature);
    request.want_logprobs = false;
    let response = backend.generate(&request)?;
    if response.generations.len() != n_q {
        return Err(Error::Backend(format!(
            "asked for {n_q} questions, backend returned {}",
            response.generations.len()
        )));
    }
    Ok(response
        .generations
        .iter()
        .map(|s| s.text.trim().to_string())
        .collect())
}

/// Scores the claim as the answer to each generated question.
pub fn strategy_qg(
    query: &str,
    claim: &str,
    scorer: &dyn ClaimScorer,
    backend: &dyn Backend,
    prompts: &PromptAssets,
    cfg: &LongformConfig,
) -> Result<(Vec<ClaimQuestion>, Vec<f64>)> {
    if claim.trim().is_empty() {
        return Err(Error::InvalidInput("empty claim".into()));
    }
    let questions = generate_questions(
        query,
        claim,
        cfg.num_questions,
        backend,
        prompts,
        cfg.question_temperature,
    )?;
    let mut scores = Vec::with_capacity(questions.len());
    let mut records = Vec::with_capacity(questions.len());
    for question in questions {
        scores.push(scorer.score(&question, claim, backend)?);
        records.push(ClaimQuestion {
            question,
            answer: None,
            aligned: None,
        });
    }
    Ok((records, scores))
}

/// Answers each generated question afresh; only answers that entail the
/// claim in both directions are scored, the rest saturate.
pub fn strategy_qag(
    query: &str,
    claim: &str,
    scorer: &dyn ClaimScorer,
    backend: &dyn Backend,
    prompts: &PromptAssets,
    cfg: &LongformConfig,
) -> Result<(Vec<ClaimQuestion>, Vec<f64>)> {
    if claim.trim().is_empty() {
        return Err(Error::InvalidInput("empty claim".into()));
    }
    let questions = generate_questions(
        query,
        claim,
        cfg.num_questions,
        backend,
        prompts,
        cfg.question_temperature,
    )?;
    let mut scores = Vec::with_capacity(questions.len());
    let mut records = Vec::with_capacity(questions.len());
    for question in questions {
        let prompt = crate::backend::prompts::render(
            &prompts.claim_answer,
            &[("question", question.as_str())],
        );
        let mut request = BackendRequest::greedy(&prompt);
        request.want_logprobs = false;
        request.max_tokens = 64;
        let answer = first_text(backend, &request)?;
        let aligned =
            backend.similarity(claim, &answer)?.bidirectional() > cfg.alignment_threshold;
        scores.push(if aligned {
            scorer.score(&question, &answer, backend)?
        } else {
            SATURATED
        });
        records.push(ClaimQuestion {
            question,
            answer: Some(answer),
            aligned: Some(aligned),
        });
    }
    Ok((records, scores))
}

/// Full pipeline for one long generation: decompose, score each claim with
/// the chosen strategy, aggregate.
pub fn score_longform(
    query: &Query,
    answer: &str,
    strategy: ClaimStrategy,
    scorer: &dyn ClaimScorer,
    backend: &dyn Backend,
    prompts: &PromptAssets,
    cfg: &LongformConfig,
) -> Result<Vec<ClaimRecord>> {
    let claims = decompose(answer, backend, prompts)?;
    let mut records = Vec::with_capacity(claims.len());
    for claim in claims {
        let (questions, scores) = match strategy {
            ClaimStrategy::Naive => (
                Vec::new(),
                vec![strategy_naive(&query.prompt, &claim, scorer, backend)?],
            ),
            ClaimStrategy::Qg => strategy_qg(&query.prompt, &claim, scorer, backend, prompts, cfg)?,
            ClaimStrategy::Qag => {
                strategy_qag(&query.prompt, &claim, scorer, backend, prompts, cfg)?
            }
        };
        let aggregate = aggregate(&scores, cfg.aggregation)?;
        records.push(ClaimRecord {
            claim_text: claim,
            parent_query: query.clone(),
            questions,
            scores,
            aggregate,
            label: None,
        });
    }
    Ok(records)
}

/// Maps a claim text to its correctness label (0 correct, 1 incorrect).
pub trait ClaimLabeler {
    fn label(&self, claim: &str) -> Result<u8>;
}

/// Labels from a JSON object {claim text: 0 or 1}.
#[derive(Debug, Clone, Default)]
pub struct FixtureLabeler {
    labels: BTreeMap<String, u8>,
}

impl FixtureLabeler {
    pub fn new(labels: BTreeMap<String, u8>) -> Self {
        FixtureLabeler { labels }
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let labels: BTreeMap<String, u8> =
            serde_json::from_str(&body).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: e.line(),
                msg: e.to_string(),
            })?;
        if labels.values().any(|&l| l > 1) {
            return Err(Error::InvalidInput("claim label outside {0, 1}".into()));
        }
        Ok(FixtureLabeler { labels })
    }
}

impl ClaimLabeler for FixtureLabeler {
    fn label(&self, claim: &str) -> Result<u8> {
        self.labels
            .get(claim)
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("no label for claim {claim:?}")))
    }
}

pub fn label_claims(records: &mut [ClaimRecord], labeler: &dyn ClaimLabeler) -> Result<()> {
    for record in records.iter_mut() {
        record.label = Some(labeler.label(&record.claim_text)?);
    }
    Ok(())
}

/// PRR over the pooled (aggregate, label) pairs of all claims.
pub fn evaluate_claims(records: &[ClaimRecord]) -> Result<f64> {
    let pairs: Vec<(f64, u8)> = records
        .iter()
        .map(|r| {
            r.label
                .map(|l| (r.aggregate, l))
                .ok_or_else(|| Error::InvalidInput(format!("unlabeled claim {:?}", r.claim_text)))
        })
        .collect::<Result<_>>()?;
    prr(&pairs)
}
