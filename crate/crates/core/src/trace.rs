//! Generation-trace data model and line-delimited JSON persistence.
//!
//! A trace captures everything a scorer may consume for one query: the greedy
//! generation with token logprobs, `B` sampled generations, optional hidden
//! states and attention diagonals, paraphrases, and externally supplied
//! confidence scores. Datasets are stored one JSON record per line with the
//! field layout
//!
//! ```text
//! id, prompt, ground_truths[], dataset_tag, transform_tag,
//! greedy{text, tokens[{t, lp}], hidden[], attn[][]},
//! samples[], sampling{temp, B}, paraphrases[], external_scores{}, label
//! ```
//!
//! Unknown fields survive a load/save round trip, and numbers are written with
//! shortest exact float representation, so replaying a stored run reproduces
//! files byte for byte.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Positive-saturated sentinel score. Sorts above every finite score and is
/// excluded from mean/deviation statistics wherever the spec of an operation
/// says so (see `mean_excluding_saturated`).
pub const SATURATED: f64 = f64::MAX;

/// True when `v` is the positive-saturated sentinel.
pub fn is_saturated(v: f64) -> bool {
    v == SATURATED
}

/// Mean over the non-sentinel entries. `None` when every entry is saturated
/// or the slice is empty.
pub fn mean_excluding_saturated(values: &[f64]) -> Option<f64> {
    let finite: Vec<f64> = values.iter().copied().filter(|v| !is_saturated(*v)).collect();
    if finite.is_empty() {
        return None;
    }
    Some(finite.iter().sum::<f64>() / finite.len() as f64)
}

/// Population standard deviation over the non-sentinel entries.
pub fn std_excluding_saturated(values: &[f64]) -> Option<f64> {
    let finite: Vec<f64> = values.iter().copied().filter(|v| !is_saturated(*v)).collect();
    if finite.is_empty() {
        return None;
    }
    let mu = finite.iter().sum::<f64>() / finite.len() as f64;
    Some((finite.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / finite.len() as f64).sqrt())
}

/// One emitted token with its log-probability (`lp <= 0`, finite).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenEvent {
    #[serde(rename = "t")]
    pub text: String,
    #[serde(rename = "lp")]
    pub logprob: f64,
}

/// One model generation: surface text plus optional token-level and
/// internal-state capture.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Generation {
    pub text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tokens: Vec<TokenEvent>,
    /// Hidden state of the last token at some fixed layer.
    #[serde(rename = "hidden", default, skip_serializing_if = "Option::is_none")]
    pub hidden_state: Option<Vec<f64>>,
    /// Per-head attention-kernel diagonals; entries must lie in (0, 1].
    #[serde(rename = "attn", default, skip_serializing_if = "Option::is_none")]
    pub attention_diagonals: Option<Vec<Vec<f64>>>,
}

impl Generation {
    pub fn from_text(text: impl Into<String>) -> Self {
        Generation {
            text: text.into(),
            ..Generation::default()
        }
    }

    /// Mean token logprob, the length-normalized sequence logprob.
    pub fn mean_logprob(&self) -> Option<f64> {
        if self.tokens.is_empty() {
            return None;
        }
        Some(self.tokens.iter().map(|t| t.logprob).sum::<f64>() / self.tokens.len() as f64)
    }
}

/// Sampling parameters used to draw `samples`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    #[serde(rename = "temp")]
    pub temperature: f64,
    #[serde(rename = "B")]
    pub num_samples: usize,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams {
            temperature: 1.0,
            num_samples: 0,
        }
    }
}

/// The input side of a trace.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub prompt: String,
    #[serde(default)]
    pub ground_truths: Vec<String>,
    #[serde(default)]
    pub dataset_tag: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transform_tag: Option<String>,
}

/// A full generation trace for one query.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct UncertaintyTrace {
    pub query: Query,
    pub greedy: Generation,
    pub samples: Vec<Generation>,
    pub sampling: SamplingParams,
    /// Pre-recorded answers to paraphrased questions, consumed by self-detection.
    pub paraphrases: Vec<Generation>,
    pub external_scores: BTreeMap<String, f64>,
    /// Unrecognized record fields, carried through save/load unchanged.
    pub extra: BTreeMap<String, serde_json::Value>,
}

/// Traces with correctness labels. Label 0 = correct, 1 = incorrect, so that
/// a good uncertainty score ranks label-1 entries above label-0 entries.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledDataset {
    pub entries: Vec<(UncertaintyTrace, u8)>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// A method's output for one trace, in the common orientation: larger value
/// means more uncertain. Confidence-style methods must be constructed through
/// `from_confidence`, which negates once, at the boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyScore {
    pub method: String,
    pub value: f64,
}

impl UncertaintyScore {
    pub fn from_uncertainty(method: impl Into<String>, value: f64) -> Self {
        UncertaintyScore {
            method: method.into(),
            value,
        }
    }

    /// Wrap a confidence-style raw score (larger = more confident).
    pub fn from_confidence(method: impl Into<String>, confidence: f64) -> Self {
        UncertaintyScore {
            method: method.into(),
            value: -confidence,
        }
    }

    pub fn is_saturated(&self) -> bool {
        is_saturated(self.value)
    }
}

/// On-disk record shape. Field order here is the canonical write order.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Record {
    id: String,
    prompt: String,
    #[serde(default)]
    ground_truths: Vec<String>,
    #[serde(default)]
    dataset_tag: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    transform_tag: Option<String>,
    greedy: Generation,
    #[serde(default)]
    samples: Vec<Generation>,
    #[serde(default)]
    sampling: SamplingParams,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    paraphrases: Vec<Generation>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    external_scores: BTreeMap<String, f64>,
    label: u8,
    #[serde(flatten)]
    extra: BTreeMap<String, serde_json::Value>,
}

impl Record {
    fn into_entry(self) -> (UncertaintyTrace, u8) {
        let trace = UncertaintyTrace {
            query: Query {
                id: self.id,
                prompt: self.prompt,
                ground_truths: self.ground_truths,
                dataset_tag: self.dataset_tag,
                transform_tag: self.transform_tag,
            },
            greedy: self.greedy,
            samples: self.samples,
            sampling: self.sampling,
            paraphrases: self.paraphrases,
            external_scores: self.external_scores,
            extra: self.extra,
        };
        (trace, self.label)
    }

    fn from_entry(trace: &UncertaintyTrace, label: u8) -> Record {
        Record {
            id: trace.query.id.clone(),
            prompt: trace.query.prompt.clone(),
            ground_truths: trace.query.ground_truths.clone(),
            dataset_tag: trace.query.dataset_tag.clone(),
            transform_tag: trace.query.transform_tag.clone(),
            greedy: trace.greedy.clone(),
            samples: trace.samples.clone(),
            sampling: trace.sampling.clone(),
            paraphrases: trace.paraphrases.clone(),
            external_scores: trace.external_scores.clone(),
            label,
            extra: trace.extra.clone(),
        }
    }
}

fn check_generation(which: &str, g: &Generation) -> std::result::Result<(), String> {
    for (i, tok) in g.tokens.iter().enumerate() {
        if !tok.logprob.is_finite() || tok.logprob > 0.0 {
            return Err(format!(
                "{which} token {i} has logprob {}, expected finite and <= 0",
                tok.logprob
            ));
        }
    }
    if let Some(hidden) = &g.hidden_state {
        if hidden.iter().any(|v| !v.is_finite()) {
            return Err(format!("{which} hidden state contains a non-finite entry"));
        }
    }
    if let Some(heads) = &g.attention_diagonals {
        for (h, diag) in heads.iter().enumerate() {
            for (j, &v) in diag.iter().enumerate() {
                if !v.is_finite() || v <= 0.0 || v > 1.0 {
                    return Err(format!(
                        "{which} attention head {h} entry {j} is {v}, expected in (0, 1]"
                    ));
                }
            }
        }
    }
    Ok(())
}

/// Structural checks every stored trace must satisfy.
fn check_trace(trace: &UncertaintyTrace, label: u8) -> std::result::Result<(), String> {
    if trace.query.id.is_empty() {
        return Err("empty id".into());
    }
    if trace.query.prompt.is_empty() {
        return Err("empty prompt".into());
    }
    if label > 1 {
        return Err(format!("label {label} out of range, expected 0 or 1"));
    }
    if trace.sampling.num_samples != trace.samples.len() {
        return Err(format!(
            "sampling.B = {} but {} samples present",
            trace.sampling.num_samples,
            trace.samples.len()
        ));
    }
    check_generation("greedy", &trace.greedy)?;
    for (b, s) in trace.samples.iter().enumerate() {
        check_generation(&format!("sample {b}"), s)?;
    }
    for (i, p) in trace.paraphrases.iter().enumerate() {
        check_generation(&format!("paraphrase answer {i}"), p)?;
    }
    for (k, v) in &trace.external_scores {
        if !v.is_finite() {
            return Err(format!("external score `{k}` is not finite"));
        }
    }
    Ok(())
}

/// Parse a dataset from a reader. `origin` names the source in errors.
pub fn read_dataset(reader: impl std::io::Read, origin: &str) -> Result<LabeledDataset> {
    let reader = BufReader::new(reader);
    let mut entries = Vec::new();
    let mut seen = BTreeSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(origin, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: origin.to_string(),
            line: lineno,
            msg: e.to_string(),
        })?;
        let (trace, label) = record.into_entry();
        if let Err(msg) = check_trace(&trace, label) {
            return Err(Error::InvalidTrace {
                path: origin.to_string(),
                line: lineno,
                id: trace.query.id.clone(),
                msg,
            });
        }
        if !seen.insert(trace.query.id.clone()) {
            return Err(Error::InvalidTrace {
                path: origin.to_string(),
                line: lineno,
                id: trace.query.id.clone(),
                msg: "duplicate id".into(),
            });
        }
        entries.push((trace, label));
    }
    Ok(LabeledDataset { entries })
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(file, &path.display().to_string())
}

/// Serialize a dataset in canonical field order, one record per line.
pub fn write_dataset(dataset: &LabeledDataset, mut writer: impl Write) -> Result<()> {
    for (trace, label) in &dataset.entries {
        check_trace(trace, *label).map_err(|msg| {
            Error::InvalidInput(format!("refusing to write trace `{}`: {msg}", trace.query.id))
        })?;
        let record = Record::from_entry(trace, *label);
        let line = serde_json::to_string(&record)
            .map_err(|e| Error::InvalidInput(format!("serialize `{}`: {e}", trace.query.id)))?;
        writer
            .write_all(line.as_bytes())
            .and_then(|_| writer.write_all(b"\n"))
            .map_err(|e| Error::io("<writer>", e))?;
    }
    Ok(())
}

pub fn save_dataset(dataset: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_dataset(dataset, &mut buf)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}
