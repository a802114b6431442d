//! Prompt templates used by self-checking scorers and the long-form pipeline.
//!
//! Defaults are compiled in; every template can be overridden from a directory
//! of plain-text files so operators can retune prompts without rebuilding.
//! Placeholders use brace syntax, e.g. `{question}`, and are substituted
//! literally by `render`.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct PromptAssets {
    pub p_true: String,
    pub verbalized_confidence: String,
    pub paraphrase: String,
    pub decompose_step1: String,
    pub decompose_step2: String,
    pub question_generation: String,
    pub claim_answer: String,
    pub adversarial_meta: String,
}

impl Default for PromptAssets {
    fn default() -> Self {
        PromptAssets {
            p_true: include_str!("../../assets/prompts/p_true.txt").to_string(),
            verbalized_confidence: include_str!("../../assets/prompts/verbalized_confidence.txt")
                .to_string(),
            paraphrase: include_str!("../../assets/prompts/paraphrase.txt").to_string(),
            decompose_step1: include_str!("../../assets/prompts/decompose_step1.txt").to_string(),
            decompose_step2: include_str!("../../assets/prompts/decompose_step2.txt").to_string(),
            question_generation: include_str!("../../assets/prompts/question_generation.txt")
                .to_string(),
            claim_answer: include_str!("../../assets/prompts/claim_answer.txt").to_string(),
            adversarial_meta: include_str!("../../assets/prompts/adversarial_meta.txt").to_string(),
        }
    }
}

const ASSET_FILES: [&str; 8] = [
    "p_true.txt",
    "verbalized_confidence.txt",
    "paraphrase.txt",
    "decompose_step1.txt",
    "decompose_step2.txt",
    "question_generation.txt",
    "claim_answer.txt",
    "adversarial_meta.txt",
];

impl PromptAssets {
    /// Load all templates from `dir`. Every file of `ASSET_FILES` must exist.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut texts = Vec::with_capacity(ASSET_FILES.len());
        for name in ASSET_FILES {
            let path = dir.join(name);
            texts.push(std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?);
        }
        let mut it = texts.into_iter();
        Ok(PromptAssets {
            p_true: it.next().unwrap(),
            verbalized_confidence: it.next().unwrap(),
            paraphrase: it.next().unwrap(),
            decompose_step1: it.next().unwrap(),
            decompose_step2: it.next().unwrap(),
            question_generation: it.next().unwrap(),
            claim_answer: it.next().unwrap(),
            adversarial_meta: it.next().unwrap(),
        })
    }
}

/// Substitute `{name}` placeholders. Unknown placeholders are left untouched
/// so template edits fail loudly in prompts rather than silently vanishing.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (name, value) in vars {
        out = out.replace(&format!("{{{name}}}"), value);
    }
    out
}
