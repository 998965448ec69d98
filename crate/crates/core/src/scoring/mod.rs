//! Score cards, the binary importance weight, scorer prompts, response
//! parsing, and dataset-level scoring with either the exact oracle or an
//! external model endpoint.

mod dataset;
mod external;
mod oracle;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::record::EditRecord;

pub use dataset::{
    export_distillation, filter_records, score_dataset, write_distillation, DistillationSample, RetentionReport,
    ScoreOptions, ScorerEndpoint, TaskRetention,
};
pub use external::{ExternalScorer, ExternalScorerConfig};
pub use oracle::{grade_edit, oracle_score, roughness};

/// Default λ threshold on the 0–10 scale.
pub const DEFAULT_THRESHOLD: f64 = 9.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreCard {
    /// Editing success.
    pub sc1: u8,
    /// Absence of over-editing.
    pub sc2: u8,
    /// Perceptual quality.
    pub pq: u8,
    pub sc: u8,
    pub o: f64,
    pub reasoning: String,
}

impl ScoreCard {
    pub fn new(sc1: u8, sc2: u8, pq: u8, reasoning: impl Into<String>) -> Result<Self> {
        for v in [sc1, sc2, pq] {
            if v > 10 {
                return Err(Error::Parse(ParseError::OutOfRange(v as i64)));
            }
        }
        let sc = sc1.min(sc2);
        Ok(Self { sc1, sc2, pq, sc, o: overall(sc as f64, pq as f64), reasoning: reasoning.into() })
    }

    pub fn perfect() -> Self {
        Self::new(10, 10, 10, "").unwrap()
    }

    /// Card given to outputs that could not be produced (e.g. sampler failure).
    pub fn failed(reason: impl Into<String>) -> Self {
        Self::new(0, 0, 0, reason).unwrap()
    }
}

/// `O = √(SC · PQ)` on the 0–10 scale, i.e. `10·√((SC/10)·(PQ/10))`.
pub fn overall(sc: f64, pq: f64) -> f64 {
    (sc * pq).sqrt()
}

/// Statistic compared against the λ threshold.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterStatistic {
    #[default]
    Overall,
    ScOnly,
}

/// 1 iff `value ≥ threshold`.
pub fn lambda_from_value(value: f64, threshold: f64) -> u8 {
    (value >= threshold) as u8
}

pub fn lambda_weight(card: &ScoreCard, threshold: f64) -> u8 {
    lambda_from_value(card.o, threshold)
}

pub fn lambda_weight_with(card: &ScoreCard, threshold: f64, statistic: FilterStatistic) -> u8 {
    match statistic {
        FilterStatistic::Overall => lambda_from_value(card.o, threshold),
        FilterStatistic::ScOnly => lambda_from_value(card.sc as f64, threshold),
    }
}

const SC_TEMPLATE: &str = "You are judging an instruction-guided image edit.\n\
Two images are attached in this order: <image 1> is the original image and <image 2> is the edited result.\n\
Editing instruction: {instruction}\n\
\n\
Give two integers between 0 and 10.\n\
score1: how completely the edited image carries out the instruction. 0 means the instruction was not carried out at all; 10 means it was carried out exactly.\n\
score2: the degree of overediting. 0 means the edited image differs from the original far beyond what the instruction asked; 10 means nothing outside the requested change was altered.\n\
\n\
Answer with one JSON object and nothing else:\n\
{\"score\": [score1, score2], \"reasoning\": \"...\"}\n";

const PQ_TEMPLATE: &str = "You are judging the visual quality of a generated image.\n\
One image is attached: <image 1> is the image to judge.\n\
Check for distortions, noise, unnatural object shapes, and faint remnants of objects.\n\
\n\
Give one integer between 0 and 10, where 0 means the image is unusable and 10 indicates an artifact-free image.\n\
\n\
Answer with one JSON object and nothing else:\n\
{\"score\": score, \"reasoning\": \"...\"}\n";

/// Semantic-consistency prompt; images are sent as (source, edited).
pub fn sc_prompt(record: &EditRecord) -> Result<String> {
    let text = &record.instruction.surface_text;
    if text.trim().is_empty() {
        return Err(Error::Invalid(format!("record {} has no instruction text", record.id)));
    }
    Ok(SC_TEMPLATE.replace("{instruction}", text))
}

/// Perceptual-quality prompt; the edited image is sent alone.
pub fn pq_prompt(record: &EditRecord) -> Result<String> {
    if record.instruction.surface_text.trim().is_empty() {
        return Err(Error::Invalid(format!("record {} has no instruction text", record.id)));
    }
    Ok(PQ_TEMPLATE.to_string())
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("no JSON object found in response")]
    NoJson,
    #[error("response JSON has no `score` field")]
    MissingScore,
    #[error("expected {expected} score(s), found {found}")]
    Arity { expected: usize, found: usize },
    #[error("score is not an integer")]
    NotInteger,
    #[error("score {0} outside 0..=10")]
    OutOfRange(i64),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParsedScores {
    pub scores: Vec<u8>,
    pub reasoning: String,
}

/// Extracts the first JSON object in `text` and validates its `score` field:
/// a list of `arity` integers (or a bare integer when `arity == 1`), each in
/// `0..=10`.
pub fn parse_lmm_response(text: &str, arity: usize) -> std::result::Result<ParsedScores, ParseError> {
    let value = first_json_object(text).ok_or(ParseError::NoJson)?;
    let score = value.get("score").ok_or(ParseError::MissingScore)?;
    let items: Vec<&serde_json::Value> = match score {
        serde_json::Value::Array(a) => a.iter().collect(),
        other => vec![other],
    };
    if items.len() != arity {
        return Err(ParseError::Arity { expected: arity, found: items.len() });
    }
    let mut scores = Vec::with_capacity(arity);
    for v in items {
        let n = v.as_i64().ok_or(ParseError::NotInteger)?;
        if !(0..=10).contains(&n) {
            return Err(ParseError::OutOfRange(n));
        }
        scores.push(n as u8);
    }
    let reasoning = value.get("reasoning").and_then(|r| r.as_str()).unwrap_or_default().to_string();
    Ok(ParsedScores { scores, reasoning })
}

fn first_json_object(text: &str) -> Option<serde_json::Map<String, serde_json::Value>> {
    for (i, _) in text.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&text[i..]).into_iter::<serde_json::Value>();
        if let Some(Ok(serde_json::Value::Object(map))) = stream.next() {
            return Some(map);
        }
    }
    None
}

/// The response text an ideal scorer would return for `card`.
pub fn sc_response_text(card: &ScoreCard) -> String {
    serde_json::json!({"score": [card.sc1, card.sc2], "reasoning": card.reasoning}).to_string()
}

pub fn pq_response_text(card: &ScoreCard) -> String {
    serde_json::json!({"score": card.pq, "reasoning": card.reasoning}).to_string()
}
