//! JSON-over-HTTP client for an external multimodal scorer.
//!
//! Request: `{"model", "prompt", "images": [base64 PPM, …]}`; response:
//! `{"text"}`. The bearer token is read from an environment variable.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::microworld::Raster;
use crate::record::{EditRecord, ScorerExchange};

use super::{parse_lmm_response, pq_prompt, sc_prompt, ParsedScores, ScoreCard};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExternalScorerConfig {
    pub base_url: String,
    /// Name of the environment variable holding the bearer token.
    pub token_env: String,
    pub model: String,
    pub max_in_flight: usize,
    /// Retries after the first attempt.
    pub max_retries: u32,
    /// First backoff delay; doubles on every further retry.
    pub backoff_base_ms: u64,
    pub timeout_ms: u64,
}

impl Default for ExternalScorerConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8080/score".into(),
            token_env: "SHAPEEDIT_SCORER_TOKEN".into(),
            model: "scorer".into(),
            max_in_flight: 4,
            max_retries: 3,
            backoff_base_ms: 1000,
            timeout_ms: 30_000,
        }
    }
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    images: Vec<String>,
}

#[derive(Deserialize)]
struct ScoreResponse {
    text: String,
}

pub struct ExternalScorer {
    config: ExternalScorerConfig,
    agent: ureq::Agent,
    token: Option<String>,
    calls: AtomicUsize,
}

impl ExternalScorer {
    pub fn new(config: ExternalScorerConfig) -> Result<Self> {
        if config.max_in_flight == 0 {
            return Err(Error::Invalid("max_in_flight must be at least 1".into()));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .build()
            .into();
        let token = std::env::var(&config.token_env).ok();
        Ok(Self { config, agent, token, calls: AtomicUsize::new(0) })
    }

    pub fn config(&self) -> &ExternalScorerConfig {
        &self.config
    }

    /// HTTP requests issued so far, including retries.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn post(&self, prompt: &str, images: &[&Raster]) -> std::result::Result<String, String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let b64 = base64::engine::general_purpose::STANDARD;
        let body = ScoreRequest {
            model: &self.config.model,
            prompt,
            images: images.iter().map(|r| b64.encode(r.to_ppm())).collect(),
        };
        let mut req = self.agent.post(&self.config.base_url);
        if let Some(t) = &self.token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        let resp = req.send_json(&body).map_err(|e| e.to_string())?;
        let parsed: ScoreResponse = resp.into_body().read_json().map_err(|e| e.to_string())?;
        Ok(parsed.text)
    }

    /// One prompt with retries; transport failures and unparseable replies
    /// both consume an attempt.
    fn ask(&self, prompt: &str, images: &[&Raster], arity: usize) -> Result<(String, ParsedScores)> {
        let mut last = String::new();
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                let delay = self.config.backoff_base_ms.saturating_mul(1 << (attempt - 1).min(16));
                std::thread::sleep(Duration::from_millis(delay));
            }
            match self.post(prompt, images) {
                Ok(text) => match parse_lmm_response(&text, arity) {
                    Ok(p) => return Ok((text, p)),
                    Err(e) => last = format!("unparseable response ({e})"),
                },
                Err(e) => last = e,
            }
            log::debug!("scorer attempt {} failed: {last}", attempt + 1);
        }
        Err(Error::Scorer(format!("gave up after {} attempts: {last}", self.config.max_retries + 1)))
    }

    /// Scores one record with a semantic-consistency and a quality request.
    pub fn score(&self, record: &EditRecord) -> Result<(ScoreCard, ScorerExchange)> {
        let sc_p = sc_prompt(record)?;
        let pq_p = pq_prompt(record)?;
        let (sc_text, sc) = self.ask(&sc_p, &[&record.src, &record.edited], 2)?;
        let (pq_text, pq) = self.ask(&pq_p, &[&record.edited], 1)?;
        let reasoning = format!("{} | {}", sc.reasoning, pq.reasoning);
        let card = ScoreCard::new(sc.scores[0], sc.scores[1], pq.scores[0], reasoning)?;
        Ok((card, ScorerExchange { sc_prompt: sc_p, pq_prompt: pq_p, sc_response: sc_text, pq_response: pq_text }))
    }
}
