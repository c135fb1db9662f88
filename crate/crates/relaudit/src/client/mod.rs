//! Blocking client for OpenAI-compatible completion endpoints: transcript
//! generation, dedicated label-probe calls, and constrained-decoding repair.

pub mod mock;

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::TopKDistribution;
use crate::extraction::{build_constrained_continuation, EvaluatorVerdict, ExtractionRule};

/// Top-k window size for the dedicated label-extraction call.
pub const LABEL_PROBE_LOGPROBS: u32 = 200;
/// Generation budget for a constrained one-letter finalization.
pub const CONSTRAINED_MAX_NEW_TOKENS: u32 = 4;
/// Fixed request seed; greedy decoding plus this pins backend sampling.
pub const REQUEST_SEED: u64 = 42;
const BACKOFF_BASE_MS: u64 = 100;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("invalid backend config: {0}")]
    InvalidConfig(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("HTTP {status}: {body_snippet}")]
    Http { status: u16, body_snippet: String },
    #[error("transport failure after {attempts} attempts: {last}")]
    Transport { attempts: u32, last: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("logprobs were requested but the response carries none")]
    MissingLogprobs,
    #[error("backend rejected guided_choice; constrained repair needs a backend that supports it: {0}")]
    GuidedChoiceUnsupported(String),
    #[error("constrained call returned {got:?}, which is not a label letter")]
    LetterOutsideLabels { got: String },
    #[error("constrained finalization needs a non-empty label set")]
    EmptyLabelSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub base_url: String,
    pub model_name: String,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
    pub retry_limit: u32,
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), ClientError> {
        if self.max_in_flight == 0 {
            return Err(ClientError::InvalidConfig(
                "max_in_flight must be at least 1".into(),
            ));
        }
        if self.retry_limit > 5 {
            return Err(ClientError::InvalidConfig(format!(
                "retry_limit {} exceeds the bound of 5",
                self.retry_limit
            )));
        }
        if self.base_url.is_empty() {
            return Err(ClientError::InvalidConfig("base_url is empty".into()));
        }
        Ok(())
    }
}

/// One completion request. Decoding is always greedy; the temperature field
/// exists so the wire body states it explicitly.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub prompt: String,
    pub max_new_tokens: u32,
    pub temperature: f64,
    pub logprobs: Option<u32>,
    pub guided_choice: Option<Vec<char>>,
    pub seed: u64,
}

impl GenerationRequest {
    /// Plain text generation.
    pub fn text(prompt: impl Into<String>, max_new_tokens: u32) -> Self {
        GenerationRequest {
            prompt: prompt.into(),
            max_new_tokens,
            temperature: 0.0,
            logprobs: None,
            guided_choice: None,
            seed: REQUEST_SEED,
        }
    }

    /// The one-token label probe that feeds token-confidence metrics.
    pub fn label_probe(prompt: impl Into<String>) -> Self {
        GenerationRequest {
            logprobs: Some(LABEL_PROBE_LOGPROBS),
            ..Self::text(prompt, 1)
        }
    }

    /// Constrained one-letter finalization over a sorted label set.
    pub fn constrained(prompt: impl Into<String>, label_set: &[char]) -> Self {
        let mut labels = label_set.to_vec();
        labels.sort_unstable();
        labels.dedup();
        GenerationRequest {
            guided_choice: Some(labels),
            ..Self::text(prompt, CONSTRAINED_MAX_NEW_TOKENS)
        }
    }

    fn validate(&self) -> Result<(), ClientError> {
        if self.max_new_tokens == 0 {
            return Err(ClientError::InvalidRequest(
                "max_new_tokens must be positive".into(),
            ));
        }
        if self.temperature != 0.0 {
            return Err(ClientError::InvalidRequest(
                "decoding is pinned to temperature 0.0".into(),
            ));
        }
        if let Some(choices) = &self.guided_choice {
            if choices.is_empty() {
                return Err(ClientError::InvalidRequest(
                    "guided_choice must not be empty".into(),
                ));
            }
        }
        Ok(())
    }
}

// Wire body; field order is the serialization order, which request-body
// byte-stability tests pin.
#[derive(Serialize)]
struct CompletionBody<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: u32,
    temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    logprobs: Option<u32>,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    guided_choice: Option<Vec<String>>,
}

// Response shapes are deliberately lenient: real servers add fields freely.
#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<ChoiceWire>,
}

#[derive(Deserialize)]
struct ChoiceWire {
    text: String,
    #[serde(default)]
    logprobs: Option<LogprobsWire>,
}

#[derive(Deserialize)]
struct LogprobsWire {
    #[serde(default)]
    top_logprobs: Option<Vec<std::collections::BTreeMap<String, f64>>>,
}

/// Exact bytes `generate` sends for this config and request.
pub fn request_body(config: &BackendConfig, request: &GenerationRequest) -> Vec<u8> {
    let body = CompletionBody {
        model: &config.model_name,
        prompt: &request.prompt,
        max_tokens: request.max_new_tokens,
        temperature: request.temperature,
        logprobs: request.logprobs,
        seed: request.seed,
        guided_choice: request
            .guided_choice
            .as_ref()
            .map(|letters| letters.iter().map(char::to_string).collect()),
    };
    serde_json::to_vec(&body).expect("wire body serializes")
}

// ─── in-flight gate ───

#[derive(Debug)]
struct Semaphore {
    permits: Mutex<usize>,
    available: Condvar,
}

struct SemaphoreGuard<'a> {
    semaphore: &'a Semaphore,
}

impl Semaphore {
    fn new(permits: usize) -> Self {
        Semaphore {
            permits: Mutex::new(permits),
            available: Condvar::new(),
        }
    }

    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut permits = self.permits.lock().expect("semaphore lock");
        while *permits == 0 {
            permits = self.available.wait(permits).expect("semaphore wait");
        }
        *permits -= 1;
        SemaphoreGuard { semaphore: self }
    }
}

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        let mut permits = self.semaphore.permits.lock().expect("semaphore lock");
        *permits += 1;
        self.semaphore.available.notify_one();
    }
}

// ─── client ───

pub struct Client {
    config: BackendConfig,
    http: reqwest::blocking::Client,
    gate: Semaphore,
    api_key: Option<String>,
}

impl std::fmt::Debug for Client {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Client")
            .field("config", &self.config)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .finish_non_exhaustive()
    }
}

impl Client {
    /// Builds a client; reads `OPENAI_API_KEY` once for bearer-token
    /// pass-through.
    pub fn new(config: BackendConfig) -> Result<Self, ClientError> {
        config.validate()?;
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| ClientError::InvalidConfig(e.to_string()))?;
        let gate = Semaphore::new(config.max_in_flight);
        let api_key = std::env::var("OPENAI_API_KEY").ok();
        Ok(Client {
            config,
            http,
            gate,
            api_key,
        })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    /// One completion call. Holds an in-flight permit for the whole exchange,
    /// retries 5xx and transport failures with exponential backoff, and never
    /// retries 4xx.
    pub fn generate(
        &self,
        request: &GenerationRequest,
    ) -> Result<(String, Option<TopKDistribution>), ClientError> {
        request.validate()?;
        let _permit = self.gate.acquire();
        let body = request_body(&self.config, request);
        let url = format!("{}/v1/completions", self.config.base_url.trim_end_matches('/'));

        let mut last_transport = String::new();
        let attempts = self.config.retry_limit + 1;
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(
                    BACKOFF_BASE_MS << (attempt - 1).min(4),
                ));
            }
            let mut call = self
                .http
                .post(&url)
                .header("Content-Type", "application/json")
                .body(body.clone());
            if let Some(key) = &self.api_key {
                call = call.bearer_auth(key);
            }
            let response = match call.send() {
                Ok(response) => response,
                Err(error) => {
                    last_transport = error.to_string();
                    continue;
                }
            };
            let status = response.status().as_u16();
            let text = response
                .text()
                .map_err(|e| ClientError::MalformedResponse(e.to_string()))?;
            if (500..600).contains(&status) {
                last_transport = format!("HTTP {status}");
                continue;
            }
            if status != 200 {
                let snippet: String = text.chars().take(200).collect();
                if status == 400 && snippet.contains("guided_choice") {
                    return Err(ClientError::GuidedChoiceUnsupported(snippet));
                }
                return Err(ClientError::Http {
                    status,
                    body_snippet: snippet,
                });
            }
            return parse_completion(&text, request.logprobs);
        }
        Err(ClientError::Transport {
            attempts,
            last: last_transport,
        })
    }

    /// Constrained re-ask repair: append the finalization cue to the CoT
    /// text and force a one-letter completion from the label set.
    pub fn constrained_finalize(
        &self,
        cot_text: &str,
        label_set: &[char],
    ) -> Result<EvaluatorVerdict, ClientError> {
        if label_set.is_empty() {
            return Err(ClientError::EmptyLabelSet);
        }
        let continuation = build_constrained_continuation(cot_text);
        let request = GenerationRequest::constrained(continuation, label_set);
        let (text, _) = self.generate(&request)?;
        let trimmed = text.trim();
        let mut chars = trimmed.chars();
        let letter = match (chars.next(), chars.next()) {
            (Some(letter), None) if label_set.contains(&letter) => letter,
            _ => {
                return Err(ClientError::LetterOutsideLabels {
                    got: trimmed.to_string(),
                })
            }
        };
        Ok(EvaluatorVerdict {
            predicted_letter: Some(letter),
            rule_fired: ExtractionRule::Constrained,
            correct: None,
        })
    }
}

fn parse_completion(
    text: &str,
    logprobs_requested: Option<u32>,
) -> Result<(String, Option<TopKDistribution>), ClientError> {
    let parsed: CompletionResponse =
        serde_json::from_str(text).map_err(|e| ClientError::MalformedResponse(e.to_string()))?;
    let choice = parsed
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| ClientError::MalformedResponse("response has no choices".into()))?;
    let topk = match logprobs_requested {
        None => None,
        Some(k) => {
            let map = choice
                .logprobs
                .and_then(|lp| lp.top_logprobs)
                .and_then(|steps| steps.into_iter().next())
                .filter(|step| !step.is_empty())
                .ok_or(ClientError::MissingLogprobs)?;
            Some(
                TopKDistribution::from_logprobs(map, k as usize)
                    .map_err(ClientError::MalformedResponse)?,
            )
        }
    };
    Ok((choice.text, topk))
}
