//! Prompt construction and generation backends.
//!
//! [`HttpBackend`] talks to any OpenAI-compatible chat-completions server;
//! [`ReplayBackend`] serves canned candidates from a JSONL fixture file.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::schema::{to_output_schema, SchemaDef};

pub const INSTRUCTION: &str = "Your task is to extract the information for the fields provided below. \
Extract the information in JSON format according to the following JSON schema:";

pub const DEFAULT_GUIDELINES: [&str; 5] = [
    "Extract only the elements that are present verbatim in the document text. Do NOT infer any information.",
    "Extract each element EXACTLY as it appears in the document.",
    "Each value in the OCR can only be used AT MOST once. If a value can correspond to multiple fields, pick the best one.",
    "For each object, output all the keys from the schema even if the value is null. Empty lists should be outputted as lists with no elements.",
    "If no indication of tax is given, assume the amounts to be gross amounts.",
];

pub const CLOSING: &str = "Please read the text carefully and follow the instructions.";
pub const IMAGE_NOTE: &str = "An image of the document is provided below.";

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("OCR text is empty")]
    EmptyOcr,
    #[error("transport error talking to {endpoint}: {message}")]
    Transport { endpoint: String, message: String },
    #[error("authentication rejected by {endpoint} (HTTP {status})")]
    Auth { endpoint: String, status: u16 },
    #[error("unexpected response from {endpoint}: {message}")]
    Protocol { endpoint: String, message: String },
    #[error("no replay fixture for document `{doc_id}` sample {sample_index}")]
    MissingFixture { doc_id: String, sample_index: usize },
    #[error("fixture {path}:{line}: {message}")]
    Fixture { path: String, line: usize, message: String },
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

// ---------------------------------------------------------------------------
// Prompts

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub schema: Value,
    pub guidelines: Vec<String>,
    pub ocr_text: String,
    pub image_path: Option<PathBuf>,
    pub include_image: bool,
}

#[derive(Debug, Clone, Default)]
pub struct PromptOptions {
    /// Replaces the default guidelines; an empty list drops the section.
    pub guidelines: Option<Vec<String>>,
    pub image_path: Option<PathBuf>,
    pub include_image: bool,
}

pub fn build_prompt(schema: &SchemaDef, ocr_text: &str, opts: &PromptOptions) -> Result<PromptSpec, LlmError> {
    if ocr_text.trim().is_empty() {
        return Err(LlmError::EmptyOcr);
    }
    Ok(PromptSpec {
        schema: to_output_schema(schema),
        guidelines: opts
            .guidelines
            .clone()
            .unwrap_or_else(|| DEFAULT_GUIDELINES.iter().map(|s| s.to_string()).collect()),
        ocr_text: ocr_text.to_string(),
        image_path: opts.image_path.clone(),
        include_image: opts.include_image,
    })
}

impl PromptSpec {
    pub fn render(&self) -> String {
        let schema = serde_json::to_string_pretty(&self.schema).unwrap_or_default();
        let mut out = format!("{INSTRUCTION}\n{schema}\n\n");
        if !self.guidelines.is_empty() {
            out.push_str("Additional guidelines:\n");
            for g in &self.guidelines {
                out.push_str("- ");
                out.push_str(g);
                out.push('\n');
            }
        }
        out.push_str("<ocr>\n");
        out.push_str(&self.ocr_text);
        out.push_str("\n</ocr>\n");
        out.push_str(CLOSING);
        if self.include_image {
            out.push('\n');
            out.push_str(IMAGE_NOTE);
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Requests and candidates

#[derive(Debug, Clone)]
pub struct GenerationRequest {
    pub doc_id: String,
    pub prompt: PromptSpec,
    pub temperature: f64,
    pub n_samples: usize,
    pub max_tokens: Option<u32>,
    pub want_token_probs: bool,
    pub seed: Option<u64>,
}

impl GenerationRequest {
    /// Greedy decoding (temperature 0) always yields a single sample.
    pub fn new(doc_id: impl Into<String>, prompt: PromptSpec, temperature: f64, n_samples: usize) -> Self {
        let temperature = temperature.max(0.0);
        GenerationRequest {
            doc_id: doc_id.into(),
            prompt,
            temperature,
            n_samples: if temperature == 0.0 { 1 } else { n_samples.max(1) },
            max_tokens: None,
            want_token_probs: true,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenProb {
    pub t: String,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub doc_id: String,
    pub sample_index: usize,
    pub raw_text: String,
    #[serde(default)]
    pub tokens: Vec<TokenProb>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finish_reason: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeanKind {
    #[default]
    Arithmetic,
    Geometric,
}

impl Candidate {
    /// Mean token probability, `None` without tokens.
    pub fn mean_probability(&self, kind: MeanKind) -> Option<f64> {
        if self.tokens.is_empty() {
            return None;
        }
        let n = self.tokens.len() as f64;
        Some(match kind {
            MeanKind::Arithmetic => self.tokens.iter().map(|t| t.p).sum::<f64>() / n,
            MeanKind::Geometric => {
                if self.tokens.iter().any(|t| t.p <= 0.0) {
                    0.0
                } else {
                    (self.tokens.iter().map(|t| t.p.ln()).sum::<f64>() / n).exp()
                }
            }
        })
    }
}

const TIE_EPSILON: f64 = 1e-12;

/// Highest mean token probability wins; means within 1e-12 tie and go to the
/// lowest sample index. Candidates without tokens rank below all others.
pub fn select_best(candidates: &[Candidate], kind: MeanKind) -> Option<&Candidate> {
    let better = |a: &Candidate, b: &Candidate| -> bool {
        match (a.mean_probability(kind), b.mean_probability(kind)) {
            (Some(x), Some(y)) if (x - y).abs() > TIE_EPSILON => x > y,
            (Some(_), None) => true,
            (None, Some(_)) => false,
            _ => a.sample_index < b.sample_index,
        }
    };
    candidates
        .iter()
        .fold(None, |best: Option<&Candidate>, c| match best {
            Some(b) if !better(c, b) => Some(b),
            _ => Some(c),
        })
}

// ---------------------------------------------------------------------------
// Backends

pub trait Backend: Send + Sync {
    /// Returns exactly `req.n_samples` candidates, indexed from 0.
    fn generate(&self, req: &GenerationRequest) -> Result<Vec<Candidate>, LlmError>;
}

/// Candidates keyed by (document id, sample index).
#[derive(Debug, Default, Clone)]
pub struct ReplayBackend {
    fixtures: HashMap<(String, usize), Candidate>,
}

impl ReplayBackend {
    pub fn new(candidates: impl IntoIterator<Item = Candidate>) -> Self {
        ReplayBackend {
            fixtures: candidates
                .into_iter()
                .map(|c| ((c.doc_id.clone(), c.sample_index), c))
                .collect(),
        }
    }

    pub fn from_jsonl(path: &Path) -> Result<Self, LlmError> {
        let text = std::fs::read_to_string(path).map_err(|source| LlmError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut candidates = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let c: Candidate = serde_json::from_str(line).map_err(|e| LlmError::Fixture {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })?;
            candidates.push(c);
        }
        Ok(Self::new(candidates))
    }

    pub fn len(&self) -> usize {
        self.fixtures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fixtures.is_empty()
    }
}

impl Backend for ReplayBackend {
    fn generate(&self, req: &GenerationRequest) -> Result<Vec<Candidate>, LlmError> {
        (0..req.n_samples)
            .map(|i| {
                self.fixtures
                    .get(&(req.doc_id.clone(), i))
                    .cloned()
                    .ok_or_else(|| LlmError::MissingFixture {
                        doc_id: req.doc_id.clone(),
                        sample_index: i,
                    })
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct HttpConfig {
    /// Base URL such as `http://localhost:8000/v1`, or the full
    /// `/chat/completions` URL.
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    pub max_retries: u32,
    pub initial_backoff: Duration,
    pub timeout: Duration,
}

impl HttpConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        HttpConfig {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key: None,
            max_retries: 3,
            initial_backoff: Duration::from_millis(500),
            timeout: Duration::from_secs(300),
        }
    }

    fn url(&self) -> String {
        let base = self.endpoint.trim_end_matches('/');
        if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        }
    }
}

pub struct HttpBackend {
    config: HttpConfig,
    client: reqwest::blocking::Client,
}

enum Attempt {
    Retry(String),
    Fatal(LlmError),
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| LlmError::Transport {
                endpoint: config.endpoint.clone(),
                message: e.to_string(),
            })?;
        Ok(HttpBackend { config, client })
    }

    fn user_content(&self, prompt: &PromptSpec) -> Result<Value, LlmError> {
        let text = prompt.render();
        let image = match (&prompt.image_path, prompt.include_image) {
            (Some(path), true) => path,
            _ => return Ok(Value::String(text)),
        };
        let bytes = std::fs::read(image).map_err(|source| LlmError::Io {
            path: image.display().to_string(),
            source,
        })?;
        let mime = match image.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("png") => "image/png",
            Some("jpg" | "jpeg") => "image/jpeg",
            Some("webp") => "image/webp",
            Some("gif") => "image/gif",
            _ => "application/octet-stream",
        };
        let data = base64::engine::general_purpose::STANDARD.encode(bytes);
        Ok(json!([
            {"type": "text", "text": text},
            {"type": "image_url", "image_url": {"url": format!("data:{mime};base64,{data}")}},
        ]))
    }

    fn body(&self, req: &GenerationRequest, content: &Value, n: usize, round: u64) -> Value {
        let mut body = json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": content}],
            "temperature": req.temperature,
            "n": n,
        });
        if req.want_token_probs {
            body["logprobs"] = json!(true);
        }
        if let Some(max) = req.max_tokens {
            body["max_tokens"] = json!(max);
        }
        if let Some(seed) = req.seed {
            body["seed"] = json!(seed.wrapping_add(round));
        }
        body
    }

    fn post_once(&self, body: &Value) -> Result<Value, Attempt> {
        let mut request = self.client.post(self.config.url()).json(body);
        if let Some(key) = &self.config.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = response.status();
        if status.as_u16() == 401 || status.as_u16() == 403 {
            return Err(Attempt::Fatal(LlmError::Auth {
                endpoint: self.config.endpoint.clone(),
                status: status.as_u16(),
            }));
        }
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(Attempt::Retry(format!("HTTP {status}")));
        }
        let text = response.text().map_err(|e| Attempt::Retry(e.to_string()))?;
        if !status.is_success() {
            return Err(Attempt::Fatal(self.protocol(format!("HTTP {status}: {text}"))));
        }
        serde_json::from_str(&text).map_err(|e| Attempt::Fatal(self.protocol(format!("invalid JSON body: {e}"))))
    }

    fn post(&self, body: &Value) -> Result<Value, LlmError> {
        let mut backoff = self.config.initial_backoff;
        let mut attempt = 0;
        loop {
            match self.post_once(body) {
                Ok(v) => return Ok(v),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(message)) => {
                    if attempt >= self.config.max_retries {
                        return Err(LlmError::Transport {
                            endpoint: self.config.endpoint.clone(),
                            message: format!("{message} (after {} attempts)", attempt + 1),
                        });
                    }
                    log::warn!("{}: {message}; retrying in {backoff:?}", self.config.endpoint);
                    thread::sleep(backoff);
                    backoff *= 2;
                    attempt += 1;
                }
            }
        }
    }

    fn protocol(&self, message: String) -> LlmError {
        LlmError::Protocol {
            endpoint: self.config.endpoint.clone(),
            message,
        }
    }
}

/// (text, tokens, finish reason) of one returned choice.
type Choice = (String, Vec<TokenProb>, Option<String>);

fn parse_choices(body: &Value) -> Option<Vec<Choice>> {
    let choices = body.get("choices")?.as_array()?;
    let mut out = Vec::with_capacity(choices.len());
    for choice in choices {
        let text = match &choice["message"]["content"] {
            Value::String(s) => s.clone(),
            Value::Null => String::new(),
            _ => return None,
        };
        let tokens = choice["logprobs"]["content"]
            .as_array()
            .map(|entries| {
                entries
                    .iter()
                    .filter_map(|e| {
                        let t = e.get("token")?.as_str()?.to_string();
                        let lp = e.get("logprob")?.as_f64()?;
                        Some(TokenProb {
                            t,
                            p: lp.exp().clamp(0.0, 1.0),
                        })
                    })
                    .collect()
            })
            .unwrap_or_default();
        let finish = choice["finish_reason"].as_str().map(str::to_string);
        out.push((text, tokens, finish));
    }
    Some(out)
}

impl Backend for HttpBackend {
    fn generate(&self, req: &GenerationRequest) -> Result<Vec<Candidate>, LlmError> {
        let content = self.user_content(&req.prompt)?;
        let mut candidates: Vec<Candidate> = Vec::with_capacity(req.n_samples);
        let mut round = 0;
        // servers may return fewer choices than asked; top up until complete
        while candidates.len() < req.n_samples {
            let missing = req.n_samples - candidates.len();
            let body = self.post(&self.body(req, &content, missing, round))?;
            let choices = parse_choices(&body).ok_or_else(|| self.protocol("missing or malformed `choices`".into()))?;
            if choices.is_empty() {
                return Err(self.protocol("response contained no choices".into()));
            }
            for (text, tokens, finish_reason) in choices.into_iter().take(missing) {
                if req.want_token_probs && tokens.is_empty() {
                    log::warn!(
                        "{}: no token probabilities for `{}`; selection falls back to sample order",
                        self.config.endpoint,
                        req.doc_id
                    );
                }
                candidates.push(Candidate {
                    doc_id: req.doc_id.clone(),
                    sample_index: candidates.len(),
                    raw_text: text,
                    tokens,
                    finish_reason,
                });
            }
            round += 1;
        }
        Ok(candidates)
    }
}
