//! Generation interface over the model pool: scripted mocks and an
//! OpenAI-compatible chat-completions client, both reporting token
//! log-probabilities, token counts and latency.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arith;
use crate::confidence::TokenLogProbs;
use crate::error::{Error, Result};
use crate::state::ModelId;

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub prompt: String,
    pub max_tokens: u32,
    /// Decoding is always greedy.
    pub temperature: f64,
    /// Drives seeded mock behaviour; ignored by remote backends.
    pub seed: u64,
}

impl GenerationRequest {
    pub fn new(prompt: impl Into<String>, max_tokens: u32, seed: u64) -> Self {
        Self {
            prompt: prompt.into(),
            max_tokens,
            temperature: 0.0,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub token_logprobs: TokenLogProbs,
    pub tokens_in: u64,
    pub tokens_out: u64,
    pub latency_s: f64,
}

pub trait Backend: Send + Sync {
    fn generate(&self, req: &GenerationRequest) -> Result<Completion>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LogprobSpec {
    Constant(f64),
    /// Cycled when shorter than the response.
    Sequence(Vec<f64>),
}

impl LogprobSpec {
    fn expand(&self, n: usize) -> Vec<f64> {
        match self {
            LogprobSpec::Constant(v) => vec![*v; n],
            LogprobSpec::Sequence(seq) if seq.is_empty() => vec![0.0; n],
            LogprobSpec::Sequence(seq) => seq.iter().copied().cycle().take(n).collect(),
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = match self {
            LogprobSpec::Constant(v) => !(v.is_finite() && *v <= 0.0),
            LogprobSpec::Sequence(s) => s.iter().any(|v| !(v.is_finite() && *v <= 0.0)),
        };
        if bad {
            return Err(Error::Config("mock logprobs must be finite and <= 0".into()));
        }
        Ok(())
    }
}

/// One scripted response.
///
/// `response` may contain `{solution}` (value of the first arithmetic
/// expression found in the prompt) and `{wrong}` (that value plus one).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockRule {
    /// Prompt substring; empty matches everything.
    #[serde(default)]
    pub matcher: String,
    pub response: String,
    pub logprob: LogprobSpec,
    /// Filler tokens emitted before the response (a reasoning trace stand-in).
    #[serde(default)]
    pub reasoning_tokens: usize,
    /// Probability of a simulated transient failure, drawn from the request seed.
    #[serde(default)]
    pub error_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockScript {
    #[serde(default)]
    pub rules: Vec<MockRule>,
    pub default: MockRule,
}

impl MockScript {
    pub fn validate(&self) -> Result<()> {
        for r in self.rules.iter().chain(std::iter::once(&self.default)) {
            r.logprob.validate()?;
            if !(0.0..=1.0).contains(&r.error_rate) {
                return Err(Error::Config("mock error_rate must be in [0, 1]".into()));
            }
            if r.response.split_whitespace().next().is_none() && r.reasoning_tokens == 0 {
                return Err(Error::Config("mock response must contain at least one token".into()));
            }
        }
        Ok(())
    }

    /// First matching rule in declaration order, else the default.
    pub fn rule_for(&self, prompt: &str) -> &MockRule {
        self.rules
            .iter()
            .find(|r| prompt.contains(&r.matcher))
            .unwrap_or(&self.default)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum BackendKind {
    Mock {
        script: MockScript,
        #[serde(default)]
        latency_per_token: f64,
    },
    Remote {
        base_url: String,
        auth_env: String,
        /// Provider-side model name.
        model_name: String,
        #[serde(default = "default_timeout")]
        timeout_s: f64,
        #[serde(default = "default_in_flight")]
        max_in_flight: usize,
        #[serde(default = "default_backoff")]
        retry_backoff_s: f64,
    },
}

fn default_timeout() -> f64 {
    60.0
}

fn default_in_flight() -> usize {
    8
}

fn default_backoff() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendSpec {
    /// Must name an entry of the price table.
    pub model: String,
    #[serde(flatten)]
    pub kind: BackendKind,
}

impl BackendSpec {
    pub fn build(&self) -> Result<Box<dyn Backend>> {
        match &self.kind {
            BackendKind::Mock {
                script,
                latency_per_token,
            } => {
                script.validate()?;
                if !(*latency_per_token >= 0.0) {
                    return Err(Error::Config("latency_per_token must be >= 0".into()));
                }
                Ok(Box::new(MockBackend::new(script.clone(), *latency_per_token)))
            }
            BackendKind::Remote {
                base_url,
                auth_env,
                model_name,
                timeout_s,
                max_in_flight,
                retry_backoff_s,
            } => Ok(Box::new(RemoteBackend::new(
                base_url,
                auth_env,
                model_name,
                Duration::from_secs_f64(*timeout_s),
                *max_in_flight,
                Duration::from_secs_f64(*retry_backoff_s),
            )?)),
        }
    }
}

/// Whitespace token count.
pub fn count_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

/// Deterministic scripted backend.
#[derive(Debug, Clone)]
pub struct MockBackend {
    script: MockScript,
    latency_per_token: f64,
}

impl MockBackend {
    pub fn new(script: MockScript, latency_per_token: f64) -> Self {
        Self {
            script,
            latency_per_token,
        }
    }

    fn render(rule: &MockRule, prompt: &str) -> String {
        let mut text = String::new();
        if rule.reasoning_tokens > 0 {
            text.push_str(&vec!["step"; rule.reasoning_tokens].join(" "));
            text.push('\n');
        }
        let mut response = rule.response.clone();
        if response.contains("{solution}") || response.contains("{wrong}") {
            let value = arith::find_expression(prompt).map(|(_, v)| v);
            let solution = value.map_or_else(|| "unknown".to_string(), arith::format_number);
            let wrong = value.map_or_else(|| "unknown".to_string(), |v| arith::format_number(v + 1.0));
            response = response.replace("{solution}", &solution).replace("{wrong}", &wrong);
        }
        text.push_str(&response);
        text
    }
}

fn prompt_seed(seed: u64, prompt: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(prompt.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

impl Backend for MockBackend {
    fn generate(&self, req: &GenerationRequest) -> Result<Completion> {
        if req.prompt.trim().is_empty() {
            return Err(Error::InvalidArgument("empty prompt".into()));
        }
        let rule = self.script.rule_for(&req.prompt);
        if rule.error_rate > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(prompt_seed(req.seed, &req.prompt));
            if rng.random::<f64>() < rule.error_rate {
                return Err(Error::Backend("simulated transient failure".into()));
            }
        }
        let text = Self::render(rule, &req.prompt);
        let tokens_out = count_tokens(&text);
        let token_logprobs = TokenLogProbs::new(rule.logprob.expand(tokens_out as usize))?;
        Ok(Completion {
            text,
            token_logprobs,
            tokens_in: count_tokens(&req.prompt),
            tokens_out,
            latency_s: tokens_out as f64 * self.latency_per_token,
        })
    }
}

/// Counting semaphore bounding concurrent requests.
struct InFlight {
    count: Mutex<usize>,
    cv: Condvar,
    cap: usize,
}

impl InFlight {
    fn acquire(&self) -> InFlightGuard<'_> {
        let mut n = self.count.lock().expect("in-flight lock");
        while *n >= self.cap {
            n = self.cv.wait(n).expect("in-flight wait");
        }
        *n += 1;
        InFlightGuard(self)
    }
}

struct InFlightGuard<'a>(&'a InFlight);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        *self.0.count.lock().expect("in-flight lock") -= 1;
        self.0.cv.notify_one();
    }
}

pub const MAX_ATTEMPTS: u32 = 3;

/// OpenAI-compatible chat-completions client with logprobs enabled.
pub struct RemoteBackend {
    client: reqwest::blocking::Client,
    url: String,
    auth_env: String,
    model_name: String,
    in_flight: InFlight,
    backoff: Duration,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    usage: Option<ChatUsage>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
    #[serde(default)]
    logprobs: Option<ChoiceLogprobs>,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChoiceLogprobs {
    #[serde(default)]
    content: Option<Vec<TokenLogprob>>,
}

#[derive(Deserialize)]
struct TokenLogprob {
    logprob: f64,
}

#[derive(Deserialize)]
struct ChatUsage {
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: Option<u64>,
}

enum Attempt {
    Retry(String),
    Fatal(Error),
}

impl RemoteBackend {
    pub fn new(
        base_url: &str,
        auth_env: &str,
        model_name: &str,
        timeout: Duration,
        max_in_flight: usize,
        backoff: Duration,
    ) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        Ok(Self {
            client,
            url: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            auth_env: auth_env.to_string(),
            model_name: model_name.to_string(),
            in_flight: InFlight {
                count: Mutex::new(0),
                cv: Condvar::new(),
                cap: max_in_flight.max(1),
            },
            backoff,
        })
    }

    fn attempt(&self, req: &GenerationRequest) -> std::result::Result<(String, Vec<f64>, Option<ChatUsage>), Attempt> {
        let body = serde_json::json!({
            "model": self.model_name,
            "messages": [{ "role": "user", "content": req.prompt }],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
            "logprobs": true,
        });
        let mut http = self.client.post(&self.url).json(&body);
        if let Ok(token) = std::env::var(&self.auth_env) {
            http = http.bearer_auth(token);
        }
        let resp = http.send().map_err(|e| Attempt::Retry(format!("transport: {e}")))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(Attempt::Retry(format!("http status {status}")));
        }
        let parsed: ChatResponse = resp
            .json()
            .map_err(|e| Attempt::Retry(format!("malformed response: {e}")))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| Attempt::Retry("response has no choices".into()))?;
        let logprobs = choice
            .logprobs
            .and_then(|l| l.content)
            .ok_or_else(|| {
                Attempt::Fatal(Error::BackendConfig(format!(
                    "{} returned no token logprobs",
                    self.model_name
                )))
            })?
            .into_iter()
            .map(|t| t.logprob.min(0.0))
            .collect();
        Ok((choice.message.content.unwrap_or_default(), logprobs, parsed.usage))
    }
}

impl Backend for RemoteBackend {
    fn generate(&self, req: &GenerationRequest) -> Result<Completion> {
        if req.prompt.trim().is_empty() {
            return Err(Error::InvalidArgument("empty prompt".into()));
        }
        let _slot = self.in_flight.acquire();
        let started = Instant::now();
        let mut last = String::new();
        for attempt in 0..MAX_ATTEMPTS {
            if attempt > 0 {
                std::thread::sleep(self.backoff * 2u32.pow(attempt - 1));
            }
            match self.attempt(req) {
                Ok((text, logprobs, usage)) => {
                    let tokens_out = logprobs.len() as u64;
                    if let Some(reported) = usage.as_ref().and_then(|u| u.completion_tokens) {
                        if reported != tokens_out {
                            tracing::warn!(
                                reported,
                                tokens_out,
                                "completion_tokens disagrees with logprob count; using logprob count"
                            );
                        }
                    }
                    let tokens_in = usage.map_or_else(|| count_tokens(&req.prompt), |u| u.prompt_tokens);
                    return Ok(Completion {
                        text,
                        token_logprobs: TokenLogProbs::new(logprobs)?,
                        tokens_in,
                        tokens_out,
                        latency_s: started.elapsed().as_secs_f64(),
                    });
                }
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(msg)) => {
                    tracing::warn!(attempt, %msg, "backend call failed");
                    last = msg;
                }
            }
        }
        Err(Error::Backend(format!(
            "{} failed after {MAX_ATTEMPTS} attempts: {last}",
            self.model_name
        )))
    }
}

struct PoolEntry {
    backend: Box<dyn Backend>,
    calls: AtomicU64,
}

/// Registered backends with per-backend call counters.
pub struct BackendPool {
    entries: IndexMap<ModelId, PoolEntry>,
}

impl BackendPool {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    pub fn register(&mut self, model: ModelId, backend: Box<dyn Backend>) -> Result<()> {
        if self.entries.contains_key(&model) {
            return Err(Error::Config(format!("backend {model} registered twice")));
        }
        self.entries.insert(
            model,
            PoolEntry {
                backend,
                calls: AtomicU64::new(0),
            },
        );
        Ok(())
    }

    pub fn models(&self) -> Vec<ModelId> {
        self.entries.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, model: &ModelId) -> Option<usize> {
        self.entries.get_index_of(model)
    }

    pub fn model_at(&self, idx: usize) -> &ModelId {
        self.entries.get_index(idx).expect("backend index").0
    }

    pub fn generate(&self, idx: usize, req: &GenerationRequest) -> Result<Completion> {
        let (_, entry) = self
            .entries
            .get_index(idx)
            .ok_or_else(|| Error::InvalidArgument(format!("backend index {idx}")))?;
        entry.calls.fetch_add(1, Ordering::SeqCst);
        entry.backend.generate(req)
    }

    pub fn count_calls(&self, model: &ModelId) -> u64 {
        self.entries
            .get(model)
            .map_or(0, |e| e.calls.load(Ordering::SeqCst))
    }

    pub fn total_calls(&self) -> u64 {
        self.entries.values().map(|e| e.calls.load(Ordering::SeqCst)).sum()
    }

    pub fn reset_counters(&self) {
        for e in self.entries.values() {
            e.calls.store(0, Ordering::SeqCst);
        }
    }
}

impl Default for BackendPool {
    fn default() -> Self {
        Self::new()
    }
}
