//! Chat-style text/vision oracles behind one interface.
//!
//! Every model interaction goes through [`OracleClient`], which renders a
//! [`PromptTemplate`], applies a [`RetryPolicy`] and validates the reply. The
//! [`MockOracle`] answers from a scripted digest table with an optional
//! rule-based fallback, which keeps whole pipeline runs reproducible.

mod http;
mod mock;
pub mod rules;
mod template;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::HttpOracle;
pub use mock::{MockOracle, ScriptEntry};
pub use template::{bundled_templates, PromptTemplate, TemplateSet};

use crate::util::sha256_hex;

/// Environment variable holding the bearer token for HTTP oracles.
pub const TOKEN_ENV: &str = "DISCURATE_ORACLE_TOKEN";
pub const DEFAULT_MAX_TOKENS: u32 = 1024;
pub const DEFAULT_CONCURRENCY: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("missing binding for slot {0}")]
    MissingBinding(String),
    #[error("unknown template {0}")]
    UnknownTemplate(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("no scripted response for digest {0}")]
    Unscripted(String),
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: String },
    #[error("invalid oracle setup: {0}")]
    Config(String),
}

impl OracleError {
    fn retryable(&self) -> bool {
        matches!(self, OracleError::Transport(_))
    }
}

/// An image attached to a request, identified by content hash.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub path: PathBuf,
    pub sha256: String,
}

impl ImageRef {
    pub fn from_file(path: &Path) -> Result<Self, OracleError> {
        let bytes = std::fs::read(path).map_err(|e| {
            OracleError::Config(format!("cannot read image {}: {e}", path.display()))
        })?;
        Ok(Self {
            path: path.to_path_buf(),
            sha256: sha256_hex(&bytes),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleRequest {
    pub template: String,
    pub bindings: BTreeMap<String, String>,
    pub text: String,
    pub images: Vec<ImageRef>,
    pub max_tokens: u32,
}

impl OracleRequest {
    /// Stable key: template name, sorted bindings and image content hashes.
    pub fn digest(&self) -> String {
        let mut s = String::new();
        s.push_str(&self.template);
        s.push('\n');
        for (k, v) in &self.bindings {
            s.push_str(&format!("{}={}\u{1f}", k.len(), k));
            s.push_str(&format!("{}={}\u{1e}", v.len(), v));
        }
        for img in &self.images {
            s.push_str(&img.sha256);
            s.push('\n');
        }
        sha256_hex(s.as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResponse<T> {
    pub value: T,
    pub text: String,
    pub attempts: u32,
    pub latency: Duration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    /// Per-call timeout in milliseconds (HTTP only).
    pub timeout_ms: u64,
    /// Sleep before each retry, in milliseconds; the last entry repeats.
    pub backoff_ms: Vec<u64>,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            timeout_ms: 60_000,
            backoff_ms: vec![0],
        }
    }
}

impl RetryPolicy {
    pub fn validate(&self) -> Result<(), OracleError> {
        if self.max_attempts < 1 {
            return Err(OracleError::Config("max_attempts must be >= 1".into()));
        }
        Ok(())
    }

    fn backoff(&self, retry: u32) -> Duration {
        let ms = self
            .backoff_ms
            .get(retry as usize)
            .or(self.backoff_ms.last())
            .copied()
            .unwrap_or(0);
        Duration::from_millis(ms)
    }
}

/// A chat-completion backend.
pub trait Oracle: Send + Sync {
    fn complete(&self, request: &OracleRequest) -> Result<String, OracleError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum YesNo {
    Yes,
    No,
    Malformed,
}

/// Reads the first alphabetic token as a yes/no verdict.
pub fn validate_yes_no(text: &str) -> YesNo {
    let token: String = text
        .chars()
        .skip_while(|c| !c.is_alphabetic())
        .take_while(|c| c.is_alphabetic())
        .collect();
    match token.to_lowercase().as_str() {
        "yes" => YesNo::Yes,
        "no" => YesNo::No,
        _ => YesNo::Malformed,
    }
}

const VIEW_WORDS: &[&str] = &[
    "front", "back", "behind", "left", "right", "clock", "oclock",
];

/// Whether `text` contains a viewpoint-dependent word or a clock position.
pub fn contains_view_word(text: &str) -> bool {
    let lower = text
        .to_lowercase()
        .replace("o'clock", "oclock")
        .replace("o’clock", "oclock");
    lower
        .split(|c: char| !c.is_alphanumeric())
        .any(|t| VIEW_WORDS.contains(&t) || t.ends_with("oclock"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallRecord {
    pub template: String,
    pub digest: String,
    pub response: String,
}

struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            permits: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut p = self.permits.lock().expect("semaphore poisoned");
        while *p == 0 {
            p = self.cv.wait(p).expect("semaphore poisoned");
        }
        *p -= 1;
        SemaphoreGuard { sem: self }
    }
}

struct SemaphoreGuard<'a> {
    sem: &'a Semaphore,
}

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.sem.permits.lock().expect("semaphore poisoned") += 1;
        self.sem.cv.notify_one();
    }
}

/// Thread-safe handle combining a backend, its templates, a retry policy and a
/// bound on in-flight requests.
#[derive(Clone)]
pub struct OracleClient {
    inner: Arc<ClientInner>,
}

struct ClientInner {
    oracle: Arc<dyn Oracle>,
    templates: TemplateSet,
    policy: RetryPolicy,
    max_tokens: u32,
    semaphore: Semaphore,
    calls: AtomicUsize,
    log: Mutex<Vec<CallRecord>>,
}

impl std::fmt::Debug for OracleClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OracleClient")
            .field("policy", &self.inner.policy)
            .field("calls", &self.call_count())
            .finish()
    }
}

impl OracleClient {
    pub fn new(oracle: Arc<dyn Oracle>, policy: RetryPolicy, concurrency: usize) -> Self {
        Self::with_templates(oracle, bundled_templates().clone(), policy, concurrency)
    }

    pub fn with_templates(
        oracle: Arc<dyn Oracle>,
        templates: TemplateSet,
        policy: RetryPolicy,
        concurrency: usize,
    ) -> Self {
        Self {
            inner: Arc::new(ClientInner {
                oracle,
                templates,
                policy,
                max_tokens: DEFAULT_MAX_TOKENS,
                semaphore: Semaphore::new(concurrency),
                calls: AtomicUsize::new(0),
                log: Mutex::new(Vec::new()),
            }),
        }
    }

    /// A client around the deterministic rule-based mock.
    pub fn rule_mock() -> Self {
        Self::new(
            Arc::new(MockOracle::rule_based()),
            RetryPolicy::default(),
            DEFAULT_CONCURRENCY,
        )
    }

    pub fn templates(&self) -> &TemplateSet {
        &self.inner.templates
    }

    pub fn policy(&self) -> &RetryPolicy {
        &self.inner.policy
    }

    /// Number of backend invocations so far, retries included.
    pub fn call_count(&self) -> usize {
        self.inner.calls.load(Ordering::SeqCst)
    }

    /// Whether both handles share one backend and call counter.
    pub fn same_backend(&self, other: &OracleClient) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }

    /// Every completed backend call, in completion order.
    pub fn call_log(&self) -> Vec<CallRecord> {
        self.inner.log.lock().expect("log poisoned").clone()
    }

    pub fn request(
        &self,
        template: &str,
        bindings: BTreeMap<String, String>,
        images: Vec<ImageRef>,
    ) -> Result<OracleRequest, OracleError> {
        let t = self
            .inner
            .templates
            .get(template)
            .ok_or_else(|| OracleError::UnknownTemplate(template.to_string()))?;
        let text = t.render(&bindings)?;
        Ok(OracleRequest {
            template: template.to_string(),
            bindings,
            text,
            images,
            max_tokens: self.inner.max_tokens,
        })
    }

    /// Sends `request`, retrying on transport errors and on replies that
    /// `validate` rejects.
    pub fn call<T>(
        &self,
        request: &OracleRequest,
        validate: impl Fn(&str) -> Result<T, String>,
    ) -> Result<OracleResponse<T>, OracleError> {
        let policy = &self.inner.policy;
        let start = Instant::now();
        let mut last = String::from("no attempt made");
        for attempt in 1..=policy.max_attempts.max(1) {
            if attempt > 1 {
                let pause = policy.backoff(attempt - 2);
                if !pause.is_zero() {
                    std::thread::sleep(pause);
                }
            }
            let result = {
                let _permit = self.inner.semaphore.acquire();
                self.inner.calls.fetch_add(1, Ordering::SeqCst);
                self.inner.oracle.complete(request)
            };
            match result {
                Ok(text) => {
                    self.inner
                        .log
                        .lock()
                        .expect("log poisoned")
                        .push(CallRecord {
                            template: request.template.clone(),
                            digest: request.digest(),
                            response: text.clone(),
                        });
                    match validate(&text) {
                        Ok(value) => {
                            return Ok(OracleResponse {
                                value,
                                text,
                                attempts: attempt,
                                latency: start.elapsed(),
                            })
                        }
                        Err(why) => {
                            log::debug!("{}: rejected reply ({why})", request.template);
                            last = format!("invalid reply: {why}");
                        }
                    }
                }
                Err(e) if e.retryable() => {
                    log::debug!("{}: {e}", request.template);
                    last = e.to_string();
                }
                Err(e) => return Err(e),
            }
        }
        Err(OracleError::Exhausted {
            attempts: policy.max_attempts.max(1),
            last,
        })
    }

    /// Renders and sends in one step.
    pub fn ask<T>(
        &self,
        template: &str,
        bindings: BTreeMap<String, String>,
        images: Vec<ImageRef>,
        validate: impl Fn(&str) -> Result<T, String>,
    ) -> Result<OracleResponse<T>, OracleError> {
        let req = self.request(template, bindings, images)?;
        self.call(&req, validate)
    }

    /// Yes/no question; malformed replies are retried.
    pub fn ask_yes_no(
        &self,
        template: &str,
        bindings: BTreeMap<String, String>,
        images: Vec<ImageRef>,
    ) -> Result<OracleResponse<bool>, OracleError> {
        self.ask(template, bindings, images, |t| match validate_yes_no(t) {
            YesNo::Yes => Ok(true),
            YesNo::No => Ok(false),
            YesNo::Malformed => Err(format!("expected YES/NO, got {t:?}")),
        })
    }
}

/// Convenience for building binding maps.
pub fn bindings<const N: usize>(pairs: [(&str, &str); N]) -> BTreeMap<String, String> {
    pairs
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}
