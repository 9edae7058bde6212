//! Model backends behind one interface, and the client that owns retries,
//! concurrency permits and the call ledger.

mod embedders;
#[cfg(feature = "http")]
pub mod http;
mod stub;
mod toy;

use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::digest::{canonical_json, sha256_hex};
use crate::error::{Error, Result};

pub use embedders::{BasisEmbedder, ExactTextEmbedder, HashedEmbedder, TableEmbedder};
pub use stub::{FlakyProvider, ReplayProvider, ScheduledScorer, StubProvider};
pub use toy::ToyProvider;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capability {
    Generate,
    Judge,
    Embed,
}

impl std::fmt::Display for Capability {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Capability::Generate => "generate",
            Capability::Judge => "judge",
            Capability::Embed => "embed",
        })
    }
}

/// What a request is for. Real backends ignore it; stubs dispatch on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Extract,
    AuthorAnchors,
    AuthorCore,
    AuthorPredictions,
    Compose,
    GenerateQuestions,
    Respond,
    Judge,
}

impl PromptKind {
    pub fn capability(self) -> Capability {
        match self {
            PromptKind::Judge => Capability::Judge,
            _ => Capability::Generate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl GenParams {
    /// Parameters every response-generation call in a study run must use.
    pub const STUDY: GenParams = GenParams {
        temperature: 0.0,
        max_output_tokens: 1024,
    };

    pub fn is_study_pinned(&self) -> bool {
        *self == Self::STUDY
    }
}

impl Default for GenParams {
    fn default() -> Self {
        Self::STUDY
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub kind: PromptKind,
    pub system: String,
    pub user: String,
    pub params: GenParams,
}

impl Request {
    pub fn new(kind: PromptKind, system: impl Into<String>, user: impl Into<String>) -> Self {
        Self {
            kind,
            system: system.into(),
            user: user.into(),
            params: GenParams::STUDY,
        }
    }
}

/// Error returned by a backend for a single attempt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CallError {
    /// Rate limit or transient server failure; retried.
    Transient(String),
    /// Retrying will not help.
    Fatal(String),
}

impl CallError {
    fn message(&self) -> &str {
        match self {
            CallError::Transient(m) | CallError::Fatal(m) => m,
        }
    }
}

pub trait ModelProvider: Send + Sync {
    fn provider_id(&self) -> &str;
    fn capabilities(&self) -> Vec<Capability>;
    /// Environment variable that must hold a credential, if any.
    fn credential_var(&self) -> Option<String> {
        None
    }
    fn complete(&self, request: &Request) -> std::result::Result<String, CallError>;
    fn embed_batch(&self, _texts: &[String]) -> std::result::Result<Vec<Vec<f64>>, CallError> {
        Err(CallError::Fatal("embedding not supported".into()))
    }
}

/// `REPACC_<PROVIDER>_KEY`, with the provider name upper-cased and every
/// non-alphanumeric character mapped to `_`.
pub fn credential_var_for(provider: &str) -> String {
    let name: String = provider
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_uppercase()
            } else {
                '_'
            }
        })
        .collect();
    format!("REPACC_{name}_KEY")
}

pub fn check_credentials(provider: &dyn ModelProvider) -> Result<()> {
    if let Some(var) = provider.credential_var() {
        match std::env::var(&var) {
            Ok(v) if !v.trim().is_empty() => {}
            _ => return Err(Error::AuthMissing(var)),
        }
    }
    Ok(())
}

/// Hex SHA-256 over the canonical form of (provider, request).
pub fn request_digest(provider_id: &str, request: &Request) -> String {
    let body = json!({ "provider": provider_id, "request": request });
    sha256_hex(canonical_json(&body).expect("request serializes"))
}

fn embed_digest(provider_id: &str, texts: &[String]) -> String {
    let body = json!({ "provider": provider_id, "embed": texts });
    sha256_hex(canonical_json(&body).expect("texts serialize"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Ok,
    RateLimitedRecovered,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallRecord {
    pub provider_id: String,
    /// `None` for embedding calls.
    pub kind: Option<PromptKind>,
    pub request_digest: String,
    pub response_text: String,
    pub latency_ms: u64,
    pub attempts: u32,
    pub outcome: Outcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl CallRecord {
    pub fn is_failed(&self) -> bool {
        self.outcome == Outcome::Failed
    }
}

/// Append-only record of every outbound call.
#[derive(Debug, Default)]
pub struct CallLedger {
    records: Mutex<Vec<CallRecord>>,
}

impl CallLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(&self, record: CallRecord) {
        self.records.lock().expect("ledger lock").push(record);
    }

    pub fn len(&self) -> usize {
        self.records.lock().expect("ledger lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn records(&self) -> Vec<CallRecord> {
        self.records.lock().expect("ledger lock").clone()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in self.records.lock().expect("ledger lock").iter() {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(s: &str) -> Result<Self> {
        let records = s
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<CallRecord>, _>>()?;
        Ok(Self {
            records: Mutex::new(records),
        })
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_jsonl()?.as_bytes())?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub base_delay_ms: u64,
    pub factor: f64,
    pub max_attempts: u32,
    /// Multiplicative jitter half-width: delays vary by up to ±`jitter`.
    pub jitter: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            base_delay_ms: 1000,
            factor: 2.0,
            max_attempts: 5,
            jitter: 0.25,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (1-based). Jitter is drawn from a
    /// generator seeded by the request digest so retries replay exactly.
    pub fn delay(&self, retry: u32, digest: &str) -> Duration {
        let nominal = self.base_delay_ms as f64 * self.factor.powi(retry as i32 - 1);
        let seed = u64::from_str_radix(digest.get(..16).unwrap_or("0"), 16).unwrap_or(0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ u64::from(retry));
        let scale = 1.0 + self.jitter * rng.gen_range(-1.0..=1.0);
        Duration::from_millis((nominal * scale).max(0.0).round() as u64)
    }
}

pub trait Sleeper: Send + Sync {
    fn sleep(&self, d: Duration);
}

pub struct ThreadSleeper;

impl Sleeper for ThreadSleeper {
    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

/// Records requested delays without waiting.
#[derive(Default)]
pub struct RecordingSleeper {
    pub slept: Mutex<Vec<Duration>>,
}

impl Sleeper for RecordingSleeper {
    fn sleep(&self, d: Duration) {
        self.slept.lock().expect("sleeper lock").push(d);
    }
}

/// Source of call latencies. `Frozen` reports zero so ledgers are
/// byte-reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Clock {
    #[default]
    System,
    Frozen,
}

/// Counting semaphore bounding in-flight calls per provider.
#[derive(Debug)]
pub struct Permits {
    available: Mutex<usize>,
    cv: Condvar,
}

pub struct PermitGuard<'a>(&'a Permits);

impl Permits {
    pub fn new(n: usize) -> Self {
        Self {
            available: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> PermitGuard<'_> {
        let mut n = self.available.lock().expect("permit lock");
        while *n == 0 {
            n = self.cv.wait(n).expect("permit lock");
        }
        *n -= 1;
        PermitGuard(self)
    }
}

impl Drop for PermitGuard<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().expect("permit lock") += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub dims: usize,
    pub values: Vec<f64>,
    pub normalized: bool,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>, normalize: bool) -> Self {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if normalize && norm > 0.0 {
            Self {
                dims: values.len(),
                values: values.iter().map(|v| v / norm).collect(),
                normalized: true,
            }
        } else {
            Self {
                dims: values.len(),
                values,
                normalized: false,
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        let dot: f64 = self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum();
        let denom = self.norm() * other.norm();
        if denom == 0.0 {
            0.0
        } else {
            dot / denom
        }
    }
}

/// A provider plus its retry policy, permits and ledger. Cheap to clone;
/// clones share the ledger and permits.
#[derive(Clone)]
pub struct Client {
    provider: Arc<dyn ModelProvider>,
    policy: RetryPolicy,
    sleeper: Arc<dyn Sleeper>,
    permits: Arc<Permits>,
    ledger: Arc<CallLedger>,
    clock: Clock,
}

impl Client {
    /// Fails with `AuthMissing` before any call when a required credential
    /// variable is unset.
    pub fn new(provider: Arc<dyn ModelProvider>) -> Result<Self> {
        check_credentials(provider.as_ref())?;
        Ok(Self {
            provider,
            policy: RetryPolicy::default(),
            sleeper: Arc::new(ThreadSleeper),
            permits: Arc::new(Permits::new(4)),
            ledger: Arc::new(CallLedger::new()),
            clock: Clock::System,
        })
    }

    /// Offline configuration: frozen clock, no real sleeping.
    pub fn deterministic(provider: Arc<dyn ModelProvider>) -> Result<Self> {
        Ok(Self::new(provider)?
            .with_clock(Clock::Frozen)
            .with_sleeper(Arc::new(RecordingSleeper::default())))
    }

    pub fn with_policy(mut self, policy: RetryPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn with_sleeper(mut self, sleeper: Arc<dyn Sleeper>) -> Self {
        self.sleeper = sleeper;
        self
    }

    pub fn with_permits(mut self, n: usize) -> Self {
        self.permits = Arc::new(Permits::new(n));
        self
    }

    pub fn with_ledger(mut self, ledger: Arc<CallLedger>) -> Self {
        self.ledger = ledger;
        self
    }

    pub fn with_clock(mut self, clock: Clock) -> Self {
        self.clock = clock;
        self
    }

    pub fn provider_id(&self) -> &str {
        self.provider.provider_id()
    }

    pub fn provider(&self) -> &Arc<dyn ModelProvider> {
        &self.provider
    }

    pub fn ledger(&self) -> &Arc<CallLedger> {
        &self.ledger
    }

    pub fn has(&self, cap: Capability) -> bool {
        self.provider.capabilities().contains(&cap)
    }

    fn require(&self, cap: Capability) -> Result<()> {
        if self.has(cap) {
            Ok(())
        } else {
            Err(Error::MissingCapability {
                provider: self.provider_id().to_string(),
                capability: cap.to_string(),
            })
        }
    }

    fn with_retries<T>(
        &self,
        digest: &str,
        mut attempt: impl FnMut() -> std::result::Result<T, CallError>,
    ) -> (std::result::Result<T, CallError>, u32, u64) {
        let _permit = self.permits.acquire();
        let started = Instant::now();
        let mut attempts = 0;
        let result = loop {
            attempts += 1;
            match attempt() {
                Ok(v) => break Ok(v),
                Err(e @ CallError::Fatal(_)) => break Err(e),
                Err(e) if attempts >= self.policy.max_attempts => break Err(e),
                Err(CallError::Transient(msg)) => {
                    log::debug!("{}: transient failure ({msg}); retrying", self.provider_id());
                    self.sleeper.sleep(self.policy.delay(attempts, digest));
                }
            }
        };
        let latency = match self.clock {
            Clock::System => started.elapsed().as_millis() as u64,
            Clock::Frozen => 0,
        };
        (result, attempts, latency)
    }

    /// Execute a request under the retry contract. Never fails on provider
    /// errors: exhaustion yields a `Failed` record, which is also appended
    /// to the ledger.
    pub fn call(&self, request: &Request) -> Result<CallRecord> {
        self.require(request.kind.capability())?;
        let digest = request_digest(self.provider_id(), request);
        let (result, attempts, latency_ms) =
            self.with_retries(&digest, || self.provider.complete(request));
        let record = match result {
            Ok(text) => CallRecord {
                provider_id: self.provider_id().to_string(),
                kind: Some(request.kind),
                request_digest: digest,
                response_text: text,
                latency_ms,
                attempts,
                outcome: if attempts == 1 {
                    Outcome::Ok
                } else {
                    Outcome::RateLimitedRecovered
                },
                error: None,
            },
            Err(e) => CallRecord {
                provider_id: self.provider_id().to_string(),
                kind: Some(request.kind),
                request_digest: digest,
                response_text: String::new(),
                latency_ms,
                attempts,
                outcome: Outcome::Failed,
                error: Some(e.message().to_string()),
            },
        };
        self.ledger.append(record.clone());
        Ok(record)
    }

    /// Like [`Client::call`] but turns a failed record into `ProviderFailure`.
    pub fn generate(&self, request: &Request) -> Result<(String, CallRecord)> {
        let record = self.call(request)?;
        if record.is_failed() {
            return Err(Error::ProviderFailure {
                provider: record.provider_id.clone(),
                attempts: record.attempts,
                message: record.error.clone().unwrap_or_default(),
            });
        }
        Ok((record.response_text.clone(), record))
    }

    pub fn embed(&self, texts: &[String], normalized: bool) -> Result<Vec<EmbeddingVector>> {
        self.require(Capability::Embed)?;
        let digest = embed_digest(self.provider_id(), texts);
        let (result, attempts, latency_ms) =
            self.with_retries(&digest, || self.provider.embed_batch(texts));
        let mut record = CallRecord {
            provider_id: self.provider_id().to_string(),
            kind: None,
            request_digest: digest,
            response_text: String::new(),
            latency_ms,
            attempts,
            outcome: Outcome::Ok,
            error: None,
        };
        match result {
            Ok(vectors) if vectors.len() == texts.len() => {
                record.response_text = format!("{} vectors", vectors.len());
                if attempts > 1 {
                    record.outcome = Outcome::RateLimitedRecovered;
                }
                self.ledger.append(record);
                Ok(vectors
                    .into_iter()
                    .map(|v| EmbeddingVector::new(v, normalized))
                    .collect())
            }
            other => {
                let message = match other {
                    Err(e) => e.message().to_string(),
                    Ok(v) => format!("expected {} vectors, got {}", texts.len(), v.len()),
                };
                record.outcome = Outcome::Failed;
                record.error = Some(message.clone());
                self.ledger.append(record);
                Err(Error::ProviderFailure {
                    provider: self.provider_id().to_string(),
                    attempts,
                    message,
                })
            }
        }
    }
}

/// Parse a judge reply. Strict mode accepts a single digit 1-5 with optional
/// surrounding whitespace; lenient mode accepts the first standalone 1-5.
pub fn parse_judge_digit(raw: &str, lenient: bool) -> Result<u8> {
    let t = raw.trim();
    if let [b @ b'1'..=b'5'] = t.as_bytes() {
        return Ok(b - b'0');
    }
    if lenient {
        let re = Regex::new(r"(?:^|[^0-9.])([1-5])(?:$|[^0-9.])").expect("static regex");
        if let Some(c) = re.captures(t) {
            return Ok(c[1].as_bytes()[0] - b'0');
        }
    }
    Err(Error::InvalidJudgeOutput(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::Ordering;

    #[test]
    fn judge_digit_contract() {
        assert_eq!(parse_judge_digit(" 4\n", false).unwrap(), 4);
        assert!(parse_judge_digit("Score: 4", false).is_err());
        assert_eq!(parse_judge_digit("Score: 4", true).unwrap(), 4);
        assert!(parse_judge_digit("6", false).is_err());
        assert!(parse_judge_digit("6", true).is_err());
        assert!(parse_judge_digit("45", false).is_err());
        assert!(parse_judge_digit("4.5", true).is_err());
    }

    #[test]
    fn echo_stub_is_single_attempt() {
        let c = Client::deterministic(Arc::new(StubProvider::canned("stub", "fixed"))).unwrap();
        let (text, rec) = c
            .generate(&Request::new(PromptKind::Respond, "s", "u"))
            .unwrap();
        assert_eq!(text, "fixed");
        assert_eq!(rec.attempts, 1);
        assert_eq!(rec.outcome, Outcome::Ok);
        assert_eq!(c.ledger().len(), 1);
    }

    #[test]
    fn two_failures_then_success_is_recovered() {
        let inner = Arc::new(StubProvider::canned("stub", "ok"));
        let flaky = Arc::new(FlakyProvider::fail_first(inner, 2));
        let sleeper = Arc::new(RecordingSleeper::default());
        let c = Client::deterministic(flaky)
            .unwrap()
            .with_sleeper(sleeper.clone());
        let (_, rec) = c
            .generate(&Request::new(PromptKind::Respond, "s", "u"))
            .unwrap();
        assert_eq!(rec.attempts, 3);
        assert_eq!(rec.outcome, Outcome::RateLimitedRecovered);
        let slept = sleeper.slept.lock().unwrap();
        assert_eq!(slept.len(), 2);
        // nominal 1s then 2s, each within the jitter band
        assert!((750..=1250).contains(&(slept[0].as_millis() as u64)));
        assert!((1500..=2500).contains(&(slept[1].as_millis() as u64)));
    }

    #[test]
    fn exhaustion_records_failure() {
        let inner = Arc::new(StubProvider::canned("stub", "ok"));
        let flaky = Arc::new(FlakyProvider::fail_first(inner, 100));
        let c = Client::deterministic(flaky).unwrap();
        let err = c
            .generate(&Request::new(PromptKind::Respond, "s", "u"))
            .unwrap_err();
        assert!(matches!(err, Error::ProviderFailure { attempts: 5, .. }));
        let recs = c.ledger().records();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].outcome, Outcome::Failed);
    }

    #[test]
    fn missing_credential_blocks_before_any_call() {
        let stub = StubProvider::canned("needs-key", "x")
            .with_credential("REPACC_DEFINITELY_UNSET_PROVIDER_KEY");
        let flaky = Arc::new(FlakyProvider::fail_first(Arc::new(stub), 0));
        let err = Client::new(flaky.clone()).err().unwrap();
        assert!(matches!(err, Error::AuthMissing(ref v) if v == "REPACC_DEFINITELY_UNSET_PROVIDER_KEY"));
        assert_eq!(err.exit_code(), 3);
        assert_eq!(flaky.calls.load(Ordering::SeqCst), 0);
        assert_eq!(credential_var_for("open-ai"), "REPACC_OPEN_AI_KEY");
    }

    #[test]
    fn capability_gate() {
        let c = Client::deterministic(Arc::new(StubProvider::canned("stub", "x"))).unwrap();
        assert!(matches!(
            c.embed(&["a".into()], true),
            Err(Error::MissingCapability { .. })
        ));
    }

    #[test]
    fn replay_reproduces_responses() {
        let c = Client::deterministic(Arc::new(ToyProvider::new("toy"))).unwrap();
        let req = Request::new(PromptKind::Respond, "sys", "Question: what now?");
        let (a, _) = c.generate(&req).unwrap();
        let replay = ReplayProvider::from_records("toy", &c.ledger().records());
        let r = Client::deterministic(Arc::new(replay)).unwrap();
        let (b, rec) = r.generate(&req).unwrap();
        assert_eq!(a, b);
        assert_eq!(rec.request_digest, c.ledger().records()[0].request_digest);
    }

    #[test]
    fn ledger_roundtrips_jsonl() {
        let c = Client::deterministic(Arc::new(StubProvider::canned("stub", "x"))).unwrap();
        c.generate(&Request::new(PromptKind::Respond, "s", "u")).unwrap();
        let text = c.ledger().to_jsonl().unwrap();
        let back = CallLedger::from_jsonl(&text).unwrap();
        assert_eq!(back.records(), c.ledger().records());
    }

    #[test]
    fn embeddings_are_unit_and_self_similar() {
        let c = Client::deterministic(Arc::new(HashedEmbedder::new("emb", 32))).unwrap();
        let texts = vec!["a quiet man".to_string(), "a quiet man".to_string()];
        let v = c.embed(&texts, true).unwrap();
        assert_eq!(v[0], v[1]);
        assert!((v[0].norm() - 1.0).abs() < 1e-6);
        assert!((v[0].cosine(&v[0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn permits_bound_concurrency() {
        let p = Arc::new(Permits::new(2));
        let live = Arc::new(std::sync::atomic::AtomicUsize::new(0));
        let peak = Arc::new(std::sync::atomic::AtomicUsize::new(0));
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let (p, live, peak) = (p.clone(), live.clone(), peak.clone());
                std::thread::spawn(move || {
                    let _g = p.acquire();
                    let now = live.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    std::thread::sleep(Duration::from_millis(5));
                    live.fetch_sub(1, Ordering::SeqCst);
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }
}
