use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use super::{request_digest, CallError, CallRecord, Capability, ModelProvider, Outcome, Request};
use crate::prompts::split_judge_prompt;

type Responder = dyn Fn(&Request) -> Result<String, CallError> + Send + Sync;

/// Provider answering from a closure, a fixed string, or a lookup table.
pub struct StubProvider {
    id: String,
    capabilities: Vec<Capability>,
    credential: Option<String>,
    respond: Box<Responder>,
}

impl StubProvider {
    pub fn from_fn(
        id: &str,
        capabilities: Vec<Capability>,
        f: impl Fn(&Request) -> Result<String, CallError> + Send + Sync + 'static,
    ) -> Self {
        Self {
            id: id.into(),
            capabilities,
            credential: None,
            respond: Box::new(f),
        }
    }

    pub fn canned(id: &str, text: &str) -> Self {
        let text = text.to_string();
        Self::from_fn(
            id,
            vec![Capability::Generate, Capability::Judge],
            move |_| Ok(text.clone()),
        )
    }

    /// Returns the user prompt unchanged.
    pub fn echo(id: &str) -> Self {
        Self::from_fn(
            id,
            vec![Capability::Generate, Capability::Judge],
            |r| Ok(r.user.clone()),
        )
    }

    /// Looks the user prompt up in `table`; unknown prompts are a fatal error.
    pub fn table(id: &str, table: HashMap<String, String>) -> Self {
        Self::from_fn(
            id,
            vec![Capability::Generate, Capability::Judge],
            move |r| {
                table
                    .get(&r.user)
                    .cloned()
                    .ok_or_else(|| CallError::Fatal("prompt not in stub table".into()))
            },
        )
    }

    pub fn with_credential(mut self, var: &str) -> Self {
        self.credential = Some(var.into());
        self
    }
}

impl ModelProvider for StubProvider {
    fn provider_id(&self) -> &str {
        &self.id
    }
    fn capabilities(&self) -> Vec<Capability> {
        self.capabilities.clone()
    }
    fn credential_var(&self) -> Option<String> {
        self.credential.clone()
    }
    fn complete(&self, request: &Request) -> Result<String, CallError> {
        (self.respond)(request)
    }
}

type FailPredicate = dyn Fn(&Request) -> bool + Send + Sync;

/// Fault-injection wrapper. Fails the first `n` attempts of each distinct
/// request with a transient error, and fails permanently any request
/// matching the optional predicate.
pub struct FlakyProvider {
    inner: Arc<dyn ModelProvider>,
    transient_failures: u32,
    always_fail: Option<Box<FailPredicate>>,
    seen: Mutex<HashMap<String, u32>>,
    /// Total attempts that reached this wrapper.
    pub calls: AtomicUsize,
}

impl FlakyProvider {
    pub fn fail_first(inner: Arc<dyn ModelProvider>, n: u32) -> Self {
        Self {
            inner,
            transient_failures: n,
            always_fail: None,
            seen: Mutex::new(HashMap::new()),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn fail_when(
        inner: Arc<dyn ModelProvider>,
        pred: impl Fn(&Request) -> bool + Send + Sync + 'static,
    ) -> Self {
        Self {
            always_fail: Some(Box::new(pred)),
            ..Self::fail_first(inner, 0)
        }
    }
}

impl ModelProvider for FlakyProvider {
    fn provider_id(&self) -> &str {
        self.inner.provider_id()
    }
    fn capabilities(&self) -> Vec<Capability> {
        self.inner.capabilities()
    }
    fn credential_var(&self) -> Option<String> {
        self.inner.credential_var()
    }
    fn complete(&self, request: &Request) -> Result<String, CallError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if self.always_fail.as_ref().is_some_and(|p| p(request)) {
            return Err(CallError::Transient("injected persistent failure (429)".into()));
        }
        let key = request_digest(self.provider_id(), request);
        let mut seen = self.seen.lock().expect("flaky lock");
        let n = seen.entry(key).or_insert(0);
        if *n < self.transient_failures {
            *n += 1;
            return Err(CallError::Transient("injected rate limit (429)".into()));
        }
        drop(seen);
        self.inner.complete(request)
    }
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, CallError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.embed_batch(texts)
    }
}

/// Serves responses recorded in a call ledger, keyed by request digest.
pub struct ReplayProvider {
    id: String,
    responses: HashMap<String, String>,
}

impl ReplayProvider {
    pub fn from_records(provider_id: &str, records: &[CallRecord]) -> Self {
        let responses = records
            .iter()
            .filter(|r| r.provider_id == provider_id && r.outcome != Outcome::Failed)
            .filter(|r| r.kind.is_some())
            .map(|r| (r.request_digest.clone(), r.response_text.clone()))
            .collect();
        Self {
            id: provider_id.into(),
            responses,
        }
    }
}

impl ModelProvider for ReplayProvider {
    fn provider_id(&self) -> &str {
        &self.id
    }
    fn capabilities(&self) -> Vec<Capability> {
        vec![Capability::Generate, Capability::Judge]
    }
    fn complete(&self, request: &Request) -> Result<String, CallError> {
        self.responses
            .get(&request_digest(&self.id, request))
            .cloned()
            .ok_or_else(|| CallError::Fatal("request not present in replay ledger".into()))
    }
}

/// Calibration case inferred from the relation between the ground truth and
/// the response embedded in a judge prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum CalibrationCase {
    Verbatim,
    Paraphrased,
    ShortCorrect,
    LongCorrect,
}

/// Judge stub whose running score totals track target means exactly:
/// after `n` calls of one case the scores sum to `round(target * n)`.
pub struct ScheduledScorer {
    id: String,
    targets: [f64; 4],
    counters: Mutex<HashMap<CalibrationCase, u64>>,
}

impl ScheduledScorer {
    /// `targets` are the verbatim, paraphrased, short-correct and
    /// long-correct means, each in [1, 5].
    pub fn new(id: &str, targets: [f64; 4]) -> Self {
        Self {
            id: id.into(),
            targets,
            counters: Mutex::new(HashMap::new()),
        }
    }

    fn classify(ground_truth: &str, response: &str) -> CalibrationCase {
        if response == ground_truth {
            CalibrationCase::Verbatim
        } else if response.len() > ground_truth.len() && response.starts_with(ground_truth) {
            CalibrationCase::LongCorrect
        } else if response.len() < ground_truth.len()
            && ground_truth.starts_with(response.trim_end_matches(['.', '!', '?']))
        {
            CalibrationCase::ShortCorrect
        } else {
            CalibrationCase::Paraphrased
        }
    }
}

impl ModelProvider for ScheduledScorer {
    fn provider_id(&self) -> &str {
        &self.id
    }
    fn capabilities(&self) -> Vec<Capability> {
        vec![Capability::Judge]
    }
    fn complete(&self, request: &Request) -> Result<String, CallError> {
        let (gt, resp) = split_judge_prompt(&request.user)
            .ok_or_else(|| CallError::Fatal("not a judge prompt".into()))?;
        let case = Self::classify(gt, resp);
        let target = self.targets[case as usize];
        let mut counters = self.counters.lock().expect("scorer lock");
        let i = counters.entry(case).or_insert(0);
        let cum = |k: u64| (target * k as f64 + 0.5).floor() as i64;
        let score = (cum(*i + 1) - cum(*i)).clamp(1, 5);
        *i += 1;
        Ok(score.to_string())
    }
}
