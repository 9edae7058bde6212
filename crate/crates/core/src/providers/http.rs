//! Network backends: the Anthropic Messages API and any OpenAI-compatible
//! chat-completions endpoint.

use serde_json::{json, Value};

use super::{credential_var_for, CallError, Capability, ModelProvider, Request};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Wire {
    Anthropic,
    OpenAiCompatible,
}

pub struct HttpProvider {
    id: String,
    model: String,
    base_url: String,
    wire: Wire,
    key_var: String,
    agent: ureq::Agent,
}

impl HttpProvider {
    /// `name` picks the credential variable (`REPACC_<NAME>_KEY`).
    pub fn new(name: &str, model: &str, base_url: &str, wire: Wire) -> Self {
        Self {
            id: format!("{name}:{model}"),
            model: model.into(),
            base_url: base_url.trim_end_matches('/').into(),
            wire,
            key_var: credential_var_for(name),
            agent: ureq::AgentBuilder::new()
                .timeout(std::time::Duration::from_secs(120))
                .build(),
        }
    }

    pub fn anthropic(model: &str) -> Self {
        Self::new("anthropic", model, "https://api.anthropic.com", Wire::Anthropic)
    }

    pub fn openai(model: &str) -> Self {
        Self::new("openai", model, "https://api.openai.com", Wire::OpenAiCompatible)
    }

    fn key(&self) -> Result<String, CallError> {
        std::env::var(&self.key_var).map_err(|_| CallError::Fatal(format!("{} unset", self.key_var)))
    }

    fn post(&self, url: &str, headers: &[(&str, String)], body: Value) -> Result<Value, CallError> {
        let mut req = self.agent.post(url);
        for (k, v) in headers {
            req = req.set(k, v);
        }
        match req.send_json(body) {
            Ok(resp) => resp
                .into_json::<Value>()
                .map_err(|e| CallError::Transient(format!("bad response body: {e}"))),
            Err(ureq::Error::Status(code, resp)) => {
                let text = resp.into_string().unwrap_or_default();
                let msg = format!("HTTP {code}: {text}");
                if code == 429 || code >= 500 {
                    Err(CallError::Transient(msg))
                } else {
                    Err(CallError::Fatal(msg))
                }
            }
            Err(e) => Err(CallError::Transient(e.to_string())),
        }
    }
}

impl ModelProvider for HttpProvider {
    fn provider_id(&self) -> &str {
        &self.id
    }

    fn capabilities(&self) -> Vec<Capability> {
        vec![Capability::Generate, Capability::Judge]
    }

    fn credential_var(&self) -> Option<String> {
        Some(self.key_var.clone())
    }

    fn complete(&self, request: &Request) -> Result<String, CallError> {
        let key = self.key()?;
        match self.wire {
            Wire::Anthropic => {
                let body = json!({
                    "model": self.model,
                    "max_tokens": request.params.max_output_tokens,
                    "temperature": request.params.temperature,
                    "system": request.system,
                    "messages": [{"role": "user", "content": request.user}],
                });
                let v = self.post(
                    &format!("{}/v1/messages", self.base_url),
                    &[
                        ("x-api-key", key),
                        ("anthropic-version", "2023-06-01".into()),
                    ],
                    body,
                )?;
                v["content"]
                    .as_array()
                    .map(|blocks| {
                        blocks
                            .iter()
                            .filter_map(|b| b["text"].as_str())
                            .collect::<String>()
                    })
                    .ok_or_else(|| CallError::Fatal(format!("unexpected response: {v}")))
            }
            Wire::OpenAiCompatible => {
                let mut messages = Vec::new();
                if !request.system.is_empty() {
                    messages.push(json!({"role": "system", "content": request.system}));
                }
                messages.push(json!({"role": "user", "content": request.user}));
                let body = json!({
                    "model": self.model,
                    "max_tokens": request.params.max_output_tokens,
                    "temperature": request.params.temperature,
                    "messages": messages,
                });
                let v = self.post(
                    &format!("{}/v1/chat/completions", self.base_url),
                    &[("Authorization", format!("Bearer {key}"))],
                    body,
                )?;
                v["choices"][0]["message"]["content"]
                    .as_str()
                    .map(str::to_string)
                    .ok_or_else(|| CallError::Fatal(format!("unexpected response: {v}")))
            }
        }
    }
}
