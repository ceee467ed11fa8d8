//! External LLM transport: a minimal chat-completion client over HTTP+JSON
//! plus deterministic stubs for offline runs and CI.

use serde::{Deserialize, Serialize};
use std::time::Duration;

use crate::error::{Error, Result};

/// Environment variable holding the bearer token for the HTTP client.
pub const API_KEY_ENV: &str = "ICAE_LLM_API_KEY";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LlmRequest {
    pub system: Option<String>,
    pub user: String,
    pub temperature: f32,
    pub max_tokens: usize,
}

pub trait LlmClient {
    fn complete(&self, req: &LlmRequest) -> Result<String>;
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f32,
    max_tokens: usize,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatResponseMessage,
}

#[derive(Deserialize)]
struct ChatResponseMessage {
    content: String,
}

/// Chat-completions-compatible HTTP client with retry and backoff.
pub struct HttpLlmClient {
    base_url: String,
    model: String,
    api_key: Option<String>,
    max_retries: u32,
    backoff: Duration,
    http: reqwest::blocking::Client,
}

impl HttpLlmClient {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Result<Self> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| Error::Client(e.to_string()))?;
        Ok(Self {
            base_url: base_url.into(),
            model: model.into(),
            api_key: std::env::var(API_KEY_ENV).ok(),
            max_retries: 3,
            backoff: Duration::from_millis(500),
            http,
        })
    }

    fn attempt(&self, req: &LlmRequest) -> Result<String> {
        let mut messages = Vec::new();
        if let Some(system) = &req.system {
            messages.push(ChatMessage { role: "system", content: system });
        }
        messages.push(ChatMessage { role: "user", content: &req.user });
        let body = ChatRequest {
            model: &self.model,
            messages,
            temperature: req.temperature,
            max_tokens: req.max_tokens,
        };
        let url = format!("{}/chat/completions", self.base_url.trim_end_matches('/'));
        let mut builder = self.http.post(&url).json(&body);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let resp = builder.send().map_err(|e| Error::Client(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(Error::Client(format!("{url} returned {}", resp.status())));
        }
        let parsed: ChatResponse = resp.json().map_err(|e| Error::Client(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| Error::Client("response had no choices".into()))
    }
}

impl LlmClient for HttpLlmClient {
    fn complete(&self, req: &LlmRequest) -> Result<String> {
        let mut last = None;
        for attempt in 0..=self.max_retries {
            match self.attempt(req) {
                Ok(text) => return Ok(text),
                Err(e) => {
                    last = Some(e);
                    if attempt < self.max_retries {
                        std::thread::sleep(self.backoff * (attempt + 1));
                    }
                }
            }
        }
        Err(last.unwrap_or_else(|| Error::Client("request failed".into())))
    }
}

/// Records every request it sees and replies from a fixed script;
/// deterministic by construction.
pub struct ScriptedClient {
    responses: std::sync::Mutex<Vec<String>>,
    pub requests: std::sync::Mutex<Vec<LlmRequest>>,
}

impl ScriptedClient {
    pub fn new(responses: Vec<String>) -> Self {
        let mut rev = responses;
        rev.reverse();
        Self {
            responses: std::sync::Mutex::new(rev),
            requests: std::sync::Mutex::new(Vec::new()),
        }
    }

    pub fn repeating(response: &str) -> Self {
        Self {
            responses: std::sync::Mutex::new(vec![response.to_string()]),
            requests: std::sync::Mutex::new(Vec::new()),
        }
    }

    pub fn seen(&self) -> Vec<LlmRequest> {
        self.requests.lock().unwrap().clone()
    }
}

impl LlmClient for ScriptedClient {
    fn complete(&self, req: &LlmRequest) -> Result<String> {
        self.requests.lock().unwrap().push(req.clone());
        let mut queue = self.responses.lock().unwrap();
        match queue.len() {
            0 => Err(Error::Client("scripted client exhausted".into())),
            1 => Ok(queue[0].clone()),
            _ => Ok(queue.pop().unwrap()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scripted_client_replays_in_order_then_repeats_last() {
        let c = ScriptedClient::new(vec!["one".into(), "two".into()]);
        let req = LlmRequest { system: None, user: "hi".into(), temperature: 0.0, max_tokens: 8 };
        assert_eq!(c.complete(&req).unwrap(), "one");
        assert_eq!(c.complete(&req).unwrap(), "two");
        assert_eq!(c.complete(&req).unwrap(), "two");
        assert_eq!(c.seen().len(), 3);
    }
}
