//! Intruder detection by a chat-completion model.
//!
//! Every task is sent as its own request: system prompt, two fixed few-shot
//! demonstrations, then the five candidates. Nothing from one task ever
//! appears in another task's payload.

use std::sync::OnceLock;
use std::time::Duration;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};

use crate::task_builder::IntruderTask;
use crate::verdict::Verdict;
use crate::{Error, Result};

/// Environment variables consulted for the bearer token, in order.
pub const API_KEY_VARS: [&str; 2] = ["LATENTPROBE_API_KEY", "OPENAI_API_KEY"];

const SYSTEM_PROMPT: &str = "You are helping to evaluate features learned by a sparse autoencoder. \
You will be shown five numbered text examples. In each example some tokens are highlighted \
between << and >>. Four of the examples share a common pattern in the highlighted tokens and \
their surrounding context. One example, the intruder, does not share that pattern. \
Identify the intruder. Think briefly if you need to, then finish your reply with a final \
line of the form \"Answer: N\" where N is the number of the intruder (1 to 5).";

const FEW_SHOT_JSON: &str = include_str!("../fixtures/few_shot.json");

#[derive(Debug, Clone, Deserialize)]
struct Demonstration {
    examples: Vec<String>,
    response: String,
}

fn demonstrations() -> &'static [Demonstration] {
    static DEMOS: OnceLock<Vec<Demonstration>> = OnceLock::new();
    DEMOS.get_or_init(|| {
        let demos: Vec<Demonstration> =
            serde_json::from_str(FEW_SHOT_JSON).expect("bundled few-shot fixture is valid JSON");
        assert!(demos.iter().all(|d| d.examples.len() == crate::EXAMPLES_PER_TASK));
        demos
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    fn new(role: &str, content: impl Into<String>) -> Self {
        ChatMessage {
            role: role.to_string(),
            content: content.into(),
        }
    }
}

fn numbered<'a>(texts: impl Iterator<Item = &'a str>) -> String {
    let mut out = String::from("Examples:\n");
    for (i, text) in texts.enumerate() {
        out.push_str(&format!("{}. {}\n", i + 1, text));
    }
    out.push_str("\nWhich example is the intruder?");
    out
}

/// Messages for one task. Depends only on the example texts and their order.
pub fn render_prompt(task: &IntruderTask) -> Vec<ChatMessage> {
    let mut messages = vec![ChatMessage::new("system", SYSTEM_PROMPT)];
    for demo in demonstrations() {
        messages.push(ChatMessage::new(
            "user",
            numbered(demo.examples.iter().map(String::as_str)),
        ));
        messages.push(ChatMessage::new("assistant", demo.response.clone()));
    }
    messages.push(ChatMessage::new("user", numbered(task.texts())));
    messages
}

/// The last standalone integer in `response`, if it lies in 1..=5.
///
/// A standalone integer is a digit run not glued to letters or other digits
/// and not part of a decimal number.
pub fn parse_choice(response: &str) -> Option<u8> {
    let chars: Vec<char> = response.chars().collect();
    let mut last: Option<&[char]> = None;
    let mut i = 0;
    while i < chars.len() {
        if !chars[i].is_ascii_digit() {
            i += 1;
            continue;
        }
        let start = i;
        while i < chars.len() && chars[i].is_ascii_digit() {
            i += 1;
        }
        let before = start.checked_sub(1).map(|j| chars[j]);
        let after = chars.get(i).copied();
        let glued_before = before.is_some_and(|c| c.is_alphanumeric() || c == '_')
            || (before == Some('.') && start >= 2 && chars[start - 2].is_ascii_digit());
        let glued_after = after.is_some_and(|c| c.is_alphanumeric() || c == '_')
            || (after == Some('.') && chars.get(i + 1).is_some_and(|c| c.is_ascii_digit()));
        if !glued_before && !glued_after {
            last = Some(&chars[start..i]);
        }
    }
    let digits: String = last?.iter().collect();
    match digits.parse::<u8>() {
        Ok(n @ 1..=5) => Some(n),
        _ => None,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluatorConfig {
    /// Base URL (`http://host:port`) or the full chat-completions URL.
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub max_retries: u32,
    pub concurrency: usize,
    pub timeout: Duration,
    /// First retry delay; doubles on every further HTTP failure.
    pub backoff: Duration,
    #[serde(skip)]
    pub api_key: Option<String>,
}

impl Default for EvaluatorConfig {
    fn default() -> Self {
        EvaluatorConfig {
            endpoint: "http://127.0.0.1:8000".into(),
            model: "gpt-4o-mini".into(),
            temperature: 0.0,
            max_retries: 2,
            concurrency: 8,
            timeout: Duration::from_secs(60),
            backoff: Duration::from_millis(500),
            api_key: None,
        }
    }
}

impl EvaluatorConfig {
    pub fn with_env_api_key(mut self) -> Self {
        self.api_key = API_KEY_VARS
            .iter()
            .find_map(|var| std::env::var(var).ok().filter(|v| !v.is_empty()));
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.concurrency == 0 {
            return Err(Error::InvalidArgument("concurrency limit must be at least 1".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "temperature {} must be finite and non-negative",
                self.temperature
            )));
        }
        Ok(())
    }

    pub fn chat_url(&self) -> String {
        let base = self.endpoint.trim_end_matches('/');
        if base.ends_with("/chat/completions") {
            base.to_string()
        } else if base.ends_with("/v1") {
            format!("{base}/chat/completions")
        } else {
            format!("{base}/v1/chat/completions")
        }
    }
}

#[derive(Debug, Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Debug, Deserialize)]
struct ChatChoice {
    message: ChatContent,
}

#[derive(Debug, Deserialize)]
struct ChatContent {
    #[serde(default)]
    content: Option<String>,
}

struct ChatClient {
    http: reqwest::Client,
    url: String,
    config: EvaluatorConfig,
}

impl ChatClient {
    fn new(config: &EvaluatorConfig) -> Result<Self> {
        config.validate()?;
        let http = reqwest::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| Error::Http(e.to_string()))?;
        Ok(ChatClient {
            http,
            url: config.chat_url(),
            config: config.clone(),
        })
    }

    async fn complete(&self, messages: &[ChatMessage]) -> Result<String> {
        let body = ChatRequest {
            model: &self.config.model,
            messages,
            temperature: self.config.temperature,
        };
        let mut request = self.http.post(&self.url).json(&body);
        if let Some(key) = &self.config.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().await.map_err(|e| Error::Http(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            let text = response.text().await.unwrap_or_default();
            return Err(Error::Http(format!("status {status}: {text}")));
        }
        let parsed: ChatResponse = response
            .json()
            .await
            .map_err(|e| Error::Http(format!("malformed completion: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| Error::Http("completion has no message content".into()))
    }

    async fn judge(&self, task: &IntruderTask) -> Verdict {
        let messages = render_prompt(task);
        let mut last_raw = String::new();
        let mut last_error: Option<String> = None;
        let mut delay = self.config.backoff;
        let max_attempts = self.config.max_retries + 1;
        for attempt in 1..=max_attempts {
            match self.complete(&messages).await {
                Ok(text) => {
                    if let Some(choice) = parse_choice(&text) {
                        return Verdict::new(task, &self.config.model, Some(choice), text, attempt);
                    }
                    last_error = Some("no answer in 1..=5".into());
                    last_raw = text;
                }
                Err(e) => {
                    log::debug!("task {} attempt {attempt}: {e}", task.task_id);
                    last_error = Some(e.to_string());
                    if attempt < max_attempts {
                        tokio::time::sleep(delay).await;
                        delay = delay.saturating_mul(2);
                    }
                }
            }
        }
        Verdict::new(task, &self.config.model, None, last_raw, max_attempts)
            .with_error(last_error.unwrap_or_default())
    }
}

/// Ask the model about every task, at most `config.concurrency` requests in
/// flight. Verdicts come back in task order.
pub async fn evaluate(tasks: &[IntruderTask], config: &EvaluatorConfig) -> Result<Vec<Verdict>> {
    let client = ChatClient::new(config)?;
    let client = &client;
    let verdicts = stream::iter(tasks)
        .map(|task| client.judge(task))
        .buffered(config.concurrency)
        .collect()
        .await;
    Ok(verdicts)
}
