//! HTTPS chat-completions judge client.
//!
//! Speaks the widely used `POST {base_url}/chat/completions` shape: images
//! travel as base64 PNG data URLs, grading as plain text. The describer and
//! grader may be different models. Every request/response pair is appended
//! to a JSON-lines log when a log path is configured.

use std::io::Write;
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::JudgeClient;
use crate::error::{Error, Result};
use crate::image::PixelImage;

/// Connection and model settings for [`RemoteClient`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteJudgeConfig {
    /// Endpoint prefix; `/chat/completions` is appended.
    pub base_url: String,
    /// Model that answers questions about images.
    pub describe_model: String,
    /// Model that grades responses against the rubric.
    pub grade_model: String,
    /// Environment variable holding the bearer token.
    pub api_key_env: String,
    /// Sampling temperature passed through verbatim when set.
    #[serde(default)]
    pub temperature: Option<f64>,
    /// Attempts per call before giving up.
    #[serde(default = "default_max_attempts")]
    pub max_attempts: usize,
    /// Base backoff; attempt k sleeps `backoff_ms << k`.
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    /// JSON-lines request/response log.
    #[serde(default)]
    pub log_path: Option<PathBuf>,
}

fn default_max_attempts() -> usize {
    3
}

fn default_backoff_ms() -> u64 {
    500
}

/// A judge backed by a remote chat-completions endpoint.
pub struct RemoteClient {
    config: RemoteJudgeConfig,
    api_key: String,
    http: reqwest::blocking::Client,
    log: Option<Mutex<std::fs::File>>,
}

impl RemoteClient {
    /// Reads the API key from the configured environment variable and opens
    /// the log file (append mode) when one is configured.
    pub fn new(config: RemoteJudgeConfig) -> Result<Self> {
        let api_key = std::env::var(&config.api_key_env).map_err(|_| {
            Error::Transport(format!(
                "environment variable {} is not set",
                config.api_key_env
            ))
        })?;
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| Error::Transport(e.to_string()))?;
        let log = match &config.log_path {
            Some(path) => {
                let file = std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(|e| Error::io(path, e))?;
                Some(Mutex::new(file))
            }
            None => None,
        };
        Ok(RemoteClient {
            config,
            api_key,
            http,
            log,
        })
    }

    fn log_exchange(&self, kind: &str, model: &str, request: &serde_json::Value, response: &str) {
        if let Some(log) = &self.log {
            let line = json!({
                "ts": std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0),
                "kind": kind,
                "model": model,
                "request": request,
                "response": response,
            });
            if let Ok(mut file) = log.lock() {
                let _ = writeln!(file, "{line}");
            }
        }
    }

    /// Sends one chat request with bounded retry and returns the first
    /// choice's message content.
    fn chat(&self, kind: &str, model: &str, messages: serde_json::Value) -> Result<String> {
        let mut body = json!({ "model": model, "messages": messages });
        if let Some(t) = self.config.temperature {
            body["temperature"] = json!(t);
        }
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let mut last_error = String::new();
        for attempt in 0..self.config.max_attempts.max(1) {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(
                    self.config.backoff_ms << (attempt - 1),
                ));
            }
            let sent = self
                .http
                .post(&url)
                .bearer_auth(&self.api_key)
                .json(&body)
                .send();
            match sent.and_then(|r| r.error_for_status()) {
                Ok(response) => match response.json::<serde_json::Value>() {
                    Ok(value) => {
                        if let Some(content) = value["choices"][0]["message"]["content"].as_str() {
                            let content = content.to_string();
                            self.log_exchange(kind, model, &body, &content);
                            return Ok(content);
                        }
                        last_error = format!("missing message content in {value}");
                    }
                    Err(e) => last_error = e.to_string(),
                },
                Err(e) => last_error = e.to_string(),
            }
        }
        self.log_exchange(kind, model, &body, &format!("<error: {last_error}>"));
        Err(Error::Transport(format!(
            "{kind} call to {url} failed after {} attempts: {last_error}",
            self.config.max_attempts.max(1)
        )))
    }
}

/// Extracts the final "Result: 0" / "Result: 1" verdict from a grading
/// response; the last occurrence wins.
pub(crate) fn parse_verdict(response: &str) -> Result<u8> {
    let position = response
        .rfind("Result:")
        .ok_or_else(|| Error::Transport(format!("no Result marker in grading response {response:?}")))?;
    let tail = response[position + "Result:".len()..].trim_start();
    match tail.chars().next() {
        Some('0') => Ok(0),
        Some('1') => Ok(1),
        _ => Err(Error::Transport(format!(
            "unparseable verdict in grading response {response:?}"
        ))),
    }
}

impl JudgeClient for RemoteClient {
    fn describe_image(&self, image: &PixelImage, question: &str, _seed: u64) -> Result<String> {
        let png = image.png_bytes();
        let data_url = format!(
            "data:image/png;base64,{}",
            base64::engine::general_purpose::STANDARD.encode(png)
        );
        let messages = json!([{
            "role": "user",
            "content": [
                { "type": "text", "text": question },
                { "type": "image_url", "image_url": { "url": data_url } },
            ],
        }]);
        self.chat("describe", &self.config.describe_model, messages)
    }

    fn grade(&self, request: &str, response: &str, concept: &str) -> Result<u8> {
        let rubric = super::build_rubric(request, response, concept);
        let messages = json!([{ "role": "user", "content": rubric }]);
        let answer = self.chat("grade", &self.config.grade_model, messages)?;
        parse_verdict(&answer)
    }

    fn identity(&self) -> String {
        format!(
            "remote({}, describe={}, grade={})",
            self.config.base_url, self.config.describe_model, self.config.grade_model
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verdict_parsing_reads_the_last_marker() {
        assert_eq!(parse_verdict("Result: 1").unwrap(), 1);
        assert_eq!(parse_verdict("Reasoning...\nResult: 0").unwrap(), 0);
        assert_eq!(
            parse_verdict("Result: 0 is wrong, so\nResult: 1\n").unwrap(),
            1
        );
        assert!(parse_verdict("no verdict here").is_err());
        assert!(parse_verdict("Result: maybe").is_err());
    }

    #[test]
    fn missing_credentials_are_a_transport_error() {
        let config = RemoteJudgeConfig {
            base_url: "https://example.invalid/v1".to_string(),
            describe_model: "describer".to_string(),
            grade_model: "grader".to_string(),
            api_key_env: "CONCEPT_LENS_TEST_UNSET_KEY".to_string(),
            temperature: None,
            max_attempts: 1,
            backoff_ms: 1,
            log_path: None,
        };
        std::env::remove_var("CONCEPT_LENS_TEST_UNSET_KEY");
        let err = RemoteClient::new(config).err().expect("must fail");
        assert!(matches!(err, Error::Transport(_)));
    }

    #[test]
    fn config_round_trips_through_serde_with_defaults() {
        let json = r#"{
            "base_url": "https://example.invalid/v1",
            "describe_model": "a",
            "grade_model": "b",
            "api_key_env": "KEY"
        }"#;
        let config: RemoteJudgeConfig = serde_json::from_str(json).unwrap();
        assert_eq!(config.max_attempts, 3);
        assert_eq!(config.backoff_ms, 500);
        assert_eq!(config.temperature, None);
        assert_eq!(config.log_path, None);
    }
}
