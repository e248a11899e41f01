//! HTTP adapter for hosted multimodal models.
//!
//! Speaks the common chat-completion convention: one user message whose
//! content is a list of typed parts, text first, then each image as a
//! base64-encoded PNG data URL. The bearer token is read from the
//! `PIDJUDGE_API_KEY` environment variable.
//!
//! The wire transport is injectable so tests can count in-flight requests
//! and script failures without a network.

use super::schema::parse_structured_response;
use super::{tokens, GatewayError, ModelConfig, TokenUsage, VlmResponse};
use crate::grounding::PromptBundle;
use base64::Engine;
use serde_json::json;
use std::time::Duration;

/// Environment variable holding the bearer token for the http backend.
pub const API_KEY_ENV: &str = "PIDJUDGE_API_KEY";

/// Raw reply from the wire: HTTP status plus body text.
#[derive(Debug, Clone)]
pub struct TransportReply {
    pub status: u16,
    pub body: String,
}

/// Minimal blocking POST-JSON transport.
pub trait Transport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &serde_json::Value,
        timeout: Duration,
    ) -> Result<TransportReply, String>;
}

/// Production transport backed by `ureq`.
pub struct UreqTransport;

impl Transport for UreqTransport {
    fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &serde_json::Value,
        timeout: Duration,
    ) -> Result<TransportReply, String> {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build();
        let agent: ureq::Agent = config.into();
        let mut request = agent.post(url);
        if let Some(token) = bearer {
            request = request.header("authorization", format!("Bearer {token}"));
        }
        let mut response = request.send_json(body).map_err(|e| e.to_string())?;
        let status = response.status().as_u16();
        let body = response
            .body_mut()
            .read_to_string()
            .map_err(|e| e.to_string())?;
        Ok(TransportReply { status, body })
    }
}

/// A hosted-model backend bound to one endpoint and model name.
pub struct HttpBackend {
    endpoint_url: String,
    model_name: String,
    temperature: f64,
    max_output_tokens: u32,
    max_retries: u32,
    timeout: Duration,
    backoff_base: Duration,
    transport: Box<dyn Transport>,
}

impl HttpBackend {
    pub fn from_config(config: &ModelConfig) -> Result<Self, GatewayError> {
        Self::with_transport(config, Box::new(UreqTransport))
    }

    pub fn with_transport(
        config: &ModelConfig,
        transport: Box<dyn Transport>,
    ) -> Result<Self, GatewayError> {
        let endpoint_url = config.endpoint_url.clone().ok_or_else(|| {
            GatewayError::InvalidConfig("http backend requires endpoint_url".into())
        })?;
        Ok(Self {
            endpoint_url,
            model_name: config.model_name.clone(),
            temperature: config.temperature,
            max_output_tokens: config.max_output_tokens,
            max_retries: config.max_retries,
            timeout: Duration::from_secs_f64(config.timeout_secs),
            backoff_base: Duration::from_secs(1),
            transport,
        })
    }

    #[cfg(test)]
    pub(super) fn set_backoff_base(&mut self, base: Duration) {
        self.backoff_base = base;
    }

    fn request_body(&self, bundle: &PromptBundle) -> Result<serde_json::Value, GatewayError> {
        let mut parts = vec![json!({ "type": "text", "text": bundle.text })];
        for img in &bundle.images {
            let mut png = Vec::new();
            img.write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png)
                .map_err(|e| GatewayError::ImageEncode {
                    key: bundle.key(),
                    detail: e.to_string(),
                })?;
            let data = base64::engine::general_purpose::STANDARD.encode(&png);
            parts.push(json!({
                "type": "image_url",
                "image_url": { "url": format!("data:image/png;base64,{data}") }
            }));
        }
        Ok(json!({
            "model": self.model_name,
            "temperature": self.temperature,
            "max_tokens": self.max_output_tokens,
            "messages": [ { "role": "user", "content": parts } ]
        }))
    }

    pub fn complete(&self, bundle: &PromptBundle) -> Result<VlmResponse, GatewayError> {
        let body = self.request_body(bundle)?;
        let bearer = std::env::var(API_KEY_ENV).ok();
        let key = bundle.key();

        let mut attempts = 0u32;
        let reply = loop {
            attempts += 1;
            match self
                .transport
                .post_json(&self.endpoint_url, bearer.as_deref(), &body, self.timeout)
            {
                Ok(reply) if reply.status == 429 || reply.status >= 500 => {
                    if attempts > self.max_retries {
                        return Err(GatewayError::Http {
                            key,
                            status: reply.status,
                            detail: truncate(&reply.body),
                        });
                    }
                    std::thread::sleep(self.backoff_base * 2u32.pow(attempts - 1));
                }
                Ok(reply) if !(200..300).contains(&reply.status) => {
                    return Err(GatewayError::Http {
                        key,
                        status: reply.status,
                        detail: truncate(&reply.body),
                    });
                }
                Ok(reply) => break reply,
                Err(detail) => {
                    if attempts > self.max_retries {
                        return Err(GatewayError::Transport { key, attempts, detail });
                    }
                    std::thread::sleep(self.backoff_base * 2u32.pow(attempts - 1));
                }
            }
        };

        let value: serde_json::Value =
            serde_json::from_str(&reply.body).map_err(|e| GatewayError::Provider {
                key: bundle.key(),
                detail: format!("non-JSON body: {e}"),
            })?;
        let raw_text = extract_content(&value).ok_or_else(|| GatewayError::Provider {
            key: bundle.key(),
            detail: "missing choices[0].message.content".into(),
        })?;

        let input_tokens = value
            .pointer("/usage/prompt_tokens")
            .and_then(|v| v.as_u64())
            .unwrap_or_else(|| tokens::bundle_input_tokens(bundle));
        let output_tokens = value
            .pointer("/usage/completion_tokens")
            .and_then(|v| v.as_u64())
            .unwrap_or_else(|| tokens::text_tokens(&raw_text));

        let parsed = parse_structured_response(&raw_text, &bundle.schema).ok();
        Ok(VlmResponse {
            raw_text,
            parsed,
            token_usage: TokenUsage {
                input_tokens,
                output_tokens,
            },
        })
    }
}

/// Pulls the assistant text out of a chat-completion reply; tolerates both
/// plain-string and typed-parts content.
fn extract_content(value: &serde_json::Value) -> Option<String> {
    let content = value.pointer("/choices/0/message/content")?;
    if let Some(text) = content.as_str() {
        return Some(text.to_string());
    }
    let parts = content.as_array()?;
    let mut out = String::new();
    for part in parts {
        if let Some(text) = part.pointer("/text").and_then(|t| t.as_str()) {
            out.push_str(text);
        }
    }
    Some(out)
}

fn truncate(body: &str) -> String {
    const LIMIT: usize = 300;
    if body.len() <= LIMIT {
        body.to_string()
    } else {
        format!("{}...", &body[..LIMIT])
    }
}
