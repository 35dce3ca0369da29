//! Client for endpoints speaking the `/v1/chat/completions` shape.

use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BackendError, ChatBackend, ChatRequest, ChatResponse, Role, Usage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpBackendConfig {
    /// Base URL, e.g. `http://localhost:8000`; `/v1/chat/completions` is appended.
    pub endpoint: String,
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_timeout_secs() -> u64 {
    120
}

pub struct HttpBackend {
    config: HttpBackendConfig,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build()
            .into();
        Self { config, agent }
    }

    fn url(&self) -> String {
        format!("{}/v1/chat/completions", self.config.endpoint.trim_end_matches('/'))
    }
}

pub(crate) fn request_body(model: &str, request: &ChatRequest) -> Value {
    let last_user = request.messages.iter().rposition(|m| m.role == Role::User);
    let messages: Vec<Value> = request
        .messages
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let role = match m.role {
                Role::System => "system",
                Role::User => "user",
                Role::Assistant => "assistant",
            };
            if Some(i) == last_user && !request.images.is_empty() {
                let mut parts = vec![json!({"type": "text", "text": m.content})];
                for img in &request.images {
                    let url = format!("data:{};base64,{}", img.mime, STANDARD.encode(&img.data));
                    parts.push(json!({"type": "image_url", "image_url": {"url": url}}));
                }
                json!({"role": role, "content": parts})
            } else {
                json!({"role": role, "content": m.content})
            }
        })
        .collect();
    json!({
        "model": model,
        "messages": messages,
        "temperature": request.temperature,
        "max_tokens": request.max_tokens,
    })
}

pub(crate) fn parse_reply(body: &Value) -> Result<ChatResponse, BackendError> {
    let text = body
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| BackendError::Protocol("reply has no choices[0].message.content".into()))?;
    let usage = body.get("usage").map(|u| Usage {
        prompt_tokens: u.get("prompt_tokens").and_then(Value::as_u64).unwrap_or(0) as u32,
        completion_tokens: u.get("completion_tokens").and_then(Value::as_u64).unwrap_or(0) as u32,
    });
    let model = body.get("model").and_then(Value::as_str).map(str::to_string);
    Ok(ChatResponse { text: text.to_string(), usage, model })
}

impl ChatBackend for HttpBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let mut call = self.agent.post(&self.url());
        if let Some(key) = &self.config.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = call
            .send_json(request_body(&self.config.model, request))
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| BackendError::Transport(e.to_string()))?;
        if status == 429 || status >= 500 {
            return Err(BackendError::Transport(format!("HTTP {status}")));
        }
        if status >= 400 {
            return Err(BackendError::Protocol(format!("HTTP {status}: {text}")));
        }
        let body: Value =
            serde_json::from_str(&text).map_err(|e| BackendError::Protocol(format!("malformed JSON reply: {e}")))?;
        parse_reply(&body)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{CallKind, ChatMessage, ImageAttachment};
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    /// Serves the given (status, body) replies, one per connection.
    fn serve(replies: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = format!("http://{}", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let mut bodies = Vec::new();
            for (status, body) in replies {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                bodies.push(String::from_utf8(buf).unwrap());
                let mut stream = stream;
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
            bodies
        });
        (addr, handle)
    }

    fn request() -> ChatRequest {
        ChatRequest {
            messages: vec![ChatMessage::system("sys"), ChatMessage::user("describe")],
            temperature: 0.1,
            max_tokens: 64,
            images: vec![ImageAttachment { mime: "image/png".into(), data: vec![1, 2, 3] }],
            tag: "t".into(),
            kind: CallKind::Agent,
        }
    }

    #[test]
    fn round_trip_against_local_server() {
        let reply = r#"{"model":"m","choices":[{"message":{"role":"assistant","content":"hello"}}],"usage":{"prompt_tokens":5,"completion_tokens":1}}"#;
        let (addr, handle) = serve(vec![(200, reply.to_string())]);
        let backend = HttpBackend::new(HttpBackendConfig {
            endpoint: addr,
            model: "m".into(),
            api_key: Some("k".into()),
            timeout_secs: 5,
        });
        let resp = backend.complete(&request()).unwrap();
        assert_eq!(resp.text, "hello");
        assert_eq!(resp.usage.unwrap().prompt_tokens, 5);
        let sent: Value = serde_json::from_str(&handle.join().unwrap()[0]).unwrap();
        assert_eq!(sent["temperature"], 0.1);
        assert_eq!(sent["messages"][1]["content"][1]["type"], "image_url");
    }

    #[test]
    fn server_errors_are_transport_client_errors_are_protocol() {
        let (addr, _h) = serve(vec![(503, "{}".into()), (400, "{}".into()), (200, "{\"choices\":[]}".into())]);
        let backend = HttpBackend::new(HttpBackendConfig { endpoint: addr, model: "m".into(), api_key: None, timeout_secs: 5 });
        assert!(matches!(backend.complete(&request()), Err(BackendError::Transport(_))));
        assert!(matches!(backend.complete(&request()), Err(BackendError::Protocol(_))));
        assert!(matches!(backend.complete(&request()), Err(BackendError::Protocol(_))));
    }

    #[test]
    fn unreachable_endpoint_is_transport_error() {
        let backend = HttpBackend::new(HttpBackendConfig {
            endpoint: "http://127.0.0.1:9".into(),
            model: "m".into(),
            api_key: None,
            timeout_secs: 2,
        });
        assert!(matches!(backend.complete(&request()), Err(BackendError::Transport(_))));
    }
}
