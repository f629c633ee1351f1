//! A small blocking HTTP/1.1 client for chat-completion endpoints.
//!
//! Only plain `http://` URLs are supported; reach a TLS endpoint through a
//! local proxy.

use std::io::{Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{AugmentError, AugmentationRequest};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClientConfig {
    pub endpoint: String,
    pub model: String,
    pub timeout_secs: f64,
    /// Environment variable holding the bearer token.
    pub token_env: String,
    pub max_attempts: usize,
    pub backoff_ms: u64,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8080/v1/chat/completions".into(),
            model: "gpt-3.5-turbo".into(),
            timeout_secs: 60.0,
            token_env: "CONTROLREC_API_TOKEN".into(),
            max_attempts: 3,
            backoff_ms: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HttpUrl {
    pub host: String,
    pub port: u16,
    pub path: String,
}

impl HttpUrl {
    pub fn parse(url: &str) -> Result<Self, AugmentError> {
        if url.starts_with("https://") {
            return Err(AugmentError::Config(format!(
                "{url}: https is not supported by the built-in client; point the endpoint at a local http proxy"
            )));
        }
        let rest = url
            .strip_prefix("http://")
            .ok_or_else(|| AugmentError::Config(format!("{url}: endpoint must start with http://")))?;
        let (authority, path) = match rest.find('/') {
            Some(i) => (&rest[..i], &rest[i..]),
            None => (rest, "/"),
        };
        let (host, port) = match authority.rsplit_once(':') {
            Some((h, p)) => (
                h,
                p.parse::<u16>()
                    .map_err(|_| AugmentError::Config(format!("{url}: invalid port {p:?}")))?,
            ),
            None => (authority, 80),
        };
        if host.is_empty() {
            return Err(AugmentError::Config(format!("{url}: missing host")));
        }
        Ok(Self {
            host: host.to_string(),
            port,
            path: path.to_string(),
        })
    }
}

/// Splits a raw HTTP/1.1 response into status and decoded body.
pub fn parse_http_response(raw: &[u8]) -> Result<(u16, Vec<u8>), String> {
    let split = raw
        .windows(4)
        .position(|w| w == b"\r\n\r\n")
        .ok_or("no header terminator")?;
    let head = std::str::from_utf8(&raw[..split]).map_err(|_| "header is not UTF-8")?;
    let body = &raw[split + 4..];
    let mut lines = head.split("\r\n");
    let status_line = lines.next().ok_or("empty response")?;
    let mut parts = status_line.splitn(3, ' ');
    let version = parts.next().unwrap_or_default();
    if !version.starts_with("HTTP/1.") {
        return Err(format!("unexpected status line {status_line:?}"));
    }
    let status: u16 = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| format!("bad status in {status_line:?}"))?;
    let mut chunked = false;
    let mut length = None;
    for line in lines {
        let (k, v) = line
            .split_once(':')
            .ok_or_else(|| format!("bad header line {line:?}"))?;
        let (k, v) = (k.trim().to_ascii_lowercase(), v.trim());
        if k == "transfer-encoding" && v.eq_ignore_ascii_case("chunked") {
            chunked = true;
        } else if k == "content-length" {
            length = Some(v.parse::<usize>().map_err(|_| format!("bad content-length {v:?}"))?);
        }
    }
    if chunked {
        return decode_chunked(body).map(|b| (status, b));
    }
    match length {
        Some(n) if body.len() < n => Err(format!("body truncated: {} of {n} bytes", body.len())),
        Some(n) => Ok((status, body[..n].to_vec())),
        None => Ok((status, body.to_vec())),
    }
}

fn decode_chunked(mut body: &[u8]) -> Result<Vec<u8>, String> {
    let mut out = Vec::new();
    loop {
        let eol = body
            .windows(2)
            .position(|w| w == b"\r\n")
            .ok_or("unterminated chunk size")?;
        let size_text = std::str::from_utf8(&body[..eol]).map_err(|_| "chunk size is not UTF-8")?;
        let size_text = size_text.split(';').next().unwrap_or_default().trim();
        let size = usize::from_str_radix(size_text, 16).map_err(|_| format!("bad chunk size {size_text:?}"))?;
        body = &body[eol + 2..];
        if size == 0 {
            return Ok(out);
        }
        if body.len() < size + 2 {
            return Err("chunk truncated".into());
        }
        out.extend_from_slice(&body[..size]);
        body = &body[size + 2..];
    }
}

/// The assistant message of a chat-completion response body.
pub fn extract_completion(body: &str) -> Result<String, AugmentError> {
    let v: serde_json::Value =
        serde_json::from_str(body).map_err(|e| AugmentError::Response(format!("body is not JSON: {e}")))?;
    v.pointer("/choices/0/message/content")
        .and_then(|c| c.as_str())
        .map(str::to_string)
        .ok_or_else(|| AugmentError::Response("missing choices[0].message.content".into()))
}

enum Attempt {
    Done(String),
    Retry { status: Option<u16>, message: String },
}

fn attempt(url: &HttpUrl, body: &str, token: &str, timeout: Duration) -> Result<Attempt, AugmentError> {
    let retry = |message: String| Ok(Attempt::Retry { status: None, message });
    let addr = match (url.host.as_str(), url.port).to_socket_addrs().map(|mut a| a.next()) {
        Ok(Some(a)) => a,
        Ok(None) => return retry(format!("{} did not resolve", url.host)),
        Err(e) => return retry(e.to_string()),
    };
    let mut stream = match TcpStream::connect_timeout(&addr, timeout) {
        Ok(s) => s,
        Err(e) => return retry(format!("connect: {e}")),
    };
    let _ = stream.set_read_timeout(Some(timeout));
    let _ = stream.set_write_timeout(Some(timeout));
    let request = format!(
        "POST {} HTTP/1.1\r\nHost: {}:{}\r\nAuthorization: Bearer {token}\r\nContent-Type: application/json\r\nAccept: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        url.path,
        url.host,
        url.port,
        body.len()
    );
    if let Err(e) = stream.write_all(request.as_bytes()) {
        return retry(format!("send: {e}"));
    }
    let mut raw = Vec::new();
    if let Err(e) = stream.read_to_end(&mut raw) {
        return retry(format!("receive: {e}"));
    }
    let (status, body) = match parse_http_response(&raw) {
        Ok(x) => x,
        Err(e) => return retry(e),
    };
    let text = String::from_utf8_lossy(&body).into_owned();
    match status {
        200..=299 => Ok(Attempt::Done(extract_completion(&text)?)),
        401 | 403 => Err(AugmentError::Auth(status)),
        408 | 429 | 500..=599 => Ok(Attempt::Retry {
            status: Some(status),
            message: text,
        }),
        _ => Err(AugmentError::Http {
            status: Some(status),
            attempts: 1,
            message: text,
        }),
    }
}

pub(crate) fn call_with_token(
    request: &AugmentationRequest,
    cfg: &ClientConfig,
    token: &str,
) -> Result<String, AugmentError> {
    let url = HttpUrl::parse(&request.endpoint)?;
    if cfg.max_attempts == 0 || !(cfg.timeout_secs > 0.0 && cfg.timeout_secs.is_finite()) {
        return Err(AugmentError::Config(
            "max_attempts and timeout_secs must be positive".into(),
        ));
    }
    let timeout = Duration::from_secs_f64(cfg.timeout_secs);
    let body = request.body();
    let mut last = (None, String::new());
    for n in 1..=cfg.max_attempts {
        match attempt(&url, &body, token, timeout) {
            Ok(Attempt::Done(text)) => return Ok(text),
            Ok(Attempt::Retry { status, message }) => {
                log::warn!(
                    "attempt {n}/{} to {} failed: {message}",
                    cfg.max_attempts,
                    request.endpoint
                );
                last = (status, message);
                if n < cfg.max_attempts {
                    thread::sleep(Duration::from_millis(cfg.backoff_ms.saturating_mul(1 << (n - 1))));
                }
            }
            Err(AugmentError::Http { status, message, .. }) => {
                return Err(AugmentError::Http {
                    status,
                    attempts: n,
                    message,
                })
            }
            Err(e) => return Err(e),
        }
    }
    Err(AugmentError::Http {
        status: last.0,
        attempts: cfg.max_attempts,
        message: last.1,
    })
}

/// POSTs the request with exponential-backoff retries. The bearer token is
/// read from `cfg.token_env` before any connection is made.
pub fn call_endpoint(request: &AugmentationRequest, cfg: &ClientConfig) -> Result<String, AugmentError> {
    let token = std::env::var(&cfg.token_env)
        .ok()
        .filter(|t| !t.trim().is_empty())
        .ok_or_else(|| AugmentError::Config(format!("environment variable {} is not set", cfg.token_env)))?;
    call_with_token(request, cfg, &token)
}
