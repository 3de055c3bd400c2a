//! Client side of the v1 probe protocol: newline-delimited JSON over a
//! child process's stdio, or one JSON object per HTTP POST to `/probe`.
//!
//! Request: `{"v":1,"id":"..","prompt":"..","targets":["he","she"]}`.
//! Response: `{"v":1,"id":"..","probs":{"he":..,"she":..}}`, or
//! `{"v":1,"id":"..","error":".."}` when the adapter cannot answer.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use codebias_core::metrics::{GenderProbe, GenderProber};

pub const PROTOCOL_VERSION: u32 = 1;
pub const TARGETS: [&str; 2] = ["he", "she"];

#[derive(Debug, thiserror::Error)]
pub enum AdapterError {
    #[error("adapter config: {0}")]
    Config(String),
    #[error("protocol error: {message} (payload: {raw})")]
    Protocol { message: String, raw: String },
    #[error("adapter reported: {0}")]
    Remote(String),
    #[error("no response after {attempts} attempts of {timeout_ms} ms")]
    Timeout { attempts: u32, timeout_ms: u64 },
    #[error("adapter transport: {0}")]
    Transport(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeRequest {
    pub v: u32,
    pub id: String,
    pub prompt: String,
    pub targets: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResponse {
    pub v: u32,
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probs: Option<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "transport", rename_all = "lowercase")]
pub enum Transport {
    /// Launches `command[0]` with the remaining entries as arguments.
    Stdio { command: Vec<String> },
    /// Base URL; requests go to `<url>/probe`.
    Http { url: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterEndpoint {
    #[serde(flatten)]
    pub transport: Transport,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    /// Requests are sent one at a time, so only 1 is accepted for now.
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
}

fn default_timeout_ms() -> u64 {
    30_000
}

fn default_retries() -> u32 {
    2
}

fn default_in_flight() -> usize {
    1
}

impl AdapterEndpoint {
    pub fn new(transport: Transport) -> Self {
        AdapterEndpoint {
            transport,
            timeout_ms: default_timeout_ms(),
            max_retries: default_retries(),
            max_in_flight: default_in_flight(),
        }
    }

    pub fn validate(&self) -> Result<(), AdapterError> {
        if self.timeout_ms == 0 {
            return Err(AdapterError::Config("timeout_ms must be positive".into()));
        }
        if self.max_in_flight != 1 {
            return Err(AdapterError::Config(format!(
                "max_in_flight is {}, but requests are sent one at a time",
                self.max_in_flight
            )));
        }
        match &self.transport {
            Transport::Stdio { command } if command.is_empty() => {
                Err(AdapterError::Config("stdio transport needs a command".into()))
            }
            Transport::Http { url } if !(url.starts_with("http://") || url.starts_with("https://")) => {
                Err(AdapterError::Config(format!("not an http url: {url:?}")))
            }
            _ => Ok(()),
        }
    }
}

fn protocol(message: impl Into<String>, raw: &str) -> AdapterError {
    let e = AdapterError::Protocol {
        message: message.into(),
        raw: raw.to_string(),
    };
    log::error!("{e}");
    e
}

/// Checks one raw response against the request it answers.
pub fn parse_response(raw: &str, expected_id: &str) -> Result<GenderProbe, AdapterError> {
    let resp: ProbeResponse =
        serde_json::from_str(raw.trim()).map_err(|e| protocol(format!("not a v1 response: {e}"), raw))?;
    if resp.v != PROTOCOL_VERSION {
        return Err(protocol(format!("unsupported protocol version {}", resp.v), raw));
    }
    if resp.id != expected_id {
        return Err(protocol(format!("id {:?} does not echo request {expected_id:?}", resp.id), raw));
    }
    if let Some(e) = resp.error {
        return Err(AdapterError::Remote(e));
    }
    let probs = resp.probs.ok_or_else(|| protocol("response has neither probs nor error", raw))?;
    let get = |k: &str| {
        probs
            .get(k)
            .copied()
            .ok_or_else(|| protocol(format!("missing target {k:?}"), raw))
    };
    let (he, she) = (get("he")?, get("she")?);
    GenderProbe::new(he, she).map_err(|e| protocol(e.to_string(), raw))
}

enum Conn {
    Stdio {
        child: Child,
        stdin: ChildStdin,
        lines: Receiver<std::io::Result<String>>,
        abandoned: HashSet<String>,
    },
    Http {
        client: reqwest::blocking::Client,
        url: String,
    },
}

enum Attempt {
    Answer(String),
    TimedOut,
}

impl Conn {
    fn send(&mut self, req: &ProbeRequest, timeout: Duration) -> Result<Attempt, AdapterError> {
        let body = serde_json::to_string(req).expect("request serializes");
        match self {
            Conn::Stdio {
                child,
                stdin,
                lines,
                abandoned,
            } => {
                writeln!(stdin, "{body}")
                    .and_then(|_| stdin.flush())
                    .map_err(|e| AdapterError::Transport(format!("writing to adapter: {e}")))?;
                let deadline = std::time::Instant::now() + timeout;
                loop {
                    let left = deadline.saturating_duration_since(std::time::Instant::now());
                    match lines.recv_timeout(left) {
                        Ok(Ok(line)) => {
                            // late answers to requests that already failed
                            let stale = serde_json::from_str::<ProbeResponse>(&line)
                                .map(|r| abandoned.contains(&r.id))
                                .unwrap_or(false);
                            if stale {
                                continue;
                            }
                            return Ok(Attempt::Answer(line));
                        }
                        Ok(Err(e)) => return Err(AdapterError::Transport(format!("reading from adapter: {e}"))),
                        Err(RecvTimeoutError::Timeout) => return Ok(Attempt::TimedOut),
                        Err(RecvTimeoutError::Disconnected) => {
                            let status = child.try_wait().ok().flatten();
                            return Err(AdapterError::Transport(format!(
                                "adapter closed its output (exit status {status:?})"
                            )));
                        }
                    }
                }
            }
            Conn::Http { client, url } => {
                let resp = client
                    .post(url.as_str())
                    .timeout(timeout)
                    .header("content-type", "application/json")
                    .body(body)
                    .send();
                match resp {
                    Err(e) if e.is_timeout() => Ok(Attempt::TimedOut),
                    Err(e) => Err(AdapterError::Transport(e.to_string())),
                    Ok(r) => {
                        let status = r.status();
                        let text = r.text().map_err(|e| AdapterError::Transport(e.to_string()))?;
                        if !status.is_success() {
                            return Err(protocol(format!("HTTP status {status}"), &text));
                        }
                        Ok(Attempt::Answer(text))
                    }
                }
            }
        }
    }
}

/// A connected adapter. Requests are serialized through one connection.
pub struct AdapterClient {
    endpoint: AdapterEndpoint,
    conn: Mutex<Conn>,
    next_id: AtomicU64,
}

impl AdapterClient {
    pub fn connect(endpoint: &AdapterEndpoint) -> Result<Self, AdapterError> {
        endpoint.validate()?;
        let conn = match &endpoint.transport {
            Transport::Stdio { command } => {
                let mut child = Command::new(&command[0])
                    .args(&command[1..])
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()
                    .map_err(|e| AdapterError::Config(format!("cannot launch {:?}: {e}", command[0])))?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                let (tx, rx) = mpsc::channel();
                std::thread::spawn(move || {
                    for line in BufReader::new(stdout).lines() {
                        if tx.send(line).is_err() {
                            break;
                        }
                    }
                });
                Conn::Stdio {
                    child,
                    stdin,
                    lines: rx,
                    abandoned: HashSet::new(),
                }
            }
            Transport::Http { url } => {
                let client = reqwest::blocking::Client::builder()
                    .build()
                    .map_err(|e| AdapterError::Config(e.to_string()))?;
                let url = if url.ends_with("/probe") {
                    url.clone()
                } else {
                    format!("{}/probe", url.trim_end_matches('/'))
                };
                Conn::Http { client, url }
            }
        };
        Ok(AdapterClient {
            endpoint: endpoint.clone(),
            conn: Mutex::new(conn),
            next_id: AtomicU64::new(0),
        })
    }

    /// One protocol exchange. A timed-out request is resent under the same
    /// id up to `max_retries` times.
    pub fn probe_prompt(&self, prompt: &str) -> Result<GenderProbe, AdapterError> {
        let id = format!("q{}", self.next_id.fetch_add(1, Ordering::Relaxed));
        let req = ProbeRequest {
            v: PROTOCOL_VERSION,
            id: id.clone(),
            prompt: prompt.to_string(),
            targets: TARGETS.iter().map(|s| s.to_string()).collect(),
        };
        let timeout = Duration::from_millis(self.endpoint.timeout_ms);
        let mut conn = self.conn.lock().expect("adapter connection poisoned");
        let attempts = self.endpoint.max_retries + 1;
        for attempt in 1..=attempts {
            match conn.send(&req, timeout)? {
                Attempt::Answer(raw) => return parse_response(&raw, &id),
                Attempt::TimedOut => log::warn!("adapter request {id} timed out (attempt {attempt}/{attempts})"),
            }
        }
        if let Conn::Stdio { abandoned, .. } = &mut *conn {
            abandoned.insert(id);
        }
        Err(AdapterError::Timeout {
            attempts,
            timeout_ms: self.endpoint.timeout_ms,
        })
    }
}

impl GenderProber for AdapterClient {
    fn probe(&self, prompt: &str) -> Result<GenderProbe, String> {
        self.probe_prompt(prompt).map_err(|e| e.to_string())
    }
}

impl Drop for AdapterClient {
    fn drop(&mut self) {
        if let Ok(Conn::Stdio { child, .. }) = self.conn.get_mut() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_valid_responses() {
        let p = parse_response(r#"{"v":1,"id":"q0","probs":{"he":0.5,"she":0.5}}"#, "q0").unwrap();
        assert_eq!((p.p_he(), p.p_she()), (0.5, 0.5));
        // extra targets are ignored
        let p = parse_response(r#"{"v":1,"id":"a","probs":{"he":0.1,"she":0.2,"they":0.3}}"#, "a").unwrap();
        assert_eq!(p.p_she(), 0.2);
    }

    #[test]
    fn rejects_bad_responses() {
        let bad = [
            r#"{"v":1,"id":"q0","probs":{"he":0.5}}"#,
            r#"{"v":1,"id":"q0","probs":{"he":1.5,"she":0.0}}"#,
            r#"{"v":1,"id":"q0","probs":{"he":-0.1,"she":0.0}}"#,
            r#"{"v":1,"id":"q0","probs":{"he":0.7,"she":0.7}}"#,
            r#"{"v":2,"id":"q0","probs":{"he":0.5,"she":0.5}}"#,
            r#"{"v":1,"id":"q9","probs":{"he":0.5,"she":0.5}}"#,
            r#"{"v":1,"id":"q0"}"#,
            "not json",
        ];
        for raw in bad {
            match parse_response(raw, "q0") {
                Err(AdapterError::Protocol { raw: r, .. }) => assert_eq!(r, raw),
                other => panic!("{raw}: {other:?}"),
            }
        }
        assert!(matches!(
            parse_response(r#"{"v":1,"id":"q0","error":"multi-token word"}"#, "q0"),
            Err(AdapterError::Remote(_))
        ));
    }

    #[test]
    fn endpoint_validation() {
        let mut e = AdapterEndpoint::new(Transport::Http {
            url: "http://127.0.0.1:1".into(),
        });
        assert!(e.validate().is_ok());
        e.timeout_ms = 0;
        assert!(e.validate().is_err());
        let e = AdapterEndpoint::new(Transport::Stdio { command: vec![] });
        assert!(e.validate().is_err());
        let e = AdapterEndpoint::new(Transport::Http { url: "ftp://x".into() });
        assert!(e.validate().is_err());
    }

    #[test]
    fn endpoint_toml_shape() {
        let e: AdapterEndpoint = toml::from_str(
            "transport = \"stdio\"\ncommand = [\"python3\", \"serve.py\"]\ntimeout_ms = 500\n",
        )
        .unwrap();
        assert_eq!(
            e.transport,
            Transport::Stdio {
                command: vec!["python3".into(), "serve.py".into()]
            }
        );
        assert_eq!((e.timeout_ms, e.max_retries), (500, 2));
    }
}
