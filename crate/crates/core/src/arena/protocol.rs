//! JSON Lines wire protocol spoken with worker processes.
//!
//! The worker greets with `{"proto":1}`, then answers each request line with
//! exactly one response line carrying the same `id`.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;
use thiserror::Error;

use super::transport::{Received, Transport};

pub const PROTOCOL_VERSION: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Create,
    Invoke,
    Inspect,
    Shutdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub action: Action,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub operation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    #[serde(default)]
    pub args: Vec<Json>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    #[serde(rename = "type")]
    pub kind: String,
    #[serde(default)]
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct WireMetrics {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_ns: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mem_bytes: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    /// Absent only on replies to requests too malformed to carry an id.
    #[serde(default)]
    pub id: Option<u64>,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<Json>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub handle: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<Json>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorBody>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<WireMetrics>,
}

impl Response {
    pub fn ok(id: Option<u64>) -> Self {
        Response {
            id,
            status: Status::Ok,
            value: None,
            handle: None,
            state: None,
            error: None,
            metrics: None,
        }
    }

    pub fn error(id: Option<u64>, kind: impl Into<String>, message: impl Into<String>) -> Self {
        Response {
            status: Status::Error,
            error: Some(ErrorBody {
                kind: kind.into(),
                message: message.into(),
            }),
            ..Response::ok(id)
        }
    }

    /// Parses and structurally checks one response line.
    pub fn parse(line: &str) -> Result<Response, String> {
        let response: Response =
            serde_json::from_str(line).map_err(|e| format!("malformed response: {e}"))?;
        if response.status == Status::Error && response.error.is_none() {
            return Err("error response without an `error` object".into());
        }
        Ok(response)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Greeting {
    pub proto: u64,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SessionError {
    #[error("worker did not answer within {0:?}")]
    Timeout(Duration),
    #[error("worker closed its output")]
    Closed,
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("worker I/O: {0}")]
    Io(String),
}

/// Client side of the protocol over any [`Transport`].
pub struct WorkerSession {
    transport: Box<dyn Transport>,
    next_id: u64,
}

impl WorkerSession {
    /// Waits for the greeting line and checks the protocol version.
    pub fn handshake(mut transport: Box<dyn Transport>, timeout: Duration) -> Result<Self, SessionError> {
        let line = match transport.recv(timeout) {
            Received::Line(line) => line,
            Received::Timeout => {
                transport.terminate();
                return Err(SessionError::Timeout(timeout));
            }
            Received::Closed => return Err(SessionError::Closed),
        };
        let greeting: Greeting = serde_json::from_str(&line)
            .map_err(|_| SessionError::Protocol(format!("expected greeting, got `{}`", truncate(&line))))?;
        if greeting.proto != PROTOCOL_VERSION {
            return Err(SessionError::Protocol(format!("unsupported protocol version {}", greeting.proto)));
        }
        Ok(WorkerSession { transport, next_id: 1 })
    }

    pub fn call(
        &mut self,
        action: Action,
        operation: Option<&str>,
        target: Option<&str>,
        args: Vec<Json>,
        timeout: Duration,
    ) -> Result<Response, SessionError> {
        let request = Request {
            id: self.next_id,
            action,
            operation: operation.map(str::to_string),
            target: target.map(str::to_string),
            args,
        };
        self.next_id += 1;
        let line = serde_json::to_string(&request).expect("requests serialize");
        self.send_raw(&line)?;
        let response = self.recv_response(timeout)?;
        if response.id != Some(request.id) {
            return Err(SessionError::Protocol(format!(
                "response id {:?} does not echo request id {}",
                response.id, request.id
            )));
        }
        Ok(response)
    }

    /// Sends a line verbatim; used by the conformance suite for malformed input.
    pub fn send_raw(&mut self, line: &str) -> Result<(), SessionError> {
        self.transport
            .send(line)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::BrokenPipe => SessionError::Closed,
                _ => SessionError::Io(e.to_string()),
            })
    }

    pub fn recv_response(&mut self, timeout: Duration) -> Result<Response, SessionError> {
        match self.transport.recv(timeout) {
            Received::Line(line) => Response::parse(&line).map_err(SessionError::Protocol),
            Received::Timeout => {
                self.transport.terminate();
                Err(SessionError::Timeout(timeout))
            }
            Received::Closed => Err(SessionError::Closed),
        }
    }

    /// Politely asks the worker to exit, then makes sure it is gone.
    pub fn shutdown(mut self, timeout: Duration) -> Result<Response, SessionError> {
        let result = self.call(Action::Shutdown, None, None, Vec::new(), timeout);
        self.transport.terminate();
        result
    }

    pub fn kill(mut self) {
        self.transport.terminate();
    }
}

fn truncate(s: &str) -> &str {
    match s.char_indices().nth(120) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConformanceCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConformanceReport {
    pub implementation_id: String,
    pub checks: Vec<ConformanceCheck>,
}

impl ConformanceReport {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }
}

/// Drives the greeting / id-echo / malformed-request / shutdown checks
/// against a freshly spawned worker.
pub fn check_conformance(
    transport: Box<dyn Transport>,
    implementation_id: &str,
    abstraction_name: &str,
    timeout: Duration,
) -> ConformanceReport {
    let mut checks = Vec::new();
    let mut record = |name: &str, result: Result<String, String>| {
        let passed = result.is_ok();
        let detail = result.unwrap_or_else(|e| e);
        checks.push(ConformanceCheck {
            name: name.to_string(),
            passed,
            detail,
        });
        passed
    };

    let mut session = match WorkerSession::handshake(transport, timeout) {
        Ok(session) => {
            record("greeting", Ok(format!("proto {PROTOCOL_VERSION}")));
            session
        }
        Err(e) => {
            record("greeting", Err(e.to_string()));
            return ConformanceReport {
                implementation_id: implementation_id.to_string(),
                checks,
            };
        }
    };

    let echo = session
        .call(Action::Create, Some(abstraction_name), None, Vec::new(), timeout)
        .map_err(|e| e.to_string())
        .and_then(|r| {
            if r.metrics.as_ref().and_then(|m| m.wall_ns).is_none() {
                Err("reply lacks metrics.wall_ns".to_string())
            } else {
                Ok(format!("id echoed, status {:?}", r.status))
            }
        });
    let alive = record("id_echo", echo);

    if alive {
        let malformed = session
            .send_raw("this is not json")
            .and_then(|_| session.recv_response(timeout))
            .map_err(|e| e.to_string())
            .and_then(|r| match (&r.status, &r.error) {
                (Status::Error, Some(body)) if body.kind == "protocol" => Ok("error type protocol".to_string()),
                _ => Err(format!("expected an error reply of type `protocol`, got {r:?}")),
            });
        record("malformed_request", malformed);

        let unknown_action = session
            .send_raw(r#"{"id":99,"action":"teleport","args":[]}"#)
            .and_then(|_| session.recv_response(timeout))
            .map_err(|e| e.to_string())
            .and_then(|r| match (r.id, &r.status) {
                (Some(99), Status::Error) => Ok("rejected with id echoed".to_string()),
                _ => Err(format!("expected error reply with id 99, got {r:?}")),
            });
        record("unknown_action", unknown_action);
    }

    let shutdown = session
        .shutdown(timeout)
        .map_err(|e| e.to_string())
        .and_then(|r| match r.status {
            Status::Ok => Ok("acknowledged".to_string()),
            Status::Error => Err(format!("shutdown rejected: {r:?}")),
        });
    record("shutdown", shutdown);

    ConformanceReport {
        implementation_id: implementation_id.to_string(),
        checks,
    }
}
