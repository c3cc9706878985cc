//! Line-delimited JSON over the standard streams of a spawned process.
//!
//! One request line is written, one response line is read back. A channel
//! never has more than one request in flight.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum ProtocolError {
    #[error("failed to start backend `{command}`: {source}")]
    Spawn {
        command: String,
        source: std::io::Error,
    },
    #[error("i/o error talking to backend `{command}`: {source}")]
    Io {
        command: String,
        source: std::io::Error,
    },
    #[error("backend `{command}` closed its output")]
    Closed { command: String },
    #[error("malformed response from `{command}`: {reason}; line: {line}")]
    Malformed {
        command: String,
        line: String,
        reason: String,
    },
    #[error("invalid response from `{command}`: {reason}; line: {line}")]
    Invalid {
        command: String,
        line: String,
        reason: String,
    },
}

/// A response together with the raw line it was parsed from, so semantic
/// validation can quote the line when it rejects it.
#[derive(Debug, Clone)]
pub struct Reply<T> {
    pub value: T,
    pub line: String,
}

/// A running backend process.
pub struct ProcessChannel {
    command: String,
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

impl ProcessChannel {
    /// Spawn `program args…` with piped stdin and stdout.
    pub fn spawn(program: &str, args: &[String]) -> Result<Self, ProtocolError> {
        let command = std::iter::once(program.to_string())
            .chain(args.iter().cloned())
            .collect::<Vec<_>>()
            .join(" ");
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|source| ProtocolError::Spawn {
                command: command.clone(),
                source,
            })?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Self {
            command,
            child,
            stdin,
            stdout,
        })
    }

    pub fn command(&self) -> &str {
        &self.command
    }

    /// Send one request and parse one response line.
    pub fn request<Q: Serialize, R: DeserializeOwned>(
        &mut self,
        request: &Q,
    ) -> Result<Reply<R>, ProtocolError> {
        let io = |source| ProtocolError::Io {
            command: self.command.clone(),
            source,
        };
        let mut body = serde_json::to_string(request).expect("requests serialize");
        body.push('\n');
        self.stdin.write_all(body.as_bytes()).map_err(io)?;
        self.stdin.flush().map_err(io)?;

        let mut line = String::new();
        let n = self.stdout.read_line(&mut line).map_err(|source| ProtocolError::Io {
            command: self.command.clone(),
            source,
        })?;
        if n == 0 {
            return Err(ProtocolError::Closed {
                command: self.command.clone(),
            });
        }
        let line = line.trim_end_matches(['\n', '\r']).to_string();
        match serde_json::from_str(&line) {
            Ok(value) => Ok(Reply { value, line }),
            Err(e) => Err(ProtocolError::Malformed {
                command: self.command.clone(),
                line,
                reason: e.to_string(),
            }),
        }
    }

    /// Build an [`ProtocolError::Invalid`] for a parsed but unacceptable reply.
    pub fn invalid(&self, line: &str, reason: impl Into<String>) -> ProtocolError {
        ProtocolError::Invalid {
            command: self.command.clone(),
            line: line.to_string(),
            reason: reason.into(),
        }
    }
}

impl Drop for ProcessChannel {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// How to launch an external backend.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BackendCommand {
    pub program: String,
    #[serde(default)]
    pub args: Vec<String>,
}

impl BackendCommand {
    pub fn spawn(&self) -> Result<ProcessChannel, ProtocolError> {
        ProcessChannel::spawn(&self.program, &self.args)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Deserialize, Debug)]
    struct Echo {
        text: String,
    }

    fn sh(script: &str) -> ProcessChannel {
        ProcessChannel::spawn("sh", &["-c".into(), script.into()]).unwrap()
    }

    #[test]
    fn echo_round_trip() {
        let mut ch = sh("while read -r l; do echo \"$l\"; done");
        for word in ["a", "b"] {
            let r: Reply<Echo> = ch.request(&serde_json::json!({ "text": word })).unwrap();
            assert_eq!(r.value.text, word);
        }
    }

    #[test]
    fn malformed_line_is_quoted() {
        let mut ch = sh("while read -r l; do echo 'not json'; done");
        let err = ch.request::<_, Echo>(&serde_json::json!({})).unwrap_err();
        assert!(err.to_string().contains("not json"), "{err}");
    }

    #[test]
    fn missing_field_is_malformed() {
        let mut ch = sh("while read -r l; do echo '{\"other\":1}'; done");
        let err = ch.request::<_, Echo>(&serde_json::json!({})).unwrap_err();
        assert!(matches!(err, ProtocolError::Malformed { .. }));
        assert!(err.to_string().contains("text"));
    }

    #[test]
    fn closed_output_is_an_error() {
        let mut ch = sh("read -r l; exit 0");
        let err = ch.request::<_, Echo>(&serde_json::json!({})).unwrap_err();
        assert!(matches!(err, ProtocolError::Closed { .. } | ProtocolError::Io { .. }));
    }
}
