//! Client side of the scorer wire protocol.
//!
//! Request: `{"batch": [{"id", "context_text", "question", "options", "context_mode"}]}`.
//! Response: `{"scores": [{"id", "probs"}]}`, where an entry may carry
//! `"error"` instead of `probs`. Transport is an HTTP POST or one JSON line per
//! batch over a child process's stdin/stdout. Context text arrives already
//! truncated and extracted, so the remote side never applies τ itself.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{Condition, ContextMode, OptionDistribution, ScoreRequest, Scorer, ScorerError};
use crate::corpus::McqItem;
use crate::textproc::DEFAULT_MAX_LEN;

/// Allowed deviation of a returned distribution's sum from 1.
pub const WIRE_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireItem {
    pub id: String,
    pub context_text: String,
    pub question: String,
    pub options: Vec<String>,
    pub context_mode: ContextMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub batch: Vec<WireItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireScore {
    pub id: String,
    #[serde(default)]
    pub probs: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    pub scores: Vec<WireScore>,
}

impl WireRequest {
    pub fn from_requests(requests: &[ScoreRequest<'_>]) -> Self {
        WireRequest {
            batch: requests
                .iter()
                .map(|r| WireItem {
                    id: r.item.id.clone(),
                    context_text: r.context.as_ref().map(|c| c.to_text()).unwrap_or_default(),
                    question: r.item.question.clone(),
                    options: r.item.options.clone(),
                    context_mode: if r.context.is_some() {
                        ContextMode::Standard
                    } else {
                        ContextMode::ContextFree
                    },
                })
                .collect(),
        }
    }
}

/// Matches response entries to requested items by id and checks each
/// distribution.
pub fn match_response(
    requests: &[ScoreRequest<'_>],
    response: WireResponse,
) -> Result<Vec<OptionDistribution>, ScorerError> {
    let mut by_id: HashMap<String, WireScore> = HashMap::with_capacity(response.scores.len());
    for score in response.scores {
        if by_id.contains_key(&score.id) {
            return Err(ScorerError::Protocol {
                ids: vec![score.id.clone()],
                message: format!("duplicate id `{}` in response", score.id),
            });
        }
        by_id.insert(score.id.clone(), score);
    }
    let mut out = Vec::with_capacity(requests.len());
    let mut missing = Vec::new();
    for req in requests {
        let id = &req.item.id;
        let Some(score) = by_id.remove(id) else {
            missing.push(id.clone());
            continue;
        };
        if let Some(message) = score.error {
            return Err(ScorerError::Remote {
                id: id.clone(),
                message,
            });
        }
        if score.probs.len() != req.item.n_options() {
            return Err(ScorerError::Protocol {
                ids: vec![id.clone()],
                message: format!(
                    "expected {} probabilities, got {}",
                    req.item.n_options(),
                    score.probs.len()
                ),
            });
        }
        let dist = OptionDistribution::from_probs(score.probs, WIRE_TOLERANCE).map_err(|sum| {
            ScorerError::Normalization {
                id: id.clone(),
                sum,
            }
        })?;
        out.push(dist);
    }
    if !missing.is_empty() {
        return Err(ScorerError::Protocol {
            message: format!("response is missing ids {missing:?}"),
            ids: missing,
        });
    }
    if !by_id.is_empty() {
        let mut extra: Vec<String> = by_id.into_keys().collect();
        extra.sort();
        return Err(ScorerError::Protocol {
            message: format!("response has unrequested ids {extra:?}"),
            ids: extra,
        });
    }
    Ok(out)
}

struct ProcessIo {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
}

impl Drop for ProcessIo {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

enum Transport {
    Http { url: String, agent: ureq::Agent },
    Process(Mutex<ProcessIo>),
}

/// A scorer living behind the wire protocol.
pub struct ExternalScorer {
    id: String,
    transport: Transport,
    timeout: Duration,
    max_len: usize,
}

impl ExternalScorer {
    pub fn http(url: impl Into<String>, timeout: Duration) -> Self {
        let url = url.into();
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        ExternalScorer {
            id: format!("http:{url}"),
            transport: Transport::Http { url, agent },
            timeout,
            max_len: DEFAULT_MAX_LEN,
        }
    }

    /// Spawns `program args..` and talks line-delimited JSON over its stdio.
    pub fn spawn(program: &str, args: &[String], timeout: Duration) -> Result<Self, ScorerError> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| ScorerError::Transport {
                ids: vec![],
                message: format!("cannot start `{program}`: {e}"),
            })?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(ExternalScorer {
            id: format!("cmd:{program}"),
            transport: Transport::Process(Mutex::new(ProcessIo {
                child,
                stdin,
                lines: rx,
            })),
            timeout,
            max_len: DEFAULT_MAX_LEN,
        })
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn with_max_len(mut self, max_len: usize) -> Self {
        self.max_len = max_len;
        self
    }

    fn round_trip(&self, body: String, ids: &[String]) -> Result<String, ScorerError> {
        let transport_err = |message: String| ScorerError::Transport {
            ids: ids.to_vec(),
            message,
        };
        match &self.transport {
            Transport::Http { url, agent } => {
                let result = agent
                    .post(url.as_str())
                    .header("content-type", "application/json")
                    .send(body.as_str());
                match result {
                    Ok(mut resp) => resp.body_mut().read_to_string().map_err(|e| match e {
                        ureq::Error::Timeout(_) => ScorerError::Timeout { ids: ids.to_vec() },
                        other => transport_err(other.to_string()),
                    }),
                    Err(ureq::Error::Timeout(_)) => Err(ScorerError::Timeout { ids: ids.to_vec() }),
                    Err(e) => Err(transport_err(e.to_string())),
                }
            }
            Transport::Process(io) => {
                let mut io = io.lock().unwrap_or_else(|p| p.into_inner());
                writeln!(io.stdin, "{body}")
                    .and_then(|_| io.stdin.flush())
                    .map_err(|e| transport_err(format!("write to scorer process: {e}")))?;
                match io.lines.recv_timeout(self.timeout) {
                    Ok(Ok(line)) => Ok(line),
                    Ok(Err(e)) => Err(transport_err(format!("read from scorer process: {e}"))),
                    Err(RecvTimeoutError::Timeout) => {
                        Err(ScorerError::Timeout { ids: ids.to_vec() })
                    }
                    Err(RecvTimeoutError::Disconnected) => Err(transport_err(
                        "scorer process closed its output".to_string(),
                    )),
                }
            }
        }
    }
}

impl Scorer for ExternalScorer {
    fn id(&self) -> &str {
        &self.id
    }

    fn max_len(&self) -> usize {
        self.max_len
    }

    fn score_batch(
        &self,
        requests: &[ScoreRequest<'_>],
    ) -> Result<Vec<OptionDistribution>, ScorerError> {
        if requests.is_empty() {
            return Ok(Vec::new());
        }
        let ids: Vec<String> = requests.iter().map(|r| r.item.id.clone()).collect();
        let body = serde_json::to_string(&WireRequest::from_requests(requests))
            .expect("request serializes");
        let raw = self.round_trip(body, &ids)?;
        let response: WireResponse =
            serde_json::from_str(raw.trim()).map_err(|e| ScorerError::Protocol {
                ids: ids.clone(),
                message: format!("malformed response: {e}"),
            })?;
        match_response(requests, response)
    }
}

/// Scores a batch of `(item, condition)` pairs through `endpoint`.
pub fn external_score(
    endpoint: &ExternalScorer,
    batch: &[(&McqItem, Condition)],
) -> Result<Vec<OptionDistribution>, ScorerError> {
    let requests = batch
        .iter()
        .map(|(item, cond)| ScoreRequest::new(item, cond, endpoint.max_len()))
        .collect::<Result<Vec<_>, _>>()?;
    endpoint.score_batch(&requests)
}
