use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use serde_json::{json, Value};

use compre_probe::ablation::{evaluate, EvalError, EvalOptions};
use compre_probe::corpus::{ContextKind, Corpus, McqItem};
use compre_probe::scorer::{external_score, Condition, ExternalScorer, ScorerError};
use compre_probe::textproc::{ExtractMode, ExtractSpec};

fn item(id: &str, n: usize) -> McqItem {
    McqItem {
        id: id.into(),
        context: "one two three four five six seven eight nine ten".into(),
        context_kind: ContextKind::Passage,
        question: "which ?".into(),
        options: (0..n).map(|i| format!("opt{i}")).collect(),
        answer_index: n - 1,
        meta: BTreeMap::new(),
    }
}

/// Serves `requests` POSTs, answering each with `respond(request body)`, and
/// forwards every parsed request body to the returned channel.
fn http_stub(
    requests: usize,
    respond: impl Fn(&Value) -> Value + Send + 'static,
) -> (String, mpsc::Receiver<Value>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/score", listener.local_addr().unwrap());
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for stream in listener.incoming().take(requests) {
            let mut stream = stream.unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some((k, v)) = line.split_once(':') {
                    if k.eq_ignore_ascii_case("content-length") {
                        len = v.trim().parse().unwrap();
                    }
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            let request: Value = serde_json::from_slice(&body).unwrap();
            let reply = respond(&request).to_string();
            let _ = tx.send(request);
            write!(
                stream,
                "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{reply}",
                reply.len()
            )
            .unwrap();
        }
    });
    (url, rx)
}

/// Puts all mass on the last option of every requested item.
fn last_option(request: &Value) -> Value {
    let scores: Vec<Value> = request["batch"]
        .as_array()
        .unwrap()
        .iter()
        .map(|it| {
            let n = it["options"].as_array().unwrap().len();
            let mut probs = vec![0.0; n];
            probs[n - 1] = 1.0;
            json!({"id": it["id"], "probs": probs})
        })
        .collect();
    json!({ "scores": scores })
}

#[test]
fn http_round_trip_with_mixed_option_counts() {
    let (url, seen) = http_stub(1, last_option);
    let scorer = ExternalScorer::http(url, Duration::from_secs(5));
    let items: Vec<McqItem> = (0..6).map(|i| item(&format!("i{i}"), 2 + i % 3)).collect();
    let corpus = Corpus::new("mixed", items);
    let eval = evaluate(
        &scorer,
        &corpus,
        &Condition::partial(ExtractSpec::new(30, ExtractMode::Beginning, 0).unwrap()),
        &EvalOptions {
            batch_size: 16,
            parallelism: 1,
        },
    )
    .unwrap();
    assert_eq!(eval.accuracy, 1.0);
    let request = seen.recv().unwrap();
    let first = &request["batch"][0];
    assert_eq!(first["context_text"], "one two three");
    assert_eq!(first["context_mode"], "standard");
    assert_eq!(first["options"].as_array().unwrap().len(), 2);
}

#[test]
fn context_free_request_has_no_context() {
    let (url, seen) = http_stub(1, last_option);
    let scorer = ExternalScorer::http(url, Duration::from_secs(5));
    let it = item("a", 3);
    external_score(&scorer, &[(&it, Condition::context_free())]).unwrap();
    let request = seen.recv().unwrap();
    assert_eq!(request["batch"][0]["context_mode"], "context_free");
    assert_eq!(request["batch"][0]["context_text"], "");
}

#[test]
fn missing_id_is_a_protocol_error_naming_it() {
    let (url, _seen) = http_stub(1, |req| {
        let mut reply = last_option(req);
        reply["scores"].as_array_mut().unwrap().pop();
        reply
    });
    let scorer = ExternalScorer::http(url, Duration::from_secs(5));
    let (a, b) = (item("a", 2), item("b", 2));
    let err = external_score(
        &scorer,
        &[
            (&a, Condition::full_context()),
            (&b, Condition::full_context()),
        ],
    )
    .unwrap_err();
    match err {
        ScorerError::Protocol { ids, .. } => assert_eq!(ids, ["b"]),
        other => panic!("expected protocol error, got {other:?}"),
    }
}

#[test]
fn unnormalized_reply_is_rejected() {
    let (url, _seen) = http_stub(1, |req| {
        let id = req["batch"][0]["id"].clone();
        json!({"scores": [{"id": id, "probs": [0.5, 0.6]}]})
    });
    let scorer = ExternalScorer::http(url, Duration::from_secs(5));
    let a = item("a", 2);
    let err = external_score(&scorer, &[(&a, Condition::full_context())]).unwrap_err();
    assert!(matches!(err, ScorerError::Normalization { .. }), "{err:?}");
}

#[test]
fn slightly_off_reply_is_renormalized() {
    let (url, _seen) = http_stub(1, |req| {
        let id = req["batch"][0]["id"].clone();
        json!({"scores": [{"id": id, "probs": [0.25, 0.75 + 5e-5]}]})
    });
    let scorer = ExternalScorer::http(url, Duration::from_secs(5));
    let a = item("a", 2);
    let d = external_score(&scorer, &[(&a, Condition::full_context())]).unwrap();
    let sum: f64 = d[0].probs().iter().sum();
    assert!((sum - 1.0).abs() < 1e-12);
}

#[test]
fn unreachable_endpoint_fails_the_evaluation_with_progress() {
    let port = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let scorer = ExternalScorer::http(format!("http://127.0.0.1:{port}/"), Duration::from_secs(2));
    let corpus = Corpus::new("c", vec![item("a", 2), item("b", 2)]);
    let err = evaluate(
        &scorer,
        &corpus,
        &Condition::full_context(),
        &EvalOptions::default(),
    )
    .unwrap_err();
    match err {
        EvalError::Scorer {
            completed, total, ..
        } => {
            assert_eq!(completed, 0);
            assert_eq!(total, 2);
        }
        other => panic!("expected scorer error, got {other:?}"),
    }
}

const PY_STUB: &str = r#"
import json, sys
mode = sys.argv[1]
for line in sys.stdin:
    req = json.loads(line)
    if mode == "hang":
        continue
    out = []
    for it in req["batch"]:
        n = len(it["options"])
        out.append({"id": it["id"], "probs": [1.0 / n] * n})
    if mode == "error":
        out[0] = {"id": out[0]["id"], "error": "model exploded"}
    print(json.dumps({"scores": out}), flush=True)
"#;

fn python_scorer(mode: &str, timeout: Duration) -> Option<ExternalScorer> {
    let args = vec!["-c".to_string(), PY_STUB.to_string(), mode.to_string()];
    match ExternalScorer::spawn("python3", &args, timeout) {
        Ok(s) => Some(s),
        Err(e) => {
            eprintln!("python3 unavailable, skipping: {e}");
            None
        }
    }
}

#[test]
fn process_transport_round_trip() {
    let Some(scorer) = python_scorer("uniform", Duration::from_secs(10)) else {
        return;
    };
    let items: Vec<McqItem> = (0..5).map(|i| item(&format!("p{i}"), 2 + i)).collect();
    let batch: Vec<_> = items
        .iter()
        .map(|i| (i, Condition::full_context()))
        .collect();
    for _ in 0..2 {
        let out = external_score(&scorer, &batch).unwrap();
        for (d, it) in out.iter().zip(&items) {
            assert_eq!(d.len(), it.n_options());
        }
    }
}

#[test]
fn process_error_entry_surfaces() {
    let Some(scorer) = python_scorer("error", Duration::from_secs(10)) else {
        return;
    };
    let a = item("a", 2);
    let err = external_score(&scorer, &[(&a, Condition::full_context())]).unwrap_err();
    assert!(
        matches!(err, ScorerError::Remote { ref id, .. } if id == "a"),
        "{err:?}"
    );
}

#[test]
fn process_timeout() {
    let Some(scorer) = python_scorer("hang", Duration::from_millis(500)) else {
        return;
    };
    let a = item("a", 2);
    let err = external_score(&scorer, &[(&a, Condition::full_context())]).unwrap_err();
    assert!(matches!(err, ScorerError::Timeout { .. }), "{err:?}");
}
