//! Cross-module integration tests that don't map to a numbered release
//! criterion: the remote NLI wire protocol against a real TCP server, and a
//! learning-works smoke test on a micro dataset.

use std::io::{Read, Write};
use std::net::TcpListener;

use gvqa::eval::nli::{NliBackend, RemoteNli};
use gvqa::pipeline::{train_adapter_flat, Pipeline, TrainPhaseConfig};
use gvqa::scene::generate_dataset;
use gvqa::stage::StageId;

/// Minimal blocking HTTP/1.1 server: answers `n_requests` POSTs, capturing
/// each (path, body) pair, then shuts down.
fn mini_nli_server(n_requests: usize) -> (String, std::thread::JoinHandle<Vec<(String, String)>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let handle = std::thread::spawn(move || {
        let mut seen = Vec::new();
        for _ in 0..n_requests {
            let (mut stream, _) = listener.accept().unwrap();
            let mut buf = Vec::new();
            let mut chunk = [0u8; 4096];
            let (head_end, body_len) = loop {
                let n = stream.read(&mut chunk).unwrap();
                buf.extend_from_slice(&chunk[..n]);
                if let Some(pos) = buf.windows(4).position(|w| w == b"\r\n\r\n") {
                    let head = String::from_utf8_lossy(&buf[..pos]).to_string();
                    let len = head
                        .lines()
                        .find_map(|l| {
                            l.to_ascii_lowercase()
                                .strip_prefix("content-length:")
                                .map(|v| v.trim().parse::<usize>().unwrap())
                        })
                        .unwrap_or(0);
                    break (pos + 4, len);
                }
            };
            while buf.len() < head_end + body_len {
                let n = stream.read(&mut chunk).unwrap();
                buf.extend_from_slice(&chunk[..n]);
            }
            let head = String::from_utf8_lossy(&buf[..head_end]).to_string();
            let path = head.split_whitespace().nth(1).unwrap().to_string();
            let body = String::from_utf8_lossy(&buf[head_end..head_end + body_len]).to_string();

            let response_body = if path.ends_with("/nli/batch") {
                let pairs: Vec<serde_json::Value> = serde_json::from_str(&body).unwrap();
                let items: Vec<String> = pairs
                    .iter()
                    .map(|_| r#"{"entail":0.2,"neutral":0.3,"contradiction":0.5}"#.to_string())
                    .collect();
                format!("[{}]", items.join(","))
            } else {
                r#"{"entail":0.7,"neutral":0.2,"contradiction":0.1}"#.to_string()
            };
            let resp = format!(
                "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{}",
                response_body.len(),
                response_body
            );
            stream.write_all(resp.as_bytes()).unwrap();
            seen.push((path, body));
        }
        seen
    });
    (format!("http://{addr}"), handle)
}

#[test]
fn remote_nli_wire_protocol() {
    let (base, server) = mini_nli_server(2);
    let backend = RemoteNli::new(&base).unwrap();

    let v = backend
        .score("the light is red", "the car should stop")
        .unwrap()
        .expect("2xx response must yield a verdict");
    assert!((v.entail - 0.7).abs() < 1e-12);
    assert!((v.contra - 0.1).abs() < 1e-12);

    let pairs = [
        ("a".to_string(), "b".to_string()),
        ("c".to_string(), "d".to_string()),
    ];
    let batch = backend.score_batch(&pairs).unwrap();
    assert_eq!(batch.len(), 2);
    for v in batch {
        let v = v.expect("batch verdicts present");
        assert!((v.contra - 0.5).abs() < 1e-12);
    }

    let seen = server.join().unwrap();
    assert_eq!(seen[0].0, "/nli");
    let single: serde_json::Value = serde_json::from_str(&seen[0].1).unwrap();
    assert_eq!(single["premise"], "the light is red");
    assert_eq!(single["hypothesis"], "the car should stop");
    assert_eq!(seen[1].0, "/nli/batch");
    let batch_req: Vec<serde_json::Value> = serde_json::from_str(&seen[1].1).unwrap();
    assert_eq!(batch_req.len(), 2);
    assert_eq!(batch_req[1]["premise"], "c");
}

#[test]
fn adapter_training_overfits_micro_dataset() {
    let ds = generate_dataset(9, 15, 0.2).unwrap();
    assert_eq!(ds.train.len(), 3);
    let mut pl = Pipeline::new(17).unwrap();

    // warm up the base LM, then overfit the perception adapter
    let mut pre = TrainPhaseConfig::desk_default(1);
    pre.epochs = 300;
    pre.batch_size = 3;
    gvqa::pipeline::pretrain_backbone(&mut pl, &pre, &ds.train).unwrap();

    let mut cfg = TrainPhaseConfig::desk_default(1);
    cfg.epochs = 100;
    cfg.base_lr = 1e-2;
    cfg.batch_size = 3;
    let stats = train_adapter_flat(&mut pl, StageId::Perception, &cfg, &ds.train).unwrap();

    let first = stats.step_losses.first().copied().unwrap();
    let last = stats.step_losses.last().copied().unwrap();
    assert!(
        last < 0.05,
        "micro dataset should be memorized: first loss {first:.3}, last loss {last:.3}"
    );
}
