//! Minimal HTTP embedding service for tests, built on `std::net`.

#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Deterministic vectors derived from each text.
    Ok,
    /// Every request answered with HTTP 500.
    ServerError,
    /// One vector fewer than requested.
    Short,
}

pub struct MockServer {
    pub endpoint: String,
    /// Number of texts in each request received, in arrival order.
    pub batches: Arc<Mutex<Vec<usize>>>,
}

/// Vector returned for `text` by a `Mode::Ok` server of dimension `dim`.
pub fn mock_vector(text: &str, dim: usize) -> Vec<f64> {
    let bytes = text.as_bytes();
    (0..dim)
        .map(|k| {
            let b = bytes.get(k % bytes.len().max(1)).copied().unwrap_or(0) as f64;
            (b + k as f64 + bytes.len() as f64).sin()
        })
        .collect()
}

pub fn start(mode: Mode, dim: usize) -> MockServer {
    let listener = TcpListener::bind("127.0.0.1:0").expect("bind mock server");
    let endpoint = format!("http://{}", listener.local_addr().unwrap());
    let batches = Arc::new(Mutex::new(Vec::new()));
    let seen = Arc::clone(&batches);
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { break };
            let seen = Arc::clone(&seen);
            thread::spawn(move || serve(stream, mode, dim, &seen));
        }
    });
    MockServer { endpoint, batches }
}

/// An endpoint on which nothing listens.
pub fn dead_endpoint() -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    format!("http://{addr}")
}

fn serve(stream: TcpStream, mode: Mode, dim: usize, seen: &Mutex<Vec<usize>>) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut writer = stream;
    loop {
        let mut request_line = String::new();
        if reader.read_line(&mut request_line).unwrap_or(0) == 0 {
            return;
        }
        let mut length = 0usize;
        loop {
            let mut line = String::new();
            if reader.read_line(&mut line).unwrap_or(0) == 0 {
                return;
            }
            let line = line.trim_end();
            if line.is_empty() {
                break;
            }
            if let Some((name, value)) = line.split_once(':') {
                if name.eq_ignore_ascii_case("content-length") {
                    length = value.trim().parse().unwrap_or(0);
                }
            }
        }
        let mut body = vec![0u8; length];
        if reader.read_exact(&mut body).is_err() {
            return;
        }
        let request: serde_json::Value = serde_json::from_slice(&body).unwrap_or_default();
        let texts: Vec<String> = request["texts"]
            .as_array()
            .map(|a| a.iter().filter_map(|t| t.as_str().map(String::from)).collect())
            .unwrap_or_default();
        seen.lock().unwrap().push(texts.len());
        let (status, payload) = match mode {
            Mode::ServerError => ("500 Internal Server Error", r#"{"error":"boom"}"#.to_string()),
            Mode::Ok | Mode::Short => {
                let mut vectors: Vec<Vec<f64>> = texts.iter().map(|t| mock_vector(t, dim)).collect();
                if mode == Mode::Short {
                    vectors.pop();
                }
                ("200 OK", serde_json::json!({ "vectors": vectors }).to_string())
            }
        };
        let response = format!(
            "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{payload}",
            payload.len()
        );
        if writer.write_all(response.as_bytes()).is_err() {
            return;
        }
    }
}
