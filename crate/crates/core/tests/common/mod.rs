//! Minimal blocking HTTP/1.1 stub for provider tests.

#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;

#[derive(Debug, Clone)]
pub struct Captured {
    pub path: String,
    pub headers: Vec<(String, String)>,
    pub body: serde_json::Value,
}

impl Captured {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }
}

pub type Handler = dyn Fn(&Captured, usize) -> (u16, serde_json::Value) + Send + Sync;

pub struct StubServer {
    pub base_url: String,
    pub requests: Arc<Mutex<Vec<Captured>>>,
}

impl StubServer {
    /// Serves until the process exits; `handler` gets each request and its
    /// 0-based sequence number.
    pub fn start(handler: Box<Handler>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind");
        let base_url = format!("http://{}", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let log = requests.clone();
        let handler: Arc<Handler> = Arc::from(handler);
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                let log = log.clone();
                let handler = handler.clone();
                thread::spawn(move || serve(stream, &log, handler.as_ref()));
            }
        });
        Self { base_url, requests }
    }

    pub fn count(&self) -> usize {
        self.requests.lock().unwrap().len()
    }
}

fn serve(stream: TcpStream, log: &Mutex<Vec<Captured>>, handler: &Handler) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut line = String::new();
    if reader.read_line(&mut line).unwrap_or(0) == 0 {
        return;
    }
    let path = line.split_whitespace().nth(1).unwrap_or("/").to_string();
    let mut headers = Vec::new();
    loop {
        let mut h = String::new();
        reader.read_line(&mut h).unwrap();
        let h = h.trim_end();
        if h.is_empty() {
            break;
        }
        if let Some((k, v)) = h.split_once(':') {
            headers.push((k.trim().to_string(), v.trim().to_string()));
        }
    }
    let len: usize = headers
        .iter()
        .find(|(k, _)| k.eq_ignore_ascii_case("content-length"))
        .and_then(|(_, v)| v.parse().ok())
        .unwrap_or(0);
    let mut body = vec![0u8; len];
    reader.read_exact(&mut body).unwrap();
    let captured = Captured {
        path,
        headers,
        body: serde_json::from_slice(&body).unwrap_or(serde_json::Value::Null),
    };
    let seq = {
        let mut g = log.lock().unwrap();
        g.push(captured.clone());
        g.len() - 1
    };
    let (status, json) = handler(&captured, seq);
    let payload = json.to_string();
    let mut out = stream;
    let _ = write!(
        out,
        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
        payload.len()
    );
}

/// Deterministic fake embedding: character histogram folded into 8 dims.
pub fn fake_vector(text: &str) -> Vec<f64> {
    let mut v = vec![0.1; 8];
    for (i, b) in text.bytes().enumerate() {
        v[(b as usize + i) % 8] += 1.0;
    }
    v
}

/// Answers completions with a fixed summary and embeddings with
/// [`fake_vector`].
pub fn openai_like() -> Box<Handler> {
    Box::new(|req, _| {
        if req.path.ends_with("/embeddings") {
            let data: Vec<serde_json::Value> = req.body["input"]
                .as_array()
                .unwrap()
                .iter()
                .map(|t| serde_json::json!({ "embedding": fake_vector(t.as_str().unwrap()) }))
                .collect();
            (200, serde_json::json!({ "data": data }))
        } else {
            (
                200,
                serde_json::json!({ "choices": [{ "text": " Summary: markets rallied as central banks held rates steady through the quarter." }] }),
            )
        }
    })
}
