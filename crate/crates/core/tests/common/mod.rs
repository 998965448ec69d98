#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

/// What the stub sends back for one request.
pub enum Reply {
    /// 200 with `{"text": ...}`.
    Text(String),
    /// 200 with a raw body.
    Raw(String),
    Status(u16),
}

pub struct Hit {
    pub at: Instant,
    pub prompt: String,
    pub auth: Option<String>,
    pub body: serde_json::Value,
}

/// Minimal HTTP/1.1 scorer on 127.0.0.1. Every connection is served on its
/// own thread after `delay`, so concurrent clients overlap in flight.
pub struct StubServer {
    pub url: String,
    pub hits: Arc<Mutex<Vec<Hit>>>,
    pub max_in_flight: Arc<AtomicUsize>,
}

type Handler = dyn Fn(usize, &str) -> Reply + Send + Sync;

impl StubServer {
    pub fn start(delay: Duration, handler: impl Fn(usize, &str) -> Reply + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/score", listener.local_addr().unwrap());
        let hits = Arc::new(Mutex::new(Vec::new()));
        let max_in_flight = Arc::new(AtomicUsize::new(0));
        let in_flight = Arc::new(AtomicUsize::new(0));
        let handler: Arc<Handler> = Arc::new(handler);
        let (h2, m2) = (hits.clone(), max_in_flight.clone());
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                let (hits, maxf, inf, handler) = (h2.clone(), m2.clone(), in_flight.clone(), handler.clone());
                std::thread::spawn(move || serve(stream, delay, &hits, &maxf, &inf, &*handler));
            }
        });
        Self { url, hits, max_in_flight }
    }

    pub fn count(&self) -> usize {
        self.hits.lock().unwrap().len()
    }
}

fn serve(
    mut stream: TcpStream,
    delay: Duration,
    hits: &Mutex<Vec<Hit>>,
    max_in_flight: &AtomicUsize,
    in_flight: &AtomicUsize,
    handler: &Handler,
) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut len = 0usize;
    let mut auth = None;
    let mut line = String::new();
    if reader.read_line(&mut line).unwrap_or(0) == 0 {
        return;
    }
    loop {
        line.clear();
        if reader.read_line(&mut line).unwrap_or(0) == 0 {
            return;
        }
        let l = line.trim_end();
        if l.is_empty() {
            break;
        }
        if let Some((k, v)) = l.split_once(':') {
            match k.trim().to_ascii_lowercase().as_str() {
                "content-length" => len = v.trim().parse().unwrap_or(0),
                "authorization" => auth = Some(v.trim().to_string()),
                _ => {}
            }
        }
    }
    let mut body = vec![0u8; len];
    if reader.read_exact(&mut body).is_err() {
        return;
    }
    let now = in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    max_in_flight.fetch_max(now, Ordering::SeqCst);
    let body: serde_json::Value = serde_json::from_slice(&body).unwrap_or_default();
    let prompt = body.get("prompt").and_then(|p| p.as_str()).unwrap_or_default().to_string();
    let index = {
        let mut h = hits.lock().unwrap();
        h.push(Hit { at: Instant::now(), prompt: prompt.clone(), auth, body });
        h.len() - 1
    };
    std::thread::sleep(delay);
    let (status, body) = match handler(index, &prompt) {
        Reply::Text(t) => (200, serde_json::json!({ "text": t }).to_string()),
        Reply::Raw(b) => (200, b),
        Reply::Status(s) => (s, "{}".to_string()),
    };
    in_flight.fetch_sub(1, Ordering::SeqCst);
    let resp = format!(
        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    let _ = stream.write_all(resp.as_bytes());
    let _ = stream.flush();
}

pub fn is_sc_prompt(prompt: &str) -> bool {
    prompt.contains("the degree of overediting")
}
