//! In-process completion-endpoint double for tests and offline replay.
//!
//! Serves `/v1/completions` over a real localhost socket with a
//! caller-supplied responder, records every request body byte for byte,
//! and tracks the concurrency high-water mark so back-pressure claims are
//! checkable. Std-only on purpose: the double must not share any HTTP code
//! with the client it exercises.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

/// One canned HTTP reply.
#[derive(Debug, Clone)]
pub struct MockResponse {
    pub status: u16,
    pub body: String,
}

impl MockResponse {
    /// A completion carrying only generated text.
    pub fn completion(text: &str) -> Self {
        let body = serde_json::json!({
            "id": "mock",
            "object": "text_completion",
            "choices": [{ "index": 0, "text": text, "finish_reason": "stop" }],
        });
        MockResponse {
            status: 200,
            body: body.to_string(),
        }
    }

    /// A completion with a first-step top-k logprob map.
    pub fn completion_with_topk(text: &str, top_logprobs: &[(&str, f64)]) -> Self {
        let map: BTreeMap<&str, f64> = top_logprobs.iter().copied().collect();
        let body = serde_json::json!({
            "id": "mock",
            "object": "text_completion",
            "choices": [{
                "index": 0,
                "text": text,
                "finish_reason": "stop",
                "logprobs": { "top_logprobs": [map] },
            }],
        });
        MockResponse {
            status: 200,
            body: body.to_string(),
        }
    }

    /// An error reply with the given status and JSON error message.
    pub fn error(status: u16, message: &str) -> Self {
        MockResponse {
            status,
            body: serde_json::json!({ "error": message }).to_string(),
        }
    }
}

type Responder = dyn Fn(&serde_json::Value) -> MockResponse + Send + Sync;

struct Shared {
    responder: Box<Responder>,
    bodies: Mutex<Vec<Vec<u8>>>,
    active: AtomicUsize,
    max_active: AtomicUsize,
    shutdown: AtomicBool,
}

/// Localhost completion server driven by a responder closure. Stateful
/// scripts (fail twice then succeed, per-prompt lookup) live inside the
/// closure.
pub struct MockServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    accept_thread: Option<JoinHandle<()>>,
}

impl MockServer {
    pub fn respond_with<F>(responder: F) -> Self
    where
        F: Fn(&serde_json::Value) -> MockResponse + Send + Sync + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind mock listener");
        let addr = listener.local_addr().expect("mock listener address");
        let shared = Arc::new(Shared {
            responder: Box::new(responder),
            bodies: Mutex::new(Vec::new()),
            active: AtomicUsize::new(0),
            max_active: AtomicUsize::new(0),
            shutdown: AtomicBool::new(false),
        });
        let accept_shared = Arc::clone(&shared);
        let accept_thread = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if accept_shared.shutdown.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let conn_shared = Arc::clone(&accept_shared);
                std::thread::spawn(move || handle_connection(stream, conn_shared));
            }
        });
        MockServer {
            addr,
            shared,
            accept_thread: Some(accept_thread),
        }
    }

    /// Always returns the same completion text.
    pub fn completion_fixed(text: &str) -> Self {
        let text = text.to_string();
        Self::respond_with(move |_| MockResponse::completion(&text))
    }

    /// Looks responses up by the request's exact prompt string; unknown
    /// prompts get a 404 so replay gaps fail loudly.
    pub fn scripted(script: BTreeMap<String, MockResponse>) -> Self {
        Self::respond_with(move |request| {
            let prompt = request.get("prompt").and_then(|p| p.as_str()).unwrap_or("");
            match script.get(prompt) {
                Some(response) => response.clone(),
                None => MockResponse::error(404, "unscripted prompt"),
            }
        })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Raw request bodies in arrival order.
    pub fn recorded_bodies(&self) -> Vec<Vec<u8>> {
        self.shared.bodies.lock().expect("bodies lock").clone()
    }

    pub fn request_count(&self) -> usize {
        self.shared.bodies.lock().expect("bodies lock").len()
    }

    /// Highest number of simultaneously open requests seen so far.
    pub fn max_concurrent(&self) -> usize {
        self.shared.max_active.load(Ordering::SeqCst)
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.shared.shutdown.store(true, Ordering::SeqCst);
        // Wake the accept loop so it observes the flag.
        let _ = TcpStream::connect(self.addr);
        if let Some(handle) = self.accept_thread.take() {
            let _ = handle.join();
        }
    }
}

fn find_subsequence(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack
        .windows(needle.len())
        .position(|window| window == needle)
}

fn handle_connection(mut stream: TcpStream, shared: Arc<Shared>) {
    if shared.shutdown.load(Ordering::SeqCst) {
        return;
    }
    let now_active = shared.active.fetch_add(1, Ordering::SeqCst) + 1;
    shared.max_active.fetch_max(now_active, Ordering::SeqCst);

    let result = read_request(&mut stream);
    if let Some((method, path, body)) = result {
        let response = if method != "POST" || path != "/v1/completions" {
            MockResponse::error(404, "unknown endpoint")
        } else {
            shared
                .bodies
                .lock()
                .expect("bodies lock")
                .push(body.clone());
            match serde_json::from_slice::<serde_json::Value>(&body) {
                Ok(parsed) => (shared.responder)(&parsed),
                Err(_) => MockResponse::error(400, "request body is not JSON"),
            }
        };
        let reason = match response.status {
            200 => "OK",
            400 => "Bad Request",
            404 => "Not Found",
            500 => "Internal Server Error",
            503 => "Service Unavailable",
            _ => "Mock",
        };
        let payload = format!(
            "HTTP/1.1 {} {}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
            response.status,
            reason,
            response.body.len(),
            response.body,
        );
        let _ = stream.write_all(payload.as_bytes());
        let _ = stream.flush();
    }

    shared.active.fetch_sub(1, Ordering::SeqCst);
}

/// Minimal HTTP/1.1 request reader: request line, headers, Content-Length
/// body. Returns None on anything unparseable; the connection just closes.
fn read_request(stream: &mut TcpStream) -> Option<(String, String, Vec<u8>)> {
    let mut buf = Vec::new();
    let mut chunk = [0u8; 4096];
    let header_end = loop {
        if let Some(pos) = find_subsequence(&buf, b"\r\n\r\n") {
            break pos;
        }
        if buf.len() > 1 << 20 {
            return None;
        }
        let n = stream.read(&mut chunk).ok()?;
        if n == 0 {
            return None;
        }
        buf.extend_from_slice(&chunk[..n]);
    };

    let head = std::str::from_utf8(&buf[..header_end]).ok()?;
    let mut lines = head.lines();
    let request_line = lines.next()?;
    let mut parts = request_line.split_whitespace();
    let method = parts.next()?.to_string();
    let path = parts.next()?.to_string();
    let content_length = lines
        .filter_map(|line| {
            let (name, value) = line.split_once(':')?;
            name.eq_ignore_ascii_case("content-length")
                .then(|| value.trim().parse::<usize>().ok())?
        })
        .next()
        .unwrap_or(0);

    let body_start = header_end + 4;
    while buf.len() < body_start + content_length {
        let n = stream.read(&mut chunk).ok()?;
        if n == 0 {
            return None;
        }
        buf.extend_from_slice(&chunk[..n]);
    }
    Some((
        method,
        path,
        buf[body_start..body_start + content_length].to_vec(),
    ))
}
