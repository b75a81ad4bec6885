//! A tiny blocking HTTP/1.1 server for exercising the wire clients without a
//! real model server or retrieval service. One thread per connection,
//! `Connection: close` on every response.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use serde_json::{json, Value};

use crate::retrieval::Document;

#[derive(Debug, Clone)]
pub struct StubRequest {
    pub method: String,
    pub path: String,
    pub body: String,
}

impl StubRequest {
    pub fn json(&self) -> Option<Value> {
        serde_json::from_str(&self.body).ok()
    }
}

#[derive(Debug, Clone)]
pub struct StubResponse {
    pub status: u16,
    pub body: String,
}

impl StubResponse {
    pub fn json(value: Value) -> Self {
        Self {
            status: 200,
            body: value.to_string(),
        }
    }

    pub fn status(status: u16) -> Self {
        Self {
            status,
            body: String::new(),
        }
    }
}

type Handler = dyn Fn(&StubRequest) -> StubResponse + Send + Sync;

pub struct StubServer {
    addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    hits: Arc<AtomicUsize>,
    accept: Option<JoinHandle<()>>,
}

impl StubServer {
    pub fn start<F>(handler: F) -> std::io::Result<Self>
    where
        F: Fn(&StubRequest) -> StubResponse + Send + Sync + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let shutdown = Arc::new(AtomicBool::new(false));
        let hits = Arc::new(AtomicUsize::new(0));
        let handler: Arc<Handler> = Arc::new(handler);
        let accept = {
            let shutdown = shutdown.clone();
            let hits = hits.clone();
            std::thread::spawn(move || {
                for stream in listener.incoming() {
                    if shutdown.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = stream else { continue };
                    let handler = handler.clone();
                    let hits = hits.clone();
                    std::thread::spawn(move || {
                        if let Err(e) = serve(stream, handler.as_ref(), &hits) {
                            log::debug!("stub connection error: {e}");
                        }
                    });
                }
            })
        };
        Ok(Self {
            addr,
            shutdown,
            hits,
            accept: Some(accept),
        })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Requests served so far.
    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }

    /// Completions endpoint whose continuation is the prompt itself. Stop
    /// sequences are deliberately ignored so client-side handling shows.
    pub fn completions_echo() -> std::io::Result<Self> {
        Self::start(|req| {
            let prompt = req
                .json()
                .and_then(|v| v.get("prompt").and_then(Value::as_str).map(String::from))
                .unwrap_or_default();
            let tokens: Vec<&str> = prompt.split_whitespace().collect();
            StubResponse::json(json!({
                "choices": [{
                    "text": prompt,
                    "finish_reason": "stop",
                    "logprobs": {
                        "tokens": tokens,
                        "token_logprobs": tokens.iter().map(|_| -0.5).collect::<Vec<_>>(),
                    }
                }],
                "usage": { "completion_tokens": tokens.len() }
            }))
        })
    }

    /// Retrieval endpoint that always answers with `docs` (at most `n` of
    /// them), in the given order.
    pub fn retriever(docs: Vec<(Document, f64)>) -> std::io::Result<Self> {
        Self::start(move |req| {
            let n = req
                .json()
                .and_then(|v| v.get("n").and_then(Value::as_u64))
                .unwrap_or(u64::MAX) as usize;
            let docs: Vec<Value> = docs
                .iter()
                .take(n)
                .map(|(d, s)| json!({"id": d.id, "title": d.title, "text": d.text, "score": s}))
                .collect();
            StubResponse::json(json!({ "docs": docs }))
        })
    }

    /// Every request gets `status` with an empty body.
    pub fn failing(status: u16) -> std::io::Result<Self> {
        Self::start(move |_| StubResponse::status(status))
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        // wake the accept loop
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

fn reason(status: u16) -> &'static str {
    match status {
        200 => "OK",
        400 => "Bad Request",
        404 => "Not Found",
        500 => "Internal Server Error",
        503 => "Service Unavailable",
        _ => "Status",
    }
}

fn serve(stream: TcpStream, handler: &Handler, hits: &AtomicUsize) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut request_line = String::new();
    if reader.read_line(&mut request_line)? == 0 {
        return Ok(());
    }
    let mut parts = request_line.split_whitespace();
    let method = parts.next().unwrap_or_default().to_string();
    let path = parts.next().unwrap_or_default().to_string();
    let mut content_length = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 || line == "\r\n" || line == "\n" {
            break;
        }
        if let Some((name, value)) = line.split_once(':') {
            if name.trim().eq_ignore_ascii_case("content-length") {
                content_length = value.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body)?;
    hits.fetch_add(1, Ordering::SeqCst);
    let resp = handler(&StubRequest {
        method,
        path,
        body: String::from_utf8_lossy(&body).into_owned(),
    });
    let mut stream = stream;
    write!(
        stream,
        "HTTP/1.1 {} {}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
        resp.status,
        reason(resp.status),
        resp.body.len(),
        resp.body
    )?;
    stream.flush()
}
