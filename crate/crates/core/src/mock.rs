//! Scripted chat-completions server for tests.
//!
//! Speaks just enough HTTP/1.1 for a blocking client: one request per
//! connection, `Content-Length` bodies, `Connection: close` replies.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use serde_json::{json, Value};

#[derive(Debug, Clone)]
pub struct MockReply {
    pub status: u16,
    pub body: String,
    /// Held before replying, so overlapping requests are observable.
    pub delay: Duration,
}

impl MockReply {
    /// A successful completion carrying `text`.
    pub fn content(text: impl Into<String>) -> Self {
        let body = json!({
            "id": "mock",
            "object": "chat.completion",
            "choices": [{"index": 0, "message": {"role": "assistant", "content": text.into()}, "finish_reason": "stop"}],
        });
        MockReply { status: 200, body: body.to_string(), delay: Duration::ZERO }
    }

    pub fn status(status: u16, body: impl Into<String>) -> Self {
        MockReply { status, body: body.into(), delay: Duration::ZERO }
    }

    pub fn delayed(mut self, d: Duration) -> Self {
        self.delay = d;
        self
    }
}

type Responder = dyn Fn(&Value) -> MockReply + Send + Sync;

#[derive(Default)]
struct Stats {
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    requests: AtomicUsize,
}

pub struct MockServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    stats: Arc<Stats>,
    handle: Option<JoinHandle<()>>,
}

impl MockServer {
    pub fn start(responder: impl Fn(&Value) -> MockReply + Send + Sync + 'static) -> std::io::Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let stats = Arc::new(Stats::default());
        let responder: Arc<Responder> = Arc::new(responder);
        let (stop2, stats2) = (stop.clone(), stats.clone());
        let handle = std::thread::spawn(move || {
            for conn in listener.incoming() {
                if stop2.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = conn else { continue };
                let (r, s) = (responder.clone(), stats2.clone());
                std::thread::spawn(move || {
                    let _ = serve(stream, &*r, &s);
                });
            }
        });
        Ok(MockServer { addr, stop, stats, handle: Some(handle) })
    }

    /// Base URL to configure a client with (`http://127.0.0.1:PORT/v1`).
    pub fn base_url(&self) -> String {
        format!("http://{}/v1", self.addr)
    }

    pub fn max_in_flight(&self) -> usize {
        self.stats.max_in_flight.load(Ordering::SeqCst)
    }

    pub fn request_count(&self) -> usize {
        self.stats.requests.load(Ordering::SeqCst)
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn serve(stream: TcpStream, responder: &Responder, stats: &Stats) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut request_line = String::new();
    reader.read_line(&mut request_line)?;
    if request_line.is_empty() {
        return Ok(());
    }
    let mut content_length = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 || line == "\r\n" || line == "\n" {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            if k.trim().eq_ignore_ascii_case("content-length") {
                content_length = v.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body)?;

    let now = stats.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    stats.max_in_flight.fetch_max(now, Ordering::SeqCst);
    stats.requests.fetch_add(1, Ordering::SeqCst);

    let reply = match serde_json::from_slice::<Value>(&body) {
        Ok(v) => responder(&v),
        Err(e) => MockReply::status(400, format!("bad json: {e}")),
    };
    if !reply.delay.is_zero() {
        std::thread::sleep(reply.delay);
    }
    stats.in_flight.fetch_sub(1, Ordering::SeqCst);

    let mut out = stream;
    write!(
        out,
        "HTTP/1.1 {} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
        reply.status,
        reply.body.len(),
        reply.body
    )?;
    out.flush()
}

fn last_user_content(payload: &Value) -> Option<&Vec<Value>> {
    payload
        .get("messages")?
        .as_array()?
        .iter()
        .rev()
        .find(|m| m.get("role").and_then(Value::as_str) == Some("user"))?
        .get("content")?
        .as_array()
}

/// Text parts of the last user message, joined by newlines.
pub fn request_text(payload: &Value) -> String {
    last_user_content(payload)
        .map(|parts| parts.iter().filter_map(|p| p.get("text").and_then(Value::as_str)).collect::<Vec<_>>().join("\n"))
        .unwrap_or_default()
}

/// Image data URLs across all user messages, in order.
pub fn request_images(payload: &Value) -> Vec<String> {
    payload
        .get("messages")
        .and_then(Value::as_array)
        .map(|msgs| {
            msgs.iter().filter_map(|m| m.get("content").and_then(Value::as_array)).flatten().collect::<Vec<_>>()
        })
        .map(|parts| {
            parts
                .iter()
                .filter_map(|p| p.pointer("/image_url/url").and_then(Value::as_str).map(str::to_string))
                .collect()
        })
        .unwrap_or_default()
}

/// Decodes a `data:<mime>;base64,` URL back to bytes.
pub fn decode_data_url(url: &str) -> Option<Vec<u8>> {
    use base64::Engine;
    let (_, b64) = url.split_once(";base64,")?;
    base64::engine::general_purpose::STANDARD.decode(b64).ok()
}

/// Writes a flat gray PNG of the given size, for fixture datasets.
pub fn write_png(path: &std::path::Path, width: u32, height: u32) -> image::ImageResult<()> {
    image::RgbImage::from_pixel(width, height, image::Rgb([128, 128, 128])).save(path)
}
