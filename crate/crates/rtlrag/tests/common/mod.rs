//! Shared test harness: a minimal in-process HTTP stub server, an
//! independent bag-of-tokens embedding oracle, and synthetic Verilog
//! dataset generators.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use rtlrag::{RepoFile, RepoSample};

#[derive(Debug, Clone)]
pub struct Captured {
    pub method: String,
    pub path: String,
    pub body: serde_json::Value,
}

pub struct Response {
    pub status: u16,
    pub body: serde_json::Value,
}

impl Response {
    pub fn ok(body: serde_json::Value) -> Response {
        Response { status: 200, body }
    }

    pub fn error(status: u16, message: &str) -> Response {
        Response {
            status,
            body: serde_json::json!({"error": message}),
        }
    }
}

type Handler = dyn Fn(&Captured) -> Response + Send + Sync;

/// One-shot-connection HTTP/1.1 server for exercising the real clients.
/// Every request is captured; the handler decides the reply.
pub struct StubServer {
    addr: SocketAddr,
    requests: Arc<Mutex<Vec<Captured>>>,
    stop: Arc<AtomicBool>,
    handle: Option<std::thread::JoinHandle<()>>,
}

impl StubServer {
    pub fn start<F>(handler: F) -> StubServer
    where
        F: Fn(&Captured) -> Response + Send + Sync + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind stub server");
        let addr = listener.local_addr().unwrap();
        let requests: Arc<Mutex<Vec<Captured>>> = Arc::default();
        let stop = Arc::new(AtomicBool::new(false));
        let handler: Arc<Handler> = Arc::new(handler);

        let handle = std::thread::spawn({
            let requests = Arc::clone(&requests);
            let stop = Arc::clone(&stop);
            move || {
                for conn in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = conn else { continue };
                    let requests = Arc::clone(&requests);
                    let handler = Arc::clone(&handler);
                    std::thread::spawn(move || {
                        let _ = serve_one(stream, &requests, handler.as_ref());
                    });
                }
            }
        });
        StubServer {
            addr,
            requests,
            stop,
            handle: Some(handle),
        }
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://{}{}", self.addr, path)
    }

    pub fn requests(&self) -> Vec<Captured> {
        self.requests.lock().unwrap().clone()
    }

    pub fn request_count(&self) -> usize {
        self.requests.lock().unwrap().len()
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

fn serve_one(
    stream: TcpStream,
    requests: &Mutex<Vec<Captured>>,
    handler: &Handler,
) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut request_line = String::new();
    reader.read_line(&mut request_line)?;
    let mut parts = request_line.split_whitespace();
    let method = parts.next().unwrap_or("").to_string();
    let path = parts.next().unwrap_or("").to_string();
    if method.is_empty() {
        return Ok(()); // wake-up connection during shutdown
    }

    let mut content_length = 0usize;
    loop {
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some(value) = line
            .to_ascii_lowercase()
            .strip_prefix("content-length:")
            .map(str::trim)
        {
            content_length = value.parse().unwrap_or(0);
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body)?;
    let body: serde_json::Value = serde_json::from_slice(&body).unwrap_or(serde_json::Value::Null);

    let captured = Captured { method, path, body };
    requests.lock().unwrap().push(captured.clone());
    let response = handler(&captured);

    let payload = response.body.to_string();
    let reason = match response.status {
        200 => "OK",
        400 => "Bad Request",
        429 => "Too Many Requests",
        500 => "Internal Server Error",
        _ => "Status",
    };
    let mut stream = stream;
    write!(
        stream,
        "HTTP/1.1 {} {}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
        response.status,
        reason,
        payload.len(),
        payload
    )?;
    stream.flush()?;
    Ok(())
}

/// Independent re-derivation of the hashing embedder: FNV-1a 64 buckets,
/// 1+ln(tf) weights over whitespace/punctuation tokens, L2-normalized.
/// Written from the published FNV constants, not the library code.
pub fn oracle_hash_embedding(text: &str, dim: usize) -> Vec<f64> {
    let mut counts: BTreeMap<u64, f64> = BTreeMap::new();
    let mut spans: Vec<(usize, usize)> = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        if c.is_alphanumeric() || c == '_' {
            if start.is_none() {
                start = Some(i);
            }
        } else {
            if let Some(s) = start.take() {
                spans.push((s, i));
            }
            if !c.is_whitespace() {
                spans.push((i, i + c.len_utf8()));
            }
        }
    }
    if let Some(s) = start {
        spans.push((s, text.len()));
    }
    let mut tf: BTreeMap<&str, usize> = BTreeMap::new();
    for (s, e) in spans {
        *tf.entry(&text[s..e]).or_insert(0) += 1;
    }
    for (token, count) in tf {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for byte in token.bytes() {
            hash ^= u64::from(byte);
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
        let bucket = hash % dim as u64;
        *counts.entry(bucket).or_insert(0.0) += 1.0 + (count as f64).ln();
    }
    let mut values = vec![0.0f64; dim];
    for (bucket, weight) in counts {
        values[bucket as usize] += weight;
    }
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in &mut values {
            *v /= norm;
        }
    }
    values
}

/// Handler that embeds whatever text it receives, like a real embedding
/// service with a context window: the client is responsible for truncation.
pub fn embedding_handler(dim: usize) -> impl Fn(&Captured) -> Response + Send + Sync {
    move |req: &Captured| {
        let Some(inputs) = req.body.get("input").and_then(|v| v.as_array()) else {
            return Response::error(400, "missing input array");
        };
        let data: Vec<serde_json::Value> = inputs
            .iter()
            .enumerate()
            .map(|(index, item)| {
                let text = item.as_str().unwrap_or("");
                serde_json::json!({
                    "index": index,
                    "embedding": oracle_hash_embedding(text, dim),
                })
            })
            .collect();
        Response::ok(serde_json::json!({ "data": data }))
    }
}

/// Handler that counts whitespace/punctuation tokens server-side.
pub fn tokenizer_handler() -> impl Fn(&Captured) -> Response + Send + Sync {
    |req: &Captured| {
        let Some(text) = req.body.get("input").and_then(|v| v.as_str()) else {
            return Response::error(400, "missing input string");
        };
        Response::ok(serde_json::json!({"count": rtlrag::tokenize::wspunct_tokens(text).len()}))
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn ident(rng: &mut ChaCha8Rng, prefix: &str) -> String {
    format!("{prefix}_{}_{}", rng.gen_range(0..1000), rng.gen_range(0..1000))
}

fn verilog_line(rng: &mut ChaCha8Rng, pool: &[String]) -> String {
    let pick = |rng: &mut ChaCha8Rng| pool[rng.gen_range(0..pool.len())].clone();
    match rng.gen_range(0..5) {
        0 => format!("wire {};", pick(rng)),
        1 => format!("assign {} = {} & {};", pick(rng), pick(rng), pick(rng)),
        2 => format!("assign {} = {} | {};", pick(rng), pick(rng), pick(rng)),
        3 => format!("reg [7:0] {};", pick(rng)),
        _ => format!("always @(posedge clk) {} <= {};", pick(rng), pick(rng)),
    }
}

/// One synthetic sample. `scale` multiplies how much repository context the
/// sample carries; 1 is a few dozen lines.
pub fn synth_sample(rng: &mut ChaCha8Rng, id: &str, scale: usize) -> RepoSample {
    let pool: Vec<String> = (0..8).map(|_| ident(rng, "sig")).collect();
    let file_count = rng.gen_range(1..=3);
    let context_files: Vec<RepoFile> = (0..file_count)
        .map(|f| {
            let lines = rng.gen_range(4..=10) * scale.max(1);
            let mut text = format!("module helper_{id}_{f} (clk);\n");
            for _ in 0..lines {
                text.push_str("  ");
                text.push_str(&verilog_line(rng, &pool));
                text.push('\n');
            }
            text.push_str("endmodule\n");
            RepoFile {
                path: format!("rtl/helper_{id}_{f}.v"),
                text,
            }
        })
        .collect();

    let mut current_prefix = format!("module top_{id} (clk);\n");
    for _ in 0..rng.gen_range(2..=6) {
        current_prefix.push_str("  ");
        current_prefix.push_str(&verilog_line(rng, &pool));
        current_prefix.push('\n');
    }
    let target = format!("  {}", verilog_line(rng, &pool));

    RepoSample {
        id: id.to_string(),
        repo: format!("repo_{id}"),
        context_files,
        current_path: format!("rtl/top_{id}.v"),
        current_prefix,
        target,
    }
}

pub fn synth_dataset(seed: u64, n: usize) -> Vec<RepoSample> {
    let mut rng = rng(seed);
    (0..n)
        .map(|i| {
            let scale = match i % 3 {
                0 => 1,
                1 => 2,
                _ => 4,
            };
            synth_sample(&mut rng, &format!("s{i}"), scale)
        })
        .collect()
}

/// A repo with one golden file that shares the query's distinctive
/// identifiers; the noise files share only generic Verilog vocabulary.
/// Returns the sample and the golden file's path.
pub fn golden_repo(rng: &mut ChaCha8Rng, idx: usize) -> (RepoSample, String) {
    let distinctive: Vec<String> = (0..6).map(|k| format!("golden_fifo_ptr_{idx}_{k}")).collect();
    let golden_path = "rtl/golden.v".to_string();

    let mut golden = String::from("module golden_sync (clk);\n");
    for k in 0..6 {
        golden.push_str(&format!(
            "  assign {} = {} ^ {};\n",
            distinctive[k % 6],
            distinctive[(k + 1) % 6],
            distinctive[(k + 2) % 6],
        ));
    }
    golden.push_str("endmodule\n");

    let mut context_files = Vec::new();
    for f in 0..4 {
        let mut text = format!("module noise_{idx}_{f} (clk);\n");
        for j in 0..rng.gen_range(8..=14) {
            text.push_str(&format!(
                "  assign noise_{idx}_{f}_{j} = noise_{idx}_{f}_{}_a & noise_{idx}_{f}_{}_b;\n",
                j, j
            ));
        }
        text.push_str("endmodule\n");
        context_files.push(RepoFile {
            path: format!("rtl/noise_{f}.v"),
            text,
        });
        if f == 1 {
            context_files.push(RepoFile {
                path: golden_path.clone(),
                text: golden.clone(),
            });
        }
    }

    let mut current_prefix = format!("module top_{idx} (clk);\n  wire ready;\n");
    for k in 0..4 {
        current_prefix.push_str(&format!(
            "  assign {} = {} ^ ready;\n",
            distinctive[k],
            distinctive[k + 1],
        ));
    }
    let sample = RepoSample {
        id: format!("g{idx}"),
        repo: format!("golden_repo_{idx}"),
        context_files,
        current_path: "rtl/top.v".to_string(),
        current_prefix,
        target: format!("  assign {} = 1'b0;", distinctive[5]),
    };
    (sample, golden_path)
}

/// Like [`golden_repo`], but every repo file opens with the same long
/// comment padding (6 tokens per line, `pad_lines` lines) so the golden
/// file's distinctive identifiers sit beyond the padding. An embedder
/// whose window ends inside the padding sees the golden file as pure
/// padding while the noise files at least share the query's generic
/// operators.
pub fn deep_golden_repo(rng: &mut ChaCha8Rng, idx: usize, pad_lines: usize) -> (RepoSample, String) {
    let pad: String = "// pad pad_word_a pad_word_b pad_word_c\n".repeat(pad_lines);
    let distinctive: Vec<String> = (0..6).map(|k| format!("deep_mark_{idx}_{k}")).collect();
    let golden_path = "rtl/zz_golden.v".to_string();

    let mut golden = pad.clone();
    for k in 0..8 {
        golden.push_str(&format!(
            "assign {} = {};\n",
            distinctive[k % 6],
            distinctive[(k + 1) % 6],
        ));
    }

    let mut context_files = Vec::new();
    for f in 0..4 {
        let mut text = pad.clone();
        for j in 0..8 {
            text.push_str(&format!(
                "assign noise_{idx}_{f}_{j} = noise_{idx}_{f}_{}_q;\n",
                rng.gen_range(0..100)
            ));
        }
        context_files.push(RepoFile {
            path: format!("rtl/noise_{f}.v"),
            text,
        });
    }
    context_files.push(RepoFile {
        path: golden_path.clone(),
        text: golden,
    });

    let mut current_prefix = String::from("module top (clk);\n");
    for k in 0..5 {
        current_prefix.push_str(&format!(
            "assign {} = {};\n",
            distinctive[k],
            distinctive[k + 1],
        ));
    }
    let sample = RepoSample {
        id: format!("d{idx}"),
        repo: format!("deep_repo_{idx}"),
        context_files,
        current_path: "rtl/top.v".to_string(),
        current_prefix,
        target: format!("assign {} = 1'b1;", distinctive[0]),
    };
    (sample, golden_path)
}

pub fn write_jsonl(samples: &[RepoSample], path: &std::path::Path) {
    rtlrag::corpus::write_dataset(samples, path).expect("write dataset");
}
