//! Line-delimited JSON protocol for out-of-process scorers and embedders.
//!
//! Each request and response is one JSON object on one line, tagged with
//! the protocol version `v`:
//!
//! ```text
//! score:  {"v":1,"query":"...","text":"..."}  ->  {"v":1,"score":0.73}
//! embed:  {"v":1,"text":"..."}                ->  {"v":1,"vector":[0.1,...]}
//! error:                                          {"v":1,"error":"..."}
//! ```
//!
//! The peer is either a TCP endpoint or a child process speaking the
//! protocol on stdin/stdout.

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::process::{Child, Command, Stdio};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::corpus::{EmbedError, Embedder};
use crate::retrieval::{RerankScorer, ScorerError};

pub const PROTOCOL_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "transport", rename_all = "kebab-case")]
pub enum Endpoint {
    Tcp { addr: String },
    Subprocess { command: String, #[serde(default)] args: Vec<String> },
}

struct Conn {
    reader: Box<dyn BufRead + Send>,
    writer: Box<dyn Write + Send>,
    child: Option<Child>,
}

impl Drop for Conn {
    fn drop(&mut self) {
        if let Some(c) = &mut self.child {
            let _ = c.kill();
            let _ = c.wait();
        }
    }
}

/// A connection that serializes calls; one request in flight at a time.
pub struct WireClient {
    endpoint: Endpoint,
    conn: Mutex<Conn>,
}

impl WireClient {
    pub fn connect(endpoint: &Endpoint) -> std::io::Result<Self> {
        let conn = match endpoint {
            Endpoint::Tcp { addr } => {
                let s = TcpStream::connect(addr)?;
                Conn { reader: Box::new(BufReader::new(s.try_clone()?)), writer: Box::new(s), child: None }
            }
            Endpoint::Subprocess { command, args } => {
                let mut child = Command::new(command).args(args).stdin(Stdio::piped()).stdout(Stdio::piped()).spawn()?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                Conn { reader: Box::new(BufReader::new(stdout)), writer: Box::new(stdin), child: Some(child) }
            }
        };
        Ok(WireClient { endpoint: endpoint.clone(), conn: Mutex::new(conn) })
    }

    pub fn call(&self, request: &Value) -> Result<Value, String> {
        let mut conn = self.conn.lock().map_err(|_| "connection poisoned".to_string())?;
        let mut line = serde_json::to_string(request).map_err(|e| e.to_string())?;
        line.push('\n');
        conn.writer.write_all(line.as_bytes()).and_then(|_| conn.writer.flush()).map_err(|e| e.to_string())?;
        let mut reply = String::new();
        let n = conn.reader.read_line(&mut reply).map_err(|e| e.to_string())?;
        if n == 0 {
            return Err(format!("{:?}: peer closed the connection", self.endpoint));
        }
        let v: Value = serde_json::from_str(&reply).map_err(|e| format!("bad reply: {e}"))?;
        if v.get("v").and_then(Value::as_u64) != Some(PROTOCOL_VERSION) {
            return Err(format!("protocol version mismatch in reply {}", reply.trim()));
        }
        if let Some(err) = v.get("error").and_then(Value::as_str) {
            return Err(err.to_string());
        }
        Ok(v)
    }
}

pub struct WireScorer {
    id: String,
    client: WireClient,
}

impl WireScorer {
    pub fn new(id: &str, client: WireClient) -> Self {
        WireScorer { id: id.to_string(), client }
    }
}

impl RerankScorer for WireScorer {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn score(&self, query: &str, text: &str) -> Result<f64, ScorerError> {
        let v = self.client.call(&json!({"v": PROTOCOL_VERSION, "query": query, "text": text})).map_err(ScorerError)?;
        v.get("score").and_then(Value::as_f64).ok_or_else(|| ScorerError("reply lacks a numeric score".into()))
    }
}

pub struct WireEmbedder {
    id: String,
    dim: usize,
    client: WireClient,
}

impl WireEmbedder {
    pub fn new(id: &str, dim: usize, client: WireClient) -> Self {
        WireEmbedder { id: id.to_string(), dim, client }
    }
}

impl Embedder for WireEmbedder {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, EmbedError> {
        let err = |message: String| EmbedError { embedder: self.id.clone(), message };
        let v = self.client.call(&json!({"v": PROTOCOL_VERSION, "text": text})).map_err(err)?;
        let vector: Vec<f32> = serde_json::from_value(v.get("vector").cloned().unwrap_or(Value::Null))
            .map_err(|e| err(format!("reply lacks a vector: {e}")))?;
        if vector.len() != self.dim {
            return Err(err(format!("expected {} dimensions, got {}", self.dim, vector.len())));
        }
        Ok(vector)
    }
}

/// Answers one request object with the given scorer and embedder.
pub fn handle_request(req: &Value, scorer: Option<&dyn RerankScorer>, embedder: Option<&dyn Embedder>) -> Value {
    let fail = |m: &str| json!({"v": PROTOCOL_VERSION, "error": m});
    if req.get("v").and_then(Value::as_u64) != Some(PROTOCOL_VERSION) {
        return fail("unsupported protocol version");
    }
    let text = req.get("text").and_then(Value::as_str);
    match (req.get("query").and_then(Value::as_str), text) {
        (Some(q), Some(t)) => match scorer {
            Some(s) => match s.score(q, t) {
                Ok(score) => json!({"v": PROTOCOL_VERSION, "score": score}),
                Err(e) => fail(&e.0),
            },
            None => fail("this peer does not score"),
        },
        (None, Some(t)) => match embedder {
            Some(e) => match e.embed(t) {
                Ok(vector) => json!({"v": PROTOCOL_VERSION, "vector": vector}),
                Err(e) => fail(&e.message),
            },
            None => fail("this peer does not embed"),
        },
        _ => fail("request needs `text`, and `query` for scoring"),
    }
}

/// Serves requests line by line until the reader is exhausted.
pub fn serve_lines(
    reader: impl BufRead,
    mut writer: impl Write,
    scorer: Option<&dyn RerankScorer>,
    embedder: Option<&dyn Embedder>,
) -> std::io::Result<()> {
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = match serde_json::from_str::<Value>(&line) {
            Ok(req) => handle_request(&req, scorer, embedder),
            Err(e) => json!({"v": PROTOCOL_VERSION, "error": format!("malformed request: {e}")}),
        };
        writeln!(writer, "{reply}")?;
        writer.flush()?;
    }
    Ok(())
}

/// Accepts connections one after another and serves each to completion.
/// Returns after `max_connections` connections when given.
pub fn serve_tcp(
    listener: TcpListener,
    scorer: Option<&dyn RerankScorer>,
    embedder: Option<&dyn Embedder>,
    max_connections: Option<usize>,
) -> std::io::Result<()> {
    let mut served = 0;
    for stream in listener.incoming() {
        let stream = stream?;
        serve_lines(BufReader::new(stream.try_clone()?), stream, scorer, embedder)?;
        served += 1;
        if max_connections.is_some_and(|m| served >= m) {
            break;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::HashEmbedder;
    use crate::retrieval::LexicalOverlapScorer;

    #[test]
    fn tcp_round_trip_matches_local_scorer() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let server = std::thread::spawn(move || {
            let e = HashEmbedder::new(8);
            serve_tcp(listener, Some(&LexicalOverlapScorer), Some(&e), Some(1)).unwrap();
        });
        {
            let ep = Endpoint::Tcp { addr };
            let client = WireClient::connect(&ep).unwrap();
            let s = WireScorer::new("remote", client);
            let (q, t) = ("plazo de apelación", "apelación fuera de plazo");
            assert_eq!(s.score(q, t).unwrap(), LexicalOverlapScorer.score(q, t).unwrap());
            let bad = s.client.call(&json!({"v": 7, "text": "x"})).unwrap_err();
            assert!(bad.contains("version"), "{bad}");
            let e = WireEmbedder::new("remote", 8, s.client);
            assert_eq!(e.embed("tutela").unwrap(), HashEmbedder::new(8).embed("tutela").unwrap());
        }
        server.join().unwrap();
    }

    #[test]
    fn serve_lines_reports_malformed_input() {
        let input = b"not json\n{\"v\":1,\"query\":\"a\",\"text\":\"a\"}\n";
        let mut out = Vec::new();
        serve_lines(&input[..], &mut out, Some(&LexicalOverlapScorer), None).unwrap();
        let lines: Vec<Value> = String::from_utf8(out).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert!(lines[0]["error"].as_str().unwrap().contains("malformed"));
        assert_eq!(lines[1]["score"], 0.0);
    }
}
