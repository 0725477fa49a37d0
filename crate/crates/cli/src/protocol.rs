//! Newline-delimited JSON scorer protocol: server loop and pooled client.
//!
//! Requests carry an `op` of `hello`, `embed_image` or `embed_texts`; any
//! failure is answered with `{"op":"error","message":...}` and the connection
//! stays usable. Images travel as base64 row-major HWC `f32le`.

use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::process::{Child, Command, Stdio};
use std::sync::Mutex;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use chainshift_core::{normalize_embedding, Embedding, ImageBuffer, Modality, Scorer};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub const PROTOCOL_VERSION: u32 = 1;
/// Reconnect attempts after a transport failure.
pub const RETRIES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Request {
    Hello,
    EmbedImage { h: usize, w: usize, c: usize, dtype: String, data: String },
    EmbedTexts { texts: Vec<String> },
}

impl Request {
    pub fn embed_image(img: &ImageBuffer) -> Self {
        let (h, w, c) = img.shape();
        let bytes: Vec<u8> = img.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
        Request::EmbedImage { h, w, c, dtype: "f32le".into(), data: STANDARD.encode(bytes) }
    }
}

fn decode_image(h: usize, w: usize, c: usize, dtype: &str, data: &str) -> Result<ImageBuffer, String> {
    if dtype != "f32le" {
        return Err(format!("unsupported dtype {dtype:?}"));
    }
    let bytes = STANDARD.decode(data).map_err(|e| format!("bad base64: {e}"))?;
    if bytes.len() != h * w * c * 4 {
        return Err(format!("payload has {} bytes, expected {}", bytes.len(), h * w * c * 4));
    }
    let values = bytes.chunks_exact(4).map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))).collect();
    ImageBuffer::new(h, w, c, values).map_err(|e| e.to_string())
}

fn respond(scorer: &dyn Scorer, line: &str) -> Value {
    let request: Request = match serde_json::from_str(line) {
        Ok(r) => r,
        Err(e) => return json!({"op": "error", "message": format!("malformed request: {e}")}),
    };
    let result = match request {
        Request::Hello => Ok(json!({"name": scorer.name(), "dim": scorer.dim(), "version": PROTOCOL_VERSION})),
        Request::EmbedImage { h, w, c, dtype, data } => decode_image(h, w, c, &dtype, &data)
            .and_then(|img| scorer.embed_image(&img).map_err(|e| e.to_string()))
            .map(|z| json!({"embedding": z.as_slice()})),
        Request::EmbedTexts { texts } => scorer
            .embed_texts(&texts)
            .map(|zs| json!({"embeddings": zs.iter().map(Embedding::as_slice).collect::<Vec<_>>()}))
            .map_err(|e| e.to_string()),
    };
    result.unwrap_or_else(|message| json!({"op": "error", "message": message}))
}

/// Answers requests line by line until EOF.
pub fn serve<R: BufRead, W: Write>(scorer: &dyn Scorer, reader: R, mut writer: W) -> io::Result<()> {
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        serde_json::to_writer(&mut writer, &respond(scorer, &line))?;
        writer.write_all(b"\n")?;
        writer.flush()?;
    }
    Ok(())
}

/// Accepts connections forever, one thread per connection.
pub fn serve_tcp(scorer: &dyn Scorer, listener: TcpListener) -> io::Result<()> {
    std::thread::scope(|scope| {
        for stream in listener.incoming() {
            let stream = stream?;
            scope.spawn(move || {
                let reader = BufReader::new(stream.try_clone()?);
                serve(scorer, reader, stream)
            });
        }
        Ok(())
    })
}

/// Where an external scorer lives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    Tcp(String),
    /// A child process speaking the protocol on stdin/stdout.
    Command(Vec<String>),
}

struct Connection {
    reader: BufReader<Box<dyn Read + Send>>,
    writer: Box<dyn Write + Send>,
    child: Option<Child>,
}

impl Drop for Connection {
    fn drop(&mut self) {
        if let Some(child) = self.child.as_mut() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

impl Connection {
    fn open(endpoint: &Endpoint) -> io::Result<Self> {
        match endpoint {
            Endpoint::Tcp(addr) => {
                let addr = addr
                    .to_socket_addrs()?
                    .next()
                    .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, format!("cannot resolve {addr}")))?;
                let stream = TcpStream::connect(addr)?;
                stream.set_nodelay(true)?;
                Ok(Self { reader: BufReader::new(Box::new(stream.try_clone()?)), writer: Box::new(stream), child: None })
            }
            Endpoint::Command(argv) => {
                let (program, args) =
                    argv.split_first().ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "empty command"))?;
                let mut child =
                    Command::new(program).args(args).stdin(Stdio::piped()).stdout(Stdio::piped()).spawn()?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                Ok(Self { reader: BufReader::new(Box::new(stdout)), writer: Box::new(stdin), child: Some(child) })
            }
        }
    }

    fn roundtrip(&mut self, line: &str) -> io::Result<Value> {
        self.writer.write_all(line.as_bytes())?;
        self.writer.write_all(b"\n")?;
        self.writer.flush()?;
        let mut reply = String::new();
        if self.reader.read_line(&mut reply)? == 0 {
            return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "scorer closed the connection"));
        }
        serde_json::from_str(&reply).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }
}

/// Scorer reached over the wire protocol, with a connection pool and
/// reconnect-and-retry on transport failures.
pub struct ExternalScorer {
    endpoint: Endpoint,
    name: String,
    dim: usize,
    pool: Mutex<Vec<Connection>>,
}

impl ExternalScorer {
    pub fn connect(endpoint: Endpoint) -> chainshift_core::Result<Self> {
        let mut scorer = Self { endpoint, name: String::new(), dim: 0, pool: Mutex::new(Vec::new()) };
        let hello = scorer.request(&Request::Hello)?;
        let bad = || chainshift_core::Error::Scorer(format!("malformed hello reply {hello}"));
        scorer.name = hello["name"].as_str().ok_or_else(bad)?.to_string();
        scorer.dim = hello["dim"].as_u64().ok_or_else(bad)? as usize;
        if hello["version"].as_u64() != Some(u64::from(PROTOCOL_VERSION)) {
            return Err(chainshift_core::Error::Scorer(format!("unsupported protocol version in {hello}")));
        }
        Ok(scorer)
    }

    fn request(&self, req: &Request) -> chainshift_core::Result<Value> {
        let line = serde_json::to_string(req).expect("requests serialize");
        let mut last = String::new();
        for _ in 0..=RETRIES {
            let pooled = self.pool.lock().expect("pool lock").pop();
            let mut conn = match pooled.map_or_else(|| Connection::open(&self.endpoint), Ok) {
                Ok(c) => c,
                Err(e) => {
                    last = e.to_string();
                    continue;
                }
            };
            match conn.roundtrip(&line) {
                Ok(reply) => {
                    self.pool.lock().expect("pool lock").push(conn);
                    if reply["op"] == "error" {
                        let msg = reply["message"].as_str().unwrap_or("unspecified error");
                        return Err(chainshift_core::Error::Scorer(format!("{}: {msg}", self.name)));
                    }
                    return Ok(reply);
                }
                Err(e) => last = e.to_string(),
            }
        }
        Err(chainshift_core::Error::Scorer(format!("{:?} unreachable after {RETRIES} retries: {last}", self.endpoint)))
    }

    fn embedding(&self, v: &Value) -> chainshift_core::Result<Embedding> {
        let values: Vec<f64> = v
            .as_array()
            .and_then(|a| a.iter().map(Value::as_f64).collect())
            .ok_or_else(|| chainshift_core::Error::Scorer(format!("{}: embedding is not a number array", self.name)))?;
        if values.len() != self.dim {
            return Err(chainshift_core::Error::Scorer(format!(
                "{} declared dim {} but returned {}",
                self.name,
                self.dim,
                values.len()
            )));
        }
        normalize_embedding(values)
    }
}

impl Scorer for ExternalScorer {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_image(&self, img: &ImageBuffer) -> chainshift_core::Result<Embedding> {
        let reply = self.request(&Request::embed_image(img))?;
        self.embedding(&reply["embedding"])
    }

    fn embed_texts(&self, texts: &[String]) -> chainshift_core::Result<Vec<Embedding>> {
        let reply = self.request(&Request::EmbedTexts { texts: texts.to_vec() })?;
        let list = reply["embeddings"]
            .as_array()
            .ok_or_else(|| chainshift_core::Error::Scorer(format!("{}: missing embeddings", self.name)))?;
        if list.len() != texts.len() {
            return Err(chainshift_core::Error::Scorer(format!(
                "{}: {} embeddings for {} texts",
                self.name,
                list.len(),
                texts.len()
            )));
        }
        list.iter().map(|v| self.embedding(v)).collect()
    }

    fn default_prompts(&self, _modality: Modality) -> Option<[Vec<String>; 2]> {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chainshift_core::scoring::synthetic_scorer;

    #[test]
    fn malformed_lines_get_error_replies() {
        let s = synthetic_scorer(1, 16).unwrap();
        let input = "{\"op\":\"hello\"}\nnot json\n{\"op\":\"embed_texts\",\"texts\":[\"nope\"]}\n{\"op\":\"hello\"}\n";
        let mut out = Vec::new();
        serve(&s, input.as_bytes(), &mut out).unwrap();
        let replies: Vec<Value> = out.split(|&b| b == b'\n').filter(|l| !l.is_empty()).map(|l| serde_json::from_slice(l).unwrap()).collect();
        assert_eq!(replies.len(), 4);
        assert_eq!(replies[0]["dim"], 16);
        assert_eq!(replies[1]["op"], "error");
        assert_eq!(replies[2]["op"], "error");
        assert_eq!(replies[3], replies[0]);
    }

    #[test]
    fn image_payload_roundtrips() {
        let img = ImageBuffer::filled(8, 9, 3, 0.25).unwrap();
        let Request::EmbedImage { h, w, c, dtype, data } = Request::embed_image(&img) else { unreachable!() };
        assert_eq!(decode_image(h, w, c, &dtype, &data).unwrap(), img);
        assert!(decode_image(h, w, c, "u8", &data).is_err());
        assert!(decode_image(h + 1, w, c, &dtype, &data).is_err());
    }

    #[test]
    fn unreachable_endpoint_fails_after_retries() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        drop(listener);
        match ExternalScorer::connect(Endpoint::Tcp(addr)) {
            Err(chainshift_core::Error::Scorer(msg)) => assert!(msg.contains("retries"), "{msg}"),
            other => panic!("expected scorer failure, got {:?}", other.err()),
        }
    }
}
