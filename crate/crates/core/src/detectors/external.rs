use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::oracle::Detector;
use crate::tensor::ImageTensor;

use super::wire::{Hello, Request, Response, PROTOCOL_VERSION};

struct Connection {
    writer: Option<BufWriter<Box<dyn Write + Send>>>,
    lines: Receiver<std::io::Result<String>>,
    child: Option<Child>,
}

impl Connection {
    fn open(reader: Box<dyn Read + Send>, writer: Box<dyn Write + Send>, child: Option<Child>) -> Self {
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            let mut reader = BufReader::new(reader);
            loop {
                let mut line = String::new();
                match reader.read_line(&mut line) {
                    Ok(0) => break,
                    Ok(_) => {
                        if tx.send(Ok(line)).is_err() {
                            break;
                        }
                    }
                    Err(e) => {
                        let _ = tx.send(Err(e));
                        break;
                    }
                }
            }
        });
        Connection {
            writer: Some(BufWriter::with_capacity(1 << 16, writer)),
            lines: rx,
            child,
        }
    }

    fn send_line(&mut self, line: &str) -> Result<()> {
        let w = self
            .writer
            .as_mut()
            .ok_or_else(|| Error::oracle("external", "connection closed"))?;
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if let Some(w) = self.writer.as_mut() {
            w.flush()?;
        }
        Ok(())
    }

    fn recv(&self, deadline: Instant) -> Result<String> {
        let now = Instant::now();
        let wait = deadline.saturating_duration_since(now);
        match self.lines.recv_timeout(wait) {
            Ok(Ok(line)) => Ok(line),
            Ok(Err(e)) => Err(Error::oracle("external", format!("read failed: {e}"))),
            Err(RecvTimeoutError::Timeout) => Err(Error::oracle("external", "timed out")),
            Err(RecvTimeoutError::Disconnected) => {
                Err(Error::oracle("external", "detector closed its output"))
            }
        }
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        // Closing stdin ends the remote session; then reap the child.
        self.writer.take();
        if let Some(mut child) = self.child.take() {
            let deadline = Instant::now() + Duration::from_secs(2);
            loop {
                match child.try_wait() {
                    Ok(Some(_)) => break,
                    Ok(None) if Instant::now() < deadline => {
                        std::thread::sleep(Duration::from_millis(5))
                    }
                    _ => {
                        let _ = child.kill();
                        let _ = child.wait();
                        break;
                    }
                }
            }
        }
    }
}

/// A detector hosted in another process, spoken to over the wire protocol.
///
/// Requests on one connection are serialized; a pool of connections lets
/// several threads score concurrently.
pub struct ExternalDetector {
    name: String,
    connections: Vec<Mutex<Connection>>,
    next_conn: AtomicUsize,
    next_id: AtomicU64,
    timeout: Duration,
}

impl ExternalDetector {
    pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);

    /// Spawn `pool` copies of `program args..` and complete the handshake.
    pub fn spawn(program: &str, args: &[String], pool: usize, timeout: Duration) -> Result<Self> {
        let mut conns = Vec::new();
        for _ in 0..pool.max(1) {
            let mut child = Command::new(program)
                .args(args)
                .stdin(Stdio::piped())
                .stdout(Stdio::piped())
                .stderr(Stdio::inherit())
                .spawn()
                .map_err(|e| {
                    Error::oracle("external", format!("cannot start `{program}`: {e}"))
                })?;
            let stdin = child.stdin.take().expect("piped stdin");
            let stdout = child.stdout.take().expect("piped stdout");
            conns.push(Connection::open(Box::new(stdout), Box::new(stdin), Some(child)));
        }
        Self::handshake(conns, timeout)
    }

    /// Talk to a detector over an arbitrary byte stream pair.
    pub fn from_streams(
        reader: Box<dyn Read + Send>,
        writer: Box<dyn Write + Send>,
        timeout: Duration,
    ) -> Result<Self> {
        Self::handshake(vec![Connection::open(reader, writer, None)], timeout)
    }

    fn handshake(mut conns: Vec<Connection>, timeout: Duration) -> Result<Self> {
        let mut name = String::from("external");
        for conn in conns.iter_mut() {
            let hello = serde_json::to_string(&Hello {
                hello: PROTOCOL_VERSION,
                name: None,
            })?;
            conn.send_line(&hello)?;
            conn.flush()?;
            let line = conn.recv(Instant::now() + timeout)?;
            let value: serde_json::Value = serde_json::from_str(line.trim()).map_err(|e| {
                Error::oracle("external handshake", format!("malformed reply: {e}"))
            })?;
            let version = value.get("hello").and_then(|v| v.as_u64());
            if version != Some(PROTOCOL_VERSION as u64) || value.get("error").is_some() {
                return Err(Error::oracle(
                    "external handshake",
                    format!("protocol version mismatch: {}", line.trim()),
                ));
            }
            if let Some(n) = value.get("name").and_then(|v| v.as_str()) {
                name = format!("external:{n}");
            }
        }
        Ok(Self {
            name,
            connections: conns.into_iter().map(Mutex::new).collect(),
            next_conn: AtomicUsize::new(0),
            next_id: AtomicU64::new(0),
            timeout,
        })
    }

    fn exchange(&self, conn: &mut Connection, batch: &[ImageTensor]) -> Result<Vec<f64>> {
        let first = self.next_id.fetch_add(batch.len() as u64, Ordering::Relaxed);
        for (i, img) in batch.iter().enumerate() {
            let line = serde_json::to_string(&Request::encode(first + i as u64, img))?;
            conn.send_line(&line)?;
        }
        conn.flush()?;

        let deadline = Instant::now() + self.timeout;
        let mut answers: HashMap<u64, f64> = HashMap::with_capacity(batch.len());
        while answers.len() < batch.len() {
            let line = conn.recv(deadline).map_err(|e| match e {
                Error::Oracle { context, message, .. } => Error::Oracle {
                    context,
                    message,
                    request_id: Some(first + answers.len() as u64),
                },
                other => other,
            })?;
            let response: Response = serde_json::from_str(line.trim()).map_err(|e| Error::Oracle {
                context: "external".into(),
                message: format!("malformed response `{}`: {e}", line.trim()),
                request_id: None,
            })?;
            match response {
                Response::Score { id, p_real } => {
                    if id < first || id >= first + batch.len() as u64 {
                        return Err(Error::Oracle {
                            context: "external".into(),
                            message: "response id does not belong to this batch".into(),
                            request_id: Some(id),
                        });
                    }
                    if answers.insert(id, p_real).is_some() {
                        return Err(Error::Oracle {
                            context: "external".into(),
                            message: "duplicate response".into(),
                            request_id: Some(id),
                        });
                    }
                }
                Response::Error { id, error } => {
                    return Err(Error::Oracle {
                        context: "external".into(),
                        message: error,
                        request_id: id,
                    })
                }
            }
        }
        Ok((0..batch.len() as u64).map(|i| answers[&(first + i)]).collect())
    }
}

impl Detector for ExternalDetector {
    fn name(&self) -> &str {
        &self.name
    }

    fn score_batch(&self, batch: &[ImageTensor]) -> Result<Vec<f64>> {
        if batch.is_empty() {
            return Ok(Vec::new());
        }
        let n = self.connections.len();
        let start = self.next_conn.fetch_add(1, Ordering::Relaxed);
        for k in 0..n {
            if let Ok(mut conn) = self.connections[(start + k) % n].try_lock() {
                return self.exchange(&mut conn, batch);
            }
        }
        let mut conn = self.connections[start % n]
            .lock()
            .unwrap_or_else(|e| e.into_inner());
        self.exchange(&mut conn, batch)
    }
}
