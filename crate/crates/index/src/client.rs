//! Blocking clients: TCP with reconnects and retries, or in-process.

use std::io;
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::de::DeserializeOwned;
use thiserror::Error;

use crate::server::ServiceState;
use crate::wire::{read_frame, write_frame, ErrorResponse, IndexStats, OkResponse, Request, SearchResponse};
use crate::{AnnIndex, Hit};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClientError {
    #[error("request timed out")]
    Timeout,
    #[error("connection failed: {0}")]
    Connect(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("server error: {0}")]
    Remote(String),
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: Box<ClientError> },
}

impl ClientError {
    /// Whether the same request may succeed if tried again later.
    pub fn is_retryable(&self) -> bool {
        matches!(self, ClientError::Timeout | ClientError::Connect(_) | ClientError::Exhausted { .. })
    }
}

/// Anything that can answer a top-k embedding search.
pub trait SearchBackend: Send + Sync {
    fn search(&self, embedding: &[f32], k: usize) -> Result<Vec<Hit>, ClientError>;
}

impl SearchBackend for AnnIndex {
    fn search(&self, embedding: &[f32], k: usize) -> Result<Vec<Hit>, ClientError> {
        AnnIndex::search(self, embedding, k).map_err(|e| ClientError::Remote(e.to_string()))
    }
}

/// Carries one request body to a server and returns the response body.
pub trait Transport: Send + Sync {
    fn call(&self, body: &[u8]) -> Result<Vec<u8>, ClientError>;
}

/// Typed requests over any [`Transport`].
pub struct Client<T> {
    transport: T,
}

pub type IndexClient = Client<TcpTransport>;
pub type InProcessClient = Client<InProcessTransport>;

impl IndexClient {
    pub fn connect(addr: impl Into<String>, options: ClientOptions) -> Self {
        Client { transport: TcpTransport::new(addr, options) }
    }
}

impl InProcessClient {
    pub fn in_process(state: Arc<ServiceState>) -> Self {
        Client { transport: InProcessTransport { state } }
    }
}

impl<T: Transport> Client<T> {
    fn request<R: DeserializeOwned>(&self, req: &Request) -> Result<R, ClientError> {
        let body = serde_json::to_vec(req).map_err(|e| ClientError::Protocol(e.to_string()))?;
        let reply = self.transport.call(&body)?;
        let value: serde_json::Value =
            serde_json::from_slice(&reply).map_err(|e| ClientError::Protocol(format!("bad response json: {e}")))?;
        if value.get("error").is_some() {
            let err: ErrorResponse =
                serde_json::from_value(value).map_err(|e| ClientError::Protocol(e.to_string()))?;
            return Err(ClientError::Remote(err.error));
        }
        serde_json::from_value(value).map_err(|e| ClientError::Protocol(format!("unexpected response: {e}")))
    }

    pub fn search_raw(&self, embedding: &[f32], k: usize) -> Result<SearchResponse, ClientError> {
        let resp: SearchResponse = self.request(&Request::Search { embedding: embedding.to_vec(), k })?;
        if resp.ids.len() != resp.scores.len() || resp.ids.len() > k {
            return Err(ClientError::Protocol(format!(
                "{} ids and {} scores for k={k}",
                resp.ids.len(),
                resp.scores.len()
            )));
        }
        Ok(resp)
    }

    pub fn add(&self, id: u64, embedding: &[f32]) -> Result<(), ClientError> {
        let _: OkResponse = self.request(&Request::Add { id, embedding: embedding.to_vec() })?;
        Ok(())
    }

    pub fn stats(&self, freeze: bool) -> Result<IndexStats, ClientError> {
        self.request(&Request::Stats { freeze })
    }

    pub fn ping(&self) -> Result<(), ClientError> {
        let resp: OkResponse = self.request(&Request::Ping)?;
        if resp.ok {
            Ok(())
        } else {
            Err(ClientError::Protocol("ping returned ok=false".into()))
        }
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }
}

impl<T: Transport> SearchBackend for Client<T> {
    fn search(&self, embedding: &[f32], k: usize) -> Result<Vec<Hit>, ClientError> {
        let resp = self.search_raw(embedding, k)?;
        Ok(resp.ids.into_iter().zip(resp.scores).map(|(id, score)| Hit { id, score }).collect())
    }
}

pub struct InProcessTransport {
    state: Arc<ServiceState>,
}

impl Transport for InProcessTransport {
    fn call(&self, body: &[u8]) -> Result<Vec<u8>, ClientError> {
        Ok(self.state.handle(body))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClientOptions {
    /// Applies to connecting and to each read and write.
    pub timeout: Duration,
    /// Extra attempts after the first one fails with a retryable error.
    pub retries: u32,
    pub backoff: Duration,
}

impl Default for ClientOptions {
    fn default() -> Self {
        Self { timeout: Duration::from_secs(5), retries: 3, backoff: Duration::from_millis(200) }
    }
}

/// One reused connection, re-established after failures.
pub struct TcpTransport {
    addr: String,
    options: ClientOptions,
    conn: Mutex<Option<TcpStream>>,
}

impl TcpTransport {
    pub fn new(addr: impl Into<String>, options: ClientOptions) -> Self {
        Self { addr: addr.into(), options, conn: Mutex::new(None) }
    }

    fn open(&self) -> Result<TcpStream, ClientError> {
        if self.options.timeout.is_zero() {
            return Err(ClientError::Protocol("timeout must be positive".into()));
        }
        let addrs: Vec<_> = self
            .addr
            .to_socket_addrs()
            .map_err(|e| ClientError::Connect(format!("resolve {}: {e}", self.addr)))?
            .collect();
        let mut last = ClientError::Connect(format!("{} resolved to no addresses", self.addr));
        for a in addrs {
            match TcpStream::connect_timeout(&a, self.options.timeout) {
                Ok(s) => {
                    let t = Some(self.options.timeout);
                    s.set_read_timeout(t).and_then(|_| s.set_write_timeout(t)).and_then(|_| s.set_nodelay(true))
                        .map_err(|e| ClientError::Connect(e.to_string()))?;
                    return Ok(s);
                }
                Err(e) if is_timeout(&e) => last = ClientError::Timeout,
                Err(e) => last = ClientError::Connect(format!("{a}: {e}")),
            }
        }
        Err(last)
    }

    fn attempt(&self, conn: &mut Option<TcpStream>, body: &[u8]) -> Result<Vec<u8>, ClientError> {
        if conn.is_none() {
            *conn = Some(self.open()?);
        }
        let stream = conn.as_mut().expect("connection present");
        let io_err = |e: io::Error| {
            if is_timeout(&e) {
                ClientError::Timeout
            } else if e.kind() == io::ErrorKind::InvalidData {
                ClientError::Protocol(e.to_string())
            } else {
                ClientError::Connect(e.to_string())
            }
        };
        write_frame(stream, body).map_err(io_err)?;
        match read_frame(stream).map_err(io_err)? {
            Some(reply) => Ok(reply),
            None => Err(ClientError::Connect("server closed the connection".into())),
        }
    }
}

impl Transport for TcpTransport {
    fn call(&self, body: &[u8]) -> Result<Vec<u8>, ClientError> {
        let mut conn = self.conn.lock().unwrap_or_else(|p| p.into_inner());
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(&mut conn, body) {
                Ok(reply) => return Ok(reply),
                Err(e) => {
                    // Whatever state the stream is in, it is no longer usable.
                    *conn = None;
                    if !e.is_retryable() {
                        return Err(e);
                    }
                    if attempts > self.options.retries {
                        return Err(ClientError::Exhausted { attempts, last: Box::new(e) });
                    }
                    std::thread::sleep(self.options.backoff);
                }
            }
        }
    }
}

fn is_timeout(e: &io::Error) -> bool {
    matches!(e.kind(), io::ErrorKind::TimedOut | io::ErrorKind::WouldBlock)
}
