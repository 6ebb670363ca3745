//! Async TCP search service.

use std::future::Future;
use std::io;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, RwLock};
use std::thread::JoinHandle;

use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{oneshot, Semaphore};

use crate::wire::{error_body, IndexStats, OkResponse, Request, SearchResponse, MAX_BODY};
use crate::AnnIndex;

pub const DEFAULT_PORT: u16 = 7077;
pub const ADDR_ENV: &str = "IRAG_INDEX_ADDR";
pub const PORT_ENV: &str = "IRAG_INDEX_PORT";

/// Bind address from the environment, falling back to `host:port`.
pub fn bind_address(host: &str, port: u16) -> String {
    let host = std::env::var(ADDR_ENV).unwrap_or_else(|_| host.to_string());
    let port = std::env::var(PORT_ENV).ok().and_then(|p| p.parse().ok()).unwrap_or(port);
    format!("{host}:{port}")
}

/// The index plus its freeze flag; answers one request body at a time.
#[derive(Debug)]
pub struct ServiceState {
    index: RwLock<AnnIndex>,
    frozen: AtomicBool,
}

impl ServiceState {
    pub fn new(index: AnnIndex) -> Self {
        Self { index: RwLock::new(index), frozen: AtomicBool::new(false) }
    }

    pub fn frozen(index: AnnIndex) -> Self {
        Self { index: RwLock::new(index), frozen: AtomicBool::new(true) }
    }

    pub fn handle(&self, body: &[u8]) -> Vec<u8> {
        let value: serde_json::Value = match serde_json::from_slice(body) {
            Ok(v) => v,
            Err(e) => return error_body(format!("malformed json: {e}")),
        };
        match value.get("op").and_then(|op| op.as_str()) {
            Some("search" | "add" | "stats" | "ping") => {}
            Some(op) => return error_body(format!("unknown op {op:?}")),
            None => return error_body("missing op"),
        }
        let request: Request = match serde_json::from_value(value) {
            Ok(r) => r,
            Err(e) => return error_body(format!("bad request: {e}")),
        };
        let reply = match request {
            Request::Ping => serde_json::to_vec(&OkResponse { ok: true }),
            Request::Search { embedding, k } => {
                let index = self.index.read().expect("index lock");
                match index.search(&embedding, k) {
                    Ok(hits) => serde_json::to_vec(&SearchResponse {
                        ids: hits.iter().map(|h| h.id).collect(),
                        scores: hits.iter().map(|h| h.score).collect(),
                    }),
                    Err(e) => return error_body(e.to_string()),
                }
            }
            Request::Add { id, embedding } => {
                if self.frozen.load(Ordering::Acquire) {
                    return error_body("index frozen");
                }
                let mut index = self.index.write().expect("index lock");
                match index.add(id, &embedding) {
                    Ok(()) => serde_json::to_vec(&OkResponse { ok: true }),
                    Err(e) => return error_body(e.to_string()),
                }
            }
            Request::Stats { freeze } => {
                if freeze {
                    self.frozen.store(true, Ordering::Release);
                }
                let index = self.index.read().expect("index lock");
                serde_json::to_vec(&IndexStats {
                    n: index.len(),
                    dim: index.dim(),
                    kind: index.kind().to_string(),
                    frozen: self.frozen.load(Ordering::Acquire),
                })
            }
        };
        reply.unwrap_or_else(|e| error_body(e.to_string()))
    }
}

pub struct IndexServer {
    listener: TcpListener,
    state: Arc<ServiceState>,
    max_connections: usize,
}

impl IndexServer {
    pub async fn bind(addr: &str, state: Arc<ServiceState>, max_connections: usize) -> io::Result<Self> {
        let listener = TcpListener::bind(addr).await?;
        Ok(Self { listener, state, max_connections: max_connections.max(1) })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Accept connections until `shutdown` resolves. At most `max_connections`
    /// are served at once; further clients wait in the accept backlog.
    pub async fn run_until<F: Future<Output = ()>>(self, shutdown: F) -> io::Result<()> {
        let permits = Arc::new(Semaphore::new(self.max_connections));
        tokio::pin!(shutdown);
        loop {
            let permit = tokio::select! {
                p = permits.clone().acquire_owned() => p.expect("semaphore never closed"),
                _ = &mut shutdown => break,
            };
            let stream = tokio::select! {
                r = self.listener.accept() => match r {
                    Ok((stream, _)) => stream,
                    Err(e) => {
                        eprintln!("index server: accept failed: {e}");
                        continue;
                    }
                },
                _ = &mut shutdown => break,
            };
            let state = self.state.clone();
            tokio::spawn(async move {
                let _permit = permit;
                if let Err(e) = serve_connection(stream, state).await {
                    if e.kind() != io::ErrorKind::UnexpectedEof {
                        eprintln!("index server: connection error: {e}");
                    }
                }
            });
        }
        Ok(())
    }
}

async fn serve_connection(mut stream: TcpStream, state: Arc<ServiceState>) -> io::Result<()> {
    stream.set_nodelay(true)?;
    loop {
        let len = match stream.read_u32().await {
            Ok(len) => len as usize,
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(()),
            Err(e) => return Err(e),
        };
        if len > MAX_BODY {
            let reply = error_body(format!("frame of {len} bytes exceeds 16 MiB"));
            write_reply(&mut stream, &reply).await?;
            return Ok(());
        }
        let mut body = vec![0u8; len];
        stream.read_exact(&mut body).await?;
        let reply = state.handle(&body);
        write_reply(&mut stream, &reply).await?;
    }
}

async fn write_reply(stream: &mut TcpStream, reply: &[u8]) -> io::Result<()> {
    let mut buf = Vec::with_capacity(4 + reply.len());
    buf.extend_from_slice(&(reply.len() as u32).to_be_bytes());
    buf.extend_from_slice(reply);
    stream.write_all(&buf).await
}

/// Serve until interrupted (Ctrl-C).
pub fn serve(addr: &str, state: Arc<ServiceState>, max_connections: usize) -> io::Result<()> {
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async {
        let server = IndexServer::bind(addr, state, max_connections).await?;
        eprintln!("index server listening on {}", server.local_addr()?);
        server
            .run_until(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
    })
}

/// A server on its own thread; shuts down when dropped.
pub struct BackgroundServer {
    addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<io::Result<()>>>,
}

impl BackgroundServer {
    pub fn start(addr: &str, state: Arc<ServiceState>, max_connections: usize) -> io::Result<Self> {
        let runtime = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build()?;
        let server = runtime.block_on(IndexServer::bind(addr, state, max_connections))?;
        let local = server.local_addr()?;
        let (tx, rx) = oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            runtime.block_on(server.run_until(async {
                let _ = rx.await;
            }))
        });
        Ok(Self { addr: local, stop: Some(tx), thread: Some(thread) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) -> io::Result<()> {
        self.stop_and_join()
    }

    fn stop_and_join(&mut self) -> io::Result<()> {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        match self.thread.take() {
            Some(t) => t.join().unwrap_or_else(|_| Err(io::Error::other("server thread panicked"))),
            None => Ok(()),
        }
    }
}

impl Drop for BackgroundServer {
    fn drop(&mut self) {
        let _ = self.stop_and_join();
    }
}
