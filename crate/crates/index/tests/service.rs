use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::Arc;
use std::time::{Duration, Instant};

use irag_index::server::{BackgroundServer, ServiceState};
use irag_index::wire::{read_frame, write_frame};
use irag_index::{AnnIndex, ClientError, ClientOptions, FlatIndex, InProcessClient, IndexClient, SearchBackend};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const DIM: usize = 8;

fn gaussian(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn index(n: usize) -> AnnIndex {
    let ids = (0..n as u64).map(|i| 100 + i).collect();
    AnnIndex::Flat(FlatIndex::from_rows(DIM, ids, gaussian(n * DIM, 1)).unwrap())
}

fn start(n: usize) -> (BackgroundServer, AnnIndex) {
    let idx = index(n);
    let server = BackgroundServer::start("127.0.0.1:0", Arc::new(ServiceState::new(idx.clone())), 32).unwrap();
    (server, idx)
}

fn client(server: &BackgroundServer) -> IndexClient {
    IndexClient::connect(server.addr().to_string(), ClientOptions::default())
}

fn raw_call(stream: &mut TcpStream, body: &[u8]) -> serde_json::Value {
    write_frame(stream, body).unwrap();
    serde_json::from_slice(&read_frame(stream).unwrap().unwrap()).unwrap()
}

#[test]
fn ping_and_stats() {
    let (server, _) = start(50);
    let c = client(&server);
    c.ping().unwrap();
    let stats = c.stats(false).unwrap();
    assert_eq!((stats.n, stats.dim, stats.kind.as_str(), stats.frozen), (50, DIM, "flat", false));
    let mut s = TcpStream::connect(server.addr()).unwrap();
    assert_eq!(raw_call(&mut s, br#"{"op":"ping"}"#), serde_json::json!({"ok": true}));
}

#[test]
fn present_vector_comes_back_first_and_large_k_returns_all() {
    let (server, idx) = start(40);
    let c = client(&server);
    let AnnIndex::Flat(flat) = &idx else { unreachable!() };
    let v = flat.vector(17).to_vec();
    let hits = SearchBackend::search(&c, &v, 3).unwrap();
    assert_eq!(hits[0].id, 117);
    assert_eq!(SearchBackend::search(&c, &v, 1000).unwrap().len(), 40);
}

#[test]
fn remote_errors_are_typed_and_connection_survives() {
    let (server, _) = start(10);
    let c = client(&server);
    let err = SearchBackend::search(&c, &[1.0; 3], 2).unwrap_err();
    match &err {
        ClientError::Remote(msg) => assert!(msg.contains("dim mismatch"), "{msg}"),
        other => panic!("expected remote error, got {other:?}"),
    }
    assert!(!err.is_retryable());

    let mut s = TcpStream::connect(server.addr()).unwrap();
    let r = raw_call(&mut s, br#"{"op":"explode"}"#);
    assert!(r["error"].as_str().unwrap().contains("unknown op"));
    let r = raw_call(&mut s, b"{not json");
    assert!(r["error"].as_str().unwrap().contains("malformed"));
    assert_eq!(raw_call(&mut s, br#"{"op":"ping"}"#), serde_json::json!({"ok": true}));
}

#[test]
fn two_messages_in_one_write_get_two_ordered_replies() {
    let (server, _) = start(10);
    let mut s = TcpStream::connect(server.addr()).unwrap();
    let mut buf = Vec::new();
    write_frame(&mut buf, br#"{"op":"stats"}"#).unwrap();
    write_frame(&mut buf, br#"{"op":"ping"}"#).unwrap();
    s.write_all(&buf).unwrap();
    let first: serde_json::Value = serde_json::from_slice(&read_frame(&mut s).unwrap().unwrap()).unwrap();
    let second: serde_json::Value = serde_json::from_slice(&read_frame(&mut s).unwrap().unwrap()).unwrap();
    assert_eq!(first["n"], 10);
    assert_eq!(second, serde_json::json!({"ok": true}));
}

#[test]
fn oversized_frame_gets_error_then_close() {
    let (server, _) = start(10);
    let mut s = TcpStream::connect(server.addr()).unwrap();
    s.write_all(&((16u32 << 20) + 1).to_be_bytes()).unwrap();
    let reply: serde_json::Value = serde_json::from_slice(&read_frame(&mut s).unwrap().unwrap()).unwrap();
    assert!(reply["error"].as_str().unwrap().contains("16 MiB"));
    let mut rest = Vec::new();
    s.read_to_end(&mut rest).unwrap();
    assert!(rest.is_empty());
}

#[test]
fn add_allowed_until_frozen() {
    let (server, _) = start(5);
    let c = client(&server);
    c.add(9999, &[0.5; DIM]).unwrap();
    assert_eq!(c.stats(false).unwrap().n, 6);
    assert!(matches!(c.add(9999, &[0.5; DIM]), Err(ClientError::Remote(m)) if m.contains("duplicate")));
    assert!(c.stats(true).unwrap().frozen);
    assert!(matches!(c.add(1, &[0.5; DIM]), Err(ClientError::Remote(m)) if m.contains("frozen")));
}

#[test]
fn concurrent_clients_match_local_search() {
    let (server, idx) = start(500);
    let addr = server.addr().to_string();
    let idx = Arc::new(idx);
    let threads: Vec<_> = (0..16)
        .map(|t| {
            let addr = addr.clone();
            let idx = idx.clone();
            std::thread::spawn(move || {
                let c = IndexClient::connect(addr, ClientOptions::default());
                let queries = gaussian(1000 * DIM, 100 + t);
                for (i, q) in queries.chunks_exact(DIM).enumerate() {
                    let k = 1 + i % 12;
                    assert_eq!(SearchBackend::search(&c, q, k).unwrap(), idx.search(q, k).unwrap());
                }
            })
        })
        .collect();
    for t in threads {
        t.join().unwrap();
    }
}

#[test]
fn server_down_exhausts_retries_with_backoff() {
    // Grab a free port, then close it so connections are refused.
    let addr = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
    let opts = ClientOptions { timeout: Duration::from_millis(200), retries: 3, backoff: Duration::from_millis(100) };
    let c = IndexClient::connect(addr.to_string(), opts);
    let start = Instant::now();
    let err = SearchBackend::search(&c, &[0.0; DIM], 1).unwrap_err();
    let elapsed = start.elapsed();
    match &err {
        ClientError::Exhausted { attempts, last } => {
            assert_eq!(*attempts, 4);
            assert!(matches!(**last, ClientError::Connect(_)));
        }
        other => panic!("expected exhausted retries, got {other:?}"),
    }
    assert!(err.is_retryable());
    assert!(elapsed >= Duration::from_millis(300) && elapsed < Duration::from_millis(1500), "{elapsed:?}");
}

#[test]
fn client_reconnects_after_server_restart() {
    let idx = index(20);
    let state = Arc::new(ServiceState::new(idx.clone()));
    let server = BackgroundServer::start("127.0.0.1:0", state.clone(), 4).unwrap();
    let addr = server.addr();
    let c = IndexClient::connect(addr.to_string(), ClientOptions::default());
    c.ping().unwrap();
    server.shutdown().unwrap();
    let server = BackgroundServer::start(&addr.to_string(), state, 4).unwrap();
    c.ping().unwrap();
    drop(server);
}

#[test]
fn in_process_transport_speaks_the_same_protocol() {
    let idx = index(30);
    let c = InProcessClient::in_process(Arc::new(ServiceState::new(idx.clone())));
    c.ping().unwrap();
    for q in gaussian(DIM * 20, 4).chunks_exact(DIM) {
        assert_eq!(SearchBackend::search(&c, q, 5).unwrap(), idx.search(q, 5).unwrap());
    }
    assert!(matches!(SearchBackend::search(&c, &[0.0], 1), Err(ClientError::Remote(_))));
}
