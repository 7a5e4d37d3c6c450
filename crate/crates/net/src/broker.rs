//! Broker service. Connection threads parse frames and hand every router call
//! to one router thread over a channel, so mutations are serialized. Matches
//! become DELIVER frames written to each route's reply address.

use std::collections::HashMap;
use std::io::{self, BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use log::{debug, warn};
use scbr_core::envelope::Record;
use scbr_core::index::IndexStats;
use scbr_core::router::{CounterSnapshot, ProvisionError, ProvisioningBlob, Reject, Route, RouterHandle};

use crate::wire::{connect, frame_bytes, parse_line, read_line, Line};

#[derive(Clone)]
pub struct BrokerConfig {
    /// Address to bind; port 0 picks a free one.
    pub listen: String,
    pub blob: ProvisioningBlob,
    /// Connect and write timeout for deliveries.
    pub delivery_timeout: Duration,
}

impl BrokerConfig {
    pub fn new(listen: impl Into<String>, blob: ProvisioningBlob) -> Self {
        BrokerConfig {
            listen: listen.into(),
            blob,
            delivery_timeout: Duration::from_secs(1),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BrokerStats {
    /// Lines received, well-formed or not.
    pub frames: u64,
    /// ERR replies sent.
    pub errors: u64,
    pub delivered: u64,
    /// Deliveries that could not be written (at-most-once, never retried).
    pub dropped: u64,
}

enum Command {
    Register(Record, Sender<Record>),
    Invalidate(Record, Sender<Record>),
    Match(Record, Sender<Result<Vec<Route>, Reject>>),
    Provision(ProvisioningBlob, Sender<Result<[u8; 32], ProvisionError>>),
    Inspect(Sender<(IndexStats, CounterSnapshot, usize)>),
}

fn router_loop(mut router: RouterHandle, rx: mpsc::Receiver<Command>) {
    for cmd in rx {
        // A dropped reply channel only means the requesting connection went away.
        let _ = match cmd {
            Command::Register(r, tx) => tx.send(router.ecall_register(&r)).map_err(drop),
            Command::Invalidate(r, tx) => tx.send(router.ecall_invalidate(&r)).map_err(drop),
            Command::Match(r, tx) => tx.send(router.ecall_match(&r)).map_err(drop),
            Command::Provision(b, tx) => tx.send(router.provision(b)).map_err(drop),
            Command::Inspect(tx) => tx
                .send((router.stats(), router.counters(), router.audit_violations()))
                .map_err(drop),
        };
    }
}

#[derive(Default)]
struct Counters {
    frames: AtomicU64,
    errors: AtomicU64,
    delivered: AtomicU64,
    dropped: AtomicU64,
}

type Slot = Arc<Mutex<Option<TcpStream>>>;

struct Shared {
    counters: Counters,
    stop: AtomicBool,
    inbound: Mutex<Vec<TcpStream>>,
    outbound: Mutex<HashMap<String, Slot>>,
    delivery_timeout: Duration,
}

impl Shared {
    fn deliver(&self, addr: &str, line: &[u8]) {
        let slot = self.outbound.lock().unwrap().entry(addr.to_string()).or_default().clone();
        let mut conn = slot.lock().unwrap();
        if conn.is_none() {
            match connect(addr, self.delivery_timeout) {
                Ok(s) => *conn = Some(s),
                Err(e) => debug!("delivery connect to {addr} failed: {e}"),
            }
        }
        let ok = match conn.as_mut() {
            Some(s) => s.write_all(line).is_ok(),
            None => false,
        };
        if ok {
            self.counters.delivered.fetch_add(1, Ordering::Relaxed);
        } else {
            *conn = None;
            self.counters.dropped.fetch_add(1, Ordering::Relaxed);
        }
    }
}

pub struct BrokerHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    cmd: Sender<Command>,
    acceptor: Option<JoinHandle<()>>,
}

/// Provision a router from `cfg.blob` and start serving on `cfg.listen`.
pub fn run_broker(cfg: BrokerConfig) -> io::Result<BrokerHandle> {
    let mut router = RouterHandle::new();
    router
        .provision(cfg.blob)
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
    let listener = TcpListener::bind(&cfg.listen)?;
    let addr = listener.local_addr()?;
    let (cmd, rx) = mpsc::channel();
    thread::Builder::new()
        .name("scbr-router".into())
        .spawn(move || router_loop(router, rx))?;
    let shared = Arc::new(Shared {
        counters: Counters::default(),
        stop: AtomicBool::new(false),
        inbound: Mutex::new(Vec::new()),
        outbound: Mutex::new(HashMap::new()),
        delivery_timeout: cfg.delivery_timeout,
    });
    let acceptor = {
        let (shared, cmd) = (shared.clone(), cmd.clone());
        thread::Builder::new()
            .name("scbr-broker-accept".into())
            .spawn(move || accept_loop(listener, shared, cmd))?
    };
    Ok(BrokerHandle {
        addr,
        shared,
        cmd,
        acceptor: Some(acceptor),
    })
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>, cmd: Sender<Command>) {
    for stream in listener.incoming() {
        if shared.stop.load(Ordering::SeqCst) {
            break;
        }
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                warn!("accept failed: {e}");
                continue;
            }
        };
        let _ = stream.set_nodelay(true);
        if let Ok(c) = stream.try_clone() {
            shared.inbound.lock().unwrap().push(c);
        }
        let (shared, cmd) = (shared.clone(), cmd.clone());
        let spawned = thread::Builder::new()
            .name("scbr-broker-conn".into())
            .spawn(move || serve(stream, &shared, &cmd));
        if let Err(e) = spawned {
            warn!("cannot spawn connection thread: {e}");
        }
    }
}

fn serve(stream: TcpStream, shared: &Shared, cmd: &Sender<Command>) {
    let Ok(read_half) = stream.try_clone() else { return };
    let mut reader = BufReader::new(read_half);
    let mut writer = stream;
    let mut buf = Vec::new();
    loop {
        let reply = match read_line(&mut reader, &mut buf) {
            Ok(Line::Eof) | Err(_) => break,
            Ok(Line::Oversize) => Record::err("", "format"),
            Ok(Line::Frame) => handle(&buf, shared, cmd),
        };
        shared.counters.frames.fetch_add(1, Ordering::Relaxed);
        if matches!(reply, Record::Err { .. }) {
            shared.counters.errors.fetch_add(1, Ordering::Relaxed);
        }
        if writer.write_all(&frame_bytes(&reply)).is_err() {
            break;
        }
    }
}

fn call<T>(cmd: &Sender<Command>, make: impl FnOnce(Sender<T>) -> Command) -> Option<T> {
    let (tx, rx) = mpsc::channel();
    cmd.send(make(tx)).ok()?;
    rx.recv().ok()
}

fn handle(line: &[u8], shared: &Shared, cmd: &Sender<Command>) -> Record {
    let rec = match parse_line(line) {
        Ok(r) => r,
        Err(_) => return Record::err("", "format"),
    };
    let down = || Record::err("", "unavailable");
    match rec {
        Record::SubReg { .. } => call(cmd, |tx| Command::Register(rec, tx)).unwrap_or_else(down),
        Record::Unsub { .. } => call(cmd, |tx| Command::Invalidate(rec, tx)).unwrap_or_else(down),
        Record::Pub { id, hdr, payload } => {
            let line = frame_bytes(&Record::Deliver { id: id.clone(), payload });
            // The router only reads the header.
            let sealed = Record::Pub { id: id.clone(), hdr, payload: Vec::new() };
            match call(cmd, |tx| Command::Match(sealed, tx)) {
                Some(Ok(routes)) => {
                    for (_, reply) in &routes {
                        shared.deliver(reply, &line);
                    }
                    Record::ack(id.as_str(), "")
                }
                Some(Err(r)) => Record::err(id.as_str(), r.as_str()),
                None => down(),
            }
        }
        _ => Record::err("", "format"),
    }
}

impl BrokerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stats(&self) -> BrokerStats {
        let c = &self.shared.counters;
        BrokerStats {
            frames: c.frames.load(Ordering::Relaxed),
            errors: c.errors.load(Ordering::Relaxed),
            delivered: c.delivered.load(Ordering::Relaxed),
            dropped: c.dropped.load(Ordering::Relaxed),
        }
    }

    /// Index statistics, router counters and the number of Hasse-audit violations.
    pub fn inspect(&self) -> Option<(IndexStats, CounterSnapshot, usize)> {
        call(&self.cmd, Command::Inspect)
    }

    /// Re-provision the running router. Stale versions are rejected.
    pub fn provision(&self, blob: ProvisioningBlob) -> Result<[u8; 32], ProvisionError> {
        call(&self.cmd, |tx| Command::Provision(blob, tx))
            .unwrap_or_else(|| Err(ProvisionError::Malformed("router stopped".into())))
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        let Some(acceptor) = self.acceptor.take() else { return };
        self.shared.stop.store(true, Ordering::SeqCst);
        // Wake the blocking accept.
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_secs(1));
        let _ = acceptor.join();
        for s in self.shared.inbound.lock().unwrap().drain(..) {
            let _ = s.shutdown(Shutdown::Both);
        }
        for slot in self.shared.outbound.lock().unwrap().values() {
            if let Some(s) = slot.lock().unwrap().take() {
                let _ = s.shutdown(Shutdown::Both);
            }
        }
    }
}

impl Drop for BrokerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}
