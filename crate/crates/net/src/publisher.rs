//! Publisher endpoint: admits client subscription requests and forwards the
//! resulting registrations to the broker.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{info, warn};
use rand::{CryptoRng, Rng, RngCore};
use scbr_core::envelope::Record;
use scbr_core::model::{ClientId, SubId};
use scbr_core::publisher::PublisherSecrets;

use crate::wire::{frame_bytes, parse_line, read_line, Connection, Line};
use crate::{NetError, DEFAULT_TIMEOUT};

/// Static client admission: an allow-list and a revoked set, kept disjoint.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AdmissionPolicy {
    allowed: BTreeSet<ClientId>,
    revoked: BTreeSet<ClientId>,
}

impl AdmissionPolicy {
    pub fn new() -> Self {
        Self::default()
    }

    /// Revocation wins when a client appears in both lists.
    pub fn from_lists(
        allow: impl IntoIterator<Item = ClientId>,
        revoke: impl IntoIterator<Item = ClientId>,
    ) -> Self {
        let mut p = Self::new();
        for c in allow {
            p.allow(c);
        }
        for c in revoke {
            p.revoke(c);
        }
        p
    }

    pub fn allow(&mut self, c: ClientId) {
        self.revoked.remove(&c);
        self.allowed.insert(c);
    }

    pub fn revoke(&mut self, c: ClientId) {
        self.allowed.remove(&c);
        self.revoked.insert(c);
    }

    pub fn is_allowed(&self, c: &ClientId) -> bool {
        self.allowed.contains(c)
    }

    pub fn allowed(&self) -> impl Iterator<Item = &ClientId> {
        self.allowed.iter()
    }

    pub fn revoked(&self) -> impl Iterator<Item = &ClientId> {
        self.revoked.iter()
    }
}

/// Turn a SUBREQ into a signed SUBREG under `sub_id`, or an ERR.
pub fn publisher_admit<R: RngCore + CryptoRng>(
    rng: &mut R,
    secrets: &PublisherSecrets,
    policy: &AdmissionPolicy,
    req: &Record,
    sub_id: SubId,
) -> Record {
    let Record::SubReq { client, reply, ct } = req else {
        return Record::err("", "format");
    };
    let s = match secrets.open_request(ct) {
        Ok(s) => s,
        Err(_) => return Record::err(client.as_str(), "format"),
    };
    if !policy.is_allowed(client) {
        return Record::err(client.as_str(), "denied");
    }
    secrets.registration(rng, sub_id, client.clone(), reply.clone(), &s)
}

#[derive(Clone)]
pub struct PublisherConfig {
    pub listen: String,
    pub broker: String,
    pub secrets: PublisherSecrets,
    pub policy: AdmissionPolicy,
    /// How long to keep trying the broker before answering ERR("unavailable").
    pub timeout: Duration,
}

impl PublisherConfig {
    pub fn new(
        listen: impl Into<String>,
        broker: impl Into<String>,
        secrets: PublisherSecrets,
        policy: AdmissionPolicy,
    ) -> Self {
        PublisherConfig {
            listen: listen.into(),
            broker: broker.into(),
            secrets,
            policy,
            timeout: DEFAULT_TIMEOUT,
        }
    }
}

struct Shared {
    secrets: PublisherSecrets,
    policy: Mutex<AdmissionPolicy>,
    broker: String,
    timeout: Duration,
    upstream: Mutex<Option<Connection>>,
    subs: Mutex<BTreeMap<SubId, ClientId>>,
    id_prefix: String,
    next_id: AtomicU64,
    stop: AtomicBool,
    inbound: Mutex<Vec<TcpStream>>,
}

impl Shared {
    fn fresh_id(&self) -> SubId {
        let n = self.next_id.fetch_add(1, Ordering::Relaxed);
        SubId::new(format!("{}.{n}", self.id_prefix)).expect("generated ids are valid")
    }

    /// Send one record to the broker, reconnecting as needed until the timeout.
    fn forward(&self, rec: &Record) -> Result<Record, NetError> {
        let deadline = Instant::now() + self.timeout;
        let mut upstream = self.upstream.lock().unwrap();
        loop {
            if upstream.is_none() {
                match Connection::connect(&self.broker, self.timeout) {
                    Ok(c) => *upstream = Some(c),
                    Err(e) if Instant::now() >= deadline => return Err(e),
                    Err(_) => {
                        thread::sleep(Duration::from_millis(50));
                        continue;
                    }
                }
            }
            let conn = upstream.as_mut().expect("connected above");
            match conn.request(rec) {
                Ok(r) => return Ok(r),
                Err(NetError::Timeout) => {
                    *upstream = None;
                    return Err(NetError::Timeout);
                }
                // Most likely a stale pooled connection: reconnect and retry.
                Err(e) => {
                    *upstream = None;
                    if Instant::now() >= deadline {
                        return Err(e);
                    }
                }
            }
        }
    }

    fn admit(&self, req: &Record) -> Record {
        let sub_id = self.fresh_id();
        let reg = {
            let policy = self.policy.lock().unwrap();
            publisher_admit(&mut rand::thread_rng(), &self.secrets, &policy, req, sub_id.clone())
        };
        let Record::SubReg { client, .. } = &reg else { return reg };
        let client = client.clone();
        match self.forward(&reg) {
            Ok(ack @ Record::Ack { .. }) => {
                self.subs.lock().unwrap().insert(sub_id, client);
                ack
            }
            Ok(other) => other,
            Err(e) => {
                warn!("broker unreachable: {e}");
                Record::err(sub_id.as_str(), "unavailable")
            }
        }
    }

    fn invalidate(&self, sub: &SubId) -> Result<(), NetError> {
        let rec = self.secrets.invalidation(&mut rand::thread_rng(), sub.clone());
        match self.forward(&rec)? {
            Record::Ack { .. } => {
                self.subs.lock().unwrap().remove(sub);
                Ok(())
            }
            Record::Err { msg, .. } => Err(NetError::Rejected(msg)),
            other => Err(NetError::Unexpected(other.type_tag())),
        }
    }
}

pub struct PublisherHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    acceptor: Option<JoinHandle<()>>,
}

pub fn run_publisher(cfg: PublisherConfig) -> io::Result<PublisherHandle> {
    let listener = TcpListener::bind(&cfg.listen)?;
    let addr = listener.local_addr()?;
    let shared = Arc::new(Shared {
        secrets: cfg.secrets,
        policy: Mutex::new(cfg.policy),
        broker: cfg.broker,
        timeout: cfg.timeout,
        upstream: Mutex::new(None),
        subs: Mutex::new(BTreeMap::new()),
        id_prefix: format!("s{:08x}", rand::thread_rng().gen::<u32>()),
        next_id: AtomicU64::new(0),
        stop: AtomicBool::new(false),
        inbound: Mutex::new(Vec::new()),
    });
    let acceptor = {
        let shared = shared.clone();
        thread::Builder::new()
            .name("scbr-publisher-accept".into())
            .spawn(move || accept_loop(listener, shared))?
    };
    info!("publisher listening on {addr}");
    Ok(PublisherHandle {
        addr,
        shared,
        acceptor: Some(acceptor),
    })
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    for stream in listener.incoming() {
        if shared.stop.load(Ordering::SeqCst) {
            break;
        }
        let Ok(stream) = stream else { continue };
        if let Ok(c) = stream.try_clone() {
            shared.inbound.lock().unwrap().push(c);
        }
        let shared = shared.clone();
        let _ = thread::Builder::new()
            .name("scbr-publisher-conn".into())
            .spawn(move || serve(stream, &shared));
    }
}

fn serve(stream: TcpStream, shared: &Shared) {
    let Ok(read_half) = stream.try_clone() else { return };
    let mut reader = BufReader::new(read_half);
    let mut writer = stream;
    let mut buf = Vec::new();
    loop {
        let reply = match read_line(&mut reader, &mut buf) {
            Ok(Line::Eof) | Err(_) => break,
            Ok(Line::Oversize) => Record::err("", "format"),
            Ok(Line::Frame) => match parse_line(&buf) {
                Ok(req @ Record::SubReq { .. }) => shared.admit(&req),
                _ => Record::err("", "format"),
            },
        };
        if writer.write_all(&frame_bytes(&reply)).is_err() {
            break;
        }
    }
}

impl PublisherHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn allow(&self, c: ClientId) {
        self.shared.policy.lock().unwrap().allow(c);
    }

    /// Revoke `c` and invalidate all of its subscriptions. Returns how many
    /// were invalidated.
    pub fn revoke(&self, c: &ClientId) -> Result<usize, NetError> {
        self.shared.policy.lock().unwrap().revoke(c.clone());
        let owned: Vec<SubId> = self
            .shared
            .subs
            .lock()
            .unwrap()
            .iter()
            .filter(|(_, owner)| *owner == c)
            .map(|(s, _)| s.clone())
            .collect();
        for s in &owned {
            self.shared.invalidate(s)?;
        }
        Ok(owned.len())
    }

    pub fn invalidate(&self, sub: &SubId) -> Result<(), NetError> {
        self.shared.invalidate(sub)
    }

    /// Subscriptions admitted and still registered, with their owners.
    pub fn subscriptions(&self) -> Vec<(SubId, ClientId)> {
        let subs = self.shared.subs.lock().unwrap();
        subs.iter().map(|(s, c)| (s.clone(), c.clone())).collect()
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        let Some(acceptor) = self.acceptor.take() else { return };
        self.shared.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_secs(1));
        let _ = acceptor.join();
        for s in self.shared.inbound.lock().unwrap().drain(..) {
            let _ = s.shutdown(Shutdown::Both);
        }
    }
}

impl Drop for PublisherHandle {
    fn drop(&mut self) {
        self.stop();
    }
}
