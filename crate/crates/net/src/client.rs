//! Subscriber and producer sides.

use std::io::{self, BufReader};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use log::debug;
use rand::{CryptoRng, RngCore};
use scbr_core::envelope::{PublicKey, Record, SymKey};
use scbr_core::model::{ClientId, PubId, PublicationHeader, SubId, Subscription};
use scbr_core::publisher::{publication, subscription_request};

use crate::wire::{parse_line, read_line, Connection, Line};
use crate::NetError;

/// Seal `s` for the publisher and wait for the broker's ACK, relayed by the
/// publisher, carrying the assigned subscription id.
pub fn client_subscribe<R: RngCore + CryptoRng>(
    rng: &mut R,
    publisher: &str,
    publisher_key: &PublicKey,
    client: ClientId,
    reply: &str,
    s: &Subscription,
    timeout: Duration,
) -> Result<SubId, NetError> {
    let req = subscription_request(rng, publisher_key, client, reply.to_string(), s)?;
    let mut conn = Connection::connect(publisher, timeout)?;
    match conn.request(&req)? {
        Record::Ack { reference, .. } => SubId::new(reference).map_err(|_| NetError::Unexpected("ACK")),
        // The publisher gave up reaching the broker.
        Record::Err { msg, .. } if msg == "unavailable" => Err(NetError::Timeout),
        Record::Err { msg, .. } => Err(NetError::Rejected(msg)),
        other => Err(NetError::Unexpected(other.type_tag())),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub id: PubId,
    pub payload: Vec<u8>,
}

/// Accepts the broker's delivery connections and calls the handler once per
/// DELIVER frame.
pub struct Listener {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    conns: Arc<Mutex<Vec<TcpStream>>>,
    acceptor: Option<JoinHandle<()>>,
}

impl Listener {
    pub fn bind<F>(addr: &str, handler: F) -> io::Result<Listener>
    where
        F: Fn(Delivery) + Send + Sync + 'static,
    {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let conns = Arc::new(Mutex::new(Vec::new()));
        let handler = Arc::new(handler);
        let acceptor = {
            let (stop, conns) = (stop.clone(), conns.clone());
            thread::Builder::new().name("scbr-listener".into()).spawn(move || {
                for stream in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = stream else { continue };
                    if let Ok(c) = stream.try_clone() {
                        conns.lock().unwrap().push(c);
                    }
                    let handler = handler.clone();
                    let _ = thread::Builder::new()
                        .name("scbr-listener-conn".into())
                        .spawn(move || read_deliveries(stream, &*handler));
                }
            })?
        };
        Ok(Listener {
            addr,
            stop,
            conns,
            acceptor: Some(acceptor),
        })
    }

    /// Bind and collect deliveries on a channel.
    pub fn channel(addr: &str) -> io::Result<(Listener, Receiver<Delivery>)> {
        let (tx, rx) = mpsc::channel();
        let tx = Mutex::new(tx);
        let l = Listener::bind(addr, move |d| {
            let _ = tx.lock().unwrap().send(d);
        })?;
        Ok((l, rx))
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// The address to put in subscription requests.
    pub fn reply_addr(&self) -> String {
        self.addr.to_string()
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        let Some(acceptor) = self.acceptor.take() else { return };
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_secs(1));
        let _ = acceptor.join();
        for s in self.conns.lock().unwrap().drain(..) {
            let _ = s.shutdown(Shutdown::Both);
        }
    }
}

impl Drop for Listener {
    fn drop(&mut self) {
        self.stop();
    }
}

fn read_deliveries(stream: TcpStream, handler: &dyn Fn(Delivery)) {
    let mut reader = BufReader::new(stream);
    let mut buf = Vec::new();
    loop {
        match read_line(&mut reader, &mut buf) {
            Ok(Line::Frame) => match parse_line(&buf) {
                Ok(Record::Deliver { id, payload }) => handler(Delivery { id, payload }),
                Ok(other) => debug!("ignoring {} frame", other.type_tag()),
                Err(e) => debug!("ignoring bad frame: {e}"),
            },
            Ok(Line::Oversize) => debug!("ignoring oversized frame"),
            Ok(Line::Eof) | Err(_) => return,
        }
    }
}

/// Producer holding the shared key and a persistent broker connection.
pub struct Producer {
    conn: Connection,
    sk: SymKey,
}

impl Producer {
    pub fn connect(broker: &str, sk: SymKey, timeout: Duration) -> Result<Self, NetError> {
        Ok(Producer {
            conn: Connection::connect(broker, timeout)?,
            sk,
        })
    }

    /// Seal the header and publish; returns once the broker has ACKed, by which
    /// point every DELIVER for this publication has been written.
    pub fn publish(&mut self, id: PubId, header: &PublicationHeader, payload: Vec<u8>) -> Result<(), NetError> {
        let rec = publication(&mut rand::thread_rng(), &self.sk, id, header, payload);
        match self.conn.request(&rec)? {
            Record::Ack { .. } => Ok(()),
            Record::Err { msg, .. } => Err(NetError::Rejected(msg)),
            other => Err(NetError::Unexpected(other.type_tag())),
        }
    }
}

/// One-shot publish over a fresh connection.
pub fn producer_publish(
    broker: &str,
    sk: &SymKey,
    id: PubId,
    header: &PublicationHeader,
    payload: Vec<u8>,
    timeout: Duration,
) -> Result<(), NetError> {
    Producer::connect(broker, sk.clone(), timeout)?.publish(id, header, payload)
}
