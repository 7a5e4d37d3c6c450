#![allow(dead_code)]

use std::io::{Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream};
use std::sync::mpsc::Receiver;
use std::sync::{Arc, Mutex, OnceLock};
use std::thread;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use scbr_core::model::{ClientId, PubId, PublicationHeader, SubId, Subscription};
use scbr_core::publisher::PublisherSecrets;
use scbr_net::*;

pub fn secrets() -> &'static PublisherSecrets {
    static S: OnceLock<PublisherSecrets> = OnceLock::new();
    S.get_or_init(|| PublisherSecrets::generate(&mut ChaCha20Rng::seed_from_u64(404)).unwrap())
}

pub fn cid(s: &str) -> ClientId {
    ClientId::new(s).unwrap()
}

pub fn pid(s: &str) -> PubId {
    PubId::new(s).unwrap()
}

pub fn sub(text: &str) -> Subscription {
    scbr_core::canonicalize(&Subscription::parse(text).unwrap()).unwrap()
}

pub fn header(text: &str) -> PublicationHeader {
    PublicationHeader::parse(text).unwrap()
}

pub const T: Duration = Duration::from_secs(5);

pub struct Stack {
    pub broker: BrokerHandle,
    pub publisher: PublisherHandle,
}

impl Stack {
    /// Broker and publisher on loopback; `broker_via` lets a relay sit in between.
    pub fn start(allow: &[&str]) -> Stack {
        Self::start_with(allow, |a| a.to_string())
    }

    pub fn start_with(allow: &[&str], broker_via: impl FnOnce(&str) -> String) -> Stack {
        let sec = secrets();
        let broker = run_broker(BrokerConfig::new("127.0.0.1:0", sec.provisioning_blob(1))).unwrap();
        let upstream = broker_via(&broker.local_addr().to_string());
        let policy = AdmissionPolicy::from_lists(allow.iter().map(|c| cid(c)), []);
        let publisher = run_publisher(PublisherConfig::new("127.0.0.1:0", upstream, sec.clone(), policy)).unwrap();
        Stack { broker, publisher }
    }

    pub fn broker_addr(&self) -> String {
        self.broker.local_addr().to_string()
    }

    pub fn publisher_addr(&self) -> String {
        self.publisher.local_addr().to_string()
    }

    pub fn subscribe(&self, client: &str, reply: &str, s: &Subscription) -> Result<SubId, NetError> {
        client_subscribe(
            &mut rand::thread_rng(),
            &self.publisher_addr(),
            &secrets().public(),
            cid(client),
            reply,
            s,
            T,
        )
    }

    pub fn producer(&self) -> Producer {
        Producer::connect(&self.broker_addr(), secrets().sk.clone(), T).unwrap()
    }
}

pub struct Client {
    pub id: String,
    pub listener: Listener,
    pub rx: Receiver<Delivery>,
}

impl Client {
    pub fn new(id: &str) -> Client {
        let (listener, rx) = Listener::channel("127.0.0.1:0").unwrap();
        Client {
            id: id.to_string(),
            listener,
            rx,
        }
    }

    pub fn reply(&self) -> String {
        self.listener.reply_addr()
    }

    /// Collect deliveries until the barrier publication `barrier` arrives.
    /// Deliveries to one reply address share a connection, so everything
    /// published before the barrier has arrived by then.
    pub fn drain_until(&self, barrier: &PubId) -> Vec<Delivery> {
        let mut got = Vec::new();
        loop {
            let d = self.rx.recv_timeout(Duration::from_secs(10)).expect("barrier never arrived");
            if &d.id == barrier {
                return got;
            }
            got.push(d);
        }
    }
}

/// Subscription every test client registers so barriers reach it.
pub fn barrier_sub() -> Subscription {
    sub("barrier>=0")
}

pub fn publish_barrier(p: &mut Producer, n: usize) -> PubId {
    let id = pid(&format!("barrier-{n}"));
    p.publish(id.clone(), &header(&format!("barrier={n}")), Vec::new()).unwrap();
    id
}

/// TCP relay that records every byte passing through, in both directions.
pub struct Relay {
    pub addr: String,
    pub captured: Arc<Mutex<Vec<u8>>>,
}

impl Relay {
    pub fn start(target: &str) -> Relay {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let captured = Arc::new(Mutex::new(Vec::new()));
        let (target, cap) = (target.to_string(), captured.clone());
        thread::spawn(move || {
            for inbound in listener.incoming() {
                let Ok(inbound) = inbound else { continue };
                let Ok(outbound) = TcpStream::connect(&target) else { continue };
                pump(inbound.try_clone().unwrap(), outbound.try_clone().unwrap(), cap.clone());
                pump(outbound, inbound, cap.clone());
            }
        });
        Relay { addr, captured }
    }

    pub fn bytes(&self) -> Vec<u8> {
        self.captured.lock().unwrap().clone()
    }
}

fn pump(mut from: TcpStream, mut to: TcpStream, cap: Arc<Mutex<Vec<u8>>>) {
    thread::spawn(move || {
        let mut buf = [0u8; 16384];
        loop {
            match from.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    cap.lock().unwrap().extend_from_slice(&buf[..n]);
                    if to.write_all(&buf[..n]).is_err() {
                        break;
                    }
                }
            }
        }
        let _ = to.shutdown(Shutdown::Write);
    });
}

pub fn contains(hay: &[u8], needle: &[u8]) -> bool {
    hay.windows(needle.len()).any(|w| w == needle)
}
