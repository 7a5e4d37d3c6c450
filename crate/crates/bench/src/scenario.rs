//! Scripted runs of the full protocol over loopback TCP: subscribe, admit,
//! register, publish, deliver, invalidate. Each run is compared against a
//! plaintext oracle.

use std::io::{Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream};
use std::sync::mpsc::Receiver;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::distributions::Alphanumeric;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use scbr_core::envelope::{encode_frame, Record};
use scbr_core::model::{AttributeValue, Constraint, SubId};
use scbr_core::publisher::PublisherSecrets;
use scbr_core::router::ProvisionError;
use scbr_core::workload::{gen_entries, gen_publications, WorkloadSpec, WORKLOAD_NAMES};
use scbr_core::{canonicalize, matches, ClientId, PubId, PublicationHeader, Subscription};
use scbr_net::{
    client_subscribe, run_broker, run_publisher, AdmissionPolicy, BrokerConfig, BrokerHandle, Connection, Delivery,
    Listener, NetError, Producer, PublisherConfig, PublisherHandle, DEFAULT_TIMEOUT,
};

const DRAIN_TIMEOUT: Duration = Duration::from_secs(10);

/// TCP relay recording every byte in both directions.
pub struct Relay {
    pub addr: String,
    captured: Arc<Mutex<Vec<u8>>>,
}

impl Relay {
    pub fn start(target: &str) -> std::io::Result<Relay> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?.to_string();
        let captured = Arc::new(Mutex::new(Vec::new()));
        let (target, cap) = (target.to_string(), captured.clone());
        thread::spawn(move || {
            for inbound in listener.incoming() {
                let Ok(inbound) = inbound else { continue };
                let Ok(outbound) = TcpStream::connect(&target) else { continue };
                let (Ok(i2), Ok(o2)) = (inbound.try_clone(), outbound.try_clone()) else { continue };
                pump(inbound, o2, cap.clone());
                pump(outbound, i2, cap.clone());
            }
        });
        Ok(Relay { addr, captured })
    }

    pub fn bytes(&self) -> Vec<u8> {
        self.captured.lock().unwrap().clone()
    }
}

fn pump(mut from: TcpStream, mut to: TcpStream, cap: Arc<Mutex<Vec<u8>>>) {
    thread::spawn(move || {
        let mut buf = [0u8; 16384];
        while let Ok(n) = from.read(&mut buf) {
            if n == 0 {
                break;
            }
            cap.lock().unwrap().extend_from_slice(&buf[..n]);
            if to.write_all(&buf[..n]).is_err() {
                break;
            }
        }
        let _ = to.shutdown(Shutdown::Write);
    });
}

struct Stack {
    _broker: BrokerHandle,
    publisher: PublisherHandle,
    /// Where producers and the publisher reach the broker (maybe a relay).
    broker_addr: String,
}

fn start_stack(
    secrets: &PublisherSecrets,
    allow: &[ClientId],
    relay: Option<&mut Option<Relay>>,
) -> Result<Stack, NetError> {
    let broker = run_broker(BrokerConfig::new("127.0.0.1:0", secrets.provisioning_blob(1))).map_err(NetError::Io)?;
    let mut broker_addr = broker.local_addr().to_string();
    if let Some(slot) = relay {
        let r = Relay::start(&broker_addr).map_err(NetError::Io)?;
        broker_addr = r.addr.clone();
        *slot = Some(r);
    }
    let policy = AdmissionPolicy::from_lists(allow.iter().cloned(), []);
    let publisher = run_publisher(PublisherConfig::new("127.0.0.1:0", broker_addr.clone(), secrets.clone(), policy))
        .map_err(NetError::Io)?;
    Ok(Stack {
        _broker: broker,
        publisher,
        broker_addr,
    })
}

struct Client {
    id: ClientId,
    _listener: Listener,
    rx: Receiver<Delivery>,
    /// Address handed to the publisher; a relay in capture runs.
    reply: String,
}

impl Client {
    fn new(id: ClientId) -> Result<Client, NetError> {
        let (listener, rx) = Listener::channel("127.0.0.1:0").map_err(NetError::Io)?;
        let reply = listener.reply_addr();
        Ok(Client { id, _listener: listener, rx, reply })
    }

    /// Deliveries up to the barrier publication `barrier`, which every client
    /// subscribes to. One delivery connection per reply address keeps order.
    fn drain_until(&self, barrier: &PubId) -> Result<Vec<Delivery>, String> {
        let mut got = Vec::new();
        loop {
            match self.rx.recv_timeout(DRAIN_TIMEOUT) {
                Ok(d) if &d.id == barrier => return Ok(got),
                Ok(d) => got.push(d),
                Err(_) => return Err(format!("{}: barrier {barrier} never arrived", self.id)),
            }
        }
    }
}

fn parse_sub(text: &str) -> Subscription {
    canonicalize(&Subscription::parse(text).expect("static subscription")).expect("satisfiable")
}

fn barrier_header(n: usize) -> PublicationHeader {
    PublicationHeader::parse(&format!("barrier={n}")).expect("static header")
}

#[derive(Debug, Clone, Default)]
pub struct ScriptReport {
    pub seed: u64,
    pub workload: String,
    pub clients: usize,
    pub subscriptions: usize,
    pub invalidated: usize,
    pub publications: usize,
    pub deliveries: usize,
    pub deviations: Vec<String>,
}

/// One randomized script; deviations from the oracle are collected, not raised.
pub fn run_script(seed: u64, secrets: &PublisherSecrets) -> Result<ScriptReport, NetError> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let name = WORKLOAD_NAMES[rng.gen_range(0..WORKLOAD_NAMES.len())];
    let spec = WorkloadSpec::named(name, seed).expect("known workload");
    let mut report = ScriptReport {
        seed,
        workload: name.to_string(),
        ..Default::default()
    };

    let ids: Vec<ClientId> = (0..rng.gen_range(2..=4))
        .map(|k| ClientId::new(format!("c{k}")).expect("valid id"))
        .collect();
    let clients = ids.iter().cloned().map(Client::new).collect::<Result<Vec<_>, _>>()?;
    let stack = start_stack(secrets, &ids, None)?;
    let publisher_addr = stack.publisher.local_addr().to_string();
    let pk = secrets.public();
    report.clients = clients.len();

    let per_phase = 8;
    let mut pubs = gen_publications(&spec, 2 * per_phase);
    for p in &mut pubs {
        let len = rng.gen_range(0..512);
        p.payload = (0..len).map(|_| rng.gen()).collect();
    }
    let pool = gen_entries(&spec, 40);

    // (sub id, client index, subscription); barrier subscriptions are kept apart.
    let mut active: Vec<(SubId, usize, Subscription)> = Vec::new();
    for (k, c) in clients.iter().enumerate() {
        client_subscribe(&mut rng, &publisher_addr, &pk, c.id.clone(), &c.reply, &parse_sub("barrier>=0"), DEFAULT_TIMEOUT)?;
        let mut mine: Vec<Subscription> = (0..rng.gen_range(1..=3))
            .map(|_| pool[rng.gen_range(0..pool.len())].sub.clone())
            .collect();
        // One subscription aimed at an upcoming publication, so scripts deliver.
        let target = &pubs[rng.gen_range(0..pubs.len())].header;
        if let Some((attr, AttributeValue::Text(t))) =
            target.attrs().iter().find(|(_, v)| matches!(v, AttributeValue::Text(_)))
        {
            let c = Constraint::eq_text(attr.clone(), t.clone()).expect("attribute from a valid header");
            mine.push(Subscription::new(vec![c]));
        }
        for s in mine {
            let id = client_subscribe(&mut rng, &publisher_addr, &pk, c.id.clone(), &c.reply, &s, DEFAULT_TIMEOUT)?;
            active.push((id, k, s));
        }
    }
    report.subscriptions = active.len();

    let outsider = ClientId::new("outsider").expect("valid id");
    match client_subscribe(&mut rng, &publisher_addr, &pk, outsider, "127.0.0.1:9", &pool[0].sub, DEFAULT_TIMEOUT) {
        Err(NetError::Rejected(m)) if m == "denied" => {}
        other => report.deviations.push(format!("outsider admission: {other:?}")),
    }

    let mut producer = Producer::connect(&stack.broker_addr, secrets.sk.clone(), DEFAULT_TIMEOUT)?;
    for phase in 0..2 {
        if phase == 1 {
            let mut keep = Vec::new();
            for (i, entry) in active.drain(..).enumerate() {
                // At least one invalidation per script.
                if i == 0 || rng.gen_bool(0.4) {
                    stack.publisher.invalidate(&entry.0)?;
                    report.invalidated += 1;
                } else {
                    keep.push(entry);
                }
            }
            active = keep;
        }
        let batch = &pubs[phase * per_phase..(phase + 1) * per_phase];
        for p in batch {
            producer.publish(p.id.clone(), &p.header, p.payload.clone())?;
        }
        report.publications += batch.len();
        let barrier = PubId::new(format!("barrier-{phase}")).expect("valid id");
        producer.publish(barrier.clone(), &barrier_header(phase), Vec::new())?;
        for (k, c) in clients.iter().enumerate() {
            let want: Vec<(PubId, Vec<u8>)> = batch
                .iter()
                .filter(|p| active.iter().any(|(_, owner, s)| *owner == k && matches(&p.header, s)))
                .map(|p| (p.id.clone(), p.payload.clone()))
                .collect();
            let got: Vec<(PubId, Vec<u8>)> = match c.drain_until(&barrier) {
                Ok(v) => v.into_iter().map(|d| (d.id, d.payload)).collect(),
                Err(e) => {
                    report.deviations.push(e);
                    continue;
                }
            };
            report.deliveries += got.len();
            if got != want {
                let ids = |v: &[(PubId, Vec<u8>)]| v.iter().map(|(i, _)| i.to_string()).collect::<Vec<_>>();
                report.deviations.push(format!(
                    "seed {seed} phase {phase} client {}: got {:?} want {:?}",
                    c.id,
                    ids(&got),
                    ids(&want)
                ));
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Default)]
pub struct CaptureReport {
    pub markers: usize,
    pub bytes_captured: usize,
    pub deliveries: usize,
    /// Markers found in the capture, raw or Base64-encoded.
    pub leaked: Vec<String>,
}

/// Base64 forms a marker takes inside a longer encoded buffer, one per
/// alignment of its first byte.
fn base64_forms(marker: &[u8]) -> Vec<Vec<u8>> {
    (0..3).map(|k| B64.encode(&marker[k..k + 27]).into_bytes()).collect()
}

fn contains(hay: &[u8], needle: &[u8]) -> bool {
    hay.windows(needle.len()).any(|w| w == needle)
}

/// Run subscriptions and publications carrying random 32-byte markers through
/// relays in front of the broker and every reply address, then search the
/// capture for them.
pub fn capture_check(seed: u64, secrets: &PublisherSecrets) -> Result<CaptureReport, NetError> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut marker = || -> String { (&mut rng).sample_iter(&Alphanumeric).take(32).map(char::from).collect() };
    let markers: Vec<String> = (0..8).map(|_| marker()).collect();
    let ids: Vec<ClientId> = (0..3).map(|k| ClientId::new(format!("m{k}")).expect("valid id")).collect();
    let mut broker_relay = None;
    let stack = start_stack(secrets, &ids, Some(&mut broker_relay))?;
    let broker_relay = broker_relay.expect("relay started");
    let mut clients = Vec::new();
    let mut reply_relays = Vec::new();
    for id in &ids {
        let mut c = Client::new(id.clone())?;
        let r = Relay::start(&c.reply).map_err(NetError::Io)?;
        c.reply = r.addr.clone();
        reply_relays.push(r);
        clients.push(c);
    }
    let publisher_addr = stack.publisher.local_addr().to_string();
    let pk = secrets.public();
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 1);
    for (k, c) in clients.iter().enumerate() {
        let s = parse_sub(&format!(r#"tag="{}"&price<100"#, markers[k]));
        client_subscribe(&mut rng, &publisher_addr, &pk, c.id.clone(), &c.reply, &s, DEFAULT_TIMEOUT)?;
        let s = parse_sub(&format!(r#"memo="{}""#, markers[3 + k]));
        client_subscribe(&mut rng, &publisher_addr, &pk, c.id.clone(), &c.reply, &s, DEFAULT_TIMEOUT)?;
    }
    let mut producer = Producer::connect(&stack.broker_addr, secrets.sk.clone(), DEFAULT_TIMEOUT)?;
    for (i, k) in [0usize, 1, 2, 0].into_iter().enumerate() {
        let h = PublicationHeader::parse(&format!(
            r#"tag="{}"&price={}&memo="{}"&extra="{}""#,
            markers[k],
            10 + i,
            markers[3 + (i % 3)],
            markers[6 + (i % 2)]
        ))
        .expect("marker header");
        producer.publish(PubId::new(format!("m{i}")).expect("valid id"), &h, b"opaque".to_vec())?;
    }
    let mut report = CaptureReport {
        markers: markers.len(),
        ..Default::default()
    };
    for c in &clients {
        while c.rx.recv_timeout(Duration::from_millis(500)).is_ok() {
            report.deliveries += 1;
        }
    }
    let mut traffic = broker_relay.bytes();
    for r in &reply_relays {
        traffic.extend(r.bytes());
    }
    report.bytes_captured = traffic.len();
    for m in &markers {
        let raw = contains(&traffic, m.as_bytes());
        if raw || base64_forms(m.as_bytes()).iter().any(|f| contains(&traffic, f)) {
            report.leaked.push(m.clone());
        }
    }
    Ok(report)
}

/// Send `trials` copies of one valid SUBREG to a broker, each with a single
/// random bit flipped, then the intact record. Returns how many tampered
/// records were refused with `sig`, and whether the intact one was accepted.
pub fn tamper_check(seed: u64, trials: usize, secrets: &PublisherSecrets) -> Result<(usize, bool), NetError> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let broker = run_broker(BrokerConfig::new("127.0.0.1:0", secrets.provisioning_blob(1))).map_err(NetError::Io)?;
    let mut conn = Connection::connect(&broker.local_addr().to_string(), DEFAULT_TIMEOUT)?;
    let s = parse_sub(r#"symbol="HAL"&price<50"#);
    let sub = SubId::new("sub-1").expect("valid id");
    let client = ClientId::new("client-1").expect("valid id");
    let reg = secrets.registration(&mut rng, sub, client, "127.0.0.1:7000".into(), &s);
    let Record::SubReg { sub, client, reply, ct, sig } = &reg else { unreachable!() };
    let mut refused = 0;
    let mut done = 0;
    while done < trials {
        let (mut sb, mut cb, mut rb, mut ctb, mut sgb) = (
            sub.as_str().as_bytes().to_vec(),
            client.as_str().as_bytes().to_vec(),
            reply.as_bytes().to_vec(),
            ct.clone(),
            sig.clone(),
        );
        let fields: [&mut Vec<u8>; 5] = [&mut sb, &mut cb, &mut rb, &mut ctb, &mut sgb];
        let total: usize = fields.iter().map(|f| f.len()).sum();
        let mut at = rng.gen_range(0..total * 8);
        for f in fields {
            if at < f.len() * 8 {
                f[at / 8] ^= 1 << (at % 8);
                break;
            }
            at -= f.len() * 8;
        }
        // Flips that make an id unrepresentable cannot be framed; draw again.
        let (Ok(sb), Ok(cb), Ok(rb)) = (String::from_utf8(sb), String::from_utf8(cb), String::from_utf8(rb)) else {
            continue;
        };
        let (Ok(s2), Ok(c2)) = (SubId::new(sb), ClientId::new(cb)) else { continue };
        let tampered = Record::SubReg {
            sub: s2,
            client: c2,
            reply: rb,
            ct: ctb,
            sig: sgb,
        };
        debug_assert_ne!(encode_frame(&tampered), encode_frame(&reg));
        done += 1;
        if matches!(conn.request(&tampered)?, Record::Err { msg, .. } if msg == "sig") {
            refused += 1;
        }
    }
    let accepted = matches!(conn.request(&reg)?, Record::Ack { .. });
    Ok((refused, accepted))
}

/// Re-provision a running broker at `current` with every version up to and
/// including it. Returns (rejected, attempted, newer version accepted).
pub fn stale_provisioning_check(current: u64, secrets: &PublisherSecrets) -> Result<(usize, usize, bool), NetError> {
    let broker = run_broker(BrokerConfig::new("127.0.0.1:0", secrets.provisioning_blob(current))).map_err(NetError::Io)?;
    let mut rejected = 0;
    for v in 0..=current {
        if matches!(broker.provision(secrets.provisioning_blob(v)), Err(ProvisionError::ReplayRejected { .. })) {
            rejected += 1;
        }
    }
    let newer = broker.provision(secrets.provisioning_blob(current + 1)).is_ok();
    let replay = matches!(broker.provision(secrets.provisioning_blob(current + 1)), Err(ProvisionError::ReplayRejected { .. }));
    Ok((rejected + replay as usize, current as usize + 2, newer))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn base64_forms_find_a_marker_at_any_offset() {
        let marker = b"Qm9vdHN0cmFwIG1hcmtlciAxMjM0NTY3";
        for pad in 0..6 {
            let mut plain = vec![b'#'; pad];
            plain.extend_from_slice(marker);
            plain.extend_from_slice(b"&tail=1");
            let encoded = B64.encode(&plain).into_bytes();
            assert!(base64_forms(marker).iter().any(|f| contains(&encoded, f)), "pad {pad}");
        }
        assert!(!base64_forms(marker).iter().any(|f| contains(b"unrelated", f)));
    }
}
