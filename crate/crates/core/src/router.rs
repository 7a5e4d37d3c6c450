//! Simulated trusted boundary around the containment index.
//!
//! Everything inside [`RouterHandle`] (symmetric key, verification key,
//! plaintext subscriptions and headers) stays inside: the entry points take
//! wire records and hand back only acknowledgements and routing metadata.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::envelope::{
    subreg_batch_signing_bytes, subreg_signing_bytes, sym_open_bytes, unsub_signing_bytes, verify, PublicKey, Record, SymKey,
};
use crate::index::{ContainmentIndex, IndexError, IndexStats};
use crate::model::{canonicalize, ClientId, ModelError, PublicationHeader, SubId, Subscription};

pub const CODE_VERSION: &str = concat!("scbr-router/", env!("CARGO_PKG_VERSION"));
/// Fixed bytes charged for the boundary itself (keys, counters, tables).
pub const BOUNDARY_OVERHEAD_BYTES: usize = 64 * 1024;
pub const DEFAULT_SOFT_BUDGET_BYTES: usize = 90_000_000;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProvisionError {
    #[error("provisioning version {offered} is not above current {current}")]
    ReplayRejected { offered: u64, current: u64 },
    #[error("bad provisioning blob: {0}")]
    Malformed(String),
}

/// Startup secrets: symmetric key, publisher verification key and a version
/// that must increase on every re-provisioning.
#[derive(Clone)]
pub struct ProvisioningBlob {
    pub sym_key: SymKey,
    pub verify_key: PublicKey,
    pub version: u64,
}

impl ProvisioningBlob {
    pub fn to_json(&self) -> Result<String, ProvisionError> {
        let pem = self
            .verify_key
            .to_pem()
            .map_err(|e| ProvisionError::Malformed(e.to_string()))?;
        Ok(json!({
            "sk": self.sym_key.to_base64(),
            "verify_key": pem,
            "version": self.version,
        })
        .to_string())
    }

    pub fn from_json(text: &str) -> Result<Self, ProvisionError> {
        let bad = |m: &str| ProvisionError::Malformed(m.to_string());
        let v: Value = serde_json::from_str(text).map_err(|e| bad(&e.to_string()))?;
        let sym_key = SymKey::from_base64(v["sk"].as_str().ok_or_else(|| bad("sk"))?)
            .map_err(|e| bad(&e.to_string()))?;
        let verify_key =
            PublicKey::from_pem(v["verify_key"].as_str().ok_or_else(|| bad("verify_key"))?)
                .map_err(|e| bad(&e.to_string()))?;
        let version = v["version"].as_u64().ok_or_else(|| bad("version"))?;
        Ok(ProvisioningBlob {
            sym_key,
            verify_key,
            version,
        })
    }
}

impl std::fmt::Debug for ProvisioningBlob {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProvisioningBlob")
            .field("version", &self.version)
            .finish_non_exhaustive()
    }
}

/// Attestation stand-in: SHA-256 over the code version string and the
/// big-endian blob version.
pub fn attestation_stub(version: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(CODE_VERSION.as_bytes());
    h.update(version.to_be_bytes());
    h.finalize().into()
}

/// Rejection reasons, rendered as the `msg` of an ERR record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum Reject {
    #[error("sig")]
    Sig,
    #[error("format")]
    Format,
    #[error("empty")]
    Empty,
    #[error("dup")]
    Dup,
    #[error("unprovisioned")]
    Unprovisioned,
}

impl Reject {
    pub fn as_str(self) -> &'static str {
        match self {
            Reject::Sig => "sig",
            Reject::Format => "format",
            Reject::Empty => "empty",
            Reject::Dup => "dup",
            Reject::Unprovisioned => "unprovisioned",
        }
    }
}

/// Where a matched publication goes: client id and its reply address.
pub type Route = (ClientId, Arc<str>);

#[derive(Debug, Default)]
pub struct Counters {
    pub registered: AtomicU64,
    pub matched: AtomicU64,
    pub rejected: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CounterSnapshot {
    pub registered: u64,
    pub matched: u64,
    pub rejected: u64,
}

struct Secrets {
    key: SymKey,
    verify_key: PublicKey,
}

/// Opaque handle to the simulated boundary.
///
/// Mutating entry points take `&mut self`; [`RouterHandle::ecall_match`] takes
/// `&self` and may run concurrently between mutations.
pub struct RouterHandle {
    secrets: Option<Secrets>,
    version: Option<u64>,
    index: ContainmentIndex,
    counters: Counters,
    soft_budget: usize,
}

impl Default for RouterHandle {
    fn default() -> Self {
        Self::new()
    }
}

impl std::fmt::Debug for RouterHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RouterHandle")
            .field("version", &self.version)
            .field("counters", &self.counters())
            .finish_non_exhaustive()
    }
}

impl RouterHandle {
    pub fn new() -> Self {
        RouterHandle {
            secrets: None,
            version: None,
            index: ContainmentIndex::new(),
            counters: Counters::default(),
            soft_budget: DEFAULT_SOFT_BUDGET_BYTES,
        }
    }

    pub fn with_soft_budget(mut self, bytes: usize) -> Self {
        self.soft_budget = bytes;
        self
    }

    /// Install (or replace) the secrets. Registered subscriptions survive a
    /// re-provisioning.
    pub fn provision(&mut self, blob: ProvisioningBlob) -> Result<[u8; 32], ProvisionError> {
        if let Some(current) = self.version {
            if blob.version <= current {
                self.counters.rejected.fetch_add(1, Ordering::Relaxed);
                return Err(ProvisionError::ReplayRejected {
                    offered: blob.version,
                    current,
                });
            }
        }
        self.version = Some(blob.version);
        self.secrets = Some(Secrets {
            key: blob.sym_key,
            verify_key: blob.verify_key,
        });
        log::info!("router provisioned at version {}", blob.version);
        Ok(attestation_stub(blob.version))
    }

    pub fn version(&self) -> Option<u64> {
        self.version
    }

    fn reject(&self, reference: &str, why: Reject) -> Record {
        self.counters.rejected.fetch_add(1, Ordering::Relaxed);
        Record::err(reference, why.as_str())
    }

    /// Handle a SUBREG record. Returns ACK or ERR.
    pub fn ecall_register(&mut self, frame: &Record) -> Record {
        let Record::SubReg {
            sub,
            client,
            reply,
            ct,
            sig,
        } = frame
        else {
            return self.reject("", Reject::Format);
        };
        let sub_ref = sub.as_str();
        let Some(secrets) = &self.secrets else {
            return self.reject(sub_ref, Reject::Unprovisioned);
        };
        if !verify(
            &secrets.verify_key,
            &subreg_signing_bytes(sub, client, reply, ct),
            sig,
        ) {
            return self.reject(sub_ref, Reject::Sig);
        }
        self.register_verified(sub, client, reply, ct)
    }

    /// Register a batch of SUBREG records covered by one signature over
    /// [`subreg_batch_signing_bytes`]; per-record `sig` fields are ignored.
    /// Returns one ACK or ERR per record, in order.
    pub fn ecall_register_batch(&mut self, batch: &[Record], sig: &[u8]) -> Vec<Record> {
        let refs = || batch.iter().map(|r| match r {
            Record::SubReg { sub, .. } => sub.as_str().to_string(),
            _ => String::new(),
        });
        let Some(secrets) = &self.secrets else {
            return refs().map(|r| self.reject(&r, Reject::Unprovisioned)).collect();
        };
        let Some(msg) = subreg_batch_signing_bytes(batch) else {
            return refs().map(|r| self.reject(&r, Reject::Format)).collect();
        };
        if !verify(&secrets.verify_key, &msg, sig) {
            return refs().map(|r| self.reject(&r, Reject::Sig)).collect();
        }
        batch
            .iter()
            .map(|r| match r {
                Record::SubReg { sub, client, reply, ct, .. } => self.register_verified(sub, client, reply, ct),
                _ => unreachable!("checked by subreg_batch_signing_bytes"),
            })
            .collect()
    }

    fn register_verified(&mut self, sub: &SubId, client: &ClientId, reply: &str, ct: &[u8]) -> Record {
        let sub_ref = sub.as_str();
        let Some(secrets) = &self.secrets else {
            return self.reject(sub_ref, Reject::Unprovisioned);
        };
        let s = match open_subscription(&secrets.key, ct) {
            Ok(s) => s,
            Err(why) => return self.reject(sub_ref, why),
        };
        match self.index.insert_routed(&s, client.clone(), sub.clone(), Arc::from(reply)) {
            Ok(_) => {}
            Err(IndexError::Duplicate(_)) => return self.reject(sub_ref, Reject::Dup),
            Err(IndexError::NotCanonical) => return self.reject(sub_ref, Reject::Format),
        }
        self.counters.registered.fetch_add(1, Ordering::Relaxed);
        let fp = self.footprint();
        if fp > self.soft_budget {
            log::warn!("router footprint {fp} B exceeds soft budget {} B", self.soft_budget);
        }
        Record::ack(sub_ref, "")
    }

    /// Handle an UNSUB record. Unknown ids are acknowledged with `absent`.
    pub fn ecall_invalidate(&mut self, frame: &Record) -> Record {
        let Record::Unsub { sub, sig } = frame else {
            return self.reject("", Reject::Format);
        };
        let Some(secrets) = &self.secrets else {
            return self.reject(sub.as_str(), Reject::Unprovisioned);
        };
        if !verify(&secrets.verify_key, &unsub_signing_bytes(sub), sig) {
            return self.reject(sub.as_str(), Reject::Sig);
        }
        if self.index.remove(sub) {
            Record::ack(sub.as_str(), "")
        } else {
            Record::ack(sub.as_str(), "absent")
        }
    }

    /// Handle a PUB record: open the header, match, return sorted distinct
    /// routes. The payload is not touched.
    pub fn ecall_match(&self, frame: &Record) -> Result<Vec<Route>, Reject> {
        let Record::Pub { hdr, .. } = frame else {
            self.counters.rejected.fetch_add(1, Ordering::Relaxed);
            return Err(Reject::Format);
        };
        self.match_sealed_header(hdr)
    }

    /// Match a sealed header (`iv || ct` bytes) directly.
    pub fn match_sealed_header(&self, hdr: &[u8]) -> Result<Vec<Route>, Reject> {
        let Some(secrets) = &self.secrets else {
            return Err(Reject::Unprovisioned);
        };
        let h = match open_header(&secrets.key, hdr) {
            Ok(h) => h,
            Err(why) => {
                self.counters.rejected.fetch_add(1, Ordering::Relaxed);
                return Err(why);
            }
        };
        Ok(self.match_header(&h))
    }

    /// Match an already-plaintext header against the same index. This is the
    /// unencrypted baseline path; it sees nothing `ecall_match` does not return.
    pub fn match_header(&self, h: &PublicationHeader) -> Vec<Route> {
        let routes = self.index.match_routes(h);
        self.counters.matched.fetch_add(1, Ordering::Relaxed);
        routes
    }

    pub fn footprint(&self) -> usize {
        self.index.footprint_bytes() + BOUNDARY_OVERHEAD_BYTES
    }

    /// Shape statistics; `footprint_bytes` includes the boundary constant.
    pub fn stats(&self) -> IndexStats {
        let mut st = self.index.stats();
        st.footprint_bytes = self.footprint();
        st
    }

    /// Number of structural violations found by a full index audit.
    pub fn audit_violations(&self) -> usize {
        self.index.audit().len()
    }

    pub fn counters(&self) -> CounterSnapshot {
        CounterSnapshot {
            registered: self.counters.registered.load(Ordering::Relaxed),
            matched: self.counters.matched.load(Ordering::Relaxed),
            rejected: self.counters.rejected.load(Ordering::Relaxed),
        }
    }
}

fn open_subscription(key: &SymKey, ct: &[u8]) -> Result<Subscription, Reject> {
    let pt = sym_open_bytes(key, ct).map_err(|_| Reject::Format)?;
    let text = std::str::from_utf8(&pt).map_err(|_| Reject::Format)?;
    let s = Subscription::parse(text).map_err(|_| Reject::Format)?;
    if s.is_empty() {
        return Err(Reject::Format);
    }
    canonicalize(&s).map_err(|e| match e {
        ModelError::EmptyConstraint(_) => Reject::Empty,
        _ => Reject::Format,
    })
}

fn open_header(key: &SymKey, ct: &[u8]) -> Result<PublicationHeader, Reject> {
    let pt = sym_open_bytes(key, ct).map_err(|_| Reject::Format)?;
    let text = std::str::from_utf8(&pt).map_err(|_| Reject::Format)?;
    PublicationHeader::parse(text).map_err(|_| Reject::Format)
}
