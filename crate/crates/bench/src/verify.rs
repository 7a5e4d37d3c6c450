//! Cross-check every matcher against a linear scan over plaintext.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use scbr_core::aspe::{encrypt_pub, encrypt_sub, AspeEngine};
use scbr_core::model::ClientId;
use scbr_core::publisher::publication;
use scbr_core::router::RouterHandle;
use scbr_core::workload::{gen_entries, gen_publications, SubEntry};
use scbr_core::{matches, ContainmentIndex, PubId};

use crate::bench::BenchKeys;
use crate::BenchError;

/// The oracle is O(subscriptions × publications).
pub const MAX_ORACLE_SUBS: usize = 20_000;

#[derive(Debug, Clone, Copy, Default)]
pub struct VerifyOptions {
    /// Negative control: drop one edge from the plaintext index before checking.
    pub corrupt_index: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mismatch {
    pub engine: &'static str,
    pub publication: PubId,
    pub missing: Vec<ClientId>,
    pub extra: Vec<ClientId>,
}

#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub workload: String,
    pub n_subs: usize,
    pub n_pubs: usize,
    pub seed: u64,
    /// Publication/client pairs the oracle reports as matching.
    pub oracle_pairs: usize,
    pub mismatches: Vec<Mismatch>,
    pub audit_violations: usize,
}

impl VerifyReport {
    pub fn ok(&self) -> bool {
        self.mismatches.is_empty() && self.audit_violations == 0
    }

    pub fn summary(&self) -> String {
        format!(
            "{} subs={} pubs={} seed={} oracle_pairs={} mismatches={} audit_violations={}",
            self.workload,
            self.n_subs,
            self.n_pubs,
            self.seed,
            self.oracle_pairs,
            self.mismatches.len(),
            self.audit_violations
        )
    }

    pub fn diff_dump(&self) -> String {
        let mut s = String::new();
        for m in &self.mismatches {
            let ids = |v: &[ClientId]| v.iter().map(|c| c.as_str()).collect::<Vec<_>>().join(" ");
            let _ = writeln!(
                s,
                "{} {}: missing [{}] extra [{}]",
                m.engine,
                m.publication,
                ids(&m.missing),
                ids(&m.extra)
            );
        }
        s
    }
}

/// Several subscriptions per client so that per-client deduplication is
/// exercised too.
fn with_shared_clients(entries: Vec<SubEntry>) -> Vec<SubEntry> {
    let n_clients = (entries.len() / 3).max(1);
    entries
        .into_iter()
        .enumerate()
        .map(|(i, mut e)| {
            e.client = ClientId::new(format!("c{}", i % n_clients)).expect("valid id");
            e
        })
        .collect()
}

fn client_set<'a>(it: impl IntoIterator<Item = &'a ClientId>) -> BTreeSet<ClientId> {
    it.into_iter().cloned().collect()
}

pub fn verify_oracle(workload: &str, n_subs: usize, n_pubs: usize, seed: u64) -> Result<VerifyReport, BenchError> {
    verify_with(workload, n_subs, n_pubs, seed, &BenchKeys::generate(seed), VerifyOptions::default())
}

/// As [`verify_oracle`], with caller-supplied keys (RSA generation is slow).
pub fn verify_with(
    workload: &str,
    n_subs: usize,
    n_pubs: usize,
    seed: u64,
    keys: &BenchKeys,
    opts: VerifyOptions,
) -> Result<VerifyReport, BenchError> {
    if n_subs > MAX_ORACLE_SUBS {
        return Err(BenchError::Invalid("verify is limited to 20000 subscriptions"));
    }
    let spec = crate::workload(workload, seed)?;
    let entries = with_shared_clients(gen_entries(&spec, n_subs));
    let pubs = gen_publications(&spec, n_pubs);
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x7665_7269);

    let mut index = ContainmentIndex::new();
    for e in &entries {
        index
            .insert(&e.sub, e.client.clone(), e.sub_id.clone())
            .expect("generated subscriptions are valid");
    }
    if opts.corrupt_index {
        index.debug_drop_edge();
    }

    let sec = &keys.publisher;
    let mut router = RouterHandle::new();
    router.provision(sec.provisioning_blob(1)).expect("fresh router");
    let (batch, sig) = sec.registration_batch(
        &mut rng,
        entries.iter().map(|e| (e.sub_id.clone(), e.client.clone(), format!("reply-{}", e.client), &e.sub)),
    );
    router.ecall_register_batch(&batch, &sig);

    let mut aspe = AspeEngine::new();
    for e in &entries {
        aspe.insert(encrypt_sub(&keys.aspe, &mut rng, &e.sub), e.client.clone(), e.sub_id.clone());
    }

    let mut report = VerifyReport {
        workload: workload.to_string(),
        n_subs,
        n_pubs,
        seed,
        oracle_pairs: 0,
        mismatches: Vec::new(),
        audit_violations: index.audit().len() + router.audit_violations(),
    };
    for p in &pubs {
        let want = client_set(entries.iter().filter(|e| matches(&p.header, &e.sub)).map(|e| &e.client));
        report.oracle_pairs += want.len();
        let from_index = client_set(index.match_header(&p.header).iter().map(|(c, _)| c));
        let rec = publication(&mut rng, &sec.sk, p.id.clone(), &p.header, Vec::new());
        let from_router = match router.ecall_match(&rec) {
            Ok(routes) => client_set(routes.iter().map(|(c, _)| c)),
            Err(_) => BTreeSet::new(),
        };
        let ep = encrypt_pub(&keys.aspe, &mut rng, &p.header);
        let from_aspe = client_set(aspe.match_pub(&ep).iter().map(|(c, _)| c));
        for (engine, got) in [("index", from_index), ("pipeline", from_router), ("aspe", from_aspe)] {
            if got != want {
                report.mismatches.push(Mismatch {
                    engine,
                    publication: p.id.clone(),
                    missing: want.difference(&got).cloned().collect(),
                    extra: got.difference(&want).cloned().collect(),
                });
            }
        }
    }
    Ok(report)
}
