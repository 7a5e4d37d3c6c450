//! Match-latency benchmark across the three engines.
//!
//! For each database size the engines for all requested modes are populated
//! from the same subscriptions, a warm-up batch is run and discarded, then
//! `reps` passes over the measured batch are timed one publication at a time.
//! Every publication is run on all engines back to back, so drift hits each
//! mode alike. The engine order is shuffled per publication: a fixed order
//! would let some engines run after themselves (warm cache) more often than
//! others.

use std::fmt;
use std::hint::black_box;
use std::io::{Read, Write};
use std::rc::Rc;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use scbr_core::aspe::{encrypt_pub, encrypt_sub, AspeEngine, AspeKeyPair, EncodedPublication};
use scbr_core::envelope::Record;
use scbr_core::publisher::{publication, PublisherSecrets};
use scbr_core::router::RouterHandle;
use scbr_core::workload::{gen_entries, gen_publications, SubEntry};
use scbr_core::{ContainmentIndex, Publication, PublicationHeader};
use serde::{Deserialize, Serialize};

use crate::BenchError;

pub const DEFAULT_SIZES: [usize; 7] = [1_000, 2_500, 5_000, 10_000, 25_000, 50_000, 100_000];
pub const DEFAULT_BATCH: usize = 1_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "UPPERCASE")]
#[value(rename_all = "UPPER")]
pub enum Mode {
    /// Containment index on plaintext headers.
    Plain,
    /// Containment index behind the router: open the sealed header, then match.
    Encrypted,
    /// ASPE linear scan.
    Aspe,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Plain => "PLAIN",
            Mode::Encrypted => "ENCRYPTED",
            Mode::Aspe => "ASPE",
        })
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub workload: String,
    pub sizes: Vec<usize>,
    pub batch: usize,
    pub modes: Vec<Mode>,
    pub reps: usize,
    pub seed: u64,
}

impl BenchConfig {
    pub fn new(workload: impl Into<String>) -> Self {
        BenchConfig {
            workload: workload.into(),
            sizes: DEFAULT_SIZES.to_vec(),
            batch: DEFAULT_BATCH,
            modes: vec![Mode::Plain],
            reps: 3,
            seed: 1,
        }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        crate::workload(&self.workload, self.seed)?;
        if self.sizes.is_empty() || self.sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(BenchError::Invalid("sizes must be non-empty and ascending"));
        }
        if self.sizes[0] == 0 {
            return Err(BenchError::Invalid("sizes must be positive"));
        }
        if self.batch == 0 || self.reps == 0 {
            return Err(BenchError::Invalid("batch and reps must be at least 1"));
        }
        if self.modes.is_empty() {
            return Err(BenchError::Invalid("no modes given"));
        }
        Ok(())
    }
}

/// One CSV row. Latencies are per publication, in microseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub workload: String,
    pub mode: Mode,
    pub db_size: usize,
    pub batch: usize,
    pub reps: usize,
    pub mean_us: f64,
    pub median_us: f64,
    pub p99_us: f64,
    /// Standard deviation of the per-repetition means.
    pub stddev_us: f64,
    pub regs_per_sec: f64,
    pub footprint_bytes: usize,
    /// Matching (publication, subscription) pairs over one pass of the batch.
    pub matches_returned: u64,
}

pub fn write_csv<W: Write>(w: W, records: &[BenchRecord]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in records {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(r: R) -> csv::Result<Vec<BenchRecord>> {
    csv::Reader::from_reader(r).deserialize().collect()
}

/// Key material for the encrypted modes, derived from the run seed.
pub struct BenchKeys {
    pub publisher: PublisherSecrets,
    pub aspe: AspeKeyPair,
}

impl BenchKeys {
    pub fn generate(seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x6b65_7973);
        BenchKeys {
            publisher: PublisherSecrets::generate(&mut rng).expect("RSA key generation"),
            aspe: AspeKeyPair::generate(seed),
        }
    }
}

enum Engine {
    Plain(ContainmentIndex, Vec<PublicationHeader>),
    /// PLAIN headers matched on a router's index, so both modes share one
    /// physical index and differ only by the open step.
    PlainOnRouter(Rc<RouterHandle>, Vec<PublicationHeader>),
    Encrypted(Rc<RouterHandle>, Vec<Record>),
    Aspe(AspeEngine, Vec<EncodedPublication>),
}

/// A populated engine with its publications prepared for matching.
pub struct Prepared {
    pub mode: Mode,
    engine: Engine,
    pub regs_per_sec: f64,
    pub footprint_bytes: usize,
}

pub fn reply_addr(e: &SubEntry) -> String {
    format!("reply-{}", e.client)
}

impl Prepared {
    /// Populate `mode`'s engine. Only the engine-side registration work is
    /// timed: publisher sealing and client-side ASPE encryption happen first.
    /// `keys` may be `None` for PLAIN only.
    pub fn build(mode: Mode, entries: &[SubEntry], pubs: &[Publication], keys: Option<&BenchKeys>, seed: u64) -> Self {
        let keys = || keys.expect("encrypted modes need keys");
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x7072_6570);
        let (engine, secs, footprint_bytes) = match mode {
            Mode::Plain => {
                // Same index and route output as behind the router, minus sealing.
                let replies: Vec<Arc<str>> = entries.iter().map(|e| reply_addr(e).into()).collect();
                let mut index = ContainmentIndex::new();
                let t = Instant::now();
                for (e, reply) in entries.iter().zip(replies) {
                    index
                        .insert_routed(&e.sub, e.client.clone(), e.sub_id.clone(), reply)
                        .expect("generated subscriptions are canonical and unique");
                }
                let secs = t.elapsed().as_secs_f64();
                let fp = index.footprint_bytes();
                let headers = pubs.iter().map(|p| p.header.clone()).collect();
                (Engine::Plain(index, headers), secs, fp)
            }
            Mode::Encrypted => {
                let sec = &keys().publisher;
                let (batch, sig) = sec.registration_batch(
                    &mut rng,
                    entries.iter().map(|e| (e.sub_id.clone(), e.client.clone(), reply_addr(e), &e.sub)),
                );
                let mut router = RouterHandle::new();
                router.provision(sec.provisioning_blob(1)).expect("fresh router");
                let t = Instant::now();
                let acks = router.ecall_register_batch(&batch, &sig);
                let secs = t.elapsed().as_secs_f64();
                assert!(acks.iter().all(|a| matches!(a, Record::Ack { .. })), "registration rejected");
                let fp = router.footprint();
                let records = pubs
                    .iter()
                    .map(|p| publication(&mut rng, &sec.sk, p.id.clone(), &p.header, Vec::new()))
                    .collect();
                (Engine::Encrypted(Rc::new(router), records), secs, fp)
            }
            Mode::Aspe => {
                let encoded: Vec<_> = entries.iter().map(|e| encrypt_sub(&keys().aspe, &mut rng, &e.sub)).collect();
                let mut engine = AspeEngine::new();
                let t = Instant::now();
                for (es, e) in encoded.into_iter().zip(entries) {
                    engine.insert(es, e.client.clone(), e.sub_id.clone());
                }
                let secs = t.elapsed().as_secs_f64();
                let fp = engine.footprint_bytes();
                let eps = pubs.iter().map(|p| encrypt_pub(&keys().aspe, &mut rng, &p.header)).collect();
                (Engine::Aspe(engine, eps), secs, fp)
            }
        };
        Prepared {
            mode,
            engine,
            regs_per_sec: entries.len() as f64 / secs.max(1e-9),
            footprint_bytes,
        }
    }

    /// Point a PLAIN engine at `other`'s router index. Build rate and
    /// footprint stay those of the standalone PLAIN build.
    pub fn share_router(&mut self, other: &Prepared) {
        let Engine::Encrypted(router, _) = &other.engine else { return };
        if let Engine::Plain(_, headers) = &mut self.engine {
            let headers = std::mem::take(headers);
            self.engine = Engine::PlainOnRouter(Rc::clone(router), headers);
        }
    }

    /// Match publication `i`; returns the number of matches (routes for
    /// PLAIN and ENCRYPTED, which equal subscriptions when clients are
    /// distinct, as in generated entries).
    pub fn run(&self, i: usize) -> usize {
        match &self.engine {
            Engine::Plain(index, headers) => index.match_routes(&headers[i]).len(),
            Engine::PlainOnRouter(router, headers) => router.match_header(&headers[i]).len(),
            Engine::Encrypted(router, records) => router.ecall_match(&records[i]).expect("sealed header opens").len(),
            Engine::Aspe(engine, eps) => engine.match_pub(&eps[i]).len(),
        }
    }
}

fn summarize(samples: &[Vec<f64>]) -> (f64, f64, f64, f64) {
    let mut all: Vec<f64> = samples.iter().flatten().copied().collect();
    all.sort_by(f64::total_cmp);
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let median = if all.len() % 2 == 1 {
        all[all.len() / 2]
    } else {
        (all[all.len() / 2 - 1] + all[all.len() / 2]) / 2.0
    };
    let p99 = all[((all.len() as f64 * 0.99).ceil() as usize).max(1) - 1];
    let rep_means: Vec<f64> = samples.iter().map(|s| s.iter().sum::<f64>() / s.len() as f64).collect();
    let stddev = if rep_means.len() < 2 {
        0.0
    } else {
        let m = rep_means.iter().sum::<f64>() / rep_means.len() as f64;
        (rep_means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (rep_means.len() - 1) as f64).sqrt()
    };
    (mean, median, p99, stddev)
}

/// Run the benchmark; one record per (size, mode), sizes outermost.
pub fn bench_match(cfg: &BenchConfig) -> Result<Vec<BenchRecord>, BenchError> {
    cfg.validate()?;
    let spec = crate::workload(&cfg.workload, cfg.seed)?;
    let needs_keys = cfg.modes.iter().any(|m| *m != Mode::Plain);
    let keys = needs_keys.then(|| BenchKeys::generate(cfg.seed));
    let mut out = Vec::new();
    for &n in &cfg.sizes {
        let entries = gen_entries(&spec, n);
        // First batch warms up, second is measured.
        let pubs = gen_publications(&spec, 2 * cfg.batch);
        let mut engines: Vec<Prepared> = cfg
            .modes
            .iter()
            .map(|&m| Prepared::build(m, &entries, &pubs, keys.as_ref(), cfg.seed))
            .collect();
        // Separately built indexes differ in layout by a few us at large
        // sizes, as much as the open step costs; compare on one index.
        if let Some(enc) = engines.iter().position(|e| e.mode == Mode::Encrypted) {
            let (head, tail) = engines.split_at_mut(enc);
            let (enc, rest) = tail.split_first_mut().expect("position is in bounds");
            for e in head.iter_mut().chain(rest) {
                e.share_router(enc);
            }
        }
        for e in &engines {
            for i in 0..cfg.batch {
                black_box(e.run(i));
            }
        }
        let k = engines.len();
        let mut samples = vec![vec![Vec::with_capacity(cfg.batch); cfg.reps]; k];
        let mut matches = vec![0u64; k];
        let mut order_rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ 0x6f72_6465);
        let mut order: Vec<usize> = (0..k).collect();
        for rep in 0..cfg.reps {
            for i in 0..cfg.batch {
                order.shuffle(&mut order_rng);
                for &m in &order {
                    let t = Instant::now();
                    let found = black_box(engines[m].run(cfg.batch + i));
                    samples[m][rep].push(t.elapsed().as_secs_f64() * 1e6);
                    if rep == 0 {
                        matches[m] += found as u64;
                    }
                }
            }
        }
        for (m, e) in engines.iter().enumerate() {
            let (mean_us, median_us, p99_us, stddev_us) = summarize(&samples[m]);
            log::info!("{} {} n={n}: mean {mean_us:.2} us", cfg.workload, e.mode);
            out.push(BenchRecord {
                workload: cfg.workload.clone(),
                mode: e.mode,
                db_size: n,
                batch: cfg.batch,
                reps: cfg.reps,
                mean_us,
                median_us,
                p99_us,
                stddev_us,
                regs_per_sec: e.regs_per_sec,
                footprint_bytes: e.footprint_bytes,
                matches_returned: matches[m],
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_statistics() {
        let (mean, median, p99, sd) = summarize(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        assert_eq!((mean, median), (3.5, 3.5));
        assert_eq!(p99, 6.0);
        assert!((sd - (4.5f64).sqrt()).abs() < 1e-12);
        assert_eq!(summarize(&[vec![2.0]]).3, 0.0);
    }

    #[test]
    fn config_validation() {
        let mut c = BenchConfig::new("e100a1");
        assert!(c.validate().is_ok());
        c.sizes = vec![10, 5];
        assert!(c.validate().is_err());
        c.sizes = vec![5];
        c.batch = 0;
        assert!(c.validate().is_err());
        assert!(matches!(
            BenchConfig::new("nope").validate(),
            Err(BenchError::UnknownWorkload(_))
        ));
    }
}
