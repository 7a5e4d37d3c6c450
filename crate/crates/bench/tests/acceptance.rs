//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Pass criterion numbers to run a subset:
//! `cargo test --release -p scbr-bench --test acceptance -- 5 6`.

use std::collections::{BTreeSet, HashSet};
use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use scbr_bench::bench::{BenchKeys, Prepared};
use scbr_bench::scenario::{capture_check, run_script, stale_provisioning_check, tamper_check};
use scbr_bench::verify::{verify_with, VerifyOptions};
use scbr_bench::{bench_match, report_stats, BenchConfig, BenchRecord, Mode};
use scbr_core::aspe::{aspe_match, dot, encrypt_pub, encrypt_sub, AspeKeyPair, DD, DIM};
use scbr_core::model::{
    canonicalize, covers, matches, AttributeValue, Bound, ClientId, Constraint, PublicationHeader, SubId,
    Subscription,
};
use scbr_core::workload::{gen_entries, gen_publications, WorkloadSpec, WORKLOAD_NAMES};
use scbr_core::ContainmentIndex;

// Tolerances, as stated by the criteria.
const ORACLE_SUBS: usize = 2_000;
const ORACLE_PUBS: usize = 500;
const ORACLE_BUDGET: Duration = Duration::from_secs(120);
const COVER_TRIPLES: usize = 100_000;
/// Pairs also checked against brute-force inclusion over the whole domain.
const COVER_SEMANTIC_PAIRS: usize = 3_000;
const HASSE_INTERLEAVINGS: usize = 1_000;
const HASSE_MAX_N: usize = 200;
const SCALAR_TRIALS: u64 = 1_000;
const SCALAR_REL_TOL: f64 = 1e-6;
const GUARDED_PAIRS: usize = 10_000;
const GAP_SIZE: usize = 100_000;
const GAP_FACTOR: f64 = 5.0;
const GAP_BUDGET: Duration = Duration::from_secs(15 * 60);
const OVERHEAD_SMALL: usize = 1_000;
const OVERHEAD_MAX_RATIO: f64 = 2.0;
/// Latency differences of a few µs on ~250 µs matches need many passes.
const BENCH_REPS: usize = 30;
const TREND_SIZE: usize = 10_000;
const TREND_SEEDS: [u64; 3] = [1, 2, 3];
const FOOTPRINT_ANCHORS: [(&str, usize, f64); 2] = [("e80a1", 10_000, 4.37e6), ("e100a1", 100_000, 43e6)];
const FOOTPRINT_FACTOR: f64 = 3.0;
const TAMPER_TRIALS: usize = 500;
const PROVISION_VERSION: u64 = 5;
const SCRIPTS: u64 = 100;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn keys() -> &'static BenchKeys {
    static KEYS: OnceLock<BenchKeys> = OnceLock::new();
    KEYS.get_or_init(|| BenchKeys::generate(1))
}

/// The e100a1 run shared by criteria 5 and 8.
fn e100a1_run() -> &'static (Vec<BenchRecord>, Duration) {
    static RUN: OnceLock<(Vec<BenchRecord>, Duration)> = OnceLock::new();
    RUN.get_or_init(|| {
        let mut cfg = BenchConfig::new("e100a1");
        cfg.sizes = vec![OVERHEAD_SMALL, GAP_SIZE];
        cfg.modes = vec![Mode::Plain, Mode::Encrypted, Mode::Aspe];
        cfg.reps = BENCH_REPS;
        let t = Instant::now();
        let records = bench_match(&cfg).expect("valid configuration");
        (records, t.elapsed())
    })
}

/// PLAIN and ENCRYPTED alone: ASPE's 52 MB scan between samples would leave
/// the open step cold at 100k only.
fn overhead_run() -> &'static [BenchRecord] {
    static RUN: OnceLock<Vec<BenchRecord>> = OnceLock::new();
    RUN.get_or_init(|| {
        let mut cfg = BenchConfig::new("e100a1");
        cfg.sizes = vec![OVERHEAD_SMALL, GAP_SIZE];
        cfg.modes = vec![Mode::Plain, Mode::Encrypted];
        cfg.reps = BENCH_REPS;
        bench_match(&cfg).expect("valid configuration")
    })
}

fn record(records: &[BenchRecord], mode: Mode, n: usize) -> &BenchRecord {
    records
        .iter()
        .find(|r| r.mode == mode && r.db_size == n)
        .expect("record for every mode and size")
}

fn c1_oracle() -> Outcome {
    let t = Instant::now();
    let mut bad = Vec::new();
    let mut pairs = 0;
    for w in WORKLOAD_NAMES {
        let r = verify_with(w, ORACLE_SUBS, ORACLE_PUBS, 1, keys(), VerifyOptions::default()).expect("known workload");
        pairs += r.oracle_pairs;
        if !r.ok() {
            bad.push(r.summary());
        }
    }
    let elapsed = t.elapsed();
    // The check must be able to fail.
    let control = verify_with("e80a1", ORACLE_SUBS, ORACLE_PUBS, 1, keys(), VerifyOptions { corrupt_index: true })
        .expect("known workload");
    let pass = bad.is_empty() && elapsed < ORACLE_BUDGET && !control.mismatches.is_empty();
    outcome(
        pass,
        format!(
            "9 workloads x {ORACLE_SUBS}x{ORACLE_PUBS}, 3 engines, {pairs} oracle pairs, failures {bad:?}, {:.1}s (< {}s), corrupted-index control mismatches {}",
            elapsed.as_secs_f64(),
            ORACLE_BUDGET.as_secs(),
            control.mismatches.len()
        ),
    )
}

// Tiny domain for criteria 2 and 3: three attributes, two texts, integer
// bounds in 0..=5. Half-integer header values from -0.5 to 5.5 separate every
// pair of distinct bounds.
const ATTRS: [&str; 3] = ["a", "b", "c"];
const TEXTS: [&str; 2] = ["x", "y"];

fn tiny_bound<R: Rng>(rng: &mut R) -> Bound {
    let v = rng.gen_range(0..=5) as f64;
    match rng.gen_range(0..3) {
        0 => Bound::Unbounded,
        1 => Bound::Inclusive(v),
        _ => Bound::Exclusive(v),
    }
}

fn tiny_sub<R: Rng>(rng: &mut R) -> Subscription {
    loop {
        let cs: Vec<Constraint> = (0..rng.gen_range(0..4))
            .filter_map(|_| {
                let a = ATTRS[rng.gen_range(0..3)];
                if rng.gen_bool(0.2) {
                    Constraint::eq_text(a, TEXTS[rng.gen_range(0..2)]).ok()
                } else {
                    Constraint::range(a, tiny_bound(rng), tiny_bound(rng)).ok()
                }
            })
            .collect();
        if let Ok(s) = canonicalize(&Subscription::new(cs)) {
            return s;
        }
    }
}

fn tiny_value(i: usize) -> Option<AttributeValue> {
    match i {
        0 => None,
        1..=13 => Some(AttributeValue::Number((i as f64 - 2.0) / 2.0)),
        _ => Some(AttributeValue::Text(TEXTS[i - 14].to_string())),
    }
}

/// Every non-empty header over the domain: 16 choices per attribute.
fn tiny_headers() -> Vec<PublicationHeader> {
    let mut out = Vec::new();
    for i in 0..16 {
        for j in 0..16 {
            for k in 0..16 {
                let attrs: Vec<(String, AttributeValue)> = [i, j, k]
                    .iter()
                    .zip(ATTRS)
                    .filter_map(|(&v, a)| tiny_value(v).map(|v| (a.to_string(), v)))
                    .collect();
                if !attrs.is_empty() {
                    out.push(PublicationHeader::new(attrs).expect("valid header"));
                }
            }
        }
    }
    out
}

fn tiny_header<R: Rng>(rng: &mut R) -> PublicationHeader {
    loop {
        let attrs: Vec<(String, AttributeValue)> = ATTRS
            .iter()
            .filter_map(|a| tiny_value(rng.gen_range(0..16)).map(|v| (a.to_string(), v)))
            .collect();
        if !attrs.is_empty() {
            return PublicationHeader::new(attrs).expect("valid header");
        }
    }
}

fn c2_covering() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    let (mut violations, mut cover_pairs, mut chains, mut mutual) = (0usize, 0usize, 0usize, 0usize);
    for _ in 0..COVER_TRIPLES {
        let (s, s2, s3) = (tiny_sub(&mut rng), tiny_sub(&mut rng), tiny_sub(&mut rng));
        let h = tiny_header(&mut rng);
        let c12 = covers(&s, &s2);
        cover_pairs += c12 as usize;
        if c12 && matches(&h, &s2) && !matches(&h, &s) {
            violations += 1;
        }
        if !covers(&s, &s) {
            violations += 1;
        }
        if c12 && covers(&s2, &s3) {
            chains += 1;
            violations += !covers(&s, &s3) as usize;
        }
        if c12 && covers(&s2, &s) {
            mutual += 1;
            violations += (s.canonical_text() != s2.canonical_text()) as usize;
        }
    }
    // Independent oracle: inclusion of match sets over the exhaustive domain.
    let headers = tiny_headers();
    let mut disagreements = 0;
    for _ in 0..COVER_SEMANTIC_PAIRS {
        let (s, s2) = (tiny_sub(&mut rng), tiny_sub(&mut rng));
        let included = headers.iter().all(|h| !matches(h, &s2) || matches(h, &s));
        disagreements += (included != covers(&s, &s2)) as usize;
    }
    let pass = violations == 0 && disagreements == 0 && cover_pairs > 0 && chains > 0 && mutual > 0;
    outcome(
        pass,
        format!(
            "{COVER_TRIPLES} triples: {violations} violations ({cover_pairs} covering pairs, {chains} chains, {mutual} mutual); \
             {disagreements}/{COVER_SEMANTIC_PAIRS} pairs disagree with brute-force inclusion over {} headers",
            headers.len()
        ),
    )
}

/// Transitive reduction of the covering order over `subs`, by canonical text.
fn expected_hasse(subs: &[Subscription]) -> BTreeSet<(String, String)> {
    let n = subs.len();
    let words = n.div_ceil(64);
    let mut below = vec![vec![0u64; words]; n];
    for i in 0..n {
        for j in 0..n {
            if i != j && covers(&subs[i], &subs[j]) {
                below[i][j / 64] |= 1 << (j % 64);
            }
        }
    }
    let mut edges = BTreeSet::new();
    for p in 0..n {
        for c in 0..n {
            if below[p][c / 64] >> (c % 64) & 1 == 0 {
                continue;
            }
            let between = (0..n).any(|q| q != c && below[p][q / 64] >> (q % 64) & 1 == 1 && below[q][c / 64] >> (c % 64) & 1 == 1);
            if !between {
                edges.insert((subs[p].canonical_text(), subs[c].canonical_text()));
            }
        }
    }
    edges
}

fn actual_hasse(ix: &ContainmentIndex) -> (Vec<Subscription>, BTreeSet<(String, String)>) {
    let nodes = ix.node_ids().map(|id| ix.node(id).expect("live").subscription().clone()).collect();
    let edges = ix
        .edges()
        .into_iter()
        .map(|(p, c)| {
            let text = |id| ix.node(id).expect("live").canonical_text().to_string();
            (text(p), text(c))
        })
        .collect();
    (nodes, edges)
}

fn c3_hasse() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let (mut violations, mut checks, mut removes, mut max_nodes) = (0usize, 0usize, 0usize, 0usize);
    for _ in 0..HASSE_INTERLEAVINGS {
        let n = rng.gen_range(1..=HASSE_MAX_N);
        let checkpoint = rng.gen_range(1..=n);
        let mut ix = ContainmentIndex::new();
        let mut live: Vec<SubId> = Vec::new();
        let mut inserted = 0;
        while inserted < n {
            if !live.is_empty() && rng.gen_bool(0.3) {
                let id = live.swap_remove(rng.gen_range(0..live.len()));
                violations += !ix.remove(&id) as usize;
                removes += 1;
            } else {
                let id = SubId::new(format!("s{inserted}")).expect("valid id");
                let client = ClientId::new(format!("c{}", rng.gen_range(0..4))).expect("valid id");
                ix.insert(&tiny_sub(&mut rng), client, id.clone()).expect("fresh id");
                live.push(id);
                inserted += 1;
            }
            if inserted == checkpoint || inserted == n {
                let (nodes, got) = actual_hasse(&ix);
                max_nodes = max_nodes.max(nodes.len());
                let want = expected_hasse(&nodes);
                violations += got.symmetric_difference(&want).count() + ix.audit().len();
                checks += 1;
                if inserted == n {
                    break;
                }
            }
        }
        violations += (ix.entry_count() != live.len()) as usize;
    }
    outcome(
        violations == 0,
        format!(
            "{HASSE_INTERLEAVINGS} interleavings (n <= {HASSE_MAX_N}, {removes} removes, up to {max_nodes} nodes), \
             {checks} edge-set comparisons against the transitive reduction plus audits: {violations} violations"
        ),
    )
}

/// Compensated f64 sum of products.
fn plain_dot(u: &[f64; DIM], v: &[f64; DIM]) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for i in 0..DIM {
        let y = u[i] * v[i] - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    sum
}

fn c4_aspe() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    let mut scalar_failures = 0;
    for trial in 0..SCALAR_TRIALS {
        let k = AspeKeyPair::generate(1000 + trial);
        let u: [f64; DIM] = std::array::from_fn(|_| rng.gen_range(-1e3..1e3));
        let v: [f64; DIM] = std::array::from_fn(|_| rng.gen_range(-1e3..1e3));
        let got = dot(&k.encrypt_pub_vector(&u), &k.encrypt_sub_vector(&v.map(DD::from_f64))).to_f64();
        let want = plain_dot(&u, &v);
        let err = (got - want).abs() / (1.0 + want.abs());
        worst = worst.max(err);
        scalar_failures += (err > SCALAR_REL_TOL) as usize;
    }
    let k = AspeKeyPair::generate(44);
    let (mut pairs, mut agree, mut positives) = (0, 0, 0);
    for name in WORKLOAD_NAMES {
        let spec = WorkloadSpec::named(name, 4).expect("known workload");
        let subs = gen_entries(&spec, 34);
        let pubs = gen_publications(&spec, 34);
        let encoded: Vec<_> = subs.iter().map(|e| encrypt_sub(&k, &mut rng, &e.sub)).collect();
        for p in &pubs {
            let ep = encrypt_pub(&k, &mut rng, &p.header);
            for (e, es) in subs.iter().zip(&encoded) {
                if pairs == GUARDED_PAIRS {
                    break;
                }
                let want = matches(&p.header, &e.sub);
                agree += (aspe_match(&ep, es) == want) as usize;
                positives += want as usize;
                pairs += 1;
            }
        }
    }
    let pass = scalar_failures == 0 && pairs == GUARDED_PAIRS && agree == pairs && positives > 0;
    outcome(
        pass,
        format!(
            "{SCALAR_TRIALS} scalar-product trials, worst relative error {worst:.2e} (<= {SCALAR_REL_TOL:e}); \
             {agree}/{pairs} guarded decisions agree across 9 workloads ({positives} positive)"
        ),
    )
}

fn c5_gap() -> Outcome {
    let (records, elapsed) = e100a1_run();
    let plain = record(records, Mode::Plain, GAP_SIZE).mean_us;
    let aspe = record(records, Mode::Aspe, GAP_SIZE).mean_us;
    let pass = plain * GAP_FACTOR <= aspe && *elapsed < GAP_BUDGET;
    outcome(
        pass,
        format!(
            "e100a1 at {GAP_SIZE}: containment {plain:.1} us vs ASPE {aspe:.1} us, ratio {:.1} (>= {GAP_FACTOR}), \
             reps {BENCH_REPS}, run {:.0}s (< {}s)",
            aspe / plain,
            elapsed.as_secs_f64(),
            GAP_BUDGET.as_secs()
        ),
    )
}

fn c6_overhead() -> Outcome {
    let records = overhead_run();
    let overhead =
        |n| record(records, Mode::Encrypted, n).mean_us - record(records, Mode::Plain, n).mean_us;
    let (small, large) = (overhead(OVERHEAD_SMALL), overhead(GAP_SIZE));
    let ratio = small.max(large) / small.min(large);
    let pass = small > 0.0 && large > 0.0 && ratio < OVERHEAD_MAX_RATIO;
    outcome(
        pass,
        format!(
            "ENCRYPTED - PLAIN: {small:.2} us at {OVERHEAD_SMALL}, {large:.2} us at {GAP_SIZE}; ratio {ratio:.2} (< {OVERHEAD_MAX_RATIO})"
        ),
    )
}

fn c7_trends() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for seed in TREND_SEEDS {
        let roots = |w| report_stats(w, &[TREND_SIZE], seed).expect("known workload")[0].roots;
        let latency = |w: &str| {
            let mut cfg = BenchConfig::new(w);
            cfg.sizes = vec![TREND_SIZE];
            cfg.seed = seed;
            bench_match(&cfg).expect("valid configuration")[0].mean_us
        };
        let (r4, r1) = (roots("e80a4"), roots("e100a1"));
        let (l4, l1) = (latency("e80a4"), latency("e100a1"));
        pass &= r4 > r1 && l4 > l1;
        parts.push(format!("seed {seed}: roots {r4} > {r1}, latency {l4:.1} > {l1:.1} us"));
    }
    outcome(pass, format!("e80a4 vs e100a1 at {TREND_SIZE}: {}", parts.join("; ")))
}

fn c8_footprint() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (w, n, anchor) in FOOTPRINT_ANCHORS {
        let bytes = if w == "e100a1" && n == GAP_SIZE {
            record(&e100a1_run().0, Mode::Encrypted, n).footprint_bytes
        } else {
            let spec = WorkloadSpec::named(w, 1).expect("known workload");
            Prepared::build(Mode::Encrypted, &gen_entries(&spec, n), &[], Some(keys()), 1).footprint_bytes
        } as f64;
        let factor = (bytes / anchor).max(anchor / bytes);
        pass &= factor <= FOOTPRINT_FACTOR;
        parts.push(format!("{w} at {n}: {:.2} MB vs {:.2} MB ({factor:.2}x)", bytes / 1e6, anchor / 1e6));
    }
    outcome(pass, format!("router footprint, within {FOOTPRINT_FACTOR}x: {}", parts.join("; ")))
}

fn c9_security() -> Outcome {
    let secrets = &keys().publisher;
    let cap = capture_check(9, secrets).expect("loopback stack");
    let (refused, intact_ok) = tamper_check(9, TAMPER_TRIALS, secrets).expect("loopback broker");
    let (rejected, attempted, newer_ok) = stale_provisioning_check(PROVISION_VERSION, secrets).expect("loopback broker");
    let pass = cap.leaked.is_empty()
        && cap.deliveries > 0
        && cap.bytes_captured > 0
        && refused == TAMPER_TRIALS
        && intact_ok
        && rejected == attempted
        && newer_ok;
    outcome(
        pass,
        format!(
            "capture {} B, {}/{} markers leaked, {} deliveries; flipped-bit SUBREG refused {refused}/{TAMPER_TRIALS}, intact accepted {intact_ok}; \
             stale provisioning rejected {rejected}/{attempted}, newer accepted {newer_ok}",
            cap.bytes_captured,
            cap.leaked.len(),
            cap.markers,
            cap.deliveries
        ),
    )
}

fn c10_scripts() -> Outcome {
    let secrets = &keys().publisher;
    let (mut deviations, mut deliveries, mut subs, mut invalidated, mut errors) = (Vec::new(), 0, 0, 0, Vec::new());
    let mut workloads = HashSet::new();
    for seed in 0..SCRIPTS {
        match run_script(seed, secrets) {
            Ok(r) => {
                deliveries += r.deliveries;
                subs += r.subscriptions;
                invalidated += r.invalidated;
                workloads.insert(r.workload);
                deviations.extend(r.deviations);
            }
            Err(e) => errors.push(format!("seed {seed}: {e}")),
        }
    }
    let pass = deviations.is_empty() && errors.is_empty() && deliveries > 0 && invalidated >= SCRIPTS as usize;
    let mut detail = format!(
        "{SCRIPTS} scripts over {} workloads: {subs} subscriptions, {invalidated} invalidated, {deliveries} deliveries; \
         {} deviations, {} errors",
        workloads.len(),
        deviations.len(),
        errors.len()
    );
    for d in deviations.iter().chain(&errors).take(5) {
        detail.push_str(&format!("\n      {d}"));
    }
    outcome(pass, detail)
}

type Criterion = (u32, &'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 10] = [
    (1, "oracle equivalence", c1_oracle),
    (2, "covering soundness and partial order", c2_covering),
    (3, "Hasse audit", c3_hasse),
    (4, "ASPE math", c4_aspe),
    (5, "performance gap", c5_gap),
    (6, "encryption overhead", c6_overhead),
    (7, "workload structure trends", c7_trends),
    (8, "footprint anchors", c8_footprint),
    (9, "security flows", c9_security),
    (10, "end-to-end protocol", c10_scripts),
];

fn main() {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    let mut out = std::io::stdout();
    for (n, name, run) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let o = run();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        let _ = writeln!(out, "{verdict} {n:>2} {name} ({:.1}s): {}", t.elapsed().as_secs_f64(), o.detail);
        let _ = out.flush();
        if !o.pass {
            failed.push(n);
        }
    }
    if !failed.is_empty() {
        let _ = writeln!(out, "acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
