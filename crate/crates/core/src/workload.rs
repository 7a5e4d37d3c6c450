//! Synthetic stock-quote workloads.
//!
//! Nine named workloads vary the equality-predicate mix, the attribute
//! multiplier (quotes merged side by side, names suffixed `_1.._w`) and how
//! subscription values are drawn. Everything is a pure function of the spec,
//! its seed and the requested sizes.
//!
//! Quotes are correlated per symbol: each symbol has a price level and a
//! volume level, and a quote scatters around them. Numeric values sit on a
//! grid (cents, or whole units for volume and cap) and range bounds sit on
//! the half-step between grid points, so no value ever lies on a bound.

use std::collections::HashMap;
use std::io::{self, BufRead, Write};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Zipf};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::model::{
    canonicalize, AttributeValue, Bound, ClientId, Constraint, PubId, Publication, PublicationHeader,
    SubId, Subscription,
};

pub const SYMBOL_POOL: usize = 500;
pub const PAYLOAD_LEN: usize = 128;
/// Publications the subscription values are drawn from. Kept separate from
/// the publications that get matched.
pub const POPULATION_SIZE: usize = 2000;

pub const WORKLOAD_NAMES: [&str; 9] = [
    "e100a1",
    "e80a1",
    "e80a2",
    "e80a4",
    "extsub2",
    "extsub4",
    "e80a1z100",
    "e80a1zz100",
    "e100a1zz100",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Distribution {
    Uniform,
    ZipfOnSymbol,
    ZipfOnAll,
}

const MIX_E100: &[(u32, usize)] = &[(100, 1)];
const MIX_E80: &[(u32, usize)] = &[(80, 1), (20, 0)];
const MIX_EXTSUB: &[(u32, usize)] = &[(15, 0), (60, 1), (15, 2), (10, 3)];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkloadSpec {
    pub name: &'static str,
    /// (percent, equality predicates per subscription).
    pub mix: &'static [(u32, usize)],
    pub multiplier: usize,
    pub distribution: Distribution,
    pub seed: u64,
}

impl WorkloadSpec {
    pub fn named(name: &str, seed: u64) -> Option<Self> {
        use Distribution::*;
        let (name, mix, multiplier, distribution) = match name {
            "e100a1" => ("e100a1", MIX_E100, 1, Uniform),
            "e80a1" => ("e80a1", MIX_E80, 1, Uniform),
            "e80a2" => ("e80a2", MIX_E80, 2, Uniform),
            "e80a4" => ("e80a4", MIX_E80, 4, Uniform),
            "extsub2" => ("extsub2", MIX_EXTSUB, 2, Uniform),
            "extsub4" => ("extsub4", MIX_EXTSUB, 4, Uniform),
            "e80a1z100" => ("e80a1z100", MIX_E80, 1, ZipfOnSymbol),
            "e80a1zz100" => ("e80a1zz100", MIX_E80, 1, ZipfOnAll),
            "e100a1zz100" => ("e100a1zz100", MIX_E100, 1, ZipfOnAll),
            _ => return None,
        };
        Some(WorkloadSpec {
            name,
            mix,
            multiplier,
            distribution,
            seed,
        })
    }

    pub fn all(seed: u64) -> Vec<WorkloadSpec> {
        WORKLOAD_NAMES
            .iter()
            .map(|n| Self::named(n, seed).expect("known name"))
            .collect()
    }

    /// Attribute name for copy `copy` (1-based) of a quote.
    pub fn attr(&self, base: &str, copy: usize) -> String {
        if self.multiplier == 1 {
            base.to_string()
        } else {
            format!("{base}_{copy}")
        }
    }

    fn rng(&self, stream: &str) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(b"scbr-workload\0");
        h.update(self.seed.to_be_bytes());
        h.update(self.name.as_bytes());
        h.update([0]);
        h.update(stream.as_bytes());
        ChaCha8Rng::from_seed(h.finalize().into())
    }
}

/// Numeric attributes of one quote: name, lower and upper domain bound, and
/// grid step.
const NUMERIC: [(&str, f64, f64, f64); 10] = [
    ("price", 1.0, 1000.0, 0.01),
    ("volume", 1e3, 1e8, 1.0),
    ("change", -50.0, 50.0, 0.01),
    ("open", 1.0, 1000.0, 0.01),
    ("close", 1.0, 1000.0, 0.01),
    ("high", 1.0, 1000.0, 0.01),
    ("low", 1.0, 1000.0, 0.01),
    ("bid", 1.0, 1000.0, 0.01),
    ("ask", 1.0, 1000.0, 0.01),
    ("cap", 1e3, 1e8, 1.0),
];

/// Range predicates take a prefix of this order on each quote copy.
const RANGE_ORDER: [&str; 3] = ["price", "volume", "change"];
/// Candidates for numeric point equalities once symbols run out.
const POINT_ORDER: [&str; 4] = ["open", "close", "high", "low"];

fn domain(base: &str) -> (f64, f64, f64) {
    NUMERIC
        .iter()
        .find(|(n, ..)| *n == base)
        .map(|&(_, lo, hi, step)| (lo, hi, step))
        .expect("known numeric attribute")
}

/// Base attribute name of a possibly suffixed attribute.
fn base_name(attr: &str) -> &str {
    match attr.rsplit_once('_') {
        Some((b, n)) if n.bytes().all(|c| c.is_ascii_digit()) => b,
        _ => attr,
    }
}

pub fn symbol_name(i: usize) -> String {
    // Scramble the index so neighbouring ranks do not share prefixes.
    let mut x = (i * 7919 + 13) % (26 * 26 * 26);
    let mut s = [0u8; 3];
    for c in s.iter_mut().rev() {
        *c = b'A' + (x % 26) as u8;
        x /= 26;
    }
    String::from_utf8(s.to_vec()).unwrap()
}

#[derive(Debug, Clone, Copy)]
struct SymbolProfile {
    price: f64,
    volume: f64,
}

fn log_uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    (rng.gen_range(lo.ln()..hi.ln())).exp()
}

fn symbol_profiles(spec: &WorkloadSpec) -> Vec<SymbolProfile> {
    let mut rng = spec.rng("symbols");
    (0..SYMBOL_POOL)
        .map(|_| SymbolProfile {
            price: log_uniform(&mut rng, 2.0, 900.0),
            volume: log_uniform(&mut rng, 2e3, 5e7),
        })
        .collect()
}

/// Snap onto the attribute grid, clamped into the domain.
fn quantize(base: &str, x: f64) -> f64 {
    let (lo, hi, step) = domain(base);
    let x = x.clamp(lo, hi);
    if step == 1.0 {
        x.round()
    } else {
        (x * 100.0).round() / 100.0
    }
}

fn quote_into<R: Rng>(
    spec: &WorkloadSpec,
    profiles: &[SymbolProfile],
    rng: &mut R,
    copy: usize,
    out: &mut Vec<(String, AttributeValue)>,
) {
    let sym = rng.gen_range(0..SYMBOL_POOL);
    let p = profiles[sym];
    let jitter = |rng: &mut R, spread: f64| 1.0 + rng.gen_range(-spread..spread);
    let price = quantize("price", p.price * jitter(rng, 0.1));
    let open = quantize("open", price * jitter(rng, 0.05));
    let close = quantize("close", price * jitter(rng, 0.05));
    let high = quantize("high", price.max(open).max(close) * (1.0 + rng.gen_range(0.0..0.03)));
    let low = quantize("low", price.min(open).min(close) * (1.0 - rng.gen_range(0.0..0.03)));
    let change = quantize("change", close - open);
    let volume = quantize("volume", p.volume * jitter(rng, 0.5));
    let mut num = |base: &str, v: f64| out.push((spec.attr(base, copy), AttributeValue::Number(v)));
    num("price", price);
    num("open", open);
    num("close", close);
    num("high", high);
    num("low", low);
    num("change", change);
    num("volume", volume);
    let spread = quantize("price", price * rng.gen_range(0.001..0.01)).max(0.01);
    if rng.gen_bool(0.5) {
        num("bid", quantize("bid", price - spread));
    }
    if rng.gen_bool(0.5) {
        num("ask", quantize("ask", price + spread));
    }
    if rng.gen_bool(0.5) {
        num("cap", quantize("cap", volume * price.sqrt()));
    }
    out.push((spec.attr("symbol", copy), AttributeValue::Text(symbol_name(sym))));
}

fn gen_pubs_stream(spec: &WorkloadSpec, n: usize, stream: &str, prefix: &str) -> Vec<Publication> {
    let profiles = symbol_profiles(spec);
    let mut rng = spec.rng(stream);
    (0..n)
        .map(|i| {
            let mut attrs = Vec::with_capacity(11 * spec.multiplier);
            for copy in 1..=spec.multiplier {
                quote_into(spec, &profiles, &mut rng, copy, &mut attrs);
            }
            let mut payload = vec![0u8; PAYLOAD_LEN];
            rng.fill_bytes(&mut payload);
            Publication {
                id: PubId::new(format!("{prefix}{i}")).unwrap(),
                header: PublicationHeader::new(attrs).expect("generated header is valid"),
                payload,
            }
        })
        .collect()
}

/// Publications to be matched.
pub fn gen_publications(spec: &WorkloadSpec, n: usize) -> Vec<Publication> {
    gen_pubs_stream(spec, n, "pubs", "p")
}

/// Publications whose values seed subscriptions; drawn from a separate
/// stream so the matched batch is independent of them.
pub fn gen_population(spec: &WorkloadSpec) -> Vec<Publication> {
    gen_pubs_stream(spec, POPULATION_SIZE, "population", "q")
}

/// Rank in `1..=n` with `P(k) ∝ 1/k^s`.
pub fn zipf_sample<R: Rng + ?Sized>(s: f64, n: usize, rng: &mut R) -> usize {
    if n <= 1 {
        return 1;
    }
    Zipf::new(n as u64, s).expect("valid zipf parameters").sample(rng) as usize
}

/// Distinct values of each attribute, most frequent first, ties by first
/// occurrence.
fn ranked_values(pubs: &[Publication]) -> HashMap<String, Vec<AttributeValue>> {
    let mut counts: HashMap<String, Vec<(AttributeValue, usize)>> = HashMap::new();
    let mut seen: HashMap<(String, String), usize> = HashMap::new();
    for p in pubs {
        for (a, v) in p.header.attrs() {
            let list = counts.entry(a.clone()).or_default();
            match seen.get(&(a.clone(), v.canonical())) {
                Some(&i) => list[i].1 += 1,
                None => {
                    seen.insert((a.clone(), v.canonical()), list.len());
                    list.push((v.clone(), 1));
                }
            }
        }
    }
    counts
        .into_iter()
        .map(|(a, mut list)| {
            // Stable sort keeps first-occurrence order among equal counts.
            list.sort_by(|x, y| y.1.cmp(&x.1));
            (a, list.into_iter().map(|(v, _)| v).collect())
        })
        .collect()
}

/// Where subscription values come from.
enum ValueSource<'a> {
    Template(&'a PublicationHeader),
    Zipf(&'a HashMap<String, Vec<AttributeValue>>),
}

impl ValueSource<'_> {
    fn get<R: Rng>(&self, rng: &mut R, attr: &str) -> Option<AttributeValue> {
        match self {
            ValueSource::Template(h) => h.get(attr).cloned(),
            ValueSource::Zipf(ranked) => {
                let values = ranked.get(attr)?;
                Some(values[zipf_sample(1.0, values.len(), rng) - 1].clone())
            }
        }
    }
}

fn pick_eq_count<R: Rng>(mix: &[(u32, usize)], rng: &mut R) -> usize {
    let mut roll = rng.gen_range(0..100u32);
    for &(pct, count) in mix {
        if roll < pct {
            return count;
        }
        roll -= pct;
    }
    unreachable!("mix sums to 100")
}

/// Range around `center` with width 1-20% of the domain, bounds on the
/// half-step grid. Sides that would leave the domain are dropped.
fn range_constraint<R: Rng>(rng: &mut R, attr: &str, center: f64) -> Constraint {
    let (lo, hi, step) = domain(base_name(attr));
    let scale = 1.0 / step;
    let width = (hi - lo) * rng.gen_range(0.01..0.20);
    let below = (((center - width / 2.0) * scale).floor() - 0.5) / scale;
    let above = (((center + width / 2.0) * scale).ceil() + 0.5) / scale;
    let mut bound = |x: f64, inside: bool| {
        if !inside {
            Bound::Unbounded
        } else if rng.gen_bool(0.5) {
            Bound::Inclusive(x)
        } else {
            Bound::Exclusive(x)
        }
    };
    let lower = bound(below, below > lo);
    let upper = bound(above, above < hi);
    Constraint::range(attr, lower, upper).expect("generated range is valid")
}

/// Canonical subscriptions for `spec`, values drawn from `pubs`.
pub fn gen_subscriptions(spec: &WorkloadSpec, n: usize, pubs: &[Publication]) -> Vec<Subscription> {
    assert!(!pubs.is_empty(), "subscription values need a publication population");
    let mut rng = spec.rng("subs");
    let w = spec.multiplier;
    let ranked = match spec.distribution {
        Distribution::Uniform => HashMap::new(),
        _ => ranked_values(pubs),
    };
    // Publications grouped by symbol per copy, for Zipf-on-symbol templates.
    let mut by_symbol: HashMap<(usize, String), Vec<usize>> = HashMap::new();
    if spec.distribution == Distribution::ZipfOnSymbol {
        for (i, p) in pubs.iter().enumerate() {
            for copy in 1..=w {
                if let Some(AttributeValue::Text(s)) = p.header.get(&spec.attr("symbol", copy)) {
                    by_symbol.entry((copy, s.clone())).or_default().push(i);
                }
            }
        }
    }

    (0..n)
        .map(|_| {
            let eq = pick_eq_count(spec.mix, &mut rng);
            let j = rng.gen_range(1..=w);
            let source = match spec.distribution {
                Distribution::Uniform => ValueSource::Template(&pubs[rng.gen_range(0..pubs.len())].header),
                Distribution::ZipfOnSymbol => {
                    let attr = spec.attr("symbol", j);
                    let symbols = &ranked[&attr];
                    let sym = &symbols[zipf_sample(1.0, symbols.len(), &mut rng) - 1];
                    let AttributeValue::Text(sym) = sym else { unreachable!() };
                    let group = &by_symbol[&(j, sym.clone())];
                    ValueSource::Template(&pubs[*group.choose(&mut rng).unwrap()].header)
                }
                Distribution::ZipfOnAll => ValueSource::Zipf(&ranked),
            };

            let mut cs: Vec<Constraint> = Vec::new();
            let mut used: Vec<String> = Vec::new();
            // Equalities: symbol of copy j, then the other copies' symbols,
            // then numeric points on copy j.
            let symbol_copies = (0..w).map(|k| (j - 1 + k) % w + 1);
            let mut eq_attrs: Vec<String> = symbol_copies.map(|c| spec.attr("symbol", c)).collect();
            eq_attrs.extend(POINT_ORDER.iter().map(|b| spec.attr(b, j)));
            for attr in eq_attrs.into_iter().take(eq) {
                if let Some(v) = source.get(&mut rng, &attr) {
                    let c = match v {
                        AttributeValue::Text(t) => Constraint::eq_text(&attr, t),
                        AttributeValue::Number(x) => Constraint::eq_num(&attr, x),
                    };
                    cs.push(c.expect("generated equality is valid"));
                    used.push(attr);
                }
            }
            // Ranges: 1-3 per quote copy, prefix of the preference order.
            for copy in 1..=w {
                let r = rng.gen_range(1..=RANGE_ORDER.len());
                for base in &RANGE_ORDER[..r] {
                    let attr = spec.attr(base, copy);
                    if used.contains(&attr) {
                        continue;
                    }
                    if let Some(AttributeValue::Number(x)) = source.get(&mut rng, &attr) {
                        cs.push(range_constraint(&mut rng, &attr, x));
                    }
                }
            }
            canonicalize(&Subscription::new(cs)).expect("generated subscription is satisfiable")
        })
        .collect()
}

/// Number of equality constraints (text or numeric point).
pub fn equality_count(s: &Subscription) -> usize {
    s.constraints().iter().filter(|c| c.is_equality()).count()
}

/// A subscription with the ids it is registered under.
#[derive(Debug, Clone, PartialEq)]
pub struct SubEntry {
    pub sub_id: SubId,
    pub client: ClientId,
    pub sub: Subscription,
}

/// Subscriptions with ids `s{i}` and one client `c{i}` each.
pub fn gen_entries(spec: &WorkloadSpec, n: usize) -> Vec<SubEntry> {
    let population = gen_population(spec);
    gen_subscriptions(spec, n, &population)
        .into_iter()
        .enumerate()
        .map(|(i, sub)| SubEntry {
            sub_id: SubId::new(format!("s{i}")).unwrap(),
            client: ClientId::new(format!("c{i}")).unwrap(),
            sub,
        })
        .collect()
}

/// Fraction of subscriptions matched by at least one publication.
pub fn matched_fraction(subs: &[Subscription], pubs: &[Publication]) -> f64 {
    if subs.is_empty() {
        return 0.0;
    }
    let hit = subs
        .iter()
        .filter(|s| pubs.iter().any(|p| crate::model::matches(&p.header, s)))
        .count();
    hit as f64 / subs.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Subs,
    Pubs,
}

impl DatasetKind {
    fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Subs => "subs",
            DatasetKind::Pubs => "pubs",
        }
    }
}

fn header_line(spec: &WorkloadSpec, kind: DatasetKind) -> String {
    json!({"workload": spec.name, "seed": spec.seed, "kind": kind.as_str()}).to_string()
}

pub fn write_subs<W: Write>(mut w: W, spec: &WorkloadSpec, entries: &[SubEntry]) -> io::Result<()> {
    writeln!(w, "{}", header_line(spec, DatasetKind::Subs))?;
    for e in entries {
        let line = json!({"sub": e.sub_id.as_str(), "client": e.client.as_str(), "s": e.sub.canonical_text()});
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn write_pubs<W: Write>(mut w: W, spec: &WorkloadSpec, pubs: &[Publication]) -> io::Result<()> {
    writeln!(w, "{}", header_line(spec, DatasetKind::Pubs))?;
    for p in pubs {
        let line = json!({
            "pub": p.id.as_str(),
            "hdr": p.header.canonical_text(),
            "payload": B64.encode(&p.payload),
        });
        writeln!(w, "{line}")?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Subs(Vec<SubEntry>),
    Pubs(Vec<Publication>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFile {
    pub workload: String,
    pub seed: u64,
    pub data: Dataset,
}

fn bad(line: usize, msg: impl std::fmt::Display) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, format!("line {line}: {msg}"))
}

pub fn read_dataset<R: BufRead>(r: R) -> io::Result<DatasetFile> {
    let mut lines = r.lines();
    let head: Value = serde_json::from_str(&lines.next().ok_or_else(|| bad(1, "empty file"))??)
        .map_err(|e| bad(1, e))?;
    let workload = head["workload"].as_str().ok_or_else(|| bad(1, "workload"))?.to_string();
    let seed = head["seed"].as_u64().ok_or_else(|| bad(1, "seed"))?;
    let kind = head["kind"].as_str().ok_or_else(|| bad(1, "kind"))?.to_string();
    let mut subs = Vec::new();
    let mut pubs = Vec::new();
    for (i, line) in lines.enumerate() {
        let n = i + 2;
        let v: Value = serde_json::from_str(&line?).map_err(|e| bad(n, e))?;
        let field = |k: &str| v[k].as_str().ok_or_else(|| bad(n, format!("missing {k}")));
        match kind.as_str() {
            "subs" => subs.push(SubEntry {
                sub_id: SubId::new(field("sub")?).map_err(|e| bad(n, e))?,
                client: ClientId::new(field("client")?).map_err(|e| bad(n, e))?,
                sub: Subscription::parse(field("s")?)
                    .and_then(|s| canonicalize(&s))
                    .map_err(|e| bad(n, e))?,
            }),
            "pubs" => pubs.push(Publication {
                id: PubId::new(field("pub")?).map_err(|e| bad(n, e))?,
                header: PublicationHeader::parse(field("hdr")?).map_err(|e| bad(n, e))?,
                payload: B64.decode(field("payload")?).map_err(|e| bad(n, e))?,
            }),
            other => return Err(bad(1, format!("unknown kind {other:?}"))),
        }
    }
    let data = if kind == "subs" {
        Dataset::Subs(subs)
    } else {
        Dataset::Pubs(pubs)
    };
    Ok(DatasetFile {
        workload,
        seed,
        data,
    })
}
