use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use scbr_core::model::{AttributeValue, Bound, Test};
use scbr_core::workload::*;

fn spec(name: &str) -> WorkloadSpec {
    WorkloadSpec::named(name, 7).unwrap()
}

#[test]
fn names_map_to_table_rows() {
    assert_eq!(WorkloadSpec::all(1).len(), 9);
    assert!(WorkloadSpec::named("e90a1", 1).is_none());
    for s in WorkloadSpec::all(1) {
        assert_eq!(s.mix.iter().map(|m| m.0).sum::<u32>(), 100, "{}", s.name);
    }
    let s = spec("extsub4");
    assert_eq!(s.multiplier, 4);
    assert_eq!(s.mix, &[(15, 0), (60, 1), (15, 2), (10, 3)]);
    assert_eq!(spec("e80a1z100").distribution, Distribution::ZipfOnSymbol);
    assert_eq!(spec("e100a1zz100").distribution, Distribution::ZipfOnAll);
}

#[test]
fn attribute_counts_follow_multiplier() {
    for (name, w) in [("e100a1", 1), ("e80a2", 2), ("e80a4", 4)] {
        for p in gen_publications(&spec(name), 1000) {
            let n = p.header.len();
            assert!((8 * w..=11 * w).contains(&n), "{name}: {n}");
            assert_eq!(p.payload.len(), PAYLOAD_LEN);
        }
    }
}

#[test]
fn publication_values_stay_in_documented_ranges() {
    for p in gen_publications(&spec("e80a2"), 500) {
        for (attr, v) in p.header.attrs() {
            let base = attr.split('_').next().unwrap();
            match (base, v) {
                ("symbol", AttributeValue::Text(_)) => {}
                ("price" | "open" | "close" | "high" | "low" | "bid" | "ask", AttributeValue::Number(x)) => {
                    assert!((1.0..=1000.0).contains(x), "{attr}={x}")
                }
                ("volume" | "cap", AttributeValue::Number(x)) => {
                    assert!((1e3..=1e8).contains(x) && x.fract() == 0.0, "{attr}={x}")
                }
                ("change", AttributeValue::Number(x)) => assert!((-50.0..=50.0).contains(x), "{attr}={x}"),
                _ => panic!("unexpected attribute {attr}"),
            }
        }
    }
}

#[test]
fn symbols_come_from_a_pool_of_500() {
    let names: std::collections::HashSet<String> = (0..SYMBOL_POOL).map(symbol_name).collect();
    assert_eq!(names.len(), SYMBOL_POOL);
    for p in gen_publications(&spec("e100a1"), 2000) {
        let Some(AttributeValue::Text(s)) = p.header.get("symbol") else { panic!() };
        assert!(names.contains(s));
    }
}

#[test]
fn generation_is_deterministic() {
    let dump = |seed| {
        let s = WorkloadSpec::named("extsub2", seed).unwrap();
        let mut subs = Vec::new();
        write_subs(&mut subs, &s, &gen_entries(&s, 300)).unwrap();
        let mut pubs = Vec::new();
        write_pubs(&mut pubs, &s, &gen_publications(&s, 100)).unwrap();
        (subs, pubs)
    };
    assert_eq!(dump(3), dump(3));
    assert_ne!(dump(3), dump(4));
}

#[test]
fn dataset_files_round_trip() {
    let s = spec("e80a2");
    let entries = gen_entries(&s, 50);
    let pubs = gen_publications(&s, 20);
    let mut buf = Vec::new();
    write_subs(&mut buf, &s, &entries).unwrap();
    let first = String::from_utf8(buf.clone()).unwrap();
    assert_eq!(
        first.lines().next().unwrap(),
        r#"{"kind":"subs","seed":7,"workload":"e80a2"}"#
    );
    let back = read_dataset(&buf[..]).unwrap();
    assert_eq!((back.workload.as_str(), back.seed), ("e80a2", 7));
    assert_eq!(back.data, Dataset::Subs(entries));
    let mut buf = Vec::new();
    write_pubs(&mut buf, &s, &pubs).unwrap();
    assert_eq!(read_dataset(&buf[..]).unwrap().data, Dataset::Pubs(pubs));
    assert!(read_dataset(&b"{\"workload\":\"x\",\"seed\":1,\"kind\":\"subs\"}\nnot json\n"[..]).is_err());
}

fn histogram(name: &str, n: usize) -> HashMap<usize, usize> {
    let mut h = HashMap::new();
    for e in gen_entries(&spec(name), n) {
        *h.entry(equality_count(&e.sub)).or_default() += 1;
    }
    h
}

/// Each bucket within 3 binomial standard deviations of its proportion.
fn assert_mix(name: &str, n: usize) {
    let h = histogram(name, n);
    for &(pct, eq) in spec(name).mix {
        let p = pct as f64 / 100.0;
        let want = p * n as f64;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        let got = *h.get(&eq).unwrap_or(&0) as f64;
        assert!((got - want).abs() <= 3.0 * sigma, "{name}: {eq} eq -> {got}, want {want}±{}", 3.0 * sigma);
    }
    let known: usize = spec(name).mix.iter().map(|m| h.get(&m.1).copied().unwrap_or(0)).sum();
    assert_eq!(known, n, "{name}: unexpected equality counts {h:?}");
}

#[test]
fn equality_mix_matches_table() {
    for name in ["e100a1", "e80a1", "extsub2", "extsub4", "e80a1zz100"] {
        assert_mix(name, 10_000);
    }
}

#[test]
fn e80a1_single_equality_is_on_symbol() {
    for e in gen_entries(&spec("e80a1"), 2000) {
        for c in e.sub.constraints().iter().filter(|c| c.is_equality()) {
            assert_eq!(c.attr(), "symbol");
        }
    }
}

#[test]
fn range_bounds_sit_between_grid_points() {
    for name in ["e100a1", "e80a4", "extsub2", "e100a1zz100"] {
        for e in gen_entries(&spec(name), 2000) {
            for c in e.sub.constraints() {
                let Test::Range(iv) = c.test() else { continue };
                if iv.as_point().is_some() {
                    continue;
                }
                let scale = if c.attr().starts_with("volume") { 1.0 } else { 100.0 };
                for b in [iv.lo(), iv.hi()] {
                    let t = match b {
                        Bound::Unbounded => continue,
                        Bound::Inclusive(t) | Bound::Exclusive(t) => t,
                    };
                    let frac = (t * scale).rem_euclid(1.0);
                    assert!((frac - 0.5).abs() < 1e-6, "{name}: {} bound {t}", c.attr());
                }
            }
        }
    }
}

#[test]
fn zipf_small_cases() {
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    for _ in 0..1000 {
        assert_eq!(zipf_sample(1.0, 1, &mut rng), 1);
    }
    let n = 100_000;
    let ones = (0..n).filter(|_| zipf_sample(1.0, 2, &mut rng) == 1).count();
    let p = ones as f64 / n as f64;
    assert!((p - 2.0 / 3.0).abs() < 0.02, "{p}");
}

#[test]
fn zipf_matches_analytic_distribution() {
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    let (n, draws) = (100usize, 1_000_000usize);
    let mut counts = vec![0usize; n + 1];
    for _ in 0..draws {
        let k = zipf_sample(1.0, n, &mut rng);
        assert!((1..=n).contains(&k));
        counts[k] += 1;
    }
    let h: f64 = (1..=n).map(|k| 1.0 / k as f64).sum();
    let tv: f64 = (1..=n)
        .map(|k| (counts[k] as f64 / draws as f64 - 1.0 / (k as f64 * h)).abs())
        .sum::<f64>()
        / 2.0;
    assert!(tv < 0.02, "total variation {tv}");
}

#[test]
fn zipf_on_symbol_skews_symbol_choice() {
    let count_top = |name: &str| {
        let mut h: HashMap<String, usize> = HashMap::new();
        for e in gen_entries(&spec(name), 5000) {
            if let Some(c) = e.sub.get("symbol") {
                *h.entry(c.to_string()).or_default() += 1;
            }
        }
        h.values().copied().max().unwrap()
    };
    assert!(count_top("e80a1z100") > 5 * count_top("e80a1"));
}

#[test]
fn every_workload_is_non_trivial() {
    for s in WorkloadSpec::all(7) {
        let subs: Vec<_> = gen_entries(&s, 10_000).into_iter().map(|e| e.sub).collect();
        let pubs = gen_publications(&s, 1000);
        let f = matched_fraction(&subs, &pubs);
        assert!((0.01..=0.90).contains(&f), "{}: {f}", s.name);
    }
}
