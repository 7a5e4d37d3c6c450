use std::io::{Read, Write};

use scbr_core::workload::gen_entries;
use scbr_core::ContainmentIndex;
use serde::{Deserialize, Serialize};

use crate::BenchError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsRow {
    pub workload: String,
    pub db_size: usize,
    pub nodes: usize,
    pub roots: usize,
    pub max_depth: usize,
    pub footprint_bytes: usize,
}

/// Build the index at each size and report its shape.
pub fn report_stats(workload: &str, sizes: &[usize], seed: u64) -> Result<Vec<StatsRow>, BenchError> {
    let spec = crate::workload(workload, seed)?;
    Ok(sizes
        .iter()
        .map(|&n| {
            let mut index = ContainmentIndex::new();
            for e in gen_entries(&spec, n) {
                index.insert(&e.sub, e.client, e.sub_id).expect("generated subscriptions are valid");
            }
            let st = index.stats();
            StatsRow {
                workload: workload.to_string(),
                db_size: n,
                nodes: st.node_count,
                roots: st.root_count,
                max_depth: st.max_depth,
                footprint_bytes: st.footprint_bytes,
            }
        })
        .collect())
}

pub fn write_stats_csv<W: Write>(w: W, rows: &[StatsRow]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_stats_csv<R: Read>(r: R) -> csv::Result<Vec<StatsRow>> {
    csv::Reader::from_reader(r).deserialize().collect()
}
