use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{MetricsRecord, TopicAssignment};

/// Seed-averaged final-round metrics for one (assignment, data size, topic).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub assignment: TopicAssignment,
    pub data_per_node: usize,
    pub topic: u32,
    pub seeds: usize,
    pub accuracy: f64,
    pub f1: f64,
    pub dissemination_ms: f64,
}

/// Reads `metrics.jsonl` records from a file, or from every such file
/// below a directory.
pub fn read_records(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut out = Vec::new();
    if path.is_dir() {
        let mut entries: Vec<_> = fs::read_dir(path)?.collect::<std::io::Result<_>>()?;
        entries.sort_by_key(|e| e.path());
        for e in entries {
            let p = e.path();
            if p.is_dir() || p.file_name().is_some_and(|n| n == "metrics.jsonl") {
                out.extend(read_records(&p)?);
            }
        }
        return Ok(out);
    }
    let reader = BufReader::new(fs::File::open(path)?);
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec =
            serde_json::from_str(&line).map_err(|e| Error::invalid(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Keeps each scenario's last round and averages over seeds.
pub fn summarize(records: &[MetricsRecord]) -> Vec<SummaryRow> {
    let mut last: BTreeMap<&str, u64> = BTreeMap::new();
    for r in records {
        let e = last.entry(&r.scenario).or_insert(r.round);
        *e = (*e).max(r.round);
    }
    let mut groups: BTreeMap<(TopicAssignment, usize, u32), Vec<&MetricsRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| last[r.scenario.as_str()] == r.round) {
        groups
            .entry((r.assignment, r.data_per_node, r.topic))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((assignment, data_per_node, topic), rs)| {
            let n = rs.len() as f64;
            SummaryRow {
                assignment,
                data_per_node,
                topic,
                seeds: rs.len(),
                accuracy: rs.iter().map(|r| r.accuracy).sum::<f64>() / n,
                f1: rs.iter().map(|r| r.f1).sum::<f64>() / n,
                dissemination_ms: rs.iter().map(|r| r.dissemination_ms).sum::<f64>() / n,
            }
        })
        .collect()
}

fn assignment_name(a: TopicAssignment) -> &'static str {
    match a {
        TopicAssignment::SingleTopicPerTree => "single_topic_per_tree",
        TopicAssignment::Mixed => "mixed",
    }
}

pub fn write_table<W: Write>(rows: &[SummaryRow], mut out: W) -> Result<()> {
    writeln!(
        out,
        "{:<22} {:>8} {:>5} {:>5} {:>8} {:>8} {:>10}",
        "assignment", "data", "topic", "seeds", "acc", "f1", "dissem_ms"
    )?;
    for r in rows {
        writeln!(
            out,
            "{:<22} {:>8} {:>5} {:>5} {:>8.4} {:>8.4} {:>10.2}",
            assignment_name(r.assignment),
            r.data_per_node,
            r.topic,
            r.seeds,
            r.accuracy,
            r.f1,
            r.dissemination_ms
        )?;
    }
    Ok(())
}

pub fn write_csv<W: Write>(rows: &[SummaryRow], mut out: W) -> Result<()> {
    writeln!(out, "assignment,data_per_node,topic,seeds,accuracy,f1,dissemination_ms")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            assignment_name(r.assignment),
            r.data_per_node,
            r.topic,
            r.seeds,
            r.accuracy,
            r.f1,
            r.dissemination_ms
        )?;
    }
    Ok(())
}
