use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fedagg::{aggregate_topology, AggMode, AggregateMessage, Topology};
use crate::model::ModelParams;
use crate::overlay::{NodeId, Overlay};
use crate::tree::GroupId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteAudit {
    pub nodes: usize,
    pub lookups: usize,
    /// Lookups that ended at the numerically closest live node.
    pub correct: usize,
    pub max_hops: usize,
    pub mean_hops: f64,
    /// `ceil(log16 N) + 1`.
    pub hop_bound: usize,
    pub hop_histogram: BTreeMap<usize, usize>,
}

impl RouteAudit {
    pub fn passed(&self) -> bool {
        self.correct == self.lookups && self.max_hops <= self.hop_bound
    }
}

pub fn hop_bound(nodes: usize) -> usize {
    let mut digits = 0;
    let mut reach = 1u128;
    while reach < nodes as u128 {
        reach *= 16;
        digits += 1;
    }
    digits + 1
}

/// Closest id on the ring by looking only at the sorted neighbours of `key`.
fn ring_closest(sorted: &[NodeId], key: NodeId) -> NodeId {
    let i = sorted.partition_point(|id| id.0 < key.0);
    let after = sorted[i % sorted.len()];
    let before = sorted[(i + sorted.len() - 1) % sorted.len()];
    let dist = |id: NodeId| {
        let d = id.0.wrapping_sub(key.0);
        d.min(d.wrapping_neg())
    };
    if (dist(after), after) <= (dist(before), before) {
        after
    } else {
        before
    }
}

/// Routes `lookups` random keys from random live sources over a seeded
/// overlay and compares every destination with a sorted-ring scan.
pub fn route_check(nodes: usize, lookups: usize, seed: u64) -> Result<RouteAudit> {
    if nodes == 0 {
        return Err(Error::invalid("route check needs at least one node"));
    }
    let mut overlay = Overlay::with_random_nodes(nodes, seed);
    let ids = overlay.live_ids();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0a0d17);
    let mut audit = RouteAudit {
        nodes,
        lookups,
        correct: 0,
        max_hops: 0,
        mean_hops: 0.0,
        hop_bound: hop_bound(nodes),
        hop_histogram: BTreeMap::new(),
    };
    let mut total = 0usize;
    for _ in 0..lookups {
        let source = ids[rng.random_range(0..ids.len())];
        let key = NodeId::random(&mut rng);
        let trace = overlay.route(source, key)?;
        if trace.destination == ring_closest(&ids, key) {
            audit.correct += 1;
        }
        let h = trace.hop_count();
        total += h;
        audit.max_hops = audit.max_hops.max(h);
        *audit.hop_histogram.entry(h).or_default() += 1;
    }
    if lookups > 0 {
        audit.mean_hops = total as f64 / lookups as f64;
    }
    Ok(audit)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggAudit {
    pub shapes: usize,
    pub sets: usize,
    /// Largest elementwise gap between weighted tree aggregation and the flat mean.
    pub weighted_max_err: f64,
    /// Largest elementwise gap between per-level aggregation and the recursive average.
    pub per_level_max_err: f64,
}

impl AggAudit {
    pub fn passed(&self) -> bool {
        self.weighted_max_err <= 1e-9 && self.per_level_max_err <= 1e-12
    }
}

fn recursive_average(
    node: NodeId,
    kids: &BTreeMap<NodeId, Vec<NodeId>>,
    values: &BTreeMap<NodeId, Vec<f64>>,
) -> Option<Vec<f64>> {
    let Some(cs) = kids.get(&node).filter(|c| !c.is_empty()) else {
        return values.get(&node).cloned();
    };
    let parts: Vec<Vec<f64>> = cs.iter().filter_map(|c| recursive_average(*c, kids, values)).collect();
    let first = parts.first()?;
    Some(
        (0..first.len())
            .map(|i| parts.iter().map(|p| p[i]).sum::<f64>() / parts.len() as f64)
            .collect(),
    )
}

/// `shapes` random trees of up to `max_nodes` nodes, each aggregated over
/// `sets` random leaf delta sets in both modes.
pub fn agg_check(shapes: usize, sets: usize, max_nodes: usize, seed: u64) -> Result<AggAudit> {
    if max_nodes < 2 {
        return Err(Error::invalid("aggregation check needs trees of at least 2 nodes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let group = GroupId(NodeId(0xa66));
    let mut audit = AggAudit {
        shapes,
        sets,
        weighted_max_err: 0.0,
        per_level_max_err: 0.0,
    };
    for _ in 0..shapes {
        let n = rng.random_range(2..=max_nodes);
        let ids: Vec<NodeId> = (1..=n as u128).map(NodeId).collect();
        let mut topo = Topology::new(ids[0]);
        let mut kids: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        for i in 1..n {
            let p = ids[rng.random_range(0..i)];
            topo.add_edge(p, ids[i])?;
            kids.entry(p).or_default().push(ids[i]);
        }
        let leaves: Vec<NodeId> = ids.iter().copied().filter(|id| !kids.contains_key(id)).collect();
        for _ in 0..sets {
            let mut contributions = BTreeMap::new();
            let mut values = BTreeMap::new();
            for &leaf in &leaves {
                let delta = ModelParams::random(2, 4, 10.0, &mut rng);
                values.insert(leaf, delta.values().collect::<Vec<f64>>());
                contributions.insert(leaf, AggregateMessage::new(group, 0, delta, 1)?);
            }
            let len = values[&leaves[0]].len();
            let flat: Vec<f64> = (0..len)
                .map(|i| values.values().map(|v| v[i]).sum::<f64>() / leaves.len() as f64)
                .collect();
            let recursive = recursive_average(ids[0], &kids, &values).expect("tree has leaves");
            let weighted = aggregate_topology(&topo, &contributions, AggMode::Weighted, None)?
                .ok_or_else(|| Error::invalid("no aggregate reached the root"))?;
            let per_level = aggregate_topology(&topo, &contributions, AggMode::Paper, None)?
                .ok_or_else(|| Error::invalid("no aggregate reached the root"))?;
            for ((w, p), (f, r)) in weighted
                .payload
                .values()
                .zip(per_level.payload.values())
                .zip(flat.iter().zip(&recursive))
            {
                audit.weighted_max_err = audit.weighted_max_err.max((w - f).abs());
                audit.per_level_max_err = audit.per_level_max_err.max((p - r).abs());
            }
        }
    }
    Ok(audit)
}
