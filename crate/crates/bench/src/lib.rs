//! Fixtures shared by the benchmarks.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use treefed_core::fedagg::{AggregateMessage, Topology};
use treefed_core::model::{Example, LocalDataset, ModelParams};
use treefed_core::{GroupId, NodeId};

/// A random tree over `n` nodes with one unit-weight message per leaf.
pub fn random_aggregation(n: usize, hidden: usize, seed: u64) -> (Topology, BTreeMap<NodeId, AggregateMessage>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut topo = Topology::new(NodeId(0));
    for i in 1..n as u128 {
        topo.add_edge(NodeId(rng.random_range(0..i)), NodeId(i))
            .expect("fresh child");
    }
    let group = GroupId(NodeId(1));
    let msgs = topo
        .leaves()
        .into_iter()
        .map(|id| {
            let p = ModelParams::random(2, hidden, 1.0, &mut rng);
            (id, AggregateMessage::new(group, 0, p, 1).expect("finite"))
        })
        .collect();
    (topo, msgs)
}

/// Two noisy clusters along the first axis.
pub fn toy_dataset(n: usize, hidden: usize, seed: u64) -> LocalDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples = (0..n)
        .map(|_| {
            let y = rng.random_range(0..2usize);
            let x = (0..hidden)
                .map(|k| if k == 0 { 2.0 * y as f64 - 1.0 } else { 0.0 } + rng.random_range(-1.0..1.0))
                .collect();
            Example { x, y }
        })
        .collect();
    LocalDataset::new(examples, 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_have_requested_shape() {
        let (topo, msgs) = random_aggregation(50, 8, 1);
        assert_eq!(topo.len(), 50);
        assert_eq!(msgs.len(), topo.leaves().len());
        assert_eq!(toy_dataset(30, 4, 2).len(), 30);
    }
}
