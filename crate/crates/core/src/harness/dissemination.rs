use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::message::Message;
use crate::overlay::Overlay;
use crate::simnet::{derive_seed, LinkModel, Sim, SimTime};
use crate::tree::{multicast_timed, GroupTree, TreeConfig};

/// `nodes` overlay nodes split round-robin into `trees` disjoint trees; the
/// first `concurrent` of them multicast a `bytes` payload at the same time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisseminationSpec {
    pub nodes: usize,
    pub trees: usize,
    pub concurrent: usize,
    pub fanout: usize,
    /// Let members already on a join path adopt the joiner.
    #[serde(default = "yes")]
    pub intercept: bool,
    pub bytes: u64,
    pub seed: u64,
    #[serde(default)]
    pub link: LinkModel,
}

fn yes() -> bool {
    true
}

impl DisseminationSpec {
    pub fn new(nodes: usize, bytes: u64, seed: u64) -> Self {
        Self {
            nodes,
            trees: 1,
            concurrent: 1,
            fanout: 16,
            intercept: true,
            bytes,
            seed,
            link: LinkModel::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trees == 0 || self.nodes < self.trees {
            return Err(Error::invalid("need at least one node per tree"));
        }
        if self.concurrent == 0 || self.concurrent > self.trees {
            return Err(Error::invalid("concurrent must be in 1..=trees"));
        }
        self.link.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisseminationRow {
    pub nodes: usize,
    pub trees: usize,
    pub concurrent: usize,
    pub bytes: u64,
    pub seed: u64,
    /// Depth of each multicasting tree.
    pub depth: Vec<usize>,
    pub completion_ms: Vec<SimTime>,
}

pub fn measure_dissemination(spec: &DisseminationSpec) -> Result<DisseminationRow> {
    spec.validate()?;
    let mut overlay = Overlay::with_random_nodes(spec.nodes, spec.seed);
    let ids = overlay.live_ids();
    let config = TreeConfig {
        fanout_cap: spec.fanout,
        intercept: spec.intercept,
        ..TreeConfig::default()
    };
    let mut trees = Vec::with_capacity(spec.trees);
    for k in 0..spec.trees {
        let members: Vec<_> = ids.iter().skip(k).step_by(spec.trees).copied().collect();
        let mut tree = GroupTree::create(&mut overlay, members[0], &format!("dissemination-{k}"), config.clone())?;
        for &m in &members {
            if !tree.contains(m) {
                tree.join(&mut overlay, m)?;
            }
        }
        trees.push(tree);
    }
    let active: Vec<&GroupTree> = trees.iter().take(spec.concurrent).collect();
    let mut sim: Sim<Message> = Sim::new(derive_seed(spec.seed, &[0xd155]), spec.link);
    let reports = multicast_timed(&active, &overlay, &mut sim, spec.bytes, 0);
    Ok(DisseminationRow {
        nodes: spec.nodes,
        trees: spec.trees,
        concurrent: spec.concurrent,
        bytes: spec.bytes,
        seed: spec.seed,
        depth: active.iter().map(|t| t.stats(&overlay).depth).collect(),
        completion_ms: reports.iter().map(|r| r.completion).collect(),
    })
}
