//! Prefix-routed structured overlay.
//!
//! Every node owns a [`RoutingTable`] and a [`LeafSet`]. A message for a key
//! is forwarded greedily: inside the leaf-set range it goes straight to the
//! numerically closest leaf, otherwise to the routing-table peer that extends
//! the shared prefix by one digit, and failing that to any known peer that
//! is numerically closer without shortening the prefix.
//!
//! Leaf sets are repaired eagerly after failures. Routing-table cells that
//! point at dead peers are replaced lazily, the first time a route trips
//! over them.

mod id;
mod leaf_set;
mod routing_table;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::seq::IteratorRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use id::{closest, id_from_name, shared_prefix_len, NodeId, DIGITS, DIGIT_BITS, RADIX};
pub use leaf_set::{LeafSet, DEFAULT_HALF};
pub use routing_table::{PeerEntry, RoutingTable};

use crate::error::{Error, Result};

/// Routes longer than this indicate corrupted routing state.
pub const MAX_HOPS: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OverlayConfig {
    /// Leaf-set peers per side.
    pub leaf_set_half: usize,
    /// Seeds bootstrap-node selection during joins.
    pub seed: u64,
}

impl Default for OverlayConfig {
    fn default() -> Self {
        Self {
            leaf_set_half: DEFAULT_HALF,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub id: NodeId,
    pub addr: u32,
    pub routing_table: RoutingTable,
    pub leaf_set: LeafSet,
    pub alive: bool,
}

impl Node {
    fn new(id: NodeId, addr: u32, half: usize) -> Self {
        Self {
            id,
            addr,
            routing_table: RoutingTable::new(id),
            leaf_set: LeafSet::new(id, half),
            alive: true,
        }
    }

    fn known_peers(&self) -> impl Iterator<Item = &PeerEntry> {
        self.leaf_set
            .smaller()
            .iter()
            .chain(self.leaf_set.larger())
            .chain(self.routing_table.entries())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NextHop {
    Deliver,
    Forward(NodeId),
}

/// The path a message took: `hops` lists every node it was forwarded to,
/// so the last element (if any) is the destination.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HopTrace {
    pub source: NodeId,
    pub key: NodeId,
    pub hops: Vec<NodeId>,
    pub destination: NodeId,
}

impl HopTrace {
    pub fn hop_count(&self) -> usize {
        self.hops.len()
    }

    /// Writes one JSON object per line.
    pub fn write_lines<W: Write>(traces: &[HopTrace], mut out: W) -> Result<()> {
        for t in traces {
            serde_json::to_writer(&mut out, t).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Overlay {
    config: OverlayConfig,
    nodes: BTreeMap<NodeId, Node>,
    rng: ChaCha8Rng,
    next_addr: u32,
    clock: u64,
}

impl Overlay {
    pub fn new(config: OverlayConfig) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Self {
            config,
            nodes: BTreeMap::new(),
            rng,
            next_addr: 0,
            clock: 0,
        }
    }

    /// Joins `n` nodes with ids drawn from a generator seeded by `seed`.
    pub fn with_random_nodes(n: usize, seed: u64) -> Self {
        let mut overlay = Overlay::new(OverlayConfig {
            seed,
            ..OverlayConfig::default()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        while overlay.len() < n {
            let id = NodeId::random(&mut rng);
            if !overlay.contains(id) {
                overlay.join(id).expect("fresh id");
            }
        }
        overlay
    }

    pub fn config(&self) -> &OverlayConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.nodes.contains_key(&id)
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.get(&id)
    }

    pub fn is_alive(&self, id: NodeId) -> bool {
        self.nodes.get(&id).is_some_and(|n| n.alive)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.values()
    }

    /// Live node ids in ascending order.
    pub fn live_ids(&self) -> Vec<NodeId> {
        self.nodes.values().filter(|n| n.alive).map(|n| n.id).collect()
    }

    fn entry(&mut self, id: NodeId) -> PeerEntry {
        self.clock += 1;
        let addr = self.nodes[&id].addr;
        PeerEntry {
            id,
            addr,
            last_seen: self.clock,
        }
    }

    /// Adds a node, bootstrapping its state from the nodes on the path of a
    /// join message keyed by its own id.
    pub fn join(&mut self, id: NodeId) -> Result<()> {
        if self.nodes.contains_key(&id) {
            return Err(Error::invalid(format!("node {id} already present")));
        }
        let addr = self.next_addr;
        self.next_addr += 1;
        self.admit(Node::new(id, addr, self.config.leaf_set_half))
    }

    /// Brings a failed node back with fresh state.
    pub fn rejoin(&mut self, id: NodeId) -> Result<()> {
        let node = self
            .nodes
            .remove(&id)
            .ok_or_else(|| Error::NotFound(format!("node {id}")))?;
        if node.alive {
            self.nodes.insert(id, node);
            return Err(Error::invalid(format!("node {id} is alive")));
        }
        self.admit(Node::new(id, node.addr, self.config.leaf_set_half))
    }

    fn admit(&mut self, mut node: Node) -> Result<()> {
        let id = node.id;
        let bootstrap = self
            .nodes
            .values()
            .filter(|n| n.alive)
            .map(|n| n.id)
            .choose(&mut self.rng);
        let Some(bootstrap) = bootstrap else {
            self.nodes.insert(id, node);
            return Ok(());
        };

        let trace = self.route(bootstrap, id)?;
        let mut path = vec![bootstrap];
        path.extend(&trace.hops);

        // Rows 0..=p of a path node sharing p digits with the newcomer are
        // valid rows for the newcomer too.
        let mut learned: Vec<PeerEntry> = Vec::new();
        for &hop in &path {
            let peer = &self.nodes[&hop];
            let p = peer.id.shared_prefix_len(id).min(DIGITS - 1);
            learned.extend((0..=p).flat_map(|r| peer.routing_table.row(r).copied()));
            learned.extend(peer.leaf_set.smaller().iter().chain(peer.leaf_set.larger()).copied());
            learned.push(self.entry(hop));
        }
        let closest = trace.destination;
        let nearest = &self.nodes[&closest];
        let mut leaves: Vec<PeerEntry> = nearest.leaf_set.members();
        leaves.push(self.entry(closest));

        for p in learned.iter().chain(&leaves) {
            if self.is_alive(p.id) {
                node.routing_table.insert(*p);
            }
        }
        for p in &leaves {
            if self.is_alive(p.id) {
                node.leaf_set.insert(*p);
            }
        }

        let announce: BTreeSet<NodeId> = node
            .leaf_set
            .members()
            .iter()
            .chain(node.routing_table.entries())
            .map(|p| p.id)
            .collect();
        self.nodes.insert(id, node);
        let me = self.entry(id);
        for peer in announce {
            let n = self.nodes.get_mut(&peer).expect("announced peer exists");
            n.leaf_set.insert(me);
            n.routing_table.insert(me);
        }
        Ok(())
    }

    /// Marks a node dead. Its peers notice through [`Overlay::repair`] or
    /// when a route next tries to use it.
    pub fn fail(&mut self, id: NodeId) -> Result<()> {
        let node = self
            .nodes
            .get_mut(&id)
            .ok_or_else(|| Error::NotFound(format!("node {id}")))?;
        if !node.alive {
            return Err(Error::invalid(format!("node {id} is already dead")));
        }
        node.alive = false;
        Ok(())
    }

    /// Eager leaf-set repair: every live node drops dead leaves and refills
    /// from the leaf sets of its live leaves until nothing changes.
    /// Returns the number of leaf sets rewritten.
    pub fn repair(&mut self) -> usize {
        let mut rewritten = 0;
        loop {
            let ids: Vec<NodeId> = self.live_ids();
            let mut changed = 0;
            for id in ids {
                if self.repair_leaf_set(id, false) {
                    changed += 1;
                }
            }
            if changed == 0 {
                break;
            }
            rewritten += changed;
        }
        rewritten
    }

    /// Rebuilds one node's leaf set from its live leaves and theirs.
    /// With `force` unset nothing happens unless a dead leaf is present or a
    /// neighbour knows someone nearer.
    fn repair_leaf_set(&mut self, id: NodeId, force: bool) -> bool {
        let node = &self.nodes[&id];
        let has_dead = node.leaf_set.members().iter().any(|p| !self.is_alive(p.id));
        let live_leaves: Vec<PeerEntry> = node
            .leaf_set
            .members()
            .into_iter()
            .filter(|p| self.is_alive(p.id))
            .collect();
        let mut candidates = live_leaves.clone();
        for leaf in &live_leaves {
            let peer = &self.nodes[&leaf.id];
            candidates.extend(peer.leaf_set.members().into_iter().filter(|p| self.is_alive(p.id)));
        }
        if !has_dead && !force {
            // only rewrite if a neighbour knows somebody we should hold
            let mut probe = node.leaf_set.clone();
            let mut grew = false;
            for c in &candidates {
                if c.id != id && probe.insert(*c) {
                    grew = true;
                }
            }
            if !grew {
                return false;
            }
        }
        let before = node.leaf_set.ids();
        let node = self.nodes.get_mut(&id).expect("present");
        node.leaf_set.rebuild(candidates.into_iter().filter(|p| p.id != id));
        node.leaf_set.ids() != before || has_dead
    }

    /// One greedy routing decision made with `local`'s state only.
    pub fn next_hop(&self, local: NodeId, key: NodeId) -> Result<NextHop> {
        let node = self
            .nodes
            .get(&local)
            .ok_or_else(|| Error::NotFound(format!("node {local}")))?;
        if key == local {
            return Ok(NextHop::Deliver);
        }
        if node.leaf_set.covers(key) {
            let best = closest(key, node.leaf_set.ids().into_iter().chain([local])).unwrap_or(local);
            return Ok(if best == local {
                NextHop::Deliver
            } else {
                NextHop::Forward(best)
            });
        }
        let row = local.shared_prefix_len(key);
        if let Some(peer) = node.routing_table.get(row, key.digit(row)) {
            return Ok(NextHop::Forward(peer.id));
        }
        let fallback = node
            .known_peers()
            .map(|p| p.id)
            .filter(|&p| p.shared_prefix_len(key) >= row && key.prefers(p, local))
            .min_by_key(|&p| (key.distance(p), p));
        Ok(fallback.map_or(NextHop::Deliver, NextHop::Forward))
    }

    /// Routes a message for `key` starting at `source`.
    pub fn route(&mut self, source: NodeId, key: NodeId) -> Result<HopTrace> {
        if !self.is_alive(source) {
            return Err(Error::invalid(format!("source {source} is not a live node")));
        }
        let mut hops = Vec::new();
        let mut current = source;
        let mut detours = 0usize;
        loop {
            match self.next_hop(current, key)? {
                NextHop::Deliver => break,
                NextHop::Forward(next) if !self.is_alive(next) => {
                    detours += 1;
                    if detours > MAX_HOPS * 4 {
                        return Err(Error::protocol("could not route around dead peers"));
                    }
                    self.drop_dead_peer(current, next);
                }
                NextHop::Forward(next) => {
                    hops.push(next);
                    current = next;
                    if hops.len() > MAX_HOPS {
                        return Err(Error::protocol(format!(
                            "routing loop toward {key}: more than {MAX_HOPS} hops"
                        )));
                    }
                }
            }
        }
        Ok(HopTrace {
            source,
            key,
            hops,
            destination: current,
        })
    }

    /// `local` discovered `dead` is unreachable: repair its leaf set and
    /// patch the routing-table cell from peers in the same or next row.
    fn drop_dead_peer(&mut self, local: NodeId, dead: NodeId) {
        let node = self.nodes.get_mut(&local).expect("present");
        let in_leaf = node.leaf_set.contains(dead);
        let cell = node.routing_table.cell_for(dead);
        let was_in_table = node.routing_table.remove(dead);
        node.leaf_set.remove(dead);
        if in_leaf {
            self.repair_leaf_set(local, true);
        }
        if let (true, Some((row, col))) = (was_in_table, cell) {
            let replacement = self.find_replacement(local, row, col);
            self.nodes
                .get_mut(&local)
                .expect("present")
                .routing_table
                .set(row, col, replacement);
        }
    }

    fn find_replacement(&self, local: NodeId, row: usize, col: usize) -> Option<PeerEntry> {
        let node = &self.nodes[&local];
        let fits = |p: &PeerEntry| self.is_alive(p.id) && node.routing_table.cell_for(p.id) == Some((row, col));
        if let Some(p) = node.leaf_set.members().into_iter().find(|p| fits(p)) {
            return Some(p);
        }
        let askable: Vec<NodeId> = node
            .routing_table
            .row(row)
            .chain(node.routing_table.row(row + 1))
            .map(|p| p.id)
            .filter(|&p| self.is_alive(p))
            .collect();
        askable.into_iter().find_map(|peer| {
            let t = &self.nodes[&peer].routing_table;
            t.entries().find(|p| fits(p)).copied()
        })
    }

    /// Cells anywhere in the overlay that violate their prefix constraint.
    pub fn misplaced_entries(&self) -> usize {
        self.nodes.values().map(|n| n.routing_table.misplaced().len()).sum()
    }
}
