use super::id::NodeId;
use super::routing_table::PeerEntry;

/// Default number of peers per side.
pub const DEFAULT_HALF: usize = 12;

/// The numerically nearest peers on each side of the owner.
///
/// `smaller` holds counter-clockwise neighbours ordered nearest first,
/// `larger` clockwise neighbours ordered nearest first. When the overlay has
/// fewer than `half` other nodes the same peer appears on both sides.
#[derive(Clone, Debug)]
pub struct LeafSet {
    owner: NodeId,
    half: usize,
    smaller: Vec<PeerEntry>,
    larger: Vec<PeerEntry>,
}

impl LeafSet {
    pub fn new(owner: NodeId, half: usize) -> Self {
        assert!(half >= 1, "leaf set needs at least one peer per side");
        Self {
            owner,
            half,
            smaller: Vec::with_capacity(half),
            larger: Vec::with_capacity(half),
        }
    }

    pub fn owner(&self) -> NodeId {
        self.owner
    }

    pub fn half(&self) -> usize {
        self.half
    }

    pub fn smaller(&self) -> &[PeerEntry] {
        &self.smaller
    }

    pub fn larger(&self) -> &[PeerEntry] {
        &self.larger
    }

    /// Offers `peer` to both sides. Returns whether either side changed.
    pub fn insert(&mut self, peer: PeerEntry) -> bool {
        if peer.id == self.owner {
            return false;
        }
        let owner = self.owner;
        let a = insert_side(&mut self.smaller, self.half, peer, |id| owner.ccw_distance(id));
        let b = insert_side(&mut self.larger, self.half, peer, |id| owner.cw_distance(id));
        a || b
    }

    pub fn remove(&mut self, id: NodeId) -> bool {
        let before = self.smaller.len() + self.larger.len();
        self.smaller.retain(|p| p.id != id);
        self.larger.retain(|p| p.id != id);
        before != self.smaller.len() + self.larger.len()
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.smaller.iter().chain(&self.larger).any(|p| p.id == id)
    }

    /// Distinct members sorted by id.
    pub fn members(&self) -> Vec<PeerEntry> {
        let mut all: Vec<PeerEntry> = self.smaller.iter().chain(&self.larger).copied().collect();
        all.sort_by_key(|p| p.id);
        all.dedup_by_key(|p| p.id);
        all
    }

    pub fn ids(&self) -> Vec<NodeId> {
        self.members().into_iter().map(|p| p.id).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.smaller.is_empty() && self.larger.is_empty()
    }

    /// Whether a side is short, meaning the owner knows every node there is.
    pub fn is_complete_ring(&self) -> bool {
        self.smaller.len() < self.half || self.larger.len() < self.half
    }

    /// True when `key` falls between the farthest members on either side.
    pub fn covers(&self, key: NodeId) -> bool {
        if self.is_complete_ring() {
            return true;
        }
        let ccw_edge = self.owner.ccw_distance(self.smaller[self.smaller.len() - 1].id);
        let cw_edge = self.owner.cw_distance(self.larger[self.larger.len() - 1].id);
        self.owner.ccw_distance(key) <= ccw_edge || self.owner.cw_distance(key) <= cw_edge
    }

    /// Replaces the contents with the nearest `half` candidates per side.
    pub fn rebuild<I: IntoIterator<Item = PeerEntry>>(&mut self, candidates: I) {
        self.smaller.clear();
        self.larger.clear();
        for p in candidates {
            self.insert(p);
        }
    }
}

fn insert_side(side: &mut Vec<PeerEntry>, half: usize, peer: PeerEntry, dist: impl Fn(NodeId) -> u128) -> bool {
    let d = dist(peer.id);
    match side.binary_search_by_key(&d, |p| dist(p.id)) {
        Ok(i) => {
            side[i].last_seen = side[i].last_seen.max(peer.last_seen);
            false
        }
        Err(i) if i < half => {
            side.insert(i, peer);
            side.truncate(half);
            true
        }
        Err(_) => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn peer(v: u128) -> PeerEntry {
        PeerEntry {
            id: NodeId(v),
            addr: 0,
            last_seen: 0,
        }
    }

    #[test]
    fn keeps_nearest_per_side() {
        let mut ls = LeafSet::new(NodeId(100), 2);
        for v in [90, 95, 99, 101, 105, 110, 50] {
            ls.insert(peer(v));
        }
        let s: Vec<u128> = ls.smaller().iter().map(|p| p.id.0).collect();
        let l: Vec<u128> = ls.larger().iter().map(|p| p.id.0).collect();
        assert_eq!(s, vec![99, 95]);
        assert_eq!(l, vec![101, 105]);
        assert!(ls.covers(NodeId(96)));
        assert!(ls.covers(NodeId(105)));
        assert!(!ls.covers(NodeId(106)));
        assert!(!ls.covers(NodeId(94)));
    }

    #[test]
    fn wraps_around_zero() {
        let mut ls = LeafSet::new(NodeId(1), 1);
        ls.insert(peer(u128::MAX));
        ls.insert(peer(3));
        ls.insert(peer(10));
        assert_eq!(ls.smaller()[0].id, NodeId(u128::MAX));
        assert_eq!(ls.larger()[0].id, NodeId(3));
        assert!(ls.covers(NodeId(0)));
        assert!(!ls.covers(NodeId(5)));
    }

    #[test]
    fn small_ring_is_complete() {
        let mut ls = LeafSet::new(NodeId(1), 12);
        ls.insert(peer(7));
        assert!(ls.is_complete_ring());
        assert!(ls.covers(NodeId(1 << 100)));
        assert_eq!(ls.members().len(), 1);
        assert!(ls.remove(NodeId(7)));
        assert!(ls.is_empty());
    }
}
