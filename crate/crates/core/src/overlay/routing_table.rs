use serde::{Deserialize, Serialize};

use super::id::{NodeId, DIGITS, RADIX};

/// What a node knows about one of its peers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeerEntry {
    pub id: NodeId,
    /// Simulated network address.
    pub addr: u32,
    /// Logical time the entry was last refreshed.
    pub last_seen: u64,
}

type Row = [Option<PeerEntry>; RADIX];

/// Prefix routing table: row `r` holds peers sharing exactly `r` leading
/// digits with the owner, column `c` the peer whose digit `r` equals `c`.
///
/// Rows are allocated on demand; most of the 32 rows stay empty in any
/// realistically sized overlay.
#[derive(Clone, Debug)]
pub struct RoutingTable {
    owner: NodeId,
    rows: Vec<Row>,
}

impl RoutingTable {
    pub fn new(owner: NodeId) -> Self {
        Self {
            owner,
            rows: Vec::new(),
        }
    }

    pub fn owner(&self) -> NodeId {
        self.owner
    }

    /// The cell a peer belongs in, or `None` for the owner itself.
    pub fn cell_for(&self, id: NodeId) -> Option<(usize, usize)> {
        let row = self.owner.shared_prefix_len(id);
        (row < DIGITS).then(|| (row, id.digit(row)))
    }

    pub fn get(&self, row: usize, col: usize) -> Option<&PeerEntry> {
        self.rows.get(row).and_then(|r| r[col].as_ref())
    }

    /// Inserts `peer` if its cell is empty. Returns whether it was stored.
    pub fn insert(&mut self, peer: PeerEntry) -> bool {
        let Some((row, col)) = self.cell_for(peer.id) else {
            return false;
        };
        if self.rows.len() <= row {
            self.rows.resize(row + 1, [None; RADIX]);
        }
        let cell = &mut self.rows[row][col];
        match cell {
            Some(existing) if existing.id == peer.id => {
                existing.last_seen = existing.last_seen.max(peer.last_seen);
                false
            }
            Some(_) => false,
            None => {
                *cell = Some(peer);
                true
            }
        }
    }

    /// Overwrites cell `(row, col)`. The caller guarantees `peer` fits it.
    pub fn set(&mut self, row: usize, col: usize, peer: Option<PeerEntry>) {
        if let Some(p) = &peer {
            debug_assert_eq!(self.cell_for(p.id), Some((row, col)));
        }
        if self.rows.len() <= row {
            if peer.is_none() {
                return;
            }
            self.rows.resize(row + 1, [None; RADIX]);
        }
        self.rows[row][col] = peer;
    }

    pub fn remove(&mut self, id: NodeId) -> bool {
        if let Some((row, col)) = self.cell_for(id) {
            if let Some(cell) = self.rows.get_mut(row).map(|r| &mut r[col]) {
                if cell.is_some_and(|p| p.id == id) {
                    *cell = None;
                    return true;
                }
            }
        }
        false
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.cell_for(id)
            .and_then(|(r, c)| self.get(r, c))
            .is_some_and(|p| p.id == id)
    }

    pub fn row(&self, row: usize) -> impl Iterator<Item = &PeerEntry> {
        self.rows.get(row).into_iter().flat_map(|r| r.iter().flatten())
    }

    pub fn entries(&self) -> impl Iterator<Item = &PeerEntry> {
        self.rows.iter().flat_map(|r| r.iter().flatten())
    }

    pub fn len(&self) -> usize {
        self.entries().count()
    }

    pub fn is_empty(&self) -> bool {
        self.entries().next().is_none()
    }

    /// Cells whose entry violates the row/column prefix constraint.
    pub fn misplaced(&self) -> Vec<(usize, usize, NodeId)> {
        let mut bad = Vec::new();
        for (r, row) in self.rows.iter().enumerate() {
            for (c, cell) in row.iter().enumerate() {
                if let Some(p) = cell {
                    if self.cell_for(p.id) != Some((r, c)) {
                        bad.push((r, c, p.id));
                    }
                }
            }
        }
        bad
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
    fn placement_follows_prefix() {
        let owner = NodeId(0xab00_0000_0000_0000_0000_0000_0000_0000);
        let mut rt = RoutingTable::new(owner);
        assert!(rt.insert(peer(0x1000_0000_0000_0000_0000_0000_0000_0000)));
        assert!(rt.insert(peer(0xa300_0000_0000_0000_0000_0000_0000_0000)));
        assert!(!rt.insert(peer(owner.0)));
        assert_eq!(rt.get(0, 1).unwrap().id.0 >> 124, 1);
        assert!(rt.get(1, 3).is_some());
        // the owner's own digit column stays empty
        assert!(rt.get(0, 0xa).is_none());
        assert!(rt.get(1, 0xb).is_none());
        assert!(rt.misplaced().is_empty());
        assert_eq!(rt.len(), 2);
    }

    #[test]
    fn occupied_cell_is_kept() {
        let mut rt = RoutingTable::new(NodeId(0));
        let a = peer(0x1000_0000_0000_0000_0000_0000_0000_0000);
        let b = peer(0x1fff_0000_0000_0000_0000_0000_0000_0000);
        assert!(rt.insert(a));
        assert!(!rt.insert(b));
        assert!(rt.contains(a.id));
        assert!(!rt.contains(b.id));
        assert!(rt.remove(a.id));
        assert!(!rt.remove(a.id));
        assert!(rt.insert(b));
    }
}
