use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::overlay::{NodeId, Overlay};
use crate::tree::GroupTree;

/// A rooted tree snapshot used for one round: only live members reachable
/// from the root over live links.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Topology {
    root: NodeId,
    children: BTreeMap<NodeId, Vec<NodeId>>,
    parent: BTreeMap<NodeId, NodeId>,
}

impl Topology {
    pub fn new(root: NodeId) -> Self {
        Self {
            root,
            children: BTreeMap::from([(root, Vec::new())]),
            parent: BTreeMap::new(),
        }
    }

    /// Adds `child` under `parent`, which must already be present.
    pub fn add_edge(&mut self, parent: NodeId, child: NodeId) -> Result<()> {
        if !self.children.contains_key(&parent) {
            return Err(Error::invalid(format!("parent {parent} is not in the topology")));
        }
        if self.children.contains_key(&child) {
            return Err(Error::invalid(format!("{child} is already in the topology")));
        }
        self.children.get_mut(&parent).expect("present").push(child);
        self.children.insert(child, Vec::new());
        self.parent.insert(child, parent);
        Ok(())
    }

    pub fn star(root: NodeId, leaves: impl IntoIterator<Item = NodeId>) -> Result<Self> {
        let mut t = Topology::new(root);
        for l in leaves {
            t.add_edge(root, l)?;
        }
        Ok(t)
    }

    pub fn from_tree(tree: &GroupTree, overlay: &Overlay) -> Result<Self> {
        let root = tree.root();
        if !overlay.is_alive(root) {
            return Err(Error::NotAvailable(format!("root {root} of {} is down", tree.name())));
        }
        let mut t = Topology::new(root);
        let mut queue = VecDeque::from([root]);
        while let Some(n) = queue.pop_front() {
            for c in tree.children(n) {
                if overlay.is_alive(c) && !t.contains(c) {
                    t.add_edge(n, c)?;
                    queue.push_back(c);
                }
            }
        }
        Ok(t)
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn len(&self) -> usize {
        self.children.len()
    }

    pub fn is_empty(&self) -> bool {
        self.children.is_empty()
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.children.contains_key(&id)
    }

    pub fn children(&self, id: NodeId) -> &[NodeId] {
        self.children.get(&id).map_or(&[], Vec::as_slice)
    }

    pub fn parent(&self, id: NodeId) -> Option<NodeId> {
        self.parent.get(&id).copied()
    }

    /// Childless nodes; a lone root counts as a leaf.
    pub fn leaves(&self) -> Vec<NodeId> {
        self.children
            .iter()
            .filter(|(_, c)| c.is_empty())
            .map(|(id, _)| *id)
            .collect()
    }

    /// Breadth-first order from the root.
    pub fn bfs(&self) -> Vec<NodeId> {
        let mut out = Vec::with_capacity(self.len());
        let mut queue = VecDeque::from([self.root]);
        while let Some(n) = queue.pop_front() {
            out.push(n);
            queue.extend(self.children(n).iter().copied());
        }
        out
    }

    /// Every node after all of its descendants.
    pub fn postorder(&self) -> Vec<NodeId> {
        let mut out = self.bfs();
        out.reverse();
        out
    }

    pub fn depth(&self) -> usize {
        let mut depth = BTreeMap::from([(self.root, 0usize)]);
        for n in self.bfs() {
            let d = depth[&n];
            for c in self.children(n) {
                depth.insert(*c, d + 1);
            }
        }
        depth.into_values().max().unwrap_or(0)
    }
}

/// Undirected friendship links between leaves.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SocialGraph {
    friends: BTreeMap<NodeId, BTreeSet<NodeId>>,
}

impl SocialGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, id: NodeId) {
        self.friends.entry(id).or_default();
    }

    pub fn add_edge(&mut self, a: NodeId, b: NodeId) -> Result<()> {
        if a == b {
            return Err(Error::invalid(format!("self-loop at {a}")));
        }
        self.friends.entry(a).or_default().insert(b);
        self.friends.entry(b).or_default().insert(a);
        Ok(())
    }

    pub fn complete(ids: &[NodeId]) -> Self {
        let mut g = SocialGraph::new();
        for (i, &a) in ids.iter().enumerate() {
            g.add_node(a);
            for &b in &ids[i + 1..] {
                g.add_edge(a, b).expect("distinct ids");
            }
        }
        g
    }

    /// Each id befriends its two neighbours in the given order.
    pub fn ring(ids: &[NodeId]) -> Self {
        let mut g = SocialGraph::new();
        for &a in ids {
            g.add_node(a);
        }
        if ids.len() >= 2 {
            for i in 0..ids.len() {
                let (a, b) = (ids[i], ids[(i + 1) % ids.len()]);
                if a != b {
                    g.add_edge(a, b).expect("distinct ids");
                }
            }
        }
        g
    }

    /// Ring over a shuffled order plus `extra` random chords per node.
    pub fn random<R: Rng + ?Sized>(ids: &[NodeId], extra: usize, rng: &mut R) -> Self {
        let mut order = ids.to_vec();
        order.shuffle(rng);
        let mut g = SocialGraph::ring(&order);
        if ids.len() > 2 {
            for &a in ids {
                for _ in 0..extra {
                    let b = ids[rng.random_range(0..ids.len())];
                    if a != b {
                        g.add_edge(a, b).expect("distinct ids");
                    }
                }
            }
        }
        g
    }

    pub fn friends(&self, id: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        self.friends.get(&id).into_iter().flatten().copied()
    }

    pub fn degree(&self, id: NodeId) -> usize {
        self.friends.get(&id).map_or(0, BTreeSet::len)
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.friends.keys().copied()
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.friends.contains_key(&id)
    }

    pub fn validate(&self) -> Result<()> {
        for (a, fs) in &self.friends {
            for b in fs {
                if a == b {
                    return Err(Error::invalid(format!("self-loop at {a}")));
                }
                if !self.friends.get(b).is_some_and(|s| s.contains(a)) {
                    return Err(Error::invalid(format!("link {a} -> {b} is not symmetric")));
                }
            }
        }
        Ok(())
    }
}
