//! Group trees built on the overlay.
//!
//! A group is rooted at the live node numerically closest to its id. Members
//! join by routing a JOIN toward the group id; the first on-path member
//! adopts the joiner, or hands it down to its least-loaded child when its
//! fanout cap is reached. The same tree carries multicast downward and
//! aggregation upward.
//!
//! Parents send existence messages to their children every heartbeat
//! period. A member that hears nothing for `failure_timeout` drops its parent
//! and rejoins with its whole subtree.

pub mod timing;

pub use timing::{convergecast_timed, multicast_timed, DisseminationReport};

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::overlay::{NodeId, Overlay};
use crate::simnet::SimTime;

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GroupId(pub NodeId);

impl GroupId {
    pub fn from_name(name: &str) -> Result<Self> {
        NodeId::from_name(name).map(GroupId)
    }

    /// Group name qualified by its creator, so two creators may reuse a name.
    pub fn qualified(name: &str, creator: &str) -> Result<Self> {
        Self::from_name(&format!("{name}{creator}"))
    }

    pub fn key(self) -> NodeId {
        self.0
    }
}

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl fmt::Debug for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "GroupId({})", &self.0.to_hex()[..8])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TreeConfig {
    pub fanout_cap: usize,
    /// Simulated ms between existence messages.
    pub heartbeat_period: SimTime,
    /// Simulated ms of parent silence before a member rejoins.
    pub failure_timeout: SimTime,
    /// Let the first tree member on a JOIN's path adopt the joiner.
    pub intercept: bool,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self {
            fanout_cap: 16,
            heartbeat_period: 1000.0,
            failure_timeout: 3000.0,
            intercept: true,
        }
    }
}

impl TreeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fanout_cap == 0 {
            return Err(Error::invalid("fanout_cap must be at least 1"));
        }
        if !(self.heartbeat_period.is_finite() && self.heartbeat_period > 0.0) {
            return Err(Error::invalid("heartbeat_period must be positive"));
        }
        let ratio = self.failure_timeout / self.heartbeat_period;
        if !(ratio >= 2.0 && ratio.fract() == 0.0) {
            return Err(Error::invalid(
                "failure_timeout must be a whole multiple of heartbeat_period, at least 2x",
            ));
        }
        Ok(())
    }

    /// Time after a failure by which survivors must again form one tree.
    pub fn repair_window(&self, depth: usize) -> SimTime {
        self.failure_timeout + depth as f64 * self.heartbeat_period
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeMembership {
    pub group: GroupId,
    /// `None` for the root, and briefly for a member between losing its
    /// parent and rejoining.
    pub parent: Option<NodeId>,
    pub children: BTreeSet<NodeId>,
    pub last_parent_heartbeat: SimTime,
    pub fanout_cap: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeStats {
    pub members: usize,
    pub depth: usize,
    pub max_fanout: usize,
    pub depth_histogram: BTreeMap<usize, usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MulticastReport {
    /// Tree depth at which each member received the payload.
    pub delivered: BTreeMap<NodeId, usize>,
    pub forwards: usize,
    pub duplicates: usize,
    /// Dead children discovered while forwarding.
    pub pruned: Vec<NodeId>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TickReport {
    pub existence_messages: usize,
    /// Members that re-issued a JOIN this tick.
    pub rejoins: Vec<NodeId>,
    /// Set when the root changed during this tick.
    pub new_root: Option<NodeId>,
}

/// One aggregation tree.
#[derive(Clone, Debug)]
pub struct GroupTree {
    name: String,
    group: GroupId,
    root: NodeId,
    config: TreeConfig,
    members: BTreeMap<NodeId, TreeMembership>,
    clock: SimTime,
    join_messages: usize,
}

impl GroupTree {
    /// Routes a CREATE from `creator` to the group id; the delivery node
    /// becomes the root.
    pub fn create(overlay: &mut Overlay, creator: NodeId, name: &str, config: TreeConfig) -> Result<Self> {
        config.validate()?;
        let group = GroupId::from_name(name)?;
        let trace = overlay.route(creator, group.key())?;
        let root = trace.destination;
        let mut tree = GroupTree {
            name: name.to_string(),
            group,
            root,
            config,
            members: BTreeMap::new(),
            clock: 0.0,
            join_messages: 0,
        };
        tree.members.insert(root, tree.membership(None));
        Ok(tree)
    }

    fn membership(&self, parent: Option<NodeId>) -> TreeMembership {
        TreeMembership {
            group: self.group,
            parent,
            children: BTreeSet::new(),
            last_parent_heartbeat: self.clock,
            fanout_cap: self.config.fanout_cap,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn group(&self) -> GroupId {
        self.group
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn config(&self) -> &TreeConfig {
        &self.config
    }

    pub fn clock(&self) -> SimTime {
        self.clock
    }

    pub fn join_messages(&self) -> usize {
        self.join_messages
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.members.contains_key(&id)
    }

    pub fn membership_of(&self, id: NodeId) -> Option<&TreeMembership> {
        self.members.get(&id)
    }

    pub fn members(&self) -> impl Iterator<Item = (&NodeId, &TreeMembership)> {
        self.members.iter()
    }

    pub fn member_ids(&self) -> Vec<NodeId> {
        self.members.keys().copied().collect()
    }

    pub fn parent(&self, id: NodeId) -> Option<NodeId> {
        self.members.get(&id).and_then(|m| m.parent)
    }

    pub fn children(&self, id: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        self.members
            .get(&id)
            .into_iter()
            .flat_map(|m| m.children.iter().copied())
    }

    /// Members without children. A lone root counts as a leaf.
    pub fn leaves(&self) -> Vec<NodeId> {
        self.members
            .iter()
            .filter(|(id, m)| m.children.is_empty() && (**id != self.root || self.members.len() == 1))
            .map(|(id, _)| *id)
            .collect()
    }

    /// Whether `id` reaches the root by following parent links.
    pub fn is_attached(&self, id: NodeId) -> bool {
        let mut cur = id;
        for _ in 0..=self.members.len() {
            if cur == self.root {
                return true;
            }
            match self.parent(cur) {
                Some(p) if self.members.contains_key(&p) => cur = p,
                _ => return false,
            }
        }
        false
    }

    /// Number of members in the subtree under `id`, including `id`.
    pub fn subtree_size(&self, id: NodeId) -> usize {
        let mut count = 0;
        let mut stack = vec![id];
        while let Some(n) = stack.pop() {
            if let Some(m) = self.members.get(&n) {
                count += 1;
                stack.extend(m.children.iter().copied());
            }
        }
        count
    }

    /// Adds `member` by routing a JOIN toward the group id.
    pub fn join(&mut self, overlay: &mut Overlay, member: NodeId) -> Result<NodeId> {
        if self.members.contains_key(&member) {
            return Err(Error::invalid(format!("{member} is already in group {}", self.name)));
        }
        if !overlay.is_alive(member) {
            return Err(Error::invalid(format!("{member} is not a live node")));
        }
        self.members.insert(member, self.membership(None));
        match self.attach(overlay, member) {
            Ok(parent) => Ok(parent),
            Err(e) => {
                self.members.remove(&member);
                Err(e)
            }
        }
    }

    /// Re-adds a member that crashed and came back without its tree state.
    /// Its former children are detached and rejoin once their timers expire.
    pub fn recover(&mut self, overlay: &mut Overlay, member: NodeId) -> Result<NodeId> {
        if let Some(old) = self.members.remove(&member) {
            if let Some(pm) = old.parent.and_then(|p| self.members.get_mut(&p)) {
                pm.children.remove(&member);
            }
            for c in old.children {
                if let Some(cm) = self.members.get_mut(&c) {
                    if cm.parent == Some(member) {
                        cm.parent = None;
                    }
                }
            }
        }
        self.join(overlay, member)
    }

    /// Routes a JOIN for a detached `member` (and its subtree) and links it
    /// under whichever node ends up adopting it. Returns that parent, or the
    /// member itself when it became the root.
    fn attach(&mut self, overlay: &mut Overlay, member: NodeId) -> Result<NodeId> {
        self.join_messages += 1;
        let trace = overlay.route(member, self.group.key())?;
        if !overlay.is_alive(self.root) || !self.members.contains_key(&self.root) {
            self.elect_root(trace.destination);
            if trace.destination == member {
                return Ok(member);
            }
        }
        let mut start = self.root;
        if self.config.intercept {
            if let Some(&hop) = trace
                .hops
                .iter()
                .find(|&&h| h != member && overlay.is_alive(h) && self.is_attached(h))
            {
                start = hop;
            }
        }
        let parent = self.find_capacity(overlay, start);
        self.link(parent, member);
        Ok(parent)
    }

    /// Walks down from `start` until a node with a free child slot turns up,
    /// preferring the child with the fewest descendants (ties to the smaller
    /// id). Dead children found on the way are pruned.
    fn find_capacity(&mut self, overlay: &Overlay, start: NodeId) -> NodeId {
        let mut cur = start;
        loop {
            let cap = self.config.fanout_cap;
            let children: Vec<NodeId> = self.children(cur).collect();
            if children.len() < cap {
                return cur;
            }
            let dead: Vec<NodeId> = children.iter().copied().filter(|c| !overlay.is_alive(*c)).collect();
            if !dead.is_empty() {
                for d in dead {
                    self.forget_dead_child(cur, d);
                }
                continue;
            }
            cur = children
                .into_iter()
                .min_by_key(|&c| (self.subtree_size(c), c))
                .expect("full node has children");
        }
    }

    fn link(&mut self, parent: NodeId, child: NodeId) {
        let now = self.clock;
        let p = self.members.get_mut(&parent).expect("parent is a member");
        p.children.insert(child);
        debug_assert!(p.children.len() <= p.fanout_cap);
        let c = self.members.get_mut(&child).expect("child is a member");
        c.parent = Some(parent);
        c.last_parent_heartbeat = now;
    }

    fn unlink(&mut self, child: NodeId) {
        if let Some(p) = self.members.get_mut(&child).and_then(|m| m.parent.take()) {
            if let Some(pm) = self.members.get_mut(&p) {
                pm.children.remove(&child);
            }
        }
    }

    /// Lazy child-failure detection: drop the dead child and its entry.
    /// Its own children notice through missing heartbeats.
    fn forget_dead_child(&mut self, parent: NodeId, child: NodeId) {
        if let Some(pm) = self.members.get_mut(&parent) {
            pm.children.remove(&child);
        }
        self.members.remove(&child);
    }

    /// Makes `new_root` (the live node now closest to the group id) the root.
    fn elect_root(&mut self, new_root: NodeId) {
        let old = self.root;
        if old != new_root {
            if let Some(m) = self.members.remove(&old) {
                for c in m.children {
                    if let Some(cm) = self.members.get_mut(&c) {
                        if cm.parent == Some(old) {
                            cm.parent = None;
                        }
                    }
                }
            }
        }
        if self.members.contains_key(&new_root) {
            self.unlink(new_root);
        } else {
            let m = self.membership(None);
            self.members.insert(new_root, m);
        }
        self.root = new_root;
    }

    /// Multicasts from `caller`, which must be the root. Returns who got
    /// the payload and at which depth.
    pub fn multicast(&mut self, overlay: &Overlay, caller: NodeId) -> Result<MulticastReport> {
        if caller != self.root {
            return Err(Error::invalid(format!("{caller} is not the root of {}", self.name)));
        }
        let mut report = MulticastReport::default();
        if !overlay.is_alive(self.root) {
            return Ok(report);
        }
        report.delivered.insert(self.root, 0);
        let mut queue = VecDeque::from([(self.root, 0usize)]);
        while let Some((node, depth)) = queue.pop_front() {
            let children: Vec<NodeId> = self.children(node).collect();
            for c in children {
                report.forwards += 1;
                if !overlay.is_alive(c) {
                    self.forget_dead_child(node, c);
                    report.pruned.push(c);
                    continue;
                }
                if report.delivered.insert(c, depth + 1).is_some() {
                    report.duplicates += 1;
                    continue;
                }
                queue.push_back((c, depth + 1));
            }
        }
        Ok(report)
    }

    /// Advances the tree clock to `now`: parents send existence messages,
    /// then members whose parent has been silent past the timeout rejoin.
    pub fn heartbeat_tick(&mut self, overlay: &mut Overlay, now: SimTime) -> Result<TickReport> {
        assert!(now >= self.clock, "tree clock cannot go backwards");
        self.clock = now;
        let mut report = TickReport::default();
        let senders: Vec<(NodeId, Vec<NodeId>)> = self
            .members
            .iter()
            .filter(|(id, _)| overlay.is_alive(**id))
            .map(|(id, m)| (*id, m.children.iter().copied().collect()))
            .collect();
        for (_, children) in senders {
            for c in children {
                report.existence_messages += 1;
                if overlay.is_alive(c) {
                    if let Some(cm) = self.members.get_mut(&c) {
                        cm.last_parent_heartbeat = now;
                    }
                }
            }
        }

        let timeout = self.config.failure_timeout;
        let root = self.root;
        let stale: Vec<NodeId> = self
            .members
            .iter()
            .filter(|(id, m)| **id != root && overlay.is_alive(**id) && now - m.last_parent_heartbeat > timeout)
            .map(|(id, _)| *id)
            .collect();
        for member in stale {
            // an earlier rejoin this tick may already have re-homed it
            if !self.members.contains_key(&member) || member == self.root {
                continue;
            }
            if self.parent(member).is_some_and(|p| overlay.is_alive(p)) && self.is_attached(member) {
                continue;
            }
            let before = self.root;
            self.handle_parent_failure(overlay, member)?;
            report.rejoins.push(member);
            if self.root != before {
                report.new_root = Some(self.root);
            }
        }
        Ok(report)
    }

    /// Drops `member`'s parent link and rejoins it with its subtree.
    pub fn handle_parent_failure(&mut self, overlay: &mut Overlay, member: NodeId) -> Result<()> {
        if member == self.root {
            return Err(Error::invalid("the root has no parent"));
        }
        if let Some(p) = self.parent(member) {
            if !overlay.is_alive(p) {
                // the dead parent is gone for good; its other children
                // detect the loss on their own timers
                self.members.remove(&p);
            }
        }
        self.unlink(member);
        if let Some(m) = self.members.get_mut(&member) {
            m.parent = None;
        }
        // routing must see repaired leaf sets to find the right root
        overlay.repair();
        self.attach(overlay, member)?;
        Ok(())
    }

    /// Statistics from a walk over live members reachable from the root.
    pub fn stats(&self, overlay: &Overlay) -> TreeStats {
        let mut hist = BTreeMap::new();
        let mut depth = 0;
        let mut max_fanout = 0;
        let mut members = 0;
        if overlay.is_alive(self.root) && self.members.contains_key(&self.root) {
            let mut queue = VecDeque::from([(self.root, 0usize)]);
            while let Some((n, d)) = queue.pop_front() {
                members += 1;
                depth = depth.max(d);
                *hist.entry(d).or_insert(0) += 1;
                let children: Vec<NodeId> = self.children(n).collect();
                max_fanout = max_fanout.max(children.len());
                queue.extend(
                    children
                        .into_iter()
                        .filter(|c| overlay.is_alive(*c))
                        .map(|c| (c, d + 1)),
                );
            }
        }
        TreeStats {
            members,
            depth,
            max_fanout,
            depth_histogram: hist,
        }
    }

    /// Checks the structure over live members: one root, consistent
    /// parent/child links, fanout within cap, connected and acyclic.
    pub fn validate(&self, overlay: &Overlay) -> Result<()> {
        let live: BTreeSet<NodeId> = self
            .members
            .keys()
            .copied()
            .filter(|id| overlay.is_alive(*id))
            .collect();
        if !live.contains(&self.root) {
            return Err(Error::protocol("root is not a live member"));
        }
        let mut edges = 0usize;
        for (&id, m) in &self.members {
            if m.children.len() > m.fanout_cap || m.children.len() > self.config.fanout_cap {
                return Err(Error::protocol(format!("{id} has {} children", m.children.len())));
            }
            if !live.contains(&id) {
                continue;
            }
            if id == self.root {
                if m.parent.is_some() {
                    return Err(Error::protocol("root has a parent"));
                }
            } else {
                let p = m.parent.ok_or_else(|| Error::protocol(format!("{id} is detached")))?;
                if !live.contains(&p) {
                    return Err(Error::protocol(format!("{id} hangs off dead/non-member {p}")));
                }
                if !self.members[&p].children.contains(&id) {
                    return Err(Error::protocol(format!("{p} does not list child {id}")));
                }
                edges += 1;
            }
            for c in &m.children {
                if live.contains(c) && self.members[c].parent != Some(id) {
                    return Err(Error::protocol(format!("{c} disagrees about parent {id}")));
                }
            }
        }
        if edges + 1 != live.len() {
            return Err(Error::protocol(format!("{edges} edges over {} members", live.len())));
        }
        let mut seen = BTreeSet::new();
        let mut stack = vec![self.root];
        while let Some(n) = stack.pop() {
            if !seen.insert(n) {
                return Err(Error::protocol(format!("cycle through {n}")));
            }
            stack.extend(self.children(n).filter(|c| live.contains(c)));
        }
        if seen != live {
            return Err(Error::protocol(format!(
                "{} of {} live members reachable",
                seen.len(),
                live.len()
            )));
        }
        Ok(())
    }

    /// Writes `{"group", "parent", "child"}` edge records, one per line.
    pub fn write_edges<W: Write>(&self, mut out: W) -> Result<()> {
        #[derive(Serialize)]
        struct Edge {
            group: GroupId,
            parent: NodeId,
            child: NodeId,
        }
        for (&parent, m) in &self.members {
            for &child in &m.children {
                serde_json::to_writer(
                    &mut out,
                    &Edge {
                        group: self.group,
                        parent,
                        child,
                    },
                )
                .map_err(std::io::Error::from)?;
                out.write_all(b"\n")?;
            }
        }
        Ok(())
    }
}

/// All groups known to a simulation, keyed by group id.
#[derive(Clone, Debug, Default)]
pub struct GroupRegistry {
    trees: BTreeMap<GroupId, GroupTree>,
}

impl GroupRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Creates a group from the smallest live node id.
    pub fn create_group(&mut self, overlay: &mut Overlay, name: &str, config: TreeConfig) -> Result<(GroupId, NodeId)> {
        let creator = *overlay
            .live_ids()
            .first()
            .ok_or_else(|| Error::invalid("overlay has no live nodes"))?;
        self.create_group_from(overlay, creator, name, config)
    }

    pub fn create_group_from(
        &mut self,
        overlay: &mut Overlay,
        creator: NodeId,
        name: &str,
        config: TreeConfig,
    ) -> Result<(GroupId, NodeId)> {
        let group = GroupId::from_name(name)?;
        if self.trees.contains_key(&group) {
            return Err(Error::invalid(format!("group {name:?} already exists")));
        }
        let tree = GroupTree::create(overlay, creator, name, config)?;
        let root = tree.root();
        self.trees.insert(group, tree);
        Ok((group, root))
    }

    pub fn join_group(&mut self, overlay: &mut Overlay, member: NodeId, group: GroupId) -> Result<NodeId> {
        self.trees
            .get_mut(&group)
            .ok_or_else(|| Error::NotFound(format!("group {group}")))?
            .join(overlay, member)
    }

    pub fn get(&self, group: GroupId) -> Option<&GroupTree> {
        self.trees.get(&group)
    }

    pub fn get_mut(&mut self, group: GroupId) -> Option<&mut GroupTree> {
        self.trees.get_mut(&group)
    }

    pub fn trees(&self) -> impl Iterator<Item = &GroupTree> {
        self.trees.values()
    }
}
