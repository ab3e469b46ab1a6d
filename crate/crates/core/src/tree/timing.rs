//! Timed multicast and convergecast over one or more trees sharing a
//! simulation.

use std::collections::BTreeMap;

use crate::message::{Message, MessageKind};
use crate::overlay::{NodeId, Overlay};
use crate::simnet::{Action, Sim, SimTime};

use super::GroupTree;

#[derive(Clone, Debug, PartialEq)]
pub struct DisseminationReport {
    pub start: SimTime,
    /// Absolute receive time per member, root included at `start`.
    pub received: BTreeMap<NodeId, SimTime>,
    /// Time from start until the last member held the payload.
    pub completion: SimTime,
}

fn sync_liveness(trees: &[&GroupTree], overlay: &Overlay, sim: &mut Sim<Message>) {
    for t in trees {
        for id in t.member_ids() {
            sim.set_alive(id, overlay.is_alive(id));
        }
    }
}

/// Multicasts a `bytes`-sized payload from every tree's root at the current
/// simulation time and runs the simulation to quiescence. Each forward is
/// one `send`, so a member receives at the sum of per-hop delays along its
/// path.
pub fn multicast_timed(
    trees: &[&GroupTree],
    overlay: &Overlay,
    sim: &mut Sim<Message>,
    bytes: u64,
    round: u64,
) -> Vec<DisseminationReport> {
    sync_liveness(trees, overlay, sim);
    let start = sim.now();
    let mut reports: Vec<DisseminationReport> = trees
        .iter()
        .map(|t| DisseminationReport {
            start,
            received: BTreeMap::from([(t.root(), start)]),
            completion: 0.0,
        })
        .collect();
    for (i, t) in trees.iter().enumerate() {
        if !overlay.is_alive(t.root()) {
            reports[i].received.clear();
            continue;
        }
        for c in t.children(t.root()) {
            let msg = Message {
                kind: MessageKind::Multicast,
                key: t.group().key(),
                tree: i,
                round,
                bytes,
            };
            sim.send(t.root(), c, bytes, msg);
        }
    }
    sim.run(|sim, event| {
        let Action::Deliver(env) = event.action else { return };
        if env.payload.kind != MessageKind::Multicast {
            return;
        }
        let i = env.payload.tree;
        let report = &mut reports[i];
        if report.received.contains_key(&env.to) {
            return;
        }
        report.received.insert(env.to, event.fire_time);
        for c in trees[i].children(env.to) {
            sim.send(env.to, c, bytes, env.payload.clone());
        }
    });
    for r in &mut reports {
        r.completion = r.received.values().fold(0.0f64, |acc, &t| acc.max(t - r.start));
    }
    reports
}

/// Leaves send `bytes` upward at the current time; every interior node
/// forwards once all of its live children have reported. Returns the time
/// from start until the root has heard from all of its children.
pub fn convergecast_timed(
    tree: &GroupTree,
    overlay: &Overlay,
    sim: &mut Sim<Message>,
    bytes: u64,
    round: u64,
) -> SimTime {
    sync_liveness(&[tree], overlay, sim);
    let start = sim.now();
    let live_children = |id: NodeId| tree.children(id).filter(|c| overlay.is_alive(*c)).count();
    let mut pending: BTreeMap<NodeId, usize> = BTreeMap::new();
    let msg = Message {
        kind: MessageKind::AggUp,
        key: tree.group().key(),
        tree: 0,
        round,
        bytes,
    };
    for (&id, m) in tree.members() {
        if !overlay.is_alive(id) || !tree.is_attached(id) {
            continue;
        }
        let n = live_children(id);
        pending.insert(id, n);
        if n == 0 && id != tree.root() {
            if let Some(p) = m.parent {
                sim.send(id, p, bytes, msg.clone());
            }
        }
    }
    let root = tree.root();
    let mut done_at = start;
    sim.run(|sim, event| {
        let Action::Deliver(env) = event.action else { return };
        if env.payload.kind != MessageKind::AggUp {
            return;
        }
        let Some(left) = pending.get_mut(&env.to) else { return };
        *left = left.saturating_sub(1);
        if *left == 0 {
            if env.to == root {
                done_at = event.fire_time;
            } else if let Some(p) = tree.parent(env.to) {
                sim.send(env.to, p, bytes, env.payload.clone());
            }
        }
    });
    done_at - start
}
