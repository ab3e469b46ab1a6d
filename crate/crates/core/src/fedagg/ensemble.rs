use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{argmax, forward, Example};
use crate::overlay::NodeId;

use super::{LeafState, Topology};

/// Per-label vote counts and summed probability mass for one example.
#[derive(Clone, Debug, PartialEq)]
pub struct Tally {
    pub votes: Vec<u64>,
    pub mass: Vec<f64>,
}

impl Tally {
    fn new(labels: usize) -> Self {
        Self {
            votes: vec![0; labels],
            mass: vec![0.0; labels],
        }
    }

    fn add(&mut self, other: &Tally) {
        for (a, b) in self.votes.iter_mut().zip(&other.votes) {
            *a += b;
        }
        for (a, b) in self.mass.iter_mut().zip(&other.mass) {
            *a += b;
        }
    }

    pub fn total_votes(&self) -> u64 {
        self.votes.iter().sum()
    }
}

/// Most votes; ties go to the larger probability mass, then the smaller label.
pub fn majority(t: &Tally) -> usize {
    let mut best = 0;
    for l in 1..t.votes.len() {
        let better = t.votes[l] > t.votes[best] || (t.votes[l] == t.votes[best] && t.mass[l] > t.mass[best]);
        if better {
            best = l;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleOutcome {
    pub labels: Vec<usize>,
    pub tallies: Vec<Tally>,
    pub voters: Vec<NodeId>,
    /// Tally messages sent child to parent.
    pub messages: usize,
}

/// Every leaf votes with its personalized head; tallies are summed on the
/// way up and the root takes the majority per example.
pub fn ensemble_infer(
    topo: &Topology,
    leaves: &BTreeMap<NodeId, LeafState>,
    examples: &[Example],
) -> Result<EnsembleOutcome> {
    let voters: Vec<NodeId> = topo.leaves().into_iter().filter(|id| leaves.contains_key(id)).collect();
    let Some(first) = voters.first() else {
        return Err(Error::NotAvailable("no live leaf can vote".into()));
    };
    let labels = leaves[first].personal.w_per.labels();
    let mut pending: BTreeMap<NodeId, Vec<Tally>> = BTreeMap::new();
    let mut messages = 0;
    let mut root_tallies = None;
    for n in topo.postorder() {
        let mut acc: Option<Vec<Tally>> = None;
        for c in topo.children(n) {
            if let Some(t) = pending.remove(c) {
                match acc.as_mut() {
                    None => acc = Some(t),
                    Some(a) => a.iter_mut().zip(&t).for_each(|(x, y)| x.add(y)),
                }
            }
        }
        if let Some(state) = leaves.get(&n).filter(|_| topo.children(n).is_empty()) {
            let a = acc.get_or_insert_with(|| vec![Tally::new(labels); examples.len()]);
            for (ex, t) in examples.iter().zip(a.iter_mut()) {
                let p = forward(&ex.x, &state.personal.w_per)?;
                t.votes[argmax(&p)] += 1;
                for (m, pl) in t.mass.iter_mut().zip(&p) {
                    *m += pl;
                }
            }
        }
        let Some(acc) = acc else { continue };
        if topo.parent(n).is_some() {
            messages += 1;
            pending.insert(n, acc);
        } else {
            root_tallies = Some(acc);
        }
    }
    let tallies = root_tallies.expect("at least one voter reaches the root");
    let labels = tallies.iter().map(majority).collect();
    Ok(EnsembleOutcome {
        labels,
        tallies,
        voters,
        messages,
    })
}
