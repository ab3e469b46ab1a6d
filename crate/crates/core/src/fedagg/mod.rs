//! Federated rounds over an aggregation tree: branch aggregation, the root
//! update, the centralized and gossip-based round protocols, majority-vote
//! ensemble inference and the mode selector.

mod ensemble;
mod rounds;
mod selector;
mod topology;

#[cfg(test)]
mod tests;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::overlay::NodeId;
use crate::tree::GroupId;

pub use ensemble::{ensemble_infer, majority, EnsembleOutcome, Tally};
pub use rounds::{
    aggregate_topology, centralized_round, decentralized_round, gossip_hop, GossipBuffer, LeafState, LoggedMessage,
    MessageLog, Phase, RoundConfig, RoundMetrics, RoundOutcome, Traffic,
};
pub use selector::{select_mode, LinkStats, ModeSelector, SelectorConfig};
pub use topology::{SocialGraph, Topology};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Centralized,
    Decentralized,
}

/// How an interior node combines its children's messages.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggMode {
    /// Unweighted mean over the direct children.
    Paper,
    /// Mean weighted by the number of leaves behind each child.
    #[default]
    Weighted,
}

/// What a leaf sends upward after local training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Upload {
    /// `w_start - w_final`.
    #[default]
    Delta,
    /// `w_final`.
    Weights,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregateMessage {
    pub group: GroupId,
    pub round: u64,
    pub payload: ModelParams,
    /// Number of leaf contributions folded into `payload`.
    pub weight: u64,
}

impl AggregateMessage {
    pub fn new(group: GroupId, round: u64, payload: ModelParams, weight: u64) -> Result<Self> {
        if weight == 0 {
            return Err(Error::invalid("aggregate weight must be at least 1"));
        }
        if !payload.is_finite() {
            return Err(Error::invalid("aggregate payload is not finite"));
        }
        Ok(Self {
            group,
            round,
            payload,
            weight,
        })
    }

    pub fn byte_len(&self) -> usize {
        16 + 8 + 8 + self.payload.byte_len()
    }

    /// Group id (16 bytes, big-endian), round and weight (u64 LE), then the
    /// payload in [`ModelParams::to_bytes`] layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_len());
        out.extend_from_slice(&self.group.key().0.to_be_bytes());
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.weight.to_le_bytes());
        out.extend_from_slice(&self.payload.to_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 32 {
            return Err(Error::invalid("truncated aggregate header"));
        }
        let group = GroupId(NodeId(u128::from_be_bytes(bytes[..16].try_into().expect("16 bytes"))));
        let round = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes"));
        let weight = u64::from_le_bytes(bytes[24..32].try_into().expect("8 bytes"));
        let payload = ModelParams::from_bytes(&bytes[32..])?;
        AggregateMessage::new(group, round, payload, weight)
    }
}

/// Combines the messages of one interior node's children.
pub fn branch_aggregate(children: &[AggregateMessage], mode: AggMode) -> Result<AggregateMessage> {
    let first = children
        .first()
        .ok_or_else(|| Error::invalid("no child messages to aggregate"))?;
    for m in &children[1..] {
        if m.round != first.round || m.group != first.group {
            return Err(Error::protocol(format!(
                "child message for group {} round {} does not match group {} round {}",
                m.group.key(),
                m.round,
                first.group.key(),
                first.round
            )));
        }
        if !m.payload.same_shape(&first.payload) {
            return Err(Error::protocol("child payload shapes differ"));
        }
    }
    let total: u64 = children.iter().map(|m| m.weight).sum();
    if children.len() == 1 {
        return Ok(first.clone());
    }
    let mut payload = ModelParams::zeros(first.payload.labels(), first.payload.hidden());
    match mode {
        AggMode::Paper => {
            for m in children {
                payload.axpy(1.0, &m.payload);
            }
            payload.scale(1.0 / children.len() as f64);
        }
        AggMode::Weighted => {
            for m in children {
                payload.axpy(m.weight as f64, &m.payload);
            }
            payload.scale(1.0 / total as f64);
        }
    }
    Ok(AggregateMessage {
        group: first.group,
        round: first.round,
        payload,
        weight: total,
    })
}

/// `w_t - eta * d`, where `d` is the aggregated delta. With weight uploads
/// the delta is recovered as `w_t - mean_weights`, so `eta = 1` yields the
/// averaged weights.
pub fn root_update(
    w_t: &ModelParams,
    aggregate: &AggregateMessage,
    eta: f64,
    round: u64,
    upload: Upload,
) -> Result<ModelParams> {
    if aggregate.round != round {
        return Err(Error::protocol(format!(
            "stale aggregate for round {} during round {round}",
            aggregate.round
        )));
    }
    if !w_t.same_shape(&aggregate.payload) {
        return Err(Error::protocol("aggregate shape does not match the global model"));
    }
    if !(eta.is_finite() && eta >= 0.0) {
        return Err(Error::invalid("eta must be finite and non-negative"));
    }
    let mut next = w_t.clone();
    if eta == 0.0 {
        return Ok(next);
    }
    match upload {
        Upload::Delta => next.axpy(-eta, &aggregate.payload),
        Upload::Weights => {
            if eta == 1.0 {
                return Ok(aggregate.payload.clone());
            }
            let delta = w_t.sub(&aggregate.payload);
            next.axpy(-eta, &delta);
        }
    }
    Ok(next)
}
