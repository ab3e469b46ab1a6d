use serde::{Deserialize, Serialize};

use crate::overlay::NodeId;

/// Typed payloads exchanged over the simulated network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MessageKind {
    Create,
    Join,
    Multicast,
    AggUp,
    Heartbeat,
    Predict,
    Gossip,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub kind: MessageKind,
    /// Key the message is addressed to (group id or node id).
    pub key: NodeId,
    /// Index of the tree the message belongs to when several share a simulation.
    pub tree: usize,
    pub round: u64,
    pub bytes: u64,
}
