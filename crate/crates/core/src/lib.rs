//! Deterministic simulator for tree-based federated fine-tuning over a
//! prefix-routed overlay.

pub mod error;
pub mod fedagg;
pub mod harness;
pub mod message;
pub mod model;
pub mod overlay;
pub mod simnet;
pub mod tree;

pub use error::{Error, Result};
pub use message::{Message, MessageKind};
pub use overlay::{HopTrace, NodeId, Overlay, OverlayConfig};
pub use tree::{GroupId, GroupRegistry, GroupTree, TreeConfig, TreeStats};
