use serde::{Deserialize, Serialize};

use crate::simnet::SimTime;

use super::{Mode, RoundMetrics};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectorConfig {
    /// Per-node aggregation ingress per round, bytes.
    pub max_ingress_bytes: u64,
    /// Root round latency, simulated ms.
    pub max_round_latency: SimTime,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        Self {
            max_ingress_bytes: 1 << 20,
            max_round_latency: 2000.0,
        }
    }
}

/// Link measurements from one completed round.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LinkStats {
    pub max_ingress_bytes: u64,
    pub root_latency: SimTime,
}

impl LinkStats {
    pub fn from_metrics(m: &RoundMetrics) -> Self {
        Self {
            max_ingress_bytes: m.max_ingress_bytes,
            root_latency: m.latency.unwrap_or(0.0),
        }
    }
}

/// Stateless decision: decentralized iff either threshold is exceeded.
pub fn select_mode(stats: Option<&LinkStats>, cfg: &SelectorConfig) -> Mode {
    match stats {
        Some(s) if s.max_ingress_bytes > cfg.max_ingress_bytes || s.root_latency > cfg.max_round_latency => {
            Mode::Decentralized
        }
        _ => Mode::Centralized,
    }
}

/// [`select_mode`] with one round of hysteresis: the round after a switch
/// always keeps the new mode.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeSelector {
    config: SelectorConfig,
    current: Mode,
    hold: bool,
}

impl ModeSelector {
    pub fn new(config: SelectorConfig) -> Self {
        Self {
            config,
            current: Mode::Centralized,
            hold: false,
        }
    }

    pub fn current(&self) -> Mode {
        self.current
    }

    /// Feeds one round's stats and returns the mode for the next round.
    pub fn observe(&mut self, stats: &LinkStats) -> Mode {
        if self.hold {
            self.hold = false;
            return self.current;
        }
        let want = select_mode(Some(stats), &self.config);
        if want != self.current {
            self.current = want;
            self.hold = true;
        }
        self.current
    }
}
