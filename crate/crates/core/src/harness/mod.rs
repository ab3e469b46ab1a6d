//! Experiment orchestration: synthetic topic data, scenario configs,
//! metrics, dissemination timing, oracle audits and result files.

mod audit;
mod data;
mod dissemination;
mod report;
mod scenario;
mod sweep;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fedagg::{AggMode, Mode, SelectorConfig, Upload};
use crate::model::ProximalNorm;
use crate::simnet::{FailureKind, LinkModel, SimTime};
use crate::tree::TreeConfig;

pub use audit::{agg_check, hop_bound, route_check, AggAudit, RouteAudit};
pub use data::{generate_test_set, generate_topic_data, TopicSpec};
pub use dissemination::{measure_dissemination, DisseminationRow, DisseminationSpec};
pub use report::{read_records, summarize, write_csv, write_table, SummaryRow};
pub use scenario::{run_scenario, ScenarioResult, ScenarioSummary, TreeRoundLog};
pub use sweep::{DisseminationGrid, ScenarioGrid, SweepConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopicAssignment {
    /// One tree per topic; every node trains on its tree's topic.
    #[default]
    SingleTopicPerTree,
    /// Topics interleaved across the trees.
    Mixed,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProtocolChoice {
    #[default]
    Centralized,
    Decentralized,
    /// Chosen per tree and round by the mode selector.
    Auto,
}

impl std::str::FromStr for ProtocolChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "centralized" => Ok(Self::Centralized),
            "decentralized" => Ok(Self::Decentralized),
            "auto" => Ok(Self::Auto),
            other => Err(Error::invalid(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub labels: usize,
    pub hidden: usize,
    pub lambda: f64,
    pub eta_local: f64,
    pub steps: usize,
    pub batch: usize,
    pub norm: ProximalNorm,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            labels: 2,
            hidden: 32,
            lambda: 1.0,
            eta_local: 0.1,
            steps: 10,
            batch: 32,
            norm: ProximalNorm::Squared,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AggregationConfig {
    /// Root step size.
    pub eta: f64,
    pub mode: AggMode,
    pub upload: Upload,
    pub gossip_hops: usize,
    /// Random friendships per leaf on top of a ring.
    pub social_extra_links: usize,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        Self {
            eta: 1.0,
            mode: AggMode::Weighted,
            upload: Upload::Delta,
            gossip_hops: 3,
            social_extra_links: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TopicConfig {
    pub count: u32,
    /// Distance between the two class means.
    pub separation: f64,
    /// Per-coordinate noise standard deviation.
    pub scale: f64,
    pub samples_per_node: usize,
    pub test_samples: usize,
}

impl Default for TopicConfig {
    fn default() -> Self {
        Self {
            count: 3,
            separation: 4.0,
            scale: 1.0,
            samples_per_node: 200,
            test_samples: 400,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeartbeatConfig {
    pub period: SimTime,
    pub timeout: SimTime,
    pub intercept: bool,
}

impl Default for HeartbeatConfig {
    fn default() -> Self {
        let t = TreeConfig::default();
        Self {
            period: t.heartbeat_period,
            timeout: t.failure_timeout,
            intercept: t.intercept,
        }
    }
}

/// A node failure or recovery applied before the given round. `node`
/// indexes the overlay's node ids in ascending order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduledFailure {
    pub round: u64,
    pub node: usize,
    pub kind: FailureKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub seed: u64,
    #[serde(default = "defaults::nodes")]
    pub nodes: usize,
    #[serde(default = "defaults::fanout")]
    pub fanout: usize,
    #[serde(default = "defaults::trees")]
    pub trees: usize,
    #[serde(default)]
    pub assignment: TopicAssignment,
    #[serde(default = "defaults::rounds")]
    pub rounds: u64,
    #[serde(default)]
    pub mode: ProtocolChoice,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub aggregation: AggregationConfig,
    #[serde(default)]
    pub topics: TopicConfig,
    #[serde(default)]
    pub heartbeat: HeartbeatConfig,
    #[serde(default)]
    pub link: LinkModel,
    #[serde(default)]
    pub selector: SelectorConfig,
    #[serde(default)]
    pub failures: Vec<ScheduledFailure>,
}

mod defaults {
    pub fn nodes() -> usize {
        60
    }
    pub fn fanout() -> usize {
        16
    }
    pub fn trees() -> usize {
        3
    }
    pub fn rounds() -> u64 {
        20
    }
}

impl ScenarioConfig {
    /// Defaults for everything except the seed.
    pub fn new(seed: u64) -> Self {
        toml::from_str(&format!("seed = {seed}")).expect("defaults parse")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn tree_config(&self) -> TreeConfig {
        TreeConfig {
            fanout_cap: self.fanout,
            heartbeat_period: self.heartbeat.period,
            failure_timeout: self.heartbeat.timeout,
            intercept: self.heartbeat.intercept,
        }
    }

    /// Stable label used in result records.
    pub fn id(&self) -> String {
        match &self.name {
            Some(n) => n.clone(),
            None => format!(
                "n{}-f{}-t{}-{}-d{}-s{}",
                self.nodes,
                self.fanout,
                self.trees,
                match self.assignment {
                    TopicAssignment::SingleTopicPerTree => "single",
                    TopicAssignment::Mixed => "mixed",
                },
                self.topics.samples_per_node,
                self.seed
            ),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("nodes", self.nodes),
            ("fanout", self.fanout),
            ("trees", self.trees),
            ("topics.count", self.topics.count as usize),
            ("topics.samples_per_node", self.topics.samples_per_node),
            ("topics.test_samples", self.topics.test_samples),
            ("model.hidden", self.model.hidden),
            ("model.steps", self.model.steps),
            ("model.batch", self.model.batch),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be positive".into()));
        }
        if self.model.labels != 2 {
            return Err(Error::Config("only binary labels are supported".into()));
        }
        if self.model.hidden < 3 {
            return Err(Error::Config("model.hidden must be at least 3".into()));
        }
        if self.model.batch > self.topics.samples_per_node {
            return Err(Error::Config("model.batch exceeds topics.samples_per_node".into()));
        }
        let reals = [
            ("model.lambda", self.model.lambda),
            ("model.eta_local", self.model.eta_local),
            ("aggregation.eta", self.aggregation.eta),
            ("topics.separation", self.topics.separation),
            ("topics.scale", self.topics.scale),
        ];
        for (name, v) in reals {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        if self.model.eta_local == 0.0 || self.topics.separation == 0.0 {
            return Err(Error::Config(
                "model.eta_local and topics.separation must be positive".into(),
            ));
        }
        match self.assignment {
            TopicAssignment::SingleTopicPerTree => {
                if self.trees != self.topics.count as usize {
                    return Err(Error::Config("single_topic_per_tree needs one tree per topic".into()));
                }
            }
            TopicAssignment::Mixed => {}
        }
        if self.nodes < self.trees.max(self.topics.count as usize) {
            return Err(Error::Config("every tree and topic needs at least one node".into()));
        }
        self.tree_config()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.link.validate().map_err(|e| Error::Config(e.to_string()))?;
        let mut dead = std::collections::BTreeSet::new();
        let mut last = 0;
        for f in &self.failures {
            if f.node >= self.nodes {
                return Err(Error::Config(format!(
                    "failure names node {} of {}",
                    f.node, self.nodes
                )));
            }
            if f.round < last || f.round >= self.rounds {
                return Err(Error::Config(
                    "failure rounds must be ascending and within the run".into(),
                ));
            }
            last = f.round;
            let ok = match f.kind {
                FailureKind::Fail => dead.insert(f.node),
                FailureKind::Rejoin => dead.remove(&f.node),
            };
            if !ok {
                return Err(Error::Config(format!("{:?} of node {} in wrong state", f.kind, f.node)));
            }
        }
        Ok(())
    }
}

/// One evaluation of one topic after one round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub scenario: String,
    pub assignment: TopicAssignment,
    pub seed: u64,
    pub data_per_node: usize,
    pub round: u64,
    pub topic: u32,
    pub accuracy: f64,
    pub f1: f64,
    /// Simulated ms until the last member held the new global model.
    pub dissemination_ms: SimTime,
    pub max_ingress_bytes: u64,
    pub mode: Mode,
}

/// Binary F1 for `positive`; 0 when precision and recall are both 0.
pub fn compute_f1(predictions: &[usize], labels: &[usize], positive: usize) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::invalid("no labels"));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &y) in predictions.iter().zip(labels) {
        match (p == positive, y == positive) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp == 0 {
        return Ok(0.0);
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fn_) as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f1_cases() {
        assert_eq!(compute_f1(&[1, 0, 1], &[1, 0, 1], 1).unwrap(), 1.0);
        assert_eq!(compute_f1(&[0, 0, 0], &[1, 0, 1], 1).unwrap(), 0.0);
        // TP=2, FP=1, FN=1
        let f1 = compute_f1(&[1, 1, 1, 0, 0], &[1, 1, 0, 1, 0], 1).unwrap();
        assert!((f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!(compute_f1(&[1], &[1, 0], 1).is_err());
        assert!(compute_f1(&[], &[], 1).is_err());
    }

    #[test]
    fn f1_matches_precision_recall_formula() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let n = rng.random_range(1..50);
            let p: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
            let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
            let tp = p.iter().zip(&y).filter(|(a, b)| **a == 1 && **b == 1).count() as f64;
            let pp = p.iter().filter(|a| **a == 1).count() as f64;
            let ap = y.iter().filter(|a| **a == 1).count() as f64;
            let expect = if tp == 0.0 { 0.0 } else { 2.0 * tp / (pp + ap) };
            let got = compute_f1(&p, &y, 1).unwrap();
            assert!((got - expect).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&got));
        }
    }

    #[test]
    fn config_defaults_and_round_trip() {
        let cfg = ScenarioConfig::new(7);
        cfg.validate().unwrap();
        assert_eq!(cfg.nodes, 60);
        let text = cfg.to_toml().unwrap();
        assert_eq!(ScenarioConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn config_rejects_bad_input() {
        assert!(matches!(ScenarioConfig::from_toml("nodes = 5"), Err(Error::Config(_))));
        assert!(ScenarioConfig::from_toml("seed = 1\nbogus = 2").is_err());
        assert!(ScenarioConfig::from_toml("seed = 1\n[model]\nbogus = 2").is_err());
        assert!(ScenarioConfig::from_toml("seed = 1\nnodes = 0").is_err());
        assert!(ScenarioConfig::from_toml("seed = 1\ntrees = 2").is_err());
        assert!(ScenarioConfig::from_toml("seed = 1\nfanout = 0").is_err());
        let failure = "seed = 1\n[[failures]]\nround = 1\nnode = 0\nkind = \"rejoin\"";
        assert!(ScenarioConfig::from_toml(failure).is_err());
    }

    #[test]
    fn nested_sections_are_addressable() {
        let text = r#"
            seed = 3
            nodes = 30
            assignment = "mixed"
            trees = 1
            mode = "auto"
            [model]
            hidden = 8
            norm = "plain"
            [aggregation]
            mode = "paper"
            upload = "weights"
            [topics]
            samples_per_node = 40
            [link]
            latency_lo = 1.0
            latency_hi = 2.0
            bandwidth = 100.0
            [selector]
            max_ingress_bytes = 10
            [[failures]]
            round = 2
            node = 4
            kind = "fail"
        "#;
        let cfg = ScenarioConfig::from_toml(text).unwrap();
        assert_eq!(cfg.assignment, TopicAssignment::Mixed);
        assert_eq!(cfg.mode, ProtocolChoice::Auto);
        assert_eq!(cfg.model.norm, ProximalNorm::Plain);
        assert_eq!(cfg.aggregation.upload, Upload::Weights);
        assert_eq!(cfg.selector.max_ingress_bytes, 10);
        assert_eq!(cfg.failures.len(), 1);
    }
}
