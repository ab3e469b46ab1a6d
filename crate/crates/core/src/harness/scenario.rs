use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fedagg::{
    centralized_round, decentralized_round, ensemble_infer, LeafState, LinkStats, Mode, ModeSelector, RoundConfig,
    RoundMetrics, SocialGraph, Topology,
};
use crate::message::Message;
use crate::model::{Example, LocalTrainConfig, ModelParams, PersonalState};
use crate::overlay::{NodeId, Overlay};
use crate::simnet::{derive_seed, FailureKind, Sim};
use crate::tree::{multicast_timed, GroupTree};

use super::{
    compute_f1, generate_test_set, generate_topic_data, MetricsRecord, ProtocolChoice, ScenarioConfig, TopicAssignment,
    TopicSpec,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub scenario: String,
    pub assignment: TopicAssignment,
    pub seed: u64,
    pub data_per_node: usize,
    pub rounds: u64,
    /// Last-round accuracy per topic.
    pub final_accuracy: BTreeMap<u32, f64>,
    pub final_f1: BTreeMap<u32, f64>,
    pub total_bytes: u64,
    /// SHA-256 of each tree's final global weights in wire layout.
    pub weights_sha256: Vec<String>,
}

/// One tree's round, as written to the round log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeRoundLog {
    pub tree: usize,
    /// Mean ensemble accuracy over the topics this tree serves.
    pub accuracy: f64,
    #[serde(flatten)]
    pub metrics: RoundMetrics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioResult {
    pub config: ScenarioConfig,
    pub records: Vec<MetricsRecord>,
    pub rounds: Vec<TreeRoundLog>,
    pub summary: ScenarioSummary,
    pub final_weights: Vec<ModelParams>,
}

impl ScenarioResult {
    /// Writes `metrics.jsonl`, `rounds.jsonl`, `summary.json`, `config.toml`
    /// and one `weights-<tree>.bin` per tree into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut out = BufWriter::new(fs::File::create(dir.join("metrics.jsonl"))?);
        for r in &self.records {
            serde_json::to_writer(&mut out, r).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        let mut out = BufWriter::new(fs::File::create(dir.join("rounds.jsonl"))?);
        for r in &self.rounds {
            serde_json::to_writer(&mut out, r).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        let summary = serde_json::to_string_pretty(&self.summary).map_err(std::io::Error::from)?;
        fs::write(dir.join("summary.json"), summary + "\n")?;
        fs::write(dir.join("config.toml"), self.config.to_toml()?)?;
        for (i, w) in self.final_weights.iter().enumerate() {
            fs::write(dir.join(format!("weights-{i}.bin")), w.to_bytes())?;
        }
        Ok(())
    }
}

struct TreeState {
    tree: GroupTree,
    /// Nodes assigned to this tree, whether or not currently attached.
    assigned: BTreeSet<NodeId>,
    topics: BTreeSet<u32>,
    leaves: BTreeMap<NodeId, LeafState>,
    social: SocialGraph,
    global: ModelParams,
    selector: ModeSelector,
}

fn tree_of(cfg: &ScenarioConfig, index: usize) -> usize {
    match cfg.assignment {
        TopicAssignment::SingleTopicPerTree => index % cfg.topics.count as usize,
        TopicAssignment::Mixed => (index / cfg.topics.count as usize) % cfg.trees,
    }
}

fn group_name(cfg: &ScenarioConfig, k: usize) -> String {
    match cfg.assignment {
        TopicAssignment::SingleTopicPerTree => format!("topic-{k}"),
        TopicAssignment::Mixed => format!("mixed-{k}"),
    }
}

/// Builds the overlay and trees, distributes data and runs `cfg.rounds`
/// rounds, evaluating every topic's held-out set by ensemble vote after
/// each round.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioResult> {
    cfg.validate()?;
    let topics = cfg.topics.count;
    let mut overlay = Overlay::with_random_nodes(cfg.nodes, cfg.seed);
    let ids = overlay.live_ids();
    let topic_of = |i: usize| (i % topics as usize) as u32;

    let mut specs = Vec::new();
    let mut tests: Vec<Vec<Example>> = Vec::new();
    let mut data = BTreeMap::new();
    for t in 0..topics {
        let spec = TopicSpec::standard(
            t,
            topics,
            cfg.model.hidden,
            cfg.topics.separation,
            cfg.topics.scale,
            cfg.topics.samples_per_node,
        )?;
        let nodes: Vec<NodeId> = ids
            .iter()
            .enumerate()
            .filter(|(i, _)| topic_of(*i) == t)
            .map(|(_, id)| *id)
            .collect();
        data.extend(generate_topic_data(&spec, &nodes, cfg.seed)?);
        tests.push(generate_test_set(&spec, cfg.topics.test_samples, cfg.seed)?);
        specs.push(spec);
    }

    let tree_cfg = cfg.tree_config();
    let mut trees: Vec<TreeState> = Vec::with_capacity(cfg.trees);
    for k in 0..cfg.trees {
        let members: Vec<usize> = (0..ids.len()).filter(|&i| tree_of(cfg, i) == k).collect();
        let first = ids[members[0]];
        let mut tree = GroupTree::create(&mut overlay, first, &group_name(cfg, k), tree_cfg.clone())?;
        for &i in &members {
            if !tree.contains(ids[i]) {
                tree.join(&mut overlay, ids[i])?;
            }
        }
        let leaves = members
            .iter()
            .map(|&i| {
                let mut personal = PersonalState::new(
                    ModelParams::zeros(cfg.model.labels, cfg.model.hidden),
                    cfg.model.lambda,
                    cfg.model.eta_local,
                );
                personal.norm = cfg.model.norm;
                (
                    ids[i],
                    LeafState {
                        data: data[&ids[i]].clone(),
                        personal,
                    },
                )
            })
            .collect();
        let assigned: BTreeSet<NodeId> = members.iter().map(|&i| ids[i]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0x50c1a1, k as u64]));
        let member_ids: Vec<NodeId> = assigned.iter().copied().collect();
        let social = SocialGraph::random(&member_ids, cfg.aggregation.social_extra_links, &mut rng);
        trees.push(TreeState {
            tree,
            assigned,
            topics: members.iter().map(|&i| topic_of(i)).collect(),
            leaves,
            social,
            global: ModelParams::zeros(cfg.model.labels, cfg.model.hidden),
            selector: ModeSelector::new(cfg.selector),
        });
    }

    let mut sim: Sim<Message> = Sim::new(derive_seed(cfg.seed, &[0x5e7]), cfg.link);
    let model_bytes = ModelParams::zeros(cfg.model.labels, cfg.model.hidden).byte_len() as u64;
    let ticks_per_round = (cfg.heartbeat.timeout / cfg.heartbeat.period) as usize + 1;
    let mut records = Vec::new();
    let mut logs = Vec::new();
    let mut total_bytes = 0u64;

    for round in 0..cfg.rounds {
        for f in cfg.failures.iter().filter(|f| f.round == round) {
            let id = ids[f.node];
            match f.kind {
                FailureKind::Fail => {
                    overlay.fail(id)?;
                    sim.set_alive(id, false);
                }
                FailureKind::Rejoin => {
                    overlay.rejoin(id)?;
                    sim.set_alive(id, true);
                    for ts in trees.iter_mut().filter(|ts| ts.assigned.contains(&id)) {
                        ts.tree.recover(&mut overlay, id)?;
                    }
                }
            }
        }
        for ts in &mut trees {
            let mut t = ts.tree.clock();
            for _ in 0..ticks_per_round {
                t += cfg.heartbeat.period;
                ts.tree.heartbeat_tick(&mut overlay, t)?;
            }
        }

        let mut modes = Vec::with_capacity(trees.len());
        let mut ingress = Vec::with_capacity(trees.len());
        let mut round_metrics = Vec::with_capacity(trees.len());
        for (k, ts) in trees.iter_mut().enumerate() {
            let mode = match cfg.mode {
                ProtocolChoice::Centralized => Mode::Centralized,
                ProtocolChoice::Decentralized => Mode::Decentralized,
                ProtocolChoice::Auto => ts.selector.current(),
            };
            let rc = RoundConfig {
                round,
                eta: cfg.aggregation.eta,
                aggregation: cfg.aggregation.mode,
                upload: cfg.aggregation.upload,
                train: LocalTrainConfig {
                    steps: cfg.model.steps,
                    batch: cfg.model.batch,
                    data_term: true,
                },
                gossip_hops: cfg.aggregation.gossip_hops,
                seed: derive_seed(cfg.seed, &[k as u64]),
            };
            let out = match mode {
                Mode::Centralized => {
                    centralized_round(&ts.tree, &overlay, &ts.global, &mut ts.leaves, &rc, Some(&mut sim))
                }
                Mode::Decentralized => decentralized_round(
                    &ts.tree,
                    &mut overlay,
                    &ts.social,
                    &ts.global,
                    &mut ts.leaves,
                    &rc,
                    Some(&mut sim),
                ),
            };
            match out {
                Ok(out) => {
                    ts.global = out.weights;
                    if cfg.mode == ProtocolChoice::Auto {
                        ts.selector.observe(&LinkStats::from_metrics(&out.metrics));
                    }
                    total_bytes += out.metrics.bytes;
                    ingress.push(out.metrics.max_ingress_bytes);
                    round_metrics.push(Some(out.metrics));
                }
                // nothing reachable can train this round; the model stands
                Err(Error::NotAvailable(_)) => {
                    ingress.push(0);
                    round_metrics.push(None);
                }
                Err(e) => return Err(e),
            }
            modes.push(mode);
        }

        let tree_refs: Vec<&GroupTree> = trees.iter().map(|ts| &ts.tree).collect();
        let dissemination: Vec<f64> = multicast_timed(&tree_refs, &overlay, &mut sim, model_bytes, round)
            .iter()
            .map(|r| r.completion)
            .collect();

        let mut per_tree_acc: Vec<Vec<f64>> = vec![Vec::new(); trees.len()];
        for t in 0..topics {
            let serving: Vec<usize> = (0..trees.len()).filter(|&k| trees[k].topics.contains(&t)).collect();
            let labels: Vec<usize> = tests[t as usize].iter().map(|e| e.y).collect();
            let (mut acc, mut f1) = (0.0, 0.0);
            for &k in &serving {
                let ts = &trees[k];
                let (a, f) = match Topology::from_tree(&ts.tree, &overlay)
                    .and_then(|topo| ensemble_infer(&topo, &ts.leaves, &tests[t as usize]))
                {
                    Ok(out) => {
                        let hits = out.labels.iter().zip(&labels).filter(|(p, y)| p == y).count();
                        (hits as f64 / labels.len() as f64, compute_f1(&out.labels, &labels, 1)?)
                    }
                    Err(Error::NotAvailable(_)) => (0.0, 0.0),
                    Err(e) => return Err(e),
                };
                per_tree_acc[k].push(a);
                acc += a;
                f1 += f;
            }
            let n = serving.len() as f64;
            records.push(MetricsRecord {
                scenario: cfg.id(),
                assignment: cfg.assignment,
                seed: cfg.seed,
                data_per_node: cfg.topics.samples_per_node,
                round,
                topic: t,
                accuracy: acc / n,
                f1: f1 / n,
                dissemination_ms: serving.iter().map(|&k| dissemination[k]).fold(0.0, f64::max),
                max_ingress_bytes: serving.iter().map(|&k| ingress[k]).max().unwrap_or(0),
                mode: modes[serving[0]],
            });
        }
        for (k, m) in round_metrics.into_iter().enumerate() {
            if let Some(metrics) = m {
                let accs = &per_tree_acc[k];
                let accuracy = accs.iter().sum::<f64>() / accs.len().max(1) as f64;
                logs.push(TreeRoundLog {
                    tree: k,
                    accuracy,
                    metrics,
                });
            }
        }
    }

    let last = cfg.rounds - 1;
    let final_records = records.iter().filter(|r| r.round == last);
    let summary = ScenarioSummary {
        scenario: cfg.id(),
        assignment: cfg.assignment,
        seed: cfg.seed,
        data_per_node: cfg.topics.samples_per_node,
        rounds: cfg.rounds,
        final_accuracy: final_records.clone().map(|r| (r.topic, r.accuracy)).collect(),
        final_f1: final_records.map(|r| (r.topic, r.f1)).collect(),
        total_bytes,
        weights_sha256: trees
            .iter()
            .map(|ts| {
                Sha256::digest(ts.global.to_bytes())
                    .iter()
                    .map(|b| format!("{b:02x}"))
                    .collect()
            })
            .collect(),
    };
    let final_weights = trees.into_iter().map(|ts| ts.global).collect();
    Ok(ScenarioResult {
        config: cfg.clone(),
        records,
        rounds: logs,
        summary,
        final_weights,
    })
}
