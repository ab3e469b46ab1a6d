use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::message::{Message, MessageKind};
use crate::model::{local_finetune, pfl_loss, LocalDataset, LocalTrainConfig, ModelParams, PersonalState};
use crate::overlay::{NodeId, Overlay};
use crate::simnet::{derive_seed, Action, Sim, SimTime};
use crate::tree::{convergecast_timed, multicast_timed, GroupTree};

use super::{branch_aggregate, root_update, AggMode, AggregateMessage, Mode, SocialGraph, Topology, Upload};

/// Data and personalized head held by one participating node.
#[derive(Clone, Debug, PartialEq)]
pub struct LeafState {
    pub data: LocalDataset,
    pub personal: PersonalState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoundConfig {
    pub round: u64,
    /// Root step size.
    pub eta: f64,
    pub aggregation: AggMode,
    pub upload: Upload,
    pub train: LocalTrainConfig,
    /// Synchronous friend-averaging steps before forwarding to the root.
    pub gossip_hops: usize,
    pub seed: u64,
}

impl Default for RoundConfig {
    fn default() -> Self {
        Self {
            round: 0,
            eta: 1.0,
            aggregation: AggMode::Weighted,
            upload: Upload::Delta,
            train: LocalTrainConfig::default(),
            gossip_hops: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Upload,
    Gossip,
    Forward,
    Download,
}

impl Phase {
    /// Everything before the new global model is sent down.
    pub fn is_aggregation(self) -> bool {
        self != Phase::Download
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoggedMessage {
    pub phase: Phase,
    pub from: NodeId,
    pub to: NodeId,
    pub bytes: u64,
    /// Leaves whose local result is mixed into this payload.
    pub contributors: usize,
    /// Set when exactly one leaf contributed.
    pub sole: Option<NodeId>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MessageLog {
    pub messages: Vec<LoggedMessage>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Traffic {
    pub ingress_msgs: u64,
    pub ingress_bytes: u64,
    pub egress_msgs: u64,
    pub egress_bytes: u64,
    /// Ingress before the download phase.
    pub agg_ingress_msgs: u64,
    pub agg_ingress_bytes: u64,
}

impl MessageLog {
    fn push(&mut self, phase: Phase, from: NodeId, to: NodeId, bytes: u64, sources: &BTreeSet<NodeId>) {
        let sole = if sources.len() == 1 {
            sources.first().copied()
        } else {
            None
        };
        self.messages.push(LoggedMessage {
            phase,
            from,
            to,
            bytes,
            contributors: sources.len(),
            sole,
        });
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    pub fn traffic(&self) -> BTreeMap<NodeId, Traffic> {
        let mut out: BTreeMap<NodeId, Traffic> = BTreeMap::new();
        for m in &self.messages {
            let rx = out.entry(m.to).or_default();
            rx.ingress_msgs += 1;
            rx.ingress_bytes += m.bytes;
            if m.phase.is_aggregation() {
                rx.agg_ingress_msgs += 1;
                rx.agg_ingress_bytes += m.bytes;
            }
            let tx = out.entry(m.from).or_default();
            tx.egress_msgs += 1;
            tx.egress_bytes += m.bytes;
        }
        out
    }

    pub fn write_lines<W: Write>(&self, mut out: W) -> Result<()> {
        for m in &self.messages {
            serde_json::to_writer(&mut out, m).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Per-round summary; one JSON line per round in the round log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: u64,
    pub mode: Mode,
    pub contributors: usize,
    /// Leaves with no participating friend; they forward their own result.
    pub isolated: usize,
    /// Total leaf weight that reached the root.
    pub root_weight: f64,
    pub messages: usize,
    pub bytes: u64,
    pub max_ingress_msgs: u64,
    pub max_ingress_bytes: u64,
    pub root_ingress_msgs: u64,
    pub mean_local_loss: f64,
    /// Simulated aggregation plus download time, when a simulation was supplied.
    pub latency: Option<SimTime>,
    /// Leaves with at least two friends whose unmixed result reached the root path.
    pub privacy_violations: usize,
    pub traffic: BTreeMap<NodeId, Traffic>,
}

impl RoundMetrics {
    fn from_log(round: u64, mode: Mode, log: &MessageLog, root: NodeId) -> Self {
        let traffic = log.traffic();
        let max_ingress_msgs = traffic.values().map(|t| t.agg_ingress_msgs).max().unwrap_or(0);
        let max_ingress_bytes = traffic.values().map(|t| t.agg_ingress_bytes).max().unwrap_or(0);
        Self {
            round,
            mode,
            contributors: 0,
            isolated: 0,
            root_weight: 0.0,
            messages: log.len(),
            bytes: log.messages.iter().map(|m| m.bytes).sum(),
            max_ingress_msgs,
            max_ingress_bytes,
            root_ingress_msgs: traffic.get(&root).map_or(0, |t| t.agg_ingress_msgs),
            mean_local_loss: 0.0,
            latency: None,
            privacy_violations: 0,
            traffic,
        }
    }

    pub fn write_line<W: Write>(&self, mut out: W) -> Result<()> {
        serde_json::to_writer(&mut out, self).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundOutcome {
    pub weights: ModelParams,
    pub metrics: RoundMetrics,
    pub log: MessageLog,
}

fn check_config(cfg: &RoundConfig) -> Result<()> {
    if !(cfg.eta.is_finite() && cfg.eta >= 0.0) {
        return Err(Error::invalid("eta must be finite and non-negative"));
    }
    Ok(())
}

/// Generator for one leaf's local training in one round.
fn leaf_rng(seed: u64, round: u64, id: NodeId) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &[round, (id.0 >> 64) as u64, id.0 as u64]))
}

struct Trained {
    payloads: BTreeMap<NodeId, ModelParams>,
    mean_loss: f64,
}

/// Leaves of the round topology that hold data.
fn contributors(topo: &Topology, leaves: &BTreeMap<NodeId, LeafState>) -> Result<Vec<NodeId>> {
    let out: Vec<NodeId> = topo
        .leaves()
        .into_iter()
        .filter(|id| leaves.get(id).is_some_and(|s| !s.data.is_empty()))
        .collect();
    if out.is_empty() {
        return Err(Error::NotAvailable("no live leaf holds training data".into()));
    }
    Ok(out)
}

fn train(
    ids: &[NodeId],
    global: &ModelParams,
    leaves: &mut BTreeMap<NodeId, LeafState>,
    cfg: &RoundConfig,
) -> Result<Trained> {
    let mut payloads = BTreeMap::new();
    let mut loss = 0.0;
    for &id in ids {
        let state = leaves.get_mut(&id).expect("contributor has state");
        let mut rng = leaf_rng(cfg.seed, cfg.round, id);
        let out = local_finetune(&state.data, global, &state.personal, &cfg.train, &mut rng)?;
        loss += pfl_loss(&state.data, &out.weights, &out.personal)?;
        state.personal = out.personal;
        let payload = match cfg.upload {
            Upload::Delta => out.delta,
            Upload::Weights => out.weights,
        };
        payloads.insert(id, payload);
    }
    Ok(Trained {
        payloads,
        mean_loss: loss / ids.len() as f64,
    })
}

fn log_download(topo: &Topology, bytes: u64, log: &mut MessageLog) {
    let none = BTreeSet::new();
    for n in topo.bfs() {
        for &c in topo.children(n) {
            log.push(Phase::Download, n, c, bytes, &none);
        }
    }
}

/// Aggregates leaf messages bottom-up over `topo`; every non-root node
/// holding something sends one message to its parent. Returns what the
/// root ends up with.
pub fn aggregate_topology(
    topo: &Topology,
    contributions: &BTreeMap<NodeId, AggregateMessage>,
    mode: AggMode,
    mut log: Option<&mut MessageLog>,
) -> Result<Option<AggregateMessage>> {
    let mut pending: BTreeMap<NodeId, (AggregateMessage, BTreeSet<NodeId>)> = BTreeMap::new();
    for n in topo.postorder() {
        let mut inputs = Vec::new();
        let mut sources = BTreeSet::new();
        for c in topo.children(n) {
            if let Some((m, s)) = pending.remove(c) {
                inputs.push(m);
                sources.extend(s);
            }
        }
        if let Some(m) = contributions.get(&n) {
            inputs.push(m.clone());
            sources.insert(n);
        }
        if inputs.is_empty() {
            continue;
        }
        let agg = branch_aggregate(&inputs, mode)?;
        match topo.parent(n) {
            Some(parent) => {
                if let Some(log) = log.as_deref_mut() {
                    log.push(Phase::Upload, n, parent, agg.byte_len() as u64, &sources);
                }
                pending.insert(n, (agg, sources));
            }
            None => return Ok(Some(agg)),
        }
    }
    Ok(None)
}

/// Each leaf trains from the current global model; results are aggregated
/// up the tree, applied at the root and the new model is sent back down.
pub fn centralized_round(
    tree: &GroupTree,
    overlay: &Overlay,
    global: &ModelParams,
    leaves: &mut BTreeMap<NodeId, LeafState>,
    cfg: &RoundConfig,
    sim: Option<&mut Sim<Message>>,
) -> Result<RoundOutcome> {
    check_config(cfg)?;
    let topo = Topology::from_tree(tree, overlay)?;
    let ids = contributors(&topo, leaves)?;
    let trained = train(&ids, global, leaves, cfg)?;
    let mut log = MessageLog::default();

    let contributions = trained
        .payloads
        .iter()
        .map(|(&id, p)| Ok((id, AggregateMessage::new(tree.group(), cfg.round, p.clone(), 1)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let agg =
        aggregate_topology(&topo, &contributions, cfg.aggregation, Some(&mut log))?.expect("at least one contribution");
    let weights = root_update(global, &agg, cfg.eta, cfg.round, cfg.upload)?;
    log_download(&topo, weights.byte_len() as u64, &mut log);

    let mut metrics = RoundMetrics::from_log(cfg.round, Mode::Centralized, &log, topo.root());
    metrics.contributors = ids.len();
    metrics.root_weight = agg.weight as f64;
    metrics.mean_local_loss = trained.mean_loss;
    if let Some(sim) = sim {
        let up = convergecast_timed(tree, overlay, sim, agg.byte_len() as u64, cfg.round);
        let down = multicast_timed(&[tree], overlay, sim, weights.byte_len() as u64, cfg.round)[0].completion;
        metrics.latency = Some(up + down);
    }
    Ok(RoundOutcome { weights, metrics, log })
}

/// A gossip buffer: a weighted sum and its mass. The node's estimate is
/// `sum / mass`.
#[derive(Clone, Debug, PartialEq)]
pub struct GossipBuffer {
    pub sum: ModelParams,
    pub mass: f64,
}

impl GossipBuffer {
    pub fn estimate(&self) -> ModelParams {
        let mut e = self.sum.clone();
        e.scale(1.0 / self.mass);
        e
    }
}

/// One synchronous averaging step. Each node's friend set includes itself.
///
/// WEIGHTED: push-sum. Node `i` splits its sum and mass evenly over its
/// friend set, so total mass is conserved. PAPER: node `i` replaces its sum
/// with the plain mean of its friend set's sums, and mass stays 1.
pub fn gossip_hop(
    buffers: &BTreeMap<NodeId, GossipBuffer>,
    friends: &BTreeMap<NodeId, Vec<NodeId>>,
    mode: AggMode,
) -> BTreeMap<NodeId, GossipBuffer> {
    let group = |i: NodeId| std::iter::once(i).chain(friends.get(&i).into_iter().flatten().copied());
    match mode {
        AggMode::Paper => buffers
            .iter()
            .map(|(&i, b)| {
                let mut sum = ModelParams::zeros(b.sum.labels(), b.sum.hidden());
                let mut n = 0usize;
                for j in group(i) {
                    sum.axpy(1.0, &buffers[&j].sum);
                    n += 1;
                }
                sum.scale(1.0 / n as f64);
                (i, GossipBuffer { sum, mass: 1.0 })
            })
            .collect(),
        AggMode::Weighted => {
            let mut next: BTreeMap<NodeId, GossipBuffer> = buffers
                .iter()
                .map(|(&i, b)| {
                    (
                        i,
                        GossipBuffer {
                            sum: ModelParams::zeros(b.sum.labels(), b.sum.hidden()),
                            mass: 0.0,
                        },
                    )
                })
                .collect();
            for (&i, b) in buffers {
                let share = 1.0 / group(i).count() as f64;
                for j in group(i) {
                    let t = next.get_mut(&j).expect("friend has a buffer");
                    t.sum.axpy(share, &b.sum);
                    t.mass += share * b.mass;
                }
            }
            next
        }
    }
}

/// Each leaf trains locally, then `gossip_hops` synchronous averaging steps
/// run over friend sets (each set including the node itself). Afterwards
/// every leaf routes its buffer to the root through the overlay and the
/// root averages what it received.
///
/// WEIGHTED mode runs mass-conserving push-sum, so the root recovers the
/// flat mean of all leaf results. PAPER mode replaces each buffer with the
/// plain mean over its friend set.
pub fn decentralized_round(
    tree: &GroupTree,
    overlay: &mut Overlay,
    social: &SocialGraph,
    global: &ModelParams,
    leaves: &mut BTreeMap<NodeId, LeafState>,
    cfg: &RoundConfig,
    sim: Option<&mut Sim<Message>>,
) -> Result<RoundOutcome> {
    check_config(cfg)?;
    social.validate()?;
    let topo = Topology::from_tree(tree, overlay)?;
    let root = topo.root();
    let ids = contributors(&topo, leaves)?;
    let trained = train(&ids, global, leaves, cfg)?;
    let member: BTreeSet<NodeId> = ids.iter().copied().collect();
    let friends: BTreeMap<NodeId, Vec<NodeId>> = ids
        .iter()
        .map(|&i| (i, social.friends(i).filter(|f| member.contains(f)).collect()))
        .collect();
    let isolated = friends.values().filter(|f| f.is_empty()).count();

    let mut buffers: BTreeMap<NodeId, GossipBuffer> = trained
        .payloads
        .iter()
        .map(|(&id, p)| {
            (
                id,
                GossipBuffer {
                    sum: p.clone(),
                    mass: 1.0,
                },
            )
        })
        .collect();
    let mut sources: BTreeMap<NodeId, BTreeSet<NodeId>> = ids.iter().map(|&i| (i, BTreeSet::from([i]))).collect();
    let mut log = MessageLog::default();
    let msg_bytes = (16 + 8 + 8 + global.byte_len()) as u64;
    let mut gossip_rounds: Vec<Vec<Vec<NodeId>>> = Vec::new();
    for _ in 0..cfg.gossip_hops {
        let mut pairs = Vec::new();
        for &i in &ids {
            for &j in &friends[&i] {
                log.push(Phase::Gossip, i, j, msg_bytes, &sources[&i]);
                pairs.push(vec![i, j]);
            }
        }
        sources = ids
            .iter()
            .map(|&i| {
                let mut s = sources[&i].clone();
                for f in &friends[&i] {
                    s.extend(sources[f].iter().copied());
                }
                (i, s)
            })
            .collect();
        buffers = gossip_hop(&buffers, &friends, cfg.aggregation);
        gossip_rounds.push(pairs);
    }

    let mut paths: Vec<Vec<NodeId>> = Vec::new();
    let mut leaked: BTreeSet<NodeId> = BTreeSet::new();
    for &i in &ids {
        if i == root {
            continue;
        }
        let trace = overlay.route(i, root)?;
        if trace.destination != root {
            return Err(Error::protocol(format!(
                "forward from {i} ended at {} instead of the root",
                trace.destination
            )));
        }
        let src = &sources[&i];
        let mut path = vec![i];
        path.extend(trace.hops);
        for w in path.windows(2) {
            log.push(Phase::Forward, w[0], w[1], msg_bytes, src);
        }
        if src.len() == 1 && social.degree(i) >= 2 {
            leaked.insert(i);
        }
        paths.push(path);
    }

    let mut sum = ModelParams::zeros(global.labels(), global.hidden());
    let mut mass = 0.0;
    for b in buffers.values() {
        sum.axpy(1.0, &b.sum);
        mass += b.mass;
    }
    let payload = match cfg.aggregation {
        AggMode::Weighted => {
            sum.scale(1.0 / mass);
            sum
        }
        AggMode::Paper => {
            sum.scale(1.0 / buffers.len() as f64);
            sum
        }
    };
    let root_weight = match cfg.aggregation {
        AggMode::Weighted => mass,
        AggMode::Paper => ids.len() as f64,
    };
    let agg = AggregateMessage::new(tree.group(), cfg.round, payload, ids.len() as u64)?;
    let weights = root_update(global, &agg, cfg.eta, cfg.round, cfg.upload)?;
    log_download(&topo, weights.byte_len() as u64, &mut log);

    let mut metrics = RoundMetrics::from_log(cfg.round, Mode::Decentralized, &log, root);
    metrics.contributors = ids.len();
    metrics.isolated = isolated;
    metrics.root_weight = root_weight;
    metrics.mean_local_loss = trained.mean_loss;
    metrics.privacy_violations = leaked.len();
    if let Some(sim) = sim {
        let mut t = 0.0;
        for hop in &gossip_rounds {
            t += timed_paths(sim, hop, msg_bytes, cfg.round);
        }
        t += timed_paths(sim, &paths, msg_bytes, cfg.round);
        t += multicast_timed(&[tree], overlay, sim, weights.byte_len() as u64, cfg.round)[0].completion;
        metrics.latency = Some(t);
    }
    Ok(RoundOutcome { weights, metrics, log })
}

/// Sends one message along every path at once, each hop forwarded on
/// delivery, and returns the time until the last path completes.
fn timed_paths(sim: &mut Sim<Message>, paths: &[Vec<NodeId>], bytes: u64, round: u64) -> SimTime {
    let start = sim.now();
    let mut done = start;
    // index of the node currently holding each path's message
    let mut at = vec![0usize; paths.len()];
    let msg = |tree: usize, to: NodeId| Message {
        kind: MessageKind::Gossip,
        key: to,
        tree,
        round,
        bytes,
    };
    for (i, p) in paths.iter().enumerate() {
        if p.len() >= 2 {
            sim.send(p[0], p[1], bytes, msg(i, *p.last().expect("non-empty")));
        }
    }
    sim.run(|sim, event| {
        let Action::Deliver(env) = event.action else { return };
        if env.payload.kind != MessageKind::Gossip {
            return;
        }
        let i = env.payload.tree;
        let path = &paths[i];
        at[i] += 1;
        if at[i] + 1 < path.len() {
            sim.send(path[at[i]], path[at[i] + 1], bytes, env.payload.clone());
        } else {
            done = done.max(event.fire_time);
        }
    });
    done - start
}
