use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::{local_finetune, predict, Example, LocalDataset, LocalTrainConfig, ModelParams, PersonalState};
use crate::overlay::{NodeId, Overlay};
use crate::simnet::{LinkModel, Sim};
use crate::tree::{GroupId, GroupTree, TreeConfig};
use crate::Error;

fn gid() -> GroupId {
    GroupId::from_name("agg").unwrap()
}

fn scalar(v: f64) -> ModelParams {
    ModelParams::new(1, 1, vec![v], vec![0.0]).unwrap()
}

fn msg(v: f64, weight: u64) -> AggregateMessage {
    AggregateMessage::new(gid(), 0, scalar(v), weight).unwrap()
}

fn random_params(rng: &mut ChaCha8Rng) -> ModelParams {
    ModelParams::random(2, 3, 5.0, rng)
}

/// Random rooted tree over `n` fresh ids: node `i` hangs under a random
/// earlier node.
fn random_topology(rng: &mut ChaCha8Rng, n: usize) -> (Topology, Vec<(NodeId, NodeId)>) {
    let ids: Vec<NodeId> = (0..n as u128).map(|i| NodeId(i + 1)).collect();
    let mut topo = Topology::new(ids[0]);
    let mut edges = Vec::new();
    for i in 1..n {
        let p = ids[rng.random_range(0..i)];
        topo.add_edge(p, ids[i]).unwrap();
        edges.push((p, ids[i]));
    }
    (topo, edges)
}

fn flat_mean(values: &[&ModelParams]) -> ModelParams {
    let mut out = ModelParams::zeros(values[0].labels(), values[0].hidden());
    for v in values {
        for (o, x) in out.values_mut().zip(v.values()) {
            *o += x;
        }
    }
    let n = values.len() as f64;
    for o in out.values_mut() {
        *o /= n;
    }
    out
}

/// Unweighted recursive average written directly over the edge list.
fn recursive_average(
    node: NodeId,
    kids: &BTreeMap<NodeId, Vec<NodeId>>,
    leaf_values: &BTreeMap<NodeId, ModelParams>,
) -> Option<Vec<f64>> {
    let parts: Vec<Vec<f64>> = match kids.get(&node) {
        Some(cs) if !cs.is_empty() => cs
            .iter()
            .filter_map(|c| recursive_average(*c, kids, leaf_values))
            .collect(),
        _ => return leaf_values.get(&node).map(|v| v.values().collect()),
    };
    if parts.is_empty() {
        return None;
    }
    let len = parts[0].len();
    Some(
        (0..len)
            .map(|i| parts.iter().map(|p| p[i]).sum::<f64>() / parts.len() as f64)
            .collect(),
    )
}

#[test]
fn single_child_is_identity() {
    for mode in [AggMode::Paper, AggMode::Weighted] {
        let m = msg(3.5, 4);
        assert_eq!(branch_aggregate(std::slice::from_ref(&m), mode).unwrap(), m);
    }
}

#[test]
fn balanced_pair_averages() {
    for mode in [AggMode::Paper, AggMode::Weighted] {
        let out = branch_aggregate(&[msg(2.0, 1), msg(4.0, 1)], mode).unwrap();
        assert_eq!(out.payload.weights()[0], 3.0);
        assert_eq!(out.weight, 2);
    }
}

#[test]
fn weights_change_only_weighted_mode() {
    let kids = [msg(2.0, 1), msg(4.0, 3)];
    assert_eq!(
        branch_aggregate(&kids, AggMode::Paper).unwrap().payload.weights()[0],
        3.0
    );
    assert_eq!(
        branch_aggregate(&kids, AggMode::Weighted).unwrap().payload.weights()[0],
        3.5
    );
}

#[test]
fn mismatched_children_are_rejected() {
    let mut other_round = msg(1.0, 1);
    other_round.round = 1;
    let err = branch_aggregate(&[msg(1.0, 1), other_round], AggMode::Weighted).unwrap_err();
    assert!(matches!(err, Error::Protocol(_)));
    let mut other_group = msg(1.0, 1);
    other_group.group = GroupId::from_name("other").unwrap();
    assert!(matches!(
        branch_aggregate(&[msg(1.0, 1), other_group], AggMode::Paper),
        Err(Error::Protocol(_))
    ));
    assert!(branch_aggregate(&[], AggMode::Paper).is_err());
    assert!(AggregateMessage::new(gid(), 0, scalar(1.0), 0).is_err());
    assert!(AggregateMessage::new(gid(), 0, scalar(f64::NAN), 1).is_err());
}

#[test]
fn aggregate_wire_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = AggregateMessage::new(gid(), 7, random_params(&mut rng), 12).unwrap();
    let bytes = m.to_bytes();
    assert_eq!(bytes.len(), m.byte_len());
    assert_eq!(&bytes[..16], &gid().key().0.to_be_bytes());
    assert_eq!(AggregateMessage::from_bytes(&bytes).unwrap(), m);
    assert!(AggregateMessage::from_bytes(&bytes[..31]).is_err());
}

#[test]
fn star_and_chain_agree_only_when_weighted() {
    // 5 leaves: star vs root -> {a, b -> {c, d, e}}
    let leaves: Vec<NodeId> = (10..15).map(NodeId).collect();
    let values = [1.0, 2.0, 3.0, 10.0, 20.0];
    let contributions: BTreeMap<NodeId, AggregateMessage> =
        leaves.iter().zip(values).map(|(&id, v)| (id, msg(v, 1))).collect();
    let star = Topology::star(NodeId(1), leaves.clone()).unwrap();
    let mut deep = Topology::new(NodeId(1));
    deep.add_edge(NodeId(1), leaves[0]).unwrap();
    deep.add_edge(NodeId(1), NodeId(2)).unwrap();
    for &l in &leaves[1..] {
        deep.add_edge(NodeId(2), l).unwrap();
    }
    let run = |t: &Topology, mode| {
        aggregate_topology(t, &contributions, mode, None)
            .unwrap()
            .unwrap()
            .payload
            .weights()[0]
    };
    assert!((run(&star, AggMode::Weighted) - 7.2).abs() <= 1e-12);
    assert!((run(&deep, AggMode::Weighted) - 7.2).abs() <= 1e-12);
    assert!((run(&star, AggMode::Paper) - 7.2).abs() <= 1e-12);
    // (1 + mean(2, 3, 10, 20)) / 2
    assert!((run(&deep, AggMode::Paper) - 4.875).abs() <= 1e-12);
}

#[test]
fn weighted_tree_equals_flat_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..5 {
        let n = rng.random_range(5..80);
        let (topo, edges) = random_topology(&mut rng, n);
        let mut kids: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        for (p, c) in &edges {
            kids.entry(*p).or_default().push(*c);
        }
        let leaves = topo.leaves();
        for _ in 0..100 {
            let values: BTreeMap<NodeId, ModelParams> = leaves.iter().map(|&l| (l, random_params(&mut rng))).collect();
            let contributions: BTreeMap<NodeId, AggregateMessage> = values
                .iter()
                .map(|(&l, v)| (l, AggregateMessage::new(gid(), 0, v.clone(), 1).unwrap()))
                .collect();
            let weighted = aggregate_topology(&topo, &contributions, AggMode::Weighted, None)
                .unwrap()
                .unwrap();
            let refs: Vec<&ModelParams> = values.values().collect();
            assert!(weighted.payload.max_abs_diff(&flat_mean(&refs)) <= 1e-9);
            assert_eq!(weighted.weight, leaves.len() as u64);

            let per_level = aggregate_topology(&topo, &contributions, AggMode::Paper, None)
                .unwrap()
                .unwrap();
            let oracle = recursive_average(topo.root(), &kids, &values).unwrap();
            for (a, b) in per_level.payload.values().zip(oracle) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn upload_messages_follow_tree_edges() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (topo, _) = random_topology(&mut rng, 40);
    let contributions: BTreeMap<NodeId, AggregateMessage> =
        topo.leaves().into_iter().map(|l| (l, msg(1.0, 1))).collect();
    let mut log = MessageLog::default();
    aggregate_topology(&topo, &contributions, AggMode::Weighted, Some(&mut log)).unwrap();
    // every non-root node sends exactly once, to its parent
    assert_eq!(log.len(), topo.len() - 1);
    for m in &log.messages {
        assert_eq!(topo.parent(m.from), Some(m.to));
    }
}

#[test]
fn root_update_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = random_params(&mut rng);
    let zero = AggregateMessage::new(gid(), 3, ModelParams::zeros(2, 3), 1).unwrap();
    assert_eq!(root_update(&w, &zero, 0.7, 3, Upload::Delta).unwrap(), w);

    let d = AggregateMessage::new(gid(), 3, random_params(&mut rng), 1).unwrap();
    assert_eq!(root_update(&w, &d, 0.0, 3, Upload::Delta).unwrap(), w);

    // eta = 1 with a delta upload lands exactly on the leaf's weights
    let w_final = random_params(&mut rng);
    let delta = AggregateMessage::new(gid(), 3, w.sub(&w_final), 1).unwrap();
    let next = root_update(&w, &delta, 1.0, 3, Upload::Delta).unwrap();
    assert!(next.max_abs_diff(&w_final) <= 1e-12);

    let avg = AggregateMessage::new(gid(), 3, w_final.clone(), 1).unwrap();
    assert_eq!(root_update(&w, &avg, 1.0, 3, Upload::Weights).unwrap(), w_final);

    assert!(matches!(
        root_update(&w, &d, 1.0, 4, Upload::Delta),
        Err(Error::Protocol(_))
    ));
}

struct World {
    overlay: Overlay,
    tree: GroupTree,
    leaves: BTreeMap<NodeId, LeafState>,
}

fn dataset(rng: &mut ChaCha8Rng, n: usize, h: usize) -> LocalDataset {
    let examples = (0..n)
        .map(|i| {
            let y = i % 2;
            let sign = if y == 1 { 1.0 } else { -1.0 };
            let x = (0..h)
                .map(|k| if k == 0 { sign } else { 0.0 } + rng.random_range(-0.8..0.8))
                .collect();
            Example { x, y }
        })
        .collect();
    LocalDataset::new(examples, 0)
}

fn world(n: usize, fanout: usize, seed: u64) -> World {
    let mut overlay = Overlay::with_random_nodes(n, seed);
    let ids = overlay.live_ids();
    let config = TreeConfig {
        fanout_cap: fanout,
        intercept: fanout < n,
        ..TreeConfig::default()
    };
    let mut tree = GroupTree::create(&mut overlay, ids[0], "agg", config).unwrap();
    for &id in &ids {
        if !tree.contains(id) {
            tree.join(&mut overlay, id).unwrap();
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xda7a);
    let leaves = ids
        .iter()
        .map(|&id| {
            let personal = PersonalState::new(ModelParams::zeros(2, 4), 0.1, 0.2);
            (
                id,
                LeafState {
                    data: dataset(&mut rng, 24, 4),
                    personal,
                },
            )
        })
        .collect();
    World { overlay, tree, leaves }
}

fn full_batch(steps: usize) -> RoundConfig {
    RoundConfig {
        round: 0,
        eta: 1.0,
        aggregation: AggMode::Weighted,
        upload: Upload::Delta,
        train: LocalTrainConfig {
            steps,
            batch: 24,
            data_term: true,
        },
        gossip_hops: 0,
        seed: 9,
    }
}

#[test]
fn single_member_round_is_local_gradient_descent() {
    let mut w = world(1, 16, 5);
    let id = w.tree.root();
    let global = ModelParams::zeros(2, 4);
    let state = w.leaves[&id].clone();
    let cfg = full_batch(1);
    let out = centralized_round(&w.tree, &w.overlay, &global, &mut w.leaves, &cfg, None).unwrap();
    let g = crate::model::pfl_grad(&state.data, &global, &state.personal).unwrap();
    let mut expect = global.clone();
    expect.axpy(-state.personal.eta_local, &g.w_cla);
    assert!(out.weights.max_abs_diff(&expect) <= 1e-15);
    assert_eq!(out.metrics.messages, 0);
    assert_eq!(out.metrics.root_weight, 1.0);
}

#[test]
fn star_round_is_flat_fedavg() {
    let mut w = world(30, 64, 6);
    assert_eq!(w.tree.stats(&w.overlay).depth, 1);
    let global = ModelParams::zeros(2, 4);
    let before = w.leaves.clone();
    let cfg = full_batch(5);
    let out = centralized_round(&w.tree, &w.overlay, &global, &mut w.leaves, &cfg, None).unwrap();

    // oracle: train each non-root member on its own and average the weights
    let mut finals = Vec::new();
    for (id, s) in &before {
        if *id == w.tree.root() {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        finals.push(
            local_finetune(&s.data, &global, &s.personal, &cfg.train, &mut rng)
                .unwrap()
                .weights,
        );
    }
    let refs: Vec<&ModelParams> = finals.iter().collect();
    assert!(out.weights.max_abs_diff(&flat_mean(&refs)) <= 1e-9);
    assert_eq!(out.metrics.contributors, 29);
    assert_eq!(out.metrics.root_ingress_msgs, 29);
}

#[test]
fn fanout_bounds_ingress() {
    let mut w = world(1000, 16, 7);
    let global = ModelParams::zeros(2, 4);
    let cfg = RoundConfig {
        train: LocalTrainConfig {
            steps: 1,
            batch: 4,
            data_term: true,
        },
        ..full_batch(1)
    };
    let out = centralized_round(&w.tree, &w.overlay, &global, &mut w.leaves, &cfg, None).unwrap();
    assert!(out.metrics.max_ingress_msgs <= 16);
    assert_eq!(out.metrics.root_weight as usize, out.metrics.contributors);
    assert_eq!(out.metrics.contributors, w.tree.leaves().len());

    let mut star = world(1000, 1000, 7);
    let out = centralized_round(&star.tree, &star.overlay, &global, &mut star.leaves, &cfg, None).unwrap();
    assert_eq!(out.metrics.max_ingress_msgs, 999);
}

#[test]
fn download_reaches_every_member_once() {
    let mut w = world(200, 4, 8);
    let global = ModelParams::zeros(2, 4);
    let out = centralized_round(&w.tree, &w.overlay, &global, &mut w.leaves, &full_batch(1), None).unwrap();
    let mut got: BTreeMap<NodeId, usize> = BTreeMap::new();
    for m in out.log.messages.iter().filter(|m| m.phase == Phase::Download) {
        *got.entry(m.to).or_default() += 1;
    }
    assert_eq!(got.len(), 199);
    assert!(got.values().all(|&c| c == 1));
}

#[test]
fn decentralized_without_gossip_matches_star() {
    let mut star = world(25, 64, 10);
    let global = ModelParams::zeros(2, 4);
    let cfg = full_batch(3);
    let mut leaves = star.leaves.clone();
    let central = centralized_round(&star.tree, &star.overlay, &global, &mut star.leaves, &cfg, None).unwrap();
    let ids: Vec<NodeId> = star.tree.leaves();
    let social = SocialGraph::complete(&ids);
    let dec = decentralized_round(&star.tree, &mut star.overlay, &social, &global, &mut leaves, &cfg, None).unwrap();
    assert!(dec.weights.max_abs_diff(&central.weights) <= 1e-9);
    assert_eq!(dec.metrics.root_weight, central.metrics.root_weight);
    // with no mixing every forward is a single leaf's result
    assert_eq!(dec.metrics.privacy_violations, ids.len());
}

#[test]
fn gossip_conserves_mass_and_mean() {
    let mut w = world(120, 8, 11);
    let global = ModelParams::zeros(2, 4);
    let ids = w.tree.leaves();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let social = SocialGraph::random(&ids, 1, &mut rng);
    let mut star_leaves = w.leaves.clone();
    let cfg = RoundConfig {
        gossip_hops: 3,
        ..full_batch(2)
    };
    let dec = decentralized_round(&w.tree, &mut w.overlay, &social, &global, &mut w.leaves, &cfg, None).unwrap();
    assert!((dec.metrics.root_weight - ids.len() as f64).abs() <= 1e-9);
    assert_eq!(dec.metrics.privacy_violations, 0);
    assert_eq!(dec.metrics.isolated, 0);
    let forwards: Vec<_> = dec.log.messages.iter().filter(|m| m.phase == Phase::Forward).collect();
    assert!(forwards.iter().all(|m| m.contributors >= 3 && m.sole.is_none()));
    assert!(forwards.iter().any(|m| m.to == w.tree.root()));

    // push-sum keeps the root on the flat mean, same as the weighted tree
    let central = centralized_round(&w.tree, &w.overlay, &global, &mut star_leaves, &full_batch(2), None).unwrap();
    assert!(dec.weights.max_abs_diff(&central.weights) <= 1e-9);
}

#[test]
fn isolated_leaves_forward_directly() {
    let mut w = world(20, 64, 12);
    let global = ModelParams::zeros(2, 4);
    let ids = w.tree.leaves();
    let mut social = SocialGraph::ring(&ids[..10]);
    for &id in &ids[10..] {
        social.add_node(id);
    }
    let cfg = RoundConfig {
        gossip_hops: 2,
        ..full_batch(1)
    };
    let dec = decentralized_round(&w.tree, &mut w.overlay, &social, &global, &mut w.leaves, &cfg, None).unwrap();
    assert_eq!(dec.metrics.isolated, ids.len() - 10);
    // isolated leaves have no friends, so their raw result is not a leak
    assert_eq!(dec.metrics.privacy_violations, 0);
}

#[test]
fn pairwise_gossip_averages() {
    let (a, b) = (NodeId(1), NodeId(2));
    let buffers = BTreeMap::from([
        (
            a,
            GossipBuffer {
                sum: scalar(1.0),
                mass: 1.0,
            },
        ),
        (
            b,
            GossipBuffer {
                sum: scalar(5.0),
                mass: 1.0,
            },
        ),
    ]);
    let friends = BTreeMap::from([(a, vec![b]), (b, vec![a])]);
    for mode in [AggMode::Paper, AggMode::Weighted] {
        let next = gossip_hop(&buffers, &friends, mode);
        assert_eq!(next[&a].estimate().weights()[0], 3.0);
        assert_eq!(next[&b].estimate().weights()[0], 3.0);
    }
}

#[test]
fn ring_gossip_follows_averaging_matrix() {
    let n = 8;
    let ids: Vec<NodeId> = (0..n as u128).map(NodeId).collect();
    let friends: BTreeMap<NodeId, Vec<NodeId>> = (0..n)
        .map(|i| (ids[i], vec![ids[(i + n - 1) % n], ids[(i + 1) % n]]))
        .collect();
    let start: Vec<f64> = (0..n).map(|i| (i * i) as f64).collect();
    let mean = start.iter().sum::<f64>() / n as f64;
    let mut buffers: BTreeMap<NodeId, GossipBuffer> = ids
        .iter()
        .zip(&start)
        .map(|(&id, &v)| {
            (
                id,
                GossipBuffer {
                    sum: scalar(v),
                    mass: 1.0,
                },
            )
        })
        .collect();

    // oracle: x <- A x with A = circulant(1/3 on self and both neighbours)
    let mut x = start.clone();
    for _ in 0..8 {
        x = (0..n)
            .map(|i| (x[(i + n - 1) % n] + x[i] + x[(i + 1) % n]) / 3.0)
            .collect();
        buffers = gossip_hop(&buffers, &friends, AggMode::Weighted);
        for (i, id) in ids.iter().enumerate() {
            assert!((buffers[id].estimate().weights()[0] - x[i]).abs() <= 1e-9);
        }
    }
    let spread = x.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max);
    // 8 hops leave a visible residual on a ring of 8
    assert!(spread > 1e-6);
    for _ in 0..200 {
        buffers = gossip_hop(&buffers, &friends, AggMode::Weighted);
    }
    for b in buffers.values() {
        assert!((b.estimate().weights()[0] - mean).abs() <= 1e-6);
    }
}

#[test]
fn gossip_mass_is_conserved_on_irregular_graphs() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let ids: Vec<NodeId> = (0..30u128).map(NodeId).collect();
    let g = SocialGraph::random(&ids, 2, &mut rng);
    let friends: BTreeMap<NodeId, Vec<NodeId>> = ids.iter().map(|&i| (i, g.friends(i).collect())).collect();
    let mut buffers: BTreeMap<NodeId, GossipBuffer> = ids
        .iter()
        .map(|&i| {
            (
                i,
                GossipBuffer {
                    sum: scalar(rng.random_range(-5.0..5.0)),
                    mass: 1.0,
                },
            )
        })
        .collect();
    let total: f64 = buffers.values().map(|b| b.sum.weights()[0]).sum();
    for _ in 0..10 {
        buffers = gossip_hop(&buffers, &friends, AggMode::Weighted);
        let m: f64 = buffers.values().map(|b| b.mass).sum();
        let s: f64 = buffers.values().map(|b| b.sum.weights()[0]).sum();
        assert!((m - 30.0).abs() <= 1e-9);
        assert!((s - total).abs() <= 1e-9);
    }
}

#[test]
fn social_graph_validation() {
    let mut g = SocialGraph::new();
    assert!(g.add_edge(NodeId(1), NodeId(1)).is_err());
    g.add_edge(NodeId(1), NodeId(2)).unwrap();
    g.validate().unwrap();
    assert_eq!(g.degree(NodeId(2)), 1);
    let ring = SocialGraph::ring(&[NodeId(1), NodeId(2), NodeId(3)]);
    assert!(ring.nodes().all(|n| ring.degree(n) == 2));
    let json = serde_json::to_string(&ring).unwrap();
    assert_eq!(serde_json::from_str::<SocialGraph>(&json).unwrap(), ring);
}

fn tally(votes: &[u64], mass: &[f64]) -> Tally {
    Tally {
        votes: votes.to_vec(),
        mass: mass.to_vec(),
    }
}

#[test]
fn majority_rules() {
    assert_eq!(majority(&tally(&[1, 2], &[1.2, 1.8])), 1);
    assert_eq!(majority(&tally(&[2, 2], &[2.1, 1.9])), 0);
    assert_eq!(majority(&tally(&[2, 2], &[1.9, 2.1])), 1);
    assert_eq!(majority(&tally(&[2, 2], &[2.0, 2.0])), 0);
}

#[test]
fn single_voter_decides() {
    let id = NodeId(5);
    let topo = Topology::new(id);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let w = ModelParams::random(2, 4, 2.0, &mut rng);
    let data = dataset(&mut rng, 50, 4);
    let leaves = BTreeMap::from([(
        id,
        LeafState {
            data: data.clone(),
            personal: PersonalState::new(w.clone(), 0.1, 0.1),
        },
    )]);
    let out = ensemble_infer(&topo, &leaves, &data.examples).unwrap();
    for (ex, label) in data.examples.iter().zip(&out.labels) {
        assert_eq!(*label, predict(&ex.x, &w).unwrap());
    }
    assert_eq!(out.messages, 0);
    assert!(matches!(
        ensemble_infer(&topo, &BTreeMap::new(), &data.examples),
        Err(Error::NotAvailable(_))
    ));
}

#[test]
fn ensemble_matches_flat_recount() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let (topo, _) = random_topology(&mut rng, 160);
    let voters = topo.leaves();
    let leaves: BTreeMap<NodeId, LeafState> = voters
        .iter()
        .map(|&id| {
            let w = ModelParams::random(2, 4, 1.0, &mut rng);
            (
                id,
                LeafState {
                    data: LocalDataset::default(),
                    personal: PersonalState::new(w, 0.1, 0.1),
                },
            )
        })
        .collect();
    let examples = dataset(&mut rng, 300, 4).examples;
    let out = ensemble_infer(&topo, &leaves, &examples).unwrap();
    assert_eq!(out.voters.len(), voters.len());
    for (i, ex) in examples.iter().enumerate() {
        let mut votes = [0u64; 2];
        let mut mass = [0f64; 2];
        for s in leaves.values() {
            let p = crate::model::forward(&ex.x, &s.personal.w_per).unwrap();
            votes[predict(&ex.x, &s.personal.w_per).unwrap()] += 1;
            mass[0] += p[0];
            mass[1] += p[1];
        }
        assert_eq!(out.tallies[i].votes, votes.to_vec());
        let expect = if votes[1] > votes[0] || (votes[1] == votes[0] && mass[1] > mass[0]) {
            1
        } else {
            0
        };
        assert_eq!(out.labels[i], expect);
    }
}

#[test]
fn selector_thresholds() {
    let cfg = SelectorConfig::default();
    assert_eq!(select_mode(None, &cfg), Mode::Centralized);
    assert_eq!(select_mode(Some(&LinkStats::default()), &cfg), Mode::Centralized);
    let at = LinkStats {
        max_ingress_bytes: cfg.max_ingress_bytes,
        root_latency: 0.0,
    };
    assert_eq!(select_mode(Some(&at), &cfg), Mode::Centralized);
    let over = LinkStats {
        max_ingress_bytes: cfg.max_ingress_bytes + 1,
        root_latency: 0.0,
    };
    assert_eq!(select_mode(Some(&over), &cfg), Mode::Decentralized);
    let slow = LinkStats {
        max_ingress_bytes: 0,
        root_latency: cfg.max_round_latency + 1.0,
    };
    assert_eq!(select_mode(Some(&slow), &cfg), Mode::Decentralized);
}

#[test]
fn selector_hysteresis_limits_switching() {
    let cfg = SelectorConfig::default();
    let b = cfg.max_ingress_bytes;
    let mut sel = ModeSelector::new(cfg);
    let mut modes = vec![sel.current()];
    for r in 0..40 {
        let bytes = if r % 2 == 0 { b + 1 } else { b - 1 };
        modes.push(sel.observe(&LinkStats {
            max_ingress_bytes: bytes,
            root_latency: 0.0,
        }));
    }
    let switches: Vec<usize> = (1..modes.len()).filter(|&i| modes[i] != modes[i - 1]).collect();
    assert!(!switches.is_empty());
    for w in switches.windows(2) {
        assert!(w[1] - w[0] >= 2, "switches at {w:?}");
    }
}

#[test]
fn rounds_are_deterministic() {
    let run = || {
        let mut w = world(80, 8, 16);
        let global = ModelParams::zeros(2, 4);
        let cfg = RoundConfig {
            train: LocalTrainConfig {
                steps: 4,
                batch: 6,
                data_term: true,
            },
            ..full_batch(1)
        };
        let mut sim = Sim::new(3, LinkModel::default());
        let a = centralized_round(&w.tree, &w.overlay, &global, &mut w.leaves, &cfg, Some(&mut sim)).unwrap();
        let ids = w.tree.leaves();
        let social = SocialGraph::ring(&ids);
        let cfg = RoundConfig {
            round: 1,
            gossip_hops: 2,
            ..cfg
        };
        let b = decentralized_round(
            &w.tree,
            &mut w.overlay,
            &social,
            &a.weights,
            &mut w.leaves,
            &cfg,
            Some(&mut sim),
        )
        .unwrap();
        (
            a.weights.to_bytes(),
            b.weights.to_bytes(),
            a.metrics.latency,
            b.metrics.latency,
        )
    };
    let (x, y) = (run(), run());
    assert_eq!(x, y);
    assert!(x.2.unwrap() > 0.0 && x.3.unwrap() > 0.0);
}

#[test]
fn round_log_line_round_trips() {
    let mut w = world(10, 4, 17);
    let global = ModelParams::zeros(2, 4);
    let out = centralized_round(&w.tree, &w.overlay, &global, &mut w.leaves, &full_batch(1), None).unwrap();
    let mut buf = Vec::new();
    out.metrics.write_line(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.matches('\n').count(), 1);
    let back: RoundMetrics = serde_json::from_str(text.trim()).unwrap();
    assert_eq!(back, out.metrics);
}

#[test]
fn failed_interior_node_drops_its_subtree_for_the_round() {
    let mut w = world(100, 4, 18);
    let root = w.tree.root();
    let victim = w.tree.children(root).next().unwrap();
    let lost: BTreeSet<NodeId> = w
        .tree
        .leaves()
        .into_iter()
        .filter(|&l| {
            let mut n = l;
            while let Some(p) = w.tree.parent(n) {
                if p == victim {
                    return true;
                }
                n = p;
            }
            false
        })
        .collect();
    w.overlay.fail(victim).unwrap();
    let global = ModelParams::zeros(2, 4);
    let out = centralized_round(&w.tree, &w.overlay, &global, &mut w.leaves, &full_batch(1), None).unwrap();
    assert_eq!(out.metrics.contributors, w.tree.leaves().len() - lost.len());
    assert_eq!(out.metrics.root_weight as usize, out.metrics.contributors);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn weighted_aggregation_ignores_shape(seed in 0u64..10_000, n in 2usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (topo, _) = random_topology(&mut rng, n);
        let leaves = topo.leaves();
        let values: Vec<ModelParams> = leaves.iter().map(|_| random_params(&mut rng)).collect();
        let contributions: BTreeMap<NodeId, AggregateMessage> = leaves
            .iter()
            .zip(&values)
            .map(|(&l, v)| (l, AggregateMessage::new(gid(), 0, v.clone(), 1).unwrap()))
            .collect();
        let tree = aggregate_topology(&topo, &contributions, AggMode::Weighted, None).unwrap().unwrap();
        let star = Topology::star(NodeId(10_000), leaves.clone()).unwrap();
        let flat = aggregate_topology(&star, &contributions, AggMode::Weighted, None).unwrap().unwrap();
        prop_assert!(tree.payload.max_abs_diff(&flat.payload) <= 1e-9);
        prop_assert_eq!(tree.weight, leaves.len() as u64);
    }
}
